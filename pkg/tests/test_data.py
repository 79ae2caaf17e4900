
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deca.data import (ImplicitDataset, MultiClassDataset, SplitSpec, dataset_from_json,
                       dataset_to_json, gen_multiclass_blobs, gen_planted_implicit,
                       load_movielens_100k, sample_negatives, split)
from deca.errors import ConfigError, DataError, EmptyCleanTestWarning, ParseError, SamplingError


# -- planted implicit data ----------------------------------------------------------

def test_planted_zero_noise_matches_truth():
    ds = gen_planted_implicit(30, 20, 4, 0.0, 0.0, seed=1)
    assert np.array_equal(ds.observed_matrix, ds.truth_matrix)
    assert np.all(ds.true_labels == 1)


def test_planted_flip_fraction():
    ds = gen_planted_implicit(50, 40, 8, 0.3, 0.0, seed=7)
    frac = np.mean(ds.true_labels == 0)
    assert 0.28 <= frac <= 0.32


def test_planted_noisy_negatives_are_withheld_positives():
    ds = gen_planted_implicit(40, 30, 4, 0.0, 0.25, seed=3)
    withheld = ds.truth_matrix & ~ds.observed_matrix
    assert withheld.sum() == ds.meta["n_withheld"]
    assert ds.meta["n_withheld"] == int(np.floor(0.25 * ds.truth_matrix.sum() + 0.5))


def test_planted_deterministic():
    a = gen_planted_implicit(20, 15, 3, 0.2, 0.1, seed=5)
    b = gen_planted_implicit(20, 15, 3, 0.2, 0.1, seed=5)
    assert dataset_to_json(a) == dataset_to_json(b)


def test_planted_ratings_follow_score():
    ds = gen_planted_implicit(60, 50, 4, 0.3, 0.0, seed=2)
    assert set(np.unique(ds.ratings)) == {1, 2, 3, 4, 5}
    clean_share = [np.mean(ds.true_labels[ds.ratings == r]) for r in range(1, 6)]
    assert clean_share[-1] > clean_share[0]


@pytest.mark.parametrize("kw", [dict(noise_pos=0.5), dict(noise_neg=0.6), dict(noise_pos=-0.1)])
def test_planted_rejects_uninformative_noise(kw):
    args = dict(noise_pos=0.0, noise_neg=0.0) | kw
    with pytest.raises(ConfigError):
        gen_planted_implicit(10, 10, 2, args["noise_pos"], args["noise_neg"], seed=0)


def test_item_popularity_is_recount():
    ds = gen_planted_implicit(30, 25, 3, 0.2, 0.0, seed=4)
    recount = np.zeros(ds.num_items, dtype=int)
    for _, i in ds.pairs:
        recount[i] += 1
    assert np.array_equal(ds.item_popularity, recount)


def test_datasets_are_immutable():
    ds = gen_planted_implicit(10, 10, 2, 0.0, 0.0, seed=0)
    with pytest.raises(ValueError):
        ds.pairs[0, 0] = 3
    mc = gen_multiclass_blobs(2, 5, 2, 1.0, 0.0, seed=0)
    with pytest.raises(ValueError):
        mc.noisy_labels[0] = 1


def test_dataset_json_round_trip():
    ds = gen_planted_implicit(12, 9, 2, 0.2, 0.1, seed=8)
    back = dataset_from_json(dataset_to_json(ds))
    assert np.array_equal(back.pairs, ds.pairs)
    assert np.array_equal(back.truth_matrix, ds.truth_matrix)
    assert np.array_equal(back.ratings, ds.ratings)
    mc = gen_multiclass_blobs(3, 4, 2, 1.0, 0.25, seed=1)
    back = dataset_from_json(dataset_to_json(mc))
    assert np.array_equal(back.features, mc.features)
    assert np.array_equal(back.noisy_labels, mc.noisy_labels)
    assert back.noise_ratio == mc.noise_ratio


def test_out_of_range_interactions_rejected():
    with pytest.raises(DataError):
        ImplicitDataset(2, 2, np.array([[0, 2]]))


# -- blobs --------------------------------------------------------------------------

def test_blobs_zero_noise():
    ds = gen_multiclass_blobs(3, 20, 2, 1.0, 0.0, seed=0)
    assert np.array_equal(ds.noisy_labels, ds.true_labels)


def test_blobs_exact_noise_count():
    ds = gen_multiclass_blobs(4, 250, 5, 1.0, 0.4, seed=0)
    assert int(ds.is_noisy.sum()) == 400


@given(st.integers(2, 5), st.integers(1, 30), st.floats(0.0, 0.999), st.integers(0, 1000))
@settings(max_examples=40, deadline=None)
def test_blobs_corruption_is_exact(C, per_class, rho, seed):
    ds = gen_multiclass_blobs(C, per_class, 2, 1.0, rho, seed)
    n = C * per_class
    assert int(ds.is_noisy.sum()) == int(np.floor(rho * n + 0.5))
    assert ds.noisy_labels.max() < C


def test_blobs_noise_boundaries():
    gen_multiclass_blobs(2, 5, 2, 1.0, 0.5, seed=0)
    gen_multiclass_blobs(2, 5, 2, 1.0, 0.999, seed=0)
    with pytest.raises(ConfigError):
        gen_multiclass_blobs(2, 5, 2, 1.0, 1.0, seed=0)
    with pytest.raises(ConfigError):
        gen_multiclass_blobs(1, 5, 2, 1.0, 0.0, seed=0)


def test_blobs_center_seed_shares_problem():
    a = gen_multiclass_blobs(3, 200, 4, 0.1, 0.0, seed=1)
    b = gen_multiclass_blobs(3, 200, 4, 0.1, 0.0, seed=99, center_seed=1)
    ma = np.stack([a.features[a.true_labels == c].mean(axis=0) for c in range(3)])
    mb = np.stack([b.features[b.true_labels == c].mean(axis=0) for c in range(3)])
    assert np.abs(ma - mb).max() < 0.05
    assert not np.array_equal(a.features, b.features)


def test_multiclass_label_range_checked():
    with pytest.raises(DataError):
        MultiClassDataset(np.zeros((2, 1)), np.array([0, 3]), np.array([0, 1]), 3)


# -- MovieLens ----------------------------------------------------------------------

def test_movielens_parse(tmp_path):
    p = tmp_path / "u.data"
    p.write_text("1 10 5 100\n1\t11\t2\t200\n")
    ds = load_movielens_100k(p)
    assert ds.num_users == 1 and len(ds) == 2
    assert sorted(ds.ratings.tolist()) == [2, 5]
    assert ds.item_ids.tolist() == [10, 11]


def test_movielens_empty(tmp_path):
    p = tmp_path / "u.data"
    p.write_text("")
    ds = load_movielens_100k(p)
    assert ds.num_users == 0 and len(ds) == 0


def test_movielens_bad_rating(tmp_path):
    p = tmp_path / "u.data"
    p.write_text("1 10 5 100\n1 10 9 100\n")
    with pytest.raises(DataError, match="rating 9"):
        load_movielens_100k(p)


def test_movielens_malformed_row(tmp_path):
    p = tmp_path / "u.data"
    p.write_text("1 10 5 100\n2 x 3 100\n")
    with pytest.raises(ParseError, match="line 2") as e:
        load_movielens_100k(p)
    assert e.value.line_no == 2


# -- splits -------------------------------------------------------------------------

def _one_user(n=10, ratings=None):
    pairs = np.stack([np.zeros(n, dtype=int), np.arange(n)], axis=1)
    ratings = np.full(n, 5) if ratings is None else ratings
    return ImplicitDataset(1, n, pairs, ratings=ratings, timestamps=np.arange(n)[::-1].copy())


def test_split_sizes_8_1_1():
    tr, va, te = split(_one_user(), SplitSpec(ratios=(0.8, 0.1, 0.1), clean_test_rule="all"), seed=0)
    assert (len(tr), len(va), len(te)) == (8, 1, 1)


def test_split_partitions_per_user():
    ds = gen_planted_implicit(40, 30, 3, 0.0, 0.0, seed=1)
    tr, va, te = split(ds, SplitSpec(clean_test_rule="all"), seed=3)
    rows = [tuple(p) for part in (tr, va, te) for p in part.pairs]
    assert len(rows) == len(set(rows)) == len(ds)
    for u in range(ds.num_users):
        n = int((ds.pairs[:, 0] == u).sum())
        assert abs(int((tr.pairs[:, 0] == u).sum()) - 0.8 * n) <= 1


def test_split_empty_clean_test_warns():
    ds = _one_user(ratings=np.full(10, 3))
    with pytest.warns(EmptyCleanTestWarning):
        _, _, te = split(ds, SplitSpec(clean_test_rule="rating==5"), seed=0)
    assert len(te) == 0


def test_split_chronological_order():
    ds = gen_planted_implicit(20, 30, 3, 0.0, 0.0, seed=2)
    tr, _, te = split(ds, SplitSpec(mode="chronological", clean_test_rule="all"), seed=0)
    for u in range(ds.num_users):
        t_tr = tr.timestamps[tr.pairs[:, 0] == u]
        t_te = te.timestamps[te.pairs[:, 0] == u]
        if len(t_tr) and len(t_te):
            assert t_tr.max() <= t_te.min()


def test_split_chronological_needs_timestamps():
    ds = ImplicitDataset(1, 3, np.array([[0, 0], [0, 1]]))
    with pytest.raises(ConfigError):
        split(ds, SplitSpec(mode="chronological", clean_test_rule="all"), seed=0)
    mc = gen_multiclass_blobs(2, 5, 2, 1.0, 0.0, seed=0)
    with pytest.raises(ConfigError):
        split(mc, SplitSpec(mode="chronological"), seed=0)


def test_split_truth_rule_keeps_clean_positives():
    ds = gen_planted_implicit(40, 30, 3, 0.3, 0.0, seed=5)
    _, _, te = split(ds, SplitSpec(clean_test_rule="truth"), seed=0)
    assert all(ds.truth_matrix[u, i] for u, i in te.pairs)


@pytest.mark.parametrize("bad", [dict(ratios=(0.5, 0.5, 0.5)), dict(mode="weekly"),
                                 dict(clean_test_rule="stars==5")])
def test_split_spec_validation(bad):
    with pytest.raises(ConfigError):
        SplitSpec(**bad)


def test_split_deterministic():
    ds = gen_planted_implicit(20, 20, 3, 0.2, 0.0, seed=1)
    a = split(ds, SplitSpec(clean_test_rule="all"), seed=4)
    b = split(ds, SplitSpec(clean_test_rule="all"), seed=4)
    for x, y in zip(a, b):
        assert np.array_equal(x.pairs, y.pairs)


def test_multiclass_split_global():
    mc = gen_multiclass_blobs(2, 50, 2, 1.0, 0.2, seed=0)
    tr, va, te = split(mc, SplitSpec(), seed=1)
    assert (len(tr), len(va), len(te)) == (80, 10, 10)


# -- negative sampling ----------------------------------------------------------------

def test_forced_negative():
    pairs = np.array([[0, i] for i in range(5) if i != 3])
    ds = ImplicitDataset(1, 5, pairs)
    for strategy in ("uniform", "wbpr"):
        neg = sample_negatives(ds, pairs, strategy, seed=0)
        assert np.all(neg[:, 1] == 3)


def test_wbpr_popularity_ratio():
    # user 0 interacted with nothing relevant; items A=0 (pop 99), B=1 (pop 1)
    pairs = [[u, 0] for u in range(1, 100)] + [[100, 1]]
    pairs += [[0, 2]]  # the sampling user only misses A and B
    ds = ImplicitDataset(101, 3, np.array(pairs))
    neg = sample_negatives(ds, np.tile([[0, 2]], (10000, 1)), "wbpr", seed=1)
    freq_a = np.mean(neg[:, 1] == 0)
    assert 0.97 <= freq_a <= 0.995


def test_uniform_deterministic_and_never_observed():
    ds = gen_planted_implicit(15, 12, 3, 0.2, 0.0, seed=3)
    a = sample_negatives(ds, ds.pairs, "uniform", seed=9)
    b = sample_negatives(ds, ds.pairs, "uniform", seed=9)
    assert np.array_equal(a, b)
    assert not ds.contains(a).any()
    assert np.array_equal(a[:, 0], ds.pairs[:, 0])


def test_full_user_cannot_be_sampled():
    pairs = np.array([[0, 0], [0, 1]])
    ds = ImplicitDataset(1, 2, pairs)
    with pytest.raises(SamplingError):
        sample_negatives(ds, pairs, "uniform", seed=0)


@given(st.integers(0, 500))
@settings(max_examples=25, deadline=None)
def test_negatives_never_collide(seed):
    rng = np.random.default_rng(seed)
    obs = rng.random((6, 5)) < 0.6
    obs[:, 0] = False  # every user keeps a missing item
    obs[:, 1] = True
    ds = ImplicitDataset(6, 5, np.argwhere(obs))
    neg = sample_negatives(ds, ds.pairs, "wbpr" if seed % 2 else "uniform", seed=seed)
    assert not obs[neg[:, 0], neg[:, 1]].any()
