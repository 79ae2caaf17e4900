"""Ranking and classification metrics, cross-model disagreement, rating-bucket study."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .losses import real_positive_probability_values


@dataclass
class RankingMetrics:
    recall_at: dict[int, float]
    ndcg_at: dict[int, float]
    users_evaluated: int = 0
    users_skipped: int = 0
    per_user_recall: dict[int, np.ndarray] = field(default_factory=dict, repr=False)
    per_user_ndcg: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def as_dict(self) -> dict[str, float]:
        out = {f"recall@{k}": v for k, v in self.recall_at.items()}
        out.update({f"ndcg@{k}": v for k, v in self.ndcg_at.items()})
        return out


def score_matrix(model, users: np.ndarray, num_items: int) -> np.ndarray:
    """Scores of every item for each user in ``users`` (rows follow ``users``)."""
    if hasattr(model, "score_users"):
        return model.score_users(users)
    grid = np.stack(np.meshgrid(users, np.arange(num_items), indexing="ij"), axis=-1).reshape(-1, 2)
    return model.forward(grid).reshape(len(users), num_items)


def recall_ndcg(model, test, train, ks=(5, 20), num_negatives: int | None = None,
                seed: int = 0) -> RankingMetrics:
    """Recall@K and ndcg@K over items the user did not train on.

    By default every non-train item is a candidate. With ``num_negatives`` the
    candidates are the user's test positives plus that many non-train,
    non-test items drawn without replacement (all of them if fewer exist).
    Ties in score are broken by ascending item id. Users with no candidate
    items are skipped and counted.
    """
    ks = sorted(int(k) for k in ks)
    users = np.unique(test.pairs[:, 0])
    if not len(users):
        return RankingMetrics({k: 0.0 for k in ks}, {k: 0.0 for k in ks})
    scores = score_matrix(model, users, test.num_items).astype(float)
    seen = train.observed_matrix[users]
    relevant = test.observed_matrix[users] & ~seen
    n_cand = (~seen).sum(axis=1)
    n_pos = relevant.sum(axis=1)
    keep = (n_cand > 0) & (n_pos > 0)
    scores, seen, relevant, n_pos = scores[keep], seen[keep], relevant[keep], n_pos[keep]
    excluded = seen.copy()
    if num_negatives is not None:
        if num_negatives < 0:
            raise ValueError("num_negatives must be non-negative")
        rng = np.random.default_rng(seed)
        for r in range(len(excluded)):
            pool = np.flatnonzero(~seen[r] & ~relevant[r])
            drop = rng.permutation(pool)[num_negatives:]
            excluded[r, drop] = True
    scores[excluded] = -np.inf
    order = np.argsort(-scores, axis=1, kind="stable")
    hits = np.take_along_axis(relevant, order, axis=1)
    discount = 1.0 / np.log2(np.arange(2, hits.shape[1] + 2))
    ideal_cum = np.concatenate([[0.0], np.cumsum(discount)])
    rec, ndcg, rec_u, ndcg_u = {}, {}, {}, {}
    for k in ks:
        h = hits[:, :k]
        r = h.sum(axis=1) / n_pos
        dcg = (h * discount[:h.shape[1]]).sum(axis=1)
        idcg = ideal_cum[np.minimum(n_pos, k)]
        nd = dcg / idcg
        rec_u[k], ndcg_u[k] = r, nd
        rec[k], ndcg[k] = float(r.mean()), float(nd.mean())
    return RankingMetrics(rec, ndcg, int(keep.sum()), int((~keep).sum()), rec_u, ndcg_u)


def predict_labels(model, features) -> np.ndarray:
    p = model.forward(features)
    if p.ndim == 1:
        return (p >= 0.5).astype(np.int64)
    return np.argmax(p, axis=1)


def accuracy(model, dataset, labels: str = "true") -> float:
    """Fraction of argmax predictions equal to the chosen labels (ties: lowest class)."""
    if len(dataset) == 0:
        raise DataError("accuracy of an empty dataset is undefined")
    target = dataset.true_labels if labels == "true" else dataset.noisy_labels
    return float(np.mean(predict_labels(model, dataset.features) == target))


@dataclass
class DisagreementReport:
    mean_diff_clean: float
    mean_diff_noisy: float
    diff_clean: np.ndarray = field(repr=False, default=None)
    diff_noisy: np.ndarray = field(repr=False, default=None)

    @property
    def agreement_clean(self) -> float:
        return 1.0 - self.mean_diff_clean

    @property
    def agreement_noisy(self) -> float:
        return 1.0 - self.mean_diff_noisy


def _mean(a) -> float:
    return float(np.mean(a)) if len(a) else 0.0


def disagreement_binary(model_a, model_b, pairs_clean, pairs_noisy) -> DisagreementReport:
    """Mean |I(a >= 0.5) - I(b >= 0.5)| on clean and on noisy examples."""
    def diff(x):
        x = np.asarray(x)
        if not len(x):
            return np.zeros(0)
        return np.abs((model_a.forward(x) >= 0.5).astype(float) - (model_b.forward(x) >= 0.5))

    dc, dn = diff(pairs_clean), diff(pairs_noisy)
    return DisagreementReport(_mean(dc), _mean(dn), dc, dn)


def disagreement_multiclass(model_a, model_b, dataset) -> DisagreementReport:
    """Argmax agreement split by whether the observed label is corrupted.

    The report carries differences; ``agreement_*`` give 1 - difference.
    """
    agree = predict_labels(model_a, dataset.features) == predict_labels(model_b, dataset.features)
    diff = 1.0 - agree.astype(float)
    noisy = dataset.is_noisy
    return DisagreementReport(_mean(diff[~noisy]), _mean(diff[noisy]), diff[~noisy], diff[noisy])


@dataclass
class RatingStudy:
    means: dict[int, float]
    counts: dict[int, int]
    missing: list[int]

    def spearman(self) -> float:
        from scipy.stats import spearmanr

        keys = sorted(self.means)
        if len(keys) < 2:
            return math.nan
        return float(spearmanr(keys, [self.means[k] for k in keys]).statistic)


def rating_bucket_probability(f, dataset, h=None, h_prime=None, ratings=range(1, 6)) -> RatingStudy:
    """Mean real-positive probability of interacted pairs grouped by rating.

    With ``h``/``h_prime`` the co-trained Bayes formula is used; otherwise the
    target output itself. Empty buckets are omitted and listed in ``missing``.
    """
    if dataset.ratings is None:
        raise DataError("rating study needs ratings on interacted pairs")
    pairs = dataset.pairs
    fv = f.forward(pairs)
    if h is not None:
        prob = real_positive_probability_values(fv, h.forward(pairs), h_prime.forward(pairs))
    else:
        prob = fv
    means, counts, missing = {}, {}, []
    for r in ratings:
        m = dataset.ratings == r
        if m.any():
            means[int(r)] = float(prob[m].mean())
            counts[int(r)] = int(m.sum())
        else:
            missing.append(int(r))
    return RatingStudy(means, counts, missing)
