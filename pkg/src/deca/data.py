"""Datasets with hidden ground truth: generation, loading, splitting, negative sampling."""
from __future__ import annotations

import json
import re
import warnings
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from .errors import ConfigError, DataError, EmptyCleanTestWarning, ParseError, SamplingError


def _readonly(a):
    if a is None:
        return None
    a = np.array(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class ImplicitDataset:
    """Observed user-item interactions (all label 1) plus hidden truth.

    ``true_labels`` is aligned with ``pairs``; ``truth_matrix`` (synthetic data
    only) holds the true label of every user-item pair and is used for
    evaluation negatives. Missing pairs are implicitly observed as 0.
    """

    num_users: int
    num_items: int
    pairs: np.ndarray
    true_labels: np.ndarray | None = None
    ratings: np.ndarray | None = None
    timestamps: np.ndarray | None = None
    truth_matrix: np.ndarray | None = None
    user_ids: np.ndarray | None = None
    item_ids: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        object.__setattr__(self, "pairs", _readonly(pairs))
        for name in ("true_labels", "ratings", "timestamps", "truth_matrix", "user_ids", "item_ids"):
            object.__setattr__(self, name, _readonly(getattr(self, name)))
        if len(pairs) and (pairs.min() < 0 or pairs[:, 0].max() >= self.num_users
                           or pairs[:, 1].max() >= self.num_items):
            raise DataError("interaction ids out of range")
        for name in ("true_labels", "ratings", "timestamps"):
            arr = getattr(self, name)
            if arr is not None and len(arr) != len(pairs):
                raise DataError(f"{name} must align with pairs")

    def __len__(self):
        return len(self.pairs)

    @cached_property
    def item_popularity(self) -> np.ndarray:
        return np.bincount(self.pairs[:, 1], minlength=self.num_items)

    @cached_property
    def observed_matrix(self) -> np.ndarray:
        m = np.zeros((self.num_users, self.num_items), dtype=bool)
        m[self.pairs[:, 0], self.pairs[:, 1]] = True
        m.flags.writeable = False
        return m

    def contains(self, pairs) -> np.ndarray:
        pairs = np.atleast_2d(np.asarray(pairs, dtype=np.int64))
        ok = ((pairs[:, 0] >= 0) & (pairs[:, 0] < self.num_users)
              & (pairs[:, 1] >= 0) & (pairs[:, 1] < self.num_items))
        out = np.zeros(len(pairs), dtype=bool)
        out[ok] = self.observed_matrix[pairs[ok, 0], pairs[ok, 1]]
        return out

    @property
    def hidden_truth(self) -> dict[tuple[int, int], int]:
        if self.true_labels is None:
            return {}
        return {(int(u), int(i)): int(t) for (u, i), t in zip(self.pairs, self.true_labels)}

    def subset(self, index) -> ImplicitDataset:
        index = np.asarray(index, dtype=np.int64)
        pick = lambda a: None if a is None else a[index]
        return replace(self, pairs=self.pairs[index], true_labels=pick(self.true_labels),
                       ratings=pick(self.ratings), timestamps=pick(self.timestamps), meta=dict(self.meta))

    def to_dict(self) -> dict:
        lst = lambda a: None if a is None else a.tolist()
        truth_pos = None
        if self.truth_matrix is not None:
            truth_pos = np.argwhere(self.truth_matrix).tolist()
        return {
            "meta": {"kind": "implicit", "num_users": self.num_users,
                     "num_items": self.num_items, **self.meta},
            "interactions": self.pairs.tolist(),
            "noisy_labels": [1] * len(self.pairs),
            "true_labels": lst(self.true_labels),
            "ratings": lst(self.ratings),
            "timestamps": lst(self.timestamps),
            "truth_positives": truth_pos,
            "user_ids": lst(self.user_ids),
            "item_ids": lst(self.item_ids),
        }

    @classmethod
    def from_dict(cls, d: dict) -> ImplicitDataset:
        meta = dict(d["meta"])
        nu, ni = meta.pop("num_users"), meta.pop("num_items")
        meta.pop("kind", None)
        arr = lambda k: None if d.get(k) is None else np.asarray(d[k])
        truth = None
        if d.get("truth_positives") is not None:
            truth = np.zeros((nu, ni), dtype=bool)
            tp = np.asarray(d["truth_positives"], dtype=np.int64).reshape(-1, 2)
            truth[tp[:, 0], tp[:, 1]] = True
        return cls(nu, ni, np.asarray(d["interactions"], dtype=np.int64).reshape(-1, 2),
                   true_labels=arr("true_labels"), ratings=arr("ratings"),
                   timestamps=arr("timestamps"), truth_matrix=truth,
                   user_ids=arr("user_ids"), item_ids=arr("item_ids"), meta=meta)


@dataclass(frozen=True, eq=False)
class MultiClassDataset:
    features: np.ndarray
    noisy_labels: np.ndarray
    true_labels: np.ndarray
    num_classes: int
    noise_ratio: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "features", _readonly(np.asarray(self.features, dtype=float)))
        object.__setattr__(self, "noisy_labels", _readonly(np.asarray(self.noisy_labels, dtype=np.int64)))
        object.__setattr__(self, "true_labels", _readonly(np.asarray(self.true_labels, dtype=np.int64)))
        n = len(self.features)
        if len(self.noisy_labels) != n or len(self.true_labels) != n:
            raise DataError("labels must align with features")
        if self.num_classes < 2:
            raise DataError("num_classes must be at least 2")
        for lab in (self.noisy_labels, self.true_labels):
            if n and (lab.min() < 0 or lab.max() >= self.num_classes):
                raise DataError("label value out of range")

    def __len__(self):
        return len(self.features)

    @property
    def is_noisy(self) -> np.ndarray:
        return self.noisy_labels != self.true_labels

    def subset(self, index) -> MultiClassDataset:
        index = np.asarray(index, dtype=np.int64)
        return replace(self, features=self.features[index], noisy_labels=self.noisy_labels[index],
                       true_labels=self.true_labels[index], meta=dict(self.meta))

    def to_dict(self) -> dict:
        return {
            "meta": {"kind": "multiclass", "num_classes": self.num_classes,
                     "noise_ratio": self.noise_ratio, **self.meta},
            "features": self.features.tolist(),
            "noisy_labels": self.noisy_labels.tolist(),
            "true_labels": self.true_labels.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> MultiClassDataset:
        meta = dict(d["meta"])
        meta.pop("kind", None)
        C, rho = meta.pop("num_classes"), meta.pop("noise_ratio")
        dim = len(d["features"][0]) if d["features"] else 0
        feats = np.asarray(d["features"], dtype=float).reshape(-1, dim)
        return cls(feats, np.asarray(d["noisy_labels"]), np.asarray(d["true_labels"]), C, rho, meta)


def dataset_to_json(ds) -> str:
    return json.dumps(ds.to_dict(), sort_keys=True)


def dataset_from_json(text: str):
    d = json.loads(text)
    kind = d["meta"].get("kind")
    if kind == "implicit":
        return ImplicitDataset.from_dict(d)
    if kind == "multiclass":
        return MultiClassDataset.from_dict(d)
    raise DataError(f"unknown dataset kind {kind!r}")


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


# -- generators -------------------------------------------------------------------

def gen_planted_implicit(num_users: int, num_items: int, latent_dim: int, noise_pos: float,
                         noise_neg: float, seed: int, density: float = 0.1,
                         sharpness: float = 4.0) -> ImplicitDataset:
    """Implicit feedback from a planted low-rank logistic preference model.

    True labels are Bernoulli(sigmoid(score)) with the offset solved so that
    the expected true density is ``density``. A ``noise_neg`` fraction of true
    positives is withheld (noisy negatives); then a ``noise_pos`` fraction of
    the kept positives is swapped for uniformly drawn true negatives (noisy
    positives), so the observed count is unchanged. Ratings 1..5 are quantile
    buckets of the planted score among observed pairs.
    """
    if min(num_users, num_items, latent_dim) < 1:
        raise ConfigError("dimensions must be at least 1")
    for name, v in (("noise_pos", noise_pos), ("noise_neg", noise_neg)):
        if not 0.0 <= v < 0.5:
            raise ConfigError(f"{name} must lie in [0, 0.5), got {v}")
    rng = np.random.default_rng(seed)
    P = rng.normal(size=(num_users, latent_dim))
    Q = rng.normal(size=(num_items, latent_dim))
    raw = (P @ Q.T) * (sharpness / np.sqrt(latent_dim))
    offset = brentq(lambda b: expit(raw + b).mean() - density, -50.0, 50.0)
    score = raw + offset
    truth = rng.random(score.shape) < expit(score)

    pos = np.argwhere(truth)
    neg = np.argwhere(~truth)
    order = rng.permutation(len(pos))
    n_withheld = _round_half_up(noise_neg * len(pos))
    kept = pos[order[n_withheld:]]
    n_flip = _round_half_up(noise_pos * len(kept))
    if n_flip > len(neg):
        raise DataError("not enough true negatives to inject positive noise")
    # kept is already in random order, so dropping its head is a uniform draw
    clean = kept[n_flip:]
    noisy = neg[rng.choice(len(neg), size=n_flip, replace=False)]
    pairs = np.concatenate([clean, noisy]).reshape(-1, 2)
    pairs = pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]
    true_labels = truth[pairs[:, 0], pairs[:, 1]].astype(np.int64)

    s = score[pairs[:, 0], pairs[:, 1]]
    ranks = np.empty(len(s), dtype=np.int64)
    ranks[np.argsort(s, kind="stable")] = np.arange(len(s))
    ratings = 1 + (5 * ranks) // max(len(s), 1)
    timestamps = rng.permutation(len(pairs)).astype(np.int64)
    meta = {"generator": "planted", "latent_dim": latent_dim, "noise_pos": noise_pos,
            "noise_neg": noise_neg, "seed": seed, "density": density,
            "n_withheld": n_withheld, "n_flipped": n_flip, "n_kept": int(len(kept))}
    return ImplicitDataset(num_users, num_items, pairs, true_labels=true_labels, ratings=ratings,
                           timestamps=timestamps, truth_matrix=truth, meta=meta)


def gen_multiclass_blobs(num_classes: int, per_class: int, dim: int, spread: float,
                         noise_ratio: float, seed: int,
                         center_seed: int | None = None) -> MultiClassDataset:
    """Gaussian class clusters; exactly round(noise_ratio * N) labels moved to another class.

    Cluster centres come from ``center_seed`` (default ``seed``), so a fresh
    clean sample of the same problem is drawn by keeping ``center_seed`` and
    changing ``seed``.
    """
    if num_classes < 2:
        raise ConfigError("num_classes must be at least 2")
    if per_class < 1 or dim < 1:
        raise ConfigError("per_class and dim must be at least 1")
    if not 0.0 <= noise_ratio < 1.0:
        raise ConfigError(f"noise_ratio must lie in [0, 1), got {noise_ratio}")
    centers = np.random.default_rng(seed if center_seed is None else center_seed).normal(
        size=(num_classes, dim))
    rng = np.random.default_rng([seed, 1])
    y = np.repeat(np.arange(num_classes), per_class)
    X = centers[y] + spread * rng.normal(size=(len(y), dim))
    order = rng.permutation(len(y))
    X, y = X[order], y[order]
    n = len(y)
    n_noisy = _round_half_up(noise_ratio * n)
    idx = rng.choice(n, size=n_noisy, replace=False)
    noisy = y.copy()
    noisy[idx] = (y[idx] + rng.integers(1, num_classes, size=n_noisy)) % num_classes
    meta = {"generator": "blobs", "per_class": per_class, "dim": dim, "spread": spread,
            "seed": seed, "center_seed": seed if center_seed is None else center_seed}
    return MultiClassDataset(X, noisy, y, num_classes, noise_ratio, meta)


# -- loading ----------------------------------------------------------------------

def load_movielens_100k(path) -> ImplicitDataset:
    """Parse whitespace-separated ``user item rating timestamp`` rows.

    Ids are remapped to dense 0-based indices in sorted order of the raw ids.
    Every rated pair is an observed positive; ratings and timestamps are kept.
    """
    rows = []
    for line_no, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ParseError(line_no, f"expected 4 fields, got {len(parts)}")
        try:
            u, i, r, t = (int(p) for p in parts)
        except ValueError:
            raise ParseError(line_no, f"non-integer field in {line.strip()!r}") from None
        if not 1 <= r <= 5:
            raise DataError(f"line {line_no}: rating {r} outside 1..5")
        rows.append((u, i, r, t))
    if not rows:
        return ImplicitDataset(0, 0, np.zeros((0, 2), dtype=np.int64), ratings=np.zeros(0, np.int64),
                               timestamps=np.zeros(0, np.int64), meta={"source": str(path)})
    arr = np.asarray(rows, dtype=np.int64)
    user_ids, users = np.unique(arr[:, 0], return_inverse=True)
    item_ids, items = np.unique(arr[:, 1], return_inverse=True)
    pairs = np.stack([users, items], axis=1)
    if len(np.unique(pairs, axis=0)) != len(pairs):
        raise DataError("duplicate user-item rows")
    return ImplicitDataset(len(user_ids), len(item_ids), pairs, ratings=arr[:, 2],
                           timestamps=arr[:, 3], user_ids=user_ids, item_ids=item_ids,
                           meta={"source": str(path)})


# -- splitting --------------------------------------------------------------------

_RULE = re.compile(r"^rating\s*(==|>=|<=|>|<)\s*(\d+)$")


@dataclass(frozen=True)
class SplitSpec:
    mode: str = "random"
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    clean_test_rule: str = "rating==5"

    def __post_init__(self):
        if self.mode not in ("random", "chronological"):
            raise ConfigError(f"unknown split mode {self.mode!r}")
        if len(self.ratios) != 3 or min(self.ratios) < 0 or abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ConfigError("split ratios must be three non-negative numbers summing to 1")
        if self.clean_test_rule not in ("all", "truth") and not _RULE.match(self.clean_test_rule):
            raise ConfigError(f"unknown clean-test rule {self.clean_test_rule!r}")

    def clean_mask(self, ds: ImplicitDataset) -> np.ndarray:
        rule = self.clean_test_rule
        if rule == "all":
            return np.ones(len(ds), dtype=bool)
        if rule == "truth":
            if ds.true_labels is None:
                raise ConfigError("clean-test rule 'truth' needs hidden true labels")
            return ds.true_labels == 1
        if ds.ratings is None:
            raise ConfigError("rating-based clean-test rule needs ratings")
        op, val = _RULE.match(rule).groups()
        ops = {"==": np.equal, ">=": np.greater_equal, "<=": np.less_equal,
               ">": np.greater, "<": np.less}
        return ops[op](ds.ratings, int(val))


def _group_sizes(n, ratios):
    n_valid = _round_half_up(ratios[1] * n)
    n_test = _round_half_up(ratios[2] * n)
    if n_valid + n_test > n:
        n_test = n - n_valid
    return n - n_valid - n_test, n_valid, n_test


def split(dataset, spec: SplitSpec, seed: int):
    """Partition into (train, valid, test).

    Implicit data are split per user (chronologically or at random); the test
    part then keeps only rows satisfying the clean-test rule, and its
    ``true_labels`` are set to 1 for the kept rows. Multi-class data are split
    globally at random (the test part is scored against true labels).
    """
    rng = np.random.default_rng(seed)
    if isinstance(dataset, MultiClassDataset):
        if spec.mode == "chronological":
            raise ConfigError("chronological split needs timestamps; multi-class data have none")
        perm = rng.permutation(len(dataset))
        a, b, _ = _group_sizes(len(dataset), spec.ratios)
        return (dataset.subset(np.sort(perm[:a])), dataset.subset(np.sort(perm[a:a + b])),
                dataset.subset(np.sort(perm[a + b:])))

    if spec.mode == "chronological" and dataset.timestamps is None:
        raise ConfigError("chronological split requested but the dataset has no timestamps")
    parts = ([], [], [])
    users = dataset.pairs[:, 0]
    order = np.argsort(users, kind="stable")
    bounds = np.searchsorted(users[order], np.arange(dataset.num_users + 1))
    for u in range(dataset.num_users):
        idx = order[bounds[u]:bounds[u + 1]]
        if not len(idx):
            continue
        if spec.mode == "chronological":
            idx = idx[np.lexsort((idx, dataset.timestamps[idx]))]
        else:
            idx = idx[rng.permutation(len(idx))]
        a, b, _ = _group_sizes(len(idx), spec.ratios)
        parts[0].append(idx[:a])
        parts[1].append(idx[a:a + b])
        parts[2].append(idx[a + b:])
    cat = lambda p: np.sort(np.concatenate(p)) if p else np.zeros(0, dtype=np.int64)
    train, valid, test = (dataset.subset(cat(p)) for p in parts)
    clean = spec.clean_mask(test)
    test = test.subset(np.flatnonzero(clean))
    test = replace(test, true_labels=np.ones(len(test), dtype=np.int64),
                   meta={**test.meta, "clean_test_rule": spec.clean_test_rule})
    if len(test) == 0:
        warnings.warn("clean test set is empty under rule " + spec.clean_test_rule,
                      EmptyCleanTestWarning, stacklevel=2)
    return train, valid, test


# -- negative sampling ------------------------------------------------------------

def sample_negatives(dataset: ImplicitDataset, positives, strategy: str = "uniform",
                     seed: int | None = None, rng: np.random.Generator | None = None) -> np.ndarray:
    """One missing item per positive pair, uniform or popularity-weighted (WBPR)."""
    if strategy not in ("uniform", "wbpr"):
        raise ConfigError(f"unknown sampling strategy {strategy!r}")
    rng = rng if rng is not None else np.random.default_rng(seed)
    positives = np.asarray(positives, dtype=np.int64).reshape(-1, 2)
    obs = dataset.observed_matrix
    users = positives[:, 0]
    n_missing = dataset.num_items - obs[users].sum(axis=1) if len(users) else np.zeros(0)
    if np.any(n_missing == 0):
        bad = int(users[np.flatnonzero(n_missing == 0)[0]])
        raise SamplingError(f"user {bad} has no missing items to sample")
    weights = None
    if strategy == "wbpr":
        pop = dataset.item_popularity.astype(float)
        weights = pop / pop.sum() if pop.sum() > 0 else None

    items = np.full(len(users), -1, dtype=np.int64)
    todo = np.arange(len(users))
    for _ in range(20):
        if not len(todo):
            break
        draw = rng.choice(dataset.num_items, size=len(todo), p=weights)
        ok = ~obs[users[todo], draw]
        items[todo[ok]] = draw[ok]
        todo = todo[~ok]
    for j in todo:  # dense users: sample from the explicit missing set
        missing = np.flatnonzero(~obs[users[j]])
        w = None
        if weights is not None:
            w = weights[missing]
            w = w / w.sum() if w.sum() > 0 else None
        items[j] = rng.choice(missing, p=w)
    return np.stack([users, items], axis=1)
