"""Task wrappers: batching, validation metric and test metrics per problem type."""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .data import ImplicitDataset, MultiClassDataset, sample_negatives
from .metrics import accuracy, recall_ndcg


class Batch(NamedTuple):
    x: np.ndarray
    y: np.ndarray
    idx: np.ndarray  # training-set indices of the rows (positives only, for ranking)


class RankingTask:
    """Implicit-feedback ranking: each positive is paired with one sampled missing item."""

    kind = "binary-ranking"

    def __init__(self, train: ImplicitDataset, valid: ImplicitDataset, test: ImplicitDataset,
                 ks=(5, 20), val_k: int = 20, sampler: str = "uniform",
                 eval_negatives: int | None = None):
        self.train, self.valid, self.test = train, valid, test
        self.eval_negatives = eval_negatives
        self.ks = tuple(ks)
        self.val_k = val_k
        self.sampler = sampler

    @property
    def num_users(self):
        return self.train.num_users

    @property
    def num_items(self):
        return self.train.num_items

    @property
    def val_metric(self) -> str:
        return f"recall@{self.val_k}"

    def batches(self, rng: np.random.Generator, batch_size: int):
        n = len(self.train)
        perm = rng.permutation(n)
        for s in range(0, n, batch_size):
            idx = perm[s:s + batch_size]
            pos = self.train.pairs[idx]
            neg = sample_negatives(self.train, pos, self.sampler, rng=rng)
            y = np.concatenate([np.ones(len(idx), np.int64), np.zeros(len(idx), np.int64)])
            yield Batch(np.concatenate([pos, neg]), y, idx)

    def validate(self, model) -> float:
        return recall_ndcg(model, self.valid, self.train, [self.val_k]).recall_at[self.val_k]

    def test_metrics(self, model) -> dict[str, float]:
        return recall_ndcg(model, self.test, self.train, self.ks, self.eval_negatives).as_dict()


class ClassificationTask:
    """Feature-vector classification with noisy training and validation labels.

    Binary-generic tasks are two-class data used with a single-output model.
    """

    def __init__(self, train: MultiClassDataset, valid: MultiClassDataset,
                 test: MultiClassDataset):
        self.train, self.valid, self.test = train, valid, test

    @property
    def kind(self) -> str:
        return "multi-class" if self.num_classes > 2 else "binary-generic"

    @property
    def num_classes(self) -> int:
        return self.train.num_classes

    @property
    def input_dim(self) -> int:
        return self.train.features.shape[1]

    val_metric = "accuracy"

    def batches(self, rng: np.random.Generator, batch_size: int):
        n = len(self.train)
        perm = rng.permutation(n)
        for s in range(0, n, batch_size):
            idx = perm[s:s + batch_size]
            yield Batch(self.train.features[idx], self.train.noisy_labels[idx], idx)

    def validate(self, model) -> float:
        return accuracy(model, self.valid, labels="noisy")

    def test_metrics(self, model) -> dict[str, float]:
        return {"accuracy": accuracy(model, self.test, labels="true")}

    def with_train_subset(self, index) -> ClassificationTask:
        index = np.sort(np.asarray(index, dtype=np.int64))
        return ClassificationTask(self.train.subset(index), self.valid, self.test)
