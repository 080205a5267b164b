"""Nested stratified k-fold plans, class-balanced batches and training subsets."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .data import AugmentationPolicy, SinusSample, augment_voxels, derive_seed


# fold planning ----------------------------------------------------------------

def _stratified_deal(ids: Sequence[str], labels: Mapping[str, int], k: int, rng) -> List[List[str]]:
    """Deal each shuffled class round-robin into ``k`` folds, continuing the
    fold pointer across classes so fold sizes differ by at most one."""
    folds: List[List[str]] = [[] for _ in range(k)]
    pointer = 0
    for c in (0, 1):
        members = sorted(i for i in ids if labels[i] == c)
        for j in rng.permutation(len(members)):
            folds[pointer % k].append(members[j])
            pointer += 1
    return [sorted(f) for f in folds]


def _grouped_deal(ids, labels, groups, k, rng):
    by_group: Dict[str, List[str]] = {}
    for i in ids:
        by_group.setdefault(groups[i], []).append(i)
    keys = sorted(by_group)
    # a group counts as anomalous if any member is
    glabels = {g: max(labels[i] for i in by_group[g]) for g in keys}
    gfolds = _stratified_deal(keys, glabels, k, rng)
    return [sorted(i for g in gf for i in by_group[g]) for gf in gfolds]


@dataclass
class InnerSplit:
    train: List[str]
    val: List[str]


@dataclass
class OuterFold:
    test: List[str]
    inner: List[InnerSplit]

    @property
    def train_pool(self) -> List[str]:
        """Every non-test id (the union of the inner train sets)."""
        first = self.inner[0]
        return sorted(first.train + first.val)


@dataclass
class FoldPlan:
    outer: List[OuterFold]
    labels: Dict[str, int] = field(default_factory=dict)

    def rows(self):
        for o, fold in enumerate(self.outer):
            for i, split in enumerate(fold.inner):
                for role, ids in (("train", split.train), ("val", split.val), ("test", fold.test)):
                    for sid in ids:
                        yield o, i, role, sid

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["outer_fold", "inner_fold", "role", "sample_id"])
            w.writerows(self.rows())

    @classmethod
    def read_csv(cls, path) -> "FoldPlan":
        table: Dict[int, Dict[int, Dict[str, List[str]]]] = {}
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                o, i = int(rec["outer_fold"]), int(rec["inner_fold"])
                table.setdefault(o, {}).setdefault(i, {"train": [], "val": [], "test": []})
                table[o][i][rec["role"]].append(rec["sample_id"])
        outer = []
        for o in sorted(table):
            inner = [InnerSplit(sorted(table[o][i]["train"]), sorted(table[o][i]["val"])) for i in sorted(table[o])]
            outer.append(OuterFold(sorted(table[o][0]["test"]), inner))
        return cls(outer)


def plan_nested_kfold(labels: Mapping[str, int], seed: int, outer_k: int = 5, inner_k: int = 5,
                      groups: Optional[Mapping[str, str]] = None) -> FoldPlan:
    """Stratified outer test folds, each with ``inner_k`` stratified (train, val) splits.

    ``labels`` maps sample id to class. With ``groups`` (sample id -> patient
    id) all samples of a patient land in the same fold.
    """
    labels = {str(k): int(v) for k, v in labels.items()}
    for c in (0, 1):
        n = sum(1 for v in labels.values() if v == c)
        if n < outer_k:
            # every outer test fold must hold at least one sample of each class
            raise ValueError(f"class {c} has {n} samples; nested {outer_k}-fold needs at least {outer_k}")
    ids = sorted(labels)
    rng = np.random.default_rng(derive_seed(seed, "outer"))

    def deal(pool, k, r):
        if groups is None:
            return _stratified_deal(pool, labels, k, r)
        return _grouped_deal(pool, labels, groups, k, r)

    outer = []
    test_folds = deal(ids, outer_k, rng)
    for o, test in enumerate(test_folds):
        test_set = set(test)
        rest = [i for i in ids if i not in test_set]
        inner_folds = deal(rest, inner_k, np.random.default_rng(derive_seed(seed, "inner", o)))
        splits = []
        for val in inner_folds:
            val_set = set(val)
            splits.append(InnerSplit(sorted(i for i in rest if i not in val_set), val))
        outer.append(OuterFold(test, splits))
    return FoldPlan(outer, labels)


# batches ----------------------------------------------------------------------

@dataclass
class BatchSpec:
    batch_size: int = 128
    two_view: bool = False

    def __post_init__(self):
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError(f"batch size must be even and >= 2, got {self.batch_size}")

    @property
    def per_class(self) -> int:
        return self.batch_size // 2


def make_balanced_batches(labels: Mapping[str, int], spec: BatchSpec, seed: int, epoch: int) -> List[List[str]]:
    """One epoch of batches with exactly ``batch_size / 2`` ids per class.

    Each class is walked in a fresh shuffle; the epoch has as many batches as
    the larger class needs, and a class that runs out is topped up by drawing
    with replacement.
    """
    ids = sorted(labels)
    by_class = [[i for i in ids if labels[i] == c] for c in (0, 1)]
    for c, members in enumerate(by_class):
        if not members:
            raise ValueError(f"class {c} has no training samples")
    q = spec.per_class
    n_batches = -(-max(len(m) for m in by_class) // q)
    rng = np.random.default_rng(derive_seed(seed, "batches", epoch))
    streams = []
    for members in by_class:
        order = [members[j] for j in rng.permutation(len(members))]
        need = n_batches * q - len(order)
        if need > 0:
            order += [members[j] for j in rng.integers(0, len(members), need)]
        streams.append(order)
    batches = []
    for b in range(n_batches):
        batch = streams[0][b * q:(b + 1) * q] + streams[1][b * q:(b + 1) * q]
        batches.append(batch)
    return batches


@dataclass
class ViewBatch:
    """Volumes of a (possibly two-view) batch with labels, source ids and pairing."""

    volumes: np.ndarray  # (n, 1, d, h, w)
    labels: np.ndarray
    source_ids: List[str]
    pairs: Optional[np.ndarray] = None

    def class_indices(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.labels == c)


def make_single_view_batch(batch: Sequence[SinusSample], policy: Optional[AugmentationPolicy] = None,
                           seed=None) -> ViewBatch:
    vols = []
    for j, s in enumerate(batch):
        v = s.volume.voxels
        if policy is not None:
            v = augment_voxels(v, policy, derive_seed(seed, "view", 0, j, s.sample_id))
        vols.append(v)
    return ViewBatch(np.stack(vols)[:, None], np.array([s.label for s in batch]), [s.sample_id for s in batch])


def make_two_view_batch(batch: Sequence[SinusSample], policy: AugmentationPolicy, seed) -> ViewBatch:
    """Augment every source twice; rows [0, n) are first views, [n, 2n) second views."""
    n = len(batch)
    vols = []
    for view in (0, 1):
        for j, s in enumerate(batch):
            vols.append(augment_voxels(s.volume.voxels, policy, derive_seed(seed, "view", view, j, s.sample_id)))
    labels = np.array([s.label for s in batch] * 2)
    pairs = np.concatenate([np.arange(n, 2 * n), np.arange(n)])
    return ViewBatch(np.stack(vols)[:, None], labels, [s.sample_id for s in batch] * 2, pairs)


# label efficiency -------------------------------------------------------------

def subsample_training(labels: Mapping[str, int], fraction: float, seed: int) -> List[str]:
    """Stratified subset keeping round(fraction * n_c) ids per class.

    Subsets are prefixes of one per-class shuffle, so smaller fractions are
    contained in larger ones for the same seed.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    ids = sorted(labels)
    keep = []
    for c in (0, 1):
        members = [i for i in ids if labels[i] == c]
        rng = np.random.default_rng(derive_seed(seed, "subsample", c))
        order = [members[j] for j in rng.permutation(len(members))]
        keep += order[:int(np.floor(fraction * len(members) + 0.5))]
    return sorted(keep)
