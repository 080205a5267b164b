"""Contrastive and classification objectives over a class-balanced batch.

All contrastive losses consume unit-norm embeddings (rows of ``Z``) and an
index describing which rows share a class and, for two-view batches, which
rows were augmented from the same source volume.

Per-class weighting follows ``-sum_c 1/|M_c| sum_{i in I_c} log(...)`` with
``|M_c|`` the number of rows of class ``c`` in the batch.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

CLASS_NAMES = ("normal", "anomaly")
NORM_TOLERANCE = 1e-4


@dataclass
class LossConfig:
    tau: float = 0.1
    lam: float = 1.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        if not self.lam >= 0:
            raise ValueError(f"combined-loss weight must be non-negative, got {self.lam}")


@dataclass
class ContrastiveBatchIndex:
    """Class membership of each row and, optionally, the view pairing k(i)."""

    labels: np.ndarray
    pairs: Optional[np.ndarray] = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 1:
            raise ValueError("labels must be one-dimensional")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError("labels must be 0 (normal) or 1 (anomaly)")
        if self.pairs is not None:
            self.pairs = np.asarray(self.pairs, dtype=np.int64)
            n = len(self.labels)
            if self.pairs.shape != (n,) or self.pairs.min() < 0 or self.pairs.max() >= n:
                raise ValueError("pairing map must assign every row an index into the batch")
            idx = np.arange(n)
            if not np.array_equal(self.pairs[self.pairs], idx) or np.any(self.pairs == idx):
                raise ValueError("pairing map must be an involution without fixed points")
            if not np.array_equal(self.labels[self.pairs], self.labels):
                raise ValueError("paired rows must share a class")

    @classmethod
    def two_view(cls, labels: Sequence[int]) -> "ContrastiveBatchIndex":
        """Index for rows laid out as [view A of all sources, view B of all sources]."""
        labels = np.asarray(labels, dtype=np.int64)
        n = len(labels)
        pairs = np.concatenate([np.arange(n, 2 * n), np.arange(n)])
        return cls(np.concatenate([labels, labels]), pairs)

    def __len__(self):
        return len(self.labels)

    def class_indices(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.labels == c)

    def same_class(self) -> np.ndarray:
        return self.labels[:, None] == self.labels[None, :]


def cosine_sim(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("cosine_sim: zero-norm input")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def _check_embeddings(Z: Tensor, index: ContrastiveBatchIndex):
    if Z.ndim != 2 or Z.shape[0] != len(index):
        raise ValueError(f"embeddings {Z.shape} do not match a batch index of {len(index)} rows")
    norms = np.linalg.norm(Z.data.astype(np.float64), axis=1)
    if np.any(np.abs(norms - 1) > NORM_TOLERANCE):
        bad = int(np.argmax(np.abs(norms - 1)))
        raise ValueError(f"embedding row {bad} has norm {norms[bad]:.6f}; l2-normalise before the loss")


def _class_weights(labels: np.ndarray, dtype) -> np.ndarray:
    counts = np.bincount(labels, minlength=2)
    return (1.0 / counts[labels]).astype(dtype)


def _masked_logsumexp(sims: Tensor, mask: np.ndarray) -> Tensor:
    """Row-wise log sum_{mask} e^s, shifted by the row's own masked max."""
    shift = np.where(mask, sims.data, -np.inf).max(axis=1, keepdims=True)
    m = mask.astype(sims.dtype)
    # masked-out entries are zeroed before exp so they can never overflow
    e = T.exp((sims - shift) * m) * m
    return T.log(T.sum_(e, axis=1)) + shift[:, 0]


def _log_ratio(sims: Tensor, numer_mask: np.ndarray, denom_mask: np.ndarray) -> Tensor:
    """Row-wise log(sum_num e^s / sum_den e^s); each sum gets its own shift so
    a numerator far below the row maximum cannot underflow to zero."""
    return _masked_logsumexp(sims, numer_mask) - _masked_logsumexp(sims, denom_mask)


def _similarities(Z: Tensor, tau: float) -> Tensor:
    # rows are unit-norm, so the dot product is the cosine similarity
    return (Z @ Z.T) * (1.0 / tau)


def loss_simclr(Z: Tensor, index: ContrastiveBatchIndex, config: LossConfig = LossConfig()) -> Tensor:
    """Class-prior InfoNCE: the only positive is the twin view, negatives are other-class rows.

    Same-class rows other than the twin appear in neither numerator nor
    denominator.
    """
    if index.pairs is None:
        raise ValueError("loss_simclr needs a two-view batch with a pairing map")
    for c, name in enumerate(CLASS_NAMES):
        if len(index.class_indices(c)) < 1:
            raise ValueError(f"loss_simclr: class {name!r} has no rows in the batch")
    _check_embeddings(Z, index)
    n = len(index)
    positive = np.zeros((n, n), dtype=bool)
    positive[np.arange(n), index.pairs] = True
    negative = ~index.same_class()
    sims = _similarities(Z, config.tau)
    terms = _log_ratio(sims, positive, positive | negative)
    w = _class_weights(index.labels, Z.dtype)
    return -T.sum_(terms * w)


def loss_supcon(Z: Tensor, index: ContrastiveBatchIndex, config: LossConfig = LossConfig(),
                sum_inside_log: bool = True) -> Tensor:
    """Supervised contrastive loss over same-class positives.

    With ``sum_inside_log`` (default) the positives are summed inside the
    logarithm. ``sum_inside_log=False`` averages the per-positive log terms
    instead, the form common in the wider literature.
    """
    for c, name in enumerate(CLASS_NAMES):
        if len(index.class_indices(c)) < 2:
            raise ValueError(f"loss_supcon: class {name!r} needs at least 2 rows for a positive pair")
    _check_embeddings(Z, index)
    n = len(index)
    same = index.same_class()
    positive = same & ~np.eye(n, dtype=bool)
    negative = ~same
    sims = _similarities(Z, config.tau)
    w = _class_weights(index.labels, Z.dtype)
    if sum_inside_log:
        terms = _log_ratio(sims, positive, positive | negative)
        return -T.sum_(terms * w)
    # log e^{s_ip} / sum_{a != i} e^{s_ia}, averaged over positives p
    log_den = _masked_logsumexp(sims, positive | negative).reshape(n, 1)
    pmask = positive.astype(sims.dtype)
    log_prob = (sims - log_den) * pmask
    mean_pos = T.sum_(log_prob, axis=1) * (1.0 / positive.sum(axis=1)).astype(sims.dtype)
    return -T.sum_(mean_pos * w)


def loss_ce(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of (N, 2) logits, log-sum-exp stabilised."""
    labels = np.asarray(labels)
    if labels.ndim != 1 or len(labels) != logits.shape[0]:
        raise ValueError(f"{len(labels)} labels for logits of shape {logits.shape}")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError(f"labels must be in {{0, 1}}, got {sorted(set(labels.tolist()))}")
    if not np.all(np.isfinite(logits.data)):
        raise ValueError("loss_ce: non-finite logits")
    m = logits.data.max(axis=1, keepdims=True)
    lse = T.log(T.sum_(T.exp(logits - m), axis=1)) + m[:, 0]
    onehot = np.eye(logits.shape[1], dtype=logits.dtype)[labels.astype(np.int64)]
    picked = T.sum_(logits * onehot, axis=1)
    return T.mean(lse - picked)


def loss_combined(Z: Tensor, logits: Tensor, labels, index: ContrastiveBatchIndex,
                  config: LossConfig = LossConfig(), sum_inside_log: bool = True) -> Tensor:
    """Supervised contrastive loss plus ``lam`` times cross-entropy."""
    sc = loss_supcon(Z, index, config, sum_inside_log)
    ce = loss_ce(logits, labels)
    return sc + ce * config.lam
