"""Classification metrics, the PR curve, paired permutation tests and fold aggregation."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

METRIC_NAMES = ("accuracy", "f1_weighted", "auroc", "auprc")


@dataclass
class ScoredPredictions:
    ids: np.ndarray
    labels: np.ndarray
    scores: np.ndarray
    predicted: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids).astype(str)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.predicted = np.asarray(self.predicted, dtype=np.int64)
        n = len(self.ids)
        if not (len(self.labels) == len(self.scores) == len(self.predicted) == n):
            raise ValueError("ids, labels, scores and predictions must have equal length")
        if len(set(self.ids.tolist())) != n:
            raise ValueError("prediction ids must be unique")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")

    @classmethod
    def from_scores(cls, ids, labels, scores, threshold=0.5):
        """Predicted label = argmax of the two-class softmax, i.e. score > threshold."""
        scores = np.asarray(scores, dtype=np.float64)
        return cls(ids, labels, scores, (scores > threshold).astype(np.int64))

    @classmethod
    def _trusted(cls, ids, labels, scores, predicted):
        # skips validation; only for arrays derived from an already valid instance
        obj = object.__new__(cls)
        obj.ids, obj.labels, obj.scores, obj.predicted = ids, labels, scores, predicted
        return obj

    def __len__(self):
        return len(self.ids)


def _nonempty(p: ScoredPredictions):
    if len(p) == 0:
        raise ValueError("metric of an empty prediction set")


def accuracy(p: ScoredPredictions) -> float:
    _nonempty(p)
    return float(np.mean(p.labels == p.predicted))


def f1_weighted(p: ScoredPredictions) -> float:
    """Support-weighted mean of per-class F1; 0/0 counts as 0."""
    _nonempty(p)
    n = len(p)
    total = 0.0
    for c in (0, 1):
        tp = np.sum((p.predicted == c) & (p.labels == c))
        fp = np.sum((p.predicted == c) & (p.labels != c))
        fn = np.sum((p.predicted != c) & (p.labels == c))
        denom = 2 * tp + fp + fn
        f1 = 2 * tp / denom if denom else 0.0
        total += f1 * np.sum(p.labels == c) / n
    return float(total)


def auroc(p: ScoredPredictions) -> float:
    """Mann-Whitney AUROC with average ranks for ties."""
    pos = p.labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC is undefined unless both classes are present")
    ranks = rankdata(p.scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _ranked_order(p: ScoredPredictions) -> np.ndarray:
    # descending score, ties broken by ascending id
    return np.lexsort((p.ids, -p.scores))


def pr_curve(p: ScoredPredictions) -> List[Tuple[float, float, float]]:
    """(threshold, recall, precision) after each sample in ranked order."""
    n_pos = int(np.sum(p.labels == 1))
    if n_pos == 0:
        raise ValueError("precision-recall needs at least one positive")
    order = _ranked_order(p)
    hits = np.cumsum(p.labels[order] == 1)
    k = np.arange(1, len(order) + 1)
    return list(zip(p.scores[order].tolist(), (hits / n_pos).tolist(), (hits / k).tolist()))


def auprc(p: ScoredPredictions) -> Tuple[float, List[Tuple[float, float, float]]]:
    """Average precision sum_k (R_k - R_{k-1}) P_k and the curve it integrates."""
    curve = pr_curve(p)
    ap, prev_r = 0.0, 0.0
    for _, r, prec in curve:
        ap += (r - prev_r) * prec
        prev_r = r
    return float(ap), curve


def _metric_fn(name: str) -> Callable[[ScoredPredictions], float]:
    if name == "auprc":
        return lambda p: auprc(p)[0]
    fns = {"accuracy": accuracy, "f1_weighted": f1_weighted, "auroc": auroc}
    if name not in fns:
        raise ValueError(f"unknown metric {name!r}; expected one of {METRIC_NAMES}")
    return fns[name]


def permutation_test(a: ScoredPredictions, b: ScoredPredictions, metric: str = "auroc",
                     n_permutations: int = 10000, seed: int = 0) -> float:
    """Two-sided paired permutation test on ``metric(a) - metric(b)``.

    Each permutation swaps the two models' score and prediction for every
    sample independently with probability 1/2. Returns
    (1 + #{|d_perm| >= |d_obs|}) / (n_permutations + 1).
    """
    fn = _metric_fn(metric)
    oa, ob = np.argsort(a.ids), np.argsort(b.ids)
    if not np.array_equal(a.ids[oa], b.ids[ob]):
        raise ValueError("permutation test needs both prediction sets over the same ids")
    if not np.array_equal(a.labels[oa], b.labels[ob]):
        raise ValueError("paired predictions disagree on true labels")
    ids, labels = a.ids[oa], a.labels[oa]
    sa, sb = a.scores[oa], b.scores[ob]
    pa, pb = a.predicted[oa], b.predicted[ob]
    observed = fn(a) - fn(b)
    rng = np.random.default_rng(seed)
    hits = 0
    # tolerance so that exact ties with the observed difference count
    eps = 1e-12
    for _ in range(n_permutations):
        swap = rng.random(len(ids)) < 0.5
        xa = ScoredPredictions._trusted(ids, labels, np.where(swap, sb, sa), np.where(swap, pb, pa))
        xb = ScoredPredictions._trusted(ids, labels, np.where(swap, sa, sb), np.where(swap, pa, pb))
        if abs(fn(xa) - fn(xb)) >= abs(observed) - eps:
            hits += 1
    return (1 + hits) / (n_permutations + 1)


@dataclass
class MetricsReport:
    accuracy: float
    f1_weighted: float
    auroc: float
    auprc: float
    pr_curve: List[Tuple[float, float, float]] = field(default_factory=list, repr=False)
    n_samples: int = 0

    def values(self) -> Dict[str, float]:
        return {m: getattr(self, m) for m in METRIC_NAMES}


def evaluate(p: ScoredPredictions) -> MetricsReport:
    ap, curve = auprc(p)
    return MetricsReport(accuracy(p), f1_weighted(p), auroc(p), ap, curve, len(p))


def aggregate_folds(reports: Sequence[MetricsReport], population: bool = False) -> Dict[str, Tuple[float, float]]:
    """Per-metric (mean, std) across folds; sample std unless ``population``."""
    if len(reports) < 2:
        raise ValueError("aggregation needs at least two reports")
    out = {}
    for m in METRIC_NAMES:
        vals = np.array([getattr(r, m) for r in reports], dtype=np.float64)
        out[m] = (float(vals.mean()), float(vals.std(ddof=0 if population else 1)))
    return out


def write_metrics_csv(reports: Sequence[MetricsReport], path, label: str = "fold") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([label, *METRIC_NAMES, "n_samples"])
        for i, r in enumerate(reports):
            w.writerow([i, *(repr(float(getattr(r, m))) for m in METRIC_NAMES), r.n_samples])


def read_metrics_csv(path) -> List[Dict[str, float]]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in rec.items()} for rec in csv.DictReader(fh)]


def write_pr_curve_csv(curve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "recall", "precision"])
        for t, r, p in curve:
            w.writerow([repr(float(t)), repr(float(r)), repr(float(p))])


def read_pr_curve_csv(path) -> List[Tuple[float, float, float]]:
    with open(path, newline="") as fh:
        return [(float(r["threshold"]), float(r["recall"]), float(r["precision"])) for r in csv.DictReader(fh)]
