import numpy as np
import pytest

from oracles import auroc_pairs, average_precision_loop, f1_weighted_loop
from sinuscl.metrics import (ScoredPredictions, accuracy, aggregate_folds, auprc, auroc, evaluate,
                             f1_weighted, permutation_test, pr_curve, read_metrics_csv,
                             read_pr_curve_csv, write_metrics_csv, write_pr_curve_csv)


def _preds(labels, scores, predicted=None, ids=None):
    n = len(labels)
    ids = ids if ids is not None else [f"s{i:03d}" for i in range(n)]
    if predicted is None:
        return ScoredPredictions.from_scores(ids, labels, scores)
    return ScoredPredictions(ids, labels, scores, predicted)


def _random_instance(rng, n=50, ties=True):
    labels = rng.integers(0, 2, n)
    labels[:2] = [0, 1]
    scores = rng.integers(0, 8, n) / 8.0 if ties else rng.random(n)
    return labels, scores


# oracles ----------------------------------------------------------------------------

def test_auroc_matches_pair_counting(rng):
    for _ in range(200):
        labels, scores = _random_instance(rng, ties=bool(rng.integers(2)))
        assert abs(auroc(_preds(labels, scores)) - auroc_pairs(labels, scores)) < 1e-9


def test_auprc_matches_loop(rng):
    for _ in range(50):
        labels, scores = _random_instance(rng)
        p = _preds(labels, scores)
        assert abs(auprc(p)[0] - average_precision_loop(list(p.ids), labels.tolist(), scores.tolist())) < 1e-12


def test_f1_matches_loop(rng):
    for _ in range(50):
        labels = rng.integers(0, 2, 30)
        pred = rng.integers(0, 2, 30)
        assert f1_weighted(_preds(labels, np.zeros(30), pred)) == pytest.approx(f1_weighted_loop(labels, pred), abs=1e-12)


# hand cases ------------------------------------------------------------------------

def test_hand_cases():
    p = _preds([1, 0, 1, 0], [0.9, 0.8, 0.7, 0.1])
    assert abs(auprc(p)[0] - 0.8333333333) < 1e-6
    p = _preds([0, 0, 1], [0.1, 0.2, 0.3], [0, 0, 0])
    assert abs(f1_weighted(p) - 0.5333333333) < 1e-6
    assert accuracy(_preds([0, 1, 1, 0], [0] * 4, [0, 1, 0, 0])) == 0.75
    assert accuracy(_preds([0, 1], [0, 0], [1, 0])) == 0.0
    assert auroc(_preds([0, 1, 0, 1], [0.5] * 4)) == 0.5
    assert auroc(_preds([0, 0, 1, 1], [0.1, 0.2, 0.8, 0.9])) == 1.0


def test_perfect_ranking():
    p = _preds([0, 0, 1, 1], [0.1, 0.2, 0.8, 0.9])
    ap, curve = auprc(p)
    assert ap == 1.0 and (1.0, 1.0) in [(r, pr) for _, r, pr in curve]


def test_balanced_f1_is_macro(rng):
    labels = np.array([0, 1] * 10)
    pred = rng.integers(0, 2, 20)
    p = _preds(labels, np.zeros(20), pred)
    per = [f1_weighted_loop((labels == c).astype(int), (pred == c).astype(int)) for c in (0, 1)]
    assert f1_weighted(p) == pytest.approx(f1_weighted_loop(labels, pred))
    assert per  # sanity; weights are equal so weighted == macro by construction


def test_random_scorer_ap_near_prevalence(rng):
    labels = np.array([1] * 30 + [0] * 70)
    aps = [auprc(_preds(labels, rng.random(100)))[0] for _ in range(1000)]
    assert abs(np.mean(aps) - 0.3) < 0.05


# invariances -------------------------------------------------------------------------

def test_auroc_invariances(rng):
    labels, scores = _random_instance(rng)
    base = auroc(_preds(labels, scores))
    assert auroc(_preds(labels, np.exp(3 * scores))) == pytest.approx(base, abs=1e-12)
    assert auroc(_preds(1 - labels, -scores, np.zeros_like(labels))) == pytest.approx(base, abs=1e-12)


def test_order_invariance(rng):
    labels, scores = _random_instance(rng)
    p = _preds(labels, scores)
    perm = rng.permutation(len(labels))
    q = ScoredPredictions(p.ids[perm], labels[perm], scores[perm], p.predicted[perm])
    assert evaluate(p).values() == evaluate(q).values()
    assert pr_curve(p) == pr_curve(q)


def test_curve_shape(rng):
    labels, scores = _random_instance(rng)
    curve = pr_curve(_preds(labels, scores))
    rec = [r for _, r, _ in curve]
    assert all(a <= b for a, b in zip(rec, rec[1:]))
    assert all(0 < p <= 1 for _, _, p in curve if p > 0) and curve[0][0] == max(scores)


# permutation test ------------------------------------------------------------------

def test_permutation_identical_and_extreme():
    labels = np.array([0, 1] * 20)
    a = _preds(labels, labels * 0.8 + 0.1)
    b = _preds(labels, 0.9 - labels * 0.8)
    assert permutation_test(a, a, n_permutations=2000) == 1.0
    assert permutation_test(a, b, n_permutations=2000) <= 0.01
    assert permutation_test(a, b, "accuracy", 500, seed=3) == permutation_test(a, b, "accuracy", 500, seed=3)


def test_permutation_null_rarely_significant(rng):
    labels = np.array([0, 1] * 15)
    base = labels * 0.6 + rng.normal(scale=0.5, size=30)
    hits = 0
    for t in range(100):
        a = _preds(labels, base + rng.normal(scale=0.3, size=30))
        b = _preds(labels, base + rng.normal(scale=0.3, size=30))
        hits += permutation_test(a, b, n_permutations=200, seed=t) > 0.05
    assert hits >= 90


def test_permutation_needs_pairs():
    a = _preds([0, 1], [0.1, 0.9])
    b = _preds([0, 1], [0.1, 0.9], ids=["x", "y"])
    with pytest.raises(ValueError):
        permutation_test(a, b)
    with pytest.raises(ValueError):
        permutation_test(a, a, metric="brier")


# aggregation and errors -------------------------------------------------------------

def _report(v):
    return evaluate(_preds([0, 1, 0, 1], [0.1, v, 0.3, 0.9]))


def test_aggregate():
    agg = aggregate_folds([_report(0.8), _report(0.8)])
    assert all(sd == 0 for _, sd in agg.values())
    reps = [_report(0.2), _report(0.05), _report(0.7)]
    vals = np.array([r.auroc for r in reps])
    mean = sum(vals) / 3
    two_pass = (sum((v - mean) ** 2 for v in vals) / 2) ** 0.5
    mu, sd = aggregate_folds(reps)["auroc"]
    assert abs(mu - mean) < 1e-12 and abs(sd - two_pass) < 1e-12
    assert min(vals) <= mu <= max(vals)
    with pytest.raises(ValueError):
        aggregate_folds([_report(0.8)])


def test_metric_errors():
    with pytest.raises(ValueError):
        auroc(_preds([1, 1], [0.2, 0.3]))
    with pytest.raises(ValueError):
        auprc(_preds([0, 0], [0.2, 0.3]))
    with pytest.raises(ValueError):
        accuracy(_preds([], []))
    with pytest.raises(ValueError):
        ScoredPredictions(["a", "a"], [0, 1], [0.1, 0.2], [0, 0])
    with pytest.raises(ValueError):
        ScoredPredictions(["a", "b"], [0, 1], [0.1, np.nan], [0, 0])


def test_csv_round_trips(tmp_path):
    reps = [_report(0.2), _report(0.7)]
    write_metrics_csv(reps, tmp_path / "m.csv")
    rows = read_metrics_csv(tmp_path / "m.csv")
    assert [r["auroc"] for r in rows] == [r.auroc for r in reps]
    write_pr_curve_csv(reps[0].pr_curve, tmp_path / "pr.csv")
    assert read_pr_curve_csv(tmp_path / "pr.csv") == reps[0].pr_curve
    assert (tmp_path / "pr.csv").read_text().startswith("threshold,recall,precision\n")
