import math

import numpy as np
import pytest

from conftest import gradcheck
from oracles import ce_loop, simclr_loop, supcon_loop
from sinuscl import tensor as T
from sinuscl.losses import (ContrastiveBatchIndex, LossConfig, cosine_sim, loss_ce, loss_combined,
                            loss_simclr, loss_supcon)
from sinuscl.tensor import Tensor


def _unit(rng, n, d=6):
    z = rng.normal(size=(n, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


# oracle agreement -------------------------------------------------------------

@pytest.mark.parametrize("tau", [0.1, 0.5, 1.0])
def test_supcon_matches_double_loop(rng, tau):
    labels = np.array([0, 1, 0, 1, 1, 0, 0, 1])
    z = _unit(rng, 8)
    with T.high_precision():
        got = loss_supcon(Tensor(z), ContrastiveBatchIndex(labels), LossConfig(tau)).item()
    assert got == pytest.approx(supcon_loop(z, labels, tau), rel=1e-10)


def test_supcon_outside_log_variant_matches_loop(rng):
    labels = np.array([0, 0, 0, 1, 1, 1])
    z = _unit(rng, 6)
    with T.high_precision():
        got = loss_supcon(Tensor(z), ContrastiveBatchIndex(labels), LossConfig(0.2), sum_inside_log=False).item()
    assert got == pytest.approx(supcon_loop(z, labels, 0.2, sum_inside_log=False), rel=1e-10)


@pytest.mark.parametrize("tau", [0.1, 0.7])
def test_simclr_matches_double_loop(rng, tau):
    idx = ContrastiveBatchIndex.two_view([0, 1, 1, 0, 1])
    z = _unit(rng, 10)
    with T.high_precision():
        got = loss_simclr(Tensor(z), idx, LossConfig(tau)).item()
    assert got == pytest.approx(simclr_loop(z, idx.labels, idx.pairs, tau), rel=1e-10)


def test_ce_matches_loop(rng):
    logits = rng.normal(scale=3, size=(7, 2))
    y = rng.integers(0, 2, 7)
    with T.high_precision():
        got = loss_ce(Tensor(logits), y).item()
    assert got == pytest.approx(ce_loop(logits, y), rel=1e-12)


# hand-evaluated identities ------------------------------------------------------

def test_identity_values():
    z = np.tile(np.eye(1, 4), (4, 1))
    with T.high_precision():
        sc = loss_supcon(Tensor(z), ContrastiveBatchIndex([0, 0, 1, 1])).item()
        z8 = np.tile(np.eye(1, 4), (8, 1))
        sim = loss_simclr(Tensor(z8), ContrastiveBatchIndex.two_view([0, 0, 1, 1])).item()
    assert abs(sc - 2 * math.log(3)) < 1e-12
    assert abs(sim - 2 * math.log(5)) < 1e-12
    assert abs(loss_ce(Tensor(np.zeros((5, 2))), [0, 1, 1, 0, 1]).item() - math.log(2)) < 1e-6


def test_simclr_ignores_same_class_non_pairs(rng):
    """Moving a same-class non-twin row must not change that anchor's term."""
    idx = ContrastiveBatchIndex.two_view([0, 0, 1, 1])
    z = _unit(rng, 8)
    base = simclr_loop(z, idx.labels, idx.pairs, 0.1)
    z2 = z.copy()
    # row 1 is class 0 and not the twin of row 0 (twin is 4); rows of class 0 only see it via their own term
    z2[1] = -z2[1]
    with T.high_precision():
        a = loss_simclr(Tensor(z), idx).item()
        b = loss_simclr(Tensor(z2), idx).item()
    assert a == pytest.approx(base, rel=1e-10)
    assert b == pytest.approx(simclr_loop(z2, idx.labels, idx.pairs, 0.1), rel=1e-10)


def test_combined_with_zero_weight_equals_supcon_bitwise(rng):
    labels = np.array([0, 1, 0, 1, 0, 1])
    z = Tensor(_unit(rng, 6).astype(np.float32))
    logits = Tensor(rng.normal(size=(6, 2)).astype(np.float32))
    idx = ContrastiveBatchIndex(labels)
    a = loss_combined(z, logits, labels, idx, LossConfig(0.1, 0.0)).data
    b = loss_supcon(z, idx, LossConfig(0.1)).data
    assert a.tobytes() == b.tobytes()


def test_losses_are_stable_at_small_tau(rng):
    z = _unit(rng, 8)
    idx = ContrastiveBatchIndex.two_view([0, 1, 0, 1])
    assert np.isfinite(loss_simclr(Tensor(z), idx, LossConfig(1e-3)).item())
    assert np.isfinite(loss_supcon(Tensor(z), ContrastiveBatchIndex(idx.labels), LossConfig(1e-3)).item())
    assert loss_ce(Tensor(np.array([[1000.0, -1000.0]])), [0]).item() == 0.0


def test_supcon_is_permutation_invariant(rng):
    labels = np.array([0, 1, 0, 1, 1, 0])
    z = _unit(rng, 6)
    perm = rng.permutation(6)
    with T.high_precision():
        a = loss_supcon(Tensor(z), ContrastiveBatchIndex(labels)).item()
        b = loss_supcon(Tensor(z[perm]), ContrastiveBatchIndex(labels[perm])).item()
    assert a == pytest.approx(b, rel=1e-12)


# gradients -----------------------------------------------------------------------

def test_grad_simclr(rng):
    idx = ContrastiveBatchIndex.two_view([0, 1, 1])
    assert gradcheck(lambda x: loss_simclr(T.l2_normalize(x), idx, LossConfig(0.5)), rng.normal(size=(6, 4))) <= 1


@pytest.mark.parametrize("inside", [True, False])
def test_grad_supcon(rng, inside):
    idx = ContrastiveBatchIndex([0, 1, 0, 1, 1])
    f = lambda x: loss_supcon(T.l2_normalize(x), idx, LossConfig(0.5), inside)  # noqa: E731
    assert gradcheck(f, rng.normal(size=(5, 4))) <= 1


def test_grad_ce(rng):
    assert gradcheck(lambda x: loss_ce(x, [0, 1, 1, 0]), rng.normal(size=(4, 2))) <= 1


def test_grad_combined(rng):
    labels = [0, 1, 0, 1]
    idx = ContrastiveBatchIndex(labels)
    f = lambda x, l: loss_combined(T.l2_normalize(x), l, labels, idx, LossConfig(0.5, 0.7))  # noqa: E731
    assert gradcheck(f, rng.normal(size=(4, 3)), rng.normal(size=(4, 2))) <= 1


# validation ----------------------------------------------------------------------

def test_errors():
    z = Tensor(np.tile(np.eye(1, 3), (4, 1)))
    with pytest.raises(ValueError, match="anomaly"):
        loss_supcon(z, ContrastiveBatchIndex([0, 0, 0, 1]))
    with pytest.raises(ValueError, match="pairing"):
        loss_simclr(z, ContrastiveBatchIndex([0, 0, 1, 1]))
    with pytest.raises(ValueError, match="norm"):
        loss_supcon(z * 2.0, ContrastiveBatchIndex([0, 0, 1, 1]))
    with pytest.raises(ValueError):
        ContrastiveBatchIndex([0, 1], pairs=[0, 1])
    with pytest.raises(ValueError, match="share a class"):
        ContrastiveBatchIndex([0, 1], pairs=[1, 0])
    with pytest.raises(ValueError):
        LossConfig(tau=0)
    with pytest.raises(ValueError):
        loss_ce(Tensor(np.zeros((2, 2))), [0, 2])
    with pytest.raises(ValueError):
        cosine_sim([0, 0], [1, 0])


def test_cosine_sim_bounds(rng):
    u = rng.normal(size=5)
    assert cosine_sim(u, u) == pytest.approx(1.0)
    assert cosine_sim(u, -u) == pytest.approx(-1.0)
