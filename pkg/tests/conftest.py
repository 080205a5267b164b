import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from oracles import numeric_grad  # noqa: E402
from sinuscl import tensor as T  # noqa: E402
from sinuscl.data import generate_corpus  # noqa: E402

GRAD_RTOL = 1e-3
GRAD_ATOL = 1e-5


def gradcheck(fn, *arrays):
    """Compare analytic gradients of ``fn(*tensors)`` to central differences in float64.

    Returns the worst violation ratio |a - n| / max(rtol*|n|, atol); <= 1 passes.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    with T.high_precision():
        ts = [T.Tensor(a, requires_grad=True) for a in arrays]
        out = fn(*ts)
        out.backward()
        analytic = [t.grad if t.grad is not None else np.zeros_like(a) for t, a in zip(ts, arrays)]

        def scalar(*xs):
            with T.no_grad():
                return float(fn(*[T.Tensor(x) for x in xs]).data)

        numeric = numeric_grad(scalar, arrays)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        bound = np.maximum(GRAD_RTOL * np.abs(n), GRAD_ATOL)
        worst = max(worst, float(np.max(np.abs(a - n) / bound)))
    return worst


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Twelve patients, half normal; small enough for CLI smoke runs."""
    out = tmp_path_factory.mktemp("tiny")
    generate_corpus(out, patients=12, normal_ratio=0.5, seed=7)
    return out / "manifest.csv"


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
