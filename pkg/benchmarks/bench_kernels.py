"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Shapes match one training step of the default encoder on a 32^3 batch of 8.
"""
import argparse
import timeit

import numpy as np

from sinuscl import _fallback, kernels
from sinuscl.data import AugmentationPolicy, SinusSample, Volume, augment
from sinuscl.tensor import Tensor, conv3d


def _out(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def cases(rng):
    x = rng.standard_normal((8, 8, 32, 32, 32)).astype(np.float32)
    k, s, p = 3, 1, 1
    o = _out(32, k, s, p)
    cols = np.empty((8 * o ** 3, 8 * k ** 3), np.float32)
    back = np.zeros_like(x)
    vol = rng.uniform(-1, 1, (32, 32, 32)).astype(np.float32)
    th = np.deg2rad(7.0)
    mat = np.array([[1, 0, 0, 0.5], [0, np.cos(th), -np.sin(th), 1.0], [0, np.sin(th), np.cos(th), -0.7]])
    dst = np.empty_like(vol)

    def im2col(mod):
        return lambda: mod.im2col3d(x, cols, k, k, k, s, p)

    def col2im(mod):
        def run():
            back.fill(0)
            mod.col2im3d(cols, back, k, k, k, s, p)
        return run

    def sample(mod):
        return lambda: mod.affine_sample3d(vol, mat, dst, -1.0, 1e-6)

    return {"im2col3d 8x8x32^3 k3": im2col, "col2im3d 8x8x32^3 k3": col2im, "affine_sample3d 32^3": sample}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    try:
        compiled = kernels.get_backend("compiled")
    except RuntimeError:
        compiled = None
        print("compiled kernels not built; timing the fallback only")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<24}{'python ms':>12}{'compiled ms':>14}{'speedup':>10}")
    for name, make in cases(rng).items():
        py = min(timeit.repeat(make(_fallback), number=1, repeat=args.repeat)) * 1e3
        if compiled is None:
            print(f"{name:<24}{py:>12.2f}{'-':>14}{'-':>10}")
            continue
        cc = min(timeit.repeat(make(compiled), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<24}{py:>12.2f}{cc:>14.2f}{py / cc:>9.1f}x")

    # end to end: one conv forward+backward, one augmentation, whichever backend is active
    x = Tensor(rng.standard_normal((8, 8, 32, 32, 32)), requires_grad=True)
    w = Tensor(rng.standard_normal((16, 8, 3, 3, 3)) * 0.1, requires_grad=True)

    def step():
        x.grad = w.grad = None
        conv3d(x, w, 1, 1).sum().backward()

    sample = SinusSample(Volume(rng.uniform(-1, 1, (32, 32, 32))), 0, "P0", "left", "none")
    t_conv = min(timeit.repeat(step, number=1, repeat=args.repeat)) * 1e3
    t_aug = min(timeit.repeat(lambda: augment(sample, AugmentationPolicy(), 3), number=1, repeat=args.repeat)) * 1e3
    print(f"active backend {kernels.BACKEND}: conv3d fwd+bwd {t_conv:.1f} ms, augment {t_aug:.1f} ms")


if __name__ == "__main__":
    main()
