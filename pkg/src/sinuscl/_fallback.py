"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``.

Signatures and output layouts are identical, so either backend can be
swapped in by ``sinuscl.kernels`` without the caller noticing.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _out_extent(n, k, stride, padding):
    return (n + 2 * padding - k) // stride + 1


def im2col3d(x, cols, kd, kh, kw, stride, padding):
    B, C = x.shape[:2]
    if padding:
        x = np.pad(x, ((0, 0), (0, 0)) + ((padding, padding),) * 3)
    win = sliding_window_view(x, (kd, kh, kw), axis=(2, 3, 4))
    win = win[:, :, ::stride, ::stride, ::stride]
    # (B, C, Do, Ho, Wo, kd, kh, kw) -> (B, Do, Ho, Wo, C, kd, kh, kw)
    win = win.transpose(0, 2, 3, 4, 1, 5, 6, 7)
    cols[...] = win.reshape(cols.shape)


def col2im3d(cols, out, kd, kh, kw, stride, padding):
    B, C, D, H, W = out.shape
    Do = _out_extent(D, kd, stride, padding)
    Ho = _out_extent(H, kh, stride, padding)
    Wo = _out_extent(W, kw, stride, padding)
    blocks = cols.reshape(B, Do, Ho, Wo, C, kd, kh, kw)
    padded = np.zeros((B, C, D + 2 * padding, H + 2 * padding, W + 2 * padding), dtype=out.dtype)
    for a in range(kd):
        for e in range(kh):
            for f in range(kw):
                padded[:, :,
                       a:a + stride * Do:stride,
                       e:e + stride * Ho:stride,
                       f:f + stride * Wo:stride] += blocks[..., a, e, f].transpose(0, 4, 1, 2, 3)
    out += padded[:, :, padding:padding + D, padding:padding + H, padding:padding + W]


def affine_sample3d(vol, mat, out, fill, tol):
    D, H, W = vol.shape
    grid = np.indices(out.shape, dtype=np.float64).reshape(3, -1)
    src = mat[:, :3] @ grid + mat[:, 3:4]
    limits = np.array([D - 1, H - 1, W - 1], dtype=np.float64)[:, None]
    outside = np.any((src < -tol) | (src > limits + tol), axis=0)
    src = np.clip(src, 0.0, limits)
    base = np.minimum(np.floor(src).astype(np.intp), (limits - 1).astype(np.intp))
    frac = src - base
    z0, y0, x0 = base
    dz, dy, dx = frac
    v = vol.astype(np.float64, copy=False)
    c00 = v[z0, y0, x0] * (1 - dx) + v[z0, y0, x0 + 1] * dx
    c01 = v[z0, y0 + 1, x0] * (1 - dx) + v[z0, y0 + 1, x0 + 1] * dx
    c10 = v[z0 + 1, y0, x0] * (1 - dx) + v[z0 + 1, y0, x0 + 1] * dx
    c11 = v[z0 + 1, y0 + 1, x0] * (1 - dx) + v[z0 + 1, y0 + 1, x0 + 1] * dx
    c0 = c00 * (1 - dy) + c01 * dy
    c1 = c10 * (1 - dy) + c11 * dy
    res = c0 * (1 - dz) + c1 * dz
    res[outside] = fill
    out[...] = res.reshape(out.shape)
