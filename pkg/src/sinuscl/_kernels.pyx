# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for conv3d lowering and trilinear resampling.

Every routine writes into a caller-allocated output so the Python side owns
allocation and dtype; results match ``sinuscl._fallback`` exactly in layout.
"""
from libc.math cimport floor

ctypedef fused floating:
    float
    double


def im2col3d(const floating[:, :, :, :, ::1] x, floating[:, ::1] cols,
             int kd, int kh, int kw, int stride, int padding):
    """Unfold ``x`` (B, C, D, H, W) into rows (b, od, oh, ow) x cols (c, kz, ky, kx)."""
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1]
    cdef Py_ssize_t D = x.shape[2], H = x.shape[3], W = x.shape[4]
    cdef Py_ssize_t Do = (D + 2 * padding - kd) // stride + 1
    cdef Py_ssize_t Ho = (H + 2 * padding - kh) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * padding - kw) // stride + 1
    cdef Py_ssize_t K = C * kd * kh * kw
    cdef Py_ssize_t b, c, od, oh, ow, a, e, f, iz, iy, ix0, ix
    cdef const floating* src
    cdef const floating* plane
    cdef floating* dst
    if B == 0 or Do <= 0 or Ho <= 0 or Wo <= 0:
        return
    with nogil:
        dst = &cols[0, 0]
        for b in range(B):
            for od in range(Do):
                for oh in range(Ho):
                    for ow in range(Wo):
                        ix0 = ow * stride - padding
                        for c in range(C):
                            plane = &x[b, c, 0, 0, 0]
                            for a in range(kd):
                                iz = od * stride - padding + a
                                for e in range(kh):
                                    iy = oh * stride - padding + e
                                    if iz < 0 or iz >= D or iy < 0 or iy >= H:
                                        for f in range(kw):
                                            dst[f] = 0
                                    elif ix0 >= 0 and ix0 + kw <= W:
                                        src = plane + (iz * H + iy) * W + ix0
                                        for f in range(kw):
                                            dst[f] = src[f]
                                    else:
                                        src = plane + (iz * H + iy) * W
                                        for f in range(kw):
                                            ix = ix0 + f
                                            if 0 <= ix < W:
                                                dst[f] = src[ix]
                                            else:
                                                dst[f] = 0
                                    dst += kw


def col2im3d(const floating[:, ::1] cols, floating[:, :, :, :, ::1] out,
             int kd, int kh, int kw, int stride, int padding):
    """Scatter-add the rows of ``cols`` back onto ``out`` (adjoint of im2col3d)."""
    cdef Py_ssize_t B = out.shape[0], C = out.shape[1]
    cdef Py_ssize_t D = out.shape[2], H = out.shape[3], W = out.shape[4]
    cdef Py_ssize_t Do = (D + 2 * padding - kd) // stride + 1
    cdef Py_ssize_t Ho = (H + 2 * padding - kh) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * padding - kw) // stride + 1
    cdef Py_ssize_t b, c, od, oh, ow, a, e, f, iz, iy, ix0, ix
    cdef const floating* src
    cdef floating* plane
    cdef floating* dst
    if B == 0 or Do <= 0 or Ho <= 0 or Wo <= 0:
        return
    with nogil:
        src = &cols[0, 0]
        for b in range(B):
            for od in range(Do):
                for oh in range(Ho):
                    for ow in range(Wo):
                        ix0 = ow * stride - padding
                        for c in range(C):
                            plane = &out[b, c, 0, 0, 0]
                            for a in range(kd):
                                iz = od * stride - padding + a
                                for e in range(kh):
                                    iy = oh * stride - padding + e
                                    if iz < 0 or iz >= D or iy < 0 or iy >= H:
                                        pass
                                    elif ix0 >= 0 and ix0 + kw <= W:
                                        dst = plane + (iz * H + iy) * W + ix0
                                        for f in range(kw):
                                            dst[f] += src[f]
                                    else:
                                        dst = plane + (iz * H + iy) * W
                                        for f in range(kw):
                                            ix = ix0 + f
                                            if 0 <= ix < W:
                                                dst[ix] += src[f]
                                    src += kw


cdef inline double _lerp_fetch(const floating[:, :, ::1] v, double z, double y, double x,
                               double fill, double tol) noexcept nogil:
    cdef Py_ssize_t D = v.shape[0], H = v.shape[1], W = v.shape[2]
    cdef Py_ssize_t z0, y0, x0
    cdef double dz, dy, dx, c00, c01, c10, c11, c0, c1
    if z < -tol or y < -tol or x < -tol or z > D - 1 + tol or y > H - 1 + tol or x > W - 1 + tol:
        return fill
    z = min(max(z, 0.0), <double>(D - 1))
    y = min(max(y, 0.0), <double>(H - 1))
    x = min(max(x, 0.0), <double>(W - 1))
    z0 = <Py_ssize_t>floor(z)
    y0 = <Py_ssize_t>floor(y)
    x0 = <Py_ssize_t>floor(x)
    if z0 > D - 2:
        z0 = D - 2
    if y0 > H - 2:
        y0 = H - 2
    if x0 > W - 2:
        x0 = W - 2
    dz = z - z0
    dy = y - y0
    dx = x - x0
    c00 = v[z0, y0, x0] * (1 - dx) + v[z0, y0, x0 + 1] * dx
    c01 = v[z0, y0 + 1, x0] * (1 - dx) + v[z0, y0 + 1, x0 + 1] * dx
    c10 = v[z0 + 1, y0, x0] * (1 - dx) + v[z0 + 1, y0, x0 + 1] * dx
    c11 = v[z0 + 1, y0 + 1, x0] * (1 - dx) + v[z0 + 1, y0 + 1, x0 + 1] * dx
    c0 = c00 * (1 - dy) + c01 * dy
    c1 = c10 * (1 - dy) + c11 * dy
    return c0 * (1 - dz) + c1 * dz


def affine_sample3d(const floating[:, :, ::1] vol, const double[:, ::1] mat,
                    floating[:, :, ::1] out, double fill, double tol):
    """out[o] = trilinear(vol, mat[:, :3] @ o + mat[:, 3]), ``fill`` outside the grid."""
    cdef Py_ssize_t Do = out.shape[0], Ho = out.shape[1], Wo = out.shape[2]
    cdef Py_ssize_t i, j, k
    cdef double z, y, x
    with nogil:
        for i in range(Do):
            for j in range(Ho):
                for k in range(Wo):
                    z = mat[0, 0] * i + mat[0, 1] * j + mat[0, 2] * k + mat[0, 3]
                    y = mat[1, 0] * i + mat[1, 1] * j + mat[1, 2] * k + mat[1, 3]
                    x = mat[2, 0] * i + mat[2, 1] * j + mat[2, 2] * k + mat[2, 3]
                    out[i, j, k] = <floating>_lerp_fetch(vol, z, y, x, fill, tol)
