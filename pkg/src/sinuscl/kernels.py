"""Backend selection for the hot loops (conv3d lowering, trilinear sampling).

The compiled extension is used when it imports; otherwise the numpy fallback
takes over. ``SINUSCL_BACKEND=python`` forces the fallback.
"""
import logging
import os

from . import _fallback

logger = logging.getLogger(__name__)

_compiled = None
if os.environ.get("SINUSCL_BACKEND", "").lower() != "python":
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        logger.debug("compiled kernels unavailable, using numpy fallback")

BACKEND = "compiled" if _compiled is not None else "python"
_impl = _compiled if _compiled is not None else _fallback


def get_backend(name=None):
    """Return the kernel module for ``name`` ('compiled' or 'python'), default active one."""
    if name is None:
        return _impl
    if name == "python":
        return _fallback
    if name == "compiled":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not built; run `pip install -e .`")
        return _compiled
    raise ValueError(f"unknown backend {name!r}")


def im2col3d(x, cols, kd, kh, kw, stride, padding):
    _impl.im2col3d(x, cols, kd, kh, kw, stride, padding)


def col2im3d(cols, out, kd, kh, kw, stride, padding):
    _impl.col2im3d(cols, out, kd, kh, kw, stride, padding)


def affine_sample3d(vol, mat, out, fill, tol=1e-6):
    _impl.affine_sample3d(vol, mat, out, float(fill), float(tol))
