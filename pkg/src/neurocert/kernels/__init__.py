"""Interval kernels with a compiled core and a numpy fallback.

The Cython extension is used when it was built; otherwise, or when the
environment variable ``NEUROCERT_KERNELS=python`` is set, the numpy
implementation is selected. :func:`use_backend` switches at runtime (used by
the benchmark and the backend-equivalence tests).
"""
import contextlib
import os

import numpy as np

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels

if os.environ.get("NEUROCERT_KERNELS", "").lower() == "python" or _ckernels is None:
    _impl = _pykernels
else:
    _impl = _ckernels


def available_backends():
    return sorted(_BACKENDS)


def backend():
    return "cython" if _impl is _ckernels and _ckernels is not None else "python"


def set_backend(name):
    global _impl
    try:
        _impl = _BACKENDS[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} unavailable; have {available_backends()}") from None


@contextlib.contextmanager
def use_backend(name):
    previous = backend()
    set_backend(name)
    try:
        yield
    finally:
        set_backend(previous)


def down(a):
    return _pykernels.down(a)


def up(a):
    return _pykernels.up(a)


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def iv_affine(W, b, lo, hi):
    """Enclosure of ``x @ W.T + b`` over boxes given as (K, n) bound arrays."""
    return _impl.iv_affine(_c(W), _c(b), _c(lo), _c(hi))


def iv_mul(alo, ahi, blo, bhi):
    """Elementwise interval product with broadcasting."""
    alo, ahi, blo, bhi = np.broadcast_arrays(alo, ahi, blo, bhi)
    shape = alo.shape
    lo, hi = _impl.iv_mul_flat(_c(alo).ravel(), _c(ahi).ravel(), _c(blo).ravel(), _c(bhi).ravel())
    return lo.reshape(shape), hi.reshape(shape)


def iv_sum_rows(lo, hi):
    return _impl.iv_sum_rows(_c(lo), _c(hi))


def iv_matmul_point(W, lo, hi):
    """Enclose ``W @ D`` for interval tensors ``D`` of shape (K, n, d)."""
    K, n, d = lo.shape
    flat_lo = np.transpose(lo, (0, 2, 1)).reshape(K * d, n)
    flat_hi = np.transpose(hi, (0, 2, 1)).reshape(K * d, n)
    zero = np.zeros(W.shape[0])
    rlo, rhi = iv_affine(W, zero, flat_lo, flat_hi)
    m = W.shape[0]
    return (np.transpose(rlo.reshape(K, d, m), (0, 2, 1)),
            np.transpose(rhi.reshape(K, d, m), (0, 2, 1)))
