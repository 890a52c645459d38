"""Pure numpy interval kernels.

Every rounded result is pushed outward by four ulps of its magnitude. The
operation order matches ``_ckernels.pyx`` exactly so both backends return
bit-identical arrays.
"""
import numpy as np

_INF = np.inf


def down(a):
    m = np.abs(a)
    return a - 4.0 * (np.nextafter(m, _INF) - m)


def up(a):
    m = np.abs(a)
    return a + 4.0 * (np.nextafter(m, _INF) - m)


def iv_affine(W, b, lo, hi):
    """Enclose ``W @ x + b`` for every box row ``[lo_i, hi_i]``.

    ``W`` is (m, n), ``b`` is (m,), ``lo``/``hi`` are (K, n). Returns two
    (K, m) arrays.
    """
    K, n = lo.shape
    m = W.shape[0]
    acc_lo = np.broadcast_to(b, (K, m)).copy()
    acc_hi = acc_lo.copy()
    with np.errstate(invalid="ignore", over="ignore"):
        for k in range(n):
            w = W[:, k][None, :]
            t1 = w * lo[:, k : k + 1]
            t2 = w * hi[:, k : k + 1]
            acc_lo = down(acc_lo + down(np.minimum(t1, t2)))
            acc_hi = up(acc_hi + up(np.maximum(t1, t2)))
    return acc_lo, acc_hi


def iv_mul_flat(alo, ahi, blo, bhi):
    with np.errstate(invalid="ignore", over="ignore"):
        p1 = alo * blo
        p2 = alo * bhi
        p3 = ahi * blo
        p4 = ahi * bhi
        lo = np.minimum(np.minimum(p1, p2), np.minimum(p3, p4))
        hi = np.maximum(np.maximum(p1, p2), np.maximum(p3, p4))
        return down(lo), up(hi)


def iv_sum_rows(lo, hi):
    """Enclose the row sums of a (K, n) interval matrix."""
    acc_lo = lo[:, 0].copy()
    acc_hi = hi[:, 0].copy()
    with np.errstate(invalid="ignore", over="ignore"):
        for k in range(1, lo.shape[1]):
            acc_lo = down(acc_lo + lo[:, k])
            acc_hi = up(acc_hi + hi[:, k])
    return acc_lo, acc_hi
