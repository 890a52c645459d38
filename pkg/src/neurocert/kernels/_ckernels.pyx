# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled interval kernels; same contract and bit pattern as _pykernels."""
import numpy as np

from libc.math cimport nextafter, fabs, INFINITY, NAN


cdef inline double _down(double a) noexcept nogil:
    cdef double m = fabs(a)
    return a - 4.0 * (nextafter(m, INFINITY) - m)


cdef inline double _up(double a) noexcept nogil:
    cdef double m = fabs(a)
    return a + 4.0 * (nextafter(m, INFINITY) - m)


cdef inline double _min(double a, double b) noexcept nogil:
    if a != a or b != b:
        return NAN
    return a if a <= b else b


cdef inline double _max(double a, double b) noexcept nogil:
    if a != a or b != b:
        return NAN
    return a if a >= b else b


def down(a):
    m = np.abs(a)
    return a - 4.0 * (np.nextafter(m, np.inf) - m)


def up(a):
    m = np.abs(a)
    return a + 4.0 * (np.nextafter(m, np.inf) - m)


def iv_affine(const double[:, ::1] W, const double[::1] b,
              const double[:, ::1] lo, const double[:, ::1] hi):
    cdef Py_ssize_t K = lo.shape[0], n = lo.shape[1], m = W.shape[0]
    cdef Py_ssize_t i, j, k
    cdef double w, t1, t2, alo, ahi
    out_lo = np.empty((K, m))
    out_hi = np.empty((K, m))
    cdef double[:, ::1] olo = out_lo
    cdef double[:, ::1] ohi = out_hi
    with nogil:
        for i in range(K):
            for j in range(m):
                alo = b[j]
                ahi = b[j]
                for k in range(n):
                    w = W[j, k]
                    t1 = w * lo[i, k]
                    t2 = w * hi[i, k]
                    alo = _down(alo + _down(_min(t1, t2)))
                    ahi = _up(ahi + _up(_max(t1, t2)))
                olo[i, j] = alo
                ohi[i, j] = ahi
    return out_lo, out_hi


def iv_mul_flat(const double[::1] alo, const double[::1] ahi,
                const double[::1] blo, const double[::1] bhi):
    cdef Py_ssize_t N = alo.shape[0], i
    cdef double p1, p2, p3, p4
    out_lo = np.empty(N)
    out_hi = np.empty(N)
    cdef double[::1] olo = out_lo
    cdef double[::1] ohi = out_hi
    with nogil:
        for i in range(N):
            p1 = alo[i] * blo[i]
            p2 = alo[i] * bhi[i]
            p3 = ahi[i] * blo[i]
            p4 = ahi[i] * bhi[i]
            olo[i] = _down(_min(_min(p1, p2), _min(p3, p4)))
            ohi[i] = _up(_max(_max(p1, p2), _max(p3, p4)))
    return out_lo, out_hi


def iv_sum_rows(const double[:, ::1] lo, const double[:, ::1] hi):
    cdef Py_ssize_t K = lo.shape[0], n = lo.shape[1], i, k
    cdef double alo, ahi
    out_lo = np.empty(K)
    out_hi = np.empty(K)
    cdef double[::1] olo = out_lo
    cdef double[::1] ohi = out_hi
    with nogil:
        for i in range(K):
            alo = lo[i, 0]
            ahi = hi[i, 0]
            for k in range(1, n):
                alo = _down(alo + lo[i, k])
                ahi = _up(ahi + hi[i, k])
            olo[i] = alo
            ohi[i] = ahi
    return out_lo, out_hi
