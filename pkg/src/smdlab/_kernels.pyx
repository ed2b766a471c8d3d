# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops. Signatures mirror ``_kernels_py`` exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, sqrt, INFINITY

cnp.import_array()


def mixture_logpdf(const double[:, ::1] x, const double[:, ::1] means, const double[:, :, ::1] prec_chol,
                   const double[::1] log_coef):
    """log sum_k exp(log_coef[k] - 0.5 * |prec_chol[k] (x - means[k])|^2) per row of x.

    ``prec_chol[k]`` is the transposed inverse Cholesky factor, so the quadratic
    form equals the Mahalanobis distance. ``log_coef`` folds log-weight and
    normalizing constant.
    """
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], kk = means.shape[0]
    cdef Py_ssize_t i, k, r, c
    cdef double acc, q, best, total
    cdef double[::1] diff = np.empty(d)
    cdef double[::1] terms = np.empty(kk)
    out = np.empty(n)
    cdef double[::1] o = out
    for i in range(n):
        best = -INFINITY
        for k in range(kk):
            for c in range(d):
                diff[c] = x[i, c] - means[k, c]
            q = 0.0
            for r in range(d):
                acc = 0.0
                for c in range(r + 1):
                    acc += prec_chol[k, r, c] * diff[c]
                q += acc * acc
            terms[k] = log_coef[k] - 0.5 * q
            if terms[k] > best:
                best = terms[k]
        if best == -INFINITY:
            o[i] = -INFINITY
            continue
        total = 0.0
        for k in range(kk):
            total += exp(terms[k] - best)
        o[i] = best + log(total)
    return out


# exp runs through numpy (SIMD); the loops fuse the remaining arithmetic and
# match the numpy fallback operation for operation.


def _neg_exp(a):
    with np.errstate(over="ignore"):
        return np.exp(np.negative(a))


def silu(const double[:, ::1] a):
    cdef Py_ssize_t n = a.shape[0], w = a.shape[1], i, j
    cdef double[:, ::1] e = _neg_exp(a)
    out = np.empty((n, w))
    cdef double[:, ::1] o = out
    for i in range(n):
        for j in range(w):
            o[i, j] = a[i, j] / (1.0 + e[i, j])
    return out


def silu_film(const double[:, ::1] a, const double[:, ::1] scale, const double[:, ::1] shift):
    """Returns (act, h) with act = silu(a) and h = act * (1 + scale) + shift."""
    cdef Py_ssize_t n = a.shape[0], w = a.shape[1], i, j
    cdef double[:, ::1] e = _neg_exp(a)
    cdef double x
    act = np.empty((n, w))
    h = np.empty((n, w))
    cdef double[:, ::1] ac = act
    cdef double[:, ::1] hv = h
    for i in range(n):
        for j in range(w):
            x = a[i, j] / (1.0 + e[i, j])
            ac[i, j] = x
            hv[i, j] = x * (1.0 + scale[i, j]) + shift[i, j]
    return act, h


def silu_grad(const double[:, ::1] a, const double[:, ::1] dact):
    """dact * sig(a) * (1 + a * (1 - sig(a)))."""
    cdef Py_ssize_t n = a.shape[0], w = a.shape[1], i, j
    cdef double[:, ::1] e = _neg_exp(a)
    cdef double s
    out = np.empty((n, w))
    cdef double[:, ::1] o = out
    for i in range(n):
        for j in range(w):
            s = 1.0 / (1.0 + e[i, j])
            o[i, j] = dact[i, j] * s * (1.0 + a[i, j] * (1.0 - s))
    return out


def silu_film_grad(const double[:, ::1] a, const double[:, ::1] act, const double[:, ::1] scale,
                   const double[:, ::1] dh):
    """Returns (da, dscale); dshift equals dh."""
    cdef Py_ssize_t n = a.shape[0], w = a.shape[1], i, j
    cdef double[:, ::1] e = _neg_exp(a)
    cdef double s, dact
    da = np.empty((n, w))
    dscale = np.empty((n, w))
    cdef double[:, ::1] dav = da
    cdef double[:, ::1] dsv = dscale
    for i in range(n):
        for j in range(w):
            dsv[i, j] = dh[i, j] * act[i, j]
            dact = dh[i, j] * (1.0 + scale[i, j])
            s = 1.0 / (1.0 + e[i, j])
            dav[i, j] = dact * s * (1.0 + a[i, j] * (1.0 - s))
    return da, dscale


def adam_update(double[::1] p, const double[::1] g, double[::1] m, double[::1] v,
                double lr, double b1, double b2, double c1, double c2, double eps):
    """In-place bias-corrected Adam update; same operation order as the numpy version."""
    cdef Py_ssize_t i, n = p.shape[0]
    cdef double gi, mi, vi
    cdef double k1 = 1.0 - b1, k2 = 1.0 - b2
    for i in range(n):
        gi = g[i]
        mi = m[i] * b1 + k1 * gi
        vi = v[i] * b2 + k2 * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] = p[i] - lr * (mi / c1) / (sqrt(vi / c2) + eps)
