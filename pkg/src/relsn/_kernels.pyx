"""Compiled inner loops.

Two kernels dominate the runtime of the test procedures and of the pivotal
tabulation:

* ``prefix_solve``: running accumulation of per-curve banded Gram matrices and
  one banded Cholesky solve per prefix length.
* ``bridge_functionals``: one pass per simulated Brownian path computing the
  terminal value and the three self-normalizing denominators.

``relsn._kernels_py`` implements the same functions with numpy; the two are
checked against each other in the test suite.
"""
from libc.math cimport sqrt, fabs

import numpy as np


def prefix_solve(const double[:, :, ::1] gband, const double[:, ::1] rhs,
                 Py_ssize_t m_start):
    """Solve the normal equations of every prefix of a window of curves.

    Parameters
    ----------
    gband : ndarray, shape (L, p, dim)
        Per-curve Gram contributions in lower banded storage,
        ``gband[i, d, j] = G_i[j + d, j]``.
    rhs : ndarray, shape (L, dim)
        Per-curve right-hand sides.
    m_start : int
        Smallest prefix length to solve for.

    Returns
    -------
    coefs : ndarray, shape (L - m_start + 1, dim)
        Row ``r`` solves the system accumulated over the first
        ``m_start + r`` curves.
    status : int
        0 on success, otherwise the prefix length whose factorization hit a
        non-positive pivot (rows from there on are NaN).
    """
    cdef Py_ssize_t L = gband.shape[0]
    cdef Py_ssize_t p = gband.shape[1]
    cdef Py_ssize_t dim = gband.shape[2]
    if rhs.shape[0] != L or rhs.shape[1] != dim:
        raise ValueError("gband and rhs disagree in shape")
    if m_start < 1 or m_start > L:
        raise ValueError("m_start must lie in [1, L]")

    out = np.full((L - m_start + 1, dim), np.nan)
    acc = np.zeros((p, dim))
    accb = np.zeros(dim)
    chol = np.zeros((p, dim))
    work = np.zeros(dim)
    cdef double[:, ::1] coefs = out
    cdef double[:, ::1] A = acc
    cdef double[::1] b = accb
    cdef double[:, ::1] C = chol
    cdef double[::1] z = work

    cdef Py_ssize_t m, d, j, i, k, r, lo, hi
    cdef double s

    for m in range(L):
        for d in range(p):
            for j in range(dim):
                A[d, j] += gband[m, d, j]
        for j in range(dim):
            b[j] += rhs[m, j]
        if m + 1 < m_start:
            continue
        r = m + 1 - m_start

        for j in range(dim):
            lo = j - p + 1
            if lo < 0:
                lo = 0
            s = A[0, j]
            for k in range(lo, j):
                s -= C[j - k, k] * C[j - k, k]
            if s <= 0.0:
                return out, m + 1
            C[0, j] = sqrt(s)
            for d in range(1, p):
                i = j + d
                if i >= dim:
                    break
                lo = i - p + 1
                if lo < 0:
                    lo = 0
                s = A[d, j]
                for k in range(lo, j):
                    s -= C[i - k, k] * C[j - k, k]
                C[d, j] = s / C[0, j]

        for i in range(dim):
            lo = i - p + 1
            if lo < 0:
                lo = 0
            s = b[i]
            for k in range(lo, i):
                s -= C[i - k, k] * z[k]
            z[i] = s / C[0, i]
        for i in range(dim - 1, -1, -1):
            hi = i + p
            if hi > dim:
                hi = dim
            s = z[i]
            for k in range(i + 1, hi):
                s -= C[k - i, i] * coefs[r, k]
            coefs[r, i] = s / C[0, i]

    return out, 0


def bridge_functionals(const double[:, ::1] increments, Py_ssize_t first,
                       double correction):
    """Terminal values and bridge functionals of simulated Brownian paths.

    ``increments[i]`` holds the Gaussian increments of path ``i`` on the grid
    ``k / S``, ``k = 1..S``. With ``f(t) = t {W(t) - t W(1)}`` evaluated at
    grid indices ``first..S`` this returns ``W(1)``, the trapezoid value of
    ``[int f^2]^{1/2}``, ``max |f|`` and ``max f - min f``; grid extrema are
    pushed outward by ``correction * t`` at the attaining point.
    """
    cdef Py_ssize_t P = increments.shape[0]
    cdef Py_ssize_t S = increments.shape[1]
    if first < 1 or first >= S:
        raise ValueError("first must lie in [1, S - 1]")

    w1_out = np.empty(P)
    int_out = np.empty(P)
    sup_out = np.empty(P)
    rng_out = np.empty(P)
    cdef double[::1] w1v = w1_out
    cdef double[::1] intv = int_out
    cdef double[::1] supv = sup_out
    cdef double[::1] rngv = rng_out

    cdef Py_ssize_t i, k
    cdef double w, W1, t, f, sq, acc, f_first, f_last
    cdef double amax, t_amax, fmax, t_fmax, fmin, t_fmin
    cdef double h = 1.0 / S

    for i in range(P):
        w = 0.0
        for k in range(S):
            w += increments[i, k]
        W1 = w

        w = 0.0
        acc = 0.0
        amax = -1.0
        fmax = -1e308
        fmin = 1e308
        t_amax = 0.0
        t_fmax = 0.0
        t_fmin = 0.0
        f_first = 0.0
        f_last = 0.0
        for k in range(S):
            w += increments[i, k]
            if k + 1 < first:
                continue
            t = (k + 1) * h
            f = t * (w - t * W1)
            sq = f * f
            acc += sq
            if k + 1 == first:
                f_first = sq
            f_last = sq
            if fabs(f) > amax:
                amax = fabs(f)
                t_amax = t
            if f > fmax:
                fmax = f
                t_fmax = t
            if f < fmin:
                fmin = f
                t_fmin = t

        w1v[i] = W1
        intv[i] = sqrt(h * (acc - 0.5 * f_first - 0.5 * f_last))
        supv[i] = amax + correction * t_amax
        rngv[i] = (fmax + correction * t_fmax) - (fmin - correction * t_fmin)

    return w1_out, int_out, sup_out, rng_out
