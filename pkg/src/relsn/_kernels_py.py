"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``."""
from __future__ import annotations

import numpy as np


def _band_to_dense(band: np.ndarray) -> np.ndarray:
    """Expand stacked lower banded matrices ``(..., p, dim)`` to dense."""
    p, dim = band.shape[-2:]
    dense = np.zeros(band.shape[:-2] + (dim, dim))
    cols = np.arange(dim)
    for d in range(p):
        j = cols[: dim - d]
        dense[..., j + d, j] = band[..., d, : dim - d]
        if d:
            dense[..., j, j + d] = band[..., d, : dim - d]
    return dense


def prefix_solve(gband: np.ndarray, rhs: np.ndarray, m_start: int):
    L, p, dim = gband.shape
    if rhs.shape != (L, dim):
        raise ValueError("gband and rhs disagree in shape")
    if not 1 <= m_start <= L:
        raise ValueError("m_start must lie in [1, L]")

    acc = np.cumsum(gband, axis=0)[m_start - 1:]
    accb = np.cumsum(rhs, axis=0)[m_start - 1:]
    dense = _band_to_dense(acc)
    out = np.full((L - m_start + 1, dim), np.nan)
    try:
        np.linalg.cholesky(dense)
    except np.linalg.LinAlgError:
        for r in range(dense.shape[0]):
            try:
                np.linalg.cholesky(dense[r])
            except np.linalg.LinAlgError:
                if r:
                    out[:r] = np.linalg.solve(dense[:r], accb[:r, :, None])[..., 0]
                return out, m_start + r
    out[:] = np.linalg.solve(dense, accb[:, :, None])[..., 0]
    return out, 0


def bridge_functionals(increments: np.ndarray, first: int, correction: float):
    P, S = increments.shape
    if not 1 <= first < S:
        raise ValueError("first must lie in [1, S - 1]")
    W = np.cumsum(increments, axis=1)
    W1 = W[:, -1].copy()
    t = np.arange(first, S + 1) / S
    f = t * (W[:, first - 1:] - t * W1[:, None])
    sq = f * f
    integral = np.sqrt((sq.sum(axis=1) - 0.5 * sq[:, 0] - 0.5 * sq[:, -1]) / S)

    rows = np.arange(P)
    ia = np.abs(f).argmax(axis=1)
    imax = f.argmax(axis=1)
    imin = f.argmin(axis=1)
    sup = np.abs(f[rows, ia]) + correction * t[ia]
    rng = (f[rows, imax] + correction * t[imax]) - (f[rows, imin] - correction * t[imin])
    return W1, integral, sup, rng
