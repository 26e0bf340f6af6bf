"""L2-CUSUM change point localization and binary segmentation.

For a split after curve ``k`` the contrast between the first ``k`` curves and
the whole sample is the spline with coefficients

    c_k = Q^{-1} (S_k - (k / n) S_n),

where ``S_k`` sums the per-curve right-hand sides of the first ``k`` curves
and ``Q`` is the full-sample Gram matrix. Its squared L2 norm ``c_k^T M c_k``
is maximized over the trimmed range ``[ceil(eps n), floor((1 - eps) n)]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from relsn._kernels_py import _band_to_dense
from relsn.errors import DomainError, IllConditionedDesignError
from relsn.spline_core import (
    RCOND_MIN,
    FunctionalSample,
    SplineSpec,
    _rcond,
    ceil_count,
    curve_moments,
    floor_count,
    inner_product_matrix,
)

#: Profile values within this relative distance of the maximum count as ties.
#: The distance is taken relative to the larger of the maximum and the mean
#: squared response, so a profile made of roundoff is one tie.
TIE_RTOL = 1e-10

#: Segmentation objectives below this multiple of the mean squared response
#: are treated as no change.
OBJECTIVE_FLOOR = 1e-10


@dataclass(frozen=True, eq=False)
class ChangePointEstimate:
    """Location ``k_hat`` (change after curve ``k_hat``) and the scanned profile.

    ``profile[r]`` is the objective at ``k = first + r``.
    """

    k_hat: int
    objective: float
    profile: np.ndarray
    first: int

    @property
    def ks(self) -> np.ndarray:
        return np.arange(self.first, self.first + self.profile.size)


def _factor_gram(gband: np.ndarray):
    Q = _band_to_dense(gband.sum(axis=0)) / gband.shape[0]
    if not float(_rcond(Q)) >= RCOND_MIN:
        raise IllConditionedDesignError(
            f"full-sample Gram matrix has reciprocal condition number below {RCOND_MIN:g}"
        )
    try:
        return scipy.linalg.cho_factor(Q, lower=True)
    except np.linalg.LinAlgError as exc:
        raise IllConditionedDesignError("full-sample Gram matrix is not positive definite") from exc


def cusum_profile(sample: FunctionalSample, spline: SplineSpec, ks=None) -> np.ndarray:
    """CUSUM objective ``c_k^T M c_k`` at split points ``ks`` (default all 1..n)."""
    n = sample.n
    gband, rhs = curve_moments(sample, spline)
    factor = _factor_gram(gband)
    S = np.cumsum(rhs, axis=0)
    ks = np.arange(1, n + 1) if ks is None else np.asarray(ks, dtype=int)
    if ks.size and (ks.min() < 1 or ks.max() > n):
        raise DomainError(f"split points must lie in 1..{n}")
    contrast = S[ks - 1] - (ks / n)[:, None] * S[-1]
    coefs = scipy.linalg.cho_solve(factor, contrast.T)
    M = inner_product_matrix(spline)
    return np.einsum("ik,ij,jk->k", coefs, M, coefs)


def trimmed_range(n: int, epsilon: float) -> tuple[int, int]:
    """``(ceil(eps n), floor((1 - eps) n))``."""
    return ceil_count(n, epsilon), floor_count(n, 1.0 - epsilon)


def estimate_single(sample: FunctionalSample, spline: SplineSpec, epsilon: float = 0.1) -> ChangePointEstimate:
    """Maximize the CUSUM objective over the trimmed range; ties go to the smallest k."""
    if not 0 < epsilon < 0.5:
        raise DomainError(f"epsilon must lie in (0, 1/2), got {epsilon}")
    n = sample.n
    if n * epsilon < 2 - 1e-9:
        raise DomainError(f"n = {n} curves is too few for epsilon = {epsilon} (need n >= 2/epsilon)")
    first, last = trimmed_range(n, epsilon)
    if first > last:
        raise DomainError(f"empty trimmed range for n = {n}, epsilon = {epsilon}")
    profile = cusum_profile(sample, spline, np.arange(first, last + 1))
    top = float(profile.max())
    scale = float(sample.obs_weights @ (sample.y * sample.y)) / n
    r = int(np.flatnonzero(profile >= top - TIE_RTOL * max(abs(top), scale))[0])
    profile.setflags(write=False)
    return ChangePointEstimate(first + r, float(profile[r]), profile, first)


@dataclass(frozen=True)
class Segmentation:
    """Change points found by binary segmentation, in increasing order.

    ``objectives[i]`` is the CUSUM value that selected ``locations[i]``;
    ``shortfall`` is set when fewer than the requested number were found.
    """

    locations: tuple
    objectives: tuple
    shortfall: bool


def default_min_segment(spline: SplineSpec, epsilon: float) -> int:
    """``ceil(2 (J + p) / eps)`` curves."""
    return math.ceil(2 * spline.dim / epsilon - 1e-9)


def binary_segmentation(
    sample: FunctionalSample,
    spline: SplineSpec,
    epsilon: float,
    K: int,
    min_segment: int | None = None,
) -> Segmentation:
    """Up to ``K`` change points by greedy binary segmentation.

    At each step the open segment whose best split has the largest CUSUM
    objective is split. Segments shorter than ``2 * min_segment`` curves,
    splits leaving a side shorter than ``min_segment``, splits with an
    objective below the numerical floor, and ill-conditioned segments are not
    split further.
    """
    if K < 1:
        raise DomainError(f"K must be at least 1, got {K}")
    if min_segment is None:
        min_segment = default_min_segment(spline, epsilon)
    if min_segment < 1:
        raise DomainError(f"min_segment must be positive, got {min_segment}")
    n = sample.n
    if K * min_segment >= n:
        raise DomainError(f"K * min_segment = {K * min_segment} must be below n = {n}")
    scale = float(sample.obs_weights @ (sample.y * sample.y)) / n
    floor = OBJECTIVE_FLOOR * max(scale, np.finfo(float).tiny)

    def best_split(lo: int, hi: int):
        if hi - lo < 2 * min_segment:
            return None
        try:
            est = estimate_single(sample.window(lo, hi), spline, epsilon)
        except (DomainError, IllConditionedDesignError):
            return None
        k = est.k_hat
        if k < min_segment or hi - lo - k < min_segment or est.objective <= floor:
            return None
        return est.objective, lo + k

    candidates = {}
    root = best_split(0, n)
    if root is not None:
        candidates[(0, n)] = root
    found = []
    while len(found) < K and candidates:
        seg = max(candidates, key=lambda s: (candidates[s][0], -s[0]))
        objective, cut = candidates.pop(seg)
        found.append((cut, objective))
        for lo, hi in ((seg[0], cut), (cut, seg[1])):
            split = best_split(lo, hi)
            if split is not None:
                candidates[(lo, hi)] = split
    found.sort()
    return Segmentation(
        tuple(int(c) for c, _ in found),
        tuple(float(o) for _, o in found),
        len(found) < K,
    )
