"""Equally spaced B-splines and pooled weighted least-squares mean fits.

Every curve ``i`` contributes ``(1/N_i) sum_j B(X_ij) B(X_ij)^T`` to the Gram
matrix and ``(1/N_i) sum_j B(X_ij) Y_ij`` to the right-hand side, so sparse
and dense curves carry equal weight. Per-curve contributions are computed
once (:func:`curve_moments`) and summed along prefixes of a curve window by
the kernel in :mod:`relsn._backend`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from numbers import Rational
from typing import Iterable, Sequence

import numpy as np

from relsn import _backend
from relsn._kernels_py import _band_to_dense
from relsn.errors import (
    DomainError,
    IllConditionedDesignError,
    InsufficientPrefixError,
    SpecMismatchError,
)

#: Smallest accepted reciprocal condition number of a Gram matrix.
RCOND_MIN = 1e-12

#: Mean squared residuals below this fraction of the mean squared response
#: are treated as exact fits by the BIC (roundoff would otherwise decide).
BIC_RESIDUAL_FLOOR = 1e-24


def floor_count(length: int, fraction) -> int:
    """``floor(length * fraction)`` robust to representation error.

    Products within 1e-9 (relative) of an integer snap to it, so that e.g.
    ``floor_count(300, 100 / 300) == 100``. Exact ``Fraction`` input is
    floored exactly.
    """
    if isinstance(fraction, Rational):
        return math.floor(length * Fraction(fraction))
    v = length * float(fraction)
    r = round(v)
    if abs(v - r) <= 1e-9 * max(1.0, abs(v)):
        return int(r)
    return math.floor(v)


def ceil_count(length: int, fraction) -> int:
    """``ceil(length * fraction)`` with the same snapping as :func:`floor_count`."""
    if isinstance(fraction, Rational):
        return math.ceil(length * Fraction(fraction))
    v = length * float(fraction)
    r = round(v)
    if abs(v - r) <= 1e-9 * max(1.0, abs(v)):
        return int(r)
    return math.ceil(v)


@dataclass(frozen=True)
class SplineSpec:
    """Spline space of order ``order`` (degree ``order - 1``) on [0, 1].

    The ``interior_knots`` knots ``l / (J + 1)`` split [0, 1] into ``J + 1``
    equal subintervals; the boundary knots are repeated ``order`` times.
    """

    order: int = 4
    interior_knots: int = 0

    def __post_init__(self):
        if int(self.order) != self.order or self.order < 1:
            raise DomainError(f"spline order must be an integer >= 1, got {self.order}")
        if int(self.interior_knots) != self.interior_knots or self.interior_knots < 0:
            raise DomainError(
                f"interior knot count must be an integer >= 0, got {self.interior_knots}"
            )
        object.__setattr__(self, "order", int(self.order))
        object.__setattr__(self, "interior_knots", int(self.interior_knots))

    @property
    def dim(self) -> int:
        return self.interior_knots + self.order

    @property
    def degree(self) -> int:
        return self.order - 1

    @property
    def n_intervals(self) -> int:
        return self.interior_knots + 1

    @property
    def breakpoints(self) -> np.ndarray:
        return np.arange(self.n_intervals + 1) / self.n_intervals

    @property
    def knot_vector(self) -> np.ndarray:
        k = self.degree
        return np.concatenate([np.zeros(k), self.breakpoints, np.ones(k)])

    def interval_index(self, x: np.ndarray) -> np.ndarray:
        """Subinterval holding each point; ``x == 1`` goes to the last one."""
        J = self.interior_knots
        return np.minimum(np.floor(x * (J + 1)).astype(np.intp), J)

    def local_basis(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Nonzero basis values at each point.

        Returns ``(first, values)`` where ``values[i, a]`` is basis function
        ``first[i] + a`` (0-based) evaluated at ``x[i]``, ``a < order``.
        """
        x = np.asarray(x, dtype=float)
        scalar = x.ndim == 0
        x = np.atleast_1d(x)
        if x.size and (not np.all(np.isfinite(x)) or x.min() < 0.0 or x.max() > 1.0):
            raise DomainError("basis evaluation requires 0 <= x <= 1")
        k = self.degree
        first = self.interval_index(x)
        U = self.knot_vector
        span = first + k
        N = np.zeros((x.size, self.order))
        N[:, 0] = 1.0
        left = np.zeros((x.size, self.order))
        right = np.zeros((x.size, self.order))
        # Cox-de Boor recursion, evaluated for the order nonzero functions only.
        for j in range(1, k + 1):
            left[:, j] = x - U[span + 1 - j]
            right[:, j] = U[span + j] - x
            saved = np.zeros(x.size)
            for r in range(j):
                temp = N[:, r] / (right[:, r + 1] + left[:, j - r])
                N[:, r] = saved + right[:, r + 1] * temp
                saved = left[:, j - r] * temp
            N[:, j] = saved
        if scalar:
            return first[:1], N[:1]
        return first, N

    def basis(self, x) -> np.ndarray:
        """Dense basis matrix, shape ``(len(x), dim)``."""
        first, vals = self.local_basis(x)
        out = np.zeros((vals.shape[0], self.dim))
        rows = np.arange(vals.shape[0])[:, None]
        out[rows, first[:, None] + np.arange(self.order)] = vals
        return out


def basis_eval(spec: SplineSpec, x: float) -> np.ndarray:
    """``(B_1(x), ..., B_{J+p}(x))`` for a single point ``x`` in [0, 1]."""
    if np.ndim(x) != 0:
        raise DomainError("basis_eval takes a single point; use SplineSpec.basis")
    return spec.basis(np.array([x], dtype=float))[0]


@dataclass(frozen=True, eq=False)
class Curve:
    """One discretely observed curve at time position ``index`` (1-based)."""

    index: int
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float).ravel()
        y = np.asarray(self.y, dtype=float).ravel()
        if x.size < 1 or x.size != y.size:
            raise DomainError("a curve needs N_i >= 1 points with matching x and y")
        if not np.all(np.isfinite(x)) or x.min() < 0.0 or x.max() > 1.0:
            raise DomainError(f"curve {self.index}: design points must lie in [0, 1]")
        if not np.all(np.isfinite(y)):
            raise DomainError(f"curve {self.index}: non-finite response")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def n_points(self) -> int:
        return self.x.size


class FunctionalSample:
    """Time-ordered curves, stored flat.

    Curve ``i`` (0-based) owns observations ``offsets[i]:offsets[i + 1]`` of
    ``x`` and ``y``.
    """

    __slots__ = ("x", "y", "offsets", "_ids")

    def __init__(self, x, y, offsets):
        x = np.ascontiguousarray(x, dtype=float)
        y = np.ascontiguousarray(y, dtype=float)
        offsets = np.ascontiguousarray(offsets, dtype=np.intp)
        if x.ndim != 1 or x.shape != y.shape:
            raise DomainError("x and y must be 1-d arrays of equal length")
        if offsets.ndim != 1 or offsets.size < 2 or offsets[0] != 0 or offsets[-1] != x.size:
            raise DomainError("offsets must run from 0 to the number of observations")
        if np.any(np.diff(offsets) < 1):
            raise DomainError("every curve needs at least one observation")
        if not np.all(np.isfinite(x)) or x.min() < 0.0 or x.max() > 1.0:
            raise DomainError("design points must lie in [0, 1]")
        if not np.all(np.isfinite(y)):
            raise DomainError("responses must be finite")
        self.x = x
        self.y = y
        self.offsets = offsets
        self._ids = None

    @classmethod
    def from_curves(cls, curves: Iterable) -> "FunctionalSample":
        """Build from :class:`Curve` objects or ``(x, y)`` pairs in time order."""
        xs, ys = [], []
        expected = 1
        for item in curves:
            if isinstance(item, Curve):
                if item.index != expected:
                    raise DomainError(
                        f"curve indices must run 1..n contiguously; got {item.index} "
                        f"where {expected} was expected"
                    )
                cx, cy = item.x, item.y
            else:
                c = Curve(expected, *item)
                cx, cy = c.x, c.y
            xs.append(cx)
            ys.append(cy)
            expected += 1
        if not xs:
            raise DomainError("a sample needs at least one curve")
        offsets = np.concatenate([[0], np.cumsum([a.size for a in xs])])
        return cls(np.concatenate(xs), np.concatenate(ys), offsets)

    @property
    def n(self) -> int:
        return self.offsets.size - 1

    def __len__(self) -> int:
        return self.n

    @property
    def counts(self) -> np.ndarray:
        """Observation counts ``N_i``."""
        return np.diff(self.offsets)

    @property
    def curve_ids(self) -> np.ndarray:
        """0-based curve index of every observation."""
        if self._ids is None:
            self._ids = np.repeat(np.arange(self.n), self.counts)
        return self._ids

    @property
    def obs_weights(self) -> np.ndarray:
        """``1 / N_i`` for every observation."""
        return 1.0 / self.counts[self.curve_ids]

    @property
    def harmonic_mean_count(self) -> float:
        return 1.0 / np.mean(1.0 / self.counts)

    def curve(self, index: int) -> Curve:
        """Curve at 1-based time position ``index``."""
        if not 1 <= index <= self.n:
            raise DomainError(f"curve index {index} outside 1..{self.n}")
        lo, hi = self.offsets[index - 1], self.offsets[index]
        return Curve(index, self.x[lo:hi], self.y[lo:hi])

    @property
    def curves(self) -> list[Curve]:
        return [self.curve(i) for i in range(1, self.n + 1)]

    def window(self, start: int, stop: int) -> "FunctionalSample":
        """Curves ``start..stop - 1`` (0-based, half open) as a new sample."""
        if not 0 <= start < stop <= self.n:
            raise DomainError(f"window [{start}, {stop}) outside [0, {self.n})")
        lo, hi = self.offsets[start], self.offsets[stop]
        return FunctionalSample(self.x[lo:hi], self.y[lo:hi], self.offsets[start:stop + 1] - lo)

    def with_values(self, y) -> "FunctionalSample":
        """Same design, new responses."""
        return FunctionalSample(self.x, y, self.offsets)

    def __repr__(self) -> str:
        return f"FunctionalSample(n={self.n}, observations={self.x.size})"


def _window_bounds(sample: FunctionalSample, window) -> tuple[int, int]:
    """1-based inclusive ``(first, last)`` curve window to 0-based half open."""
    if window is None:
        return 0, sample.n
    first, last = window
    if not 1 <= first <= last <= sample.n:
        raise DomainError(f"curve window {window} outside 1..{sample.n}")
    return first - 1, last


def curve_moments(sample: FunctionalSample, spec: SplineSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per-curve Gram contributions and right-hand sides.

    Returns ``gband`` of shape ``(n, p, dim)`` in lower banded storage
    (``gband[i, d, j] = G_i[j + d, j]``) and ``rhs`` of shape ``(n, dim)``.
    """
    first, vals = spec.local_basis(sample.x)
    n, p, dim = sample.n, spec.order, spec.dim
    cid = sample.curve_ids
    w = sample.obs_weights
    size = n * p * dim
    g = np.zeros(size)
    rhs = np.zeros(n * dim)
    base = cid * (p * dim)
    for a in range(p):
        wa = w * vals[:, a]
        rhs += np.bincount(cid * dim + first + a, weights=wa * sample.y, minlength=n * dim)
        for b in range(a + 1):
            idx = base + (a - b) * dim + first + b
            g += np.bincount(idx, weights=wa * vals[:, b], minlength=size)
    return g.reshape(n, p, dim), rhs.reshape(n, dim)


def _rcond(dense: np.ndarray) -> np.ndarray:
    ev = np.linalg.eigvalsh(dense)
    top = ev[..., -1]
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(top > 0, ev[..., 0] / top, 0.0)
    return out


def _check_conditioning(gband: np.ndarray, m_start: int, offset: int = 0) -> None:
    # Prefix Gram matrices grow in the Loewner order, so the smallest
    # eigenvalue of the first and the largest of the last bound every rcond.
    first = _band_to_dense(gband[:m_start].sum(axis=0))
    last = _band_to_dense(gband.sum(axis=0))
    lo = np.linalg.eigvalsh(first)[0]
    hi = np.linalg.eigvalsh(last)[-1]
    if hi > 0 and lo / hi >= RCOND_MIN:
        return
    dense = _band_to_dense(np.cumsum(gband, axis=0)[m_start - 1:])
    bad = np.flatnonzero(_rcond(dense) < RCOND_MIN)
    if bad.size:
        m = m_start + int(bad[0])
        raise IllConditionedDesignError(
            f"Gram matrix of the first {m} curves (from curve {offset + 1}) is singular "
            f"or has reciprocal condition number below {RCOND_MIN:g}; "
            "reduce the number of knots or enlarge the trimming fraction"
        )


def solve_prefixes(gband: np.ndarray, rhs: np.ndarray, m_start: int, offset: int = 0) -> np.ndarray:
    """Coefficients of the fits to the first ``m_start..L`` curves of a window.

    ``gband`` and ``rhs`` are the :func:`curve_moments` rows of the window.
    Row ``r`` of the result belongs to the prefix of length ``m_start + r``.
    """
    L = gband.shape[0]
    if not 1 <= m_start <= L:
        raise InsufficientPrefixError(f"prefix length {m_start} outside 1..{L}")
    _check_conditioning(gband, m_start, offset)
    coefs, status = _backend.prefix_solve(
        np.ascontiguousarray(gband), np.ascontiguousarray(rhs), int(m_start)
    )
    if status:
        raise IllConditionedDesignError(
            f"Gram matrix of the first {status} curves (from curve {offset + 1}) "
            "is not positive definite"
        )
    return coefs


@dataclass(frozen=True, eq=False)
class SplineFit:
    """The spline ``x -> B(x)^T coefficients`` fitted from a prefix ``fraction``."""

    spec: SplineSpec
    coefficients: np.ndarray
    fraction: float = 1.0

    def __post_init__(self):
        c = np.asarray(self.coefficients, dtype=float).ravel()
        if c.size != self.spec.dim:
            raise SpecMismatchError(
                f"{c.size} coefficients for a spline space of dimension {self.spec.dim}"
            )
        object.__setattr__(self, "coefficients", c)

    def __call__(self, x) -> np.ndarray:
        first, vals = self.spec.local_basis(x)
        idx = first[:, None] + np.arange(self.spec.order)
        out = (vals * self.coefficients[idx]).sum(axis=1)
        return out[0] if np.ndim(x) == 0 else out


def fit_partial_mean(
    sample: FunctionalSample,
    spec: SplineSpec,
    t: float = 1.0,
    window: tuple[int, int] | None = None,
) -> SplineFit:
    """Least-squares spline fit to the first ``floor(L t)`` curves of a window.

    ``window`` is a 1-based inclusive ``(first, last)`` curve range of length
    ``L``; by default all curves.
    """
    if not 0.0 < float(t) <= 1.0:
        raise DomainError(f"prefix fraction must lie in (0, 1], got {t}")
    lo, hi = _window_bounds(sample, window)
    m = floor_count(hi - lo, t)
    if m < 1:
        raise DomainError(f"prefix floor({hi - lo} * {t}) is empty")
    gband, rhs = curve_moments(sample.window(lo, lo + m), spec)
    coefs = solve_prefixes(gband, rhs, m, offset=lo)
    return SplineFit(spec, coefs[-1], float(t))


def fit_mean(sample: FunctionalSample, spec: SplineSpec) -> SplineFit:
    return fit_partial_mean(sample, spec, 1.0)


def gram(
    sample: FunctionalSample,
    spec: SplineSpec,
    t: float = 1.0,
    window: tuple[int, int] | None = None,
) -> np.ndarray:
    """Normalized Gram matrix ``Q_t`` of the first ``floor(L t)`` curves."""
    if not 0.0 < float(t) <= 1.0:
        raise DomainError(f"prefix fraction must lie in (0, 1], got {t}")
    lo, hi = _window_bounds(sample, window)
    m = floor_count(hi - lo, t)
    if m < 1:
        raise DomainError(f"prefix floor({hi - lo} * {t}) is empty")
    gband, _ = curve_moments(sample.window(lo, lo + m), spec)
    return _band_to_dense(gband.sum(axis=0)) / m


def quadrature_rule(specs: Sequence[SplineSpec]) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights exact for products of the given splines.

    The union of all breakpoints is used, with ``ceil((2p - 1) / 2)`` nodes per
    piece for the largest order ``p``.
    """
    specs = list(specs)
    return _quadrature_rule(
        tuple(sorted({s.n_intervals for s in specs})), max(s.order for s in specs)
    )


@lru_cache(maxsize=256)
def _quadrature_rule(intervals: tuple[int, ...], order: int):
    edges = sorted({Fraction(l, m) for m in intervals for l in range(m + 1)})
    edges = np.array([float(e) for e in edges])
    q = math.ceil((2 * order - 1) / 2)
    gx, gw = np.polynomial.legendre.leggauss(q)
    a, b = edges[:-1, None], edges[1:, None]
    nodes = (0.5 * (b - a) * gx + 0.5 * (a + b)).ravel()
    weights = (0.5 * (b - a) * gw).ravel()
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


@lru_cache(maxsize=128)
def inner_product_matrix(spec: SplineSpec) -> np.ndarray:
    """``M = int_0^1 B(x) B(x)^T dx``, exact up to roundoff."""
    nodes, weights = quadrature_rule([spec])
    B = spec.basis(nodes)
    M = B.T @ (weights[:, None] * B)
    M = 0.5 * (M + M.T)
    M.setflags(write=False)
    return M


def integrate_sq_diff(fit_a: SplineFit, fit_b: SplineFit, allow_mixed: bool = True) -> float:
    """``int_0^1 {fit_a(x) - fit_b(x)}^2 dx`` by exact Gauss-Legendre quadrature.

    Fits from different spline spaces are compared on the union of their
    breakpoints unless ``allow_mixed`` is false.
    """
    if fit_a.spec != fit_b.spec and not allow_mixed:
        raise SpecMismatchError(f"spline spaces differ: {fit_a.spec} vs {fit_b.spec}")
    nodes, weights = quadrature_rule([fit_a.spec, fit_b.spec])
    d = fit_a(nodes) - fit_b(nodes)
    return float(weights @ (d * d))


def default_knot_range(n: int, nbar: float) -> tuple[int, int]:
    """Default BIC search range for the number of interior knots.

    ``[min{0.5 (n Nbar)^(1/9) (log n)^(2/9), 0.5 n^(1/8) (log n)^(1/4)},
    min{n^(1/4) Nbar^(5/8), 2 n^(3/10)}]`` with the lower end floored, the
    upper end ceiled, and both clamped at 0.
    """
    if n < 2:
        raise DomainError("the default knot range needs n >= 2")
    ln = math.log(n)
    lower = min(0.5 * (n * nbar) ** (1 / 9) * ln ** (2 / 9), 0.5 * n ** (1 / 8) * ln ** (1 / 4))
    upper = min(n ** 0.25 * nbar ** 0.625, 2.0 * n ** 0.3)
    return max(0, math.floor(lower)), max(0, math.ceil(upper))


def bic_values(
    sample: FunctionalSample,
    order: int = 4,
    candidates: Iterable[int] | None = None,
) -> dict[int, float]:
    """BIC of the full-sample fit for each candidate interior knot count.

    Candidates whose Gram matrix is ill-conditioned get ``inf``.
    """
    if candidates is None:
        lo, hi = default_knot_range(sample.n, sample.harmonic_mean_count)
        candidates = range(lo, hi + 1)
    candidates = sorted(set(int(c) for c in candidates))
    if not candidates:
        raise DomainError("empty candidate range for knot selection")
    n = sample.n
    w = sample.obs_weights
    scale = float(w @ (sample.y * sample.y)) / n
    floor = max(BIC_RESIDUAL_FLOOR * scale, 1e-300)
    out = {}
    for J in candidates:
        spec = SplineSpec(order, J)
        gband, rhs = curve_moments(sample, spec)
        try:
            coefs = solve_prefixes(gband, rhs, n)[-1]
        except IllConditionedDesignError:
            out[J] = math.inf
            continue
        resid = sample.y - SplineFit(spec, coefs)(sample.x)
        rss = float(w @ (resid * resid)) / n
        out[J] = math.log(max(rss, floor)) + (J + order) * math.log(n) / n
    return out


def select_knots_bic(
    sample: FunctionalSample,
    order: int = 4,
    candidates: Iterable[int] | None = None,
) -> int:
    """Interior knot count minimizing the BIC; ties go to fewer knots."""
    values = bic_values(sample, order, candidates)
    best = min(values.items(), key=lambda kv: (kv[1], kv[0]))
    if not math.isfinite(best[1]):
        raise IllConditionedDesignError("every candidate knot count gives a singular design")
    return best[0]
