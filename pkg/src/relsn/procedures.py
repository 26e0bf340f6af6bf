"""Self-normalized tests of relevant hypotheses on functional means.

All four procedures share one construction. Curves are split into groups
(the whole sample, two samples, or the segments between change points); each
group ``g`` of ``L_g`` curves gets the spline fits ``f_g(t, .)`` to its first
``floor(L_g t)`` curves. A contrast of these fits gives

* the statistic ``T = I(1)``,
* the prefix discrepancy ``D(t) = I(t) - T`` for ``t`` in ``[epsilon, 1]``,

where ``I(t)`` is the integrated squared contrast. ``D`` is piecewise
constant between the jump points ``i / L_g``, so the normalizers

* integral: ``[int t^4 D(t)^2 dt]^{1/2}``
* sup: ``sup t^2 |D(t)|``
* range: ``sup t^2 D(t) - inf t^2 D(t)``

are evaluated exactly piece by piece. ``H0: ||.||^2 <= delta`` is rejected
when ``T > delta + Q * V`` with ``Q`` the upper quantile of the matching
pivotal law.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from relsn import _backend
from relsn.changepoint import estimate_single
from relsn.errors import DomainError, InsufficientPrefixError, InsufficientSegmentError
from relsn.pivotal import NormalizerKind, PivotalTable, get_table
from relsn.spline_core import (
    FunctionalSample,
    SplineSpec,
    curve_moments,
    floor_count,
    quadrature_rule,
    select_knots_bic,
    solve_prefixes,
)

#: A normalizer at most this fraction of the largest squared norm of the
#: fits it is built from is roundoff, and is reported as zero.
DEGENERATE_RTOL = 1e-10

#: Relative slack in ``statistic > threshold`` so that exact ties (constant
#: data with delta equal to the statistic) do not flip on the last bit.
DECISION_RTOL = 1e-12


def _epsilon_fraction(epsilon: float) -> Fraction:
    eps = Fraction(float(epsilon)).limit_denominator(10**9)
    if not 0 < eps < 1:
        raise DomainError(f"epsilon must lie in (0, 1), got {epsilon}")
    return eps


@dataclass(frozen=True)
class TestSpec:
    """Relevance threshold, level, trimming and normalizer of a test.

    ``spline=None`` selects the interior knot count by BIC for each group of
    order ``order``.
    """

    __test__ = False

    delta: float
    alpha: float = 0.05
    epsilon: float = 0.1
    kind: NormalizerKind = NormalizerKind.INTEGRAL
    spline: SplineSpec | None = None
    order: int = 4

    def __post_init__(self):
        object.__setattr__(self, "kind", NormalizerKind.parse(self.kind))
        if not self.delta > 0:
            raise DomainError(f"delta must be positive, got {self.delta}")
        if not 0 < self.alpha < 1:
            raise DomainError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not 0 < self.epsilon < 1:
            raise DomainError(f"epsilon must lie in (0, 1), got {self.epsilon}")


@dataclass
class PrefixStatistic:
    """A statistic with all three normalizers, before any decision."""

    statistic: float
    normalizers: dict
    scale: float
    n_pieces: int
    metadata: dict = field(default_factory=dict)

    def is_degenerate(self, kind) -> bool:
        v = self.normalizers[NormalizerKind.parse(kind)]
        return v <= DEGENERATE_RTOL * self.scale

    def normalizer(self, kind) -> float:
        if self.is_degenerate(kind):
            return 0.0
        return self.normalizers[NormalizerKind.parse(kind)]

    def decide(self, delta: float, kind, quantile: float) -> tuple[float, bool, bool]:
        """``(threshold, reject, degenerate)`` for ``T > delta + quantile * V``."""
        degenerate = self.is_degenerate(kind)
        v = self.normalizer(kind)
        threshold = delta + quantile * v
        gap = self.statistic - threshold
        reject = gap > DECISION_RTOL * max(abs(self.statistic), abs(threshold))
        return threshold, bool(reject), degenerate


@dataclass
class TestReport:
    __test__ = False

    family: str
    statistic: float
    normalizer: float
    quantile: float
    threshold: float
    reject: bool
    degenerate_normalizer: bool
    delta: float
    alpha: float
    epsilon: float
    kind: str
    n: int | list
    knots: int | list
    order: int | list
    change_points: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


@dataclass
class _Family:
    spec: SplineSpec
    length: int
    m_min: int
    coefs: np.ndarray


def _family(
    moments, sample: FunctionalSample, spec: SplineSpec, lo: int, hi: int,
    eps: Fraction, error=InsufficientPrefixError,
) -> _Family:
    gband, rhs = moments
    L = hi - lo
    m_min = math.floor(L * eps)
    if m_min < 1:
        raise error(
            f"curves {lo + 1}..{hi}: trimmed prefix floor({L} * {float(eps)}) is empty"
        )
    n_obs = int(sample.offsets[lo + m_min] - sample.offsets[lo])
    if n_obs < spec.dim:
        raise error(
            f"curves {lo + 1}..{hi}: the shortest prefix has {n_obs} observations, "
            f"fewer than the {spec.dim} spline coefficients"
        )
    coefs = solve_prefixes(gband[lo:hi], rhs[lo:hi], m_min, offset=lo)
    return _Family(spec, L, m_min, coefs)


def _pieces(families: Sequence[_Family], eps: Fraction):
    """Constant pieces of all ``floor(L_g t)`` on ``[eps, 1)``.

    Returns float left and right ends and, per family, the row of ``coefs``
    in force on each piece.
    """
    edges = {eps, Fraction(1)}
    for f in families:
        start = math.floor(f.length * eps) + 1
        edges.update(Fraction(i, f.length) for i in range(start, f.length))
    edges = sorted(edges)
    left = edges[:-1]
    rows = [
        np.array([(a.numerator * f.length) // a.denominator for a in left]) - f.m_min
        for f in families
    ]
    a = np.array([float(e) for e in left])
    b = np.array([float(e) for e in edges[1:]])
    return a, b, rows


def _contrast_integrals(values, contrasts, rows, weights) -> np.ndarray:
    total = 0.0
    for g, h in contrasts:
        d = values[g][rows[g]]
        if h is not None:
            d = d - values[h][rows[h]]
        total = total + (d * d) @ weights
    return np.atleast_1d(total)


def _normalizers(a: np.ndarray, b: np.ndarray, D: np.ndarray) -> dict:
    integral = math.sqrt(float(np.sum(D * D * (b**5 - a**5)) / 5.0))
    sup = max(float(np.max(b * b * np.abs(D))), 0.0)
    # t^2 D(t) is monotone on each piece; its extremes sit at the ends, and
    # D(1) = 0 contributes the value 0.
    top = np.where(D >= 0, b * b * D, a * a * D)
    bottom = np.where(D >= 0, a * a * D, b * b * D)
    rng = max(float(top.max()), 0.0) - min(float(bottom.min()), 0.0)
    return {
        NormalizerKind.INTEGRAL: integral,
        NormalizerKind.SUP: sup,
        NormalizerKind.RANGE: rng,
    }


def _prefix_statistic(families: Sequence[_Family], contrasts, eps: Fraction) -> PrefixStatistic:
    nodes, weights = quadrature_rule([f.spec for f in families])
    values = [f.coefs @ f.spec.basis(nodes).T for f in families]
    a, b, rows = _pieces(families, eps)
    full = [np.array([f.length - f.m_min]) for f in families]
    T = float(_contrast_integrals(values, contrasts, full, weights)[0])
    I = _contrast_integrals(values, contrasts, rows, weights)
    D = I - T
    # Roundoff in D is relative to the fitted functions, not to their contrast.
    norms = max(float(np.max((v * v) @ weights)) for v in values)
    scale = max(abs(T), float(np.max(np.abs(I))), norms)
    return PrefixStatistic(T, _normalizers(a, b, D), scale, int(a.size))


def prefix_discrepancy(families, contrasts, epsilon):
    """Piece ends and ``D`` values of a statistic (for diagnostics and checks)."""
    eps = _epsilon_fraction(epsilon)
    nodes, weights = quadrature_rule([f.spec for f in families])
    values = [f.coefs @ f.spec.basis(nodes).T for f in families]
    a, b, rows = _pieces(families, eps)
    full = [np.array([f.length - f.m_min]) for f in families]
    T = float(_contrast_integrals(values, contrasts, full, weights)[0])
    return a, b, _contrast_integrals(values, contrasts, rows, weights) - T


def _resolve_spline(sample: FunctionalSample, spline: SplineSpec | None, order: int) -> SplineSpec:
    if spline is not None:
        return spline
    return SplineSpec(order, select_knots_bic(sample, order))


def recenter(sample: FunctionalSample, m0: Callable | None) -> FunctionalSample:
    """Subtract a hypothesized mean ``m0`` from every response."""
    if m0 is None:
        return sample
    shift = np.asarray(m0(sample.x), dtype=float)
    if shift.shape != sample.y.shape:
        raise DomainError("m0 must map an array of design points to an array of equal shape")
    return sample.with_values(sample.y - shift)


def one_sample_families(sample, epsilon=0.1, spline=None, order=4, m0=None):
    eps = _epsilon_fraction(epsilon)
    sample = recenter(sample, m0)
    spec = _resolve_spline(sample, spline, order)
    fam = _family(curve_moments(sample, spec), sample, spec, 0, sample.n, eps)
    return [fam], [(0, None)]


def one_sample_statistic(
    sample: FunctionalSample,
    epsilon: float = 0.1,
    spline: SplineSpec | None = None,
    order: int = 4,
    m0: Callable | None = None,
) -> PrefixStatistic:
    """``T = ||m_hat||^2`` and its normalizers."""
    families, contrasts = one_sample_families(sample, epsilon, spline, order, m0)
    stat = _prefix_statistic(families, contrasts, _epsilon_fraction(epsilon))
    stat.metadata = {"n": sample.n, "knots": families[0].spec.interior_knots,
                     "order": families[0].spec.order}
    return stat


def two_sample_families(sample1, sample2, epsilon=0.1, splines=(None, None), order=4):
    eps = _epsilon_fraction(epsilon)
    fams = []
    for s, spline in zip((sample1, sample2), splines):
        spec = _resolve_spline(s, spline, order)
        fams.append(_family(curve_moments(s, spec), s, spec, 0, s.n, eps))
    return fams, [(0, 1)]


def two_sample_statistic(
    sample1: FunctionalSample,
    sample2: FunctionalSample,
    epsilon: float = 0.1,
    splines: tuple = (None, None),
    order: int = 4,
) -> PrefixStatistic:
    """``T = ||m1_hat - m2_hat||^2``; each sample keeps its own spline space."""
    families, contrasts = two_sample_families(sample1, sample2, epsilon, splines, order)
    stat = _prefix_statistic(families, contrasts, _epsilon_fraction(epsilon))
    stat.metadata = {
        "n": [sample1.n, sample2.n],
        "knots": [f.spec.interior_knots for f in families],
        "order": [f.spec.order for f in families],
    }
    return stat


def segment_families(sample, boundaries, epsilon, spline):
    """Families for the segments cut at 0-based curve counts ``boundaries``."""
    eps = _epsilon_fraction(epsilon)
    cuts = [0, *boundaries, sample.n]
    if any(c1 >= c2 for c1, c2 in zip(cuts, cuts[1:])):
        raise DomainError(f"change points {list(boundaries)} do not split 1..{sample.n}")
    moments = curve_moments(sample, spline)
    fams = [
        _family(moments, sample, spline, lo, hi, eps, InsufficientSegmentError)
        for lo, hi in zip(cuts, cuts[1:])
    ]
    contrasts = [(k + 1, k) for k in range(len(fams) - 1)]
    return fams, contrasts


def segment_statistic(sample, boundaries, epsilon, spline) -> PrefixStatistic:
    """``sum_k ||mu_{k+1} - mu_k||^2`` over segments split after ``boundaries``."""
    families, contrasts = segment_families(sample, boundaries, epsilon, spline)
    stat = _prefix_statistic(families, contrasts, _epsilon_fraction(epsilon))
    stat.metadata = {"n": sample.n, "knots": spline.interior_knots, "order": spline.order,
                     "change_points": [int(b) for b in boundaries]}
    return stat


def changepoint_statistic(
    sample: FunctionalSample,
    epsilon: float = 0.1,
    spline: SplineSpec | None = None,
    order: int = 4,
    k_hat: int | None = None,
) -> PrefixStatistic:
    """Single change after curve ``k_hat`` (estimated by L2-CUSUM if omitted)."""
    eps = _epsilon_fraction(epsilon)
    spec = _resolve_spline(sample, spline, order)
    estimate = None
    if k_hat is None:
        estimate = estimate_single(sample, spec, epsilon)
        k_hat = estimate.k_hat
    k_hat = int(k_hat)
    n = sample.n
    if not (eps * n <= k_hat <= (1 - eps) * n):
        raise DomainError(
            f"change point {k_hat} outside the trimmed range [{float(eps * n)}, {float((1 - eps) * n)}]"
        )
    stat = segment_statistic(sample, [k_hat], epsilon, spec)
    if estimate is not None:
        stat.metadata["cusum_objective"] = estimate.objective
    return stat


def theta_boundaries(n: int, thetas: Sequence[float]) -> list[int]:
    """``[n theta_k]`` for sorted fractions in (0, 1)."""
    thetas = [float(t) for t in thetas]
    if not thetas:
        raise DomainError("at least one change point fraction is required")
    if any(not 0.0 < t < 1.0 for t in thetas):
        raise DomainError(f"change point fractions must lie in (0, 1), got {thetas}")
    if any(t1 >= t2 for t1, t2 in zip(thetas, thetas[1:])):
        raise DomainError(f"change point fractions must be strictly increasing, got {thetas}")
    return [floor_count(n, t) for t in thetas]


def multi_changepoint_statistic(
    sample: FunctionalSample,
    thetas: Sequence[float],
    epsilon: float = 0.1,
    spline: SplineSpec | None = None,
    order: int = 4,
) -> PrefixStatistic:
    """``sum_k ||mu_{k+1} - mu_k||^2`` for change points at fractions ``thetas``."""
    boundaries = theta_boundaries(sample.n, thetas)
    spec = _resolve_spline(sample, spline, order)
    stat = segment_statistic(sample, boundaries, epsilon, spec)
    stat.metadata["thetas"] = [float(t) for t in thetas]
    return stat


def _table_for(spec: TestSpec, table: PivotalTable | None) -> PivotalTable:
    if table is None:
        return get_table(spec.epsilon, spec.kind)
    cfg = table.config
    if cfg.kind != spec.kind or abs(cfg.epsilon - spec.epsilon) > 1e-6:
        raise DomainError(
            f"pivotal table is for ({cfg.kind.value}, epsilon={cfg.epsilon}), "
            f"test needs ({spec.kind.value}, epsilon={spec.epsilon})"
        )
    return table


def make_report(family: str, stat: PrefixStatistic, spec: TestSpec, table: PivotalTable) -> TestReport:
    q = table.quantile(1.0 - spec.alpha)
    threshold, reject, degenerate = stat.decide(spec.delta, spec.kind, q)
    meta = dict(stat.metadata)
    cfg = table.config
    diagnostics = {
        "pieces": stat.n_pieces,
        "raw_normalizer": stat.normalizers[spec.kind],
        "normalizers": {k.value: v for k, v in stat.normalizers.items()},
        "table": {"kind": cfg.kind.value, "epsilon": cfg.epsilon, "n_paths": cfg.n_paths,
                  "n_steps": cfg.n_steps, "seed": cfg.seed},
        "backend": _backend.BACKEND,
    }
    for key in ("cusum_objective", "thetas"):
        if key in meta:
            diagnostics[key] = meta[key]
    return TestReport(
        family=family,
        statistic=stat.statistic,
        normalizer=stat.normalizer(spec.kind),
        quantile=q,
        threshold=threshold,
        reject=reject,
        degenerate_normalizer=degenerate,
        delta=spec.delta,
        alpha=spec.alpha,
        epsilon=spec.epsilon,
        kind=spec.kind.value,
        n=meta.get("n"),
        knots=meta.get("knots"),
        order=meta.get("order"),
        change_points=meta.get("change_points", []),
        diagnostics=diagnostics,
    )


def one_sample_test(
    sample: FunctionalSample,
    spec: TestSpec,
    table: PivotalTable | None = None,
    m0: Callable | None = None,
) -> TestReport:
    """Test ``H0: ||m - m0||^2 <= delta`` against ``> delta``."""
    table = _table_for(spec, table)
    stat = one_sample_statistic(sample, spec.epsilon, spec.spline, spec.order, m0)
    return make_report("one-sample", stat, spec, table)


def two_sample_test(
    sample1: FunctionalSample,
    sample2: FunctionalSample,
    spec: TestSpec,
    table: PivotalTable | None = None,
    splines: tuple | None = None,
) -> TestReport:
    """Test ``H0: ||m1 - m2||^2 <= delta`` for independent samples.

    ``splines`` overrides the spline space per sample; by default both use
    ``spec.spline`` (or their own BIC choice).
    """
    table = _table_for(spec, table)
    if splines is None:
        splines = (spec.spline, spec.spline)
    stat = two_sample_statistic(sample1, sample2, spec.epsilon, splines, spec.order)
    return make_report("two-sample", stat, spec, table)


def changepoint_test(
    sample: FunctionalSample,
    spec: TestSpec,
    table: PivotalTable | None = None,
    k_hat: int | None = None,
) -> TestReport:
    """Test ``H0: ||jump||^2 <= delta`` for a change after curve ``k_hat``."""
    table = _table_for(spec, table)
    stat = changepoint_statistic(sample, spec.epsilon, spec.spline, spec.order, k_hat)
    return make_report("changepoint", stat, spec, table)


def multi_changepoint_test(
    sample: FunctionalSample,
    thetas: Sequence[float],
    spec: TestSpec,
    table: PivotalTable | None = None,
) -> TestReport:
    """Test ``H0: sum_k ||jump_k||^2 <= delta`` at change fractions ``thetas``."""
    table = _table_for(spec, table)
    stat = multi_changepoint_statistic(sample, thetas, spec.epsilon, spec.spline, spec.order)
    return make_report("multi-changepoint", stat, spec, table)
