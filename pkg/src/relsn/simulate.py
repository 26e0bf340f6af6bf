"""Karhunen-Loeve data-generating process and rejection-probability studies.

Curves follow

    Y_ij = m_i(X_ij) + sum_{k<=4} sqrt(lambda_k) xi_ik psi_k(X_ij) + sigma eps_ij

with ``lambda_k = 2^(1-k)``, ``psi_{2k-1} = sqrt(2) sin(2 k pi x)``,
``psi_{2k} = sqrt(2) cos(2 k pi x)``, MA(1) scores
``xi_tk = 0.8 zeta_tk + 0.6 zeta_{t-1,k}``, uniform design points and
standard normal noise. The mean ``m_i`` depends on the scenario.
"""
from __future__ import annotations

import csv
import io
import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from relsn.errors import DomainError, RelsnError
from relsn.pivotal import NormalizerKind, get_table
from relsn.procedures import (
    PrefixStatistic,
    changepoint_statistic,
    multi_changepoint_statistic,
    one_sample_statistic,
    two_sample_statistic,
)
from relsn.spline_core import FunctionalSample, SplineSpec, floor_count

EIGENVALUES = np.array([1.0, 0.5, 0.25, 0.125])
MA_COEFFICIENTS = (0.8, 0.6)
DEFAULT_MASTER_SEED = 20240105

#: ``C`` with ``||C x sin(pi x)||^2 = 1``.
MEAN_CONSTANT = 2.0 * math.sqrt(3.0) * math.pi / math.sqrt(2.0 * math.pi**2 - 3.0)


class Scheme(str, Enum):
    """Discrete-uniform laws of the number of observations per curve."""

    S1 = "S1"
    S2 = "S2"
    S3 = "S3"
    S4 = "S4"

    @classmethod
    def parse(cls, value) -> "Scheme":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise DomainError(f"unknown scheme {value!r}; expected one of S1..S4") from None

    def support(self, n: int) -> tuple[int, int]:
        """Inclusive bounds of the support of ``N_i`` for ``n`` curves."""
        if self is Scheme.S1:
            lo, hi = 3, 6
        elif self is Scheme.S2:
            lo, hi = math.floor(2 * n ** 0.2 + 1e-12), math.floor(4 * n ** 0.2 + 1e-12)
        elif self is Scheme.S3:
            lo, hi = math.isqrt(n), math.floor(2 * math.sqrt(n) + 1e-12)
        else:
            lo, hi = n // 8, n // 4
        if lo < 1 or lo > hi:
            raise DomainError(f"scheme {self.value} has an empty support for n = {n}")
        return lo, hi


class ScoreLaw(str, Enum):
    """Standardized (mean 0, variance 1) laws of the MA innovations."""

    NORMAL = "normal"
    UNIFORM = "uniform"
    LAPLACE = "laplace"

    @classmethod
    def parse(cls, value) -> "ScoreLaw":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise DomainError(
                f"unknown score law {value!r}; expected normal, uniform or laplace"
            ) from None

    def draw(self, rng: np.random.Generator, size) -> np.ndarray:
        if self is ScoreLaw.NORMAL:
            return rng.standard_normal(size)
        if self is ScoreLaw.UNIFORM:
            r = math.sqrt(3.0)
            return rng.uniform(-r, r, size)
        return rng.laplace(0.0, 1.0 / math.sqrt(2.0), size)


def eigenfunctions(x: np.ndarray) -> np.ndarray:
    """``psi_1..psi_4`` at ``x``, shape ``(len(x), 4)``."""
    x = np.asarray(x, dtype=float)
    s2 = math.sqrt(2.0)
    return np.stack(
        [s2 * np.sin(2 * np.pi * x), s2 * np.cos(2 * np.pi * x),
         s2 * np.sin(4 * np.pi * x), s2 * np.cos(4 * np.pi * x)],
        axis=-1,
    )


def ma_scores(law: ScoreLaw, n: int, rng: np.random.Generator, components: int = 4) -> np.ndarray:
    """Stationary MA(1) scores, shape ``(n, components)``.

    One extra innovation ``zeta_0`` is drawn so the first score already has
    unit variance.
    """
    zeta = law.draw(rng, (n + 1, components))
    a, b = MA_COEFFICIENTS
    return a * zeta[1:] + b * zeta[:-1]


def _check_a(a: float) -> float:
    a = float(a)
    if not a >= 0:
        raise DomainError(f"effect size a must be nonnegative, got {a}")
    return a


@dataclass(frozen=True)
class OneSampleMean:
    """``m(x) = sqrt(a) C x sin(pi x)``, so that ``||m||^2 = a``."""

    a: float
    name = "one-sample"

    def __post_init__(self):
        _check_a(self.a)

    @property
    def effect(self) -> float:
        return self.a

    def mean(self, x: np.ndarray) -> np.ndarray:
        return math.sqrt(self.a) * MEAN_CONSTANT * x * np.sin(np.pi * x)


@dataclass(frozen=True)
class TwoSampleMeans:
    """``m_2(x) = C x sin(pi x)`` and ``m_1 = m_2 + sqrt(3a) x``; ``n_2 = round(ratio n)``."""

    a: float
    ratio: float = 1.2
    name = "two-sample"

    def __post_init__(self):
        _check_a(self.a)
        if not self.ratio > 0:
            raise DomainError("the sample size ratio must be positive")

    @property
    def effect(self) -> float:
        return self.a

    def second_size(self, n: int) -> int:
        return int(round(self.ratio * n))

    def mean2(self, x: np.ndarray) -> np.ndarray:
        return MEAN_CONSTANT * x * np.sin(np.pi * x)

    def mean1(self, x: np.ndarray) -> np.ndarray:
        return self.mean2(x) + math.sqrt(3.0 * self.a) * x


def _jump_shape(shape: str, a: float, x: np.ndarray) -> np.ndarray:
    if shape == "constant":
        return np.full_like(x, math.sqrt(a))
    if shape == "quadratic":
        return 4.0 * math.sqrt(5.0 * a) * (x - 0.5) ** 2
    raise DomainError(f"unknown jump shape {shape!r}; expected constant or quadratic")


@dataclass(frozen=True)
class MultiJump:
    """Mean 0 before ``fracs[0]``; at ``fracs[k]`` a jump of squared norm ``sizes[k]``.

    The change after curve ``floor(n frac)``. ``shape`` is ``constant``
    (``sqrt(a)``) or ``quadratic`` (``4 sqrt(5a) (x - 1/2)^2``).
    """

    fracs: tuple
    sizes: tuple
    shape: str = "constant"

    def __post_init__(self):
        object.__setattr__(self, "fracs", tuple(float(f) for f in self.fracs))
        object.__setattr__(self, "sizes", tuple(_check_a(s) for s in self.sizes))
        if not self.fracs or len(self.fracs) != len(self.sizes):
            raise DomainError("fracs and sizes must be nonempty and of equal length")
        if any(not 0 < f < 1 for f in self.fracs) or any(
            f1 >= f2 for f1, f2 in zip(self.fracs, self.fracs[1:])
        ):
            raise DomainError(f"jump fractions must be increasing in (0, 1), got {self.fracs}")
        _jump_shape(self.shape, 0.0, np.zeros(1))

    @property
    def name(self) -> str:
        return f"jump-{self.shape}" if len(self.fracs) == 1 else "multi-jump"

    @property
    def effect(self) -> float:
        return float(sum(self.sizes))

    def boundaries(self, n: int) -> list[int]:
        return [floor_count(n, f) for f in self.fracs]

    def curve_means(self, n: int, curve_ids: np.ndarray, x: np.ndarray) -> np.ndarray:
        out = np.zeros_like(x)
        for b, a in zip(self.boundaries(n), self.sizes):
            after = curve_ids >= b
            out[after] += _jump_shape(self.shape, a, x[after])
        return out


def JumpConstant(a: float, frac: float = 0.4) -> MultiJump:
    """Single jump ``sqrt(a)`` after curve ``floor(frac n)``."""
    return MultiJump((frac,), (a,), "constant")


def JumpQuadratic(a: float, frac: float = 0.4) -> MultiJump:
    """Single jump ``4 sqrt(5a) (x - 1/2)^2`` after curve ``floor(frac n)``."""
    return MultiJump((frac,), (a,), "quadratic")


@dataclass(frozen=True)
class DgpConfig:
    """One data-generating configuration.

    ``process_scale`` multiplies the random-function part and ``sigma`` the
    noise; setting both to 0 leaves only the mean.
    """

    n: int
    scheme: Scheme = Scheme.S2
    score_law: ScoreLaw = ScoreLaw.NORMAL
    scenario: object = field(default_factory=lambda: OneSampleMean(1.0))
    sigma: float = 1.0
    process_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme.parse(self.scheme))
        object.__setattr__(self, "score_law", ScoreLaw.parse(self.score_law))
        if int(self.n) != self.n or self.n < 2:
            raise DomainError(f"n must be an integer >= 2, got {self.n}")
        if self.sigma < 0 or self.process_scale < 0:
            raise DomainError("sigma and process_scale must be nonnegative")
        if not isinstance(self.scenario, (OneSampleMean, TwoSampleMeans, MultiJump)):
            raise DomainError(f"unsupported scenario {self.scenario!r}")
        self.scheme.support(self.n)
        if isinstance(self.scenario, TwoSampleMeans):
            self.scheme.support(self.scenario.second_size(self.n))


def _draw_sample(n, scheme, law, sigma, scale, rng, mean) -> FunctionalSample:
    lo, hi = scheme.support(n)
    counts = rng.integers(lo, hi + 1, size=n)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    ids = np.repeat(np.arange(n), counts)
    x = rng.uniform(0.0, 1.0, offsets[-1])
    scores = ma_scores(law, n, rng)
    y = mean(ids, x)
    y = y + scale * np.einsum("ik,k,ik->i", eigenfunctions(x), np.sqrt(EIGENVALUES), scores[ids])
    y = y + sigma * rng.standard_normal(x.size)
    return FunctionalSample(x, y, offsets)


def generate_sample(config: DgpConfig, rng: np.random.Generator | None = None):
    """Draw a sample (or a pair of independent samples for two-sample scenarios)."""
    if rng is None:
        rng = np.random.default_rng(config.seed)
    sc = config.scenario
    args = (config.scheme, config.score_law, config.sigma, config.process_scale, rng)
    if isinstance(sc, OneSampleMean):
        return _draw_sample(config.n, *args, lambda ids, x: sc.mean(x))
    if isinstance(sc, TwoSampleMeans):
        s1 = _draw_sample(config.n, *args, lambda ids, x: sc.mean1(x))
        s2 = _draw_sample(sc.second_size(config.n), *args, lambda ids, x: sc.mean2(x))
        return s1, s2
    return _draw_sample(config.n, *args, lambda ids, x: sc.curve_means(config.n, ids, x))


def replication_rng(master_seed: int, cell: int, rep: int) -> np.random.Generator:
    """Generator of replication ``rep`` in cell ``cell``, independent of run order."""
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(cell, rep)))


def _statistic(config: DgpConfig, data, epsilon: float, spline, order: int) -> tuple[PrefixStatistic, float | None]:
    sc = config.scenario
    if isinstance(sc, OneSampleMean):
        return one_sample_statistic(data, epsilon, spline, order), None
    if isinstance(sc, TwoSampleMeans):
        return two_sample_statistic(data[0], data[1], epsilon, (spline, spline), order), None
    if len(sc.fracs) == 1:
        stat = changepoint_statistic(data, epsilon, spline, order)
        return stat, stat.metadata["change_points"][0] / config.n
    return multi_changepoint_statistic(data, sc.fracs, epsilon, spline, order), None


def _replicate(args):
    cell, rep, config, master_seed, epsilons, knots, order = args
    rng = replication_rng(master_seed, cell, rep)
    spline = None if knots is None else SplineSpec(order, knots)
    try:
        data = generate_sample(config, rng)
        out = {}
        khat = None
        for eps in epsilons:
            stat, k = _statistic(config, data, eps, spline, order)
            out[eps] = stat
            khat = k if khat is None else khat
        return out, khat, None
    except (RelsnError, np.linalg.LinAlgError) as exc:
        return None, None, f"{type(exc).__name__}: {exc}"


@dataclass
class StudyResult:
    """Rejection frequencies per grid cell.

    ``rows`` holds one dict per (cell, delta, alpha, epsilon, kind) with the
    CSV columns; ``decisions`` maps the same keys to the per-replication
    boolean arrays (``False`` for failed replications), and
    ``khat_fractions[cell]`` the estimated change fractions.
    """

    rows: list
    decisions: dict
    khat_fractions: dict
    errors: dict

    COLUMNS = ("scheme", "law", "scenario", "a", "delta", "alpha", "epsilon", "kind",
               "n", "replications", "reject_freq", "failures")

    def frequency(self, cell: int = 0, delta=None, alpha=None, epsilon=None, kind=None) -> float:
        rows = [r for r in self.rows if r["cell"] == cell
                and (delta is None or r["delta"] == delta)
                and (alpha is None or r["alpha"] == alpha)
                and (epsilon is None or r["epsilon"] == epsilon)
                and (kind is None or r["kind"] == NormalizerKind.parse(kind).value)]
        if len(rows) != 1:
            raise KeyError(f"{len(rows)} rows match the selection")
        return rows[0]["reject_freq"]

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for r in self.rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in self.COLUMNS])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def rejection_study(
    configs: Sequence[DgpConfig],
    delta: float | Sequence[float] = 1.0,
    alphas: Iterable[float] = (0.05,),
    replications: int = 500,
    kinds: Iterable = (NormalizerKind.INTEGRAL,),
    epsilon: float | Sequence[float] = 0.1,
    master_seed: int = DEFAULT_MASTER_SEED,
    workers: int = 1,
    knots: int | None = None,
    order: int = 4,
    tables: dict | None = None,
) -> StudyResult:
    """Empirical rejection frequencies over a grid of configurations.

    Replication ``r`` of cell ``c`` draws its data from
    :func:`replication_rng` ``(master_seed, c, r)``; every (delta, alpha,
    epsilon, kind) combination is decided on the same draws. ``knots=None``
    selects the knot count by BIC in every replication. ``tables`` may map
    ``(kind, epsilon)`` to a :class:`PivotalTable`; missing ones are loaded
    from the default cache.
    """
    if replications < 1:
        raise DomainError("replications must be at least 1")
    deltas = [float(d) for d in np.atleast_1d(delta)]
    epsilons = [float(e) for e in np.atleast_1d(epsilon)]
    alphas = [float(a) for a in alphas]
    kinds = [NormalizerKind.parse(k) for k in kinds]
    tables = dict(tables or {})
    quantiles = {}
    for kind in kinds:
        for eps in epsilons:
            table = tables.get((kind, eps))
            if table is None:
                table = get_table(eps, kind)
            for alpha in alphas:
                quantiles[kind, eps, alpha] = table.quantile(1.0 - alpha)
    configs = list(configs)
    jobs = [
        (c, r, replace(cfg, seed=0), master_seed, epsilons, knots, order)
        for c, cfg in enumerate(configs) for r in range(replications)
    ]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_replicate, jobs, chunksize=max(1, len(jobs) // (8 * workers))))
    else:
        results = [_replicate(j) for j in jobs]

    rows, decisions, khats, errors = [], {}, {}, {}
    for c, cfg in enumerate(configs):
        cell = results[c * replications:(c + 1) * replications]
        failures = sum(1 for stats, _, err in cell if err is not None)
        errors[c] = [err for _, _, err in cell if err is not None]
        kh = [k for _, k, _ in cell if k is not None]
        if kh:
            khats[c] = np.array(kh)
        for d, alpha, eps, kind in itertools.product(deltas, alphas, epsilons, kinds):
            q = quantiles[kind, eps, alpha]
            dec = np.array([
                stats is not None and stats[eps].decide(d, kind, q)[1]
                for stats, _, _ in cell
            ])
            decisions[c, d, alpha, eps, kind.value] = dec
            done = replications - failures
            rows.append({
                "cell": c,
                "scheme": cfg.scheme.value,
                "law": cfg.score_law.value,
                "scenario": cfg.scenario.name,
                "a": float(cfg.scenario.effect),
                "delta": d,
                "alpha": alpha,
                "epsilon": eps,
                "kind": kind.value,
                "n": cfg.n,
                "replications": done,
                "reject_freq": float(dec.sum() / done) if done else float("nan"),
                "failures": failures,
            })
    return StudyResult(rows, decisions, khats, errors)


def scenario_from_dict(spec: dict):
    """Scenario from ``{"type": ..., "a": ...}`` (see :func:`study_from_dict`)."""
    spec = dict(spec)
    kind = spec.pop("type", "one-sample")
    try:
        if kind == "one-sample":
            return OneSampleMean(**spec)
        if kind == "two-sample":
            return TwoSampleMeans(**spec)
        if kind == "jump-constant":
            return JumpConstant(**spec)
        if kind == "jump-quadratic":
            return JumpQuadratic(**spec)
        if kind == "multi-jump":
            return MultiJump(**spec)
    except TypeError as exc:
        raise DomainError(f"bad parameters for scenario {kind!r}: {exc}") from None
    raise DomainError(f"unknown scenario type {kind!r}")


def _as_list(v):
    return list(v) if isinstance(v, (list, tuple)) else [v]


def study_from_dict(spec: dict) -> dict:
    """Keyword arguments of :func:`rejection_study` from a JSON-style document.

    ``cells`` is a list of objects with ``n``, ``scheme``, ``law``,
    ``scenario`` (an object with ``type`` in ``one-sample``, ``two-sample``,
    ``jump-constant``, ``jump-quadratic``, ``multi-jump`` plus its
    parameters) and optional ``sigma``; ``n``, ``scheme``, ``law`` and the
    scenario's ``a`` may be lists, expanded as a Cartesian product. The
    remaining keys (``delta``, ``alphas``, ``replications``, ``kinds``,
    ``epsilon``, ``master_seed``, ``workers``, ``knots``, ``order``) are passed through.
    """
    spec = dict(spec)
    cells = spec.pop("cells", None)
    if not cells:
        raise DomainError("a study needs a nonempty 'cells' list")
    configs = []
    for cell in cells:
        cell = dict(cell)
        scen = dict(cell.get("scenario", {"type": "one-sample", "a": 1.0}))
        a_values = _as_list(scen.pop("a", 1.0)) if scen.get("type") != "multi-jump" else [None]
        for n, scheme, law, a in itertools.product(
            _as_list(cell.get("n", 400)), _as_list(cell.get("scheme", "S2")),
            _as_list(cell.get("law", "normal")), a_values,
        ):
            s = dict(scen) if a is None else {**scen, "a": a}
            configs.append(DgpConfig(
                int(n), scheme, law, scenario_from_dict(s), sigma=float(cell.get("sigma", 1.0)),
            ))
    allowed = {"delta", "alphas", "replications", "kinds", "epsilon", "master_seed",
               "workers", "knots", "order"}
    unknown = set(spec) - allowed
    if unknown:
        raise DomainError(f"unknown study keys: {sorted(unknown)}")
    return {"configs": configs, **spec}
