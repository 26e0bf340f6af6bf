import json
import math

import numpy as np
import pytest
from scipy.interpolate import BSpline

from relsn.errors import DomainError, InsufficientPrefixError, InsufficientSegmentError
from relsn.pivotal import NormalizerKind, get_table
from relsn.procedures import (
    TestReport,
    TestSpec,
    changepoint_statistic,
    changepoint_test,
    multi_changepoint_statistic,
    multi_changepoint_test,
    one_sample_statistic,
    one_sample_test,
    two_sample_statistic,
    two_sample_test,
)
from relsn.simulate import DgpConfig, JumpConstant, OneSampleMean, TwoSampleMeans, generate_sample
from relsn.spline_core import SplineSpec
from tests._helpers import make_sample, step_sample

KINDS = list(NormalizerKind)
CUBIC2 = SplineSpec(4, 2)


@pytest.fixture(scope="module")
def tables():
    return {k: get_table(0.1, k) for k in KINDS}


def spec(delta, kind="integral", **kw):
    return TestSpec(delta, kind=kind, spline=kw.pop("spline", CUBIC2), **kw)


# oracle: refit every prefix with a dense solver and integrate in t on a fine grid


def dense_fit(sample, spline, lo, hi):
    a, b = sample.offsets[lo], sample.offsets[hi]
    x, y, w = sample.x[a:b], sample.y[a:b], sample.obs_weights[a:b]
    B = BSpline.design_matrix(x, spline.knot_vector, spline.degree).toarray()
    sw = np.sqrt(w)
    coef, *_ = np.linalg.lstsq(B * sw[:, None], y * sw, rcond=None)
    return BSpline(spline.knot_vector, coef, spline.degree)


_GX, _GW = np.polynomial.legendre.leggauss(12)
_NODES = np.concatenate([0.5 * _GX / 60 + (k + 0.5) / 60 for k in range(60)])
_WEIGHTS = np.tile(_GW / 120, 60)


def sq_norm(f):
    v = f(_NODES)
    return float(_WEIGHTS @ (v * v))


def oracle_normalizers(groups, contrasts, eps, cells=10**6):
    """``groups``: list of (sample, spline, lo, hi) with hi - lo dividing ``cells``."""
    fits = {}

    def fit(g, m):
        if (g, m) not in fits:
            s, spline, lo, hi = groups[g]
            fits[g, m] = dense_fit(s, spline, lo, lo + m)
        return fits[g, m]

    def integrand(t):
        total = 0.0
        for g, h in contrasts:
            mg = math.floor((groups[g][3] - groups[g][2]) * t + 1e-12)
            fg = fit(g, mg)
            if h is None:
                total += sq_norm(fg)
            else:
                mh = math.floor((groups[h][3] - groups[h][2]) * t + 1e-12)
                fh = fit(h, mh)
                total += sq_norm(lambda x: fg(x) - fh(x))
        return total

    T = integrand(1.0)
    k0 = round(eps * cells)
    mids = (np.arange(k0, cells) + 0.5) / cells
    # D is constant between jump points, which fall on cell edges; evaluate it
    # once per distinct prefix combination.
    key = np.zeros(mids.size, dtype=np.int64)
    for grp in groups:
        key = key * (grp[3] - grp[2] + 1) + np.floor((grp[3] - grp[2]) * mids).astype(np.int64)
    _, first, inv = np.unique(key, return_index=True, return_inverse=True)
    Dvals = np.array([integrand(mids[i]) - T for i in first])
    D = Dvals[inv]
    integral = math.sqrt(float(np.sum(mids**4 * D * D)) / cells)
    right = (np.arange(k0, cells) + 1.0) / cells
    f = right**2 * D
    sup = float(np.max(np.abs(f)))
    rng = max(f.max(), 0.0) - min(f.min(), 0.0)
    return T, integral, sup, rng


def check_against_oracle(stat, oracle):
    T, integral, sup, rng = oracle
    assert abs(stat.statistic - T) < 1e-10
    assert abs(stat.normalizers[NormalizerKind.INTEGRAL] - integral) < 1e-8
    # the oracle takes the suprema at grid points a cell width below the jumps
    assert abs(stat.normalizers[NormalizerKind.SUP] - sup) < 1e-5 * max(sup, 1e-3)
    assert abs(stat.normalizers[NormalizerKind.RANGE] - rng) < 1e-5 * max(rng, 1e-3)


def test_exact_t_integration_matches_oracle_on_50_datasets():
    for k in range(50):
        n = (100, 200, 400)[k % 3]
        cfg = DgpConfig(n, "S1", "normal", OneSampleMean(0.5 + 0.05 * k), seed=1000 + k)
        s = generate_sample(cfg)
        spline = SplineSpec(4, k % 3)
        stat = one_sample_statistic(s, 0.1, spline)
        check_against_oracle(stat, oracle_normalizers([(s, spline, 0, n)], [(0, None)], 0.1))


def test_two_sample_t_integration_uses_per_sample_floors():
    s1, s2 = generate_sample(DgpConfig(100, "S1", "normal", TwoSampleMeans(1.0, ratio=1.25), seed=3))
    assert (s1.n, s2.n) == (100, 125)
    sp1, sp2 = SplineSpec(4, 1), SplineSpec(4, 2)
    stat = two_sample_statistic(s1, s2, 0.1, (sp1, sp2))
    oracle = oracle_normalizers([(s1, sp1, 0, 100), (s2, sp2, 0, 125)], [(0, 1)], 0.1)
    check_against_oracle(stat, oracle)
    # pieces: union of {i/100} and {i/125} on [0.1, 1)
    edges = {i / 100 for i in range(10, 100)} | {i / 125 for i in range(13, 125)}
    assert stat.n_pieces == len({round(e, 12) for e in edges})


def test_changepoint_t_integration_matches_oracle():
    s = generate_sample(DgpConfig(200, "S1", "normal", JumpConstant(1.0, 0.2), seed=8))
    spline = SplineSpec(4, 1)
    stat = changepoint_statistic(s, 0.1, spline, k_hat=40)
    oracle = oracle_normalizers([(s, spline, 0, 40), (s, spline, 40, 200)], [(1, 0)], 0.1)
    check_against_oracle(stat, oracle)


# one sample


def test_zero_data_is_degenerate_and_not_rejected(tables):
    s = make_sample(50, lambda i, x: np.zeros_like(x))
    for kind in KINDS:
        r = one_sample_test(s, spec(1e-6, kind), tables[kind])
        assert r.statistic == 0.0 and r.normalizer == 0.0
        assert r.degenerate_normalizer and not r.reject


@pytest.mark.parametrize("delta,expected", [(1.0, True), (3.9, True), (4.0, False), (5.0, False)])
def test_constant_data_rejects_iff_square_exceeds_delta(tables, delta, expected):
    s = make_sample(50, lambda i, x: np.full_like(x, 2.0), seed=1)
    r = one_sample_test(s, spec(delta), tables[NormalizerKind.INTEGRAL])
    assert r.statistic == pytest.approx(4.0, abs=1e-12)
    assert r.normalizer == 0.0 and r.degenerate_normalizer
    assert r.reject is expected
    assert r.threshold == delta


def test_recentering_by_m0():
    g = lambda x: 1 + np.sin(2 * np.pi * x) * 0.5
    s = make_sample(60, lambda i, x: g(x) + 0.1 * np.cos(i), seed=2)
    centered = one_sample_statistic(s, 0.1, SplineSpec(4, 6), m0=g)
    direct = one_sample_statistic(s.with_values(s.y - g(s.x)), 0.1, SplineSpec(4, 6))
    assert centered.statistic == direct.statistic
    assert centered.statistic < 0.05


def test_insufficient_prefix():
    s = make_sample(9, lambda i, x: x, counts=3)
    with pytest.raises(InsufficientPrefixError):
        one_sample_statistic(s, 0.1, CUBIC2)
    s = make_sample(20, lambda i, x: x, counts=2)
    with pytest.raises(InsufficientPrefixError):
        one_sample_statistic(s, 0.1, SplineSpec(4, 3))


def test_scale_equivariance():
    s = generate_sample(DgpConfig(100, "S2", "normal", OneSampleMean(1.0), seed=12))
    a = one_sample_statistic(s, 0.1, CUBIC2)
    b = one_sample_statistic(s.with_values(3.0 * s.y), 0.1, CUBIC2)
    assert b.statistic == pytest.approx(9 * a.statistic, rel=1e-9)
    for kind in KINDS:
        assert b.normalizers[kind] == pytest.approx(9 * a.normalizers[kind], rel=1e-9)


def test_decision_identity_and_nonnegativity(tables):
    for seed in range(12):
        s = generate_sample(DgpConfig(100, "S2", "normal", OneSampleMean(1.0), seed=seed))
        for kind in KINDS:
            r = one_sample_test(s, spec(0.8 + 0.05 * seed, kind), tables[kind])
            assert r.normalizer >= 0 and not r.degenerate_normalizer
            assert r.threshold == r.delta + r.quantile * r.normalizer
            assert r.reject == (r.statistic > r.threshold)


def test_bic_knots_are_reported(tables):
    s = generate_sample(DgpConfig(200, "S2", "normal", OneSampleMean(1.0), seed=1))
    r = one_sample_test(s, TestSpec(1.0), tables[NormalizerKind.INTEGRAL])
    assert isinstance(r.knots, int) and r.order == 4 and r.n == 200


def test_report_serializes(tables):
    s = make_sample(50, lambda i, x: np.full_like(x, 2.0))
    r = one_sample_test(s, spec(1.0), tables[NormalizerKind.INTEGRAL])
    doc = json.loads(r.to_json())
    assert doc["reject"] is True and doc["family"] == "one-sample"
    assert doc["diagnostics"]["table"]["epsilon"] == 0.1
    assert set(TestReport.__dataclass_fields__) <= set(doc)


def test_table_must_match_spec(tables):
    s = make_sample(50, lambda i, x: x)
    with pytest.raises(DomainError):
        one_sample_test(s, spec(1.0, "sup"), tables[NormalizerKind.INTEGRAL])
    with pytest.raises(DomainError):
        one_sample_test(s, spec(1.0, epsilon=0.2), tables[NormalizerKind.INTEGRAL])


def test_test_spec_validation():
    for kwargs in ({"delta": 0.0}, {"delta": 1.0, "alpha": 1.0}, {"delta": 1.0, "epsilon": 0.0}):
        with pytest.raises(DomainError):
            TestSpec(**kwargs)
    assert TestSpec(1.0, kind="range").kind is NormalizerKind.RANGE


# two samples


def test_two_sample_copy_is_not_rejected(tables):
    s = generate_sample(DgpConfig(80, "S2", "normal", OneSampleMean(1.0), seed=4))
    r = two_sample_test(s, s.with_values(s.y.copy()), spec(0.5), tables[NormalizerKind.INTEGRAL])
    assert r.statistic == 0.0 and r.normalizer == 0.0
    assert r.degenerate_normalizer and not r.reject


@pytest.mark.parametrize("delta,expected", [(1.0, True), (2.25, False)])
def test_two_sample_constants(tables, delta, expected):
    s1 = make_sample(60, lambda i, x: np.full_like(x, 3.0), seed=1)
    s2 = make_sample(72, lambda i, x: np.full_like(x, 1.5), seed=2)
    r = two_sample_test(s1, s2, spec(delta), tables[NormalizerKind.INTEGRAL],
                        splines=(SplineSpec(4, 1), SplineSpec(4, 3)))
    assert r.statistic == pytest.approx(2.25, abs=1e-12)
    assert r.degenerate_normalizer and r.reject is expected
    assert r.knots == [1, 3]


# change points


def test_changepoint_constant_data(tables):
    s = make_sample(100, lambda i, x: np.full_like(x, 1.0))
    r = changepoint_test(s, spec(0.5), tables[NormalizerKind.INTEGRAL], k_hat=50)
    assert abs(r.statistic) < 1e-20 and r.degenerate_normalizer and not r.reject
    assert r.change_points == [50]


@pytest.mark.parametrize("h,delta", [(3.0, 8.0), (3.0, 9.5), (1.0, 0.5)])
def test_changepoint_step(tables, h, delta):
    s = step_sample(100, [40], [0.0, h], seed=3)
    r = changepoint_test(s, spec(delta), tables[NormalizerKind.INTEGRAL], k_hat=40)
    assert r.statistic == pytest.approx(h * h, abs=1e-10)
    assert r.degenerate_normalizer
    assert r.reject is (h * h > delta)


def test_changepoint_estimates_location_when_omitted(tables):
    s = step_sample(100, [40], [0.0, 3.0], seed=3)
    r = changepoint_test(s, spec(1.0), tables[NormalizerKind.INTEGRAL])
    assert r.change_points == [40]
    assert "cusum_objective" in r.diagnostics


def test_changepoint_outside_trimmed_range():
    s = step_sample(100, [40], [0.0, 3.0])
    for k in (9, 91, 0):
        with pytest.raises(DomainError):
            changepoint_statistic(s, 0.1, CUBIC2, k_hat=k)
    changepoint_statistic(s, 0.1, SplineSpec(4, 0), k_hat=10)


def test_multi_with_one_change_is_bit_identical_to_single():
    for seed in range(5):
        s = generate_sample(DgpConfig(200, "S2", "normal", JumpConstant(1.0), seed=seed))
        single = changepoint_statistic(s, 0.1, CUBIC2)
        k = single.metadata["change_points"][0]
        multi = multi_changepoint_statistic(s, [k / 200], 0.1, CUBIC2)
        assert multi.statistic == single.statistic
        assert multi.normalizers == single.normalizers


def test_staircase_statistic(tables):
    h = 1.5
    s = step_sample(150, [50, 100], [0.0, h, 2 * h], seed=5)
    r = multi_changepoint_test(s, [1 / 3, 2 / 3], spec(1.0), tables[NormalizerKind.INTEGRAL])
    assert r.change_points == [50, 100]
    assert r.statistic == pytest.approx(2 * h * h, abs=1e-10)
    assert r.degenerate_normalizer and r.reject


def test_multi_theta_validation():
    s = step_sample(100, [40], [0.0, 1.0])
    for thetas in ([0.6, 0.4], [0.0, 0.5], [0.5, 1.0], [], [0.3, 0.3]):
        with pytest.raises(DomainError):
            multi_changepoint_statistic(s, thetas, 0.1, CUBIC2)
    with pytest.raises(InsufficientSegmentError):
        multi_changepoint_statistic(s, [0.4, 0.45], 0.1, CUBIC2)
