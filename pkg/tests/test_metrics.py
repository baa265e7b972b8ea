import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from scipy import stats

from echoscape.metrics import (DegenerateMetricWarning, MetricReport, betainc_regularized,
                               correlogram, cross_corr_coeff, nrmsd, rms, student_t_cdf,
                               summarize, welch_t_test)

grids = hnp.arrays(np.float64, (12, 9), elements=st.floats(0, 10))


def _img(seed=0, shape=(128, 64)):
    return np.random.default_rng(seed).random(shape)


def test_cc_identity_and_negation():
    a = _img()
    assert cross_corr_coeff(a, a) == pytest.approx(1.0)
    assert cross_corr_coeff(a, 3.0 - a) == pytest.approx(-1.0)


def test_cc_independent_noise_small():
    ccs = [abs(cross_corr_coeff(_img(s), _img(1000 + s))) for s in range(100)]
    assert max(ccs) < 0.1


def test_cc_constant_image_warns():
    with pytest.warns(DegenerateMetricWarning):
        assert cross_corr_coeff(np.ones((4, 4)), _img(shape=(4, 4))) == 0.0


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        cross_corr_coeff(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        nrmsd(np.zeros((2, 2)), np.zeros((3, 2)))


@given(a=grids, b=grids, s=st.floats(0.1, 10), c=st.floats(-5, 5))
def test_cc_symmetric_bounded_affine_invariant(a, b, s, c):
    if np.ptp(a) < 1e-6 or np.ptp(b) < 1e-6:
        return
    cab = cross_corr_coeff(a, b)
    assert -1.0 <= cab <= 1.0
    assert cab == pytest.approx(cross_corr_coeff(b, a), abs=1e-12)
    assert cab == pytest.approx(cross_corr_coeff(s * a + c, b), abs=1e-9)


def test_correlogram_identity_and_shift():
    a = np.zeros((40, 30))
    a[15:18, 10:14] = 1.0
    a[25, 20] = 2.0
    _, off = correlogram(a, a)
    assert off == (0, 0)
    b = np.roll(a, 3, axis=1)
    _, off = correlogram(a, b)
    assert off == (0, 3)


@given(dr=st.integers(-4, 4), da=st.integers(-4, 4))
def test_correlogram_equivariance(dr, da):
    a = np.zeros((30, 24))
    a[12:15, 9:12] = 1.0
    a[14, 13] = 3.0
    b = np.roll(np.roll(a, dr, axis=0), da, axis=1)
    assert correlogram(a, b)[1] == (dr, da)


def test_nrmsd_examples():
    b = _img(3)
    assert nrmsd(b, b) == 0.0
    assert nrmsd(2 * b, b) == pytest.approx(1.0)
    assert nrmsd(np.zeros_like(b), b) == pytest.approx(1.0)
    with pytest.warns(DegenerateMetricWarning):
        assert math.isnan(nrmsd(b, np.zeros_like(b)))


@given(a=grids, b=grids)
def test_nrmsd_triangle_bound(a, b):
    if rms(b) == 0:
        return
    assert nrmsd(a, b) <= (rms(a) + rms(b)) / rms(b) + 1e-12


def test_metric_report():
    a = _img(4, (20, 20))
    rep = MetricReport.compare(a, a)
    assert rep.cc == pytest.approx(1.0) and rep.nrmsd == 0.0
    assert rep.correlogram_peak_offset == (0, 0)


def test_welch_identical_samples():
    x = [1.0, 2.0, 3.0, 4.0]
    assert welch_t_test(x, x) == (0.0, 1.0)


def test_welch_detects_shift():
    rng = np.random.default_rng(0)
    t, p = welch_t_test(rng.standard_normal(1000), rng.standard_normal(1000) + 1)
    assert p < 0.001 and t < 0


def test_welch_matches_scipy():
    rng = np.random.default_rng(1)
    for n1, n2, s in [(5, 9, 0.4), (30, 12, 1.5), (200, 200, 0.05)]:
        x = rng.standard_normal(n1)
        y = rng.standard_normal(n2) * 2 + s
        ref = stats.ttest_ind(x, y, equal_var=False)
        t, p = welch_t_test(x, y)
        assert t == pytest.approx(ref.statistic, rel=1e-10)
        assert p == pytest.approx(ref.pvalue, rel=1e-8)


def test_welch_needs_two_values():
    with pytest.raises(ValueError):
        welch_t_test([1.0], [1.0, 2.0])


def test_t_cdf_symmetry_and_reference():
    for df in (1, 2.5, 7, 30, 500):
        assert student_t_cdf(0.0, df) == pytest.approx(0.5, abs=1e-15)
        for t in (-3.0, -0.7, 1.2, 4.0):
            assert student_t_cdf(t, df) == pytest.approx(stats.t.cdf(t, df), rel=1e-10, abs=1e-14)


@given(a=st.floats(0.1, 50), b=st.floats(0.1, 50), x=st.floats(0, 1))
def test_betainc_matches_scipy(a, b, x):
    from scipy.special import betainc
    assert betainc_regularized(a, b, x) == pytest.approx(betainc(a, b, x), rel=1e-9, abs=1e-13)


def test_welch_null_pvalues_uniform():
    rng = np.random.default_rng(2)
    ps = [welch_t_test(rng.standard_normal(20), rng.standard_normal(25))[1] for _ in range(1000)]
    assert stats.kstest(ps, "uniform").statistic < 0.05


def test_summarize_examples():
    assert summarize([1, 1, 1]) == (1.0, 0.0)
    m, s = summarize([0, 2])
    assert m == 1.0 and s == pytest.approx(math.sqrt(2))
    m, _ = summarize(np.random.default_rng(3).random(1000))
    assert abs(m - 0.5) < 0.03
    assert summarize([4.0]) == (4.0, 0.0)
    with pytest.raises(ValueError):
        summarize([])


def test_no_warnings_for_ordinary_inputs():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        cross_corr_coeff(_img(5), _img(6))
        nrmsd(_img(5), _img(6))
