import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from hetqrng import calibration as cal
from hetqrng import dsp, entropy
from hetqrng.entropy import EntropyError, EntropyReport
from hetqrng.source import SourceParams


def brute_force_pmax(mean, sigma, pitch, span=12):
    """Largest bin mass of N(mean, sigma) over a grid centered on multiples of pitch."""
    k = np.arange(math.floor((mean - span * sigma) / pitch), math.ceil((mean + span * sigma) / pitch) + 1)
    mass = (stats.norm.cdf((k + 0.5) * pitch, mean, sigma)
            - stats.norm.cdf((k - 0.5) * pitch, mean, sigma))
    return mass.max()


def test_h_min_conditional_reference_point():
    assert entropy.h_min_conditional(math.sqrt(2.85e-3), math.sqrt(2.85e-3)) == pytest.approx(
        10.106, abs=0.005)
    d = math.sqrt(math.pi * 2 ** -10.106)
    assert entropy.h_min_conditional(d, d) == pytest.approx(10.106, abs=1e-12)


def test_h_min_conditional_clamped():
    assert entropy.h_min_conditional(2.0, 2.0) == 0.0
    with pytest.raises(EntropyError):
        entropy.h_min_conditional(0.0, 1.0)


@given(st.floats(1e-4, 2.0), st.floats(1e-4, 2.0), st.floats(1.01, 4.0))
def test_h_min_conditional_monotone(dq, dp, k):
    assert entropy.h_min_conditional(dq * k, dp) <= entropy.h_min_conditional(dq, dp)


def test_secure_rate():
    assert entropy.secure_rate(10.106, 2e9) == pytest.approx(20.212e9, rel=1e-9)
    assert entropy.secure_rate(0.0, 2e9) == 0.0
    assert entropy.secure_rate(2.0001, 2e9) > 4e9
    with pytest.raises(EntropyError):
        entropy.secure_rate(-1.0, 1.0)


def test_min_entropy():
    assert entropy.min_entropy(np.ones(256)) == pytest.approx(8.0)
    assert entropy.min_entropy([1, 0, 0]) == 0.0
    with pytest.raises(EntropyError):
        entropy.min_entropy([0, 0])


@given(st.floats(-3, 3), st.floats(0.05, 20), st.floats(0.1, 2))
def test_gaussian_bin_mass_matches_brute_force(mean, sigma, pitch):
    assert entropy.gaussian_max_bin_mass(mean, sigma, pitch) == pytest.approx(
        brute_force_pmax(mean, sigma, pitch), rel=1e-9, abs=1e-15)


def test_small_pitch_limit():
    # discretized bivariate Gaussian: -log2(dq dp / (2 pi sq sp)) for small pitches
    sq, sp, dq, dp = 0.75, 0.8, 0.01, 0.02
    pmax = brute_force_pmax(0.0, sq, dq) * brute_force_pmax(0.0, sp, dp)
    assert -math.log2(pmax) == pytest.approx(-math.log2(dq * dp / (2 * math.pi * sq * sp)), abs=1e-3)


def test_histogram_estimate_exact_counts():
    q = np.array([0.0, 0.0, 0.0, 1.0])
    p = np.array([0.0, 0.0, 0.0, 1.0])
    est = entropy.estimate_classical((q, p), 1.0, 1.0, method="histogram", min_pairs=2)
    assert est.h_min == pytest.approx(-math.log2(0.75))
    assert est.modal_count == 3 and est.method == "histogram"


def test_gaussian_estimate_matches_oracle():
    rng = np.random.default_rng(2)
    q = rng.normal(0, 0.75, 1_000_000)
    p = rng.normal(0, 0.75, 1_000_000)
    est = entropy.estimate_classical((q, p), 0.054, 0.054, method="gaussian")
    expected = -math.log2(brute_force_pmax(0, 0.75, 0.054) ** 2)
    assert est.h_min == pytest.approx(expected, abs=0.005)


def test_peak_fit_has_small_bias():
    # sigma ~ 14 bins per channel; the raw histogram maximum is biased low
    rng = np.random.default_rng(3)
    sigma, d = 0.75, 0.054
    truth = -math.log2(brute_force_pmax(0, sigma, d) ** 2)
    blocks = ((rng.normal(0, sigma, 1_000_000), rng.normal(0, sigma, 1_000_000)) for _ in range(4))
    est = entropy.estimate_classical(blocks, d, d)
    assert est.method == "peak-fit"
    assert est.h_min == pytest.approx(truth, abs=0.02)


def test_auto_falls_back_to_gaussian_when_sparse():
    rng = np.random.default_rng(4)
    q = rng.normal(0, 30, 1000)
    p = rng.normal(0, 30, 1000)
    est = entropy.estimate_classical((q, p), 1.0, 1.0, min_pairs=1000)
    assert est.method == "gaussian"


def test_estimate_requires_enough_pairs():
    with pytest.raises(EntropyError, match="insufficient"):
        entropy.estimate_classical((np.zeros(10), np.zeros(10)), 1.0, 1.0)
    with pytest.raises(ValueError):
        entropy.estimate_classical((np.zeros(10), np.zeros(10)), 1.0, 1.0, method="x", min_pairs=2)


def test_classical_bounded_by_alphabet():
    rng = np.random.default_rng(5)
    q = rng.uniform(-200, 200, 2_000_000)
    p = rng.uniform(-200, 200, 2_000_000)
    assert entropy.h_min_classical((q, p), 1.0, 1.0, method="histogram") <= 16.0


def unit_calibration(eff=0.01):
    return cal.CalibrationResult(1.0, 1.0, 1e-4, 1e-4, 0.0, 0.0, 1e-6, 1e-6, 1.0, 1.0, eff, 0.5)


def test_quadrature_moments_vacuum():
    # slope 1, P = 0.5: vacuum variance 0.5 in VU is 0.5 V^2 conditioned
    rng = np.random.default_rng(6)
    x = rng.normal(0, math.sqrt(0.5), (2, 1_000_000))
    m = entropy.quadrature_moments((x[0], x[1]), unit_calibration())
    assert m.variance_q == pytest.approx(0.5, abs=3 * m.variance_se_q)
    vq, vp, mq, mp = m
    assert abs(mq) < 0.01
    with pytest.raises(EntropyError, match="uncalibrated"):
        entropy.quadrature_moments((x[0], x[1]))


def test_purity():
    assert entropy.purity(0.5, 0.5) == 1.0
    v = 0.5 + 0.5 / 10**0.9
    assert v == pytest.approx(0.563, abs=5e-4)
    assert entropy.purity(v, v) == pytest.approx(1 / (1 + 10**-0.9))
    assert entropy.purity(0.4999, 0.5, 0.001, 0.001) == 1.0
    with pytest.raises(EntropyError):
        entropy.purity(0.4, 0.5, 0.001, 0.001)


@given(st.floats(0.5, 10), st.floats(0.5, 10))
def test_purity_range(a, b):
    assert 0 < entropy.purity(a, b) <= 1


def report(**kw):
    base = dict(h_min_conditional=9.0, h_min_classical=9.5, entropy_loss=0.5, variance_q_vu=0.6,
                variance_p_vu=0.6, purity=0.8, secure_rate=18e9, raw_rate=2e9, lo_power=0.01)
    base.update(kw)
    return EntropyReport(**base)


def test_report_invariants():
    report()
    with pytest.raises(EntropyError):
        report(h_min_conditional=10.0)
    with pytest.raises(EntropyError):
        report(purity=1.2)
    with pytest.raises(EntropyError):
        report(secure_rate=1e9)
    with pytest.raises(EntropyError):
        report(h_min_classical=17.0, h_min_conditional=9.0)
    r = report()
    assert EntropyReport.from_dict(r.to_dict()) == r


@pytest.fixture(scope="module")
def sweep():
    params = SourceParams(seed=31)
    src = cal.EquivalentSource(params, dsp.DspConfig())
    pts = cal.run_sweep(src, [0.0, 5e-3, 10e-3, 15e-3, 20e-3], 1_000_000)
    calib = cal.fit(pts, src.effective_resolution)
    powers = [0.475e-3, 2e-3, 5e-3, 10e-3, 15e-3, 20e-3]
    return [entropy.entropy_report(src.measure(p, 1_000_000, 50 + i), calib, p, 2e9)
            for i, p in enumerate(powers)]


def test_sweep_trends(sweep):
    h = [r.h_min_conditional for r in sweep]
    loss = [r.entropy_loss for r in sweep]
    mu = [r.purity for r in sweep]
    assert all(np.diff(h) > 0)
    assert all(np.diff(loss) <= 0)
    assert all(np.diff(mu) > 0)
    assert loss[-1] < 0.25
    assert sweep[0].secure_rate > 4e9
    assert 20.0e9 <= sweep[-1].secure_rate <= 20.2e9


def test_report_fields_consistent(sweep):
    for r in sweep:
        assert r.h_min_conditional <= r.h_min_estimate
        assert r.entropy_loss == pytest.approx(r.h_min_classical - r.h_min_conditional)
        assert r.purity == pytest.approx(1 / (2 * math.sqrt(r.variance_q_vu * r.variance_p_vu)))


def test_render_table(sweep):
    lines = entropy.render_table(sweep[:1]).splitlines()
    assert len(lines) == 2 and "H_min(X|E)" in lines[0]
    assert len(entropy.render_table(sweep).splitlines()) == len(sweep) + 1


def test_entropy_report_rejects_zero_power(sweep):
    with pytest.raises(EntropyError):
        entropy.entropy_report([], unit_calibration(), 0.0, 2e9)


def test_ratio_rule_rate():
    assert entropy.ratio_rule_rate(11008, 17600, 8, 2e9) == pytest.approx(20.015e9, rel=1e-3)
    assert entropy.ratio_rule_rate(17600, 17600, 8, 1.0) == 16.0
    with pytest.raises(EntropyError):
        entropy.ratio_rule_rate(0, 17600, 8, 2e9)
