import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import special

from hetqrng import _special, stattests
from hetqrng.stattests import BatteryConfig, bits_from_string


def pi_bits(n=100):
    """First n bits of pi's binary expansion (11.0010010...)."""
    mpmath.mp.prec = n + 64
    v = int(mpmath.floor(mpmath.pi * mpmath.mpf(2) ** (n - 2)))
    return np.array([int(c) for c in format(v, "b")], dtype=np.uint8)


PI = pi_bits()


def test_pi_prefix():
    assert "".join(map(str, PI[:20])) == "11001001000011111101"
    assert PI.size == 100


# worked examples, 100 bits of pi
def test_frequency_pi():
    assert stattests.frequency(PI)[0] == pytest.approx(0.109599, abs=1e-6)


def test_block_frequency_pi():
    assert stattests.block_frequency(PI, 10)[0] == pytest.approx(0.706438, abs=1e-6)


def test_cusum_pi():
    assert stattests.cumulative_sums(PI)[0] == pytest.approx(0.219194, abs=1e-6)
    assert stattests.cumulative_sums(PI, reverse=True)[0] == pytest.approx(0.114866, abs=1e-6)


def test_runs_pi():
    assert stattests.runs(PI)[0] == pytest.approx(0.500798, abs=1e-6)


def test_apen_pi():
    assert stattests.approximate_entropy(PI, 2)[0] == pytest.approx(0.235301, abs=1e-6)


def direct_dft_n1(x):
    """N1 by explicit summation of the DFT at each frequency below n/2."""
    n = x.size
    s = 2.0 * x - 1.0
    t = np.arange(n)
    mags = [abs(np.sum(s * np.exp(-2j * math.pi * k * t / n))) for k in range(n // 2)]
    return int(np.sum(np.array(mags) < math.sqrt(math.log(20) * n)))


def test_dft_pi_against_direct_summation():
    p, params = stattests.dft(PI)
    n1 = direct_dft_n1(PI)
    assert params["N1"] == n1 == 48
    d = (n1 - 47.5) / math.sqrt(100 * 0.95 * 0.05 / 4)
    assert p == pytest.approx(math.erfc(abs(d) / math.sqrt(2)), rel=1e-12)
    assert p == pytest.approx(0.646355, abs=1e-6)


@given(st.integers(0, 2**32))
def test_dft_n1_property(seed):
    x = np.random.default_rng(seed).integers(0, 2, 256, dtype=np.uint8)
    assert stattests.dft(x)[1]["N1"] == direct_dft_n1(x)


# short worked examples
def test_short_examples():
    assert stattests.frequency(bits_from_string("1011010101"))[0] == pytest.approx(0.527089, abs=1e-6)
    assert stattests.block_frequency(bits_from_string("0110011010"), 3)[0] == pytest.approx(0.801252, abs=1e-6)
    assert stattests.runs(bits_from_string("1001101011"))[0] == pytest.approx(0.147232, abs=1e-6)
    assert stattests.cumulative_sums(bits_from_string("1011010111"))[0] == pytest.approx(0.4116588, abs=1e-6)
    assert stattests.approximate_entropy(bits_from_string("0100110101"), 3)[0] == pytest.approx(0.261961, abs=1e-6)
    (p1, p2), _ = stattests.serial(bits_from_string("0011011101"), 3)
    assert p1 == pytest.approx(0.808792, abs=1e-6)
    assert p2 == pytest.approx(0.670320, abs=1e-6)


def test_longest_run_example():
    x = bits_from_string(
        "11001100000101010110110001001100111000000000001001001101010100010001001111010110100000001101"
        "011111001100111001101101100010110010")
    assert x.size == 128
    p, params = stattests.longest_run(x)
    assert params["counts"] == [4, 9, 3, 0]
    assert p == pytest.approx(0.180598, abs=1e-6)


@given(st.floats(0.1, 5000), st.floats(0.0, 10000))
def test_igamc_matches_scipy(a, x):
    assert _special.igamc(a, x) == pytest.approx(special.gammaincc(a, x), rel=1e-9, abs=1e-300)
    assert _special.igam(a, x) == pytest.approx(special.gammainc(a, x), rel=1e-9, abs=1e-300)


def test_special_edges():
    assert _special.igamc(3.0, 0.0) == 1.0
    assert _special.igam(3.0, 0.0) == 0.0
    with pytest.raises(ValueError):
        _special.igamc(0.0, 1.0)
    assert _special.normal_cdf(0.0) == 0.5


def test_runs_prerequisite():
    x = np.zeros(1000, np.uint8)
    x[:10] = 1
    p, params = stattests.runs(x)
    assert p == 0.0 and params["prerequisite"] == "failed"


def test_alternating_fails_runs_only_there():
    x = np.tile(np.array([0, 1], np.uint8), 500_000)
    res = {r.test_name: r for r in stattests.run_battery(x)}
    assert res["Frequency"].passed
    assert not res["Runs"].passed and res["Runs"].p_value == 0.0


def test_constant_fails_frequency():
    res = {r.test_name: r for r in stattests.run_battery(np.zeros(10**6, np.uint8))}
    assert not res["Frequency"].passed


def test_prng_control_passes():
    bits = np.random.default_rng(2024).integers(0, 2, 10**6, dtype=np.uint8)
    results = stattests.run_battery(bits)
    assert [r.test_name for r in results] == [
        "Frequency", "BlockFrequency", "CumulativeSums (forward)", "CumulativeSums (backward)",
        "Runs", "LongestRun", "DFT", "ApproximateEntropy", "Serial (1)", "Serial (2)"]
    assert all(r.passed for r in results)
    assert stattests.p_value_summary(results).all_passed


def test_multi_sequence_aggregation():
    bits = np.random.default_rng(7).integers(0, 2, 12 * 10**5, dtype=np.uint8)
    cfg = BatteryConfig(sequence_length=10**5, min_bits=10**5, tests=("Frequency",))
    (r,) = stattests.run_battery(bits, cfg)
    assert r.parameters["sequences"] == 12
    per = [stattests.frequency(bits[i * 10**5:(i + 1) * 10**5])[0] for i in range(12)]
    assert r.p_value == pytest.approx(stattests.uniformity_p_value(per))
    assert r.bits_tested == 12 * 10**5


def test_uniformity_p_value():
    assert stattests.uniformity_p_value(np.linspace(0.05, 0.95, 10)) == pytest.approx(1.0)
    assert stattests.uniformity_p_value(np.full(100, 0.5)) < 1e-10


def test_insufficient_and_skipped():
    with pytest.raises(stattests.InsufficientBits):
        stattests.run_battery(np.zeros(1000, np.uint8))
    res = stattests.run_battery(np.random.default_rng(1).integers(0, 2, 500, dtype=np.uint8),
                                enforce_min_bits=False)
    skipped = {r.test_name for r in res if r.skipped}
    assert {"DFT", "ApproximateEntropy", "Serial (1)", "Serial (2)"} <= skipped
    summary = stattests.p_value_summary(res)
    assert not summary.all_passed and summary.n_skipped == len(skipped)


def test_as_bits():
    assert stattests.as_bits(b"\x01\x80").tolist() == [1] + [0] * 14 + [1]
    assert stattests.as_bits(np.array([True, False])).tolist() == [1, 0]
    with pytest.raises(ValueError):
        stattests.as_bits(np.array([0, 2]))


def test_summary_table():
    r = stattests.TestResult("Frequency", 0.5, True, 100)
    text = stattests.p_value_summary([r]).to_text()
    lines = text.splitlines()
    assert lines[0].split() == ["Test", "p-value", "Result"]
    assert lines[2].split() == ["Frequency", "0.500000", "PASSED"]
    mixed = stattests.p_value_summary([r, stattests.TestResult("Runs", 0.001, False, 100)])
    assert (mixed.n_passed, mixed.n_failed) == (1, 1)
    assert '"all_passed": false' in mixed.to_json()
    with pytest.raises(ValueError):
        stattests.p_value_summary([])


def test_export_ascii(tmp_path):
    path = tmp_path / "b.txt"
    assert stattests.export_ascii(b"\x03", path) == 8
    assert path.read_text() == "11000000"
    stattests.export_ascii(np.array([1, 0, 1]), path, line_length=2)
    assert path.read_text() == "10\n1\n"


def test_unknown_test_name():
    with pytest.raises(ValueError):
        stattests.run_battery(np.zeros(10**6, np.uint8), BatteryConfig(tests=("Nope",)))


def cusum_oracle(x, reverse=False):
    """Cumulative-sums p-value in extended precision, summing over integer k in the real limits."""
    n = x.size
    s = np.cumsum((2 * x.astype(int) - 1)[::-1] if reverse else 2 * x.astype(int) - 1)
    z = int(np.max(np.abs(s)))
    sq = mpmath.sqrt(n)
    lo1, hi = math.ceil((-n / z + 1) / 4), math.floor((n / z - 1) / 4)
    lo2 = math.ceil((-n / z - 3) / 4)
    s1 = sum(mpmath.ncdf((4 * k + 1) * z / sq) - mpmath.ncdf((4 * k - 1) * z / sq) for k in range(lo1, hi + 1))
    s2 = sum(mpmath.ncdf((4 * k + 3) * z / sq) - mpmath.ncdf((4 * k + 1) * z / sq) for k in range(lo2, hi + 1))
    return float(1 - s1 + s2)


@given(st.integers(0, 2**32), st.integers(10, 3000), st.booleans())
def test_cusum_matches_oracle(seed, n, rev):
    x = np.random.default_rng(seed).integers(0, 2, n, dtype=np.uint8)
    assert stattests.cumulative_sums(x, rev)[0] == pytest.approx(
        min(1.0, max(0.0, cusum_oracle(x, rev))), abs=1e-9)


@settings(max_examples=20)
@given(st.integers(0, 2**32 - 1), st.floats(0.3, 0.7))
def test_battery_p_values_in_unit_interval(seed, bias):
    x = (np.random.default_rng(seed).random(200_000) < bias).astype(np.uint8)
    res = stattests.run_battery(x, enforce_min_bits=False)
    assert res
    for r in res:
        assert 0.0 <= r.p_value <= 1.0
        assert r.passed == (not r.skipped and r.p_value >= 0.01)
