import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hetqrng import source
from hetqrng.source import SampleBlock, SourceParams


def quiet(**kw):
    """Source without low-frequency technical noise."""
    return SourceParams(lowfreq_noise=(), flicker_rms=0.0, **kw)


def test_variance_matches_closed_form():
    # 1 mW, 1e7 samples: empirical variance within 1% of slope*P + electronic
    p = quiet(lo_power=1e-3, seed=3)
    v = source.analog_signal(p, "q", 0, 10**7)
    expected = p.shot_slope_q * 1e-3 + p.electronic_noise_variance
    assert abs(v.var() / expected - 1) < 0.01


def test_quantized_variance_adds_lsb_term():
    p = quiet(lo_power=20e-3, seed=4)
    blk = source.generate_block(p, 2_000_000)
    expected = p.noise_variance("p") + p.lsb ** 2 / 12
    se = expected * math.sqrt(2 / len(blk))
    assert abs(blk.volts("p").var() - expected) < 4 * se


def test_default_shot_to_electronic_ratio():
    p = SourceParams()
    assert p.shot_slope_q * p.lo_power / p.electronic_noise_variance == pytest.approx(10**0.9)


def test_pole_taps_unit_energy_and_decay():
    h = source.pole_taps(2.5e9, 25e9)
    assert np.sum(h * h) == pytest.approx(1.0)
    assert np.all(np.diff(h) < 0)
    assert source.pole_taps(None, 25e9).tolist() == [1.0]


@given(st.integers(0, 3 * source.NOISE_CHUNK), st.integers(1, 5000), st.integers(0, 2**32))
def test_white_noise_is_position_addressed(start, length, seed):
    whole = source.white_noise(seed, 0, 0, start + length)
    part = source.white_noise(seed, 0, start, length)
    assert np.array_equal(whole[start:], part)


@given(st.lists(st.integers(1, 9000), min_size=1, max_size=5))
def test_block_partition_invariance(sizes):
    p = SourceParams(seed=11)
    total = sum(sizes)
    whole = source.generate_block(p, total)
    parts, off = [], 0
    for n in sizes:
        parts.append(source.generate_block(p, n, off))
        off += n
    assert source.concatenate(parts) == whole


def test_stream_matches_single_block():
    p = SourceParams(seed=2)
    blocks = list(source.stream(p, 10_000, 3000))
    assert [len(b) for b in blocks] == [3000, 3000, 3000, 1000]
    assert [b.stream_offset for b in blocks] == [0, 3000, 6000, 9000]
    assert source.concatenate(blocks) == source.generate_block(p, 10_000)


def test_seed_changes_stream():
    a = source.generate_block(SourceParams(seed=1), 1000)
    b = source.generate_block(SourceParams(seed=2), 1000)
    assert a != b


def test_channels_are_independent():
    blk = source.generate_block(quiet(seed=5), 400_000)
    r = np.corrcoef(blk.volts("q"), blk.volts("p"))[0, 1]
    assert abs(r) < 5 / math.sqrt(len(blk))


def test_quantize_mid_tread_and_clip():
    lsb = 0.1
    codes = source.quantize(np.array([0.04, 0.06, -0.06, 100.0, -100.0]), lsb, 8)
    assert codes.tolist() == [0, 1, -1, 127, -128]
    assert codes.dtype == np.int8


@given(st.integers(2, 16))
def test_code_limits(bits):
    lo, hi = source.code_limits(bits)
    assert (lo, hi) == (-(2 ** (bits - 1)), 2 ** (bits - 1) - 1)
    assert np.iinfo(source.code_dtype(bits)).min <= lo


def test_saturation_counted_at_rails():
    blk = SampleBlock(np.array([127, 0, -128], np.int8), np.array([1, 127, 2], np.int8),
                      25e9, 8, 1.0, 0.0)
    assert blk.saturated_count() == 3


def test_default_saturation_is_rare():
    blk = source.generate_block(SourceParams(seed=8), 1_000_000)
    assert blk.saturated_count() / (2 * len(blk)) < 1e-4


def test_sample_block_validation():
    with pytest.raises(ValueError):
        SampleBlock(np.zeros(3), np.zeros(4), 1.0, 8, 1.0, 0.0)
    with pytest.raises(ValueError):
        SampleBlock(np.array([200]), np.array([0]), 1.0, 8, 1.0, 0.0)
    with pytest.raises(ValueError):
        SampleBlock(np.zeros(1), np.zeros(1), 1.0, 1, 1.0, 0.0)


def test_params_validation():
    with pytest.raises(ValueError):
        SourceParams(lo_power=-1)
    with pytest.raises(ValueError):
        SourceParams(shot_slope_q=0)


def test_lsb():
    assert SourceParams(adc_full_scale=1.0, adc_bits=8).lsb == 1 / 256


def test_full_scale_for():
    p = SourceParams()
    fs = source.full_scale_for(p, 20e-3, 0.25)
    sigma = math.sqrt(p.noise_variance("q"))
    assert fs == pytest.approx(8 * sigma)


def test_lo_off_has_no_technical_tones():
    p = SourceParams(lo_power=0.0, seed=1)
    v = source.analog_signal(p, "q", 0, 200_000)
    assert v.var() == pytest.approx(p.electronic_noise_variance, rel=0.02)
