import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hetqrng import _gf2, extractor
from hetqrng.extractor import ExtractorError, ExtractorParams
from hetqrng.source import SampleBlock


def toeplitz_oracle(seed, x, n, m):
    """Explicit double loop: y_j = XOR_i seed[i - j + n - 1] & x_i."""
    y = []
    for j in range(n):
        acc = 0
        for i in range(m):
            acc ^= int(seed[i - j + n - 1]) & int(x[i])
        y.append(acc)
    return np.array(y, dtype=np.uint8)


def params(m, n, seed=0, **kw):
    kw.setdefault("override", True)
    return ExtractorParams(m, n, 1e-17, extractor.make_seed(m + n - 1, seed), 1.0, 16, **kw)


def test_lhl_bound_values():
    assert math.floor(extractor.lhl_bound(10.106, 16, 1e-17, 17600)) == 11003
    assert math.floor(extractor.lhl_bound(8, 16, 1e-17, 1600)) == 687


def test_size_extractor_defaults():
    xp = extractor.size_extractor(10.106, 16, 1e-17, 17600, seed=1)
    assert xp.output_bits == 10944 and xp.output_bits <= 11003
    assert xp.lhl_deficit == 0 and not xp.override
    assert extractor.size_extractor(8, 16, 1e-17, 1600, seed=1).output_bits == 640


def test_override_surfaces_deficit():
    xp = extractor.size_extractor(10.106, 16, 1e-17, 17600, seed=1, output_bits=11008)
    assert xp.override and xp.lhl_deficit == 5
    d = xp.describe()
    assert d["lhl_deficit"] == 5 and d["lhl_max_output"] == 11003


def test_epsilon_one_and_full_entropy():
    xp = extractor.size_extractor(16, 16, 1.0, 17600, seed=1)
    assert xp.output_bits == 17600


def test_bound_violation_without_override():
    with pytest.raises(ExtractorError, match="bound"):
        ExtractorParams(17600, 11008, 1e-17, extractor.make_seed(17600 + 11007, 0), 10.106, 16)


@pytest.mark.parametrize("args", [(0.0, 16, 1e-17, 100), (17.0, 16, 1e-17, 100),
                                  (8.0, 16, 0.0, 100), (8.0, 16, 1.5, 100), (8.0, 16, 1e-17, 0)])
def test_size_extractor_rejects(args):
    with pytest.raises(ExtractorError):
        extractor.size_extractor(*args, seed=0)


def test_too_little_entropy():
    with pytest.raises(ExtractorError, match="too low"):
        extractor.size_extractor(0.01, 16, 1e-17, 1600, seed=0)


def test_params_validation():
    with pytest.raises(ExtractorError):
        ExtractorParams(8, 9, 0.5, np.zeros(16, np.uint8), 1, 16, override=True)
    with pytest.raises(ExtractorError):
        ExtractorParams(8, 4, 0.5, np.zeros(10, np.uint8), 1, 16, override=True)
    with pytest.raises(ExtractorError):
        ExtractorParams(8, 4, 0.5, np.full(11, 2, np.uint8), 1, 16, override=True)


def test_small_example_against_oracle():
    rng = np.random.default_rng(0)
    xp = params(8, 4, 3)
    x = rng.integers(0, 2, 8, dtype=np.uint8)
    assert np.array_equal(extractor.extract(x, xp), toeplitz_oracle(xp.seed, x, 4, 8))


def test_corner_seed_selects_leading_bits():
    n, m = 5, 12
    seed = np.zeros(m + n - 1, np.uint8)
    seed[n - 1] = 1  # T = [I | 0]
    xp = ExtractorParams(m, n, 1.0, seed, 1.0, 16, override=True)
    x = np.random.default_rng(1).integers(0, 2, m, dtype=np.uint8)
    assert np.array_equal(extractor.extract(x, xp), x[:n])


def test_dense_matrix_convention():
    seed = np.arange(6) % 2
    t = _gf2.toeplitz_matrix(seed, 3, 4)
    for j in range(3):
        for i in range(4):
            assert t[j, i] == seed[i - j + 2]


@given(st.integers(1, 200), st.data())
@settings(max_examples=100)
def test_fast_matches_oracle(m, data):
    n = data.draw(st.integers(1, m))
    seed = np.array(data.draw(st.lists(st.integers(0, 1), min_size=m + n - 1, max_size=m + n - 1)),
                    np.uint8)
    x = np.array(data.draw(st.lists(st.integers(0, 1), min_size=m, max_size=m)), np.uint8)
    xp = ExtractorParams(m, n, 1.0, seed, 1.0, 16, override=True)
    expected = toeplitz_oracle(seed, x, n, m)
    assert np.array_equal(extractor.extract(x, xp), expected)
    assert np.array_equal(extractor.extract_naive(x, xp), expected)
    sw = extractor.extract_words(_gf2.pack_bits(x)[None, :], xp, software=True)
    assert np.array_equal(_gf2.unpack_bits(sw[0], n), expected)


def correlation_oracle(seed, x, n):
    """y_j = sum_i seed[i + n - 1 - j] x_i, i.e. a sliding correlation read backwards."""
    c = np.correlate(seed.astype(np.int64), x.astype(np.int64), mode="valid")
    return (c[::-1] & 1).astype(np.uint8)


def test_large_dimensions_match_oracle():
    rng = np.random.default_rng(2)
    for m, n in [(17600, 10944), (1000, 999), (4097, 63), (130, 65)]:
        xp = params(m, n, 5)
        xs = rng.integers(0, 2, (3, m), dtype=np.uint8)
        fast = extractor.extract_words(_gf2.pack_bits(xs), xp)
        for k in range(3):
            assert np.array_equal(_gf2.unpack_bits(fast[k], n), correlation_oracle(xp.seed, xs[k], n))
    xp = params(300, 200, 6)
    x = rng.integers(0, 2, 300, dtype=np.uint8)
    assert np.array_equal(correlation_oracle(xp.seed, x, 200), toeplitz_oracle(xp.seed, x, 200, 300))


def test_hardware_and_software_kernels_agree():
    rng = np.random.default_rng(3)
    xp = params(17600, 10944, 6)
    xw = _gf2.pack_bits(rng.integers(0, 2, (4, 17600), dtype=np.uint8))
    assert np.array_equal(extractor.extract_words(xw, xp),
                          extractor.extract_words(xw, xp, software=True))


@given(st.integers(1, 300))
def test_pack_unpack_round_trip(nbits):
    bits = np.random.default_rng(nbits).integers(0, 2, nbits, dtype=np.uint8)
    w = _gf2.pack_bits(bits)
    assert w.size == _gf2.words_for(nbits)
    assert np.array_equal(_gf2.unpack_bits(w, nbits), bits)


def test_linearity():
    rng = np.random.default_rng(4)
    xp = params(500, 300, 7)
    a, b = rng.integers(0, 2, (2, 500), dtype=np.uint8)
    assert np.array_equal(extractor.extract(a ^ b, xp),
                          extractor.extract(a, xp) ^ extractor.extract(b, xp))


def test_pair_bits_layout():
    bits = extractor.pair_bits(np.array([1, -1]), np.array([2, 0]), 4)
    assert bits.tolist() == [1, 0, 0, 0, 0, 1, 0, 0, 1, 1, 1, 1, 0, 0, 0, 0]
    q = np.array([3, -2], np.int8)
    p = np.array([-128, 127], np.int8)
    assert np.array_equal(np.unpackbits(extractor.pair_bytes(q, p), bitorder="little"),
                          extractor.pair_bits(q, p, 8))


def codes_block(n, seed, bits=8):
    rng = np.random.default_rng(seed)
    lo, hi = -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
    return rng.integers(lo, hi + 1, n), rng.integers(lo, hi + 1, n)


def test_block_accounting():
    xp = params(160, 64, 8, )
    # 160 bits = 10 pairs of 8-bit codes; 25 pairs = 2 blocks + remainder
    out = extractor.extract_stream([codes_block(25, 1)], xp)
    assert out.blocks_consumed == 2 and out.bit_length == 128
    assert len(out.to_bytes()) == 16


@given(st.lists(st.integers(1, 400), min_size=1, max_size=6), st.sampled_from([8, 4, 12]))
@settings(max_examples=30)
def test_stream_partition_invariance(sizes, bits):
    m, n = 8 * 2 * bits + 2 * bits, 37  # block not byte aligned for some depths
    xp = ExtractorParams(m, n, 1.0, extractor.make_seed(m + n - 1, 9), 1.0, 2 * bits, override=True)
    q, p = codes_block(sum(sizes), 2, bits)
    whole = extractor.extract_stream([(q, p)], xp, bits)
    parts, off = [], 0
    for k in sizes:
        parts.append((q[off:off + k], p[off:off + k]))
        off += k
    split = extractor.extract_stream(parts, xp, bits)
    assert split.to_bytes() == whole.to_bytes()
    assert split.blocks_consumed == whole.blocks_consumed == (2 * bits * sum(sizes)) // m
    # and equals hashing each block of the serialized record directly
    allbits = extractor.pair_bits(q, p, bits)
    ref = [extractor.extract_naive(allbits[i * m:(i + 1) * m], xp) for i in range(whole.blocks_consumed)]
    if ref:
        assert np.array_equal(whole.unpacked(), np.concatenate(ref))


def test_byte_path_matches_bit_path():
    q, p = codes_block(5000, 3)
    xp = params(17600, 10944, 10)
    fast = extractor.extract_stream([(q.astype(np.int8), p.astype(np.int8))], xp)
    allbits = extractor.pair_bits(q, p, 8)
    ref = np.concatenate([extractor.extract(allbits[i * 17600:(i + 1) * 17600], xp)
                          for i in range(fast.blocks_consumed)])
    assert np.array_equal(fast.unpacked(), ref)


def test_iter_extract_equals_extract_stream():
    q, p = codes_block(20000, 4)
    xp = params(17600, 10944, 11)
    blocks = [(q[i:i + 3000], p[i:i + 3000]) for i in range(0, 20000, 3000)]
    assert b"".join(extractor.iter_extract(blocks, xp)) == extractor.extract_stream(blocks, xp).to_bytes()


def test_deterministic():
    q, p = codes_block(10000, 5)
    xp = params(17600, 10944, 12)
    assert extractor.extract_stream([(q, p)], xp).to_bytes() == extractor.extract_stream([(q, p)], xp).to_bytes()


def test_sample_block_depth_mismatch():
    xp = ExtractorParams(160, 64, 1.0, extractor.make_seed(223, 0), 1.0, 8, override=True)
    blk = SampleBlock(np.zeros(100), np.zeros(100), 1.0, 8, 1.0, 0.0)
    with pytest.raises(ExtractorError):
        extractor.extract_stream([blk], xp, 4)
    with pytest.raises(ExtractorError):
        extractor.StreamExtractor(xp, 8)


def test_seed_sources(tmp_path):
    a = extractor.make_seed(1000, 3)
    assert np.array_equal(a, extractor.make_seed(1000, 3))
    assert not np.array_equal(a, extractor.make_seed(1000, 4))
    assert not np.array_equal(extractor.make_seed(1000), extractor.make_seed(1000))
    path = tmp_path / "seed.bin"
    extractor.write_seed_file(path, a)
    assert np.array_equal(extractor.read_seed_file(path, 1000), a)
    with pytest.raises(ExtractorError):
        extractor.read_seed_file(path, 2000)


def test_params_hash_tracks_seed():
    assert params(100, 50, 1).params_hash != params(100, 50, 2).params_hash
    assert params(100, 50, 1) == params(100, 50, 1)


def test_output_bias_small():
    rng = np.random.default_rng(6)
    q = rng.normal(0, 14, 400_000).round().astype(np.int8)
    p = rng.normal(0, 14, 400_000).round().astype(np.int8)
    xp = extractor.size_extractor(9.0, 16, 1e-17, 17600, seed=1)
    bits = extractor.extract_stream([(q, p)], xp).unpacked()
    assert abs(bits.mean() - 0.5) < 5 * 0.5 / math.sqrt(bits.size)
