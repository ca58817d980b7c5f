"""Toeplitz-hashing randomness extraction with leftover-hash sizing.

An ``m``-bit block carrying ``k = (m / bits_per_pair) * h_min`` bits of
min-entropy is hashed to ``n <= k - 2 log2(1/epsilon)`` bits that are
``epsilon``-close to uniform. Blocks are built from the joint sample
record: each pair contributes its ``q`` code then its ``p`` code, two's
complement, LSB-first.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import secrets
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from . import _gf2
from .dsp import ConditionedBlock
from .source import SampleBlock

WORD = 64


class ExtractorError(ValueError):
    pass


def lhl_bound(h_min_per_pair: float, bits_per_pair: int, epsilon: float, input_bits: int) -> float:
    """``(input_bits / bits_per_pair) * h_min - 2 log2(1/epsilon)`` (real-valued)."""
    return input_bits / bits_per_pair * h_min_per_pair - 2.0 * math.log2(1.0 / epsilon)


def seed_digest(seed_bits: np.ndarray) -> str:
    return hashlib.sha256(np.packbits(np.asarray(seed_bits, np.uint8), bitorder="little")
                          .tobytes()).hexdigest()


@dataclass(frozen=True, eq=False)
class ExtractorParams:
    """Toeplitz dimensions, seed and the entropy accounting behind them.

    ``override`` marks dimensions chosen by hand; those may exceed the
    leftover-hash bound, and the shortfall is kept in ``lhl_deficit``
    instead of being rejected.
    """

    input_bits: int
    output_bits: int
    epsilon: float
    seed: np.ndarray
    h_min_per_pair: float
    bits_per_pair: int
    override: bool = False
    _rw: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        m, n = int(self.input_bits), int(self.output_bits)
        if m <= 0 or n <= 0:
            raise ExtractorError("input_bits and output_bits must be > 0")
        if n > m:
            raise ExtractorError("output_bits cannot exceed input_bits")
        if not 0 < self.epsilon <= 1:
            raise ExtractorError("epsilon must lie in (0, 1]")
        seed = np.asarray(self.seed, dtype=np.uint8)
        if seed.ndim != 1 or seed.size != m + n - 1:
            raise ExtractorError(f"seed must hold m + n - 1 = {m + n - 1} bits")
        if np.any(seed > 1):
            raise ExtractorError("seed must be a 0/1 bit array")
        seed = seed.copy()
        seed.flags.writeable = False
        object.__setattr__(self, "seed", seed)
        if not self.override and self.lhl_deficit > 0:
            raise ExtractorError(
                f"output_bits {n} exceeds the leftover-hash bound "
                f"{math.floor(self.lhl_bound)}")
        object.__setattr__(self, "_rw", _gf2.prepare_seed(seed))

    @property
    def lhl_bound(self) -> float:
        return lhl_bound(self.h_min_per_pair, self.bits_per_pair, self.epsilon, self.input_bits)

    @property
    def lhl_max_output(self) -> int:
        return max(0, math.floor(self.lhl_bound))

    @property
    def lhl_deficit(self) -> int:
        """Bits by which ``output_bits`` exceeds the leftover-hash bound (0 if compliant)."""
        return max(0, self.output_bits - self.lhl_max_output)

    @property
    def pairs_per_block(self) -> float:
        return self.input_bits / self.bits_per_pair

    @property
    def seed_digest(self) -> str:
        return seed_digest(self.seed)

    def describe(self) -> dict:
        return {
            "input_bits": int(self.input_bits),
            "output_bits": int(self.output_bits),
            "epsilon": float(self.epsilon),
            "h_min_per_pair": float(self.h_min_per_pair),
            "bits_per_pair": int(self.bits_per_pair),
            "override": bool(self.override),
            "seed_bits": int(self.seed.size),
            "seed_sha256": self.seed_digest,
            "lhl_bound": self.lhl_bound,
            "lhl_max_output": self.lhl_max_output,
            "lhl_deficit": self.lhl_deficit,
        }

    @property
    def params_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.describe(), sort_keys=True).encode()).hexdigest()

    def __eq__(self, other):
        if not isinstance(other, ExtractorParams):
            return NotImplemented
        return self.describe() == other.describe()


def make_seed(length: int, seed: int | None = None) -> np.ndarray:
    """``length`` seed bits: reproducible from an integer, else from OS entropy."""
    if seed is None:
        raw = np.frombuffer(secrets.token_bytes((length + 7) // 8), dtype=np.uint8)
    else:
        ss = np.random.SeedSequence(int(seed) & ((1 << 64) - 1), spawn_key=(0x5EED,))
        raw = np.random.Generator(np.random.PCG64(ss)).integers(
            0, 256, (length + 7) // 8, dtype=np.uint8)
    return np.unpackbits(raw, bitorder="little")[:length]


def read_seed_file(path: str | os.PathLike, length: int) -> np.ndarray:
    """Seed bits from a raw binary file (LSB-first); extra bytes are ignored."""
    with open(path, "rb") as fh:
        raw = fh.read((length + 7) // 8)
    if len(raw) * 8 < length:
        raise ExtractorError(f"seed file holds {len(raw) * 8} bits, need {length}")
    return np.unpackbits(np.frombuffer(raw, np.uint8), bitorder="little")[:length]


def write_seed_file(path: str | os.PathLike, seed_bits: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(np.packbits(np.asarray(seed_bits, np.uint8), bitorder="little").tobytes())


def size_extractor(h_min_per_pair: float, bits_per_pair: int, epsilon: float,
                   target_input_bits: int, seed: np.ndarray | int | None = None,
                   output_bits: int | None = None) -> ExtractorParams:
    """Largest leftover-hash-compliant output, rounded down to a multiple of 64.

    ``output_bits`` forces the output length (marked as an override; any
    excess over the bound shows up as ``lhl_deficit``). ``seed`` is a bit
    array, an integer for a reproducible seed, or None for OS entropy.
    """
    if not 0 < h_min_per_pair <= bits_per_pair:
        raise ExtractorError("need 0 < h_min_per_pair <= bits_per_pair")
    if not 0 < epsilon <= 1:
        raise ExtractorError("epsilon must lie in (0, 1]")
    if target_input_bits <= 0:
        raise ExtractorError("target_input_bits must be > 0")
    if output_bits is None:
        n = math.floor(lhl_bound(h_min_per_pair, bits_per_pair, epsilon, target_input_bits))
        n = (n // WORD) * WORD
        if n <= 0:
            raise ExtractorError(
                f"h_min {h_min_per_pair:.4g} too low: no output survives the 2 log2(1/eps) "
                f"penalty at input {target_input_bits} bits")
        override = False
    else:
        n = int(output_bits)
        override = True
    if seed is None or isinstance(seed, (int, np.integer)):
        seed = make_seed(target_input_bits + n - 1, None if seed is None else int(seed))
    return ExtractorParams(int(target_input_bits), n, float(epsilon), seed,
                           float(h_min_per_pair), int(bits_per_pair), override)


def extract(block_bits: np.ndarray, params: ExtractorParams) -> np.ndarray:
    """Hash one ``input_bits``-long 0/1 block to ``output_bits`` bits."""
    x = np.asarray(block_bits, dtype=np.uint8)
    if x.ndim != 1 or x.size != params.input_bits:
        raise ExtractorError(f"block must hold {params.input_bits} bits, got {x.size}")
    y = _gf2.toeplitz_multiply(params._rw, _gf2.pack_bits(x)[None, :],
                               params.input_bits, params.output_bits)
    return _gf2.unpack_bits(y[0], params.output_bits)


def extract_words(xw: np.ndarray, params: ExtractorParams, software: bool = False) -> np.ndarray:
    """Packed fast path: rows of ``words_for(m)`` input words to rows of output words."""
    return _gf2.toeplitz_multiply(params._rw, xw, params.input_bits, params.output_bits,
                                  software=software)


def extract_naive(block_bits: np.ndarray, params: ExtractorParams) -> np.ndarray:
    """Dense-matrix reference for :func:`extract`."""
    return _gf2.naive_multiply(params.seed, block_bits, params.output_bits, params.input_bits)


# --------------------------------------------------------------------------
# streams

def pair_bits(q: np.ndarray, p: np.ndarray, bits: int) -> np.ndarray:
    """0/1 bits of interleaved (q, p) codes, ``bits`` per code, LSB-first."""
    codes = np.empty(2 * q.size, dtype=np.int64)
    codes[0::2] = q
    codes[1::2] = p
    u = codes & ((1 << bits) - 1)
    return ((u[:, None] >> np.arange(bits)) & 1).astype(np.uint8).ravel()


def pair_bytes(q: np.ndarray, p: np.ndarray) -> np.ndarray:
    """8-bit fast path of :func:`pair_bits`: the interleaved code bytes themselves."""
    out = np.empty(2 * q.size, dtype=np.uint8)
    out[0::2] = np.asarray(q).astype(np.uint8)  # integer casts wrap modulo 256
    out[1::2] = np.asarray(p).astype(np.uint8)
    return out


def _codes(block, bits: int) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(block, ConditionedBlock):
        return block.codes(bits)
    if isinstance(block, SampleBlock):
        if block.adc_bits != bits:
            raise ExtractorError(f"stream has {block.adc_bits}-bit codes, params expect {bits}")
        return block.channel_q, block.channel_p
    q, p = block
    return np.asarray(q), np.asarray(p)


@dataclass(frozen=True, eq=False)
class RandomBitstream:
    """Extracted bits, packed LSB-first, ``blocks_consumed * output_bits`` long."""

    bits: np.ndarray
    blocks_consumed: int
    params_hash: str
    output_bits: int

    def __post_init__(self):
        if self.bit_length % self.output_bits:
            raise ExtractorError("bitstream length must be a multiple of output_bits")

    @property
    def bit_length(self) -> int:
        return self.blocks_consumed * self.output_bits

    def to_bytes(self) -> bytes:
        return np.asarray(self.bits, np.uint8).tobytes()

    def unpacked(self) -> np.ndarray:
        return np.unpackbits(np.asarray(self.bits, np.uint8), bitorder="little")[:self.bit_length]


class StreamExtractor:
    """Incremental extraction over a stream of code blocks.

    Leftover bits shorter than one input block are carried to the next
    push; whatever remains at the end is discarded.
    """

    def __init__(self, params: ExtractorParams, adc_bits: int = 8, batch_blocks: int = 256):
        if params.bits_per_pair != 2 * adc_bits:
            raise ExtractorError(f"params sized for {params.bits_per_pair} bits/pair, "
                                 f"stream carries {2 * adc_bits}")
        self.params = params
        self.adc_bits = adc_bits
        self.batch_blocks = batch_blocks
        self.blocks_consumed = 0
        m = params.input_bits
        # byte path: 8-bit codes with byte-aligned blocks need no bit shuffling
        self._bytes = adc_bits == 8 and m % 8 == 0
        self._carry = np.zeros(0, dtype=np.uint8)
        self._out_bits = np.zeros(0, dtype=np.uint8)

    def _hash(self, buf: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Hash all whole blocks in ``buf`` (bytes or bits); return (output words, rest)."""
        m = self.params.input_bits
        unit = m // 8 if self._bytes else m
        nblk = buf.size // unit
        if nblk == 0:
            return np.zeros((0, _gf2.words_for(self.params.output_bits)), np.uint64), buf
        body = buf[:nblk * unit].reshape(nblk, unit)
        if self._bytes:
            pad = _gf2.words_for(m) * 8 - unit
            if pad:
                body = np.concatenate([body, np.zeros((nblk, pad), np.uint8)], axis=1)
            xw = np.ascontiguousarray(body).view(np.uint64)
        else:
            xw = _gf2.pack_bits(body)
        out = extract_words(xw, self.params)
        self.blocks_consumed += nblk
        return out, buf[nblk * unit:]

    def push(self, block) -> bytes:
        """Consume one block; return newly completed output bytes."""
        q, p = _codes(block, self.adc_bits)
        chunk = pair_bytes(q, p) if self._bytes else pair_bits(q, p, self.adc_bits)
        buf = np.concatenate([self._carry, chunk]) if self._carry.size else chunk
        out, self._carry = self._hash(buf)
        return self._emit(out)

    def _emit(self, out_words: np.ndarray) -> bytes:
        n = self.params.output_bits
        if out_words.shape[0] == 0:
            return b""
        if n % 8 == 0:
            return np.ascontiguousarray(out_words).view(np.uint8)[:, :n // 8].tobytes()
        bits = _gf2.unpack_bits(out_words, n).ravel()
        allbits = np.concatenate([self._out_bits, bits])
        whole = allbits.size // 8 * 8
        self._out_bits = allbits[whole:]
        return np.packbits(allbits[:whole], bitorder="little").tobytes()

    def flush(self) -> bytes:
        """Pending output bits (only when output_bits is not a byte multiple), zero padded."""
        if self._out_bits.size == 0:
            return b""
        tail = np.packbits(self._out_bits, bitorder="little").tobytes()
        self._out_bits = np.zeros(0, np.uint8)
        return tail


def iter_extract(blocks: Iterable, params: ExtractorParams, adc_bits: int = 8) -> Iterator[bytes]:
    """Yield extracted bytes block by block (bounded memory)."""
    ex = StreamExtractor(params, adc_bits)
    for b in blocks:
        chunk = ex.push(b)
        if chunk:
            yield chunk
    tail = ex.flush()
    if tail:
        yield tail


def extract_stream(blocks: Iterable, params: ExtractorParams, adc_bits: int = 8) -> RandomBitstream:
    """Hash a whole stream of conditioned (or raw) blocks into one bitstream."""
    ex = StreamExtractor(params, adc_bits)
    parts = [ex.push(b) for b in blocks]
    parts.append(ex.flush())
    data = np.frombuffer(b"".join(parts), dtype=np.uint8)
    return RandomBitstream(data, ex.blocks_consumed, params.params_hash, params.output_bits)
