"""Synthetic two-channel heterodyne ADC streams.

The receiver is reduced to its statistical signature: Gaussian shot noise
whose variance grows linearly with LO power, a white electronic-noise floor,
both shaped by a single-pole analog response, low-frequency LO technical
noise, and a mid-tread uniform ADC with saturation.

Every sample is a pure function of ``(seed, channel, absolute index)``, so a
stream can be generated in any block partition (or in parallel by offset)
and yields identical codes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterator, Sequence

import numba as nb
import numpy as np

NOISE_CHUNK = 1 << 16
TONE_ANCHOR = 4096
# impulse-response truncation of the analog pole
POLE_TAIL = 1e-13
# offset keeps negative chunk indices inside SeedSequence's unsigned key space
_CHUNK_BIAS = 1 << 40

CHANNELS = ("q", "p")


@dataclass(frozen=True)
class SourceParams:
    """Physical parameters of the simulated receiver.

    Defaults describe a 20 mW maximum-power operating point with a 9 dB
    shot-to-electronic noise ratio on the ``q`` channel. The ADC full scale
    puts the total RMS at maximum power near a quarter of the half range
    (about 4.4 sigma to the rails, saturation near 1e-5 of samples).
    """

    lo_power: float = 20e-3
    shot_slope_q: float = 4.5
    shot_slope_p: float = 4.4
    electronic_noise_variance: float = 4.5 * 20e-3 / 10**0.9
    lowfreq_noise: tuple[tuple[float, float], ...] = ((7.0e6, 0.05), (23.0e6, 0.03))
    flicker_rms: float = 0.02
    analog_bandwidth: float = 2.5e9
    adc_rate: float = 25e9
    adc_bits: int = 8
    adc_full_scale: float = 2.84
    seed: int = 0

    def __post_init__(self):
        if self.lo_power < 0:
            raise ValueError("lo_power must be >= 0")
        if self.shot_slope_q <= 0 or self.shot_slope_p <= 0:
            raise ValueError("shot slopes must be > 0")
        if self.electronic_noise_variance < 0:
            raise ValueError("electronic_noise_variance must be >= 0")
        if not 2 <= int(self.adc_bits) <= 16:
            raise ValueError(f"adc_bits must lie in [2, 16], got {self.adc_bits}")
        if self.adc_rate <= 0:
            raise ValueError("adc_rate must be > 0")
        if self.analog_bandwidth is not None and self.analog_bandwidth <= 0:
            raise ValueError("analog_bandwidth must be > 0 (or None for no shaping)")
        if self.flicker_rms < 0:
            raise ValueError("flicker_rms must be >= 0")
        object.__setattr__(self, "lowfreq_noise",
                           tuple((float(f), float(a)) for f, a in self.lowfreq_noise))

    def with_power(self, lo_power: float) -> "SourceParams":
        return replace(self, lo_power=float(lo_power))

    def shot_slope(self, channel: str) -> float:
        return self.shot_slope_q if channel == "q" else self.shot_slope_p

    def noise_variance(self, channel: str) -> float:
        """Pre-quantization Gaussian variance (volts^2) of one channel."""
        return self.shot_slope(channel) * self.lo_power + self.electronic_noise_variance

    @property
    def lsb(self) -> float:
        return self.adc_full_scale / 2**self.adc_bits

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["lowfreq_noise"] = [list(t) for t in self.lowfreq_noise]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SourceParams":
        d = dict(d)
        if "lowfreq_noise" in d:
            d["lowfreq_noise"] = tuple(tuple(t) for t in d["lowfreq_noise"])
        return cls(**d)


def full_scale_for(params: SourceParams, max_power: float, rms_fraction: float = 0.25) -> float:
    """Full-scale span putting the max-power RMS at ``rms_fraction`` of the half range."""
    sigma = math.sqrt(max(params.with_power(max_power).noise_variance(ch) for ch in CHANNELS))
    return 2.0 * sigma / rms_fraction


@dataclass(frozen=True, eq=False)
class SampleBlock:
    """Contiguous two-channel block of signed ADC codes."""

    channel_q: np.ndarray
    channel_p: np.ndarray
    sample_rate: float
    adc_bits: int
    adc_full_scale: float
    lo_power: float
    stream_offset: int = 0

    def __post_init__(self):
        q = np.asarray(self.channel_q)
        p = np.asarray(self.channel_p)
        if q.shape != p.shape or q.ndim != 1:
            raise ValueError("channels must be 1-D arrays of equal length")
        if not 2 <= int(self.adc_bits) <= 16:
            raise ValueError(f"unsupported bit depth {self.adc_bits}")
        lo, hi = code_limits(self.adc_bits)
        if q.size and (min(q.min(), p.min()) < lo or max(q.max(), p.max()) > hi):
            raise ValueError("ADC code outside the representable range")
        dtype = code_dtype(self.adc_bits)
        q = q.astype(dtype, copy=False)
        p = p.astype(dtype, copy=False)
        q.flags.writeable = False
        p.flags.writeable = False
        object.__setattr__(self, "channel_q", q)
        object.__setattr__(self, "channel_p", p)

    def __len__(self) -> int:
        return self.channel_q.size

    @property
    def lsb(self) -> float:
        return self.adc_full_scale / 2**self.adc_bits

    def volts(self, channel: str) -> np.ndarray:
        codes = self.channel_q if channel == "q" else self.channel_p
        return codes.astype(np.float64) * self.lsb

    def saturated_count(self) -> int:
        lo, hi = code_limits(self.adc_bits)
        n = 0
        for c in (self.channel_q, self.channel_p):
            n += int(np.count_nonzero((c == lo) | (c == hi)))
        return n

    def metadata(self) -> tuple:
        return (int(self.adc_bits), float(self.sample_rate),
                float(self.adc_full_scale), float(self.lo_power))

    def __eq__(self, other):
        if not isinstance(other, SampleBlock):
            return NotImplemented
        return (self.metadata() == other.metadata()
                and self.stream_offset == other.stream_offset
                and np.array_equal(self.channel_q, other.channel_q)
                and np.array_equal(self.channel_p, other.channel_p))


def code_limits(bits: int) -> tuple[int, int]:
    return -(1 << (bits - 1)), (1 << (bits - 1)) - 1


def code_dtype(bits: int):
    return np.int8 if bits <= 8 else np.int16


def quantize(volts: np.ndarray, lsb: float, bits: int) -> np.ndarray:
    """Mid-tread uniform quantizer with saturation."""
    if lsb <= 0:
        raise ValueError("full scale must be > 0")
    lo, hi = code_limits(bits)
    codes = np.rint(np.asarray(volts, dtype=np.float64) / lsb)
    np.clip(codes, lo, hi, out=codes)
    return codes.astype(code_dtype(bits))


def pole_taps(bandwidth: float | None, rate: float) -> np.ndarray:
    """Unit-energy FIR truncation of a single-pole low-pass (impulse invariant)."""
    if bandwidth is None:
        return np.ones(1)
    a = math.exp(-2.0 * math.pi * bandwidth / rate)
    if a < POLE_TAIL:
        return np.ones(1)
    k = int(math.ceil(math.log(POLE_TAIL) / math.log(a))) + 1
    h = (1.0 - a) * a ** np.arange(k)
    return h / math.sqrt(np.sum(h * h))


def white_noise(seed: int, stream: int, start: int, length: int) -> np.ndarray:
    """Standard normal samples for absolute indices ``[start, start + length)``."""
    out = np.empty(length)
    first = start // NOISE_CHUNK
    last = (start + length - 1) // NOISE_CHUNK
    pos = 0
    for chunk in range(first, last + 1):
        ss = np.random.SeedSequence(int(seed) & ((1 << 64) - 1),
                                    spawn_key=(stream, chunk + _CHUNK_BIAS))
        vals = np.random.Generator(np.random.PCG64(ss)).standard_normal(NOISE_CHUNK)
        lo = max(start, chunk * NOISE_CHUNK) - chunk * NOISE_CHUNK
        hi = min(start + length, (chunk + 1) * NOISE_CHUNK) - chunk * NOISE_CHUNK
        out[pos:pos + hi - lo] = vals[lo:hi]
        pos += hi - lo
    return out


@nb.njit(cache=True)
def _tone_sum(start, length, omegas, amps, phases, anchor):
    out = np.zeros(length)
    for t in range(omegas.size):
        w = omegas[t]
        step = complex(math.cos(w), math.sin(w))
        i = 0
        while i < length:
            n = start + i
            base = (n // anchor) * anchor
            stop = min(length, i + (base + anchor - n))
            # phase recomputed at each anchor keeps values independent of block layout
            th = (w * base) % (2 * math.pi) + phases[t]
            z = complex(math.cos(th), math.sin(th))
            for _ in range(n - base):
                z *= step
            for j in range(i, stop):
                out[j] += amps[t] * z.imag
                z *= step
            i = stop
    return out


def _lowfreq_components(params: SourceParams, channel: int):
    freqs = [f for f, _ in params.lowfreq_noise]
    amps = [a for _, a in params.lowfreq_noise]
    if params.flicker_rms > 0:
        # 1/f power envelope, 1-100 MHz, realized as a random-phase tone comb
        fl = np.geomspace(1e6, 100e6, 12)
        w = 1.0 / np.sqrt(fl)
        w *= params.flicker_rms * math.sqrt(2.0) / math.sqrt(np.sum(w * w))
        freqs += list(fl)
        amps += list(w)
    rng = np.random.default_rng(np.random.SeedSequence(int(params.seed) & ((1 << 64) - 1),
                                                       spawn_key=(10 + channel,)))
    phases = rng.uniform(0, 2 * math.pi, len(freqs))
    omegas = 2 * math.pi * np.asarray(freqs, dtype=np.float64) / params.adc_rate
    return omegas, np.asarray(amps, dtype=np.float64), phases


def analog_signal(params: SourceParams, channel: str, offset: int, length: int) -> np.ndarray:
    """Pre-quantization voltage of one channel for absolute samples ``[offset, offset+length)``."""
    ch = CHANNELS.index(channel)
    h = pole_taps(params.analog_bandwidth, params.adc_rate)
    sigma = math.sqrt(params.noise_variance(channel))
    if sigma > 0:
        w = white_noise(params.seed, ch, offset - (h.size - 1), length + h.size - 1)
        v = np.convolve(w, h, mode="valid") * sigma if h.size > 1 else w * sigma
    else:
        v = np.zeros(length)
    if params.lo_power > 0 and (params.lowfreq_noise or params.flicker_rms > 0):
        omegas, amps, phases = _lowfreq_components(params, ch)
        v += _tone_sum(offset, length, omegas, amps, phases, TONE_ANCHOR)
    return v


def generate_block(params: SourceParams, length: int, offset: int = 0) -> SampleBlock:
    """Generate ``length`` sample pairs starting at absolute index ``offset``."""
    if length <= 0:
        raise ValueError("length must be > 0")
    if params.adc_full_scale <= 0:
        raise ValueError("adc_full_scale must be > 0")
    codes = [quantize(analog_signal(params, ch, offset, length), params.lsb, params.adc_bits)
             for ch in CHANNELS]
    return SampleBlock(codes[0], codes[1], params.adc_rate, params.adc_bits,
                       params.adc_full_scale, params.lo_power, offset)


def stream(params: SourceParams, total: int, block_size: int = 1 << 20,
           offset: int = 0) -> Iterator[SampleBlock]:
    """Yield consecutive blocks covering ``total`` samples."""
    end = offset + total
    while offset < end:
        n = min(block_size, end - offset)
        yield generate_block(params, n, offset)
        offset += n


def concatenate(blocks: Sequence[SampleBlock]) -> SampleBlock:
    blocks = list(blocks)
    if not blocks:
        raise ValueError("no blocks")
    b0 = blocks[0]
    return SampleBlock(np.concatenate([b.channel_q for b in blocks]),
                       np.concatenate([b.channel_p for b in blocks]),
                       b0.sample_rate, b0.adc_bits, b0.adc_full_scale, b0.lo_power,
                       b0.stream_offset)
