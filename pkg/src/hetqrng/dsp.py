"""Digital conditioning chain and spectral diagnostics.

Chain (per channel, all linear, state carried across blocks):

1. band-select FIR at the ADC rate: stopband below ``highpass_cutoff``,
   power-complementary raised-cosine edges around ``band_low`` and
   ``band_high``, optional inverse of the single-pole analog roll-off;
2. real mixing by ``2 cos(2 pi f_mix n / fs)`` on the absolute sample index;
3. rational resampling ``output_rate / input_rate = L / M`` through a
   polyphase low-pass that keeps the difference band and rejects the sum
   products.

With the default high-side mix (``f_mix = band_high``) the window
``[band_low, band_high]`` lands on ``[0, band_high - band_low]`` with its
spectrum inverted; a 900 MHz tone exits at 500 MHz either way.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Iterable, Iterator

import numpy as np
from scipy import signal

from .source import SampleBlock, code_dtype, code_limits


@dataclass(frozen=True)
class DspConfig:
    highpass_cutoff: float = 48e6
    band_low: float = 400e6
    band_high: float = 1400e6
    mix_frequency: float | None = None
    lowpass_cutoff: float | None = None
    output_rate: float = 2e9
    filter_taps: int = 4001
    transition_width: float = 100e6
    rolloff_compensation: float | None = 2.5e9
    stopband_db: float = 70.0

    def __post_init__(self):
        if self.mix_frequency is None:
            object.__setattr__(self, "mix_frequency", float(self.band_high))
        if self.lowpass_cutoff is None:
            object.__setattr__(self, "lowpass_cutoff", float(self.band_high - self.band_low))
        if not 0 < self.highpass_cutoff < self.band_low < self.band_high:
            raise ValueError("need 0 < highpass_cutoff < band_low < band_high")
        if self.output_rate < 2 * self.lowpass_cutoff:
            raise ValueError("output_rate must be >= 2 * lowpass_cutoff")
        if self.filter_taps < 3:
            raise ValueError("filter_taps must be >= 3")
        if not 0 < self.transition_width < self.band_high - self.band_low:
            raise ValueError("transition_width out of range")
        if self.band_low - self.transition_width / 2 <= self.highpass_cutoff:
            raise ValueError("band edge transition overlaps the high-pass stopband")
        f = self.mix_frequency
        if self.band_low < f < self.band_high:
            raise ValueError("mix_frequency inside the band folds it onto itself")
        lo, hi = sorted((abs(self.band_low - f), abs(self.band_high - f)))
        if hi > self.lowpass_cutoff + 1e-6:
            raise ValueError("translated band exceeds lowpass_cutoff")
        if self.sum_product_edge <= self.lowpass_cutoff + self.transition_width:
            warnings.warn(
                "mixing sum products overlap the retained band "
                f"(lowest sum product {self.sum_product_edge / 1e6:.0f} MHz); the output "
                "is not white. A high-side mix_frequency >= band_high avoids this.",
                stacklevel=3)

    @property
    def sum_product_edge(self) -> float:
        return self.band_low + self.mix_frequency - self.transition_width / 2

    @property
    def band_center(self) -> float:
        return 0.5 * (self.band_low + self.band_high)

    def validate_rate(self, input_rate: float) -> None:
        if input_rate <= 2 * self.band_high:
            raise ValueError(f"input rate {input_rate:g} must exceed 2*band_high")
        if self.band_high + self.transition_width / 2 >= input_rate / 2:
            raise ValueError("band edge beyond input Nyquist")
        resample_ratio(input_rate, self.output_rate)

    def to_dict(self) -> dict:
        return asdict(self)


def resample_ratio(input_rate: float, output_rate: float, max_den: int = 1000) -> tuple[int, int]:
    r = Fraction(output_rate / input_rate).limit_denominator(max_den)
    if abs(float(r) * input_rate - output_rate) > 1e-9 * output_rate:
        raise ValueError("output_rate/input_rate is not a small rational")
    return r.numerator, r.denominator


def kaiser_beta(atten_db: float) -> float:
    if atten_db > 50:
        return 0.1102 * (atten_db - 8.7)
    if atten_db >= 21:
        return 0.5842 * (atten_db - 21) ** 0.4 + 0.07886 * (atten_db - 21)
    return 0.0


def kaiser_length(atten_db: float, transition: float, rate: float) -> int:
    n = int(math.ceil((atten_db - 7.95) / (14.36 * transition / rate))) + 1
    return n | 1


def _sqrt_raised_cosine_edge(f: np.ndarray, center: float, width: float) -> np.ndarray:
    """Rising edge whose square is power-complementary about ``center``."""
    x = np.clip((f - center) / width + 0.5, 0.0, 1.0)
    return np.sin(0.5 * math.pi * x)


def band_select_response(cfg: DspConfig, f: np.ndarray, rate: float) -> np.ndarray:
    """Desired (zero-phase) magnitude of the band-select stage, unnormalized."""
    f = np.abs(f)
    tw = cfg.transition_width
    d = (_sqrt_raised_cosine_edge(f, cfg.band_low, tw)
         * _sqrt_raised_cosine_edge(-f, -cfg.band_high, tw))
    d = np.where(f <= cfg.highpass_cutoff, 0.0, d)
    if cfg.rolloff_compensation:
        d = d / np.abs(pole_response(cfg.rolloff_compensation, rate, f))
    return d


def pole_response(bandwidth: float, rate: float, f) -> np.ndarray:
    """Response of the sampled single-pole low-pass, unit gain at DC."""
    a = math.exp(-2.0 * math.pi * bandwidth / rate)
    z = np.exp(-2j * math.pi * np.asarray(f, dtype=np.float64) / rate)
    return (1.0 - a) / (1.0 - a * z)


def design_band_select(cfg: DspConfig, rate: float) -> np.ndarray:
    """Linear-phase FIR (window method, Kaiser window) for the band-select stage.

    Normalized to unit gain at the band center.
    """
    n = cfg.filter_taps | 1
    grid = 1 << int(math.ceil(math.log2(8 * n)))
    f = np.fft.rfftfreq(grid, 1.0 / rate)
    ideal = np.fft.irfft(band_select_response(cfg, f, rate), grid)
    h = np.roll(ideal, n // 2)[:n] * np.kaiser(n, kaiser_beta(cfg.stopband_db))
    return h / abs(freq_response(h, cfg.band_center, rate))


def design_resampler(cfg: DspConfig, input_rate: float) -> tuple[np.ndarray, int, int]:
    """Polyphase low-pass for the ``L/M`` resampler, gain ``L`` in the passband."""
    up, down = resample_ratio(input_rate, cfg.output_rate)
    rate = input_rate * up
    f_pass = cfg.lowpass_cutoff + cfg.transition_width
    # overlapping sum products (low-side mix) cannot be rejected; fall back
    # to a plain transition of one band-edge width
    f_stop = max(cfg.sum_product_edge, f_pass + cfg.transition_width)
    if up > 1:
        # zero-stuffing images of the input spectrum
        f_stop = min(f_stop, input_rate - cfg.band_high)
    if f_stop <= f_pass:
        raise ValueError("no room for the resampler transition band")
    n = kaiser_length(cfg.stopband_db, f_stop - f_pass, rate)
    h = signal.firwin(n, 0.5 * (f_pass + f_stop), window=("kaiser", kaiser_beta(cfg.stopband_db)),
                      fs=rate)
    return h * up, up, down


def freq_response(h: np.ndarray, f, rate: float) -> np.ndarray:
    """Complex response of FIR ``h`` at frequencies ``f`` (Hz)."""
    f = np.atleast_1d(np.asarray(f, dtype=np.float64))
    _, r = signal.freqz(h, worN=2 * math.pi * f / rate)
    return r if r.size > 1 else r[0]


def grid_response(h: np.ndarray, f_start: float, df: float, count: int, rate: float) -> np.ndarray:
    """Response of FIR ``h`` at ``f_start + k*df`` for ``k < count``.

    When ``rate/df`` is an integer at least ``len(h)`` the grid is read off
    one zero-padded FFT of the modulated taps; otherwise falls back to
    :func:`freq_response`.
    """
    size = rate / df
    n = int(round(size))
    if abs(size - n) > 1e-9 * size or n < h.size:
        return freq_response(h, f_start + df * np.arange(count), rate)
    taps = np.arange(h.size)
    spec = np.fft.fft(h * np.exp(-2j * math.pi * f_start / rate * taps), n)
    return spec[np.arange(count) % n]


@dataclass(frozen=True, eq=False)
class ConditionedBlock:
    channel_q: np.ndarray
    channel_p: np.ndarray
    sample_rate: float
    effective_resolution: float
    stream_offset: int = 0
    saturated: int = 0
    raw_samples: int = 0

    def __post_init__(self):
        if self.channel_q.shape != self.channel_p.shape:
            raise ValueError("channels differ in length")

    def __len__(self) -> int:
        return self.channel_q.size

    def channel(self, name: str) -> np.ndarray:
        return self.channel_q if name == "q" else self.channel_p

    def codes(self, bits: int = 8) -> tuple[np.ndarray, np.ndarray]:
        """Re-digitize both channels on a grid of pitch ``effective_resolution``."""
        lo, hi = code_limits(bits)
        out = []
        for x in (self.channel_q, self.channel_p):
            c = np.rint(x / self.effective_resolution)
            np.clip(c, lo, hi, out=c)
            out.append(c.astype(code_dtype(bits)))
        return out[0], out[1]


class _ChannelChain:
    def __init__(self, h_bs, mixer, h_rs, up, down):
        self.h_bs = h_bs
        self.mixer = mixer
        self.h_rs = h_rs
        self.up = up
        self.down = down
        self.hist = np.zeros(h_bs.size - 1)
        # resampler buffer starts at a multiple of `down` (global input index)
        lead = -(-(h_rs.size // up + 1) // down) * down
        self.rs_buf = np.zeros(lead)
        self.rs_start = -lead
        self.next_out = 0

    def push(self, x: np.ndarray, offset: int) -> np.ndarray:
        seg = np.concatenate([self.hist, x])
        y = signal.oaconvolve(seg, self.h_bs, mode="valid") if x.size else np.zeros(0)
        self.hist = seg[seg.size - (self.h_bs.size - 1):]
        y = y * self.mixer(offset, x.size)
        buf = np.concatenate([self.rs_buf, y])
        end = self.rs_start + buf.size  # exclusive, global input index
        # output k sits at interpolated index down*k, needs input <= down*k/up
        last = (end - 1) * self.up // self.down
        out = np.zeros(0)
        if last >= self.next_out:
            v = signal.upfirdn(self.h_rs, buf, self.up, self.down)
            k0 = self.rs_start * self.up // self.down
            out = v[self.next_out - k0:last - k0 + 1]
            self.next_out = last + 1
        keep_from = (self.next_out * self.down - self.h_rs.size) // self.up
        keep_from = (keep_from // self.down) * self.down
        cut = max(0, keep_from - self.rs_start)
        self.rs_buf = buf[cut:]
        self.rs_start += cut
        return out


class Conditioner:
    """Stateful conditioning of one two-channel stream.

    Feeding a stream in any block partition produces the same output as
    feeding it whole.
    """

    def __init__(self, cfg: DspConfig, input_rate: float, lsb: float):
        cfg.validate_rate(input_rate)
        self.cfg = cfg
        self.input_rate = float(input_rate)
        self.lsb = float(lsb)
        self.h_bs = design_band_select(cfg, input_rate)
        self.h_rs, self.up, self.down = design_resampler(cfg, input_rate)
        fr = Fraction(cfg.mix_frequency / input_rate).limit_denominator(1 << 20)
        self._mix_num, self._mix_den = fr.numerator, fr.denominator
        exact = abs(float(fr) - cfg.mix_frequency / input_rate) < 1e-15
        self._mix_table = (2.0 * np.cos(2 * math.pi * np.arange(fr.denominator) * fr.numerator
                                        / fr.denominator) if exact else None)
        self._chains = [_ChannelChain(self.h_bs, self._mix, self.h_rs, self.up, self.down)
                        for _ in range(2)]
        self._expected_offset = None
        self._gain = chain_gain(self.h_bs, self.h_rs, self.up, cfg, self.input_rate)

    def _mix(self, offset: int, length: int) -> np.ndarray:
        n = np.arange(offset, offset + length, dtype=np.int64)
        if self._mix_table is not None:
            return self._mix_table[n % self._mix_den]
        return 2.0 * np.cos(2 * math.pi * self.cfg.mix_frequency / self.input_rate * n)

    @property
    def gain(self) -> float:
        """Amplitude gain of the chain for a tone at the band center."""
        return self._gain

    @property
    def effective_resolution(self) -> float:
        return self.lsb * self.gain

    @property
    def settle_samples(self) -> int:
        """Leading output samples whose filter support reaches before the first input."""
        reach = (self.h_rs.size - 1) + self.up * (self.h_bs.size - 1)
        return -(-reach // self.down)

    def push(self, block: SampleBlock) -> ConditionedBlock:
        if block.sample_rate != self.input_rate:
            raise ValueError(f"stream rate {block.sample_rate:g} != conditioner rate "
                             f"{self.input_rate:g}")
        out = self.push_arrays(block.volts("q"), block.volts("p"), block.stream_offset)
        return ConditionedBlock(out.channel_q, out.channel_p, out.sample_rate,
                                out.effective_resolution, out.stream_offset,
                                block.saturated_count(), 2 * len(block))

    def push_arrays(self, q: np.ndarray, p: np.ndarray, offset: int) -> ConditionedBlock:
        """Condition real-valued volts directly (no ADC codes involved)."""
        if self._expected_offset is not None and offset != self._expected_offset:
            raise ValueError("blocks must be contiguous and in order")
        if len(q) != len(p):
            raise ValueError("channels differ in length")
        self._expected_offset = offset + len(q)
        out_offset = self._chains[0].next_out
        yq = self._chains[0].push(np.asarray(q, dtype=np.float64), offset)
        yp = self._chains[1].push(np.asarray(p, dtype=np.float64), offset)
        return ConditionedBlock(yq, yp, self.cfg.output_rate, self.effective_resolution,
                                out_offset)


def chain_gain(h_bs, h_rs, up, cfg: DspConfig, rate: float) -> float:
    f_in = cfg.band_center
    f_out = abs(cfg.mix_frequency - f_in)
    g_bs = abs(freq_response(h_bs, f_in, rate))
    g_rs = abs(freq_response(h_rs, f_out, rate * up)) / up
    return float(g_bs * g_rs)


def condition(blocks: Iterable[SampleBlock], cfg: DspConfig) -> Iterator[ConditionedBlock]:
    """Condition a block stream; yields one ConditionedBlock per input block."""
    cond = None
    for b in blocks:
        if cond is None:
            cond = Conditioner(cfg, b.sample_rate, b.lsb)
        yield cond.push(b)


def output_psd(cfg: DspConfig, input_rate: float, shaping: np.ndarray | None = None,
               n: int = 4096) -> tuple[np.ndarray, np.ndarray]:
    """Two-sided output PSD of the chain for unit-variance white input.

    ``shaping`` are FIR taps applied to the white noise before the chain
    (for example :func:`hetqrng.source.pole_taps`), normalized here to unit
    energy so the input variance stays 1.  Returns frequencies in
    ``[-output_rate/2, output_rate/2)`` and the density in 1/Hz.
    """
    cond = Conditioner(cfg, input_rate, 1.0)
    fo_rate = cfg.output_rate
    fo = (np.arange(n) / n - 0.5) * fo_rate
    if shaping is not None:
        sh = np.asarray(shaping, dtype=np.float64)
        sh = sh / np.sqrt(np.sum(sh * sh))
    df = fo_rate / n
    m = cond.down * n
    # `down` aliases of the output band tile one period of the upsampled rate
    g = np.abs(grid_response(cond.h_rs, fo[0], df, m, input_rate * cond.up)) ** 2 / cond.up ** 2
    s = np.zeros(m)
    for sign in (1.0, -1.0):
        f0 = fo[0] + sign * cfg.mix_frequency
        band = np.abs(grid_response(cond.h_bs, f0, df, m, input_rate)) ** 2
        if shaping is not None:
            band = band * np.abs(grid_response(sh, f0, df, m, input_rate)) ** 2
        s += band
    psd = (g * s).reshape(cond.down, n).sum(axis=0)
    return fo, psd / input_rate


def noise_gain(cfg: DspConfig, input_rate: float, shaping: np.ndarray | None = None) -> float:
    """Output variance of the chain for unit-variance input noise."""
    f, psd = output_psd(cfg, input_rate, shaping)
    return float(np.sum(psd) * (f[1] - f[0]))


def output_autocorrelation(cfg: DspConfig, input_rate: float, max_lag: int,
                           shaping: np.ndarray | None = None) -> np.ndarray:
    """Normalized output autocorrelation at lags ``1..max_lag`` for white input."""
    _, psd = output_psd(cfg, input_rate, shaping)
    r = np.fft.ifft(np.fft.ifftshift(psd)).real
    return r[1:max_lag + 1] / r[0]


# --------------------------------------------------------------------------
# spectra

@dataclass
class SpectrumReport:
    frequencies: np.ndarray
    psd_on: np.ndarray
    psd_off: np.ndarray
    clearance_db: np.ndarray

    def __post_init__(self):
        n = len(self.frequencies)
        if not (len(self.psd_on) == len(self.psd_off) == len(self.clearance_db) == n):
            raise ValueError("arrays must have equal length")
        if n > 1 and np.any(np.diff(self.frequencies) <= 0):
            raise ValueError("frequencies must be strictly increasing")
        if np.any(np.asarray(self.psd_on) < 0) or np.any(np.asarray(self.psd_off) < 0):
            raise ValueError("negative PSD")

    @classmethod
    def from_psds(cls, frequencies, psd_on, psd_off) -> "SpectrumReport":
        return cls(np.asarray(frequencies), np.asarray(psd_on), np.asarray(psd_off),
                   clearance(psd_on, psd_off))

    def band_clearance(self, f_lo: float, f_hi: float) -> np.ndarray:
        m = (self.frequencies >= f_lo) & (self.frequencies <= f_hi)
        return self.clearance_db[m]

    def to_json(self) -> str:
        return json.dumps({
            "frequencies_hz": self.frequencies.tolist(),
            "psd_on": self.psd_on.tolist(),
            "psd_off": self.psd_off.tolist(),
            "clearance_db": self.clearance_db.tolist(),
        })

    @classmethod
    def from_json(cls, text: str) -> "SpectrumReport":
        d = json.loads(text)
        return cls(np.asarray(d["frequencies_hz"]), np.asarray(d["psd_on"]),
                   np.asarray(d["psd_off"]), np.asarray(d["clearance_db"]))

    def to_csv(self) -> str:
        rows = ["frequency_hz,psd_on,psd_off,clearance_db"]
        for r in zip(self.frequencies, self.psd_on, self.psd_off, self.clearance_db):
            rows.append(",".join(repr(float(v)) for v in r))
        return "\n".join(rows) + "\n"


class WelchAccumulator:
    """Streaming Welch periodogram (Hann window, one-sided density)."""

    def __init__(self, segment_length: int, overlap: int, rate: float):
        if segment_length < 2 or not 0 <= overlap < segment_length:
            raise ValueError("need segment_length >= 2 and 0 <= overlap < segment_length")
        self.nseg = segment_length
        self.step = segment_length - overlap
        self.rate = rate
        self.window = signal.get_window("hann", segment_length)
        self.scale = 1.0 / (rate * np.sum(self.window ** 2))
        self.acc = np.zeros(segment_length // 2 + 1)
        self.count = 0
        self._buf = np.zeros(0)

    def push(self, x: np.ndarray) -> None:
        buf = np.concatenate([self._buf, np.asarray(x, dtype=np.float64)])
        nfull = 0 if buf.size < self.nseg else (buf.size - self.nseg) // self.step + 1
        if nfull:
            idx = np.arange(self.nseg)[None, :] + self.step * np.arange(nfull)[:, None]
            segs = buf[idx]
            segs = segs - segs.mean(axis=1, keepdims=True)
            spec = np.abs(np.fft.rfft(segs * self.window, axis=1)) ** 2
            self.acc += spec.sum(axis=0)
            self.count += nfull
        self._buf = buf[nfull * self.step:]

    def result(self) -> tuple[np.ndarray, np.ndarray]:
        if self.count == 0:
            raise ValueError("segment longer than data")
        psd = self.acc / self.count * self.scale
        if self.nseg % 2 == 0:
            psd[1:-1] *= 2
        else:
            psd[1:] *= 2
        return np.fft.rfftfreq(self.nseg, 1.0 / self.rate), psd


def estimate_psd(blocks: Iterable, segment_length: int = 4096, overlap: int | None = None,
                 channel: str = "q", rate: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Welch PSD of one channel of a block stream (volts^2/Hz, one-sided).

    Accepts SampleBlock, ConditionedBlock, or raw arrays (then ``rate`` is
    required).
    """
    if overlap is None:
        overlap = segment_length // 2
    acc = None
    for b in blocks:
        if isinstance(b, SampleBlock):
            x, r = b.volts(channel), b.sample_rate
        elif isinstance(b, ConditionedBlock):
            x, r = b.channel(channel), b.sample_rate
        else:
            x, r = np.asarray(b, dtype=np.float64), rate
        if r is None:
            raise ValueError("rate required for raw arrays")
        if acc is None:
            acc = WelchAccumulator(segment_length, overlap, r)
        acc.push(x)
    if acc is None:
        raise ValueError("segment longer than data")
    return acc.result()


def clearance(psd_on, psd_off) -> np.ndarray:
    """Elementwise ``10 log10(psd_on / psd_off)``."""
    on = np.asarray(psd_on, dtype=np.float64)
    off = np.asarray(psd_off, dtype=np.float64)
    if on.shape != off.shape:
        raise ValueError("PSD arrays differ in length")
    if np.any(on <= 0) or np.any(off <= 0):
        raise ValueError("zero or negative PSD bin")
    return 10.0 * np.log10(on / off)


def autocorrelation(x: np.ndarray, max_lag: int) -> np.ndarray:
    """Normalized autocorrelation at lags ``1..max_lag``."""
    x = np.asarray(x, dtype=np.float64) - np.mean(x)
    n = x.size
    f = np.fft.rfft(x, 1 << int(math.ceil(math.log2(2 * n))))
    r = np.fft.irfft(np.abs(f) ** 2)[:max_lag + 1]
    return r[1:] / r[0]
