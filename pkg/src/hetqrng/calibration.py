"""LO power sweep, variance-vs-power fit and vacuum-unit conversion.

At LO power ``P`` the conditioned variance of channel ``c`` is
``slope_c * P + intercept_c``; the shot-noise part ``slope_c * P`` is one
vacuum unit of variance (1/2), so a conditioned voltage converts as
``x_vu = x / sqrt(2 * slope_c * P)`` and the record's quantization step
``effective_resolution`` becomes the phase-space resolution
``delta_c(P) = effective_resolution / sqrt(2 * slope_c * P)``.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np

from . import dsp
from .capture import read_capture
from .provenance import parse_time, utc_now
from .source import CHANNELS, SourceParams, pole_taps, stream

SATURATION_LIMIT = 1e-3
MIN_R_SQUARED = 0.99


class CalibrationError(ValueError):
    pass


class SaturationError(CalibrationError):
    pass


@dataclass(frozen=True)
class SweepPoint:
    lo_power: float
    variance_q: float
    variance_p: float
    se_q: float
    se_p: float
    sample_count: int
    lo_power_uncertainty: float = 0.0
    saturated: int = 0
    raw_samples: int = 0

    def __post_init__(self):
        if self.lo_power < 0:
            raise ValueError("lo_power must be >= 0")
        if self.variance_q < 0 or self.variance_p < 0:
            raise ValueError("variances must be >= 0")
        if self.sample_count <= 0:
            raise ValueError("sample_count must be > 0")

    def variance(self, channel: str) -> float:
        return self.variance_q if channel == "q" else self.variance_p

    def se(self, channel: str) -> float:
        return self.se_q if channel == "q" else self.se_p

    @property
    def saturation_fraction(self) -> float:
        return self.saturated / self.raw_samples if self.raw_samples else 0.0

    @classmethod
    def from_samples(cls, lo_power: float, q: np.ndarray, p: np.ndarray,
                     lo_power_uncertainty: float = 0.0) -> "SweepPoint":
        n = q.size
        vq, vp = float(np.var(q, ddof=1)), float(np.var(p, ddof=1))
        k = math.sqrt(2.0 / (n - 1))
        return cls(lo_power, vq, vp, vq * k, vp * k, n, lo_power_uncertainty)


@dataclass(frozen=True)
class CalibrationResult:
    slope_q: float
    slope_p: float
    slope_se_q: float
    slope_se_p: float
    intercept_q: float
    intercept_p: float
    intercept_se_q: float
    intercept_se_p: float
    r_squared_q: float
    r_squared_p: float
    effective_resolution: float
    reference_lo_power: float
    power_uncertainty: float = 0.0
    timestamp: str = field(default_factory=utc_now)
    config_hash: str = ""
    points: tuple = ()

    def slope(self, channel: str) -> float:
        return self.slope_q if channel == "q" else self.slope_p

    def slope_se(self, channel: str) -> float:
        return self.slope_se_q if channel == "q" else self.slope_se_p

    def intercept(self, channel: str) -> float:
        return self.intercept_q if channel == "q" else self.intercept_p

    def vu_scale(self, channel: str, lo_power: float | None = None) -> float:
        """Multiply conditioned volts by this to get vacuum units."""
        p = self.reference_lo_power if lo_power is None else lo_power
        if p <= 0:
            raise CalibrationError("vacuum units are undefined at zero LO power")
        return 1.0 / math.sqrt(2.0 * self.slope(channel) * p)

    def delta(self, channel: str, lo_power: float | None = None) -> float:
        return self.effective_resolution * self.vu_scale(channel, lo_power)

    def deltas(self, lo_power: float | None = None) -> tuple[float, float]:
        return self.delta("q", lo_power), self.delta("p", lo_power)

    @property
    def delta_q(self) -> float:
        return self.delta("q")

    @property
    def delta_p(self) -> float:
        return self.delta("p")

    def log_delta_product_sigma(self, lo_power: float | None = None) -> float:
        """Standard deviation of ``ln(delta_q * delta_p)`` (first-order).

        Slope errors enter with weight 1/2 each; the relative power
        uncertainty enters fully since both deltas scale as ``P**-1/2``.
        """
        rq = 0.5 * self.slope_se_q / self.slope_q
        rp = 0.5 * self.slope_se_p / self.slope_p
        return math.sqrt(rq * rq + rp * rp + self.power_uncertainty ** 2)

    def is_valid(self) -> bool:
        return (self.slope_q > 0 and self.slope_p > 0
                and min(self.r_squared_q, self.r_squared_p) >= MIN_R_SQUARED)

    def age_seconds(self, now: datetime | None = None) -> float:
        now = now or datetime.now(timezone.utc)
        return (now - parse_time(self.timestamp)).total_seconds()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["points"] = [dict(p) if isinstance(p, Mapping) else asdict(p) for p in self.points]
        d["delta_q"] = self.delta_q
        d["delta_p"] = self.delta_p
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationResult":
        d = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        d["points"] = tuple(SweepPoint(**p) for p in d.get("points", ()))
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "CalibrationResult":
        return cls.from_dict(json.loads(text))

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "CalibrationResult":
        with open(path) as fh:
            return cls.from_json(fh.read())


# --------------------------------------------------------------------------
# sources of conditioned samples at a commanded LO power

class SweepSource(Protocol):
    effective_resolution: float

    def measure(self, lo_power: float, samples: int, index: int) -> Iterable[dsp.ConditionedBlock]:
        ...

    def power_uncertainty(self, lo_power: float) -> float:
        ...


def _point_seed(seed: int, index: int) -> int:
    ss = np.random.SeedSequence(int(seed) & ((1 << 64) - 1), spawn_key=(1000 + index,))
    return int(ss.generate_state(1, np.uint64)[0])


class PipelineSource:
    """Full chain: synthetic ADC stream through the conditioner.

    Each sweep point uses an independent seed derived from ``params.seed``
    and the point index. The first ``settle_samples`` conditioned outputs
    (filter start-up) are dropped.
    """

    def __init__(self, params: SourceParams, cfg: dsp.DspConfig, block_size: int = 1 << 20,
                 relative_power_uncertainty: float = 0.0):
        self.params = params
        self.cfg = cfg
        self.block_size = block_size
        self.relative_power_uncertainty = relative_power_uncertainty
        probe = dsp.Conditioner(cfg, params.adc_rate, params.lsb)
        self.effective_resolution = probe.effective_resolution
        self.settle = probe.settle_samples
        self.ratio = params.adc_rate / cfg.output_rate

    def measure(self, lo_power: float, samples: int, index: int = 0):
        params = replace(self.params.with_power(lo_power), seed=_point_seed(self.params.seed, index))
        cond = dsp.Conditioner(self.cfg, params.adc_rate, params.lsb)
        raw = int(math.ceil((samples + self.settle + 1) * self.ratio))
        skip = self.settle
        left = samples
        for blk in stream(params, raw, self.block_size):
            out = cond.push(blk)
            q, p = out.channel_q[skip:], out.channel_p[skip:]
            skip = max(0, skip - len(out))
            q, p = q[:left], p[:left]
            left -= q.size
            if q.size:
                yield replace(out, channel_q=q, channel_p=p)
            if left == 0:
                return

    def power_uncertainty(self, lo_power: float) -> float:
        return self.relative_power_uncertainty * lo_power

    def true_slope(self, channel: str) -> float:
        """Ground-truth slope of conditioned variance vs LO power."""
        g = dsp.noise_gain(self.cfg, self.params.adc_rate,
                           pole_taps(self.params.analog_bandwidth, self.params.adc_rate))
        return g * self.params.shot_slope(channel)

    def true_intercept(self, channel: str) -> float:
        """Electronic noise plus ADC quantization noise, conditioned."""
        rate = self.params.adc_rate
        g = dsp.noise_gain(self.cfg, rate, pole_taps(self.params.analog_bandwidth, rate))
        g_white = dsp.noise_gain(self.cfg, rate)
        return g * self.params.electronic_noise_variance + g_white * self.params.lsb ** 2 / 12


class EquivalentSource:
    """Conditioned-domain stand-in for :class:`PipelineSource`.

    Draws white Gaussian samples with the variance the full chain produces
    (``true_slope * P + true_intercept``), skipping ADC generation and
    filtering. Low-frequency tones are omitted (the chain removes them) and
    raw-domain clipping is not modelled.

    With ``sampling="moments"`` a sweep point skips the samples altogether
    and draws each sample variance from its exact law,
    ``sigma^2 * chi2(n - 1) / (n - 1)``.
    """

    def __init__(self, params: SourceParams, cfg: dsp.DspConfig, block_size: int = 1 << 16,
                 relative_power_uncertainty: float = 0.0, sampling: str = "samples"):
        if sampling not in ("samples", "moments"):
            raise ValueError(f"sampling must be 'samples' or 'moments', got {sampling!r}")
        ref = PipelineSource(params, cfg)
        self.params = params
        self.cfg = cfg
        self.block_size = block_size
        self.sampling = sampling
        self.relative_power_uncertainty = relative_power_uncertainty
        self.effective_resolution = ref.effective_resolution
        self._slope = {c: ref.true_slope(c) for c in CHANNELS}
        self._intercept = {c: ref.true_intercept(c) for c in CHANNELS}

    def true_slope(self, channel: str) -> float:
        return self._slope[channel]

    def true_intercept(self, channel: str) -> float:
        return self._intercept[channel]

    def measure(self, lo_power: float, samples: int, index: int = 0):
        rng = np.random.Generator(np.random.PCG64(_point_seed(self.params.seed, index)))
        sq = math.sqrt(self._slope["q"] * lo_power + self._intercept["q"])
        sp = math.sqrt(self._slope["p"] * lo_power + self._intercept["p"])
        done = 0
        while done < samples:
            n = min(self.block_size, samples - done)
            q = rng.standard_normal(n)
            q *= sq
            p = rng.standard_normal(n)
            p *= sp
            yield dsp.ConditionedBlock(q, p, self.cfg.output_rate, self.effective_resolution, done)
            done += n

    def sample_variances(self, lo_power: float, samples: int, index: int = 0
                         ) -> tuple[float, float] | None:
        """Sample variances drawn from their sampling law, or None in sample mode."""
        if self.sampling != "moments":
            return None
        rng = np.random.Generator(np.random.PCG64(_point_seed(self.params.seed, index)))
        dof = samples - 1
        return tuple(float((self._slope[c] * lo_power + self._intercept[c]) * rng.chisquare(dof) / dof)
                     for c in CHANNELS)

    def power_uncertainty(self, lo_power: float) -> float:
        return self.relative_power_uncertainty * lo_power


class CaptureSource:
    """Sweep backed by recorded QRAW captures, one file per LO power."""

    def __init__(self, captures: Mapping[float, str | os.PathLike], cfg: dsp.DspConfig,
                 relative_power_uncertainty: float = 0.0):
        if not captures:
            raise CalibrationError("no captures")
        self.captures = {float(k): v for k, v in captures.items()}
        self.cfg = cfg
        self.relative_power_uncertainty = relative_power_uncertainty
        first = next(read_capture(next(iter(self.captures.values())), 1))
        probe = dsp.Conditioner(cfg, first.sample_rate, first.lsb)
        self.effective_resolution = probe.effective_resolution
        self.settle = probe.settle_samples

    def measure(self, lo_power: float, samples: int, index: int = 0):
        if float(lo_power) not in self.captures:
            raise CalibrationError(f"no capture recorded at {lo_power} W")
        skip, left = self.settle, samples
        for out in dsp.condition(read_capture(self.captures[float(lo_power)]), self.cfg):
            q, p = out.channel_q[skip:][:left], out.channel_p[skip:][:left]
            skip = max(0, skip - len(out))
            left -= q.size
            if q.size:
                yield replace(out, channel_q=q, channel_p=p)
            if left == 0:
                return
        if left:
            raise CalibrationError(f"capture at {lo_power} W holds fewer than {samples} "
                                   "conditioned samples")

    def power_uncertainty(self, lo_power: float) -> float:
        return self.relative_power_uncertainty * lo_power


# --------------------------------------------------------------------------
# sweep and fit

class _Moments:
    """Streaming mean/variance (pairwise merge of block moments)."""

    def __init__(self):
        self.n = 0
        self.mean = 0.0
        self.m2 = 0.0

    def push(self, x: np.ndarray) -> None:
        nb = x.size
        if nb == 0:
            return
        mb = float(np.mean(x))
        d = x - mb
        m2b = float(np.dot(d, d))
        n = self.n + nb
        d = mb - self.mean
        self.mean += d * nb / n
        self.m2 += m2b + d * d * self.n * nb / n
        self.n = n

    @property
    def variance(self) -> float:
        return self.m2 / (self.n - 1)


def check_power_grid(powers: Sequence[float]) -> None:
    distinct = sorted(set(float(p) for p in powers))
    if any(p < 0 for p in distinct):
        raise CalibrationError("LO powers must be >= 0")
    if len(distinct) < 3 or 0.0 not in distinct:
        raise CalibrationError("insufficient distinct powers: need >= 3 including 0")


def measure_point(source: SweepSource, lo_power: float, samples: int,
                  index: int = 0) -> SweepPoint:
    direct = getattr(source, "sample_variances", None)
    drawn = direct(lo_power, samples, index) if direct is not None else None
    if drawn is not None:
        k = math.sqrt(2.0 / (samples - 1))
        vq, vp = drawn
        return SweepPoint(float(lo_power), vq, vp, vq * k, vp * k, samples,
                          float(source.power_uncertainty(lo_power)))
    mq, mp = _Moments(), _Moments()
    sat = raw = 0
    for blk in source.measure(lo_power, samples, index):
        mq.push(blk.channel_q)
        mp.push(blk.channel_p)
        sat += blk.saturated
        raw += blk.raw_samples
    if mq.n < 2:
        raise CalibrationError("too few samples for a variance")
    k = math.sqrt(2.0 / (mq.n - 1))
    vq, vp = mq.variance, mp.variance
    return SweepPoint(float(lo_power), vq, vp, vq * k, vp * k, mq.n,
                      float(source.power_uncertainty(lo_power)), sat, raw)


def run_sweep(source: SweepSource, powers: Sequence[float], samples_per_point: int) -> list[SweepPoint]:
    """Measure conditioned variances at each LO power.

    Raises SaturationError when any point has at least 0.1% of its raw
    samples on the extreme ADC codes.
    """
    check_power_grid(powers)
    if samples_per_point < 2:
        raise CalibrationError("samples_per_point must be >= 2")
    points = []
    for i, pw in enumerate(powers):
        pt = measure_point(source, pw, samples_per_point, i)
        if pt.saturation_fraction >= SATURATION_LIMIT:
            raise SaturationError(
                f"saturation at {pw * 1e3:.3g} mW: {pt.saturation_fraction:.3%} of samples "
                "on extreme codes")
        points.append(pt)
    return points


@dataclass(frozen=True)
class LineFit:
    slope: float
    intercept: float
    slope_se: float
    intercept_se: float
    r_squared: float
    chi2_reduced: float
    residuals: np.ndarray


def weighted_line_fit(x: np.ndarray, y: np.ndarray, y_se: np.ndarray,
                      x_se: np.ndarray | None = None) -> LineFit:
    """Weighted least squares line with known standard errors.

    Abscissa errors are folded into effective ordinate variances
    ``y_se**2 + (slope * x_se)**2`` (two refinement passes). Parameter
    errors come from the unscaled covariance ``(X' W X)^-1``. When every
    ``y_se`` is zero the fit is ordinary least squares with residual-scaled
    errors.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    y_se = np.asarray(y_se, dtype=np.float64)
    X = np.column_stack([x, np.ones_like(x)])
    ols = not np.any(y_se > 0)
    if not ols and np.any(y_se <= 0):
        raise CalibrationError("standard errors must all be positive")
    var = np.ones_like(y) if ols else y_se ** 2
    slope = 0.0
    for _ in range(3 if (x_se is not None and not ols) else 1):
        v = var + (slope * np.asarray(x_se)) ** 2 if (x_se is not None and not ols) else var
        w = 1.0 / v
        a = X.T @ (X * w[:, None])
        beta = np.linalg.solve(a, X.T @ (w * y))
        slope = beta[0]
    cov = np.linalg.inv(a)
    res = y - X @ beta
    dof = max(1, x.size - 2)
    chi2 = float(np.sum(w * res ** 2) / dof)
    if ols:
        cov = cov * chi2
    ybar = np.sum(w * y) / np.sum(w)
    ss_tot = float(np.sum(w * (y - ybar) ** 2))
    ss_res = float(np.sum(w * res ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return LineFit(float(beta[0]), float(beta[1]), float(math.sqrt(cov[0, 0])),
                   float(math.sqrt(cov[1, 1])), r2, chi2, res)


def fit(points: Sequence[SweepPoint], effective_resolution: float,
        reference_lo_power: float | None = None, config_hash: str = "",
        enforce_gates: bool = True) -> CalibrationResult:
    """Per-channel weighted line fit of variance against LO power.

    ``reference_lo_power`` defaults to the largest swept power. With
    ``enforce_gates`` a non-positive slope or R^2 below 0.99 raises
    CalibrationError.
    """
    points = list(points)
    powers = np.array([p.lo_power for p in points])
    if len(points) < 3 or np.unique(powers[powers > 0]).size < 2:
        raise CalibrationError("insufficient distinct powers: need >= 3 points with "
                               ">= 2 distinct nonzero powers")
    if effective_resolution <= 0:
        raise CalibrationError("effective_resolution must be > 0")
    x_se = np.array([p.lo_power_uncertainty for p in points])
    fits = {}
    for c in CHANNELS:
        y = np.array([p.variance(c) for p in points])
        se = np.array([p.se(c) for p in points])
        fits[c] = weighted_line_fit(powers, y, se, x_se if np.any(x_se > 0) else None)
        if enforce_gates:
            if fits[c].slope <= 0:
                raise CalibrationError(f"non-positive slope on channel {c}")
            if fits[c].r_squared < MIN_R_SQUARED:
                raise CalibrationError(
                    f"poor linearity on channel {c}: R^2 = {fits[c].r_squared:.4f} < "
                    f"{MIN_R_SQUARED}")
    ref = float(powers.max()) if reference_lo_power is None else float(reference_lo_power)
    ref_idx = int(np.argmin(np.abs(powers - ref)))
    rel_pu = float(x_se[ref_idx] / ref) if ref > 0 and powers[ref_idx] == ref else 0.0
    fq, fp = fits["q"], fits["p"]
    return CalibrationResult(
        fq.slope, fp.slope, fq.slope_se, fp.slope_se, fq.intercept, fp.intercept,
        fq.intercept_se, fp.intercept_se, fq.r_squared, fp.r_squared,
        float(effective_resolution), ref, rel_pu, config_hash=config_hash,
        points=tuple(points))


def effective_resolution(cfg: dsp.DspConfig, params: SourceParams,
                         probe_length: int = 1 << 16) -> float:
    """Quantization step of the conditioned record, in volts.

    The ADC LSB times the chain's measured gain: a one-LSB tone at the band
    center is pushed through a fresh conditioner and its output amplitude
    read off a single DFT bin.
    """
    cond = dsp.Conditioner(cfg, params.adc_rate, params.lsb)
    # tone frequency on the output DFT grid so the bin read is exact
    n_out = probe_length // 2
    f_out_target = abs(cfg.mix_frequency - cfg.band_center)
    k = round(f_out_target / cfg.output_rate * n_out)
    f_out = k * cfg.output_rate / n_out
    f_in = cfg.mix_frequency - f_out if cfg.mix_frequency > cfg.band_center else cfg.mix_frequency + f_out
    total = cond.settle_samples + n_out + 1
    raw = int(math.ceil(total * params.adc_rate / cfg.output_rate))
    n = np.arange(raw)
    tone = params.lsb * np.cos(2 * math.pi * f_in / params.adc_rate * n)
    out = cond.push_arrays(tone, tone, 0).channel_q
    seg = out[cond.settle_samples:cond.settle_samples + n_out]
    amp = 2.0 * abs(np.fft.rfft(seg)[k]) / n_out
    return float(amp)
