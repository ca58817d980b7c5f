"""Min-entropy certification, Gaussian-state purity and secure rate.

For a heterodyne record binned on a phase-space grid of pitch
``(delta_q, delta_p)`` in vacuum units, the adversary's guessing
probability of the joint outcome is at most ``delta_q * delta_p / pi``
whatever the state, which gives the certified conditional min-entropy
``-log2(delta_q * delta_p / pi)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Iterator

import numpy as np

from .calibration import CalibrationResult
from .dsp import ConditionedBlock
from .source import code_limits

VACUUM_VARIANCE = 0.5
MIN_PAIRS = 10**6
MIN_MODAL_COUNT = 100
CERTIFY_SIGMAS = 3.0


class EntropyError(ValueError):
    pass


def h_min_conditional(delta_q: float, delta_p: float) -> float:
    """``-log2(delta_q * delta_p / pi)`` clamped below at 0 (bits per pair)."""
    if delta_q <= 0 or delta_p <= 0:
        raise EntropyError("phase-space resolutions must be > 0")
    return max(0.0, -math.log2(delta_q * delta_p / math.pi))


def certified_h_min(calibration: CalibrationResult, lo_power: float | None = None,
                    sigmas: float = CERTIFY_SIGMAS) -> tuple[float, float, float]:
    """``(h, sigma_h, h - sigmas * sigma_h)`` at ``lo_power``, the last clamped at 0."""
    dq, dp = calibration.deltas(lo_power)
    h = h_min_conditional(dq, dp)
    sigma = calibration.log_delta_product_sigma(lo_power) / math.log(2.0) if h > 0 else 0.0
    return h, sigma, max(0.0, h - sigmas * sigma)


def secure_rate(h_min: float, raw_rate: float) -> float:
    """Secure generation rate in bits/s for ``raw_rate`` sample pairs per second."""
    if h_min < 0:
        raise EntropyError("h_min must be >= 0")
    return h_min * raw_rate


def ratio_rule_rate(output_bits: int, input_bits: int, bits_per_sample: int,
                    raw_rate: float) -> float:
    """Output bit rate of a hash keeping ``output_bits / input_bits`` of a record
    that carries ``2 * bits_per_sample`` bits per pair at ``raw_rate`` pairs/s."""
    if output_bits <= 0 or input_bits <= 0 or bits_per_sample <= 0 or raw_rate < 0:
        raise EntropyError("sizes must be > 0 and raw_rate >= 0")
    return output_bits / input_bits * 2 * bits_per_sample * raw_rate


def min_entropy(probabilities: np.ndarray) -> float:
    """``-log2(max p)`` of an explicit distribution."""
    p = np.asarray(probabilities, dtype=np.float64)
    total = p.sum()
    if total <= 0:
        raise EntropyError("empty distribution")
    return -math.log2(p.max() / total)


def _phi(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def gaussian_max_bin_mass(mean: float, sigma: float, pitch: float) -> float:
    """Largest probability of a pitch-wide bin centered on a grid point."""
    if sigma <= 0:
        return 1.0
    k0 = round(mean / pitch)
    best = 0.0
    for k in (k0 - 1, k0, k0 + 1):
        lo = (k * pitch - 0.5 * pitch - mean) / sigma
        hi = (k * pitch + 0.5 * pitch - mean) / sigma
        best = max(best, _phi(hi) - _phi(lo))
    return best


@dataclass(frozen=True)
class ClassicalEstimate:
    h_min: float
    modal_count: int
    sample_pairs: int
    method: str
    mean_q: float
    mean_p: float
    variance_q: float
    variance_p: float


class _JointHistogram:
    def __init__(self, bits: int):
        self.lo, self.hi = code_limits(bits)
        self.width = self.hi - self.lo + 1
        self.counts = np.zeros(self.width * self.width, dtype=np.int64)
        self.n = 0
        self.sums = np.zeros(2)
        self.sumsq = np.zeros(2)
        self._shift = None

    def push(self, q: np.ndarray, p: np.ndarray, dq: float, dp: float) -> None:
        if q.size == 0:
            return
        if self._shift is None:
            self._shift = np.array([q[0], p[0]], dtype=np.float64)
        for i, x in enumerate((q, p)):
            d = x - self._shift[i]
            self.sums[i] += d.sum()
            self.sumsq[i] += (d * d).sum()
        iq = np.clip(np.rint(q / dq), self.lo, self.hi).astype(np.int64) - self.lo
        ip = np.clip(np.rint(p / dp), self.lo, self.hi).astype(np.int64) - self.lo
        self.counts += np.bincount(iq * self.width + ip, minlength=self.counts.size)
        self.n += q.size

    def moments(self) -> tuple[np.ndarray, np.ndarray]:
        m = self.sums / self.n
        var = (self.sumsq - self.n * m * m) / (self.n - 1)
        return m + self._shift, var


PEAK_RADIUS = 4
PEAK_MIN_SIGMA_BINS = 2.0


def _peak_fit(counts: np.ndarray, width: int, sigma_bins: tuple[float, float]) -> float | None:
    """Modal count from a weighted log-quadratic fit around the histogram peak.

    The plain maximum of noisy counts over a flat-topped peak is biased
    upward; fitting ``log(count)`` over a (2R+1)^2 window and reading the
    vertex removes that bias. Returns None when the peak is too narrow, sits
    on the code boundary, or the fit is not a proper maximum.
    """
    if min(sigma_bins) < PEAK_MIN_SIGMA_BINS:
        return None
    c2 = counts.reshape(width, width)
    i, j = np.unravel_index(int(np.argmax(c2)), c2.shape)
    r = PEAK_RADIUS
    if not (r <= i < width - r and r <= j < width - r):
        return None
    win = c2[i - r:i + r + 1, j - r:j + r + 1].astype(np.float64)
    if np.any(win <= 0):
        return None
    y, x = np.mgrid[-r:r + 1, -r:r + 1]
    x, y, w = x.ravel(), y.ravel(), win.ravel()
    a = np.column_stack([np.ones_like(x), x, y, x * x, y * y, x * y]).astype(np.float64)
    sw = np.sqrt(w)
    beta = np.linalg.lstsq(a * sw[:, None], np.log(w) * sw, rcond=None)[0]
    c0, bx, by, cxx, cyy, cxy = beta
    hess = np.array([[2 * cxx, cxy], [cxy, 2 * cyy]])
    if np.any(np.linalg.eigvalsh(hess) >= 0):
        return None
    g = np.array([bx, by])
    v = -np.linalg.solve(hess, g)
    if np.any(np.abs(v) > r):
        return None
    return float(math.exp(c0 + g @ v + 0.5 * v @ hess @ v))


def _pairs(samples) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    if isinstance(samples, tuple) and len(samples) == 2 and isinstance(samples[0], np.ndarray):
        yield samples
        return
    for item in samples:
        if isinstance(item, ConditionedBlock):
            yield item.channel_q, item.channel_p
        else:
            yield item


def estimate_classical(samples, delta_q: float, delta_p: float, method: str = "auto",
                       bits: int = 8, min_pairs: int = MIN_PAIRS,
                       min_modal_count: int = MIN_MODAL_COUNT) -> ClassicalEstimate:
    """Classical min-entropy of the joint (q, p) outcome on a grid of pitch (delta_q, delta_p).

    ``samples`` is a ``(q, p)`` pair of arrays or an iterable of such pairs,
    in the same units as the pitches. Outcomes are binned to signed
    ``bits``-bit codes per channel (saturating), so the joint alphabet has
    ``2 ** (2 * bits)`` symbols. ``method`` is one of

    ``"histogram"``
        the largest empirical bin frequency;
    ``"gaussian"``
        moment fit with exact bin masses, channels taken as independent;
    ``"auto"``
        the Gaussian fit when the modal bin holds fewer than
        ``min_modal_count`` counts, otherwise a log-quadratic fit of the
        histogram around its peak (peaks at least two bins wide), otherwise
        the largest bin frequency.
    """
    if delta_q <= 0 or delta_p <= 0:
        raise EntropyError("phase-space resolutions must be > 0")
    if method not in ("auto", "histogram", "gaussian"):
        raise ValueError(f"unknown method {method!r}")
    hist = _JointHistogram(bits)
    for q, p in _pairs(samples):
        hist.push(np.asarray(q, dtype=np.float64), np.asarray(p, dtype=np.float64),
                  delta_q, delta_p)
    if hist.n < max(2, min_pairs):
        raise EntropyError(f"insufficient samples: {hist.n} pairs < {min_pairs}")
    mean, var = hist.moments()
    modal = int(hist.counts.max())
    use_fit = method == "gaussian" or (method == "auto" and modal < min_modal_count)
    if use_fit:
        pmax = (gaussian_max_bin_mass(mean[0], math.sqrt(var[0]), delta_q)
                * gaussian_max_bin_mass(mean[1], math.sqrt(var[1]), delta_p))
        h, used = -math.log2(pmax), "gaussian"
    else:
        peak = None
        if method == "auto":
            sig = (math.sqrt(var[0]) / delta_q, math.sqrt(var[1]) / delta_p)
            peak = _peak_fit(hist.counts, hist.width, sig)
        if peak is not None:
            h, used = -math.log2(peak / hist.n), "peak-fit"
        else:
            h, used = -math.log2(modal / hist.n), "histogram"
    return ClassicalEstimate(h, modal, hist.n, used,
                             float(mean[0]), float(mean[1]), float(var[0]), float(var[1]))


def h_min_classical(samples, delta_q: float, delta_p: float, **kwargs) -> float:
    """Classical min-entropy in bits per pair; see :func:`estimate_classical`."""
    return estimate_classical(samples, delta_q, delta_p, **kwargs).h_min


def to_vacuum_units(blocks: Iterable[ConditionedBlock], calibration: CalibrationResult,
                    lo_power: float | None = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    sq = calibration.vu_scale("q", lo_power)
    sp = calibration.vu_scale("p", lo_power)
    for b in blocks:
        yield b.channel_q * sq, b.channel_p * sp


@dataclass(frozen=True)
class QuadratureMoments:
    variance_q: float
    variance_p: float
    mean_q: float
    mean_p: float
    variance_se_q: float
    variance_se_p: float
    sample_pairs: int

    def __iter__(self):
        return iter((self.variance_q, self.variance_p, self.mean_q, self.mean_p))


def quadrature_moments(samples, calibration: CalibrationResult | None = None,
                       lo_power: float | None = None, min_pairs: int = MIN_PAIRS) -> QuadratureMoments:
    """First and second moments of both quadratures in vacuum units.

    ``samples`` are conditioned blocks (or volt pairs) converted with
    ``calibration``; classical noise is kept.
    """
    if calibration is None:
        raise EntropyError("uncalibrated input: a CalibrationResult is required")
    sq = calibration.vu_scale("q", lo_power)
    sp = calibration.vu_scale("p", lo_power)
    n = 0
    s = np.zeros(2)
    ss = np.zeros(2)
    shift = None
    for q, p in _pairs(samples):
        q = np.asarray(q, dtype=np.float64) * sq
        p = np.asarray(p, dtype=np.float64) * sp
        if q.size == 0:
            continue
        if shift is None:
            shift = np.array([q[0], p[0]])
        dq, dp = q - shift[0], p - shift[1]
        s += (dq.sum(), dp.sum())
        ss += ((dq * dq).sum(), (dp * dp).sum())
        n += q.size
    if n < max(2, min_pairs):
        raise EntropyError(f"insufficient samples: {n} pairs < {min_pairs}")
    m = s / n
    var = (ss - n * m * m) / (n - 1)
    k = math.sqrt(2.0 / (n - 1))
    mean = m + shift
    return QuadratureMoments(float(var[0]), float(var[1]), float(mean[0]), float(mean[1]),
                             float(var[0] * k), float(var[1] * k), n)


def purity(variance_q: float, variance_p: float, se_q: float = 0.0, se_p: float = 0.0) -> float:
    """Gaussian-state purity ``1 / (2 sqrt(var_q var_p))`` in vacuum units, clamped to (0, 1].

    Raises EntropyError when a variance sits below the vacuum level by more
    than three standard errors, which points at a calibration error.
    """
    for v, se in ((variance_q, se_q), (variance_p, se_p)):
        if v <= 0 or v < VACUUM_VARIANCE - 3.0 * se:
            raise EntropyError(f"variance {v:.6g} below vacuum beyond tolerance")
    return min(1.0, 1.0 / (2.0 * math.sqrt(variance_q * variance_p)))


@dataclass(frozen=True)
class EntropyReport:
    """Certified and classical min-entropies at one LO power.

    ``h_min_conditional`` is the certified value, the point estimate minus
    three standard deviations and never above ``h_min_classical``;
    ``secure_rate`` uses it.
    """

    h_min_conditional: float
    h_min_classical: float
    entropy_loss: float
    variance_q_vu: float
    variance_p_vu: float
    purity: float
    secure_rate: float
    raw_rate: float
    lo_power: float
    h_min_estimate: float = 0.0
    h_min_sigma: float = 0.0
    delta_q: float = 0.0
    delta_p: float = 0.0
    sample_pairs: int = 0
    classical_method: str = ""
    adc_bits: int = 8

    def __post_init__(self):
        if not 0 <= self.h_min_conditional <= self.h_min_classical + 1e-12:
            raise EntropyError("need 0 <= h_min_conditional <= h_min_classical")
        if self.h_min_classical > 2 * self.adc_bits + 1e-12:
            raise EntropyError("h_min_classical exceeds the joint alphabet")
        if not 0 < self.purity <= 1:
            raise EntropyError("purity outside (0, 1]")
        if not math.isclose(self.secure_rate, self.raw_rate * self.h_min_conditional,
                            rel_tol=1e-12, abs_tol=1e-9):
            raise EntropyError("secure_rate must equal raw_rate * h_min_conditional")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "EntropyReport":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def entropy_report(blocks: Iterable[ConditionedBlock], calibration: CalibrationResult,
                   lo_power: float, raw_rate: float, bits: int = 8, method: str = "auto",
                   min_pairs: int = MIN_PAIRS) -> EntropyReport:
    """Evaluate a conditioned stream recorded at ``lo_power``.

    The stream is consumed once: blocks are converted to vacuum units and
    feed the moment estimates and the joint histogram together.
    """
    if lo_power <= 0:
        raise EntropyError("entropy is only certified at nonzero LO power")
    dq, dp = calibration.deltas(lo_power)
    h, sigma, h_cert = certified_h_min(calibration, lo_power)
    vu = to_vacuum_units(blocks, calibration, lo_power)
    cls_est = estimate_classical(vu, dq, dp, method=method, bits=bits, min_pairs=min_pairs)
    k = math.sqrt(2.0 / (cls_est.sample_pairs - 1))
    vq, vp = cls_est.variance_q, cls_est.variance_p
    mu = purity(vq, vp, vq * k, vp * k)
    h_cert = min(h_cert, cls_est.h_min)
    return EntropyReport(
        h_min_conditional=h_cert, h_min_classical=cls_est.h_min,
        entropy_loss=cls_est.h_min - h_cert, variance_q_vu=vq, variance_p_vu=vp,
        purity=mu, secure_rate=secure_rate(h_cert, raw_rate), raw_rate=raw_rate,
        lo_power=lo_power, h_min_estimate=h, h_min_sigma=sigma, delta_q=dq, delta_p=dp,
        sample_pairs=cls_est.sample_pairs, classical_method=cls_est.method, adc_bits=bits)


def render_table(reports: Iterable[EntropyReport]) -> str:
    """Aligned text table of an entropy sweep."""
    head = ("P_LO [mW]", "H_min(X|E)", "H_min(X)", "loss", "purity", "R_sc [Gbps]")
    rows = [head]
    for r in reports:
        rows.append((f"{r.lo_power * 1e3:.3f}", f"{r.h_min_conditional:.4f}",
                     f"{r.h_min_classical:.4f}", f"{r.entropy_loss:.4f}",
                     f"{r.purity:.4f}", f"{r.secure_rate / 1e9:.3f}"))
    widths = [max(len(row[i]) for row in rows) for i in range(len(head))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in rows) + "\n"
