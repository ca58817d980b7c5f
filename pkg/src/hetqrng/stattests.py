"""Statistical test battery for extracted bits.

Eight tests following their published definitions (NIST SP 800-22 rev. 1a):
Frequency, BlockFrequency, CumulativeSums (forward and backward),
Runs, LongestRun, DFT, ApproximateEntropy and Serial (two p-values).

Inputs longer than ``sequence_length`` are cut into sequences of that
length; each test then reports the uniformity p-value of its per-sequence
p-values (chi-square over ten bins, nine degrees of freedom) and records
the pass proportion in ``parameters``.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from ._special import erfc, igamc, normal_cdf


@dataclass(frozen=True)
class TestResult:
    __test__ = False  # not a pytest class

    test_name: str
    p_value: float
    passed: bool
    bits_tested: int
    parameters: dict = field(default_factory=dict)
    skipped: bool = False
    reason: str = ""

    def __post_init__(self):
        if not 0.0 <= self.p_value <= 1.0:
            raise ValueError(f"p-value {self.p_value} outside [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class BatteryConfig:
    significance: float = 0.01
    sequence_length: int = 10**6
    block_frequency_m: int = 128
    approximate_entropy_m: int = 10
    serial_m: int = 16
    min_bits: int = 10**6
    min_sequences_for_uniformity: int = 10
    tests: tuple[str, ...] = ("Frequency", "BlockFrequency", "CumulativeSums", "Runs",
                              "LongestRun", "DFT", "ApproximateEntropy", "Serial")


class InsufficientBits(ValueError):
    pass


def as_bits(data, bitorder: str = "little") -> np.ndarray:
    """0/1 uint8 array from a 0/1 array, a packed byte array or ``bytes``."""
    if isinstance(data, (bytes, bytearray, memoryview)):
        return np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder=bitorder)
    a = np.asarray(data)
    if a.dtype == np.bool_:
        return a.astype(np.uint8)
    if a.size and a.max() > 1:
        raise ValueError("expected 0/1 bits; pass bytes for packed data")
    return a.astype(np.uint8, copy=False)


def bits_from_string(s: str) -> np.ndarray:
    return np.frombuffer("".join(s.split()).encode(), dtype=np.uint8) - ord("0")


# --------------------------------------------------------------------------
# individual tests; each returns (p_value or tuple of p_values, parameters)

def frequency(x: np.ndarray) -> tuple[float, dict]:
    n = x.size
    s = 2 * int(np.count_nonzero(x)) - n
    s_obs = abs(s) / math.sqrt(n)
    return erfc(s_obs / math.sqrt(2.0)), {"S_n": s, "s_obs": s_obs}


def block_frequency(x: np.ndarray, m: int = 128) -> tuple[float, dict]:
    n_blocks = x.size // m
    if n_blocks < 1:
        raise InsufficientBits(f"need at least one block of {m} bits")
    pi = x[:n_blocks * m].reshape(n_blocks, m).sum(axis=1) / m
    chi2 = 4.0 * m * float(np.sum((pi - 0.5) ** 2))
    return igamc(n_blocks / 2.0, chi2 / 2.0), {"M": m, "N": n_blocks, "chi2": chi2}


def cumulative_sums(x: np.ndarray, reverse: bool = False) -> tuple[float, dict]:
    n = x.size
    steps = 2 * x.astype(np.int64) - 1
    if reverse:
        steps = steps[::-1]
    z = int(np.max(np.abs(np.cumsum(steps))))
    sq = math.sqrt(n)
    s1 = 0.0
    # k runs over the integers inside the real-valued summation limits
    for k in range(math.ceil((-n / z + 1) / 4), math.floor((n / z - 1) / 4) + 1):
        s1 += normal_cdf((4 * k + 1) * z / sq) - normal_cdf((4 * k - 1) * z / sq)
    s2 = 0.0
    for k in range(math.ceil((-n / z - 3) / 4), math.floor((n / z - 1) / 4) + 1):
        s2 += normal_cdf((4 * k + 3) * z / sq) - normal_cdf((4 * k + 1) * z / sq)
    p = 1.0 - s1 + s2
    return min(1.0, max(0.0, p)), {"z": z, "mode": "backward" if reverse else "forward"}


def runs(x: np.ndarray) -> tuple[float, dict]:
    n = x.size
    pi = float(np.count_nonzero(x)) / n
    if abs(pi - 0.5) >= 2.0 / math.sqrt(n):
        # frequency prerequisite fails; the runs statistic is not applicable
        return 0.0, {"pi": pi, "V_n": None, "prerequisite": "failed"}
    v = 1 + int(np.count_nonzero(x[1:] != x[:-1]))
    num = abs(v - 2.0 * n * pi * (1.0 - pi))
    den = 2.0 * math.sqrt(2.0 * n) * pi * (1.0 - pi)
    return erfc(num / den), {"pi": pi, "V_n": v}


_LONGEST_RUN_TABLES = {
    8: (3, 1, (0.2148, 0.3672, 0.2305, 0.1875)),
    128: (5, 4, (0.1174, 0.2430, 0.2493, 0.1752, 0.1027, 0.1124)),
    10000: (6, 10, (0.0882, 0.2092, 0.2483, 0.1933, 0.1208, 0.0675, 0.0727)),
}


def _longest_runs(blocks: np.ndarray) -> np.ndarray:
    nb, m = blocks.shape
    padded = np.zeros((nb, m + 2), dtype=np.int8)
    padded[:, 1:-1] = blocks
    d = np.diff(padded.ravel())
    starts = np.flatnonzero(d == 1)
    ends = np.flatnonzero(d == -1)
    out = np.zeros(nb, dtype=np.int64)
    if starts.size:
        np.maximum.at(out, starts // (m + 2), ends - starts)
    return out


def longest_run(x: np.ndarray) -> tuple[float, dict]:
    n = x.size
    if n < 128:
        raise InsufficientBits("LongestRun needs at least 128 bits")
    m = 8 if n < 6272 else (128 if n < 750000 else 10000)
    k, v_lo, pis = _LONGEST_RUN_TABLES[m]
    n_blocks = n // m
    longest = _longest_runs(x[:n_blocks * m].reshape(n_blocks, m))
    cls = np.clip(longest, v_lo, v_lo + k) - v_lo
    counts = np.bincount(cls, minlength=k + 1)
    exp = n_blocks * np.asarray(pis)
    chi2 = float(np.sum((counts - exp) ** 2 / exp))
    return igamc(k / 2.0, chi2 / 2.0), {"M": m, "N": n_blocks, "chi2": chi2,
                                         "counts": counts.tolist()}


def dft(x: np.ndarray) -> tuple[float, dict]:
    n = x.size
    mags = np.abs(np.fft.rfft(2.0 * x - 1.0))[:n // 2]
    t = math.sqrt(math.log(1.0 / 0.05) * n)
    n0 = 0.95 * n / 2.0
    n1 = int(np.count_nonzero(mags < t))
    d = (n1 - n0) / math.sqrt(n * 0.95 * 0.05 / 4.0)
    return erfc(abs(d) / math.sqrt(2.0)), {"N0": n0, "N1": n1, "d": d}


def _pattern_counts(x: np.ndarray, m: int) -> np.ndarray:
    """Counts of the ``2**m`` overlapping m-bit patterns, sequence wrapped."""
    n = x.size
    if m == 0:
        return np.array([n], dtype=np.int64)
    ext = np.concatenate([x, x[:m - 1]]).astype(np.int64)
    v = np.zeros(n, dtype=np.int64)
    for j in range(m):
        v = (v << 1) | ext[j:j + n]
    return np.bincount(v, minlength=1 << m)


def _phi(x: np.ndarray, m: int) -> float:
    c = _pattern_counts(x, m)
    c = c[c > 0] / x.size
    return float(np.sum(c * np.log(c)))


def approximate_entropy(x: np.ndarray, m: int = 10) -> tuple[float, dict]:
    n = x.size
    apen = _phi(x, m) - _phi(x, m + 1)
    chi2 = 2.0 * n * (math.log(2.0) - apen)
    return igamc(2.0 ** (m - 1), chi2 / 2.0), {"m": m, "ApEn": apen, "chi2": chi2}


def _psi2(x: np.ndarray, m: int) -> float:
    if m <= 0:
        return 0.0
    c = _pattern_counts(x, m).astype(np.float64)
    n = x.size
    return (2.0 ** m / n) * float(np.sum(c * c)) - n


def serial(x: np.ndarray, m: int = 16) -> tuple[tuple[float, float], dict]:
    if m < 2:
        raise ValueError("serial test needs m >= 2")
    p0, p1, p2 = _psi2(x, m), _psi2(x, m - 1), _psi2(x, m - 2)
    d1 = p0 - p1
    d2 = p0 - 2.0 * p1 + p2
    pv1 = igamc(2.0 ** (m - 2), d1 / 2.0)
    pv2 = igamc(2.0 ** (m - 3), d2 / 2.0) if m >= 3 else erfc(math.sqrt(max(d2, 0.0) / 2.0))
    return (pv1, pv2), {"m": m, "del_psi2": d1, "del2_psi2": d2}


# --------------------------------------------------------------------------
# battery

@dataclass(frozen=True)
class _Spec:
    name: str
    fn: Callable
    min_bits: Callable[[BatteryConfig], int]
    outputs: tuple[str, ...]


def _min_apen(cfg: BatteryConfig) -> int:
    # m < floor(log2 n) - 5
    return 1 << (cfg.approximate_entropy_m + 6)


def _min_serial(cfg: BatteryConfig) -> int:
    # m < floor(log2 n) - 2
    return 1 << (cfg.serial_m + 3)


def _cusum_both(x, c):
    pf, a = cumulative_sums(x, False)
    pb, b = cumulative_sums(x, True)
    return (pf, pb), {"z_forward": a["z"], "z_backward": b["z"]}


_SPECS = {
    "Frequency": _Spec("Frequency", lambda x, c: frequency(x), lambda c: 100, ("Frequency",)),
    "BlockFrequency": _Spec("BlockFrequency", lambda x, c: block_frequency(x, c.block_frequency_m),
                            lambda c: max(100, c.block_frequency_m), ("BlockFrequency",)),
    "CumulativeSums": _Spec("CumulativeSums", _cusum_both, lambda c: 100,
                            ("CumulativeSums (forward)", "CumulativeSums (backward)")),
    "Runs": _Spec("Runs", lambda x, c: runs(x), lambda c: 100, ("Runs",)),
    "LongestRun": _Spec("LongestRun", lambda x, c: longest_run(x), lambda c: 128, ("LongestRun",)),
    "DFT": _Spec("DFT", lambda x, c: dft(x), lambda c: 1000, ("DFT",)),
    "ApproximateEntropy": _Spec("ApproximateEntropy",
                                lambda x, c: approximate_entropy(x, c.approximate_entropy_m),
                                _min_apen, ("ApproximateEntropy",)),
    "Serial": _Spec("Serial", lambda x, c: serial(x, c.serial_m), _min_serial,
                    ("Serial (1)", "Serial (2)")),
}


def _as_tuple(p) -> tuple[float, ...]:
    return tuple(p) if isinstance(p, tuple) else (p,)


def uniformity_p_value(p_values: Sequence[float]) -> float:
    """Chi-square uniformity of p-values over ten equal bins (9 d.o.f.)."""
    p = np.asarray(p_values, dtype=np.float64)
    s = p.size
    counts = np.bincount(np.minimum((p * 10).astype(int), 9), minlength=10)
    exp = s / 10.0
    chi2 = float(np.sum((counts - exp) ** 2) / exp)
    return igamc(4.5, chi2 / 2.0)


def proportion_interval(alpha: float, s: int) -> tuple[float, float]:
    p = 1.0 - alpha
    half = 3.0 * math.sqrt(p * (1.0 - p) / s)
    return p - half, p + half


def _run_single(spec: _Spec, seqs: list[np.ndarray], cfg: BatteryConfig, total_bits: int
                ) -> list[TestResult]:
    per = [[] for _ in spec.outputs]
    params0 = {}
    for i, seq in enumerate(seqs):
        p, params = spec.fn(seq, cfg)
        if i == 0:
            params0 = params
        for j, v in enumerate(_as_tuple(p)):
            per[j].append(float(v))
    results = []
    for name, ps in zip(spec.outputs, per):
        if len(ps) == 1:
            pv = ps[0]
            params = dict(params0)
            params["sequences"] = 1
        else:
            pv = uniformity_p_value(ps)
            lo, hi = proportion_interval(cfg.significance, len(ps))
            prop = float(np.mean(np.asarray(ps) >= cfg.significance))
            params = {"sequences": len(ps), "sequence_length": seqs[0].size,
                      "proportion": prop, "proportion_interval": [lo, hi],
                      "proportion_ok": lo <= prop <= hi + 1e-12,
                      "aggregate": "uniformity of per-sequence p-values"}
        pv = min(1.0, max(0.0, pv))
        results.append(TestResult(name, pv, pv >= cfg.significance, total_bits, params))
    return results


def run_battery(bits, config: BatteryConfig | None = None, enforce_min_bits: bool = True
                ) -> list[TestResult]:
    """Run the configured tests and return one TestResult per reported p-value.

    ``bits`` is a 0/1 array or packed bytes (LSB-first). Tests whose
    minimum length is not met are returned as skipped, with a reason.
    """
    cfg = config or BatteryConfig()
    x = as_bits(bits)
    n = x.size
    if enforce_min_bits and n < cfg.min_bits:
        raise InsufficientBits(f"battery needs at least {cfg.min_bits} bits, got {n}")
    L = cfg.sequence_length
    s = n // L
    if s >= cfg.min_sequences_for_uniformity:
        seqs = [x[i * L:(i + 1) * L] for i in range(s)]
        tested = s * L
    else:
        seqs = [x]
        tested = n
    out = []
    for name in cfg.tests:
        spec = _SPECS.get(name)
        if spec is None:
            raise ValueError(f"unknown test {name!r}")
        need = spec.min_bits(cfg)
        if seqs[0].size < need:
            for o in spec.outputs:
                out.append(TestResult(o, 0.0, False, 0, {}, skipped=True,
                                      reason=f"needs at least {need} bits per sequence"))
            continue
        try:
            out.extend(_run_single(spec, seqs, cfg, tested))
        except InsufficientBits as exc:
            for o in spec.outputs:
                out.append(TestResult(o, 0.0, False, 0, {}, skipped=True, reason=str(exc)))
    return out


@dataclass(frozen=True)
class BatterySummary:
    results: tuple[TestResult, ...]
    significance: float = 0.01

    @property
    def n_passed(self) -> int:
        return sum(1 for r in self.results if r.passed)

    @property
    def n_failed(self) -> int:
        return sum(1 for r in self.results if not r.passed and not r.skipped)

    @property
    def n_skipped(self) -> int:
        return sum(1 for r in self.results if r.skipped)

    @property
    def all_passed(self) -> bool:
        return self.n_failed == 0 and self.n_skipped == 0 and len(self.results) > 0

    def rows(self) -> list[tuple[str, str, str]]:
        out = []
        for r in self.results:
            verdict = "SKIPPED" if r.skipped else ("PASSED" if r.passed else "FAILED")
            out.append((r.test_name, "-" if r.skipped else f"{r.p_value:.6f}", verdict))
        return out

    def to_text(self) -> str:
        head = ("Test", "p-value", "Result")
        rows = [head] + self.rows()
        w = [max(len(r[i]) for r in rows) for i in range(3)]
        lines = [f"{r[0]:<{w[0]}}  {r[1]:>{w[1]}}  {r[2]:<{w[2]}}".rstrip() for r in rows]
        lines.insert(1, "-" * (w[0] + w[1] + w[2] + 4))
        lines.append(f"{self.n_passed}/{len(self.results)} passed at alpha = {self.significance}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {"significance": self.significance, "passed": self.n_passed,
                "failed": self.n_failed, "skipped": self.n_skipped,
                "all_passed": self.all_passed,
                "results": [r.to_dict() for r in self.results]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def p_value_summary(results: Sequence[TestResult], significance: float = 0.01) -> BatterySummary:
    if not results:
        raise ValueError("no results to summarize")
    return BatterySummary(tuple(results), significance)


def export_ascii(bits, path: str | os.PathLike, line_length: int = 0) -> int:
    """Write bits as ASCII '0'/'1' characters; returns the bit count."""
    x = as_bits(bits)
    chars = (x + ord("0")).astype(np.uint8).tobytes()
    with open(path, "wb") as fh:
        if line_length:
            for i in range(0, len(chars), line_length):
                fh.write(chars[i:i + line_length] + b"\n")
        else:
            fh.write(chars)
    return int(x.size)
