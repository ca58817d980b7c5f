"""Command line front end: simulate, calibrate, generate, analyze, report.

Exit codes: 0 ok, 1 validation failure, 2 I/O error, 3 security gate
(certified entropy not positive, stale calibration, ADC saturation).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import calibration as cal
from . import dsp, entropy, extractor, source, stattests
from .capture import CaptureError, read_capture, write_capture
from .config import ConfigError, PipelineConfig, load

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_IO = 2
EXIT_SECURITY = 3


class CommandError(Exception):
    def __init__(self, message: str, code: int = EXIT_INVALID):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _say(msg: str = "") -> None:
    print(msg, flush=True)


def _apply_overrides(cfg: PipelineConfig, args) -> PipelineConfig:
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, source=replace(cfg.source, seed=args.seed),
                      extractor=replace(cfg.extractor, seed=args.seed))
    if getattr(args, "power", None) is not None:
        cfg = replace(cfg, source=cfg.source.with_power(args.power))
    if getattr(args, "out", None):
        cfg = replace(cfg, output_dir=args.out)
    return cfg


def _outdir(cfg: PipelineConfig) -> Path:
    d = Path(cfg.output_dir)
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CommandError(f"cannot create output directory {d}: {exc}", EXIT_IO)
    return d


def _write_text(path: Path, text: str) -> None:
    try:
        path.write_text(text)
    except OSError as exc:
        raise CommandError(f"cannot write {path}: {exc}", EXIT_IO)


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _sweep_source(cfg: PipelineConfig, mode: str):
    if cfg.captures:
        return cal.CaptureSource(cfg.captures, cfg.dsp, cfg.sweep.power_uncertainty)
    if mode == "equivalent":
        return cal.EquivalentSource(cfg.source, cfg.dsp,
                                    relative_power_uncertainty=cfg.sweep.power_uncertainty)
    return cal.PipelineSource(cfg.source, cfg.dsp, cfg.sweep.block_size,
                              cfg.sweep.power_uncertainty)


# --------------------------------------------------------------------------
# simulate

def cmd_simulate(cfg: PipelineConfig, blocks: int) -> int:
    out = _outdir(cfg) / "capture.qraw"
    n = blocks * cfg.generate.block_size
    nbytes = write_capture(out, source.stream(cfg.source, n, cfg.generate.block_size))
    _say(f"wrote {out} ({nbytes} bytes, {n} sample pairs at "
         f"{cfg.source.lo_power * 1e3:.3f} mW)")
    return EXIT_OK


# --------------------------------------------------------------------------
# calibrate

def spectrum_report(cfg: PipelineConfig) -> dsp.SpectrumReport:
    """Raw-stream PSDs at the largest sweep power and with the LO off."""
    if cfg.captures:
        powers = sorted(cfg.captures)
        on = read_capture(cfg.captures[powers[-1]])
        off = read_capture(cfg.captures[0.0]) if 0.0 in cfg.captures else None
        if off is None:
            raise CommandError("spectrum needs a capture at 0 W")
    else:
        pmax = max(cfg.sweep.powers)
        n = cfg.spectrum.samples
        on = source.stream(cfg.source.with_power(pmax), n, cfg.sweep.block_size)
        off = source.stream(cfg.source.with_power(0.0), n, cfg.sweep.block_size)
    seg = cfg.spectrum.segment_length
    f, p_on = dsp.estimate_psd(on, seg)
    _, p_off = dsp.estimate_psd(off, seg)
    keep = (p_on > 0) & (p_off > 0)
    return dsp.SpectrumReport.from_psds(f[keep], p_on[keep], p_off[keep])


def cmd_calibrate(cfg: PipelineConfig) -> int:
    out = _outdir(cfg)
    src = _sweep_source(cfg, cfg.sweep.mode)
    powers = sorted(cfg.captures) if cfg.captures else list(cfg.sweep.powers)
    _say(f"sweep: {len(powers)} powers x {cfg.sweep.samples_per_point} samples "
         f"({'captures' if cfg.captures else cfg.sweep.mode})")
    try:
        points = cal.run_sweep(src, powers, cfg.sweep.samples_per_point)
        result = cal.fit(points, src.effective_resolution, config_hash=cfg.hash)
    except cal.CalibrationError as exc:
        raise CommandError(f"calibration invalid: {exc}", EXIT_INVALID)
    cal_path = out / "calibration.json"
    _write_text(cal_path, result.to_json())
    for c in source.CHANNELS:
        _say(f"  {c}: slope {result.slope(c):.6g} +- {result.slope_se(c):.2g} V^2/W, "
             f"intercept {result.intercept(c):.6g} V^2, R^2 {getattr(result, 'r_squared_' + c):.6f}")
    h, sigma, h_cert = entropy.certified_h_min(result)
    _say(f"  delta_q {result.delta_q:.6g}  delta_p {result.delta_p:.6g} VU at "
         f"{result.reference_lo_power * 1e3:.3f} mW")
    _say(f"  H_min(X|E) = {h:.4f} +- {sigma:.4f} bit (certified {h_cert:.4f})")
    try:
        spec = spectrum_report(cfg)
    except (ValueError, CaptureError) as exc:
        raise CommandError(f"spectrum failed: {exc}", EXIT_INVALID)
    _write_text(out / "spectrum.json", spec.to_json())
    _write_text(out / "spectrum.csv", spec.to_csv())
    band = spec.band_clearance(cfg.dsp.band_low, cfg.dsp.band_high)
    centre = spec.clearance_db[np.argmin(np.abs(spec.frequencies - cfg.dsp.band_center))]
    _say(f"  clearance at max power: {centre:.2f} dB at band centre, "
         f"{band.min():.2f}..{band.max():.2f} dB over "
         f"{cfg.dsp.band_low / 1e6:.0f}-{cfg.dsp.band_high / 1e6:.0f} MHz")
    _say(f"wrote {cal_path}, {out / 'spectrum.json'}, {out / 'spectrum.csv'}")
    return EXIT_OK


# --------------------------------------------------------------------------
# generate

def load_calibration(path: Path) -> cal.CalibrationResult:
    try:
        return cal.CalibrationResult.load(path)
    except FileNotFoundError:
        raise CommandError(f"calibration not found: {path}", EXIT_IO)
    except OSError as exc:
        raise CommandError(f"cannot read calibration {path}: {exc}", EXIT_IO)
    except (ValueError, KeyError, TypeError) as exc:
        raise CommandError(f"malformed calibration {path}: {exc}", EXIT_INVALID)


def extractor_seed(cfg: PipelineConfig, length: int) -> tuple[np.ndarray, str]:
    x = cfg.extractor
    if x.seed_file:
        try:
            return extractor.read_seed_file(x.seed_file, length), f"file:{x.seed_file}"
        except OSError as exc:
            raise CommandError(f"cannot read seed file: {exc}", EXIT_IO)
        except extractor.ExtractorError as exc:
            raise CommandError(str(exc), EXIT_INVALID)
    if x.seed is not None:
        return extractor.make_seed(length, x.seed), f"derived:{x.seed}"
    return extractor.make_seed(length), "os-entropy"


def _raw_blocks(cfg: PipelineConfig):
    if cfg.generate.capture:
        return read_capture(cfg.generate.capture, cfg.generate.block_size)
    return source.stream(cfg.source, 1 << 62, cfg.generate.block_size)


def cmd_generate(cfg: PipelineConfig, calibration_path: Path, budget: int) -> int:
    out = _outdir(cfg)
    calib = load_calibration(calibration_path)
    age = calib.age_seconds()
    if age > cfg.generate.staleness_seconds:
        raise CommandError(f"stale calibration: {age:.0f} s old, limit "
                           f"{cfg.generate.staleness_seconds:.0f} s", EXIT_SECURITY)
    if budget <= 0:
        raise CommandError("byte budget must be > 0")
    params = cfg.source
    if cfg.generate.capture:
        first = next(read_capture(cfg.generate.capture, 1), None)
        if first is None:
            raise CommandError("capture is empty")
        lo_power, rate, lsb, bits = first.lo_power, first.sample_rate, first.lsb, first.adc_bits
    else:
        lo_power, rate, lsb, bits = params.lo_power, params.adc_rate, params.lsb, params.adc_bits
    cond = dsp.Conditioner(cfg.dsp, rate, lsb)
    if not math.isclose(cond.effective_resolution, calib.effective_resolution, rel_tol=1e-6):
        raise CommandError("calibration does not match the configured chain "
                           f"(effective resolution {cond.effective_resolution:.6g} V vs "
                           f"{calib.effective_resolution:.6g} V)")
    if lo_power <= 0:
        raise CommandError("no certifiable entropy with the LO off", EXIT_SECURITY)
    h, sigma, h_cert = entropy.certified_h_min(calib, lo_power)
    if h_cert <= 0:
        raise CommandError(f"certified H_min(X|E) = {h_cert:.4f} <= 0", EXIT_SECURITY)
    x = cfg.extractor
    m = x.input_bits
    n_override = x.output_bits or None
    h_pair = min(h_cert, 2.0 * bits)
    if n_override:
        n = n_override
    else:
        n = math.floor(extractor.lhl_bound(h_pair, 2 * bits, x.epsilon, m)) // 64 * 64
        if n <= 0:
            raise CommandError(f"certified H_min(X|E) = {h_cert:.4f} leaves no output at "
                               f"eps={x.epsilon:g}, m={m}", EXIT_SECURITY)
    seed_bits, seed_origin = extractor_seed(cfg, m + n - 1)
    if seed_origin == "os-entropy":
        # keep the seed so the run can be audited and replayed
        extractor.write_seed_file(out / "extractor_seed.bin", seed_bits)
        seed_origin = f"os-entropy:{out / 'extractor_seed.bin'}"
    try:
        xp = extractor.size_extractor(h_pair, 2 * bits, x.epsilon, m,
                                      seed=seed_bits, output_bits=n_override)
    except extractor.ExtractorError as exc:
        raise CommandError(str(exc), EXIT_SECURITY)
    ex = extractor.StreamExtractor(xp, bits)
    bin_path = out / "random.bin"
    written = 0
    sat = raw = 0
    skip = cond.settle_samples
    try:
        with open(bin_path, "wb") as fh:
            for blk in _raw_blocks(cfg):
                sat += blk.saturated_count()
                raw += 2 * len(blk)
                if sat >= cal.SATURATION_LIMIT * raw and raw >= 1 << 20:
                    raise CommandError(f"ADC saturation {sat / raw:.3%} invalidates the "
                                       "calibration", EXIT_SECURITY)
                cb = cond.push(blk)
                if skip:
                    k = min(skip, len(cb))
                    skip -= k
                    cb = replace(cb, channel_q=cb.channel_q[k:], channel_p=cb.channel_p[k:])
                chunk = ex.push(cb)
                take = min(len(chunk), budget - written)
                fh.write(chunk[:take])
                written += take
                if written >= budget:
                    break
    except OSError as exc:
        raise CommandError(f"cannot write {bin_path}: {exc}", EXIT_IO)
    except CommandError:
        bin_path.unlink(missing_ok=True)
        raise
    if written < budget:
        bin_path.unlink(missing_ok=True)
        raise CommandError(f"source exhausted after {written} of {budget} bytes")
    raw_rate = cfg.dsp.output_rate
    r_sc = entropy.secure_rate(h_cert, raw_rate)
    r_ratio = entropy.ratio_rule_rate(xp.output_bits, xp.input_bits, bits, raw_rate)
    sidecar = {
        "tool_version": __version__,
        "config_hash": cfg.hash,
        "calibration": {"path": str(calibration_path), "timestamp": calib.timestamp,
                        "config_hash": calib.config_hash},
        "extractor": xp.describe(),
        "params_hash": xp.params_hash,
        "seed_origin": seed_origin,
        "h_min_estimate": h,
        "h_min_sigma": sigma,
        "h_min_certified": h_cert,
        "epsilon": xp.epsilon,
        "lo_power": lo_power,
        "blocks_consumed": ex.blocks_consumed,
        "bytes": written,
        "output_sha256": _sha256_file(bin_path),
        "raw_rate": raw_rate,
        "secure_rate": r_sc,
        "ratio_rule_rate": r_ratio,
        "saturation_fraction": sat / raw if raw else 0.0,
        "bit_order": "lsb-first",
    }
    if xp.lhl_deficit:
        sidecar["warning"] = (f"output_bits {xp.output_bits} exceeds the leftover-hash bound "
                              f"{xp.lhl_max_output} by {xp.lhl_deficit} bits")
    _write_text(out / "random.json", json.dumps(sidecar, indent=2))
    _say(f"extractor m={xp.input_bits} n={xp.output_bits} eps={xp.epsilon:g} "
         f"(leftover-hash max {xp.lhl_max_output}, deficit {xp.lhl_deficit})")
    _say(f"H_min(X|E) certified {h_cert:.4f} bit/pair at {lo_power * 1e3:.3f} mW")
    _say(f"secure rate R_sc = {r_sc / 1e9:.3f} Gbps (ratio rule {r_ratio / 1e9:.3f} Gbps)")
    _say(f"wrote {bin_path} ({written} bytes, {ex.blocks_consumed} blocks) and "
         f"{out / 'random.json'}")
    return EXIT_OK


# --------------------------------------------------------------------------
# analyze

def cmd_analyze(cfg: PipelineConfig, path: Path, ascii_out: Path | None) -> int:
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CommandError(f"cannot read {path}: {exc}", EXIT_IO)
    bits = stattests.as_bits(data)
    bc = stattests.BatteryConfig(significance=cfg.analysis.significance,
                                 sequence_length=cfg.analysis.sequence_length)
    try:
        results = stattests.run_battery(bits, bc)
    except stattests.InsufficientBits as exc:
        raise CommandError(f"short file: {exc}")
    summary = stattests.p_value_summary(results, bc.significance)
    _say(summary.to_text().rstrip())
    out = _outdir(cfg)
    _write_text(out / "analysis.json", summary.to_json())
    if ascii_out:
        stattests.export_ascii(bits, ascii_out)
    return EXIT_OK if summary.all_passed else EXIT_INVALID


# --------------------------------------------------------------------------
# report

def _write_csv(path: Path, header, rows) -> None:
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)
    except OSError as exc:
        raise CommandError(f"cannot write {path}: {exc}", EXIT_IO)


def cmd_report(cfg: PipelineConfig, calibration_path: Path) -> int:
    out = _outdir(cfg)
    calib = load_calibration(calibration_path)
    src = _sweep_source(cfg, cfg.report.mode)
    reports = []
    for i, p in enumerate(cfg.report.powers):
        if p <= 0:
            continue
        try:
            reports.append(entropy.entropy_report(
                src.measure(p, cfg.report.samples_per_point, 100 + i), calib, p,
                cfg.dsp.output_rate, cfg.source.adc_bits))
        except entropy.EntropyError as exc:
            raise CommandError(f"entropy at {p * 1e3:.3f} mW: {exc}")
    if not reports:
        raise CommandError("report needs at least one nonzero power")
    _write_text(out / "entropy_sweep.json", json.dumps([r.to_dict() for r in reports], indent=2))
    _write_csv(out / "variance_vs_power.csv",
               ["lo_power_w", "variance_q", "se_q", "variance_p", "se_p", "fit_q", "fit_p"],
               [[pt.lo_power, pt.variance_q, pt.se_q, pt.variance_p, pt.se_p,
                 calib.slope_q * pt.lo_power + calib.intercept_q,
                 calib.slope_p * pt.lo_power + calib.intercept_p] for pt in calib.points])
    _write_csv(out / "hmin_vs_power.csv",
               ["lo_power_w", "h_min_conditional", "h_min_classical", "entropy_loss",
                "secure_rate_bps"],
               [[r.lo_power, r.h_min_conditional, r.h_min_classical, r.entropy_loss,
                 r.secure_rate] for r in reports])
    _write_csv(out / "purity_vs_power.csv",
               ["lo_power_w", "variance_q_vu", "variance_p_vu", "purity"],
               [[r.lo_power, r.variance_q_vu, r.variance_p_vu, r.purity] for r in reports])
    _say(entropy.render_table(reports).rstrip())
    _say(f"wrote {out / 'entropy_sweep.json'} and series CSVs")
    return EXIT_OK


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML configuration file")
    common.add_argument("--seed", type=int, help="seed for the simulator and extractor")
    common.add_argument("--out", help="output directory")
    common.add_argument("--power", type=float, help="LO power in watts")
    common.add_argument("--blocks", type=int, help="number of blocks (see command)")

    p = _Parser(prog="hetqrng", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("simulate", parents=[common], help="write a synthetic QRAW capture (4 blocks by default)")
    sub.add_parser("calibrate", parents=[common], help="LO sweep, fit and spectrum")
    g = sub.add_parser("generate", parents=[common], help="extract certified random bits")
    g.add_argument("--calibration", type=Path, help="calibration JSON (default: OUT/calibration.json)")
    g.add_argument("--bytes", type=int, help="byte budget (overrides --blocks and the config)")
    a = sub.add_parser("analyze", parents=[common], help="run the statistical battery")
    a.add_argument("bitfile", type=Path)
    a.add_argument("--ascii", type=Path, help="also export the bits as ASCII 0/1")
    r = sub.add_parser("report", parents=[common], help="entropy and purity series")
    r.add_argument("--calibration", type=Path)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # usage errors, --help, --version
        return exc.code if isinstance(exc.code, int) else EXIT_INVALID
    try:
        try:
            cfg = _apply_overrides(load(args.config), args)
            cfg.check_paths()
        except FileNotFoundError as exc:
            raise CommandError(f"config not found: {exc.filename}", EXIT_IO)
        except (ConfigError, ValueError) as exc:
            raise CommandError(f"invalid configuration: {exc}")
        out = Path(cfg.output_dir)
        if args.command == "simulate":
            return cmd_simulate(cfg, 4 if args.blocks is None else args.blocks)
        if args.command == "calibrate":
            return cmd_calibrate(cfg)
        if args.command == "generate":
            budget = cfg.generate.bytes
            if args.bytes is not None:
                budget = args.bytes
            elif args.blocks is not None:
                budget = args.blocks * cfg.generate.block_size
            return cmd_generate(cfg, args.calibration or out / "calibration.json", budget)
        if args.command == "analyze":
            return cmd_analyze(cfg, args.bitfile, args.ascii)
        if args.command == "report":
            return cmd_report(cfg, args.calibration or out / "calibration.json")
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except CaptureError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
