"""Command-line front end.

Subcommands write their results under ``--out`` together with a
``manifest.json``. Every CSV starts with a ``# manifest: <run_id>`` line and
every JSON report carries a ``manifest`` field, where ``run_id`` is a hash of
everything that determines the numbers (subcommand, arguments, seed, resolved
configuration and package version). Timestamps live only in the manifest, so
reports are byte-identical for identical inputs.

Exit codes: 0 success, 1 invariant or acceptance failure, 2 bad input.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import re
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .config import SystemConfig, load_config, noiseless, to_ini
from .interferometer import (
    KINDS,
    ComponentImperfections,
    equivalence_report,
    max_clock_rate,
    pm_insertion_loss,
    pm_pass_separation,
)
from .protocol import ClassTally, observed_rates, run_session, run_visibility_series, use_accelerated
from .security import ClassObservation, ObservedRates, analyze

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2
EQUIVALENCE_TOL = 1e-10
SMOOTH_WINDOW = 200

_DURATION_UNITS = {"s": 1.0, "m": 60.0, "h": 3600.0, "d": 86400.0}


class InputError(Exception):
    """Bad user input; maps to exit code 2."""


def parse_duration(text: str) -> float:
    """Seconds from ``'3600'``, ``'3600s'``, ``'10m'``, ``'24h'`` or ``'7d'``."""
    m = re.fullmatch(r"\s*([0-9.eE+-]+)\s*([smhd]?)\s*", str(text))
    if not m:
        raise argparse.ArgumentTypeError(f"invalid duration {text!r}")
    try:
        value = float(m.group(1)) * _DURATION_UNITS[m.group(2) or "s"]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"invalid duration {text!r}") from exc
    if not (math.isfinite(value) and value > 0):
        raise argparse.ArgumentTypeError(f"duration must be positive and finite, got {text!r}")
    return value


# --- run bookkeeping ------------------------------------------------------------


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class Run:
    """Output directory plus the manifest that every artifact points to."""

    def __init__(self, command: str, args: dict, seed: int | None, cfg: SystemConfig | None, out: Path):
        self.out = out
        self.config_text = to_ini(cfg) if cfg is not None else None
        identity = {
            "subcommand": command,
            "args": args,
            "seed": seed,
            "config": self.config_text,
            "version": __version__,
        }
        blob = json.dumps(identity, sort_keys=True).encode()
        self.run_id = hashlib.sha256(blob).hexdigest()[:16]
        self.manifest = {
            "run_id": self.run_id,
            "subcommand": command,
            "artifact_version": __version__,
            "seed": seed,
            "args": args,
            "config": self.config_text,
            "outputs": [],
            "started_utc": _utc_now(),
        }
        out.mkdir(parents=True, exist_ok=True)

    def _register(self, name: str) -> Path:
        self.manifest["outputs"].append(name)
        return self.out / name

    def write_csv(self, name: str, header: list[str], rows) -> Path:
        path = self._register(name)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(f"# manifest: {self.run_id}\n")
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                for v in row:
                    if isinstance(v, float) and not math.isfinite(v):
                        raise ValueError(f"non-finite value in {name}: {row}")
                writer.writerow([_cell(v) for v in row])
        return path

    def write_json(self, name: str, payload: dict) -> Path:
        path = self._register(name)
        body = {"manifest": self.run_id, **payload}
        path.write_text(json.dumps(body, indent=2, sort_keys=True, default=_json_default) + "\n", encoding="utf-8")
        return path

    def finish(self, **extra) -> Path:
        self.manifest.update(extra)
        self.manifest["finished_utc"] = _utc_now()
        path = self.out / "manifest.json"
        path.write_text(json.dumps(self.manifest, indent=2, sort_keys=True, default=_json_default) + "\n")
        return path


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


# --- reporting helpers ------------------------------------------------------------


def block_average(values: np.ndarray, window: int = SMOOTH_WINDOW) -> np.ndarray:
    """Means of consecutive, non-overlapping blocks of ``window`` points.

    A short final block is averaged over the points it has.
    """
    values = np.asarray(values, dtype=float)
    if window < 1:
        raise ValueError("window must be >= 1")
    return np.array([values[i:i + window].mean(axis=0) for i in range(0, len(values), window)])


def histogram(values: np.ndarray, width: float) -> list[tuple[float, float, int]]:
    """Counts in bins of ``width`` aligned to multiples of ``width``."""
    if not width > 0:
        raise ValueError("bin width must be positive")
    values = np.asarray(values, dtype=float)
    k = np.floor(values / width + 1e-9).astype(np.int64)
    lo, hi = int(k.min()), int(k.max())
    counts = np.bincount(k - lo, minlength=hi - lo + 1)
    return [((lo + i) * width, (lo + i + 1) * width, int(c)) for i, c in enumerate(counts)]


def read_tally(path: str | Path) -> dict[str, tuple[float, ClassTally]]:
    """Parse a tally CSV (class, mu, sent, detections, errors[, sifted]).

    Lines starting with ``#`` are ignored. Without a ``sifted`` column the
    caller decides how many detections were sifted (``sifted`` is left at 0).
    """
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [ln for ln in fh if ln.strip() and not ln.lstrip().startswith("#")]
    reader = csv.DictReader(lines)
    required = ("class", "mu", "sent", "detections", "errors")
    if reader.fieldnames is None or any(k not in reader.fieldnames for k in required):
        raise InputError(f"tally file needs columns {', '.join(required)}")
    out = {}
    for row in reader:
        try:
            tally = ClassTally(
                sent=int(float(row["sent"])),
                detections=int(float(row["detections"])),
                errors=int(float(row["errors"])),
                sifted=int(float(row["sifted"])) if row.get("sifted") not in (None, "") else 0,
            )
            mu = float(row["mu"])
        except (TypeError, ValueError) as exc:
            raise InputError(f"malformed tally row {row}") from exc
        label = row["class"].strip()
        if label in out:
            raise InputError(f"duplicate class {label!r} in tally file")
        out[label] = (mu, tally)
    return out


def tally_observation(
    tallies: dict[str, tuple[float, ClassTally]], sift_factor: float, expected: int = 3
) -> ObservedRates:
    if len(tallies) != expected:
        raise InputError(f"expected {expected} intensity classes, found {sorted(tallies)}")
    classes = []
    for label, (mu, t) in tallies.items():
        sifted = t.sifted if t.sifted else sift_factor * t.detections
        if t.sent <= 0 or not 0 <= t.detections <= t.sent or t.errors < 0 or t.errors > max(sifted, 0):
            raise InputError(f"{label}: inconsistent counts")
        qber = t.errors / sifted if sifted > 0 else 0.0
        classes.append(ClassObservation(label, mu, t.detections / t.sent, qber, t.sent, sifted or None))
    return ObservedRates(tuple(classes))


def key_rate_payload(obs: ObservedRates, cfg: SystemConfig) -> dict:
    asym = analyze(obs, cfg.security)
    payload = {"asymptotic": asym.to_dict()}
    try:
        finite = analyze(obs, cfg.security, finite_size=True)
        payload["finite_size"] = finite.to_dict()
        payload["finite_size"]["epsilon_total"] = cfg.security.epsilon_total
    except ValueError as exc:
        payload["finite_size"] = {"error": str(exc)}
    return payload


# --- subcommands --------------------------------------------------------------------


def cmd_equivalence(args, cfg: SystemConfig) -> int:
    imp = ComponentImperfections(fr_angle_error=args.fr_angle_error)
    dev = equivalence_report(args.trials, args.seed, imp, args.phase)
    passed = dev < EQUIVALENCE_TOL
    run = _run(args, cfg)
    run.write_json(
        "equivalence.json",
        {
            "trials": args.trials,
            "fr_angle_error": args.fr_angle_error,
            "phase": args.phase,
            "max_deviation": dev,
            "tolerance": EQUIVALENCE_TOL,
            "passed": passed,
            "report_only": args.report_only,
        },
    )
    run.finish()
    print(f"max |FMI - FSMI| = {dev:.3e} over {args.trials} trials ({'pass' if passed else 'FAIL'})")
    return EXIT_OK if passed or args.report_only else EXIT_FAIL


def cmd_visibility(args, cfg: SystemConfig) -> int:
    n_scans = max(1, int(math.floor(args.duration / cfg.scan.period + 1e-9)))
    accelerated = args.accelerated != "off"
    results = run_visibility_series(cfg, n_scans, args.seed, accelerated=accelerated, workers=args.workers)
    vis = np.array([r.visibility for r in results])
    run = _run(args, cfg)
    run.write_csv("visibility.csv", ["scan", "timestamp_s", "visibility"],
                  ((r.index, r.start_time, r.visibility) for r in results))
    run.write_csv("visibility_histogram.csv", ["bin_low", "bin_high", "count"], histogram(vis, args.bin_width))
    summary = {
        "n_scans": len(vis),
        "mean": float(vis.mean()),
        "std": float(vis.std()),
        "min": float(vis.min()),
        "max": float(vis.max()),
        "accelerated": accelerated,
    }
    run.write_json("visibility_summary.json", summary)
    run.finish(accelerated=accelerated)
    print(f"{len(vis)} scans: mean V = {summary['mean']:.5f}, std = {summary['std']:.5f}")
    return EXIT_OK


def cmd_qkd(args, cfg: SystemConfig) -> int:
    if args.interval > args.duration * (1 + 1e-12):
        raise InputError("--interval must not exceed --duration")
    accelerated = use_accelerated(cfg, args.duration, args.accelerated)
    result = run_session(cfg, args.duration, args.interval, args.seed,
                         mode="on" if accelerated else "off", workers=args.workers)
    labels = cfg.source.labels
    run = _run(args, cfg)

    header = ["interval", "start_s"]
    for label in labels:
        header += [f"{label}_gain", f"{label}_qber"]
    header.append("rate_bps")
    rows = []
    for t in result.tallies:
        obs = observed_rates(cfg.source, t.classes)
        rate = analyze(obs, cfg.security).rate
        row = [t.index, t.start_time]
        for label in labels:
            row += [t.classes[label].gain, t.classes[label].qber]
        rows.append(row + [rate])
    run.write_csv("qkd_series.csv", header, rows)

    data = np.array([r[1:] for r in rows], dtype=float)
    smooth = block_average(data)
    run.write_csv("qkd_smoothed.csv", ["block"] + header[1:],
                  ([i] + [float(x) for x in row] for i, row in enumerate(smooth)))

    totals = result.totals
    run.write_csv(
        "tally.csv",
        ["class", "mu", "sent", "detections", "errors", "sifted"],
        ((c.label, float(c.mu), totals[c.label].sent, totals[c.label].detections,
          totals[c.label].errors, totals[c.label].sifted) for c in cfg.source.intensity_classes),
    )
    obs = observed_rates(cfg.source, totals)
    payload = key_rate_payload(obs, cfg)
    payload["mean_interval_rate_bps"] = float(np.mean([r[-1] for r in rows]))
    payload["duration_s"] = args.duration
    payload["interval_s"] = args.interval
    payload["accelerated"] = accelerated
    run.write_json("keyrate.json", payload)
    run.finish(accelerated=accelerated)

    for label in labels:
        print(f"{label:>8}: Q = {totals[label].gain:.4e}  E = {100 * totals[label].qber:.3f}%")
    print(f"key rate: asymptotic {payload['asymptotic']['rate_bps']:.4g} b/s", end="")
    fs = payload["finite_size"]
    print(f", finite-size {fs['rate_bps']:.4g} b/s" if "rate_bps" in fs else "")
    return EXIT_OK


def cmd_keyrate(args, cfg: SystemConfig) -> int:
    tallies = read_tally(args.tally)
    obs = tally_observation(tallies, cfg.security.sift_factor, expected=len(cfg.source.intensity_classes))
    payload = key_rate_payload(obs, cfg)
    run = _run(args, cfg)
    run.write_json("keyrate.json", payload)
    run.finish()
    asym = payload["asymptotic"]
    flag = " (vacuous bounds)" if asym["vacuous_bounds"] else (" (clamped)" if asym["clamped"] else "")
    print(f"asymptotic key rate: {asym['rate_bps']:.4g} b/s{flag}")
    return EXIT_OK


def cmd_analysis(args, cfg: SystemConfig) -> int:
    kinds = KINDS if args.kind == "both" else (args.kind,)
    pm_loss = cfg.receiver.pm_insertion_loss_db if args.pm_loss is None else args.pm_loss
    rows = [
        (k, pm_pass_separation(cfg.geometry, k), max_clock_rate(cfg.geometry, k), pm_insertion_loss(k, pm_loss))
        for k in kinds
    ]
    run = _run(args, cfg)
    run.write_csv("analysis.csv", ["kind", "pm_pass_separation_s", "max_clock_rate_hz", "pm_insertion_loss_db"], rows)
    run.finish()
    print(f"{'kind':<5} {'PM pass gap (ns)':>17} {'max clock (MHz)':>16} {'PM loss (dB)':>13}")
    for k, gap, rate, loss in rows:
        print(f"{k:<5} {gap * 1e9:>17.4f} {rate / 1e6:>16.1f} {loss:>13.2f}")
    return EXIT_OK


# --- argument parsing --------------------------------------------------------------

_COMMANDS = {
    "equivalence": cmd_equivalence,
    "visibility": cmd_visibility,
    "qkd": cmd_qkd,
    "keyrate": cmd_keyrate,
    "analysis": cmd_analysis,
}
# Arguments that do not change any number in the outputs.
_NON_IDENTITY = {"out", "workers", "print_config", "command", "config", "overrides"}


def _run(args, cfg: SystemConfig) -> Run:
    ident = {k: v for k, v in sorted(vars(args).items()) if k not in _NON_IDENTITY}
    if "tally" in ident:
        ident["tally"] = hashlib.sha256(Path(args.tally).read_bytes()).hexdigest()
    return Run(args.command, ident, getattr(args, "seed", None), cfg, Path(args.out))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="INI file overriding the built-in defaults")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one configuration value (repeatable)")
    common.add_argument("--noiseless", action="store_true",
                        help="ideal optics, no dark counts, afterpulses or phase noise")
    common.add_argument("--seed", type=int, default=0, help="master RNG seed")
    common.add_argument("--out", default="out", metavar="DIR", help="output directory")
    common.add_argument("--workers", type=int, default=1, help="worker processes (results do not depend on it)")
    common.add_argument("--print-config", action="store_true", help="print the resolved configuration and exit")

    p = argparse.ArgumentParser(prog="fsmi-qkd", description="FSMI phase-coding QKD simulator")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("equivalence", parents=[common], help="compare FMI and FSMI long arms")
    s.add_argument("--trials", type=int, default=10_000, help="random birefringence draws")
    s.add_argument("--fr-angle-error", type=float, default=0.0, help="Faraday rotation error (rad)")
    s.add_argument("--phase", type=float, default=None, help="fixed PM phase (default: random per trial)")
    s.add_argument("--report-only", action="store_true", help="never fail on the deviation")

    s = sub.add_parser("visibility", parents=[common], help="repeated voltage-scan visibility measurement")
    s.add_argument("--duration", type=parse_duration, default=parse_duration("24h"), help="e.g. 24h, 600s")
    s.add_argument("--accelerated", choices=("auto", "on", "off"), default="auto",
                   help="closed-form count sampling; auto switches on for long runs")
    s.add_argument("--bin-width", type=float, default=0.0005, help="histogram bin width")

    s = sub.add_parser("qkd", parents=[common], help="decoy-state BB84 session")
    s.add_argument("--duration", type=parse_duration, default=parse_duration("1h"), help="session length, e.g. 1h")
    s.add_argument("--interval", type=parse_duration, default=parse_duration("10s"), help="tally interval")
    s.add_argument("--accelerated", choices=("auto", "on", "off"), default="auto",
                   help="closed-form count sampling; auto switches on for long runs")

    s = sub.add_parser("keyrate", parents=[common], help="key rate from a tally CSV")
    s.add_argument("tally", help="CSV with columns class, mu, sent, detections, errors[, sifted]")

    s = sub.add_parser("analysis", parents=[common], help="clock-rate and insertion-loss table")
    s.add_argument("--kind", choices=("FMI", "FSMI", "both"), default="both")
    s.add_argument("--pm-loss", type=float, default=None, help="PM insertion loss per pass (dB)")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.workers < 1:
            raise InputError("--workers must be >= 1")
        cfg = load_config(args.config, args.overrides)
        if args.noiseless:
            cfg = noiseless(cfg)
        if args.print_config:
            sys.stdout.write(to_ini(cfg))
            return EXIT_OK
        if getattr(args, "trials", 1) < 1:
            raise InputError("--trials must be >= 1")
        return _COMMANDS[args.command](args, cfg)
    except (InputError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
