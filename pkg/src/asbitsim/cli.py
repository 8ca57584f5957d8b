"""Command-line entry point.

Exit codes: 0 success, 2 usage or configuration error, 1 runtime failure.
Diagnostics go to stderr; data goes to files or stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .codes import DEFAULT_PAIRS, GoldFamily, family_correlation_summary, gold_code, load_code, save_code
from .metrics import (CapacityParams, capacity_bound, capacity_heatmap, sweep_code_length, sweep_nodes,
                      sweep_snr)
from .netsim import ScenarioConfig, build_population, calibrate_threshold, demodulate_targets, run_scenario
from .phy import CarrierParams, IqStream
from .rx import ReceiverConfig, demodulate, write_ndjson

log = logging.getLogger("asbitsim")

EXAMPLES_DIR = Path(__file__).with_name("examples")
SWEEP_KINDS = ("nodes", "snr", "codelen", "heatmap")
ENV_OUT = "ASBITSIM_OUT"
ENV_WORKERS = "ASBITSIM_WORKERS"


class UsageError(Exception):
    """Bad arguments or configuration (exit code 2)."""


def bundled_configs() -> list[str]:
    return sorted(p.stem for p in EXAMPLES_DIR.glob("*.json"))


def resolve_config(ref: str) -> Path:
    """A config path, or the name of a bundled example such as ``fig2e``."""
    p = Path(ref)
    if p.is_file():
        return p
    bundled = EXAMPLES_DIR / f"{ref}.json"
    if bundled.is_file():
        return bundled
    raise UsageError(f"config {ref!r} not found (bundled: {', '.join(bundled_configs())})")


def _read_json(path: Path) -> dict:
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise UsageError(f"{path}: expected a JSON object")
    return data


def _scenario_from(data: dict, where: Path, seed: int | None) -> ScenarioConfig:
    data = dict(data)
    ev = data.get("events_file")
    if ev and not Path(ev).is_absolute():
        data["events_file"] = str((where.parent / ev).resolve())
    try:
        cfg = ScenarioConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{where}: {exc}") from exc
    if seed is not None:
        cfg = replace(cfg, master_seed=seed)
    return cfg


def load_scenario(ref: str, seed: int | None = None) -> ScenarioConfig:
    """A scenario file; sweep files contribute their ``scenario`` block."""
    path = resolve_config(ref)
    data = _read_json(path)
    if "scenario" in data:
        data = data["scenario"]
    return _scenario_from(data, path, seed)


def _workers(arg: int | None) -> int:
    if arg is not None:
        n = arg
    elif os.environ.get(ENV_WORKERS):
        try:
            n = int(os.environ[ENV_WORKERS])
        except ValueError as exc:
            raise UsageError(f"{ENV_WORKERS} must be an integer") from exc
    else:
        n = os.cpu_count() or 1
    if n < 1:
        raise UsageError("--workers must be >= 1")
    return n


def _out_dir(arg: str | None, default: str) -> Path:
    out = Path(arg or os.environ.get(ENV_OUT) or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- subcommands -------------------------------------------------------------

def cmd_codegen(args) -> int:
    if args.degree not in DEFAULT_PAIRS:
        raise UsageError(f"degree must be one of {sorted(DEFAULT_PAIRS)}")
    fam = GoldFamily.default(args.degree)
    if not 0 <= args.seed < fam.family_size:
        raise UsageError(f"seed must lie in [0, {fam.family_size - 1}] for degree {args.degree}")
    length = args.length or fam.period
    if not 1 <= length <= fam.period:
        raise UsageError(f"length must lie in [1, {fam.period}]")
    code = gold_code(fam, args.seed, length)
    out = _out_dir(args.out, ".")
    paths = save_code(code, out / args.name)
    summary = family_correlation_summary(fam, range(min(8, fam.family_size)), length)
    print(json.dumps({"files": {k: str(v) for k, v in paths.items()}, "degree": args.degree,
                      "seed": args.seed, "length": length, "correlation_summary": summary},
                     indent=2, sort_keys=True))
    return 0


def cmd_simulate(args) -> int:
    cfg = replace(load_scenario(args.config, args.seed), workers=_workers(args.workers))
    if args.no_iq:
        cfg = replace(cfg, write_iq=False)
    out = _out_dir(args.out, "run")
    log.info("simulating %d nodes (%d targets) for %g s", cfg.n_nodes, cfg.n_targets, cfg.duration_s)
    rep = run_scenario(cfg)
    rep.write(out)
    log.info("EER %.4g (%d misses, %d false) -> %s", rep.errors.eer, rep.errors.misses,
             rep.errors.false_detections, out)
    return 0


def _grid(spec: dict, key: str, default=None):
    if key in spec:
        v = spec[key]
        if not isinstance(v, (list, dict)):
            raise UsageError(f"grid entry {key!r} must be a list")
        return v
    if default is None:
        raise UsageError(f"sweep grid is missing {key!r}")
    return default


def cmd_sweep(args) -> int:
    path = resolve_config(args.config)
    doc = _read_json(path)
    kind = doc.get("kind", args.kind)
    if kind != args.kind:
        raise UsageError(f"{path} describes a {kind!r} sweep, not {args.kind!r}")
    base = _scenario_from(doc.get("scenario", {}), path, args.seed)
    grid = doc.get("grid", {})
    workers = _workers(args.workers)
    try:
        if kind == "nodes":
            table = sweep_nodes(base, _grid(grid, "n_grid"), grid.get("rates"), grid.get("clocks"),
                                grid.get("modes"), workers=workers)
        elif kind == "snr":
            table = sweep_snr(base, _grid(grid, "noise_floors_dbm"), grid.get("n_grid"), workers=workers)
        elif kind == "codelen":
            table = sweep_code_length(base, _grid(grid, "lengths"), workers=workers, timing=args.timing)
        else:
            table = capacity_heatmap(base, _grid(grid, "n_grid"), _grid(grid, "rates"), workers=workers)
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from exc
    out = _out_dir(args.out, "sweep")
    csv_path, meta_path = table.write(out / kind)
    log.info("wrote %s and %s", csv_path, meta_path)
    return 0


def cmd_capacity(args) -> int:
    try:
        if args.r_bps is not None:
            params = CapacityParams(w_hz=args.w_hz, r_bps=args.r_bps, ebn0_db=args.ebn0_db, s_w=args.s_w,
                                    eta_w=args.eta_w, utilization=args.utilization)
        else:
            params = CapacityParams.from_coding_gain(args.lc, w_hz=args.w_hz, ebn0_db=args.ebn0_db,
                                                     s_w=args.s_w, eta_w=args.eta_w,
                                                     utilization=args.utilization)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    res = capacity_bound(params)
    if args.json:
        print(json.dumps(res.to_dict(), indent=2, sort_keys=True))
    else:
        print(f"N = {res.n:.2f}")
        print(f"N_sparse = N / {params.utilization:g} = {res.n_sparse:.2f}")
        print(f"note: {res.note}")
    return 0


def _demod_run(args) -> int:
    run = Path(args.run)
    cfg = load_scenario(str(run / "config.json"))
    try:
        iq = IqStream.load(run / "iq")
    except (OSError, ValueError) as exc:
        raise UsageError(f"{run}: {exc}") from exc
    rx = cfg.receiver
    if args.mode:
        rx = replace(rx, mode=args.mode)
    if args.threshold_k is not None:
        rx = replace(rx, threshold_k=args.threshold_k)
    cfg = replace(cfg, receiver=rx, workers=_workers(args.workers))
    pop = build_population(cfg)
    reports, _ = demodulate_targets(cfg, pop, iq)
    _emit(reports, args.out)
    return 0


def _demod_single(args) -> int:
    if not args.code:
        raise UsageError("--code is required unless --run is given")
    try:
        iq = IqStream.load(args.iq)
        code = load_code(args.code)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(str(exc)) from exc
    rx = ReceiverConfig()
    if args.mode:
        rx = replace(rx, mode=args.mode)
    if args.threshold_k is not None:
        rx = replace(rx, threshold_k=args.threshold_k)
    if args.drift_ppm is not None:
        rx = replace(rx, drift_ppm=args.drift_ppm)
    report = demodulate(iq, code, rx, node_id=args.node_id, clock_hint=args.clock_hint, carrier=CarrierParams())
    _emit([report], args.out)
    return 0


def _emit(reports, out: str | None) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        write_ndjson(reports, out)
    else:
        sys.stdout.write("".join(r.to_ndjson() for r in sorted(reports, key=lambda r: r.node_id)))


def cmd_demod(args) -> int:
    return _demod_run(args) if args.run else _demod_single(args)


def cmd_calibrate(args) -> int:
    cfg = load_scenario(args.config, args.seed)
    try:
        table = calibrate_threshold(cfg, args.k, args.n_codes, args.duration, args.target_rate)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = _out_dir(args.out, "calibration")
    table.write(out / "threshold")
    print(json.dumps({"recommended_k": table.metadata["recommended_k"],
                      "max_peak_over_rms": table.metadata["max_peak_over_rms"]}, sort_keys=True))
    return 0


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="asbitsim", description="Asynchronous sparse CDMA backscatter simulator")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more diagnostics on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("codegen", help="write a Gold code (text, binary, JSON descriptor)")
    c.add_argument("--degree", type=int, default=13)
    c.add_argument("--seed", type=int, default=0, help="family member index")
    c.add_argument("--length", type=int, default=None, help="chips to keep (default: full period)")
    c.add_argument("--name", default="code")
    c.add_argument("--out", default=None)
    c.set_defaults(func=cmd_codegen)

    s = sub.add_parser("simulate", help="run one scenario into a report directory")
    s.add_argument("config", help="scenario JSON path or bundled example name")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--workers", type=int, default=None)
    s.add_argument("--out", default=None)
    s.add_argument("--no-iq", action="store_true", help="skip writing iq.bin / iq.json")
    s.set_defaults(func=cmd_simulate)

    w = sub.add_parser("sweep", help="run a parameter sweep into CSV + JSON")
    w.add_argument("kind", choices=SWEEP_KINDS)
    w.add_argument("config", help="sweep JSON path or bundled example name")
    w.add_argument("--seed", type=int, default=None)
    w.add_argument("--workers", type=int, default=None)
    w.add_argument("--out", default=None)
    w.add_argument("--timing", action="store_true",
                   help="codelen: add measured demod wall time (output then differs run to run)")
    w.set_defaults(func=cmd_sweep)

    k = sub.add_parser("capacity", help="interference-limited node count")
    k.add_argument("--lc", type=float, default=511.0, help="coding gain W/R")
    k.add_argument("--w-hz", type=float, default=10e6)
    k.add_argument("--r-bps", type=float, default=None, help="bit rate (overrides --lc)")
    k.add_argument("--ebn0-db", type=float, default=7.0)
    k.add_argument("--s-w", type=float, default=1.0)
    k.add_argument("--eta-w", type=float, default=0.0)
    k.add_argument("--utilization", type=float, default=0.05)
    k.add_argument("--json", action="store_true")
    k.set_defaults(func=cmd_capacity)

    d = sub.add_parser("demod", help="demodulate a stored I/Q capture")
    d.add_argument("iq", nargs="?", help="capture stem (path without .bin/.json)")
    d.add_argument("--run", default=None, help="a simulate output directory: redo all its targets")
    d.add_argument("--code", default=None, help="code descriptor JSON")
    d.add_argument("--clock-hint", type=float, default=None, help="Hz; searched when absent")
    d.add_argument("--drift-ppm", type=float, default=None)
    d.add_argument("--node-id", type=int, default=0)
    d.add_argument("--mode", choices=("continuous", "discrete"), default=None)
    d.add_argument("--threshold-k", type=float, default=None)
    d.add_argument("--workers", type=int, default=None)
    d.add_argument("--out", default=None, help="NDJSON path (stdout when absent)")
    d.set_defaults(func=cmd_demod)

    t = sub.add_parser("calibrate-threshold", help="false-alarm rate vs threshold_k on pure noise")
    t.add_argument("config", help="scenario JSON path or bundled example name")
    t.add_argument("--k", type=float, nargs="+", default=[5, 8, 10, 12, 15, 20, 25, 30, 40])
    t.add_argument("--n-codes", type=int, default=4)
    t.add_argument("--duration", type=float, default=None)
    t.add_argument("--target-rate", type=float, default=0.1, help="false alarms per second per node")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--out", default=None)
    t.set_defaults(func=cmd_calibrate)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    if args.command == "demod" and not args.run and not args.iq:
        parser.error("demod needs a capture stem or --run")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        log.debug("traceback", exc_info=True)
        print(f"failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
