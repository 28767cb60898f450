"""Command-line interface: run, sweep, validate, tune-table."""

from __future__ import annotations

import argparse
import json
import sys

from .controller import init_t_on
from .scenario import (
    ScenarioError,
    emit_outputs,
    load_scenario,
    run_scenario,
    sweep_frequencies,
    sweep_to_csv,
)


def _add_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dt", type=float, default=None,
                   help="override integration step (seconds)")
    p.add_argument("--lossy", action="store_true",
                   help="use lossy switch/diode models (50 mOhm, 0.7 V)")
    p.add_argument("--param-free", action="store_true",
                   help="force parameter-free controller initialization")


def _load(args) -> "ScenarioConfig":
    doc = json.loads(open(args.scenario, encoding="utf-8").read())
    if args.dt is not None:
        doc.setdefault("sim", {})["dt"] = args.dt
    if args.param_free and doc.get("interceptor"):
        doc["interceptor"].setdefault("controller", {})["parameter_free"] = True
    return load_scenario(doc)


def _cmd_run(args) -> int:
    cfg = _load(args)
    trace, report = run_scenario(cfg, lossy=args.lossy)
    paths = emit_outputs(trace, report, args.out, probes=cfg.probes)
    for hop in report.hops:
        lock = ("no field" if hop.no_field else
                f"lock={hop.lock_time_cycles} cycles"
                if hop.lock_time_cycles is not None else "lock=n/a")
        print(f"hop {hop.frequency / 1e3:.1f} kHz: {lock}, "
              f"ratios={ {c: round(v, 4) for c, v in hop.power_ratios.items()} }")
    print(f"wrote {paths['waveforms']}, {paths['metrics']}")
    return 0


def _cmd_sweep(args) -> int:
    cfg = _load(args)
    rows = sweep_frequencies(cfg, args.from_hz, args.to_hz, args.step,
                             dwell_cycles=args.dwell, lossy=args.lossy,
                             jobs=args.jobs, chunks=args.chunks)
    path = sweep_to_csv(rows, f"{args.out}/sweep.csv")
    worst = min((r["hacker_to_best_receiver"] for r in rows
                 if r["hacker_to_best_receiver"] is not None), default=None)
    print(f"{len(rows)} points -> {path}")
    if worst is not None:
        print(f"worst hacker-to-best-receiver power ratio: {worst:.3f}")
    return 0


def _cmd_validate(args) -> int:
    cfg = _load(args)
    print("scenario ok")
    for key, val in cfg.header().items():
        print(f"  {key}: {val}")
    return 0


def _cmd_tune_table(args) -> int:
    cfg = _load(args)
    if cfg.interceptor is None:
        raise ScenarioError(["tune-table requires an interceptor"])
    l_h = cfg.link.coil(cfg.interceptor.coil).self_inductance
    lo, hi = cfg.tunable
    print("frequency_hz,t_on_s")
    for i in range(args.points):
        f = lo + (hi - lo) * i / (args.points - 1)
        t = init_t_on(f, l_h, cfg.interceptor.c1, cfg.interceptor.c2)
        print(f"{f!r},{t!r}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="hoplock",
        description="Frequency-hopping wireless power link and interceptor simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a scenario and write outputs")
    p.add_argument("scenario")
    p.add_argument("--out", default="out")
    _add_overrides(p)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("sweep", help="steady-state sweep across frequencies")
    p.add_argument("scenario")
    p.add_argument("--from", dest="from_hz", type=float, required=True)
    p.add_argument("--to", dest="to_hz", type=float, required=True)
    p.add_argument("--step", type=float, required=True)
    p.add_argument("--out", default="out")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--chunks", type=int, default=1)
    p.add_argument("--dwell", type=int, default=24,
                   help="carrier cycles per sweep point")
    _add_overrides(p)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("validate", help="static checks only")
    p.add_argument("scenario")
    _add_overrides(p)
    p.set_defaults(func=_cmd_validate)

    p = sub.add_parser("tune-table",
                       help="parameterized on-time table over the tunable range")
    p.add_argument("scenario")
    p.add_argument("--points", type=int, default=25)
    _add_overrides(p)
    p.set_defaults(func=_cmd_tune_table)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ScenarioError as exc:
        for problem in exc.problems:
            print(f"validation error: {problem}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
