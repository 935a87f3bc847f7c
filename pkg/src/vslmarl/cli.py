"""Command-line entry point: simulate, train, serve, replay, analyze."""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .analytics import (attribution_summary, mismatch_matrix,
                        sample_observations, speed_field, time_space_export, virtual_vehicle,
                        vsl_encounter_series)
from .closedloop import run_closed_loop
from .corridor import ConfigError, Corridor, corridor_from_dict, load_structured
from .guards import GuardConfig
from .marl import ActorCritic, Hyperparams, train
from .seeding import derive_rng
from .service import read_decision_log, read_sensor_csv, replay, serve
from .sim import ScenarioSpec, spec_from_dict, write_measurements_csv

log = logging.getLogger("vslmarl")

MANIFEST_VERSION = 1
ENV_HOST = "VSLMARL_HOST"
ENV_PORT = "VSLMARL_PORT"


class CLIError(Exception):
    pass


# helpers -------------------------------------------------------------------

def _raw_config(args) -> dict:
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise CLIError(f"config file not found: {path}")
        data = load_structured(path)
        if not isinstance(data, dict):
            raise ConfigError("config must be a mapping")
        return data
    return {"base": getattr(args, "scenario", None) or "training"}


def _scenario(args) -> tuple[ScenarioSpec, dict]:
    raw = _raw_config(args)
    if "gantries" in raw:
        raise ConfigError("expected a scenario config, got a corridor file")
    raw = dict(raw)
    if args.seed is not None:
        raw["seed"] = args.seed
    for key in ("horizon", "compliance"):
        if getattr(args, key, None) is not None:
            raw[key] = getattr(args, key)
    base_dir = Path(args.config).parent if getattr(args, "config", None) else None
    return spec_from_dict(raw, base_dir), raw


def _corridor(args) -> tuple[Corridor, dict]:
    """A corridor file, or the corridor of a scenario config."""
    raw = _raw_config(args)
    if "gantries" in raw:
        return corridor_from_dict(raw), raw
    spec, raw = _scenario(args)
    return spec.corridor(), raw


def _checkpoint(path) -> ActorCritic:
    if path is None:
        raise CLIError("--checkpoint is required")
    if not Path(path).exists():
        raise CLIError(f"checkpoint not found: {path}")
    return ActorCritic.load(path)


def _guard_config(args) -> GuardConfig:
    return GuardConfig(a_diff=args.a_diff, o_thred=args.o_thred)


def config_hash(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def write_manifest(out: Path, command: str, args, config: dict, outputs: list[str]):
    """Output directory manifest; ``created_at`` is the only wall-clock field."""
    params = {k: v for k, v in vars(args).items() if k not in ("func", "out", "verbose")}
    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "package_version": __version__,
        "command": command,
        "params": params,
        "config": config,
        "config_hash": config_hash({"config": config, "params": params}),
        "outputs": sorted(outputs),
        "created_at": dt.datetime.now(dt.timezone.utc).isoformat(),
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _write_json(path: Path, data):
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")


def _outputs(out: Path) -> list[str]:
    return [str(p.relative_to(out)) for p in out.rglob("*") if p.is_file() and p.name != "manifest.json"]


# subcommands ---------------------------------------------------------------

def cmd_simulate(args) -> int:
    spec, raw = _scenario(args)
    if args.tick_seconds <= 0:
        raise CLIError("--tick-seconds must be positive")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    policy = _checkpoint(args.checkpoint) if args.checkpoint else None
    if policy is not None and args.fixed_limit is not None:
        raise CLIError("--checkpoint and --fixed-limit are exclusive")
    result = run_closed_loop(spec, policy=policy, fixed_limit=args.fixed_limit,
                             config=_guard_config(args), tick_seconds=args.tick_seconds,
                             log_dir=out / "decisions" if policy is not None else None)
    write_measurements_csv(out / "measurements.csv", result.measurements)
    summary = {**result.summary, "control": "policy" if policy is not None else
               (f"fixed:{args.fixed_limit}" if args.fixed_limit is not None else "none")}
    _write_json(out / "summary.json", summary)
    write_manifest(out, "simulate", args, raw, _outputs(out))
    print(json.dumps({k: summary[k] for k in ("scenario", "vht", "records")}, default=float))
    return 0


def cmd_train(args) -> int:
    spec, raw = _scenario(args)
    hyper = Hyperparams()
    overrides = {k: getattr(args, k) for k in ("iterations", "lr", "episodes_per_iter", "ent_coef")
                 if getattr(args, k) is not None}
    if args.seed is not None:
        overrides["seed"] = args.seed
    hyper = replace(hyper, **overrides)
    out = Path(args.out)
    init = _checkpoint(args.checkpoint) if args.checkpoint else None
    _, curves = train(spec, hyper, out_dir=out, init=init)
    _write_json(out / "hyperparams.json", asdict(hyper))
    write_manifest(out, "train", args, raw, _outputs(out))
    last = curves[-1]["mean_reward"] if curves else None
    print(json.dumps({"iterations": hyper.iterations, "final_mean_reward": last}))
    return 0


def cmd_serve(args) -> int:
    corridor, _ = _corridor(args)
    host = args.host or os.environ.get(ENV_HOST, "127.0.0.1")
    port = args.port
    if port is None:
        try:
            port = int(os.environ.get(ENV_PORT, "8765"))
        except ValueError:
            raise CLIError(f"{ENV_PORT} must be an integer") from None
    if not 0 <= port <= 65535:
        raise CLIError(f"port out of range: {port}")
    policy = _checkpoint(args.checkpoint)
    try:
        serve(corridor, policy, host, port, _guard_config(args), args.tick_seconds,
              log_dir=Path(args.out) / "decisions" if args.out else None, clock=args.clock)
    except KeyboardInterrupt:
        pass
    except OSError as exc:
        raise CLIError(f"cannot serve on {host}:{port}: {exc}") from None
    return 0


def cmd_replay(args) -> int:
    corridor, raw = _corridor(args)
    if not Path(args.recording).exists():
        raise CLIError(f"recording not found: {args.recording}")
    policy = _checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _, summary = replay(args.recording, corridor, policy, _guard_config(args), args.tick_seconds,
                        log_dir=out / "decisions")
    _write_json(out / "summary.json", summary)
    write_manifest(out, "replay", args, raw, _outputs(out))
    print(json.dumps(summary))
    return 0


def _load_records(path) -> list[dict]:
    if not Path(path).exists():
        raise CLIError(f"decision log not found: {path}")
    return read_decision_log(path)


def cmd_attribution(args) -> int:
    records = _load_records(args.log)
    if not records:
        raise CLIError("decision log is empty")
    corridors = [_corridor(args)[0]] if args.config or args.scenario else []
    if (args.direction or args.exclude_custom) and not corridors:
        raise CLIError("--direction and --exclude-custom need --config or --scenario")
    peak = True if args.peak == "default" else (tuple(args.peak) if args.peak else None)
    s = attribution_summary(records, corridors, args.direction, peak, args.exclude_custom,
                            args.utc_offset)
    if s.empty:
        print(json.dumps({"empty": True, "filters": s.filters}))
        return 0
    rows = s.rows()
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["category", "mean_pct", "std_pct"], lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    for r in rows:
        print(f"{r['category']:<9} {r['mean_pct']:6.2f} +/- {r['std_pct']:5.2f}")
    return 0


def cmd_mismatch(args) -> int:
    if len(args.logs) < 2:
        raise CLIError("need at least two decision logs")
    rng = derive_rng(args.seed or 0, "mismatch")
    datasets = [sample_observations(_load_records(p), args.samples, rng) for p in args.logs]
    m = mismatch_matrix(datasets, n_jobs=args.jobs)
    names = [Path(p).name for p in args.logs]
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([""] + names)
            for name, row in zip(names, m):
                w.writerow([name] + [repr(float(v)) for v in row])
    np.set_printoptions(precision=4, suppress=True)
    print(m)
    return 0


def cmd_timespace(args) -> int:
    corridor, _ = _corridor(args)
    if not args.log and not args.measurements:
        raise CLIError("need --log and/or --measurements")
    records = _load_records(args.log) if args.log else None
    meas = list(read_sensor_csv(args.measurements)) if args.measurements else None
    paths = time_space_export(args.out, corridor, records, meas, args.bin_seconds)
    print(json.dumps({k: str(v) for k, v in paths.items()}))
    return 0


def cmd_vehicle(args) -> int:
    corridor, _ = _corridor(args)
    field_ = speed_field(read_sensor_csv(args.measurements), corridor, args.bin_seconds)
    traj = virtual_vehicle(field_, args.start_time, args.start_milepost)
    limits = ([lim for _, _, lim in vsl_encounter_series(traj, _load_records(args.log), corridor)]
              if args.log else [None] * len(traj))
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "milepost", "speed", "posted_limit"])
        for (t, x, v), lim in zip(traj, limits):
            w.writerow([repr(t), repr(x), repr(v), "" if lim is None else lim])
    finally:
        if fh is not sys.stdout:
            fh.close()
    return 0


# parser --------------------------------------------------------------------

def _add_common(p, config_required=False):
    p.add_argument("--config", required=config_required, help="scenario or corridor file (JSON/YAML)")
    p.add_argument("--scenario", choices=["training", "testing"], help="built-in scenario if no --config")
    p.add_argument("--seed", type=int)


def _add_guard(p):
    p.add_argument("--tick-seconds", type=float, default=30.0)
    p.add_argument("--a-diff", type=int, default=10)
    p.add_argument("--o-thred", type=float, default=0.15)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vslmarl", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="closed-loop CTM run")
    _add_common(p)
    _add_guard(p)
    p.add_argument("--checkpoint")
    p.add_argument("--fixed-limit", type=int)
    p.add_argument("--horizon", type=float)
    p.add_argument("--compliance", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="MAPPO training")
    _add_common(p)
    p.add_argument("--checkpoint", help="warm start")
    p.add_argument("--iterations", type=int)
    p.add_argument("--episodes-per-iter", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--ent-coef", type=float)
    p.add_argument("--horizon", type=float)
    p.add_argument("--compliance", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("serve", help="TCP decision service")
    _add_common(p)
    _add_guard(p)
    p.add_argument("--checkpoint")
    p.add_argument("--host", help=f"default ${ENV_HOST} or 127.0.0.1")
    p.add_argument("--port", type=int, help=f"default ${ENV_PORT} or 8765")
    p.add_argument("--clock", choices=["wall", "data"], default="wall")
    p.add_argument("--out")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("replay", help="open-loop replay of a sensor CSV")
    _add_common(p)
    _add_guard(p)
    p.add_argument("--checkpoint")
    p.add_argument("--recording", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("analyze", help="post-hoc analysis")
    asub = p.add_subparsers(dest="analysis", required=True)

    a = asub.add_parser("attribution")
    _add_common(a)
    a.add_argument("--log", required=True, help="decision log file or directory")
    a.add_argument("--direction")
    a.add_argument("--peak", nargs="*", type=float, metavar="HOUR",
                   help="START END in local hours; no values for the direction default")
    a.add_argument("--exclude-custom", action="store_true")
    a.add_argument("--utc-offset", type=float, default=0.0)
    a.add_argument("--out")
    a.set_defaults(func=cmd_attribution)

    a = asub.add_parser("mismatch")
    a.add_argument("logs", nargs="+")
    a.add_argument("--samples", type=int, default=1000)
    a.add_argument("--seed", type=int)
    a.add_argument("--jobs", type=int, default=1)
    a.add_argument("--out")
    a.set_defaults(func=cmd_mismatch)

    a = asub.add_parser("timespace")
    _add_common(a)
    a.add_argument("--log")
    a.add_argument("--measurements")
    a.add_argument("--bin-seconds", type=float, default=30.0)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_timespace)

    a = asub.add_parser("vehicle")
    _add_common(a)
    a.add_argument("--measurements", required=True)
    a.add_argument("--log")
    a.add_argument("--start-time", type=float, required=True)
    a.add_argument("--start-milepost", type=float, required=True)
    a.add_argument("--bin-seconds", type=float, default=30.0)
    a.add_argument("--out")
    a.set_defaults(func=cmd_vehicle)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "peak", None) is not None:
        if len(args.peak) == 0:
            args.peak = "default"
        elif len(args.peak) != 2:
            parser.error("--peak takes zero or two values")
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CLIError, ConfigError, ValueError, OSError, KeyError, RuntimeError) as exc:
        err = {"error": str(exc) if not isinstance(exc, KeyError) else f"missing key {exc}",
               "kind": type(exc).__name__, "command": args.command}
        print(json.dumps(err), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
