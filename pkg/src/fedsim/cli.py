"""``fedsim run | sweep | analyze``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .analysis import collect_snapshots, disparity_profile, rank_change_profile
from .config import ConfigError, RunSpec, load, to_dict, with_axis
from .params import ParamVector
from .simulation import run_scenario, write_rounds_csv

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
SWEEP_AXES = ("attacker_fraction", "beta", "n_clients")

log = logging.getLogger("fedsim")


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def write_manifest(out: Path, config_path, spec: RunSpec, command: str, extra=None) -> None:
    manifest = {
        "command": command,
        "config_path": str(config_path),
        "output_dir": str(out),
        "seed": spec.scenario.master_seed,
        "version": __version__,
        "overrides": spec.overrides,
        "resolved": to_dict(spec.scenario),
    }
    if spec.analysis_rounds:
        manifest["analysis_rounds"] = list(spec.analysis_rounds)
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def write_summary(path: Path, summary) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["acc", "asr", "window"])
        w.writerow([_fmt(summary.acc), _fmt(summary.asr), summary.window])


def export_snapshots(out: Path, spec: RunSpec) -> None:
    for snap in collect_snapshots(spec.scenario, spec.analysis_rounds):
        base = out / "snapshots" / f"round_{snap.round}"
        for sub in ("benign", "poisoned"):
            (base / sub).mkdir(parents=True, exist_ok=True)
        snap.phi_prev.save(base / "phi_prev.pvec")
        snap.phi.save(base / "phi.pvec")
        for i, (b, p) in enumerate(zip(snap.benign, snap.poisoned)):
            b.save(base / "benign" / f"client_{i:03d}.pvec")
            p.save(base / "poisoned" / f"client_{i:03d}.pvec")


def cmd_run(args) -> int:
    spec = load(args.config, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, args.config, spec, "run")
    logs, summary = run_scenario(spec.scenario, workers=args.workers)
    write_rounds_csv(logs, out / "rounds.csv")
    write_summary(out / "summary.csv", summary)
    if spec.analysis_rounds:
        export_snapshots(out, spec)
    log.info("acc %.4f asr %s", summary.acc, "n/a" if summary.asr is None else f"{summary.asr:.4f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    spec = load(args.config, args.seed)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("--values must list at least one value")
    try:
        scenarios = [with_axis(spec.scenario, args.axis, v) for v in values]
    except ValueError as exc:
        raise ConfigError(f"bad sweep value for {args.axis}: {exc}") from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, args.config, spec, "sweep", {"axis": args.axis, "values": values})
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["axis_value", "acc", "asr"])
        for v, scenario in zip(values, scenarios):
            _, summary = run_scenario(scenario, workers=args.workers)
            w.writerow([v, _fmt(summary.acc), _fmt(summary.asr)])
            fh.flush()
    return EXIT_OK


def _load_dir(path) -> list:
    files = sorted(Path(path).glob("*.pvec"))
    if not files:
        raise ConfigError(f"no .pvec files in {path}")
    return [ParamVector.load(f) for f in files]


def cmd_analyze(args) -> int:
    if args.buckets < 2:
        raise ConfigError("--buckets must be at least 2")
    phi_prev, phi = ParamVector.load(args.prev), ParamVector.load(args.cur)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    benign = rank_change_profile(phi_prev, phi, _load_dir(args.locals), args.buckets)
    benign.to_csv(out / "profile.csv")
    if args.poisoned:
        poisoned = rank_change_profile(phi_prev, phi, _load_dir(args.poisoned), args.buckets)
        poisoned.to_csv(out / "profile_poisoned.csv")
        disparity_profile(benign, poisoned).to_csv(out / "disparity.csv")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedsim", description="Federated poisoning-defense simulator")
    p.add_argument("--version", action="version", version=f"fedsim {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="scenario file (key = value lines)")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="override master_seed")
        sp.add_argument("--workers", type=int, default=1, help="parallel client steps (output unchanged)")

    run = sub.add_parser("run", help="run one scenario")
    common(run)
    run.set_defaults(func=cmd_run)

    sweep = sub.add_parser("sweep", help="rerun a scenario over one axis")
    common(sweep)
    sweep.add_argument("--axis", required=True, choices=SWEEP_AXES)
    sweep.add_argument("--values", required=True, help="comma-separated axis values")
    sweep.set_defaults(func=cmd_sweep)

    an = sub.add_parser("analyze", help="importance rank-change profiles from checkpoints")
    an.add_argument("--prev", required=True, help="global model before the last round (.pvec)")
    an.add_argument("--cur", required=True, help="current global model (.pvec)")
    an.add_argument("--locals", required=True, help="directory of benign local models (.pvec)")
    an.add_argument("--poisoned", default=None, help="directory of poisoned local models (.pvec)")
    an.add_argument("--buckets", type=int, default=50)
    an.add_argument("--out", required=True)
    an.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    if getattr(args, "workers", 1) < 1:
        print("error: --workers must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any failure past validation is a runtime error
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
