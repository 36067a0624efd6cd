"""Command-line entry point.

Exit codes: 0 success, 1 usage error (bad flags, config, or inputs such as a
checkpoint that does not fit the requested env), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import subprocess
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, load_config, parse_list, write_ini
from .experiments import (
    ExperimentError,
    run_convergence,
    run_eval,
    run_openloop,
    run_sweep_crep,
    run_train,
    write_json,
)
from .plotting import PlotError, plot_files

log = logging.getLogger("mfcswarm")

MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT = "mfcswarm.manifest"

COMMANDS = {
    "train": run_train,
    "eval": run_eval,
    "convergence": run_convergence,
    "openloop": run_openloop,
    "sweep-crep": run_sweep_crep,
}


class UsageError(Exception):
    pass


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _git_describe() -> str | None:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=5,
        )
    except (OSError, subprocess.SubprocessError):
        return None
    return out.stdout.strip() or None


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _seeds(cfg: dict) -> list[int]:
    return [int(cfg["run"]["seed"])]


def run_command(command: str, cfg: dict, out: Path) -> dict:
    """Run one experiment command with a manifest written before and after."""
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": 1,
        "command": command,
        "package_version": __version__,
        "git": _git_describe(),
        "config": cfg,
        "seeds": _seeds(cfg),
        "started_at": _now(),
        "finished_at": None,
        "status": "running",
        "files": [],
    }
    write_json(out / MANIFEST_NAME, manifest)
    write_ini(cfg, out / "config.ini")
    try:
        summary, files = COMMANDS[command](cfg, out)
    except Exception as exc:
        manifest.update(status="failed", finished_at=_now(), error=f"{type(exc).__name__}: {exc}")
        write_json(out / MANIFEST_NAME, manifest)
        raise
    files = ["config.ini", *files]
    manifest.update(
        status="complete",
        finished_at=_now(),
        files=[{"path": f, "sha256": _sha256(out / f)} for f in files if (out / f).exists()],
    )
    write_json(out / MANIFEST_NAME, manifest)
    return summary


def run_plot(csvs: list[str], out: Path | None) -> list[Path]:
    target = out or Path(csvs[0]).parent
    target.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": 1,
        "command": "plot",
        "package_version": __version__,
        "git": _git_describe(),
        "inputs": [{"path": str(Path(c).resolve()), "sha256": _sha256(Path(c)) if Path(c).is_file() else None}
                   for c in csvs],
        "started_at": _now(),
        "finished_at": None,
        "status": "running",
        "files": [],
    }
    name = "plot_manifest.json"
    write_json(target / name, manifest)
    try:
        written = plot_files(csvs, target)
    except Exception as exc:
        manifest.update(status="failed", finished_at=_now(), error=f"{type(exc).__name__}: {exc}")
        write_json(target / name, manifest)
        raise
    manifest.update(
        status="complete",
        finished_at=_now(),
        files=[{"path": p.name, "sha256": _sha256(p)} for p in written],
    )
    write_json(target / name, manifest)
    return written


def _overrides(args) -> dict:
    ov = {
        ("run", "seed"): args.seed,
        ("run", "out"): args.out,
        ("run", "checkpoint"): args.checkpoint,
        ("run", "episodes"): args.episodes,
        ("env", "kind"): args.env,
        ("env", "n_agents"): args.agents,
        ("ppo", "iterations"): getattr(args, "iters", None),
    }
    if args.marl:
        ov[("run", "marl")] = True
    if args.stochastic:
        ov[("run", "deterministic")] = False
    try:
        if args.n_list:
            ov[("run", "n_list")] = parse_list(args.n_list, int)
        if args.crep_list:
            ov[("run", "crep_list")] = parse_list(args.crep_list, float)
        if args.t_list:
            ov[("run", "t_list")] = parse_list(args.t_list, int)
    except ValueError as exc:
        raise UsageError(f"bad list value: {exc}") from exc
    return ov


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="INI config file or a run manifest.json")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", metavar="DIR")
    p.add_argument("--env", choices=["aggregation", "formation", "taskalloc"])
    p.add_argument("--agents", type=int, help="number of agents N")
    p.add_argument("--marl", action="store_true", help="parameter-shared per-agent PPO")
    p.add_argument("--checkpoint", metavar="PATH")
    p.add_argument("--episodes", type=int)
    p.add_argument("--n-list", metavar="CSV", help="comma-separated swarm sizes")
    p.add_argument("--crep-list", metavar="CSV", help="comma-separated repulsion coefficients")
    p.add_argument("--t-list", metavar="CSV", help="comma-separated time indices (convergence)")
    p.add_argument("--iters", type=int, help="training iterations")
    p.add_argument("--stochastic", action="store_true", help="sample high-level actions during evaluation")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfcswarm", description="Mean-field swarm control experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "train": "train a policy with PPO",
        "eval": "evaluate a checkpoint on several swarm sizes",
        "convergence": "finite-N reward gap to a large particle reference",
        "openloop": "record an open-loop sequence and compare against closed loop",
        "sweep-crep": "collision avoidance sweep over repulsion coefficients",
    }
    for name, text in helps.items():
        _add_common(sub.add_parser(name, help=text))
    p = sub.add_parser("plot", help="render SVG figures from result CSVs")
    p.add_argument("csv", nargs="+", help="CSV files produced by other commands")
    p.add_argument("--out", metavar="DIR")
    p.add_argument("-v", "--verbose", action="store_true")
    p = sub.add_parser("rerun", help="repeat a run exactly from its manifest")
    p.add_argument("manifest")
    p.add_argument("--out", metavar="DIR", required=True)
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        if args.command == "plot":
            written = run_plot(args.csv, Path(args.out) if args.out else None)
            print("\n".join(str(p) for p in written))
            return 0
        if args.command == "rerun":
            try:
                with open(args.manifest) as fh:
                    doc = json.load(fh)
            except (OSError, json.JSONDecodeError) as exc:
                raise UsageError(f"cannot read manifest {args.manifest}: {exc}") from exc
            if doc.get("format") != MANIFEST_FORMAT:
                raise UsageError(f"{args.manifest} is not a run manifest")
            command = doc["command"]
            if command == "plot":
                written = run_plot([i["path"] for i in doc["inputs"]], Path(args.out))
                print("\n".join(str(p) for p in written))
                return 0
            cfg = load_config(args.manifest, {("run", "out"): args.out})
        else:
            command = args.command
            cfg = load_config(args.config, _overrides(args))
        summary = run_command(command, cfg, Path(cfg["run"]["out"]))
        print(json.dumps(summary, indent=2, sort_keys=True, default=float))
        return 0
    except (UsageError, ConfigError, ExperimentError, PlotError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # any other failure is a runtime failure, exit 2
        log.debug("command failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
