"""``bmc`` command-line front-end.

Exit codes: 0 success, 2 configuration or precondition error (nothing
computed), 3 a study verdict failed or the run aborted (outputs written,
plus a ``<study>.FAILED`` marker).  All files go below ``--out``.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import convergence_lab as lab
from .boundary import BoundaryError
from .branching import BranchingError
from .config import DEFAULT_CONFIG, ConfigError, RunConfig, from_dict, load
from .population import PopulationError
from .simulator import records_to_csv
from .state_space import StateSpaceError

SUBCOMMANDS = ("simulate", "martingale", "positivity", "boundary", "disappear", "gw", "green", "inequalities", "check", "boundary-table")

# errors raised while building the model from a valid-looking config
SETUP_ERRORS = (ConfigError, lab.StudyError, StateSpaceError, BranchingError, PopulationError, BoundaryError)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bmc", description="Branching Markov chain experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", type=Path, help="JSON config file (default: built-in example)")
        s.add_argument("--seed", type=int, help="master seed (unsigned 64-bit), overrides the config")
        s.add_argument("--out", type=Path, default=Path("bmc-out"), help="output directory")
        s.add_argument("--format", choices=("csv", "json"), help="output format (default from config, else json)")
        s.add_argument("--threads", type=int, default=None, help="worker processes (env BMC_THREADS overrides)")
        if name == "boundary-table":
            s.add_argument("--depth", type=int, required=True, help="cylinder depth")
            s.add_argument("--normalized", action="store_true", help="divide by the total mass")
    return p


def _load(args) -> RunConfig:
    study = args.command
    if args.config is None:
        return from_dict(DEFAULT_CONFIG, study=study, seed=args.seed, fmt=args.format)
    return load(args.config, study=study, seed=args.seed, fmt=args.format)


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _emit(rep: lab.StudyReport, out: Path, name: str, fmt: str) -> list[Path]:
    files = []
    if fmt == "json":
        files.append(out / f"{name}.json")
        _write(files[-1], rep.to_json())
    else:
        files += [out / f"{name}_per_n.csv", out / f"{name}_verdicts.csv", out / f"{name}_config.json"]
        _write(files[0], rep.per_n_csv())
        _write(files[1], rep.verdicts_csv())
        _write(files[2], json.dumps(rep.config, indent=1, sort_keys=True) + "\n")
    return files


def _summary(rep: lab.StudyReport, stream) -> None:
    for v in rep.verdicts:
        tag = "INFO" if v.passed is None else ("PASS" if v.passed else "FAIL")
        print(f"{tag} {rep.study}:{v.name} statistic={v.statistic!r} threshold={v.threshold!r} n={v.sample_size}", file=stream)


def _mark_failed(out: Path, name: str, reason: str) -> None:
    _write(out / f"{name}.FAILED", reason.rstrip() + "\n")


def _run_one(cfg: RunConfig, args, out: Path) -> int:
    name = args.command
    fmt = cfg.format
    if name == "boundary-table":
        tab = lab.boundary_table(cfg, args.depth, args.normalized)
        if fmt == "json":
            rows = [{"anchor_word": w, "depth": d, "mass": m} for w, d, m in tab.rows()]
            _write(out / "boundary_table.json", json.dumps({"config": cfg.echo(), "rows": rows}, indent=1, sort_keys=True) + "\n")
        else:
            _write(out / "boundary_table.csv", tab.to_csv())
        print(f"wrote boundary table to depth {args.depth} ({len(tab.mass)} cylinders)")
        return 0
    if name == "check":
        rep = lab.invariant_suite(cfg)
    elif name == "simulate":
        rep, sim, watched = lab.simulate_study(cfg, threads=args.threads)
        if fmt == "csv":
            _write(out / "simulate_trajectories.csv", records_to_csv(sim.records, f"seed{cfg.seed}", watched))
    else:
        rep = lab.STUDIES[name](cfg, threads=args.threads)
    _emit(rep, out, name, fmt)
    _summary(rep, sys.stdout)
    if name == "check":
        n = len(rep.verdicts)
        ok = sum(v.passed is True for v in rep.verdicts)
        print(f"invariant suite: {ok}/{n} exact identities passed")
    if not rep.passed:
        failed = [v.name for v in rep.verdicts if v.passed is False]
        _mark_failed(out, name, "failed verdicts: " + ", ".join(failed))
        return 3
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load(args)
        runs = cfg.sweep()
    except SETUP_ERRORS as e:
        print(f"bmc: {e}", file=sys.stderr)
        return 2
    out: Path = args.out
    codes = []
    index = []
    for i, rc in enumerate(runs):
        target = out if len(runs) == 1 else out / f"run_{i:03d}"
        try:
            code = _run_one(rc, args, target)
        except SETUP_ERRORS as e:
            print(f"bmc: {e}", file=sys.stderr)
            return 2
        except Exception as e:  # noqa: BLE001 - the marker records any abort
            _mark_failed(target, args.command, f"{type(e).__name__}: {e}")
            print(f"bmc: run aborted: {type(e).__name__}: {e}", file=sys.stderr)
            code = 3
        codes.append(code)
        index.append({"run": i, "dir": str(target.relative_to(out)) if target != out else ".", "seed": rc.seed, "exit": code})
    if len(runs) > 1:
        _write(out / "sweep.json", json.dumps({"runs": index}, indent=1, sort_keys=True) + "\n")
    return max(codes) if codes else 0


if __name__ == "__main__":
    sys.exit(main())
