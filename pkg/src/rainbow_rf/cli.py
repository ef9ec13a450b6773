"""Command line entry point ``rainbow-rf``.

Exit codes: 0 success, 1 computation failure, 2 usage error (bad flags,
unknown preset, invalid scenario or missing input files).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import FIG1_GAMMAS, ScenarioConfig, ScenarioError, load_preset, load_scenario, preset_names
from .linearization import Network, effective_linear_net, linearize_pair
from .matrix_io import MatrixFormatError, read_matrix, write_matrix
from .sweep import SWEEP_COLUMNS, rows_to_csv, rows_to_json, run_sweep, write_sweep

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
PRESET_FAMILIES = ("fig1", "fig1caption")


class UsageError(Exception):
    pass


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _common(parser: argparse.ArgumentParser) -> None:
    g = parser.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=None, help="master seed (default: scenario seed)")
    g.add_argument("--threads", type=int, default=None, help="worker threads (env RAINBOW_THREADS, default 1)")
    g.add_argument("--out", default=None, help="output directory")
    g.add_argument("--format", choices=("csv", "json"), default="csv")


def _scenario_args(parser: argparse.ArgumentParser, required: bool = True) -> None:
    parser.add_argument("scenario", nargs="?", help="scenario JSON file")
    parser.add_argument("--preset", help=f"built-in preset: a full name or a family {PRESET_FAMILIES} with --gamma")
    parser.add_argument("--gamma", type=float, default=None, help="power-law exponent for a preset family")
    parser.add_argument("--dim", type=int, default=None, help="override every width and the input dimension")
    parser.set_defaults(scenario_required=required)


def _grid_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--alpha", type=_float_list, default=None, help="comma-separated sample ratios n/p")
    parser.add_argument("--lambda", dest="lambdas", type=_float_list, default=None, help="comma-separated ridge penalties")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rainbow-rf", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("theory", help="asymptotic test error on an alpha grid")
    _scenario_args(p)
    _grid_args(p)
    _common(p)

    p = sub.add_parser("simulate", help="Monte Carlo test error on an alpha grid")
    _scenario_args(p)
    _grid_args(p)
    p.add_argument("--reps", type=int, default=None)
    _common(p)

    p = sub.add_parser("sweep", help="theory and (optionally) simulation, CSV plus manifest")
    _scenario_args(p)
    _grid_args(p)
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--simulate", dest="simulate", action="store_true", default=True)
    p.add_argument("--no-simulate", dest="simulate", action="store_false")
    _common(p)

    p = sub.add_parser("linearize", help="linearized covariances for weights stored as RBM1 files")
    _scenario_args(p)
    p.add_argument("--weights", required=True, help="directory with student_<l>.rbm and teacher_<l>.rbm")
    _common(p)

    p = sub.add_parser("verify-equivalents", help="run the oracle battery")
    _scenario_args(p, required=False)
    p.add_argument("--only", action="append", default=None, help="run only these checks (repeatable, comma-separated)")
    _common(p)
    return parser


# ---------------------------------------------------------------------------


def resolve_scenarios(args) -> list[ScenarioConfig]:
    if args.scenario and args.preset:
        raise UsageError("give either a scenario file or --preset, not both")
    if args.preset:
        if args.preset in PRESET_FAMILIES:
            gammas = [args.gamma] if args.gamma is not None else list(FIG1_GAMMAS)
            names = [f"{args.preset}-gamma{g}" for g in gammas]
        else:
            if args.gamma is not None:
                raise UsageError("--gamma only applies to a preset family")
            names = [args.preset]
        known = preset_names()
        for name in names:
            if name not in known:
                raise UsageError(f"unknown preset {name!r}; available: {', '.join(known)}")
        scenarios = [load_preset(n) for n in names]
    elif args.scenario:
        try:
            scenarios = [load_scenario(args.scenario)]
        except FileNotFoundError:
            raise UsageError(f"scenario file not found: {args.scenario}") from None
    elif args.scenario_required:
        raise UsageError("a scenario file or --preset is required")
    else:
        return []
    if args.dim is not None:
        try:
            scenarios = [s.with_dim(args.dim) for s in scenarios]
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    return scenarios


def _threads(args) -> int:
    value = args.threads
    if value is None:
        env = os.environ.get("RAINBOW_THREADS")
        try:
            value = int(env) if env else 1
        except ValueError:
            raise UsageError(f"RAINBOW_THREADS must be an integer, got {env!r}") from None
    if value < 1:
        raise UsageError(f"--threads must be >= 1, got {value}")
    return value


def _emit(text: str, args, filename: str) -> None:
    if args.out is None:
        sys.stdout.write(text)
        return
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / filename).write_text(text)


def _table(rows: list[dict], columns: Sequence[str], args) -> str:
    return rows_to_csv(rows, columns) if args.format == "csv" else rows_to_json(rows, columns)


THEORY_COLUMNS = ("scenario", "alpha", "lambda", "m", "bias_term", "noise_term", "gen_error")
SIMULATE_COLUMNS = ("scenario", "alpha", "emp_mean", "emp_stderr", "reps", "seed")


def cmd_theory(args) -> int:
    scenarios = resolve_scenarios(args)
    res = run_sweep(scenarios, args.alpha, args.lambdas, simulate=False, seed=args.seed, threads=_threads(args))
    rows = [dict(r.values(), gen_error=r.theory_gen_error) for r in res.rows]
    _emit(_table(rows, THEORY_COLUMNS, args), args, f"theory.{args.format}")
    return _report(res)


def cmd_simulate(args) -> int:
    scenarios = resolve_scenarios(args)
    res = run_sweep(
        scenarios, args.alpha, args.lambdas, simulate=True, reps=args.reps, seed=args.seed, threads=_threads(args)
    )
    rows = [r.values() for r in res.rows]
    _emit(_table(rows, SIMULATE_COLUMNS, args), args, f"simulate.{args.format}")
    return _report(res)


def cmd_sweep(args) -> int:
    scenarios = resolve_scenarios(args)
    threads = _threads(args)
    res = run_sweep(
        scenarios, args.alpha, args.lambdas, simulate=args.simulate, reps=args.reps, seed=args.seed, threads=threads
    )
    if args.out is None:
        sys.stdout.write(_table([r.values() for r in res.rows], SWEEP_COLUMNS, args))
    else:
        write_sweep(res, args.out, args.format)
    return _report(res)


def _report(res) -> int:
    failed = [r for r in res.rows if r.status != "ok"]
    for r in failed:
        print(f"{r.scenario} alpha={r.alpha} lambda={r.lam}: {r.status}", file=sys.stderr)
    return EXIT_OK if not failed else EXIT_FAIL


def load_network_weights(weights_dir: Path, prefix: str, depth: int) -> list[np.ndarray]:
    mats = []
    for i in range(1, depth + 1):
        path = weights_dir / f"{prefix}_{i}.rbm"
        if not path.exists():
            raise UsageError(f"missing weight file {path}")
        mats.append(read_matrix(path))
    return mats


def _optional(weights_dir: Path, name: str) -> np.ndarray | None:
    path = weights_dir / name
    return read_matrix(path) if path.exists() else None


def linearize_from_dir(scenario: ScenarioConfig, weights_dir: str | Path):
    """Load RBM1 weights (and any declared covariances) and linearize.

    Files: ``student_<l>.rbm``, ``teacher_<l>.rbm``; optional
    ``student_cov_<l>.rbm``, ``teacher_cov_<l>.rbm`` and ``cross_cov_<l>.rbm``
    declare row covariances, which are otherwise estimated from the weights.
    """
    from .config import materialize_covariance

    wd = Path(weights_dir)
    if not wd.is_dir():
        raise UsageError(f"weights directory not found: {wd}")
    s_w = load_network_weights(wd, "student", scenario.student.depth)
    t_w = load_network_weights(wd, "teacher", scenario.teacher.depth)
    s_cov = [_optional(wd, f"student_cov_{i}.rbm") for i in range(1, len(s_w) + 1)]
    t_cov = [_optional(wd, f"teacher_cov_{i}.rbm") for i in range(1, len(t_w) + 1)]
    cross = {}
    for i in range(1, min(len(s_w), len(t_w)) + 1):
        c = _optional(wd, f"cross_cov_{i}.rbm")
        if c is not None:
            cross[i] = c
    student = Network(s_w, [l.activation for l in scenario.student.layers], s_cov)
    teacher = Network(t_w, [l.activation for l in scenario.teacher.layers], t_cov)
    omega0 = materialize_covariance(scenario.input_covariance, scenario.input_dim)
    lin = linearize_pair(student, teacher, omega0, cross)
    eff = effective_linear_net(student.weights, lin.ladder.student)
    return lin, eff


def cmd_linearize(args) -> int:
    scenarios = resolve_scenarios(args)
    if len(scenarios) != 1:
        raise UsageError("linearize needs exactly one scenario")
    if args.out is None:
        raise UsageError("linearize needs --out")
    sc = scenarios[0]
    try:
        lin, eff = linearize_from_dir(sc, args.weights)
    except (MatrixFormatError, ValueError) as exc:
        if isinstance(exc, ScenarioError):
            raise
        print(f"linearize failed: {exc}", file=sys.stderr)
        return EXIT_FAIL
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_matrix(lin.triple.omega, out / "omega.rbm")
    write_matrix(lin.triple.psi, out / "psi.rbm")
    write_matrix(lin.triple.phi, out / "phi.rbm")
    write_matrix(eff.w_eff, out / "w_eff.rbm")
    write_matrix(eff.c_eff, out / "c_eff.rbm")
    sidecar = {"scenario": sc.name, "scenario_hash": sc.digest(), "library_version": __version__}
    sidecar.update(lin.ladder.to_dict())
    (out / "kappa_ladder.json").write_text(json.dumps(sidecar, indent=2) + "\n")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import CHECKS, BatteryConfig, format_table, run_battery

    scenarios = resolve_scenarios(args)
    only = None
    if args.only:
        only = [name.strip() for chunk in args.only for name in chunk.split(",") if name.strip()]
        unknown = [n for n in only if n not in CHECKS]
        if unknown:
            raise UsageError(f"unknown checks {unknown}; available: {', '.join(CHECKS)}")
    cfg = BatteryConfig(
        seed=0 if args.seed is None else args.seed,
        threads=_threads(args),
        null_scenario=scenarios[0] if scenarios else None,
    )
    results = run_battery(cfg, only)
    table = format_table(results)
    print(table)
    if args.out is not None:
        rows = [{"check": r.name, "passed": r.passed, "seconds": r.seconds, "detail": r.detail} for r in results]
        _emit(_table(rows, ("check", "passed", "seconds", "detail"), args), args, f"verify.{args.format}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


COMMANDS = {
    "theory": cmd_theory,
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "linearize": cmd_linearize,
    "verify-equivalents": cmd_verify,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ScenarioError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
