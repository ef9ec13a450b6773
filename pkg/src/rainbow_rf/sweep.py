"""Theory and simulation over an (alpha, lambda) grid, with byte-stable CSV
output and a JSON manifest.

Numbers are written with ``repr`` (shortest round-trip form) so that reruns
with the same scenario and seed produce identical bytes. Timings only go to
the manifest.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

from . import __version__
from .config import ScenarioConfig
from .equivalents import theory_gen_error
from .lab import ScenarioInstance, prepare_instance, run_replicates

SWEEP_COLUMNS = (
    "scenario",
    "alpha",
    "lambda",
    "m",
    "bias_term",
    "noise_term",
    "theory_gen_error",
    "emp_mean",
    "emp_stderr",
    "reps",
    "seed",
)


@dataclass
class SweepRow:
    scenario: str
    alpha: float
    lam: float
    m: float | None = None
    bias_term: float | None = None
    noise_term: float | None = None
    theory_gen_error: float | None = None
    emp_mean: float | None = None
    emp_stderr: float | None = None
    reps: int | None = None
    seed: int | None = None
    wall_seconds: float = 0.0
    status: str = "ok"

    def values(self) -> dict:
        return {
            "scenario": self.scenario,
            "alpha": self.alpha,
            "lambda": self.lam,
            "m": self.m,
            "bias_term": self.bias_term,
            "noise_term": self.noise_term,
            "theory_gen_error": self.theory_gen_error,
            "emp_mean": self.emp_mean,
            "emp_stderr": self.emp_stderr,
            "reps": self.reps,
            "seed": self.seed,
        }


@dataclass
class SweepResult:
    rows: list[SweepRow]
    metadata: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(r.status == "ok" for r in self.rows)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def rows_to_csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row.get(c)) for c in columns])
    return buf.getvalue()


def rows_to_json(rows: Sequence[dict], columns: Sequence[str]) -> str:
    return json.dumps([{c: row.get(c) for c in columns} for row in rows], indent=2) + "\n"


def run_sweep(
    scenarios: Sequence[ScenarioConfig],
    alphas: Sequence[float] | None = None,
    lambdas: Sequence[float] | None = None,
    *,
    simulate: bool = True,
    reps: int | None = None,
    seed: int | None = None,
    threads: int = 1,
) -> SweepResult:
    """Evaluate every (scenario, alpha, lambda) point.

    Each scenario samples one network pair and linearizes it once; theory and
    simulation at every grid point share that instance. A failing point is
    recorded with its error and does not stop the sweep.
    """
    rows: list[SweepRow] = []
    meta_scenarios = []
    for sc in scenarios:
        sc_seed = sc.seed if seed is None else seed
        grid_a = tuple(alphas) if alphas else sc.sample_ratios
        grid_l = tuple(lambdas) if lambdas else (sc.ridge_lambda,)
        n_reps = sc.replicates if reps is None else reps
        meta_scenarios.append(
            {"name": sc.name, "hash": sc.digest(), "seed": sc_seed, "alphas": list(grid_a), "lambdas": list(grid_l)}
        )
        inst: ScenarioInstance | None = None
        inst_error = None
        try:
            inst = prepare_instance(sc, sc_seed)
        except Exception as exc:
            inst_error = f"{type(exc).__name__}: {exc}"
        for lam in grid_l:
            sc_l = replace(sc, ridge_lambda=float(lam))
            for alpha in grid_a:
                row = SweepRow(sc.name, float(alpha), float(lam))
                t0 = time.perf_counter()
                try:
                    if inst is None:
                        raise RuntimeError(f"instance preparation failed: {inst_error}")
                    pred = theory_gen_error(inst.spectral_context(alpha), lam)
                    row.m = pred.solution.m
                    row.bias_term, row.noise_term = pred.bias_term, pred.noise_term
                    row.theory_gen_error = pred.gen_error
                    if simulate:
                        est = run_replicates(sc_l, alpha, n_reps, sc_seed, threads=threads, instance=inst)
                        row.emp_mean, row.emp_stderr, row.reps, row.seed = est.mean, est.stderr, est.reps, est.seed
                except Exception as exc:
                    row.status = f"error: {type(exc).__name__}: {exc}"
                row.wall_seconds = time.perf_counter() - t0
                rows.append(row)
    meta = {
        "library_version": __version__,
        "simulate": simulate,
        "scenarios": meta_scenarios,
        "points": [
            {"scenario": r.scenario, "alpha": r.alpha, "lambda": r.lam, "status": r.status, "wall_seconds": r.wall_seconds}
            for r in rows
        ],
    }
    return SweepResult(rows, meta)


def write_sweep(result: SweepResult, out_dir: str | Path, fmt: str = "csv", stem: str = "sweep") -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = [r.values() for r in result.rows]
    if fmt == "csv":
        body = rows_to_csv(data, SWEEP_COLUMNS)
    elif fmt == "json":
        body = rows_to_json(data, SWEEP_COLUMNS)
    else:
        raise ValueError(f"unknown format {fmt!r}")
    table = out / f"{stem}.{fmt}"
    table.write_text(body)
    manifest = out / f"{stem}.manifest.json"
    manifest.write_text(json.dumps(result.metadata, indent=2) + "\n")
    return [table, manifest]
