"""Oracle battery: every analytic prediction checked against an independent
reference (closed form, Monte Carlo, or a frozen high-sample golden value).

Each check returns a :class:`CheckResult`; a check that raises is recorded as
a failed row rather than propagating. The deterministic-equivalent functions
are injectable so that the harness itself can be mutation-tested.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import equivalents as eq
from . import moments
from .config import (
    CovarianceSpec,
    LayerSpec,
    RainbowSpec,
    ReadoutSpec,
    ScenarioConfig,
    WeightRule,
    fig1_scenario,
)
from .lab import (
    derive_seed,
    forward_features,
    parallel_map,
    prepare_instance,
    resolvent_functional_mc,
    ridge_fit,
    run_replicates,
)
from .linearization import CovarianceTriple

# 10^7-sample Monte Carlo means and standard errors (seed 20240101), frozen.
KAPPA_GOLDEN = {
    "kappa1(tanh, r=1)": (0.6056443163348475, 9.876752626323492e-05),
    "second_moment(tanh, r=0.7)": (0.330608789527431, 9.01607760709643e-05),
    "cross_moment(tanh, sign, 1, 1, 0.5)": (0.24801088202373908, 0.00018237950205498793),
    "kappa1(erf, r=1)": (0.6515142165198469, 0.0001204218844836982),
    "second_moment(erf, r=1)": (0.46465255849054304, 0.00010989644337856229),
}


@dataclass(frozen=True)
class Equivalents:
    gxz: Callable = eq.equiv_gxz
    gagb: Callable = eq.equiv_gagb
    xgomgx: Callable = eq.equiv_xgomgx
    zxgomgxz: Callable = eq.equiv_zxgomgxz
    resolvent: Callable = eq.resolvent_equivalent


@dataclass
class BatteryConfig:
    seed: int = 0
    threads: int = 1
    equivalents: Equivalents = field(default_factory=Equivalents)
    null_scenario: ScenarioConfig | None = None


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def mc_agrees(value: float, mean: float, stderr: float, rel: float = 0.05, n_sigma: float = 3.0) -> bool:
    """Agreement within the looser of a relative and a standard-error band."""
    return abs(value - mean) <= max(rel * abs(value), n_sigma * stderr)


# ---------------------------------------------------------------------------
# solver


def check_solver(cfg: BatteryConfig) -> tuple[bool, str]:
    ident = CovarianceTriple(np.eye(50), np.eye(50), np.zeros((50, 50)))
    m = eq.solve_m(eq.build_spectral_context(ident, alpha=1.0), 1.0).m
    golden = (math.sqrt(5.0) - 1.0) / 2.0
    ok_golden = abs(m - golden) <= 1e-10

    zero = CovarianceTriple(np.zeros((20, 20)), np.eye(3), np.zeros((20, 3)))
    lam0 = 0.37
    ok_zero = eq.solve_m(eq.build_spectral_context(zero, alpha=1.5), lam0).m == 1.0 / lam0

    p = 500
    omega = np.diag(np.arange(1, p + 1, dtype=np.float64) ** -0.5)
    triple = CovarianceTriple(omega, np.eye(2), np.zeros((p, 2)))
    worst = 0
    ok_bounds = True
    for alpha in (0.5, 2.0):
        ctx = eq.build_spectral_context(triple, alpha=alpha)
        for lam in np.logspace(-6, 2, 20):
            sol = eq.solve_m(ctx, lam)
            lo, hi = eq.m_bounds(ctx, lam)
            ok_bounds &= lo <= sol.m <= hi and 0 < sol.lam_m <= 1 and sol.denominator >= sol.lam_m - 1e-10
            worst = max(worst, sol.residual / (lam + float(np.mean(ctx.eigvals))))
    ok = ok_golden and ok_zero and ok_bounds
    return ok, (
        f"|m-golden|={abs(m - golden):.1e} zero-omega exact={ok_zero} "
        f"bounds on 2x20 grid={ok_bounds} max rel residual={worst:.1e}"
    )


# ---------------------------------------------------------------------------
# resolvent scaling


def mp_triple(p: int) -> CovarianceTriple:
    omega = np.diag(np.arange(1, p + 1, dtype=np.float64) ** -0.3)
    return CovarianceTriple(omega, np.eye(1), np.zeros((p, 1)))


def mp_observables(p: int, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(derive_seed(seed, p, "mp-observable"))
    a = rng.standard_normal((p, p))
    a *= math.sqrt(p) / np.linalg.norm(a)  # <|A|^2> = 1
    return {"identity": np.eye(p), "omega": mp_triple(p).omega, "random": a}


def check_mp_scaling(cfg: BatteryConfig, sizes=(400, 800), draws: int = 100, lam: float = 0.1) -> tuple[bool, str]:
    means = {}
    for p in sizes:
        triple = mp_triple(p)
        for name, a in mp_observables(p, cfg.seed).items():
            est = resolvent_functional_mc(
                "mp_law", triple, lam, {"A": a}, p, draws, derive_seed(cfg.seed, p, "mp"),
                threads=cfg.threads, absolute=True,
            )
            means[(name, p)] = est.mean
    ratios = {name: means[(name, sizes[1])] / means[(name, sizes[0])] for name in ("identity", "omega", "random")}
    ok = all(r <= 0.75 for r in ratios.values())
    return ok, " ".join(f"{k}={v:.3f}" for k, v in ratios.items()) + " (need <= 0.75)"


# ---------------------------------------------------------------------------
# multi-resolvent equivalents


def equiv_triple(p: int, k: int, seed: int) -> CovarianceTriple:
    rng = np.random.default_rng(derive_seed(seed, p, "equiv-triple"))
    om = np.arange(1, p + 1, dtype=np.float64) ** -0.4
    ps = np.arange(1, k + 1, dtype=np.float64) ** -0.2
    q, _ = np.linalg.qr(rng.standard_normal((p, k)))
    phi = 0.5 * np.sqrt(om)[:, None] * q * np.sqrt(ps)[None, :]
    return CovarianceTriple(np.diag(om), np.diag(ps), phi)


def _sym_noise(rng, n: int, scale: float) -> np.ndarray:
    g = rng.standard_normal((n, n))
    return scale * (g + g.T) / math.sqrt(2 * n)


EQUIV_KINDS = ("gxz", "gagb", "xgomgx", "zxgomgxz")


def check_equivalent(
    cfg: BatteryConfig, kind: str, p: int = 400, draws: int = 200, lam: float = 0.1
) -> tuple[bool, str]:
    n = k = p
    triple = equiv_triple(p, k, cfg.seed)
    rng = np.random.default_rng(derive_seed(cfg.seed, p, f"equiv-{kind}"))
    ctx = eq.build_spectral_context(triple, alpha=n / p)
    sol = eq.solve_m(ctx, lam)
    fns = cfg.equivalents
    if kind == "gxz":
        obs = {"A": triple.phi.T + 0.5 * rng.standard_normal((k, p)) / math.sqrt(p)}
        pred = fns.gxz(ctx, lam, obs["A"], sol)
    elif kind == "gagb":
        obs = {"A": np.eye(p) + _sym_noise(rng, p, 0.5), "B": triple.omega + _sym_noise(rng, p, 0.2)}
        pred = fns.gagb(ctx, lam, obs["A"], obs["B"], sol)
    elif kind == "xgomgx":
        obs = {"A": np.eye(n) + _sym_noise(rng, n, 0.5)}
        pred = fns.xgomgx(ctx, lam, obs["A"], sol)
    elif kind == "zxgomgxz":
        obs = {"A": np.eye(k) + _sym_noise(rng, k, 0.5)}
        pred = fns.zxgomgxz(ctx, lam, obs["A"], sol)
    else:
        raise ValueError(f"unknown equivalent {kind!r}")
    est = resolvent_functional_mc(kind, triple, lam, obs, n, draws, derive_seed(cfg.seed, p, kind), threads=cfg.threads)
    ok = mc_agrees(pred, est.mean, est.stderr)
    rel = abs(pred - est.mean) / abs(pred) if pred else float("inf")
    return ok, f"equiv={pred:.6g} mc={est.mean:.6g}+-{est.stderr:.2g} rel={rel:.2%}"


# ---------------------------------------------------------------------------
# linearization decay


def decay_scenario(d: int) -> ScenarioConfig:
    """One tanh student layer mixed half-and-half with the first layer of a
    two-layer tanh teacher, so the cross covariance is half the teacher's.

    The input covariance has a quarter of its spectrum at 64 and the rest at
    1: heterogeneous row variances keep the linearization error visible above
    the sampling floor of a finite-sample covariance estimate.
    """
    values = tuple(64.0 if i < d // 4 else 1.0 for i in range(d))
    inp = CovarianceSpec("diagonal", values=values)
    teacher = RainbowSpec(
        layers=(
            LayerSpec(d, "tanh", WeightRule.fresh(CovarianceSpec.power_law(0.3))),
            LayerSpec(d, "tanh", WeightRule.fresh(CovarianceSpec.identity())),
        ),
        input_dim=d,
        input_covariance=inp,
        readout=ReadoutSpec(),
    )
    mixed = WeightRule("mixed", cov=CovarianceSpec.identity(), layer=1, fresh_coeff=0.5, teacher_coeff=0.5)
    student = RainbowSpec(layers=(LayerSpec(d, "tanh", mixed),), input_dim=d, input_covariance=inp, readout=ReadoutSpec())
    return ScenarioConfig(
        name=f"decay-d{d}",
        teacher=teacher,
        student=student,
        ridge_lambda=1e-2,
        sample_ratios=(1.0,),
        covariance_budget=64.0,
    )


def empirical_discrepancy(d: int, seed: int, samples: int = 200_000, chunk: int = 10_000, threads: int = 1):
    """Frobenius discrepancies between sampled and linearized covariances.

    Returns ``{name: (raw, debiased)}`` for ``omega_1``, ``psi_2`` and
    ``phi_2``, each normalized by the linearized matrix. ``debiased`` pairs
    two independent half-sample estimates, removing the sampling floor.
    """
    sc = decay_scenario(d)
    inst = prepare_instance(sc, seed)
    pair, lin = inst.pair, inst.linearization
    target = {"omega_1": lin.omegas[-1], "psi_2": lin.psis[-1], "phi_2": lin.phis[-1]}
    s_var, t_var = lin.ladder.r, lin.ladder.r_teacher

    def one(i: int):
        rng = np.random.default_rng(derive_seed(seed, i, "decay-samples"))
        x = inst.input_root @ rng.standard_normal((d, chunk))
        f = forward_features(pair.student, x, s_var)
        g = forward_features(pair.teacher, x, t_var)
        return f @ f.T, g @ g.T, f @ g.T

    n_chunks = samples // chunk
    parts = parallel_map(one, n_chunks, threads)
    halves = []
    for h in (0, 1):
        sel = parts[h::2]
        halves.append([sum(p[j] for p in sel) / (len(sel) * chunk) for j in range(3)])
    out = {}
    for j, (name, lin_mat) in enumerate(target.items()):
        a, b = halves[0][j], halves[1][j]
        norm = np.linalg.norm(lin_mat)
        raw = np.linalg.norm(0.5 * (a + b) - lin_mat) / norm
        cross = float(np.sum((a - lin_mat) * (b - lin_mat)))
        out[name] = (float(raw), math.sqrt(max(cross, 0.0)) / norm)
    return out


def check_linearization_decay(cfg: BatteryConfig, sizes=(100, 400), samples: int = 200_000) -> tuple[bool, str]:
    small = empirical_discrepancy(sizes[0], cfg.seed, samples, threads=cfg.threads)
    large = empirical_discrepancy(sizes[1], cfg.seed, samples, threads=cfg.threads)
    ratios = {k: large[k][0] / small[k][0] for k in small}
    debiased = {k: large[k][1] / small[k][1] for k in small}
    ok = all(r <= 0.7 for r in ratios.values())
    detail = " ".join(f"{k}={ratios[k]:.3f}" for k in ratios) + " (need <= 0.7); split-sample " + " ".join(
        f"{k}={debiased[k]:.3f}" for k in debiased
    )
    return ok, detail


# ---------------------------------------------------------------------------
# kappa coefficients


def kappa_values() -> dict[str, float]:
    return {
        "kappa1(tanh, r=1)": moments.kappa1("tanh", 1.0),
        "second_moment(tanh, r=0.7)": moments.second_moment("tanh", 0.7),
        "cross_moment(tanh, sign, 1, 1, 0.5)": moments.cross_moment("tanh", "sign", 1.0, 1.0, 0.5),
        "kappa1(erf, r=1)": moments.kappa1("erf", 1.0),
        "second_moment(erf, r=1)": moments.second_moment("erf", 1.0),
    }


def check_kappa(cfg: BatteryConfig) -> tuple[bool, str]:
    sign = moments.kappa_layer("sign", 1.0)
    ok_sign = abs(sign.kappa1 - math.sqrt(2 / math.pi)) <= 1e-10 and abs(
        sign.kappa_star_sq - (1 - 2 / math.pi)
    ) <= 1e-10
    z = {name: (val - KAPPA_GOLDEN[name][0]) / KAPPA_GOLDEN[name][1] for name, val in kappa_values().items()}
    ok_mc = all(abs(v) <= 3 for v in z.values())

    # raw Hermite rule on E tanh(N)^2, then the adaptive library values
    x, w = moments.gauss_hermite(128)
    y, v = moments.gauss_hermite(256)
    raw = abs(float(w @ np.tanh(x) ** 2) - float(v @ np.tanh(y) ** 2))
    worst = 0.0
    for act, r in (("tanh", 1.0), ("tanh", 4.0), ("tanh", 30.0), ("erf", 1.0), ("erf", 0.3)):
        for fn in (moments.kappa1, moments.second_moment):
            lo, hi = fn(act, r, order=200), fn(act, r, order=400)
            worst = max(worst, abs(hi - lo) / abs(hi))
    lo = moments.cross_moment("tanh", "sign", 1.0, 1.0, 0.5, order=200)
    hi = moments.cross_moment("tanh", "sign", 1.0, 1.0, 0.5, order=400)
    worst = max(worst, abs(hi - lo) / abs(hi))
    ok_order = worst <= 1e-10 and raw <= 1e-12
    return ok_sign and ok_mc and ok_order, (
        f"sign closed forms={ok_sign} max |z| vs MC={max(abs(v) for v in z.values()):.2f} "
        f"order doubling rel={worst:.1e} hermite 128/256={raw:.1e}"
    )


# ---------------------------------------------------------------------------
# ridge


def check_ridge(cfg: BatteryConfig, instances: int = 20) -> tuple[bool, str]:
    rng = np.random.default_rng(derive_seed(cfg.seed, 0, "ridge"))
    worst_res = worst_gap = 0.0
    for _ in range(instances):
        p, n = rng.integers(20, 400, size=2)
        while p == n:
            n = rng.integers(20, 400)
        lam = 10 ** rng.uniform(-3, 0)
        x = rng.standard_normal((p, n))
        y = rng.standard_normal(n)
        primal = ridge_fit(x, y, lam, "primal")
        dual = ridge_fit(x, y, lam, "dual")
        scale = np.linalg.norm(x @ y) / math.sqrt(p)
        worst_res = max(worst_res, primal.residual / scale, dual.residual / scale)
        worst_gap = max(worst_gap, np.linalg.norm(primal.theta_hat - dual.theta_hat) / np.linalg.norm(primal.theta_hat))
    ok = worst_res <= 1e-8 and worst_gap <= 1e-8
    return ok, f"max rel residual={worst_res:.1e} max primal/dual gap={worst_gap:.1e}"


# ---------------------------------------------------------------------------
# null predictor


def check_null_predictor(cfg: BatteryConfig, reps: int = 40, alphas: Sequence[float] = (0.5, 2.0)) -> tuple[bool, str]:
    from dataclasses import replace

    base = cfg.null_scenario or fig1_scenario(0.5, dim=200)
    sc = replace(base, ridge_lambda=1e6)
    inst = prepare_instance(sc, cfg.seed)
    rows, ok = [], True
    for alpha in alphas:
        ctx = inst.spectral_context(alpha)
        theory = eq.theory_gen_error(ctx, sc.ridge_lambda).gen_error
        null = float(ctx.theta @ ctx.psi @ ctx.theta) / ctx.k
        est = run_replicates(sc, alpha, reps, cfg.seed, instance=inst, threads=cfg.threads)
        z = (est.mean - theory) / est.stderr if est.stderr > 0 else 0.0
        ok &= abs(theory - null) <= 0.01 * abs(null) and abs(est.mean - theory) <= 3 * est.stderr
        rows.append(f"a={alpha}: theory/null-1={theory / null - 1:.1e} z={z:.2f}")
    return ok, "; ".join(rows)


# ---------------------------------------------------------------------------


CHECKS: dict[str, Callable[[BatteryConfig], tuple[bool, str]]] = {
    "solver": check_solver,
    "mp-scaling": check_mp_scaling,
    **{f"equiv-{k}": (lambda c, k=k: check_equivalent(c, k)) for k in EQUIV_KINDS},
    "linearization-decay": check_linearization_decay,
    "kappa-oracles": check_kappa,
    "ridge": check_ridge,
    "null-predictor": check_null_predictor,
}


def run_battery(cfg: BatteryConfig | None = None, only: Sequence[str] | None = None) -> list[CheckResult]:
    cfg = cfg or BatteryConfig()
    names = list(CHECKS) if not only else list(only)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise KeyError(f"unknown checks {unknown}; available: {', '.join(CHECKS)}")
    results = []
    for name in names:
        t0 = time.perf_counter()
        try:
            passed, detail = CHECKS[name](cfg)
        except Exception as exc:  # a crashing check is a failed row
            passed, detail = False, f"error: {type(exc).__name__}: {exc}"
        results.append(CheckResult(name, bool(passed), detail, time.perf_counter() - t0))
    return results


def format_table(results: Sequence[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  status  seconds  detail"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL':<6}  {r.seconds:7.1f}  {r.detail}")
    return "\n".join(lines)
