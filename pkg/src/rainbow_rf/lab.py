"""Monte Carlo ground truth: sample rainbow networks and Gaussian data, fit
ridge regression in closed form and measure test errors and resolvent
functionals.

Randomness is split into independent streams. A child seed is the first 8
bytes (little-endian) of ``blake2b(f"{master}:{replicate}:{tag}")``, so
replicates can run in any order on any number of threads and still reduce to
bit-identical results.
"""

from __future__ import annotations

import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import linalg
from threadpoolctl import threadpool_limits

from .activations import get_activation
from .config import (
    RainbowSpec,
    ScenarioConfig,
    ScenarioError,
    materialize_covariance,
)
from .equivalents import build_spectral_context, solve_m
from .linearization import CovarianceTriple, Linearization, Network, linearize_pair
from .matrix_io import read_matrix

RIDGE_RESIDUAL_TOL = 1e-8
JOINT_CLIP = 1e-10


def derive_seed(master: int, replicate: int, tag: str) -> int:
    digest = hashlib.blake2b(f"{int(master)}:{int(replicate)}:{tag}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def _rng(master: int, replicate: int, tag: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, replicate, tag))


# ---------------------------------------------------------------------------
# network sampling


def _sym_sqrt(cov: np.ndarray) -> np.ndarray:
    if np.count_nonzero(cov - np.diag(np.diag(cov))) == 0:
        return np.diag(np.sqrt(np.clip(np.diag(cov), 0.0, None)))
    w, u = np.linalg.eigh(cov)
    return (u * np.sqrt(np.clip(w, 0.0, None))) @ u.T


@dataclass
class SampledNetworkPair:
    """Realized student and teacher weights plus target vector.

    ``cross_covs`` maps 1-based shared layer indices to the exact cross
    covariance implied by the sampling rules. ``provenance`` records, per
    network, how each layer was produced.
    """

    student: Network
    teacher: Network
    theta: np.ndarray
    cross_covs: dict[int, np.ndarray]
    provenance: dict[str, list[str]]


def _sample_net(
    spec: RainbowSpec,
    which: str,
    rng: np.random.Generator,
    budget: float,
    teacher: tuple | None,
    next_root: list[int],
):
    """Sample one network; each layer is ``sum_r Z_r A_r`` over root draws ``Z_r``."""
    weights: list[np.ndarray] = []
    covs: list[np.ndarray] = []
    parts: list[dict[str, np.ndarray]] = []
    prov: list[str] = []
    for i, layer in enumerate(spec.layers, start=1):
        p_in = spec.layer_input_dim(i)
        rule = layer.weight_rule
        where = f"{which}.layers[{i - 1}]"
        context = {j: weights[j - 1] for j in range(1, i)}

        def fresh(cov: np.ndarray, coeff: float = 1.0) -> tuple[np.ndarray, str, np.ndarray]:
            root = f"z{next_root[0]}"
            next_root[0] += 1
            a = coeff * _sym_sqrt(cov)
            z = rng.standard_normal((layer.width, p_in)) / math.sqrt(p_in)
            return z @ a, root, a

        if rule.rule == "tied":
            w, part, cov = weights[rule.layer - 1], parts[rule.layer - 1], covs[rule.layer - 1]
            prov.append(f"tied:{rule.layer}")
        elif rule.rule in ("fresh_gaussian", "function_of_previous"):
            s = materialize_covariance(rule.covariance_spec(), p_in, context)
            w, root, a = fresh(s)
            part, cov = {root: a}, s
            prov.append("fresh" if rule.rule == "fresh_gaussian" else f"function:{rule.function}:{rule.layer}")
        elif rule.rule == "mixed":
            if teacher is None:
                raise ScenarioError(f"{where}.weight_rule", "mixed rule is only valid for the student")
            s = materialize_covariance(rule.cov, p_in, context)
            t_weights, t_covs, t_parts = teacher
            t_cov = t_covs[rule.layer - 1]
            if rule.transform == "identity":
                t = np.eye(p_in)
            else:
                t = np.linalg.inv(t_cov)
                t = 0.5 * (t + t.T)
            w_fresh, root, a = fresh(s, rule.fresh_coeff)
            v = t_weights[rule.layer - 1]
            w = w_fresh + rule.teacher_coeff * (v @ t)
            part = {root: a}
            for r, b in t_parts[rule.layer - 1].items():
                part[r] = rule.teacher_coeff * (b @ t)
            cov = rule.fresh_coeff**2 * s + rule.teacher_coeff**2 * (t.T @ t_cov @ t)
            cov = 0.5 * (cov + cov.T)
            prov.append(f"mixed:teacher{rule.layer}")
        else:  # pragma: no cover - rejected by validation
            raise ScenarioError(f"{where}.weight_rule", f"unknown rule {rule.rule!r}")

        top = float(np.linalg.eigvalsh(cov)[-1])
        if top > budget * (1 + 1e-12):
            raise ScenarioError(where, f"row covariance norm {top:.4g} exceeds budget {budget:g}")
        weights.append(w)
        covs.append(cov)
        parts.append(part)
    return weights, covs, parts, prov


def _cross_from_parts(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray], dim: int) -> np.ndarray:
    out = np.zeros((dim, dim))
    for root in a.keys() & b.keys():
        out += a[root].T @ b[root]
    return out


def sample_network_pair(scenario: ScenarioConfig, seed: int, replicate: int = 0) -> SampledNetworkPair:
    """Draw teacher then student weights, then the target vector."""
    rng = _rng(seed, replicate, "network")
    next_root = [0]
    budget = scenario.covariance_budget
    t_w, t_covs, t_parts, t_prov = _sample_net(scenario.teacher, "teacher", rng, budget, None, next_root)
    s_w, s_covs, s_parts, s_prov = _sample_net(
        scenario.student, "student", rng, budget, (t_w, t_covs, t_parts), next_root
    )

    readout = scenario.teacher.readout
    k = scenario.teacher.output_dim
    if readout.kind == "file":
        theta = read_matrix(readout.path).ravel()
        if theta.shape[0] != k:
            raise ScenarioError("teacher.readout", f"readout file has {theta.shape[0]} entries, expected {k}")
    else:
        theta = math.sqrt(readout.variance) * rng.standard_normal(k)

    cross = {}
    for i in range(min(len(s_w), len(t_w))):
        cross[i + 1] = _cross_from_parts(s_parts[i], t_parts[i], s_w[i].shape[1])
    student = Network(s_w, [l.activation for l in scenario.student.layers], s_covs)
    teacher = Network(t_w, [l.activation for l in scenario.teacher.layers], t_covs)
    return SampledNetworkPair(student, teacher, theta, cross, {"student": s_prov, "teacher": t_prov})


# ---------------------------------------------------------------------------
# features and ridge


def forward_features(
    net: Network, inputs: np.ndarray, pre_variances: Sequence[float] | None = None
) -> np.ndarray:
    """Apply the network column-wise to a ``d x n`` input matrix.

    ``pre_variances`` supplies the per-layer pre-activation variance used by
    mean-subtracted activations; without it the batch second moment is used.
    """
    h = np.asarray(inputs, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] != net.input_dim:
        raise ValueError(f"inputs have shape {h.shape}, expected ({net.input_dim}, n)")
    for i, (w, name) in enumerate(zip(net.weights, net.activations)):
        pre = w @ h
        act = get_activation(name)
        if pre_variances is not None:
            r = float(pre_variances[i])
        elif act.odd:
            r = 1.0
        else:
            r = float(np.mean(pre * pre))
        h = act(pre, r)
    return h


class RidgeError(RuntimeError):
    pass


@dataclass(frozen=True)
class RidgeFit:
    theta_hat: np.ndarray
    lam: float
    n: int
    p: int
    gram_min_eig: float
    gram_max_eig: float
    residual: float
    method: str


def ridge_fit(x: np.ndarray, y: np.ndarray, lam: float, method: str = "auto") -> RidgeFit:
    """Closed-form ridge ``(X X^T/p + lambda)^{-1} X y / sqrt(p)`` for ``p x n`` features."""
    if not lam > 0:
        raise ValueError(f"ridge penalty must be positive, got {lam}")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    p, n = x.shape
    if y.shape[0] != n:
        raise ValueError(f"{n} feature columns but {y.shape[0]} labels")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise RidgeError("non-finite entries in ridge inputs")
    if method == "auto":
        method = "primal" if p <= n else "dual"
    rhs = x @ y / math.sqrt(p)
    if method == "primal":
        gram = x @ x.T / p
        gram[np.diag_indices_from(gram)] += lam
        theta = linalg.cho_solve(linalg.cho_factor(gram), rhs)
        eig = linalg.eigvalsh(gram)
        lo, hi = float(eig[0]), float(eig[-1])
    elif method == "dual":
        gram = x.T @ x / p
        gram[np.diag_indices_from(gram)] += lam
        theta = x @ linalg.cho_solve(linalg.cho_factor(gram), y) / math.sqrt(p)
        eig = linalg.eigvalsh(gram)
        hi = float(eig[-1])
        lo = lam if p > n else float(eig[0])
    else:
        raise ValueError(f"unknown ridge method {method!r}")
    resid_vec = x @ (x.T @ theta) / p + lam * theta - rhs
    residual = float(np.linalg.norm(resid_vec))
    scale = float(np.linalg.norm(rhs))
    if residual > RIDGE_RESIDUAL_TOL * scale:
        raise RidgeError(f"ridge optimality residual {residual:.3e} exceeds {RIDGE_RESIDUAL_TOL:g} x {scale:.3e}")
    return RidgeFit(theta, float(lam), n, p, lo, hi, residual, method)


def empirical_gen_error_analytic(
    fit: RidgeFit | np.ndarray, triple: CovarianceTriple, theta_star: np.ndarray
) -> float:
    """Exact test error of ``fit`` on noiseless labels under population ``triple``."""
    theta_hat = fit.theta_hat if isinstance(fit, RidgeFit) else np.asarray(fit, dtype=np.float64)
    p, k = triple.p, triple.k
    if theta_hat.shape != (p,) or np.shape(theta_star) != (k,):
        raise ValueError(f"vector lengths {theta_hat.shape}, {np.shape(theta_star)} do not match triple ({p}, {k})")
    return float(
        theta_star @ triple.psi @ theta_star / k
        + theta_hat @ triple.omega @ theta_hat / p
        - 2.0 * theta_hat @ triple.phi @ theta_star / math.sqrt(p * k)
    )


# ---------------------------------------------------------------------------
# replicates


@dataclass(frozen=True)
class EmpiricalEstimate:
    mean: float
    stderr: float
    reps: int
    seed: int
    values: tuple[float, ...] = field(default=(), repr=False)

    @classmethod
    def from_values(cls, values: Sequence[float], seed: int) -> "EmpiricalEstimate":
        arr = np.asarray(values, dtype=np.float64)
        if arr.size < 2:
            raise ValueError("an estimate needs at least 2 replicates")
        return cls(float(arr.mean()), float(arr.std(ddof=1) / math.sqrt(arr.size)), int(arr.size), int(seed), tuple(arr))


@dataclass
class ScenarioInstance:
    """One sampled network pair with its linearized population covariances."""

    scenario: ScenarioConfig
    pair: SampledNetworkPair
    linearization: Linearization
    omega0: np.ndarray
    input_root: np.ndarray

    @property
    def triple(self) -> CovarianceTriple:
        return self.linearization.triple

    @property
    def p(self) -> int:
        return self.pair.student.output_dim

    def spectral_context(self, alpha: float = 1.0):
        return build_spectral_context(self.triple, self.pair.theta, alpha, self.scenario.noise_trace)


def prepare_instance(scenario: ScenarioConfig, seed: int | None = None, replicate: int = 0) -> ScenarioInstance:
    seed = scenario.seed if seed is None else seed
    pair = sample_network_pair(scenario, seed, replicate)
    omega0 = materialize_covariance(scenario.input_covariance, scenario.input_dim)
    lin = linearize_pair(pair.student, pair.teacher, omega0, pair.cross_covs)
    return ScenarioInstance(scenario, pair, lin, omega0, _sym_sqrt(omega0))


def _replicate_error(
    inst: ScenarioInstance, alpha: float, seed: int, rep: int, error_mode: str, test_points: int
) -> float:
    sc = inst.scenario
    n = max(1, int(round(alpha * inst.p)))
    d = sc.input_dim
    s_var = inst.linearization.ladder.r
    t_var = inst.linearization.ladder.r_teacher
    x_in = inst.input_root @ _rng(seed, rep, "data").standard_normal((d, n))
    feats = forward_features(inst.pair.student, x_in, s_var)
    target = forward_features(inst.pair.teacher, x_in, t_var)
    k = target.shape[0]
    y = inst.pair.theta @ target / math.sqrt(k)
    if sc.noise_trace > 0:
        y = y + math.sqrt(sc.noise_trace) * _rng(seed, rep, "noise").standard_normal(n)
    fit = ridge_fit(feats, y, sc.ridge_lambda)
    if error_mode == "analytic":
        return empirical_gen_error_analytic(fit, inst.triple, inst.pair.theta)
    if error_mode == "test_set":
        x_t = inst.input_root @ _rng(seed, rep, "test").standard_normal((d, test_points))
        pred = fit.theta_hat @ forward_features(inst.pair.student, x_t, s_var) / math.sqrt(inst.p)
        truth = inst.pair.theta @ forward_features(inst.pair.teacher, x_t, t_var) / math.sqrt(k)
        return float(np.mean((truth - pred) ** 2))
    raise ValueError(f"unknown error mode {error_mode!r}")


def parallel_map(fn: Callable[[int], float], count: int, threads: int = 1) -> list[float]:
    """Evaluate ``fn(0..count-1)`` with single-threaded BLAS, results in index order."""
    if threads < 1:
        raise ValueError(f"thread count must be positive, got {threads}")
    with threadpool_limits(limits=1):
        if threads == 1:
            return [fn(i) for i in range(count)]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, range(count)))


def run_replicates(
    scenario: ScenarioConfig,
    alpha: float,
    reps: int | None = None,
    seed: int | None = None,
    *,
    threads: int = 1,
    instance: ScenarioInstance | None = None,
    error_mode: str = "analytic",
    resample_network: bool = False,
    tie_replicates: bool = False,
    test_points: int = 20000,
) -> EmpiricalEstimate:
    """Mean and standard error of the ridge test error over replicates.

    By default one network pair (replicate stream 0) is shared by all
    replicates and only training data and noise are redrawn, matching a
    prediction that is conditional on the feature map. ``resample_network``
    draws a fresh pair per replicate instead. ``tie_replicates`` reuses
    replicate 0's streams everywhere (a determinism check).
    """
    reps = scenario.replicates if reps is None else reps
    seed = scenario.seed if seed is None else seed
    if reps < 2:
        raise ValueError(f"need at least 2 replicates, got {reps}")
    if not alpha > 0:
        raise ValueError(f"sample ratio must be positive, got {alpha}")
    if instance is None and not resample_network:
        with threadpool_limits(limits=1):
            instance = prepare_instance(scenario, seed)

    def one(rep: int) -> float:
        stream = 0 if tie_replicates else rep
        try:
            inst = prepare_instance(scenario, seed, stream) if resample_network else instance
            return _replicate_error(inst, alpha, seed, stream, error_mode, test_points)
        except Exception as exc:
            raise RuntimeError(
                f"replicate {rep} (data seed {derive_seed(seed, stream, 'data')}) failed: {exc}"
            ) from exc

    return EmpiricalEstimate.from_values(parallel_map(one, reps, threads), seed)


# ---------------------------------------------------------------------------
# jointly Gaussian features and resolvent functionals


def joint_gaussian_root(triple: CovarianceTriple) -> np.ndarray:
    """Square root of the joint block covariance, clipping tiny negative modes."""
    joint = triple.joint()
    w, u = np.linalg.eigh(0.5 * (joint + joint.T))
    tol = JOINT_CLIP * max(1.0, float(w[-1]))
    if w[0] < -tol:
        raise ValueError(f"joint covariance is indefinite: most negative eigenvalue {w[0]:.3e}")
    return u * np.sqrt(np.clip(w, 0.0, None))


def sample_joint_gaussian_features(
    triple: CovarianceTriple, n: int, seed: int | np.random.Generator, root: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """``n`` i.i.d. columns ``(x, z)`` with covariance ``[[omega, phi], [phi^T, psi]]``."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    root = joint_gaussian_root(triple) if root is None else root
    joint = root @ rng.standard_normal((root.shape[1], n))
    return joint[: triple.p], joint[triple.p :]


FUNCTIONAL_KINDS = ("mp_law", "resolvent", "gxz", "gagb", "xgomgx", "zxgomgxz")


def _functional(kind, x, z, lam, triple, obs, m_equiv):
    p, n = x.shape
    k = triple.k
    gram = x @ x.T / p
    gram[np.diag_indices_from(gram)] += lam
    cho = linalg.cho_factor(gram)
    if kind in ("mp_law", "resolvent"):
        g = linalg.cho_solve(cho, np.eye(p))
        diff = g - m_equiv if kind == "mp_law" else g
        return float(np.einsum("ij,ji->", obs["A"], diff)) / p
    if kind == "gxz":
        gxz = linalg.cho_solve(cho, x @ z.T)
        return float(np.einsum("ij,ji->", gxz, obs["A"])) / p / math.sqrt(k * p)
    if kind == "gagb":
        g = linalg.cho_solve(cho, np.eye(p))
        return float(np.einsum("ij,ji->", obs["A"] @ g, obs["B"] @ g)) / p
    gx = linalg.cho_solve(cho, x)
    if kind == "xgomgx":
        inner = gx.T @ triple.omega @ gx / p
        return float(np.einsum("ij,ji->", inner, obs["A"])) / n
    if kind == "zxgomgxz":
        zx = gx @ z.T
        inner = zx.T @ triple.omega @ zx / (k * p)
        return float(np.einsum("ij,ji->", inner, obs["A"])) / k
    raise ValueError(f"unknown functional kind {kind!r}; expected one of {FUNCTIONAL_KINDS}")


def resolvent_functional_mc(
    kind: str,
    triple: CovarianceTriple,
    lam: float,
    observables: Mapping[str, np.ndarray],
    n: int,
    reps: int,
    seed: int,
    *,
    threads: int = 1,
    absolute: bool = False,
) -> EmpiricalEstimate:
    """Monte Carlo estimate of a resolvent functional over fresh feature draws.

    ``mp_law`` is ``<A (G - M)>``, ``resolvent`` is ``<A G>``, ``gxz`` is
    ``<G X Z^T A>/sqrt(kp)``, ``gagb`` is ``<A G B G>``, ``xgomgx`` is
    ``<X^T G Omega G X A>/p`` and ``zxgomgxz`` is
    ``<Z X^T G Omega G X Z^T A>/(kp)``. With ``absolute`` the per-draw
    absolute values are aggregated.
    """
    if kind not in FUNCTIONAL_KINDS:
        raise ValueError(f"unknown functional kind {kind!r}; expected one of {FUNCTIONAL_KINDS}")
    if not lam > 0:
        raise ValueError(f"ridge penalty must be positive, got {lam}")
    obs = {key: np.asarray(val, dtype=np.float64) for key, val in observables.items()}
    m_equiv = None
    if kind == "mp_law":
        ctx = build_spectral_context(triple, alpha=n / triple.p)
        sol = solve_m(ctx, lam)
        m_equiv = (ctx.eigvecs * sol.m_diag) @ ctx.eigvecs.T
    root = joint_gaussian_root(triple)

    def one(i: int) -> float:
        x, z = sample_joint_gaussian_features(triple, n, derive_seed(seed, i, "features"), root)
        val = _functional(kind, x, z, lam, triple, obs, m_equiv)
        return abs(val) if absolute else val

    return EmpiricalEstimate.from_values(parallel_map(one, reps, threads), seed)
