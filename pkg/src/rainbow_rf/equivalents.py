"""Self-consistent resolvent equation, asymptotic ridge test error and the
multi-resolvent deterministic equivalents it is built from.

Normalized traces ``<A> = Tr A / dim`` are used throughout. Everything is
evaluated in the eigenbasis of the student covariance ``omega``, where the
deterministic equivalent ``M(lambda)`` of the resolvent
``G = (X X^T / p + lambda)^{-1}`` is diagonal.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .linearization import CovarianceTriple

SOLVE_RTOL = 1e-12
EIG_CLAMP = 1e-10
BIAS_WARN_TOL = 1e-8


class EquivalentError(RuntimeError):
    pass


class NegativeBiasWarning(RuntimeWarning):
    """The theta-quadratic numerator of the bias came out negative."""


@dataclass(frozen=True)
class SpectralContext:
    """Eigendecomposition of ``omega`` plus rotated cross terms.

    ``alpha = n / p``; ``phi_rot = U^T phi`` and ``v = phi_rot theta`` when a
    target vector is attached.
    """

    eigvals: np.ndarray
    eigvecs: np.ndarray
    phi_rot: np.ndarray
    psi: np.ndarray
    alpha: float
    theta: np.ndarray | None = None
    v: np.ndarray | None = None
    noise_trace: float = 0.0

    @property
    def p(self) -> int:
        return self.eigvals.shape[0]

    @property
    def k(self) -> int:
        return self.psi.shape[0]

    @property
    def n(self) -> float:
        return self.alpha * self.p

    @property
    def n_over_k(self) -> float:
        return self.n / self.k

    @property
    def omega(self) -> np.ndarray:
        return (self.eigvecs * self.eigvals) @ self.eigvecs.T

    @property
    def phi(self) -> np.ndarray:
        return self.eigvecs @ self.phi_rot

    def with_alpha(self, alpha: float) -> "SpectralContext":
        if not alpha > 0:
            raise ValueError(f"sample ratio must be positive, got {alpha}")
        return replace(self, alpha=float(alpha))

    def rotate(self, a: np.ndarray) -> np.ndarray:
        """``U^T a U`` for a p x p matrix."""
        return self.eigvecs.T @ a @ self.eigvecs


def build_spectral_context(
    triple: CovarianceTriple,
    theta_star: np.ndarray | None = None,
    alpha: float = 1.0,
    noise_trace: float = 0.0,
) -> SpectralContext:
    if not alpha > 0:
        raise ValueError(f"sample ratio must be positive, got {alpha}")
    if noise_trace < 0:
        raise ValueError(f"noise trace must be non-negative, got {noise_trace}")
    omega = triple.omega
    try:
        w, u = np.linalg.eigh(0.5 * (omega + omega.T))
    except np.linalg.LinAlgError as exc:
        raise EquivalentError(f"eigendecomposition of omega failed: {exc}") from exc
    w, u = w[::-1], u[:, ::-1]
    top = max(float(w[0]), 0.0)
    if w[-1] < -EIG_CLAMP * max(top, 1.0):
        raise EquivalentError(f"omega is not PSD: smallest eigenvalue {w[-1]:.3e}")
    w = np.clip(w, 0.0, None)
    phi_rot = u.T @ triple.phi
    v = None
    if theta_star is not None:
        theta_star = np.asarray(theta_star, dtype=np.float64).ravel()
        if theta_star.shape[0] != triple.k:
            raise ValueError(f"theta has length {theta_star.shape[0]}, expected {triple.k}")
        v = phi_rot @ theta_star
    return SpectralContext(w, u, phi_rot, triple.psi, float(alpha), theta_star, v, float(noise_trace))


@dataclass(frozen=True)
class SelfConsistentSolution:
    m: float
    lam: float
    residual: float
    m_diag: np.ndarray
    alpha: float
    omega_mm: float  # <Omega M Omega M>
    denominator: float  # D = 1 - alpha (lambda m)^2 <Omega M Omega M>

    @property
    def lam_m(self) -> float:
        return self.lam * self.m


def _g(m: float, w: np.ndarray, lam: float, alpha: float) -> float:
    return lam * m + m * float(np.mean(w / (1.0 + alpha * m * w))) - 1.0


def m_bounds(ctx: SpectralContext, lam: float) -> tuple[float, float]:
    """Lower and upper bounds on ``m``; the rank bound uses exact zeros only."""
    w = ctx.eigvals
    rank = int(np.count_nonzero(w > 0))
    lower = max(1.0 / (lam + float(np.mean(w))), (1.0 - rank / ctx.n) / lam)
    return lower, 1.0 / lam


def solve_m(ctx: SpectralContext, lam: float) -> SelfConsistentSolution:
    """Solve ``1/m = lambda + <Omega (I + alpha m Omega)^{-1}>`` by bisection."""
    if not lam > 0:
        raise ValueError(f"ridge penalty must be positive, got {lam}")
    w, alpha = ctx.eigvals, ctx.alpha
    lo, hi = m_bounds(ctx, lam)
    if _g(lo, w, lam, alpha) > 0 or _g(hi, w, lam, alpha) < 0:
        raise EquivalentError(f"bisection bracket [{lo}, {hi}] does not contain a root")
    for _ in range(2000):
        mid = 0.5 * (lo + hi)
        if not lo < mid < hi:
            break
        if _g(mid, w, lam, alpha) > 0:
            hi = mid
        else:
            lo = mid
    m = lo if abs(_g(lo, w, lam, alpha)) <= abs(_g(hi, w, lam, alpha)) else hi
    scale = lam + float(np.mean(w))
    residual = abs(1.0 / m - lam - float(np.mean(w / (1.0 + alpha * m * w))))
    if residual > SOLVE_RTOL * scale:
        raise EquivalentError(f"self-consistent residual {residual:.3e} above tolerance")
    m_diag = 1.0 / (lam * (1.0 + alpha * m * w))
    omega_mm = float(np.mean((w * m_diag) ** 2))
    denom = 1.0 - alpha * (lam * m) ** 2 * omega_mm
    return SelfConsistentSolution(m, float(lam), residual, m_diag, alpha, omega_mm, denom)


@dataclass(frozen=True)
class TheoryPrediction:
    gen_error: float
    bias_term: float
    noise_term: float
    solution: SelfConsistentSolution


def _checked_denominator(sol: SelfConsistentSolution) -> float:
    if not sol.denominator > 0:
        raise EquivalentError(f"non-positive denominator D = {sol.denominator:.3e}")
    return sol.denominator


def theory_gen_error(ctx: SpectralContext, lam: float, sol: SelfConsistentSolution | None = None) -> TheoryPrediction:
    """Asymptotic test error of ridge on noiseless test labels."""
    if ctx.theta is None:
        raise ValueError("spectral context has no target vector attached")
    sol = sol or solve_m(ctx, lam)
    d = _checked_denominator(sol)
    lm, md = sol.lam_m, sol.m_diag
    target = float(ctx.theta @ ctx.psi @ ctx.theta)
    fitted = float(np.sum((md + lam * md * md) * ctx.v**2))
    numerator = (target - ctx.alpha * lm * fitted) / ctx.k
    if numerator < -BIAS_WARN_TOL * max(1.0, target / ctx.k):
        warnings.warn(f"negative bias numerator {numerator:.3e}", NegativeBiasWarning, stacklevel=2)
    bias = numerator / d
    noise = ctx.noise_trace * lm * lm * ctx.alpha * sol.omega_mm / d
    return TheoryPrediction(bias + noise, bias, noise, sol)


# ---------------------------------------------------------------------------
# multi-resolvent equivalents


def _check(a: np.ndarray, shape: tuple[int, int], name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.shape != shape:
        raise ValueError(f"{name} has shape {a.shape}, expected {shape}")
    return a


def resolvent_equivalent(ctx: SpectralContext, lam: float, a: np.ndarray, sol=None) -> float:
    """``<M A>``, the equivalent of ``<G A>``."""
    sol = sol or solve_m(ctx, lam)
    a = _check(a, (ctx.p, ctx.p), "A")
    diag = np.einsum("ij,ij->j", ctx.eigvecs, a @ ctx.eigvecs)
    return float(np.dot(sol.m_diag, diag)) / ctx.p


def equiv_gxz(ctx: SpectralContext, lam: float, a: np.ndarray, sol=None) -> float:
    """Equivalent of ``<G X Z^T A> / sqrt(k p)`` for a k x p matrix ``A``."""
    sol = sol or solve_m(ctx, lam)
    a = _check(a, (ctx.k, ctx.p), "A")
    # Tr[M phi A] = sum_i M_ii (phi_rot A U)_ii
    diag = np.einsum("ij,ji->i", ctx.phi_rot, a @ ctx.eigvecs)
    trace = float(np.dot(sol.m_diag, diag)) / ctx.p
    return sol.lam_m * ctx.n / math.sqrt(ctx.k * ctx.p) * trace


def _tr_amb_m(ctx, md_a, a_rot, md_b, b_rot) -> float:
    """``<A Ma B Mb>`` for rotated A, B and diagonal Ma, Mb."""
    return float(np.einsum("ij,j,ji,i->", a_rot, md_a, b_rot, md_b)) / ctx.p


def equiv_gagb(ctx: SpectralContext, lam: float, a: np.ndarray, b: np.ndarray, sol=None) -> float:
    """Equivalent of ``<A G B G>`` for p x p matrices ``A``, ``B``."""
    sol = sol or solve_m(ctx, lam)
    d = _checked_denominator(sol)
    a_rot = ctx.rotate(_check(a, (ctx.p, ctx.p), "A"))
    b_rot = ctx.rotate(_check(b, (ctx.p, ctx.p), "B"))
    md, w = sol.m_diag, ctx.eigvals
    ambm = _tr_amb_m(ctx, md, a_rot, md, b_rot)
    a_mom = float(np.sum(np.diag(a_rot) * md * md * w)) / ctx.p
    om_b = float(np.sum(np.diag(b_rot) * md * md * w)) / ctx.p
    return ambm + ctx.alpha * sol.lam_m**2 * a_mom * om_b / d


def equiv_xgomgx(ctx: SpectralContext, lam: float, a: np.ndarray, sol=None) -> float:
    """Equivalent of ``<X^T G Omega G X A> / p`` for an n x n matrix ``A``."""
    sol = sol or solve_m(ctx, lam)
    d = _checked_denominator(sol)
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"A must be square, got shape {a.shape}")
    if abs(a.shape[0] - ctx.n) > 0.5:
        raise ValueError(f"A has size {a.shape[0]}, expected n = {ctx.n:g}")
    return sol.lam_m**2 * sol.omega_mm / d * float(np.trace(a)) / a.shape[0]


def equiv_zxgomgxz(ctx: SpectralContext, lam: float, a: np.ndarray, sol=None) -> float:
    """Equivalent of ``<Z X^T G Omega G X Z^T A> / (k p)`` for a k x k ``A``."""
    sol = sol or solve_m(ctx, lam)
    d = _checked_denominator(sol)
    a = _check(a, (ctx.k, ctx.k), "A")
    lm, md, w = sol.lam_m, sol.m_diag, ctx.eigvals
    phi_m_phi = ctx.phi_rot.T @ (md[:, None] * ctx.phi_rot)
    phi_mom_phi = ctx.phi_rot.T @ ((md * md * w)[:, None] * ctx.phi_rot)
    inner = (ctx.psi - 2.0 * ctx.alpha * lm * phi_m_phi) * sol.omega_mm + ctx.alpha * phi_mom_phi
    return lm**2 * ctx.n_over_k * float(np.einsum("ij,ji->", a, inner)) / ctx.k / d
