"""Gaussian moments of activations: the kappa coefficients of the linearization.

Smooth activations are integrated with probabilists' Gauss-Hermite rules.
Activations with a kink at zero (``sign``, ``centered_relu``) are integrated
with Gauss-Legendre panels split at the kink, since Hermite rules converge
only algebraically on non-smooth integrands. Every quadrature result is
accepted only when it agrees with the next doubled order.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import special

from .activations import Activation, get_activation

DEFAULT_ORDER = 200
MAX_ORDER = 512
AGREEMENT_RTOL = 1e-10
AGREEMENT_ATOL = 1e-13
DEGENERATE_CORR = 1.0 - 1e-8
GRAM_TOL = 1e-10
CLAMP_TOL = 1e-10
# Standard-normal mass beyond +-12 is ~1e-33; panels are truncated there.
_HALF_WIDTH = 12.0
COMPOSITE_START = 256
COMPOSITE_MAX = 4096


class QuadratureError(RuntimeError):
    """Successive quadrature orders disagree beyond tolerance."""


@dataclass(frozen=True)
class KappaLayer:
    """Gaussian-moment coefficients of one layer."""

    kappa1: float
    kappa_star_sq: float
    r: float
    second_moment: float


@dataclass(frozen=True)
class CrossKappa:
    """Coefficients coupling one student layer with the matching teacher layer."""

    kappa1_a: float
    kappa1_b: float
    cross_sq: float  # signed
    r_a: float
    r_b: float
    r_cross: float
    cross_moment: float


@functools.lru_cache(maxsize=None)
def _gauss_hermite_cached(order: int) -> tuple[np.ndarray, np.ndarray]:
    nodes, weights = special.roots_hermitenorm(order)
    weights = weights / weights.sum()
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


def gauss_hermite(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Probabilists' Gauss-Hermite rule normalized to the standard normal law.

    Returns read-only ``(nodes, weights)`` with ``sum(weights) == 1``; the rule
    integrates polynomials up to degree ``2 * order - 1`` exactly.
    """
    if not isinstance(order, (int, np.integer)) or not 1 <= order <= MAX_ORDER:
        raise ValueError(f"quadrature order must be an integer in [1, {MAX_ORDER}], got {order!r}")
    return _gauss_hermite_cached(int(order))


@functools.lru_cache(maxsize=None)
def _legendre_cached(order: int) -> tuple[np.ndarray, np.ndarray]:
    nodes, weights = np.polynomial.legendre.leggauss(order)
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


def _normal_pdf(x: np.ndarray) -> np.ndarray:
    return np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


def _split_panels(breaks: np.ndarray, order: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes/weights for E f(u), u ~ N(0,1), on [-W, b] and [b, W] per break b.

    ``breaks`` has shape (m,); output arrays have shape (m, 2 * order).
    """
    t, w = _legendre_cached(order)
    b = np.clip(breaks, -_HALF_WIDTH, _HALF_WIDTH)[:, None]
    lo_half = 0.5 * (b + _HALF_WIDTH)
    hi_half = 0.5 * (_HALF_WIDTH - b)
    left = -_HALF_WIDTH + lo_half * (t + 1.0)
    right = b + hi_half * (t + 1.0)
    nodes = np.concatenate([left, right], axis=1)
    weights = np.concatenate([lo_half * w, hi_half * w], axis=1) * _normal_pdf(nodes)
    return nodes, weights


@functools.lru_cache(maxsize=None)
def _composite_rule(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Composite Gauss-Legendre on [-W, W]: an even number of 16-point panels,
    so zero is always a panel boundary."""
    t, w = _legendre_cached(16)
    n_panels = 2 * max(1, order // 32)
    edges = np.linspace(-_HALF_WIDTH, _HALF_WIDTH, n_panels + 1)
    half = 0.5 * np.diff(edges)[:, None]
    nodes = (edges[:-1, None] + half * (t + 1.0)).ravel()
    weights = (half * w).ravel() * _normal_pdf(nodes)
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


def _standard_rule(smooth: bool, order: int, composite: bool = False) -> tuple[np.ndarray, np.ndarray]:
    if composite:
        return _composite_rule(order)
    if smooth:
        return gauss_hermite(order)
    nodes, weights = _split_panels(np.zeros(1), order)
    return nodes[0], weights[0]


def _with_fallback(run: Callable[[bool], float]) -> float:
    # Hermite rules converge slowly for steep smooth activations (tanh at
    # large r has poles near the real axis); composite panels take over.
    # Their edges include zero, so kinks of non-smooth outer factors stay
    # on panel boundaries.
    try:
        return run(False)
    except QuadratureError:
        return run(True)


def _adaptive(compute: Callable[[int], float], order: int, cap: int = MAX_ORDER) -> float:
    q = order
    prev = compute(q)
    while True:
        nxt_order = min(2 * q, cap)
        if nxt_order == q:
            raise QuadratureError(f"quadrature did not converge by order {cap}")
        nxt = compute(nxt_order)
        if abs(nxt - prev) <= AGREEMENT_RTOL * max(abs(prev), abs(nxt)) + AGREEMENT_ATOL:
            return float(nxt)
        q, prev = nxt_order, nxt


def _run_adaptive(compute: Callable[[int], float], order: int, composite: bool) -> float:
    # composite panels refine on their own ladder, past the Hermite cap
    if composite:
        return _adaptive(compute, max(order, COMPOSITE_START), COMPOSITE_MAX)
    return _adaptive(compute, order)


def _check_r(r: float) -> float:
    r = float(r)
    if not math.isfinite(r) or r < 0:
        raise ValueError(f"pre-activation variance must be finite and >= 0, got {r}")
    return r


def _as_activation(act: str | Activation) -> Activation:
    return act if isinstance(act, Activation) else get_activation(act)


def expect(fn: Callable[[np.ndarray], np.ndarray], smooth: bool = True, order: int = DEFAULT_ORDER) -> float:
    """``E fn(N)`` for a standard normal ``N`` with order-doubling acceptance."""

    def run(composite: bool) -> float:
        def compute(q: int) -> float:
            nodes, weights = _standard_rule(smooth, q, composite)
            return float(weights @ fn(nodes))

        return _run_adaptive(compute, order, composite)

    return _with_fallback(run)


def kappa1(act: str | Activation, r: float, order: int = DEFAULT_ORDER, method: str = "stein") -> float:
    """Degree-one Hermite coefficient ``E[N phi(N)] / r`` with ``N ~ N(0, r)``.

    By Stein's identity this equals ``E phi'(N)`` for differentiable ``phi``;
    ``method="derivative"`` evaluates that form directly (smooth activations only).
    """
    act = _as_activation(act)
    r = _check_r(r)
    if act.name == "identity":
        return 1.0
    if r == 0.0:
        if act.smooth:
            return float(act.derivative(np.zeros(1), r)[0])
        raise ValueError(f"kappa1 of non-smooth activation {act.name!r} is undefined at r = 0")
    if act.name == "sign":
        return math.sqrt(2.0 / (math.pi * r))
    s = math.sqrt(r)
    if method == "derivative":
        if not act.smooth:
            raise ValueError(f"derivative path needs a smooth activation, got {act.name!r}")
        return expect(lambda u: act.derivative(s * u, r), True, order)
    if method != "stein":
        raise ValueError(f"unknown kappa1 method {method!r}")
    return expect(lambda u: u * act(s * u, r), act.smooth, order) / s


def second_moment(act: str | Activation, r: float, order: int = DEFAULT_ORDER) -> float:
    """``E phi(N)^2`` with ``N ~ N(0, r)``."""
    act = _as_activation(act)
    r = _check_r(r)
    if act.name == "identity":
        return r
    if act.name == "sign":
        return 1.0 if r > 0 else 0.0
    s = math.sqrt(r)
    return expect(lambda u: act(s * u, r) ** 2, act.smooth, order)


def _clamp(value: float, what: str) -> float:
    if value < 0.0:
        if value >= -CLAMP_TOL:
            return 0.0
        raise ValueError(f"{what} = {value:.3e} is negative beyond tolerance {CLAMP_TOL}")
    return value


def kappa_layer(act: str | Activation, r: float, order: int = DEFAULT_ORDER) -> KappaLayer:
    act = _as_activation(act)
    k1 = kappa1(act, r, order)
    m2 = second_moment(act, r, order)
    star = _clamp(m2 - r * k1 * k1, f"kappa_star_sq[{act.name}, r={r:.6g}]")
    return KappaLayer(kappa1=k1, kappa_star_sq=star, r=float(r), second_moment=m2)


def _cross_sorted(a: Activation, ra: float, b: Activation, rb: float):
    # Canonical ordering keeps the result bit-identical under argument swap and
    # puts a kinked activation on the outer variable.
    key_a = (a.smooth, a.name, ra)
    key_b = (b.smooth, b.name, rb)
    return (a, ra, b, rb) if key_a <= key_b else (b, rb, a, ra)


def cross_moment(
    act_a: str | Activation,
    act_b: str | Activation,
    r_a: float,
    r_b: float,
    r_cross: float,
    order: int = DEFAULT_ORDER,
) -> float:
    """``E phi(N) psi(N~)`` for jointly Gaussian ``(N, N~)`` with covariance
    ``[[r_a, r_cross], [r_cross, r_b]]``.
    """
    a, b = _as_activation(act_a), _as_activation(act_b)
    r_a, r_b, r_cross = _check_r(r_a), _check_r(r_b), float(r_cross)
    bound = math.sqrt(r_a * r_b)
    if abs(r_cross) > bound:
        if abs(r_cross) - bound > GRAM_TOL * max(1.0, bound):
            raise ValueError(
                f"cross Gram [[{r_a}, {r_cross}], [{r_cross}, {r_b}]] is not positive semi-definite"
            )
        r_cross = math.copysign(bound, r_cross)

    if a.name == "identity" and b.name == "identity":
        return r_cross
    if a.name == "sign" and b.name == "sign" and bound > 0:
        return 2.0 / math.pi * math.asin(max(-1.0, min(1.0, r_cross / bound)))

    a, r_a, b, r_b = _cross_sorted(a, r_a, b, r_b)
    if r_a == 0.0 or r_b == 0.0:
        # One factor is deterministic.
        if r_a == 0.0:
            return float(a(np.zeros(1), r_a)[0]) * _mean(b, r_b, order)
        return float(b(np.zeros(1), r_b)[0]) * _mean(a, r_a, order)

    sa = math.sqrt(r_a)
    rho = r_cross / bound
    if abs(rho) > DEGENERATE_CORR:
        sb = math.copysign(math.sqrt(r_b), rho)
        smooth = a.smooth and b.smooth
        return expect(lambda u: a(sa * u, r_a) * b(sb * u, r_b), smooth, order)

    c = r_cross / sa  # loading of N~ on the shared direction
    s = math.sqrt(max(r_b - c * c, 0.0))

    def run(composite: bool) -> float:
        def compute(q: int) -> float:
            u, wu = _standard_rule(a.smooth, q, composite)
            outer = a(sa * u, r_a)
            if b.smooth:
                v, wv = _standard_rule(True, q, composite)
                inner = b(c * u[:, None] + s * v[None, :], r_b) @ wv
            else:
                v, wv = _split_panels(-c * u / s, q)
                inner = np.sum(b(c * u[:, None] + s * v, r_b) * wv, axis=1)
            return float(wu @ (outer * inner))

        return _run_adaptive(compute, order, composite)

    return _with_fallback(run)


def _mean(act: Activation, r: float, order: int) -> float:
    if r == 0.0:
        return float(act(np.zeros(1), r)[0])
    s = math.sqrt(r)
    return expect(lambda u: act(s * u, r), act.smooth, order)


def cross_kappa(
    act_a: str | Activation,
    act_b: str | Activation,
    r_a: float,
    r_b: float,
    r_cross: float,
    order: int = DEFAULT_ORDER,
) -> CrossKappa:
    """Cross coefficient ``E[phi psi] - r_cross * kappa1_a * kappa1_b``, kept signed."""
    k1a = kappa1(act_a, r_a, order)
    k1b = kappa1(act_b, r_b, order)
    em = cross_moment(act_a, act_b, r_a, r_b, r_cross, order)
    return CrossKappa(
        kappa1_a=k1a,
        kappa1_b=k1b,
        cross_sq=em - r_cross * k1a * k1b,
        r_a=float(r_a),
        r_b=float(r_b),
        r_cross=float(r_cross),
        cross_moment=em,
    )
