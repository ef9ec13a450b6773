"""Linearized population covariances of a student/teacher rainbow pair.

Each layer is replaced by ``kappa1 * W x + kappa_star * xi`` with independent
standard noise ``xi``. Propagating second moments through these stochastic
linear layers gives closed-form recursions for the student covariance
``omega``, the teacher covariance ``psi`` and the cross covariance ``phi``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .moments import DEFAULT_ORDER, CrossKappa, KappaLayer, cross_kappa, kappa_layer

SYM_TOL = 1e-10


@dataclass
class Network:
    """Realized weights of one rainbow network.

    ``row_covs[l]`` is the declared row covariance ``C = p_in * E[w w^T]`` of
    layer ``l`` (0-based here), or ``None`` to estimate it from the weights.
    """

    weights: list[np.ndarray]
    activations: list[str]
    row_covs: list[np.ndarray | None] = field(default_factory=list)

    def __post_init__(self):
        if not self.row_covs:
            self.row_covs = [None] * len(self.weights)
        if not (len(self.weights) == len(self.activations) == len(self.row_covs)):
            raise ValueError("weights, activations and row_covs must have one entry per layer")
        for i in range(1, len(self.weights)):
            if self.weights[i].shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(
                    f"layer {i + 1} expects input dim {self.weights[i].shape[1]}, "
                    f"layer {i} outputs {self.weights[i - 1].shape[0]}"
                )

    @property
    def depth(self) -> int:
        return len(self.weights)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]


@dataclass(frozen=True)
class CovarianceTriple:
    """Student covariance ``omega`` (p x p), teacher ``psi`` (k x k), cross ``phi`` (p x k)."""

    omega: np.ndarray
    psi: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        p, k = self.omega.shape[0], self.psi.shape[0]
        if self.omega.shape != (p, p) or self.psi.shape != (k, k) or self.phi.shape != (p, k):
            raise ValueError(
                f"inconsistent triple shapes omega {self.omega.shape}, psi {self.psi.shape}, phi {self.phi.shape}"
            )
        for name in ("omega", "psi"):
            m = getattr(self, name)
            if not np.all(np.isfinite(m)):
                raise ValueError(f"{name} has non-finite entries")
            if not np.allclose(m, m.T, rtol=0, atol=SYM_TOL * max(1.0, np.abs(m).max())):
                raise ValueError(f"{name} is not symmetric")

    @property
    def p(self) -> int:
        return self.omega.shape[0]

    @property
    def k(self) -> int:
        return self.psi.shape[0]

    def joint(self) -> np.ndarray:
        return np.block([[self.omega, self.phi], [self.phi.T, self.psi]])

    def min_joint_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.joint())[0])


@dataclass
class KappaLadder:
    student: list[KappaLayer]
    teacher: list[KappaLayer]
    cross: list[CrossKappa]
    provenance: dict[str, list[str]] = field(default_factory=dict)

    @property
    def r(self) -> list[float]:
        return [k.r for k in self.student]

    @property
    def r_teacher(self) -> list[float]:
        return [k.r for k in self.teacher]

    @property
    def r_cross(self) -> list[float]:
        return [c.r_cross for c in self.cross]

    def to_dict(self) -> dict:
        return {
            "student": [vars(k).copy() for k in self.student],
            "teacher": [vars(k).copy() for k in self.teacher],
            "cross": [vars(c).copy() for c in self.cross],
            "provenance": {k: list(v) for k, v in self.provenance.items()},
        }


@dataclass
class Linearization:
    triple: CovarianceTriple
    ladder: KappaLadder
    omegas: list[np.ndarray]
    psis: list[np.ndarray]
    phis: list[np.ndarray]


@dataclass(frozen=True)
class EffectiveLinearNet:
    """``x -> w_eff x + c_eff^{1/2} xi`` sharing second moments with the student."""

    w_eff: np.ndarray
    c_eff: np.ndarray


def estimate_row_covariance(
    weights: np.ndarray, companion: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray | None]:
    """Row covariance ``C = p * mean_i w_i w_i^T`` with ``p`` the row length.

    With a ``companion`` matrix of the same shape the cross covariance
    ``p * mean_i w_i v_i^T`` is returned as well.
    """
    weights = np.asarray(weights, dtype=np.float64)
    rows, p = weights.shape
    if rows < 2:
        raise ValueError("need at least 2 rows to estimate a row covariance")
    cov = (p / rows) * (weights.T @ weights)
    cov = 0.5 * (cov + cov.T)
    if companion is None:
        return cov, None
    companion = np.asarray(companion, dtype=np.float64)
    if companion.shape != weights.shape:
        raise ValueError(f"companion shape {companion.shape} does not match weights {weights.shape}")
    return cov, (p / rows) * (weights.T @ companion)


def _ntrace(a: np.ndarray, b: np.ndarray) -> float:
    """``Tr[a b] / dim`` without forming the product."""
    return float(np.einsum("ij,ji->", a, b)) / a.shape[0]


def _layer_cov(net: Network, idx: int, tag: str, provenance: list[str]) -> np.ndarray:
    cov = net.row_covs[idx]
    if cov is None:
        provenance.append("estimated")
        return estimate_row_covariance(net.weights[idx])[0]
    provenance.append("declared")
    return cov


def linearize_pair(
    student: Network,
    teacher: Network,
    omega0: np.ndarray,
    cross_covs: Mapping[int, np.ndarray] | None = None,
    order: int = DEFAULT_ORDER,
) -> Linearization:
    """Run the linear covariance recursions for a student/teacher pair.

    ``cross_covs`` maps 1-based shared layer indices to declared cross
    covariances ``p * E[w v^T]``; missing entries are estimated from the
    weights. Beyond the shallower network's depth only the deeper network's
    covariance keeps its affine-plus-isotropic update, and ``phi`` is carried
    by the deeper network's linear part.
    """
    omega0 = np.asarray(omega0, dtype=np.float64)
    d = omega0.shape[0]
    if student.input_dim != d or teacher.input_dim != d:
        raise ValueError(f"input dims {student.input_dim}, {teacher.input_dim} do not match omega0 ({d})")
    shared = min(student.depth, teacher.depth)
    for i in range(shared):
        if student.weights[i].shape != teacher.weights[i].shape:
            raise ValueError(
                f"shared layer {i + 1} width mismatch: student {student.weights[i].shape}, "
                f"teacher {teacher.weights[i].shape}"
            )
    cross_covs = dict(cross_covs or {})
    prov: dict[str, list[str]] = {"student": [], "teacher": [], "cross": []}

    omega, psi, phi = omega0, omega0, omega0
    omegas, psis, phis = [omega0], [omega0], [omega0]
    s_kappas: list[KappaLayer] = []
    t_kappas: list[KappaLayer] = []
    crosses: list[CrossKappa] = []

    for i in range(max(student.depth, teacher.depth)):
        ks = kt = None
        if i < student.depth:
            w, act = student.weights[i], student.activations[i]
            ks = kappa_layer(act, _ntrace(_layer_cov(student, i, "student", prov["student"]), omega), order)
            s_kappas.append(ks)
        if i < teacher.depth:
            v, act_t = teacher.weights[i], teacher.activations[i]
            kt = kappa_layer(act_t, _ntrace(_layer_cov(teacher, i, "teacher", prov["teacher"]), psi), order)
            t_kappas.append(kt)

        if i < shared:
            if (i + 1) in cross_covs:
                c_cross = cross_covs[i + 1]
                prov["cross"].append("declared")
            else:
                c_cross = estimate_row_covariance(w, v)[1]
                prov["cross"].append("estimated")
            r_cross = _ntrace(c_cross.T, phi)
            ck = cross_kappa(act, act_t, ks.r, kt.r, r_cross, order)
            crosses.append(ck)
            phi = ks.kappa1 * kt.kappa1 * (w @ phi @ v.T) + ck.cross_sq * np.eye(w.shape[0])
        elif ks is not None:
            phi = ks.kappa1 * (w @ phi)
        else:
            phi = kt.kappa1 * (phi @ v.T)

        if ks is not None:
            omega = _affine_iso(ks.kappa1, w, omega, ks.kappa_star_sq)
            omegas.append(omega)
        if kt is not None:
            psi = _affine_iso(kt.kappa1, v, psi, kt.kappa_star_sq)
            psis.append(psi)
        phis.append(phi)

    ladder = KappaLadder(s_kappas, t_kappas, crosses, prov)
    return Linearization(CovarianceTriple(omega, psi, phi), ladder, omegas, psis, phis)


def _affine_iso(kappa1: float, w: np.ndarray, cov: np.ndarray, star_sq: float) -> np.ndarray:
    out = kappa1 * kappa1 * (w @ cov @ w.T)
    out = 0.5 * (out + out.T)
    out[np.diag_indices_from(out)] += star_sq
    return out


def effective_linear_net(weights: Sequence[np.ndarray], kappas: Sequence[KappaLayer]) -> EffectiveLinearNet:
    """Collapse stochastic linear layers into ``(w_eff, c_eff)``.

    ``c_eff = sum_{l<L} (kappa*_l prod_{s>l} kappa1_s)^2 W_L..W_{l+1} W_{l+1}^T..W_L^T
    + (kappa*_L)^2 I``, accumulated in increasing ``l``.
    """
    if len(weights) != len(kappas) or not weights:
        raise ValueError("need one kappa layer per weight matrix")
    for i in range(1, len(weights)):
        if weights[i].shape[1] != weights[i - 1].shape[0]:
            raise ValueError(f"dimension mismatch between layers {i} and {i + 1}")
    n_layers = len(weights)
    p = weights[-1].shape[0]

    w_eff = weights[0]
    for w in weights[1:]:
        w_eff = w @ w_eff
    w_eff = float(np.prod([k.kappa1 for k in kappas])) * w_eff

    c_eff = np.zeros((p, p))
    for l in range(n_layers - 1):
        # chain = W_L ... W_{l+1} in 0-based terms: weights[l+1 .. L-1]
        chain = weights[l + 1]
        for w in weights[l + 2 :]:
            chain = w @ chain
        coeff = kappas[l].kappa_star_sq * float(np.prod([k.kappa1 for k in kappas[l + 1 :]])) ** 2
        c_eff += coeff * (chain @ chain.T)
    c_eff[np.diag_indices_from(c_eff)] += kappas[-1].kappa_star_sq
    c_eff = 0.5 * (c_eff + c_eff.T)
    return EffectiveLinearNet(w_eff, c_eff)
