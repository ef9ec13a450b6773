"""Scenario descriptions: covariance specs, rainbow architectures, JSON I/O.

A scenario is a JSON document (schema in ``scenario.schema.json``) holding a
teacher and a student rainbow network, the ridge penalty, the sample-ratio grid
and the Monte Carlo settings. Layer indices in weight rules are 1-based.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import os
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import jsonschema
import numpy as np

from .activations import ACTIVATIONS
from .matrix_io import read_matrix

COV_KINDS = (
    "identity",
    "power_law",
    "diagonal",
    "file",
    "shifted_power_law_mix",
    "function_of_weights",
)
WEIGHT_RULES = ("fresh_gaussian", "tied", "mixed", "function_of_previous")
WEIGHT_FUNCTIONS = ("inv_gram_plus_half",)
MIX_TRANSFORMS = ("identity", "inverse_cov")
PSD_JITTER = 1e-12


class ScenarioError(ValueError):
    """Invalid scenario; ``path`` locates the offending field."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


@dataclass(frozen=True)
class CovarianceSpec:
    kind: str
    scale: float = 1.0
    exponent: float = 0.0
    values: tuple[float, ...] | None = None
    path: str | None = None
    weights: tuple[float, float] | None = None
    exponents: tuple[float, float] | None = None
    rule: str | None = None
    layer: int | None = None
    shift: float = 0.5

    @classmethod
    def identity(cls, scale: float = 1.0) -> "CovarianceSpec":
        return cls("identity", scale=scale)

    @classmethod
    def power_law(cls, exponent: float, scale: float = 1.0) -> "CovarianceSpec":
        return cls("power_law", scale=scale, exponent=exponent)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "CovarianceSpec":
        kind = d["kind"]
        if kind == "identity":
            return cls(kind, scale=float(d.get("scale", 1.0)))
        if kind == "power_law":
            return cls(kind, scale=float(d.get("scale", 1.0)), exponent=float(d["exponent"]))
        if kind == "diagonal":
            return cls(kind, values=tuple(float(v) for v in d["values"]))
        if kind == "file":
            return cls(kind, path=str(d["path"]))
        if kind == "shifted_power_law_mix":
            return cls(
                kind,
                weights=tuple(float(v) for v in d["weights"]),
                exponents=tuple(float(v) for v in d["exponents"]),
            )
        if kind == "function_of_weights":
            return cls(kind, rule=d["rule"], layer=int(d["layer"]), shift=float(d.get("shift", 0.5)))
        raise ScenarioError("kind", f"unknown covariance kind {kind!r}")

    def to_dict(self) -> dict[str, Any]:
        if self.kind == "identity":
            return {"kind": self.kind, "scale": self.scale}
        if self.kind == "power_law":
            return {"kind": self.kind, "exponent": self.exponent, "scale": self.scale}
        if self.kind == "diagonal":
            return {"kind": self.kind, "values": list(self.values)}
        if self.kind == "file":
            return {"kind": self.kind, "path": self.path}
        if self.kind == "shifted_power_law_mix":
            return {"kind": self.kind, "weights": list(self.weights), "exponents": list(self.exponents)}
        return {"kind": self.kind, "rule": self.rule, "layer": self.layer, "shift": self.shift}

    @property
    def needs_weights(self) -> bool:
        return self.kind == "function_of_weights"


@dataclass(frozen=True)
class WeightRule:
    """How a layer's weights are drawn.

    ``fresh_gaussian``        W = Z C^{1/2} with C from ``cov``.
    ``tied``                  W is the matrix of earlier layer ``layer``.
    ``mixed``                 W = a Z S^{1/2} + b V_j T, mixing a fresh draw
                              (``fresh_coeff``, ``cov``) with teacher layer
                              ``layer`` (``teacher_coeff``); T is the identity or
                              the inverse teacher row covariance (``transform``).
    ``function_of_previous``  fresh draw whose covariance is ``function`` of the
                              weights of earlier layer ``layer``.
    """

    rule: str
    cov: CovarianceSpec | None = None
    layer: int | None = None
    fresh_coeff: float = 0.5
    teacher_coeff: float = 0.5
    transform: str = "identity"
    function: str | None = None
    shift: float = 0.5

    @classmethod
    def fresh(cls, cov: CovarianceSpec) -> "WeightRule":
        return cls("fresh_gaussian", cov=cov)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "WeightRule":
        rule = d["rule"]
        if rule == "fresh_gaussian":
            return cls(rule, cov=CovarianceSpec.from_dict(d["cov"]))
        if rule == "tied":
            return cls(rule, layer=int(d["layer"]))
        if rule == "mixed":
            return cls(
                rule,
                cov=CovarianceSpec.from_dict(d["cov"]),
                layer=int(d["layer"]),
                fresh_coeff=float(d.get("fresh_coeff", 0.5)),
                teacher_coeff=float(d.get("teacher_coeff", 0.5)),
                transform=d.get("transform", "identity"),
            )
        if rule == "function_of_previous":
            return cls(rule, layer=int(d["layer"]), function=d["function"], shift=float(d.get("shift", 0.5)))
        raise ScenarioError("rule", f"unknown weight rule {rule!r}")

    def to_dict(self) -> dict[str, Any]:
        if self.rule == "fresh_gaussian":
            return {"rule": self.rule, "cov": self.cov.to_dict()}
        if self.rule == "tied":
            return {"rule": self.rule, "layer": self.layer}
        if self.rule == "mixed":
            return {
                "rule": self.rule,
                "cov": self.cov.to_dict(),
                "layer": self.layer,
                "fresh_coeff": self.fresh_coeff,
                "teacher_coeff": self.teacher_coeff,
                "transform": self.transform,
            }
        return {"rule": self.rule, "layer": self.layer, "function": self.function, "shift": self.shift}

    def covariance_spec(self) -> CovarianceSpec | None:
        """Row covariance of the fresh Gaussian part, if the rule has one."""
        if self.rule in ("fresh_gaussian", "mixed"):
            return self.cov
        if self.rule == "function_of_previous":
            return CovarianceSpec("function_of_weights", rule=self.function, layer=self.layer, shift=self.shift)
        return None


@dataclass(frozen=True)
class LayerSpec:
    width: int
    activation: str
    weight_rule: WeightRule

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "LayerSpec":
        return cls(int(d["width"]), d["activation"], WeightRule.from_dict(d["weight_rule"]))

    def to_dict(self) -> dict[str, Any]:
        return {"width": self.width, "activation": self.activation, "weight_rule": self.weight_rule.to_dict()}


@dataclass(frozen=True)
class ReadoutSpec:
    kind: str = "iid_gaussian"
    variance: float = 1.0
    path: str | None = None

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ReadoutSpec":
        if d["kind"] == "file":
            return cls("file", path=str(d["path"]))
        return cls("iid_gaussian", variance=float(d.get("variance", 1.0)))

    def to_dict(self) -> dict[str, Any]:
        if self.kind == "file":
            return {"kind": "file", "path": self.path}
        return {"kind": self.kind, "variance": self.variance}


@dataclass(frozen=True)
class RainbowSpec:
    layers: tuple[LayerSpec, ...]
    input_dim: int
    input_covariance: CovarianceSpec
    readout: ReadoutSpec = field(default_factory=ReadoutSpec)

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def output_dim(self) -> int:
        return self.layers[-1].width

    def layer_input_dim(self, index: int) -> int:
        """Input dimension of 1-based layer ``index``."""
        return self.input_dim if index == 1 else self.layers[index - 2].width


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    teacher: RainbowSpec
    student: RainbowSpec
    ridge_lambda: float
    sample_ratios: tuple[float, ...]
    replicates: int = 20
    seed: int = 0
    noise_trace: float = 0.0
    covariance_budget: float = 10.0

    @property
    def input_dim(self) -> int:
        return self.student.input_dim

    @property
    def input_covariance(self) -> CovarianceSpec:
        return self.student.input_covariance

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "input_dim": self.input_dim,
            "input_covariance": self.input_covariance.to_dict(),
            "teacher": _net_to_dict(self.teacher),
            "student": _net_to_dict(self.student),
            "noise_trace": self.noise_trace,
            "ridge_lambda": self.ridge_lambda,
            "sample_ratios": list(self.sample_ratios),
            "replicates": self.replicates,
            "seed": self.seed,
            "covariance_budget": self.covariance_budget,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    def digest(self) -> str:
        """Stable SHA-256 of the canonical JSON form."""
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def with_dim(self, dim: int) -> "ScenarioConfig":
        """Rescale a uniform-width scenario (all widths == input_dim) to ``dim``."""
        d0 = self.input_dim
        nets = []
        for net in (self.teacher, self.student):
            if any(layer.width != d0 for layer in net.layers):
                raise ScenarioError("", "with_dim needs every layer width equal to input_dim")
            if any(_fixed_size(layer.weight_rule.cov) for layer in net.layers) or _fixed_size(net.input_covariance):
                raise ScenarioError("", "with_dim cannot resize file or explicit-diagonal covariances")
            layers = tuple(replace(layer, width=dim) for layer in net.layers)
            nets.append(replace(net, layers=layers, input_dim=dim))
        return replace(self, teacher=nets[0], student=nets[1])


def _fixed_size(spec: CovarianceSpec | None) -> bool:
    return spec is not None and spec.kind in ("diagonal", "file")


def _net_to_dict(net: RainbowSpec) -> dict[str, Any]:
    return {"layers": [layer.to_dict() for layer in net.layers], "readout": net.readout.to_dict()}


# ---------------------------------------------------------------------------
# covariance materialization


def materialize_covariance(
    spec: CovarianceSpec,
    dim: int,
    context: Mapping[int, np.ndarray] | None = None,
) -> np.ndarray:
    """Build the ``dim x dim`` covariance described by ``spec``.

    ``context`` maps 1-based layer indices to realized weight matrices and is
    required by ``function_of_weights`` specs. The result is checked to be
    symmetric PSD (Cholesky after at most one ``1e-12 * I`` jitter) but is
    never repaired.
    """
    if dim <= 0:
        raise ValueError(f"dimension must be positive, got {dim}")
    k = np.arange(1, dim + 1, dtype=np.float64)
    if spec.kind == "identity":
        cov = spec.scale * np.eye(dim)
    elif spec.kind == "power_law":
        cov = np.diag(spec.scale * k ** (-spec.exponent))
    elif spec.kind == "diagonal":
        if len(spec.values) != dim:
            raise ValueError(f"diagonal covariance has {len(spec.values)} values, expected {dim}")
        cov = np.diag(np.asarray(spec.values, dtype=np.float64))
    elif spec.kind == "file":
        cov = read_matrix(spec.path)
        if cov.shape != (dim, dim):
            raise ValueError(f"{spec.path}: covariance shape {cov.shape}, expected {(dim, dim)}")
    elif spec.kind == "shifted_power_law_mix":
        (a, b), (g1, g2) = spec.weights, spec.exponents
        cov = np.diag(a * k ** (-g1) + b * k ** (-g2))
    elif spec.kind == "function_of_weights":
        if context is None or spec.layer not in context:
            raise ValueError(f"function_of_weights rule {spec.rule!r} needs the weights of layer {spec.layer}")
        cov = weight_function(spec.rule, context[spec.layer], spec.shift)
        if cov.shape != (dim, dim):
            raise ValueError(f"rule {spec.rule!r} gives shape {cov.shape}, expected {(dim, dim)}")
    else:
        raise ValueError(f"unknown covariance kind {spec.kind!r}")
    check_psd(cov, what=f"{spec.kind} covariance")
    return cov


def weight_function(rule: str, weights: np.ndarray, shift: float = 0.5) -> np.ndarray:
    if rule != "inv_gram_plus_half":
        raise ValueError(f"unknown weight function {rule!r}")
    gram = weights @ weights.T
    cov = np.linalg.inv(gram + shift * np.eye(gram.shape[0]))
    return 0.5 * (cov + cov.T)


def check_psd(cov: np.ndarray, what: str = "matrix") -> None:
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ValueError(f"{what} is not square: {cov.shape}")
    if not np.allclose(cov, cov.T, rtol=0, atol=1e-12 * max(1.0, np.abs(cov).max())):
        raise ValueError(f"{what} is not symmetric")
    try:
        np.linalg.cholesky(cov)
        return
    except np.linalg.LinAlgError:
        pass
    try:
        np.linalg.cholesky(cov + PSD_JITTER * np.eye(cov.shape[0]))
    except np.linalg.LinAlgError:
        w = np.linalg.eigvalsh(cov)
        raise ValueError(f"{what} is not positive semi-definite (min eigenvalue {w[0]:.3e})") from None


# ---------------------------------------------------------------------------
# loading and validation


def _schema() -> dict[str, Any]:
    text = resources.files("rainbow_rf").joinpath("scenario.schema.json").read_text()
    return json.loads(text)


def _error_path(err: jsonschema.ValidationError) -> str:
    out = ""
    for part in err.absolute_path:
        out += f"[{part}]" if isinstance(part, int) else (f".{part}" if out else str(part))
    return out


def scenario_from_dict(data: Mapping[str, Any], base_dir: str | os.PathLike | None = None) -> ScenarioConfig:
    """Validate ``data`` against the schema and the semantic rules."""
    validator = jsonschema.Draft202012Validator(_schema())
    errors = sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        raise ScenarioError(_error_path(errors[0]), errors[0].message)
    data = copy.deepcopy(dict(data))
    if base_dir is not None:
        _resolve_paths(data, Path(base_dir))

    input_cov = CovarianceSpec.from_dict(data["input_covariance"])
    d = int(data["input_dim"])

    def net(key: str) -> RainbowSpec:
        raw = data[key]
        return RainbowSpec(
            layers=tuple(LayerSpec.from_dict(layer) for layer in raw["layers"]),
            input_dim=d,
            input_covariance=input_cov,
            readout=ReadoutSpec.from_dict(raw.get("readout", {"kind": "iid_gaussian", "variance": 1.0})),
        )

    cfg = ScenarioConfig(
        name=data.get("name", "scenario"),
        teacher=net("teacher"),
        student=net("student"),
        ridge_lambda=float(data["ridge_lambda"]),
        sample_ratios=tuple(float(a) for a in data["sample_ratios"]),
        replicates=int(data.get("replicates", 20)),
        seed=int(data.get("seed", 0)),
        noise_trace=float(data.get("noise_trace", 0.0)),
        covariance_budget=float(data.get("covariance_budget", 10.0)),
    )
    validate_scenario(cfg)
    return cfg


def _resolve_paths(obj: Any, base: Path) -> None:
    if isinstance(obj, dict):
        if obj.get("kind") == "file" and "path" in obj:
            p = Path(obj["path"])
            obj["path"] = str(p if p.is_absolute() else (base / p).resolve())
        for v in obj.values():
            _resolve_paths(v, base)
    elif isinstance(obj, list):
        for v in obj:
            _resolve_paths(v, base)


def load_scenario(path: str | os.PathLike) -> ScenarioConfig:
    """Parse and validate a scenario JSON file; relative file paths resolve
    against the scenario's directory."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError("", f"{path}: malformed JSON ({exc})") from exc
    return scenario_from_dict(data, base_dir=path.parent)


def save_scenario(cfg: ScenarioConfig, path: str | os.PathLike) -> None:
    Path(path).write_text(cfg.to_json())


def validate_scenario(cfg: ScenarioConfig) -> None:
    if not cfg.ridge_lambda > 0 or not math.isfinite(cfg.ridge_lambda):
        raise ScenarioError("ridge_lambda", f"must be > 0, got {cfg.ridge_lambda}")
    if cfg.noise_trace < 0:
        raise ScenarioError("noise_trace", "must be >= 0")
    for i, a in enumerate(cfg.sample_ratios):
        if not a > 0:
            raise ScenarioError(f"sample_ratios[{i}]", f"must be > 0, got {a}")
    if cfg.replicates < 2:
        raise ScenarioError("replicates", "need at least 2 replicates")
    if cfg.input_dim <= 0:
        raise ScenarioError("input_dim", "must be positive")
    _check_static_cov(cfg.input_covariance, cfg.input_dim, cfg.covariance_budget, "input_covariance")
    for key in ("teacher", "student"):
        _validate_net(cfg, key)


def _validate_net(cfg: ScenarioConfig, key: str) -> None:
    net: RainbowSpec = getattr(cfg, key)
    if net.depth == 0:
        raise ScenarioError(f"{key}.layers", "need at least one layer")
    for idx, layer in enumerate(net.layers, start=1):
        where = f"{key}.layers[{idx - 1}]"
        if layer.width <= 0:
            raise ScenarioError(f"{where}.width", "must be positive")
        if layer.activation not in ACTIVATIONS:
            raise ScenarioError(f"{where}.activation", f"unknown activation {layer.activation!r}")
        rule = layer.weight_rule
        shape = (layer.width, net.layer_input_dim(idx))
        if rule.rule in ("tied", "function_of_previous") or (
            rule.cov is not None and rule.cov.kind == "function_of_weights"
        ):
            ref = rule.layer if rule.rule != "fresh_gaussian" else rule.cov.layer
            if not 1 <= ref < idx:
                raise ScenarioError(
                    f"{where}.weight_rule.layer",
                    f"forward reference: layer {idx} may only reference earlier layers, got {ref}",
                )
        if rule.rule == "tied":
            ref = net.layers[rule.layer - 1]
            ref_shape = (ref.width, net.layer_input_dim(rule.layer))
            if ref_shape != shape:
                raise ScenarioError(f"{where}.weight_rule.layer", f"tied shape {ref_shape} != {shape}")
        if rule.rule == "function_of_previous" or (rule.cov is not None and rule.cov.needs_weights):
            fn = rule.function if rule.rule == "function_of_previous" else rule.cov.rule
            ref = rule.layer if rule.rule == "function_of_previous" else rule.cov.layer
            if fn not in WEIGHT_FUNCTIONS:
                raise ScenarioError(f"{where}.weight_rule", f"unknown weight function {fn!r}")
            if net.layers[ref - 1].width != shape[1]:
                raise ScenarioError(
                    f"{where}.weight_rule.layer",
                    f"covariance from layer {ref} has size {net.layers[ref - 1].width}, layer input is {shape[1]}",
                )
        if rule.rule == "mixed":
            if key != "student":
                raise ScenarioError(f"{where}.weight_rule", "mixed rules are only supported in the student")
            if not 1 <= rule.layer <= cfg.teacher.depth:
                raise ScenarioError(f"{where}.weight_rule.layer", f"no teacher layer {rule.layer}")
            t_shape = (cfg.teacher.layers[rule.layer - 1].width, cfg.teacher.layer_input_dim(rule.layer))
            if t_shape != shape:
                raise ScenarioError(f"{where}.weight_rule.layer", f"teacher layer shape {t_shape} != {shape}")
            if rule.transform not in MIX_TRANSFORMS:
                raise ScenarioError(f"{where}.weight_rule.transform", f"unknown transform {rule.transform!r}")
        cov = rule.covariance_spec()
        if cov is not None and not cov.needs_weights:
            _check_static_cov(cov, shape[1], cfg.covariance_budget, f"{where}.weight_rule.cov")
    if net.readout.kind == "iid_gaussian" and not net.readout.variance > 0:
        raise ScenarioError(f"{key}.readout.variance", "must be > 0")


def _check_static_cov(spec: CovarianceSpec, dim: int, budget: float, where: str) -> None:
    if spec.needs_weights:
        raise ScenarioError(where, "function_of_weights is not allowed here")
    if spec.kind == "power_law" and spec.exponent < 0:
        raise ScenarioError(f"{where}.exponent", "power-law exponent must be >= 0")
    try:
        cov = materialize_covariance(spec, dim)
    except (ValueError, OSError) as exc:
        raise ScenarioError(where, str(exc)) from exc
    norm = float(np.linalg.norm(cov, 2)) if spec.kind == "file" else float(np.abs(np.diag(cov)).max())
    if norm > budget:
        raise ScenarioError(where, f"operator norm {norm:.4g} exceeds covariance budget {budget:.4g}")


# ---------------------------------------------------------------------------
# presets

FIG1_GAMMAS = (0.0, 0.2, 0.5, 0.8)
FIG1_RATIOS = (0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 2.0, 2.5, 3.0)


def fig1_scenario(gamma: float, dim: int = 1000, variant: str = "appendix") -> ScenarioConfig:
    """Deep structured student learning a one-hidden-layer tanh teacher.

    Teacher: tanh(W* x) with W* = Z* diag(k^-0.3)^{1/2}. Student:
    tanh(W3 tanh(W2 tanh(W1 x))) with W1 = Z1 diag(k^-gamma)^{1/2}/2 + W*/2,
    W2 = W1 and W3 = Z3 (W1 W1^T + I/2)^{-1/2}.

    ``variant="caption"`` instead mixes in W* C*^{-1}, giving a cross
    covariance of I/2 with the teacher's first layer.
    """
    if variant not in ("appendix", "caption"):
        raise ValueError(f"unknown fig1 variant {variant!r}")
    ident = CovarianceSpec.identity()
    teacher = RainbowSpec(
        layers=(LayerSpec(dim, "tanh", WeightRule.fresh(CovarianceSpec.power_law(0.3))),),
        input_dim=dim,
        input_covariance=ident,
        readout=ReadoutSpec("iid_gaussian", 1.0),
    )
    mixed = WeightRule(
        "mixed",
        cov=CovarianceSpec.power_law(gamma),
        layer=1,
        fresh_coeff=0.5,
        teacher_coeff=0.5,
        transform="identity" if variant == "appendix" else "inverse_cov",
    )
    student = RainbowSpec(
        layers=(
            LayerSpec(dim, "tanh", mixed),
            LayerSpec(dim, "tanh", WeightRule("tied", layer=1)),
            LayerSpec(dim, "tanh", WeightRule("function_of_previous", layer=1, function="inv_gram_plus_half")),
        ),
        input_dim=dim,
        input_covariance=ident,
        readout=ReadoutSpec("iid_gaussian", 1.0),
    )
    prefix = "fig1" if variant == "appendix" else "fig1caption"
    cfg = ScenarioConfig(
        name=f"{prefix}-gamma{gamma}",
        teacher=teacher,
        student=student,
        ridge_lambda=1e-4,
        sample_ratios=FIG1_RATIOS,
        replicates=20,
        seed=0,
        noise_trace=0.0,
    )
    validate_scenario(cfg)
    return cfg


def preset_names() -> list[str]:
    return sorted(
        p.name[: -len(".json")]
        for p in resources.files("rainbow_rf").joinpath("presets").iterdir()
        if p.name.endswith(".json")
    )


def load_preset(name: str) -> ScenarioConfig:
    if name not in preset_names():
        raise ScenarioError("preset", f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    text = resources.files("rainbow_rf").joinpath("presets", f"{name}.json").read_text()
    return scenario_from_dict(json.loads(text))
