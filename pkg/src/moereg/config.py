"""Experiment configuration: defaults, JSON loading, validation.

A config is a single JSON document; every default lives here and is
materialized in configs/defaults.json so experiments are self-describing.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .errors import ConfigError
from .prior import PriorConfig
from .scenes import SceneConfig


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    num_experts: int = 4
    k: int = 1
    num_blocks: int = 3
    routing: str = "prior"          # prior | vanilla | dense
    coding: str = "ordered"         # ordered | binary | none
    embedding_scale: float = 1.0
    smoe_in_cross: bool = True
    attn_out_scale: float = 0.25
    seed: int = 0


@dataclass(frozen=True)
class MatchConfig:
    top_c: int = 48
    mutual_top: int = 3
    min_similarity: float = 0.0
    sinkhorn_iterations: int = 100
    feature_radius: float = 0.25
    feature_sigma: float = 0.35
    position_sigma: float = 0.10
    position_cut: float = 0.25
    slack_cost: float = 2.0
    min_confidence: float = 0.06


@dataclass(frozen=True)
class RegisterConfig:
    iterations: int = 6
    lgr_rounds: int = 5
    inlier_radius: float = 0.05
    verify_radius: float = 0.06
    accept_margin: float = 0.03
    seed_pairs: int = 16
    early_exit_deg: float = 0.1
    early_exit_m: float = 0.001


@dataclass(frozen=True)
class MetricConfig:
    inlier_threshold: float = 0.1
    fmr_ir_threshold: float = 0.05
    rr_rmse_threshold: float = 0.2


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    num_pairs: int = 4
    seeds: tuple | None = None      # explicit pair seeds override seed/num_pairs
    voxel_size: float = 0.50
    descriptor_radius: float = 0.55
    scene: SceneConfig = field(default_factory=SceneConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    match: MatchConfig = field(default_factory=MatchConfig)
    register: RegisterConfig = field(default_factory=RegisterConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)

    def pair_seeds(self) -> list:
        if self.seeds is not None:
            return [int(s) for s in self.seeds]
        return [self.seed + i for i in range(self.num_pairs)]

    def validate(self) -> "ExperimentConfig":
        if self.voxel_size <= 0 or self.descriptor_radius <= 0:
            raise ConfigError("voxel_size and descriptor_radius must be positive")
        if self.num_pairs < 0:
            raise ConfigError("num_pairs must be >= 0")
        if self.model.routing not in ("prior", "vanilla", "dense"):
            raise ConfigError(f"unknown routing mode {self.model.routing!r}")
        if self.model.coding not in ("ordered", "binary", "none"):
            raise ConfigError(f"unknown coding scheme {self.model.coding!r}")
        if self.model.routing == "prior" and self.model.coding == "none":
            raise ConfigError("prior routing needs an ordered or binary coding")
        if not (1 <= self.model.k <= self.model.num_experts):
            raise ConfigError("k must lie in [1, num_experts]")
        if self.model.d % 2 != 0 or self.model.d < 8:
            raise ConfigError("d must be even and >= 8")
        if self.model.num_experts < 1:
            raise ConfigError("need at least one expert")
        if not (0.0 < self.scene.overlap <= 1.0):
            raise ConfigError("scene overlap target outside (0, 1]")
        if self.scene.n_points < 100:
            raise ConfigError("scene n_points must be >= 100")
        if not (0.0 <= self.prior.tau_o < 1.0):
            raise ConfigError("tau_o outside [0, 1)")
        if self.register.iterations < 1:
            raise ConfigError("register iterations must be >= 1")
        if self.match.top_c < 1 or self.match.mutual_top < 1:
            raise ConfigError("match top_c and mutual_top must be >= 1")
        return self

    def to_json(self) -> dict:
        out = dataclasses.asdict(self)
        if out["seeds"] is not None:
            out["seeds"] = list(out["seeds"])
        return out

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)


_SECTIONS = {
    "scene": SceneConfig,
    "prior": PriorConfig,
    "model": ModelConfig,
    "match": MatchConfig,
    "register": RegisterConfig,
    "metrics": MetricConfig,
}


def _build_section(cls, data, name):
    if not isinstance(data, dict):
        raise ConfigError(f"section {name!r} must be an object")
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - fields
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {name!r} section: {exc}") from exc


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    fields = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(data) - fields
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kw = {}
    for key, value in data.items():
        if key in _SECTIONS:
            kw[key] = _build_section(_SECTIONS[key], value, key)
        elif key == "seeds" and value is not None:
            kw[key] = tuple(int(s) for s in value)
        else:
            kw[key] = value
    try:
        cfg = ExperimentConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(data)


def default_config() -> ExperimentConfig:
    return ExperimentConfig().validate()


def apply_axis(config: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    """Derive a config for one ablation-axis value.

    tau_o sweeps the prior threshold; routing sweeps the routing mode;
    coding sweeps the PCE scheme, where 'none' means vanilla SMoE (the
    no-coding baseline row).
    """
    if axis == "tau_o":
        return config.replace(prior=dataclasses.replace(config.prior, tau_o=float(value))).validate()
    if axis == "routing":
        return config.replace(model=dataclasses.replace(config.model, routing=str(value))).validate()
    if axis == "coding":
        value = str(value)
        if value == "none":
            model = dataclasses.replace(config.model, coding="none", routing="vanilla")
        else:
            model = dataclasses.replace(config.model, coding=value, routing="prior")
        return config.replace(model=model).validate()
    raise ConfigError(f"unknown ablation axis {axis!r}")
