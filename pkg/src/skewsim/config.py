"""Experiment configuration: flat JSON keys, strict validation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from typing import Any

from .errors import ConfigError

_REQUIRED = object()


@dataclass
class ExperimentConfig:
    # dataset
    dataset: str = "synth"
    synth_classes: int = 10
    synth_samples: int = 5000
    synth_dim: int = 64
    synth_separation: float = 3.0
    idx_images: str = ""
    idx_labels: str = ""
    csv_path: str = ""
    num_classes: int = 0  # 0 = infer from labels
    standardize: bool = False
    val_fraction: float = 0.1
    # model
    arch: str = "mlp"
    norm: str = "none"
    group_size: int = 2
    hidden: int = 128
    # cluster
    nodes: int = 5
    skew_fraction: float = _REQUIRED  # type: ignore[assignment]
    batch_size: int = 20
    epochs: int = 10
    eval_every: int = 1
    moment_window: int = 100
    # sync
    algo: str = "bsp"
    bsp_aggregation: str = "mean"
    gaia_t0: float = 0.10
    gaia_t_min: float = 0.01
    fedavg_iter_local: int = 20
    fedavg_weighted: bool = False
    dgc_e_warm: int = 4
    dgc_clip_norm: float = 5.0
    # optimizer
    lr0: float = 0.01
    lr_schedule: str = "step"
    lr_step_drops: list = field(default_factory=lambda: [[64, 10.0], [96, 10.0]])
    lr_poly_power: float = 1.0
    momentum: float = 0.9
    weight_decay: float = 0.0005
    # seeds
    seed_data: int = 0
    seed_init: int = 0
    seed_sampling: int = 0
    # misc
    dtype: str = "f32"
    tag: str = ""

    def __post_init__(self):
        if self.skew_fraction is _REQUIRED:
            raise ConfigError("missing required key 'skew_fraction'")
        validate(self)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def replace(self, **kw) -> "ExperimentConfig":
        d = self.to_dict()
        d.update(kw)
        return ExperimentConfig(**d)


_BOOL_KEYS = {"standardize", "fedavg_weighted"}
_STR_KEYS = {
    "dataset", "idx_images", "idx_labels", "csv_path", "arch", "norm",
    "algo", "bsp_aggregation", "lr_schedule", "dtype", "tag",
}
_INT_KEYS = {
    "synth_classes", "synth_samples", "synth_dim", "num_classes", "group_size",
    "hidden", "nodes", "batch_size", "epochs", "eval_every", "moment_window",
    "fedavg_iter_local", "dgc_e_warm", "seed_data", "seed_init", "seed_sampling",
}
_FLOAT_KEYS = {
    "synth_separation", "val_fraction", "skew_fraction", "gaia_t0", "gaia_t_min",
    "dgc_clip_norm", "lr0", "lr_poly_power", "momentum", "weight_decay",
}


def _check_type(key: str, value: Any) -> Any:
    if key in _BOOL_KEYS:
        if not isinstance(value, bool):
            raise ConfigError(f"'{key}': expected bool, got {type(value).__name__}")
        return value
    if key in _STR_KEYS:
        if not isinstance(value, str):
            raise ConfigError(f"'{key}': expected string, got {type(value).__name__}")
        return value
    if key in _INT_KEYS:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"'{key}': expected integer, got {type(value).__name__}")
        return value
    if key in _FLOAT_KEYS:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"'{key}': expected number, got {type(value).__name__}")
        return float(value)
    if key == "lr_step_drops":
        if not isinstance(value, list) or not all(
            isinstance(p, (list, tuple)) and len(p) == 2 for p in value
        ):
            raise ConfigError("'lr_step_drops': expected a list of [epoch, divisor] pairs")
        return [[int(e), float(d)] for e, d in value]
    raise ConfigError(f"unknown config key '{key}'")


def config_from_dict(raw: dict) -> ExperimentConfig:
    known = {f.name for f in fields(ExperimentConfig)}
    clean = {}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"unknown config key '{key}'")
        clean[key] = _check_type(key, value)
    return ExperimentConfig(**clean)


def config_from_json(text: str) -> ExperimentConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    return config_from_dict(raw)


def load_config(path: str) -> ExperimentConfig:
    with open(path) as fh:
        return config_from_json(fh.read())


def validate(cfg: ExperimentConfig) -> None:
    def require(cond: bool, msg: str):
        if not cond:
            raise ConfigError(msg)

    require(cfg.dataset in ("synth", "idx", "csv"), f"'dataset': unknown kind {cfg.dataset!r}")
    require(cfg.arch in ("logreg", "mlp", "smallconv"), f"'arch': unknown value {cfg.arch!r}")
    require(cfg.norm in ("none", "batch", "group"), f"'norm': unknown value {cfg.norm!r}")
    require(cfg.algo in ("bsp", "gaia", "fedavg", "dgc"), f"'algo': unknown value {cfg.algo!r}")
    require(cfg.bsp_aggregation in ("sum", "mean"), "'bsp_aggregation': must be sum or mean")
    require(cfg.lr_schedule in ("step", "poly"), "'lr_schedule': must be step or poly")
    require(cfg.dtype in ("f32", "f64"), "'dtype': must be f32 or f64")
    require(0.0 <= cfg.skew_fraction <= 1.0, "'skew_fraction': must lie in [0, 1]")
    require(cfg.nodes >= 1, "'nodes': must be >= 1")
    require(cfg.batch_size >= 1, "'batch_size': must be >= 1")
    require(cfg.epochs >= 1, "'epochs': must be >= 1")
    require(cfg.eval_every >= 1, "'eval_every': must be >= 1")
    require(cfg.moment_window >= 1, "'moment_window': must be >= 1")
    require(cfg.lr0 > 0, "'lr0': must be positive")
    require(cfg.fedavg_iter_local >= 1, "'fedavg_iter_local': must be >= 1")
    require(cfg.dgc_e_warm >= 1, "'dgc_e_warm': must be >= 1")
    require(cfg.gaia_t0 >= 0, "'gaia_t0': must be >= 0")
    require(0 <= cfg.val_fraction < 1, "'val_fraction': must lie in [0, 1)")
    if cfg.dataset == "idx":
        require(bool(cfg.idx_images) and bool(cfg.idx_labels), "'idx_images'/'idx_labels': required for idx datasets")
    if cfg.dataset == "csv":
        require(bool(cfg.csv_path), "'csv_path': required for csv datasets")
