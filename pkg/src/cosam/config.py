"""Experiment configuration: presets, config files, overrides.

One ExperimentConfig is the single source of truth for a run. Presets pin
the published hyper-parameter sets; a YAML config file and CLI overrides
layer on top (preset < file < override). Dotted keys (arch.embed_dim,
data.per_domain) address nested fields.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from cosam.errors import ConfigError
from cosam.model import ArchConfig


@dataclass(frozen=True)
class DataConfig:
    n_domains: int = 6
    per_domain: int = 100
    master_seed: int = 1234
    root: str = ""  # when set, load from disk instead of generating


@dataclass(frozen=True)
class ExperimentConfig:
    # method hyper-parameters
    alpha: float = 0.2  # perturbation flip probability
    k_points: int = 64  # point prompts per kind
    t_iters: int = 4  # refinement budget
    lambda_r: float = 1.0
    lambda_g: float = 0.1
    threshold: float = 0.5

    # optimization
    epochs: int = 100
    batch_size: int = 16
    base_lr: float = 1e-4
    # the error decoder chases a moving target (the segmenter's mistakes
    # shrink as it trains), so it gets a larger learning rate to converge
    # within the same schedule
    err_lr_scale: float = 10.0
    poly_power: float = 0.9
    optimizer: str = "adam"  # adam | adamw
    mode: str = "scratch"  # scratch | frozen-backbone
    seed: int = 0
    checkpoint_every: int = 10

    # data & architecture
    dims: int = 128
    arch: ArchConfig = field(default_factory=ArchConfig)
    data: DataConfig = field(default_factory=DataConfig)

    # ablation switches
    use_refine_loss: bool = True
    use_guided_loss: bool = True
    use_error_loss: bool = True
    use_points: bool = True
    use_box: bool = True
    use_mask: bool = True
    point_selection: str = "topk"  # topk | random
    omega_counts_from: str = "prediction"  # prediction | label
    error_target_from: str = "clean"  # clean | perturbed

    preset: str = ""

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise ConfigError(f"alpha {self.alpha} outside [0, 1]")
        if self.k_points < 1:
            raise ConfigError(f"k_points must be >= 1, got {self.k_points}")
        if self.t_iters < 1:
            raise ConfigError(f"t_iters must be >= 1, got {self.t_iters}")
        if self.lambda_r < 0 or self.lambda_g < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.err_lr_scale <= 0:
            raise ConfigError(f"err_lr_scale must be > 0, got {self.err_lr_scale}")
        if self.poly_power <= 0:
            raise ConfigError(f"poly_power must be > 0, got {self.poly_power}")
        if not (0.0 < self.threshold < 1.0):
            raise ConfigError(f"threshold {self.threshold} outside (0, 1)")
        if self.optimizer not in ("adam", "adamw"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.mode not in ("scratch", "frozen-backbone"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.point_selection not in ("topk", "random"):
            raise ConfigError(f"unknown point selection {self.point_selection!r}")
        if self.omega_counts_from not in ("label", "prediction"):
            raise ConfigError(f"unknown omega_counts_from {self.omega_counts_from!r}")
        if self.error_target_from not in ("clean", "perturbed"):
            raise ConfigError(f"unknown error_target_from {self.error_target_from!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, default=str)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


# Published hyper-parameter sets, plus a fast toy preset for desk runs.
PRESETS: dict[str, dict] = {
    "prostate": dict(alpha=0.2, k_points=64, t_iters=4, lambda_r=1.0, lambda_g=0.1,
                     epochs=100, batch_size=16, base_lr=1e-4, poly_power=0.9,
                     optimizer="adam"),
    "od": dict(alpha=0.1, k_points=8, t_iters=4, lambda_r=1.0, lambda_g=0.1,
               epochs=10, batch_size=8, base_lr=1e-4, poly_power=0.9,
               optimizer="adamw"),
    "oc": dict(alpha=0.2, k_points=16, t_iters=1, lambda_r=1.0, lambda_g=0.25,
               epochs=20, batch_size=8, base_lr=1e-4, poly_power=0.9,
               optimizer="adamw"),
    "toy": dict(alpha=0.2, k_points=16, t_iters=4, lambda_r=1.0, lambda_g=0.1,
                epochs=30, batch_size=16, base_lr=1e-4, poly_power=0.9,
                optimizer="adam", dims=128),
}

_NESTED = {"arch": ArchConfig, "data": DataConfig}


def _coerce(cls, key: str, value):
    (f,) = [f for f in fields(cls) if f.name == key]
    if f.type in ("int", int):
        return int(value)
    if f.type in ("float", float):
        return float(value)
    if f.type in ("bool", bool):
        if isinstance(value, str):
            return value.lower() in ("1", "true", "yes", "on")
        return bool(value)
    if key in ("enc_channels", "err_channels"):
        if isinstance(value, str):
            value = [int(v) for v in value.split(",")]
        return tuple(int(v) for v in value)
    return value


def _apply(cfg_dict: dict, key: str, value) -> None:
    if "." in key:
        head, rest = key.split(".", 1)
        if head not in _NESTED:
            raise ConfigError(f"unknown config section {head!r}")
        sub = dict(cfg_dict.get(head, {}))
        cls = _NESTED[head]
        if rest not in {f.name for f in fields(cls)}:
            raise ConfigError(f"unknown config key {key!r}")
        sub[rest] = _coerce(cls, rest, value)
        cfg_dict[head] = sub
        return
    valid = {f.name for f in fields(ExperimentConfig)}
    if key not in valid:
        raise ConfigError(f"unknown config key {key!r}")
    if key in _NESTED:
        if not isinstance(value, dict):
            raise ConfigError(f"config key {key!r} expects a mapping")
        sub = dict(cfg_dict.get(key, {}))
        for k, v in value.items():
            sub[k] = _coerce(_NESTED[key], k, v)
        cfg_dict[key] = sub
        return
    cfg_dict[key] = _coerce(ExperimentConfig, key, value)


def build_config(preset: str = "", config_file: str | Path | None = None,
                 overrides: dict | None = None) -> ExperimentConfig:
    """Layer preset, config file, and explicit overrides into one config."""
    cfg_dict: dict = {}
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        for k, v in PRESETS[preset].items():
            _apply(cfg_dict, k, v)
        cfg_dict["preset"] = preset
    if config_file:
        path = Path(config_file)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        loaded = yaml.safe_load(path.read_text()) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must contain a mapping")
        for k, v in loaded.items():
            _apply(cfg_dict, k, v)
    for k, v in (overrides or {}).items():
        _apply(cfg_dict, k, v)
    for section, cls in _NESTED.items():
        if section in cfg_dict:
            cfg_dict[section] = cls(**cfg_dict[section])
    try:
        return ExperimentConfig(**cfg_dict)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def with_overrides(cfg: ExperimentConfig, **kwargs) -> ExperimentConfig:
    return replace(cfg, **kwargs)
