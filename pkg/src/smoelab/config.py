"""Run configuration: line-oriented `key = value` files with one section per
subsystem, dotted overrides, canonical serialization, and content hashing.

Unknown keys are rejected with the full list of valid dotted keys. Identical
configurations hash to identical output directories; any value change
changes the hash.
"""

from __future__ import annotations

import configparser
import hashlib
import os
from dataclasses import dataclass, field, replace

from .errors import ConfigError
from .model import ModelConfig

_MODEL_KEYS = {
    "n_layers": int,
    "d_model": int,
    "n_heads": int,
    "inner_dim": int,
    "n_experts": int,
    "dropout": float,
    "vocab_size": int,
    "max_seq_len": int,
    "strategy": str,
    "renormalize_gates": bool,
    "hyper_embed_dim": int,
    "hyper_inner_dim": int,
}

_TRAINING_KEYS = {
    "seed": int,
    "lr": float,
    "beta1": float,
    "beta2": float,
    "eps": float,
    "batch_size": int,
    "input_length": int,
    "total_iterations": int,
    "eval_ks": str,
    "k_schedule": str,
    "lr_schedule": str,
    "clip_norm": float,
    "thor_consistency_weight": float,
    "balance_loss_weight": float,
    "log_interval": int,
    "eval_interval": int,
    "checkpoint_interval": int,
    "finetune_lr": float,
    "finetune_epochs": int,
    "finetune_batch_size": int,
    "checkpoint": str,
}

_DATA_KEYS = {"dataset": str}

_SCHEMA = {"model": _MODEL_KEYS, "training": _TRAINING_KEYS, "data": _DATA_KEYS}


@dataclass
class RunConfig:
    """Complete description of one experiment."""

    model: ModelConfig = field(default_factory=ModelConfig)
    dataset: str = ""
    seed: int = 0
    lr: float = 2.5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 22
    input_length: int = 512
    total_iterations: int = 400_000
    eval_ks: tuple[int, ...] = (1, 2, 4, 8, 16)
    k_schedule: str = "linear"
    lr_schedule: str = "constant"
    clip_norm: float = 0.25
    thor_consistency_weight: float = 1.0
    balance_loss_weight: float = 0.0
    log_interval: int = 50
    eval_interval: int = 0
    checkpoint_interval: int = 0
    finetune_lr: float = 1e-4
    finetune_epochs: int = 3
    finetune_batch_size: int = 16
    checkpoint: str = ""

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        n = self.model.n_experts
        if any(k < 1 or k > n for k in self.eval_ks):
            raise ConfigError(f"eval_ks {self.eval_ks} must lie in [1, {n}]")
        if self.k_schedule not in ("linear", "doubling"):
            raise ConfigError(f"k_schedule must be linear or doubling, got {self.k_schedule!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"lr_schedule must be constant or cosine, got {self.lr_schedule!r}")

    def with_(self, **kw) -> "RunConfig":
        return replace(self, **kw)


PRESETS = {
    # reference geometry: 4 layers, width 256, 16 experts, 512-token windows
    "paper": {},
    # desk geometry: finishes a full pretrain in minutes on one CPU core
    "desk": {
        "model.n_layers": "2",
        "model.d_model": "64",
        "model.n_heads": "4",
        "model.inner_dim": "128",
        "model.n_experts": "8",
        "model.max_seq_len": "128",
        "training.batch_size": "8",
        "training.input_length": "128",
        "training.total_iterations": "2000",
        "training.eval_ks": "1,2,4,8",
    },
}


def valid_keys() -> list[str]:
    return sorted(f"{sec}.{key}" for sec, keys in _SCHEMA.items() for key in keys)


def _parse_value(section, key, raw, caster):
    raw = raw.strip()
    try:
        if caster is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return caster(raw)
    except ValueError:
        raise ConfigError(f"{section}.{key}: cannot parse {raw!r} as {caster.__name__}") from None


def _flat_from_file(path) -> dict[str, str]:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file not found: {path}")
    flat = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            flat[f"{section}.{key}"] = value
    return flat


def build_config(
    path=None, preset: str | None = None, overrides: list[str] = ()
) -> RunConfig:
    """Assemble a RunConfig from defaults, a preset, a file, and overrides.

    Later sources win. Overrides are `section.key=value` strings. Unknown
    keys are rejected with the full list of valid keys.
    """
    flat: dict[str, str] = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}, expected one of {sorted(PRESETS)}")
        flat.update(PRESETS[preset])
    if path is not None:
        flat.update(_flat_from_file(path))
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        flat[key.strip()] = value.strip()

    model_kw: dict = {}
    run_kw: dict = {}
    for dotted, raw in flat.items():
        section, _, key = dotted.partition(".")
        keys = _SCHEMA.get(section)
        if keys is None or key not in keys:
            raise ConfigError(
                f"unknown config key {dotted!r}; valid keys: {', '.join(valid_keys())}"
            )
        value = _parse_value(section, key, raw, keys[key])
        if section == "model":
            model_kw[key] = value
        elif section == "data":
            run_kw[key] = value
        elif key == "eval_ks":
            run_kw[key] = tuple(int(x) for x in str(value).split(",") if x.strip())
        else:
            run_kw[key] = value

    try:
        model = ModelConfig(seed=run_kw.get("seed", 0), **model_kw)
        cfg = RunConfig(model=model, **run_kw)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def serialize(cfg: RunConfig, extra_sections: dict[str, dict[str, str]] | None = None) -> str:
    """Canonical text form: fixed section order, sorted keys, repr values."""

    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, tuple):
            return ",".join(str(x) for x in v)
        return repr(v) if isinstance(v, float) else str(v)

    lines = ["[data]", f"dataset = {cfg.dataset}"]
    lines.append("[model]")
    for key in sorted(_MODEL_KEYS):
        lines.append(f"{key} = {fmt(getattr(cfg.model, key))}")
    lines.append("[training]")
    for key in sorted(_TRAINING_KEYS):
        lines.append(f"{key} = {fmt(getattr(cfg, key))}")
    for name in sorted(extra_sections or {}):
        lines.append(f"[{name}]")
        for key in sorted(extra_sections[name]):
            lines.append(f"{key} = {extra_sections[name][key]}")
    return "\n".join(lines) + "\n"


def parse_serialized(text: str) -> tuple[RunConfig, dict[str, str]]:
    """Rebuild a RunConfig from `serialize` output (e.g. a checkpoint block).

    Returns the config and the raw [checkpoint] section if present.
    """
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser.read_string(text)
    flat = []
    extra = {}
    for section in parser.sections():
        if section == "checkpoint":
            extra = dict(parser.items(section))
            continue
        for key, value in parser.items(section):
            flat.append(f"{section}.{key}={value}")
    return build_config(overrides=flat), extra


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(serialize(cfg).encode()).hexdigest()[:12]


def output_root() -> str:
    return os.environ.get("SMOELAB_OUT", "runs")


def run_dir(cfg: RunConfig) -> str:
    return os.path.join(output_root(), config_hash(cfg))
