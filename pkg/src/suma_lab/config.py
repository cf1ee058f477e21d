"""Run configuration: nested dataclasses loaded from YAML.

Unknown keys are rejected with their dotted path so a typo in an ablation
config fails loudly instead of silently running the default.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .erasure import ErasureConfig, TiConfig
from .toy_t2i import ModelDims

STAGES = ("pretrain", "construct", "eliminate", "attack", "eval", "report")
ABLATION_PRESETS = ("ref_step_30_50_70", "lambda_reg_on_off", "base_mode", "multi_IE_SE")


class ConfigInvalid(ValueError):
    def __init__(self, path: str, msg: str):
        super().__init__(f"{path}: {msg}" if path else msg)
        self.path = path


@dataclass
class PretrainConfig:
    steps: int = 20000
    batch: int = 64
    lr: float = 3e-3
    lr_final: float = 3e-4
    clip: float = 5.0
    generic_frac: float = 0.2
    n_eval: int = 200


@dataclass
class AttackConfig:
    n_eval: int = 200
    n_images: int = 32
    cce_steps: int = 500
    ud_k: int = 3
    ud_steps: int = 300
    ud_eta: float = 0.1
    ud_batch: int = 16


@dataclass
class MetricsConfig:
    n_fid: int = 64


@dataclass
class MultiConfig:
    mode: str = "IE"
    simultaneous_steps: int = 1000
    concepts: list = field(default_factory=lambda: ["springer", "elon", "grumpy_cat"])


@dataclass
class RunConfig:
    seed: int = 0
    universe_seed: int = 0
    concepts: list = field(default_factory=lambda: ["springer"])
    stages: list = field(default_factory=lambda: list(STAGES))
    ablations: list = field(default_factory=lambda: list(ABLATION_PRESETS))
    model: ModelDims = field(default_factory=ModelDims)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    ti: TiConfig = field(default_factory=TiConfig)
    erasure: ErasureConfig = field(default_factory=ErasureConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    multi: MultiConfig = field(default_factory=MultiConfig)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _coerce(value, default, path):
    """Match the type of the default; ints may widen to float."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigInvalid(path, f"expected bool, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigInvalid(path, f"expected int, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigInvalid(path, f"expected number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigInvalid(path, f"expected string, got {value!r}")
        return value
    if isinstance(default, (list, tuple)):
        if not isinstance(value, (list, tuple)):
            raise ConfigInvalid(path, f"expected list, got {value!r}")
        return type(default)(value)
    return value  # Optional fields default to None


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigInvalid(path, f"expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls) if f.init}
    base = cls()
    kw = {}
    for key, value in data.items():
        sub = f"{path}.{key}" if path else key
        if key not in fields:
            raise ConfigInvalid(sub, "unknown key")
        default = getattr(base, key)
        if dataclasses.is_dataclass(default):
            kw[key] = _build(type(default), value, sub)
        else:
            kw[key] = _coerce(value, default, sub)
    try:
        return dataclasses.replace(base, **kw)
    except ValueError as exc:
        raise ConfigInvalid(path, str(exc)) from None


def validate(cfg: RunConfig) -> RunConfig:
    bad = [s for s in cfg.stages if s not in STAGES]
    if bad:
        raise ConfigInvalid("stages", f"unknown stage(s) {bad}")
    bad = [a for a in cfg.ablations if a not in ABLATION_PRESETS]
    if bad:
        raise ConfigInvalid("ablations", f"unknown preset(s) {bad}")
    if not cfg.concepts:
        raise ConfigInvalid("concepts", "need at least one target concept")
    if len(cfg.multi.concepts) < 2:
        raise ConfigInvalid("multi.concepts", "multi-concept erasure needs at least two concepts")
    if cfg.multi.mode not in ("IE", "SE"):
        raise ConfigInvalid("multi.mode", f"expected IE or SE, got {cfg.multi.mode!r}")
    if cfg.erasure.early_step % cfg.ti.checkpoint_stride:
        raise ConfigInvalid("erasure.early_step", "must be a multiple of ti.checkpoint_stride")
    if cfg.erasure.early_step > cfg.ti.steps:
        raise ConfigInvalid("erasure.early_step", f"beyond the inversion length ti.steps={cfg.ti.steps}")
    if "ref_step_30_50_70" in cfg.ablations and cfg.ti.steps < 70:
        raise ConfigInvalid("ti.steps", "ref_step_30_50_70 needs at least 70 inversion steps")
    return cfg


def from_dict(data: dict | None) -> RunConfig:
    return validate(_build(RunConfig, data or {}, ""))


def load(path) -> RunConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise ConfigInvalid(str(path), f"cannot read: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigInvalid(str(path), f"bad YAML: {exc}") from None
    return from_dict(data)


def apply_overrides(data: dict, overrides) -> dict:
    """Apply KEY=VALUE strings (dotted keys, YAML-parsed values) to a raw dict."""
    out = json.loads(json.dumps(data or {}))
    for item in overrides or ():
        if "=" not in item:
            raise ConfigInvalid(item, "override must look like KEY=VALUE")
        key, raw = item.split("=", 1)
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigInvalid(key, f"bad value: {exc}") from None
        node = out
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigInvalid(key, "cannot descend into a scalar")
        node[parts[-1]] = value
    return out


def load_with_overrides(path, overrides=(), seed: int | None = None) -> RunConfig:
    data: Any = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as exc:
            raise ConfigInvalid(str(path), f"cannot read: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigInvalid(str(path), f"bad YAML: {exc}") from None
    data = apply_overrides(data, overrides)
    if seed is not None:
        data["seed"] = seed
    return from_dict(data)
