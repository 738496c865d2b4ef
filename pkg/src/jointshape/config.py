"""Experiment configuration: presets, flat ``key = value`` files and overrides.

Precedence is flags > file > preset.  Every field has a default, unknown
keys are rejected, and :meth:`ExperimentConfig.to_text` writes a file that
:func:`load_config` reads back to the identical configuration.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .model import Architecture
from .shapegen import PhantomConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    preset: str = "desk"
    seed: int = 0
    # phantoms
    grid_size: int = 48
    count_normal: int = 200
    count_abnormal: int = 136
    effect_size: float = 1.25
    abnormal_mode: str = "bulge"
    bumps: int = 5
    ae_count: int = 20
    ae_seed: int = 1
    # network
    size: int = 32
    shape_dim: int = 64
    hidden: int = 0
    base_channels: int = 8
    # auto-encoder pretraining
    ae_iterations: int = 2000
    ae_lr: float = 2e-3
    # classifier training
    iterations: int = 1200
    lr: float = 1e-3
    lr_decay_points: tuple = (600, 900)
    decay_factor: float = 0.1
    freeze_until: int = 600
    momentum: float = 0.9
    augmentation: bool = True
    lam: float = 0.5
    encoder_bn: str = "frozen"
    log_every: int = 100
    svm_c: float = 1.0
    svm_iterations: int = 1000
    # evaluation
    folds: int = 4
    fold_seed: int = 0
    seeds: tuple = (0, 1, 2, 3, 4)
    corruption_normal: float = 0.8666
    corruption_abnormal: float = 0.7145
    jobs: int = 1
    # paths
    data_dir: str = "data"
    ae_data_dir: str = "data_ae"
    checkpoint_dir: str = "checkpoints"
    report_dir: str = "reports"

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"preset: expected one of {sorted(PRESETS)}, got {self.preset!r}")
        for name in ("count_normal", "count_abnormal", "ae_count", "folds", "jobs"):
            if getattr(self, name) < (0 if name.startswith("count") else 1):
                raise ConfigError(f"{name}: out of range ({getattr(self, name)})")
        if not self.seeds:
            raise ConfigError("seeds: at least one seed is required")
        for name in ("corruption_normal", "corruption_abnormal"):
            if not 0 < getattr(self, name) <= 1:
                raise ConfigError(f"{name}: must lie in (0, 1]")
        # delegate the remaining invariants to the component configs
        for build in (self.phantom, self.architecture, self.pretrain_config, self.train_config):
            try:
                build()
            except ValueError as exc:
                raise ConfigError(str(exc)) from None

    def phantom(self) -> PhantomConfig:
        return PhantomConfig(grid_size=self.grid_size, bumps=self.bumps,
                             effect_size=self.effect_size, abnormal_mode=self.abnormal_mode)

    def architecture(self) -> Architecture:
        return Architecture(size=self.size, shape_dim=self.shape_dim, hidden=self.hidden,
                            base_channels=self.base_channels)

    def pretrain_config(self, seed: int | None = None) -> TrainConfig:
        return TrainConfig("pretrain_ae", self.ae_iterations, self.ae_lr, momentum=self.momentum,
                           augmentation=self.augmentation, log_every=self.log_every,
                           seed=self.seed if seed is None else seed)

    def train_config(self, phase: str = "joint", seed: int | None = None) -> TrainConfig:
        return TrainConfig(phase, self.iterations, self.lr, tuple(self.lr_decay_points),
                           self.decay_factor, self.freeze_until, self.momentum,
                           augmentation=self.augmentation, lam=self.lam,
                           log_every=self.log_every, encoder_bn=self.encoder_bn,
                           seed=self.seed if seed is None else seed)

    def corruption_conditions(self) -> dict:
        """Test-time corruption targets keyed by label (0 normal, 1 abnormal)."""
        hi, lo = self.corruption_normal, self.corruption_abnormal
        return {"dsc_high": {0: hi, 1: hi}, "dsc_low": {0: lo, 1: lo},
                "abnormal_low": {0: hi, 1: lo}}

    def to_text(self) -> str:
        lines = [f"{f.name} = {_format(getattr(self, f.name))}" for f in fields(self)]
        return "\n".join(lines) + "\n"


PRESETS = {
    "desk": {},
    "paper": {
        "size": 128, "shape_dim": 1024, "count_normal": 200, "count_abnormal": 136,
        "ae_count": 100, "grid_size": 160,
        "ae_iterations": 40000, "ae_lr": 1e-6,
        "iterations": 40000, "lr": 5e-4, "lr_decay_points": (20000, 30000),
        "decay_factor": 0.1, "freeze_until": 5000,
    },
}

_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(key: str, raw):
    if key not in _FIELDS:
        raise ConfigError(f"unknown key {key!r}")
    default = _FIELDS[key].default
    if not isinstance(raw, str):
        return tuple(raw) if isinstance(default, tuple) else raw
    text = raw.strip()
    try:
        if isinstance(default, bool):
            if text.lower() not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
                raise ValueError(text)
            return text.lower() in ("true", "1", "yes", "on")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(v) for v in text.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None
    return text


def parse_text(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = _parse(key, value)
    return out


def resolve(preset: str | None = None, file_values: dict | None = None,
            overrides: dict | None = None) -> ExperimentConfig:
    file_values = dict(file_values or {})
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    preset = overrides.get("preset") or preset or file_values.get("preset") or "desk"
    if preset not in PRESETS:
        raise ConfigError(f"preset: expected one of {sorted(PRESETS)}, got {preset!r}")
    values = {**PRESETS[preset], **file_values, **overrides, "preset": preset}
    return ExperimentConfig(**{k: _parse(k, v) for k, v in values.items()})


def load_config(path=None, preset: str | None = None, overrides: dict | None = None) -> ExperimentConfig:
    file_values = parse_text(Path(path).read_text(encoding="utf-8")) if path else {}
    return resolve(preset, file_values, overrides)


def with_values(cfg: ExperimentConfig, **values) -> ExperimentConfig:
    return replace(cfg, **{k: _parse(k, v) for k, v in values.items()})
