"""Experiment configuration: one frozen dataclass, JSON on disk.

Defaults are the full-scale values; ``toy_preset`` is the desk-scale shrink
used by the tests and the acceptance suite.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any

SCHEMA_VERSION = 1

SCHEMES = (
    "fixed",
    "bias",
    "prompt_no_bias",
    "prompt",
    "bias_plus_prompt",
    "adapter",
    "decoder",
    "full",
    "full_fixed",
)
PROMPT_MODES = ("binary", "multiclass", "fixed")


class ConfigError(ValueError):
    """Invalid configuration. ``key`` names the offending field."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    # architecture
    levels: int = 5
    channels_per_level: tuple[int, ...] = (32, 64, 128, 256, 384)
    window_size: int = 8
    shift: int = 4
    heads: int = 8
    bias_channels: int = 32
    tokens_per_class: int = 16
    prompts_per_block: int = 1
    patch_stride: int = 2
    # views
    teacher_fov: int = 256
    student1_fov: int = 224
    student2_fov: int = 160
    mask_fraction: tuple[float, float] = (0.1, 0.4)
    mask_block: int = 16
    # temperatures and self-supervision
    tau_agg: float = 0.1
    tau_teacher: float = 0.033
    tau_student: float = 0.066
    fwhm: float = 128.0
    proto_reduction: int = 8
    cluster_iters: int = 3
    ema_momentum: float = 0.999
    # losses
    focal_gamma: float = 4.0
    loss_weight_seg: float = 1.0
    loss_weight_cpa: float = 0.01
    # optimisation
    lr_net: float = 1e-4
    lr_prompt: float = 1e-3
    weight_decay: float = 1e-2
    lr_net_p2: float = 5e-4
    lr_prompt_p2: float = 5e-3
    epochs_p1: int = 400
    epochs_p2: int = 100
    samples_per_epoch: int = 5000
    batch_size: int = 8
    seed: int = 0
    scheme: str = "prompt"
    prompt_mode: str = "binary"

    def __post_init__(self):
        # JSON hands us lists; keep the dataclass hashable.
        object.__setattr__(self, "channels_per_level", tuple(int(c) for c in self.channels_per_level))
        object.__setattr__(self, "mask_fraction", tuple(float(f) for f in self.mask_fraction))
        validate(self)

    @property
    def out_channels(self) -> int:
        return self.channels_per_level[0]

    @property
    def steps_p1(self) -> int:
        return self.epochs_p1 * self.samples_per_epoch // self.batch_size

    @property
    def steps_p2(self) -> int:
        return self.epochs_p2 * self.samples_per_epoch // self.batch_size

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["channels_per_level"] = list(self.channels_per_level)
        d["mask_fraction"] = list(self.mask_fraction)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _require(ok: bool, key: str, message: str) -> None:
    if not ok:
        raise ConfigError(key, message)


def validate(cfg: ExperimentConfig) -> None:
    _require(cfg.schema_version == SCHEMA_VERSION, "schema_version", f"expected {SCHEMA_VERSION}")
    _require(cfg.levels >= 1, "levels", "must be >= 1")
    _require(len(cfg.channels_per_level) == cfg.levels, "channels_per_level", "length must equal levels")
    _require(cfg.heads >= 1, "heads", "must be >= 1")
    for c in cfg.channels_per_level:
        _require(c > 0, "channels_per_level", "channels must be positive")
        _require(c % cfg.heads == 0, "channels_per_level", f"{c} not divisible by heads={cfg.heads}")
    _require(cfg.window_size >= 1, "window_size", "must be >= 1")
    _require(2 * cfg.shift == cfg.window_size, "shift", "must be window_size / 2")
    for key in ("bias_channels", "tokens_per_class", "patch_stride", "proto_reduction", "batch_size", "mask_block"):
        _require(getattr(cfg, key) >= 1, key, "must be >= 1")
    _require(cfg.prompts_per_block in (1, 2), "prompts_per_block", "must be 1 (shared) or 2 (one per PMA layer)")
    _require(cfg.cluster_iters >= 0, "cluster_iters", "must be >= 0")
    unit = cfg.patch_stride * cfg.window_size
    for key in ("teacher_fov", "student1_fov", "student2_fov"):
        fov = getattr(cfg, key)
        _require(fov > 0 and fov % unit == 0, key, f"must be a positive multiple of {unit}")
    for key in ("student1_fov", "student2_fov"):
        _require(getattr(cfg, key) <= cfg.teacher_fov, key, "student FOV exceeds teacher FOV")
    for key in ("tau_agg", "tau_teacher", "tau_student", "fwhm", "lr_net", "lr_prompt", "lr_net_p2", "lr_prompt_p2"):
        _require(getattr(cfg, key) > 0, key, "must be strictly positive")
    _require(0.0 <= cfg.ema_momentum <= 1.0, "ema_momentum", "must lie in [0, 1]")
    _require(cfg.focal_gamma >= 0, "focal_gamma", "must be >= 0")
    _require(cfg.weight_decay >= 0, "weight_decay", "must be >= 0")
    lo, hi = cfg.mask_fraction if len(cfg.mask_fraction) == 2 else (-1.0, -1.0)
    _require(0.0 <= lo <= hi < 1.0, "mask_fraction", "expected [lo, hi] with 0 <= lo <= hi < 1")
    for key in ("epochs_p1", "epochs_p2", "samples_per_epoch"):
        _require(getattr(cfg, key) >= 0, key, "must be >= 0")
    _require(cfg.scheme in SCHEMES, "scheme", f"unknown scheme {cfg.scheme!r}")
    _require(cfg.prompt_mode in PROMPT_MODES, "prompt_mode", f"unknown prompt mode {cfg.prompt_mode!r}")


_FIELDS = {f.name for f in dataclasses.fields(ExperimentConfig)}


def from_dict(raw: dict[str, Any]) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    unknown = sorted(set(raw) - _FIELDS)
    if unknown:
        raise ConfigError(unknown[0], "unknown key")
    try:
        return ExperimentConfig(**raw)
    except TypeError as exc:  # wrong value types, e.g. a string for a list
        raise ConfigError("<root>", str(exc)) from exc


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    """Read a JSON config; missing keys take the full-scale defaults.

    ``PUNET_SEED`` in the environment overrides ``seed``.
    """
    text = Path(path).read_text()
    try:
        raw = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError("<parse>", str(exc)) from exc
    if isinstance(raw, dict) and "PUNET_SEED" in os.environ:
        raw = {**raw, "seed": int(os.environ["PUNET_SEED"])}
    return from_dict(raw)


def save_config(cfg: ExperimentConfig, path: str | os.PathLike) -> None:
    Path(path).write_text(cfg.to_json() + "\n")


def full_config() -> ExperimentConfig:
    return ExperimentConfig()


def toy_preset() -> ExperimentConfig:
    """Desk-scale preset: three levels on 64x64 slices."""
    return ExperimentConfig(
        levels=3,
        channels_per_level=(16, 32, 64),
        window_size=4,
        shift=2,
        heads=4,
        bias_channels=8,
        tokens_per_class=4,
        teacher_fov=64,
        student1_fov=48,
        student2_fov=32,
        mask_block=4,
        fwhm=32.0,
        proto_reduction=8,
        ema_momentum=0.99,
        lr_net=1e-3,
        lr_prompt=1e-2,
        lr_net_p2=1e-3,
        lr_prompt_p2=1e-1,
        epochs_p1=40,
        epochs_p2=10,
        samples_per_epoch=400,
        batch_size=8,
    )
