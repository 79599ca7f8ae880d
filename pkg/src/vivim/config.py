"""Training configuration and its flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .boundary import LossWeights
from .model import VivimConfig


@dataclass
class TrainConfig:
    epochs: int = 20
    batch: int = 4
    frames: int = 5
    size: int = 64
    train_clips: int = 200
    val_clips: int = 16
    difficulty: float = 0.5
    lr: float = 1e-4
    lr_min: float = 1e-6
    clip_norm: float = 1.0
    head_lr_mult: float = 10.0
    seed: int = 0
    scan_tf: bool = True
    scan_tb: bool = True
    scan_sp: bool = True
    bac: bool = True
    patch: int = 16
    delta1: float = 1.0
    delta2: float = 0.01
    lambda1: float = 0.3
    lambda2: float = 0.3
    affine_steps: int = 12000
    affine_corpus: int = 160000
    affine_hidden: int = 512
    affine_checkpoint: str = ""
    channels: tuple[int, ...] = (32, 64, 160, 256)
    depths: tuple[int, ...] = (2, 2, 2, 2)
    heads: tuple[int, ...] = (1, 2, 5, 8)
    reductions: tuple[int, ...] = (8, 4, 2, 1)
    decoder_dim: int = 128
    log_every: int = 10

    def __post_init__(self):
        positive = ("epochs", "batch", "frames", "size", "train_clips", "val_clips", "patch",
                    "decoder_dim", "log_every")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not (self.lr > 0 and self.lr_min > 0):
            raise ValueError("learning rates must be positive")
        if self.lr_min > self.lr:
            raise ValueError("lr_min must not exceed lr (the schedule only decays)")
        if self.clip_norm <= 0 or self.head_lr_mult <= 0:
            raise ValueError("clip_norm and head_lr_mult must be positive")
        if not 0.0 <= self.difficulty <= 1.0:
            raise ValueError("difficulty must lie in [0, 1]")
        if self.size % self.patch:
            raise ValueError(f"frame size {self.size} is not a multiple of patch {self.patch}")
        if self.size % 32:
            raise ValueError("frame size must be a multiple of 32 (four-stage encoder)")
        self.loss_weights()  # validates signs

    def loss_weights(self) -> LossWeights:
        if not self.bac:
            return LossWeights(self.delta1, self.delta2, 0.0, 0.0)
        return LossWeights(self.delta1, self.delta2, self.lambda1, self.lambda2)

    def model_config(self) -> VivimConfig:
        return VivimConfig(channels=tuple(self.channels), depths=tuple(self.depths),
                           heads=tuple(self.heads), reductions=tuple(self.reductions),
                           decoder_dim=self.decoder_dim, t_forward=self.scan_tf,
                           t_backward=self.scan_tb, spatial=self.scan_sp, seed=self.seed)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


# Ablation ladder: each rung adds one component to the previous one.
ABLATIONS = {
    "basic": dict(scan_tf=False, scan_tb=False, scan_sp=False, bac=False),
    "C1": dict(scan_tf=True, scan_tb=False, scan_sp=False, bac=False),
    "C2": dict(scan_tf=True, scan_tb=True, scan_sp=False, bac=False),
    "C3": dict(scan_tf=True, scan_tb=True, scan_sp=True, bac=False),
    "full": dict(scan_tf=True, scan_tb=True, scan_sp=True, bac=True),
}


def _fields():
    return {f.name: f for f in dataclasses.fields(TrainConfig)}


def _parse_value(name: str, text: str, default):
    text = text.strip()
    if isinstance(default, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {text!r}")
    if isinstance(default, tuple):
        return tuple(int(v) for v in text.split(",") if v.strip())
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Parse ``key = value`` lines (``#`` starts a comment); unknown keys are errors."""
    base = base or TrainConfig()
    fields = _fields()
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in fields:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, value, getattr(base, key))
    return base.replace(**values)


def format_config(cfg: TrainConfig) -> str:
    return "".join(f"{name} = {_format_value(getattr(cfg, name))}\n" for name in _fields())


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text())


def save_config(cfg: TrainConfig, path) -> None:
    Path(path).write_text(format_config(cfg))
