"""Shared domain types, configuration and value-range helpers."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Any, Hashable

import numpy as np


class ConfigError(ValueError):
    """Raised for invalid or unparseable configuration documents."""


@dataclass(frozen=True)
class RadarSequence:
    """Normalized reflectance frames of shape [L, H, W, C] in [0, 1]."""

    frames: np.ndarray
    data_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        f = np.asarray(self.frames)
        if f.ndim != 4:
            raise ValueError(f"frames must be [L, H, W, C], got shape {f.shape}")
        if f.shape[0] < 1:
            raise ValueError("sequence must hold at least one frame")
        if not np.all(np.isfinite(f)):
            raise ValueError("frames contain non-finite values")
        if f.min() < 0.0 or f.max() > 1.0:
            raise ValueError("normalized frames must lie in [0, 1]")
        object.__setattr__(self, "frames", f)
        object.__setattr__(self, "data_range", (float(self.data_range[0]), float(self.data_range[1])))

    def __len__(self):
        return self.frames.shape[0]

    @property
    def spatial(self) -> tuple[int, int, int]:
        return tuple(self.frames.shape[1:])


@dataclass(frozen=True)
class EventSample:
    x: RadarSequence
    y: RadarSequence
    id: Hashable = None

    def __post_init__(self):
        if self.x.spatial != self.y.spatial:
            raise ValueError(f"x and y spatial shapes differ: {self.x.spatial} vs {self.y.spatial}")
        if self.x.data_range != self.y.data_range:
            raise ValueError("x and y must share data_range")

    def check_lengths(self, L_in: int, L_out: int):
        if len(self.x) != L_in or len(self.y) != L_out:
            raise ValueError(
                f"event {self.id!r} has lengths ({len(self.x)}, {len(self.y)}), expected ({L_in}, {L_out})"
            )


@dataclass
class ModelConfig:
    L_in: int = 5
    L_out: int = 20
    K: int = 5
    T: int = 1000
    sample_steps: int = 250
    alpha: float = 0.5
    hidden_size: int = 64
    channel_mults: list[int] = field(default_factory=lambda: [1, 2, 4, 8])
    depth: int = 4
    sampler: str = "ddim"
    frozen_backbone: bool = False
    use_globalnet: bool = True
    seed: int = 0
    # not part of the minimal contract but needed to build and train the networks
    backbone: str = "simvp"
    backbone_hidden: int = 32
    channels: int = 1
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sigma: str = "beta"
    eta: float = 0.0
    lr: float = 1e-4
    per_segment_t: bool = False
    # bound on the x0 estimate during sampling (residuals live in [-1, 1]); None disables
    clip_denoised: float | None = None

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "ModelConfig":
        if not isinstance(doc, dict):
            raise ConfigError("model config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {unknown}")
        cfg = cls(**doc)
        cfg.channel_mults = list(cfg.channel_mults)
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from exc
        return cls.from_dict(doc)

    def digest(self) -> str:
        """sha256 of the canonical JSON form; stored in checkpoints."""
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    @property
    def n_segments(self) -> int:
        return self.L_out // self.K


def validate_config(cfg: ModelConfig) -> list[str]:
    """Return a list of rule violations; empty when the config is usable."""
    errs = []
    for name in ("L_in", "L_out", "K", "T", "sample_steps", "hidden_size", "depth"):
        if int(getattr(cfg, name)) < 1:
            errs.append(f"{name} must be >= 1")
    if cfg.K >= 1 and cfg.L_out % cfg.K != 0:
        errs.append("K must divide L_out")
    if not 0.0 <= cfg.alpha <= 1.0:
        errs.append("alpha out of [0,1]")
    if cfg.sample_steps > cfg.T:
        errs.append("sample_steps must be <= T")
    if cfg.depth != len(cfg.channel_mults):
        errs.append("depth must equal len(channel_mults)")
    if any(int(m) < 1 for m in cfg.channel_mults):
        errs.append("channel_mults entries must be >= 1")
    if cfg.sampler not in ("ddpm", "ddim"):
        errs.append("sampler must be one of {ddpm, ddim}")
    if cfg.backbone not in ("convgru", "simvp"):
        errs.append("backbone must be one of {convgru, simvp}")
    if cfg.sigma not in ("beta", "posterior"):
        errs.append("sigma must be one of {beta, posterior}")
    if not 0.0 <= cfg.eta <= 1.0:
        errs.append("eta out of [0,1]")
    if not 0.0 < cfg.beta_start <= cfg.beta_end < 1.0:
        errs.append("beta endpoints must satisfy 0 < beta_start <= beta_end < 1")
    if cfg.clip_denoised is not None and not cfg.clip_denoised > 0:
        errs.append("clip_denoised must be > 0 or null")
    return errs


def check_config(cfg: ModelConfig) -> ModelConfig:
    errs = validate_config(cfg)
    if errs:
        raise ConfigError("; ".join(errs))
    return cfg


def _check_range(data_range) -> tuple[float, float]:
    lo, hi = float(data_range[0]), float(data_range[1])
    if not hi > lo:
        raise ValueError(f"degenerate data_range {data_range}")
    return lo, hi


def normalize(frames, data_range) -> RadarSequence:
    """Map raw values linearly from data_range onto [0, 1], clipping outliers."""
    lo, hi = _check_range(data_range)
    raw = np.clip(np.asarray(frames, dtype=np.float64), lo, hi)
    unit = np.clip((raw - lo) / (hi - lo), 0.0, 1.0)
    return RadarSequence(unit, (lo, hi))


def denormalize(seq: RadarSequence) -> np.ndarray:
    lo, hi = _check_range(seq.data_range)
    return np.asarray(seq.frames, dtype=np.float64) * (hi - lo) + lo


@dataclass(frozen=True)
class Prediction:
    mu: np.ndarray
    residual_hat: np.ndarray
    y_hat: np.ndarray
    y_hat_clamped: np.ndarray

    @classmethod
    def compose(cls, mu: np.ndarray, residual_hat: np.ndarray) -> "Prediction":
        mu = np.asarray(mu)
        residual_hat = np.asarray(residual_hat, dtype=mu.dtype)
        if mu.shape != residual_hat.shape:
            raise ValueError(f"mu {mu.shape} and residual {residual_hat.shape} differ in shape")
        y_hat = mu + residual_hat
        return cls(mu, residual_hat, y_hat, np.clip(y_hat, 0.0, 1.0))
