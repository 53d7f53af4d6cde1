"""Residual decomposition, joint training step and autoregressive forecasting."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn

from .backbones import DeterministicPredictor, build_backbone, deterministic_loss
from .core import EventSample, ModelConfig, Prediction, check_config
from .diffusion import NoiseSchedule, forward_diffuse_batch, make_linear_schedule, sample_loop
from .gtunet import GlobalNet, GTUNet


class NonFiniteLossError(RuntimeError):
    """Raised when a training step produces a NaN or infinite loss."""

    def __init__(self, message, diagnostics):
        super().__init__(f"{message}: {diagnostics}")
        self.diagnostics = diagnostics


class CheckpointError(ValueError):
    pass


@dataclass
class Segment:
    value: object
    index: int


@dataclass
class TrainStepReport:
    step: int
    loss_total: float
    loss_deterministic: float
    loss_denoising_per_segment: list[float]
    grad_norm_backbone: float
    grad_norm_denoiser: float
    grad_norm_globalnet: float
    alpha: float = 0.5

    @property
    def loss_denoising(self) -> float:
        return float(sum(self.loss_denoising_per_segment))

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def compute_residual(y, mu):
    if tuple(y.shape) != tuple(mu.shape):
        raise ValueError(f"shape mismatch: {tuple(y.shape)} vs {tuple(mu.shape)}")
    return y - mu


def group_segments(r, K: int, axis: int = 0) -> list[Segment]:
    """Split ``r`` into consecutive K-frame segments along ``axis`` (indices from 1)."""
    L = r.shape[axis]
    if K < 1 or L % K:
        raise ValueError(f"K={K} must divide sequence length {L}")
    segs = []
    for j in range(1, L // K + 1):
        sl = [slice(None)] * r.ndim
        sl[axis] = slice((j - 1) * K, j * K)
        segs.append(Segment(r[tuple(sl)], j))
    return segs


def zero_segment(like) -> Segment:
    if isinstance(like, torch.Tensor):
        return Segment(torch.zeros_like(like), 0)
    return Segment(np.zeros_like(like), 0)


class DiffCast(nn.Module):
    """Container for the backbone, GlobalNet, denoiser and their optimizer."""

    def __init__(self, cfg: ModelConfig, backbone: DeterministicPredictor | None = None):
        super().__init__()
        check_config(cfg)
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        self.backbone = backbone if backbone is not None else build_backbone(cfg)
        self.globalnet = GlobalNet(cfg.channels, cfg.hidden_size, cfg.channel_mults) if cfg.use_globalnet else None
        self.denoiser = GTUNet(cfg.channels, cfg.K, cfg.hidden_size, cfg.channel_mults, cfg.use_globalnet)
        self.optimizer = torch.optim.Adam(self.parameters(), lr=cfg.lr)
        self.schedule = make_linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end, cfg.sigma)
        self.step_count = 0
        # called as hook(phase, j, source) whenever a conditioning segment is chosen
        self.conditioning_hooks: list[Callable[[str, int, str], None]] = []

    def _notify(self, phase, j, source):
        for hook in self.conditioning_hooks:
            hook(phase, j, source)

    def global_hidden(self, mu):
        return self.globalnet(mu) if self.globalnet is not None else None

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def build_models(cfg: ModelConfig) -> DiffCast:
    return DiffCast(cfg)


def set_training_mode(models: DiffCast, frozen_backbone: bool | None = None,
                      use_globalnet: bool | None = None, alpha: float | None = None):
    """Toggle ablation switches.  ``use_globalnet`` must match the built networks."""
    cfg = models.cfg
    if frozen_backbone is not None:
        cfg.frozen_backbone = bool(frozen_backbone)
    if use_globalnet is not None and bool(use_globalnet) != (models.globalnet is not None):
        raise ValueError("use_globalnet changes the denoiser architecture; rebuild the models instead")
    if alpha is not None:
        if not 0.0 <= alpha <= 1.0:
            raise ValueError("alpha out of [0,1]")
        cfg.alpha = float(alpha)
    return cfg


def stack_batch(batch, dtype=torch.float32):
    """EventSamples -> (x, y) tensors of shape [B, L, C, H, W]."""
    if isinstance(batch, tuple):
        return batch
    xs = np.stack([np.asarray(e.x.frames) for e in batch])
    ys = np.stack([np.asarray(e.y.frames) for e in batch])
    x = torch.as_tensor(xs, dtype=dtype).permute(0, 1, 4, 2, 3).contiguous()
    y = torch.as_tensor(ys, dtype=dtype).permute(0, 1, 4, 2, 3).contiguous()
    return x, y


def _grad_norm(module) -> float:
    if module is None:
        return 0.0
    sq = 0.0
    for p in module.parameters():
        if p.grad is not None:
            sq += float(p.grad.detach().double().pow(2).sum())
    return math.sqrt(sq)


def training_step(batch, models: DiffCast, schedule: NoiseSchedule | None = None,
                  cfg: ModelConfig | None = None, rng: torch.Generator | None = None,
                  denoise_only: bool = False) -> TrainStepReport:
    """One joint update of backbone, GlobalNet and denoiser.

    Conditioning segments are the ground-truth residual segments (s_0 = 0).
    With ``denoise_only`` the gradients come from alpha * L_eps alone and no
    parameters are updated; used to probe gradient flow into the backbone.
    """
    cfg = cfg or models.cfg
    schedule = schedule or models.schedule
    x, y = stack_batch(batch, dtype=next(models.parameters()).dtype)
    B, _, C, H, W = y.shape
    K, J = cfg.K, cfg.L_out // cfg.K
    models.train()
    models.optimizer.zero_grad(set_to_none=True)

    if cfg.frozen_backbone:
        with torch.no_grad():
            mu = models.backbone(x)
    else:
        mu = models.backbone(x)
    r = compute_residual(y, mu)
    segs = r.reshape(B, J, K, C, H, W)
    prev = torch.cat([torch.zeros_like(segs[:, :1]), segs[:, :-1]], dim=1)
    for j in range(1, J + 1):
        models._notify("train", j, "zero" if j == 1 else "ground_truth")
    h = models.global_hidden(mu)

    if cfg.per_segment_t:
        t = torch.randint(1, schedule.T + 1, (B * J,), generator=rng)
    else:
        t = torch.randint(1, schedule.T + 1, (B,), generator=rng).repeat_interleave(J)
    eps = torch.randn(segs.shape, generator=rng, dtype=segs.dtype)
    flat = (B * J, K, C, H, W)
    s_t = forward_diffuse_batch(segs.reshape(flat), t, eps.reshape(flat), schedule)
    hh = [lvl.repeat_interleave(J, dim=0) for lvl in h] if h is not None else None
    jj = torch.arange(1, J + 1).repeat(B)
    eps_hat = models.denoiser(s_t, prev.reshape(flat), hh, t, jj)

    per_seg = (eps.reshape(flat) - eps_hat).pow(2).reshape(B, J, -1).mean(dim=(0, 2))
    loss_eps = per_seg.sum()
    loss_p = deterministic_loss(mu, y)
    total = cfg.alpha * loss_eps + (1.0 - cfg.alpha) * loss_p

    if not bool(torch.isfinite(total)):
        raise NonFiniteLossError("non-finite loss", {
            "step": models.step_count + 1,
            "loss_deterministic": loss_p.item(),
            "loss_denoising_per_segment": per_seg.tolist(),
            "t": t.tolist(),
        })
    objective = cfg.alpha * loss_eps if denoise_only else total
    if objective.requires_grad:
        objective.backward()
    report = TrainStepReport(
        step=models.step_count + 1,
        loss_total=total.item(),
        loss_deterministic=loss_p.item(),
        loss_denoising_per_segment=per_seg.tolist(),
        grad_norm_backbone=_grad_norm(models.backbone),
        grad_norm_denoiser=_grad_norm(models.denoiser),
        grad_norm_globalnet=_grad_norm(models.globalnet),
        alpha=float(cfg.alpha),
    )
    if not denoise_only:
        models.optimizer.step()
        models.step_count += 1
    models.optimizer.zero_grad(set_to_none=True)
    return report


@torch.no_grad()
def forecast_batch(xs: Sequence[np.ndarray], models: DiffCast, schedule: NoiseSchedule | None = None,
                   cfg: ModelConfig | None = None, rng: torch.Generator | None = None) -> list[Prediction]:
    """Forecast several [L_in, H, W, C] inputs at once."""
    cfg = cfg or models.cfg
    schedule = schedule or models.schedule
    if rng is None:
        rng = torch.Generator().manual_seed(cfg.seed)
    dtype = next(models.parameters()).dtype
    models.eval()
    x = torch.as_tensor(np.stack([np.asarray(a) for a in xs]), dtype=dtype).permute(0, 1, 4, 2, 3)
    mu = models.backbone(x.contiguous())
    h = models.global_hidden(mu)
    B, _, C, H, W = mu.shape
    K, J = cfg.K, cfg.L_out // cfg.K
    prev = torch.zeros(B, K, C, H, W, dtype=dtype)
    out = []
    for j in range(1, J + 1):
        models._notify("inference", j, "zero" if j == 1 else "generated")

        def denoise(state, t, cond, j=j):
            return models.denoiser(state, cond, h, t, j)

        prev = sample_loop(denoise, prev, (B, K, C, H, W), schedule, cfg, rng, dtype=dtype)
        out.append(prev)
    r_hat = torch.cat(out, dim=1)
    mu_np = mu.permute(0, 1, 3, 4, 2).numpy()
    r_np = r_hat.permute(0, 1, 3, 4, 2).numpy()
    return [Prediction.compose(mu_np[b], r_np[b]) for b in range(B)]


def forecast(x: np.ndarray, models: DiffCast, schedule: NoiseSchedule | None = None,
             cfg: ModelConfig | None = None, rng: torch.Generator | None = None) -> Prediction:
    return forecast_batch([x], models, schedule, cfg, rng)[0]


def fit(models: DiffCast, events: Sequence[EventSample], iters: int, batch_size: int,
        seed: int | None = None, on_step: Callable[[TrainStepReport], None] | None = None
        ) -> list[TrainStepReport]:
    """Run ``iters`` training steps on batches drawn uniformly from ``events``."""
    cfg = models.cfg
    seed = cfg.seed if seed is None else seed
    picker = np.random.default_rng(seed)
    rng = torch.Generator().manual_seed(seed)
    reports = []
    for _ in range(iters):
        idx = picker.integers(0, len(events), size=batch_size)
        rep = training_step([events[i] for i in idx], models, models.schedule, cfg, rng)
        reports.append(rep)
        if on_step is not None:
            on_step(rep)
    return reports


def fit_backbone(backbone: DeterministicPredictor, events: Sequence[EventSample], iters: int,
                 batch_size: int, lr: float = 1e-4, seed: int = 0) -> list[float]:
    """Plain MSE training of a backbone on its own (the non-diffusion baseline)."""
    picker = np.random.default_rng(seed)
    opt = torch.optim.Adam(backbone.parameters(), lr=lr)
    backbone.train()
    losses = []
    for _ in range(iters):
        idx = picker.integers(0, len(events), size=batch_size)
        x, y = stack_batch([events[i] for i in idx])
        opt.zero_grad(set_to_none=True)
        loss = deterministic_loss(backbone(x), y)
        loss.backward()
        opt.step()
        losses.append(loss.item())
    return losses


def save_checkpoint(path, models: DiffCast):
    """Single archive with flattened parameter keys, optimizer state, config and step."""
    torch.save({
        "params": models.state_dict(),
        "optimizer": models.optimizer.state_dict(),
        "config": models.cfg.to_json(),
        "config_hash": models.cfg.digest(),
        "step": models.step_count,
    }, path)


def load_checkpoint(path, expect_config: ModelConfig | None = None) -> DiffCast:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    for key in ("params", "optimizer", "config", "config_hash", "step"):
        if key not in blob:
            raise CheckpointError(f"checkpoint {path} lacks {key!r}")
    cfg = ModelConfig.from_json(blob["config"])
    if cfg.digest() != blob["config_hash"]:
        raise CheckpointError("stored config does not match its hash")
    if expect_config is not None and expect_config.digest() != blob["config_hash"]:
        raise CheckpointError("checkpoint was trained with a different config")
    models = DiffCast(cfg)
    models.load_state_dict(blob["params"])
    models.optimizer.load_state_dict(blob["optimizer"])
    models.step_count = int(blob["step"])
    return models
