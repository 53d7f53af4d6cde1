"""Noise schedules, forward corruption and DDPM/DDIM reverse updates.

Steps are 1-indexed: ``t`` runs over ``1..T`` and ``alpha_bar(0) == 1``.  The
step functions only use Python-float coefficients from the schedule, so they
work unchanged on numpy arrays and torch tensors.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    posterior_sigmas: np.ndarray
    sigma_kind: str = "beta"

    @property
    def T(self) -> int:
        return len(self.betas)

    def _check(self, t: int, allow_zero=False):
        lo = 0 if allow_zero else 1
        if not lo <= int(t) <= self.T:
            raise ValueError(f"step {t} outside [{lo}, {self.T}]")

    def beta(self, t: int) -> float:
        self._check(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self._check(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        self._check(t, allow_zero=True)
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def sigma(self, t: int) -> float:
        self._check(t)
        return float(self.posterior_sigmas[t - 1])


def make_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02,
                         sigma: str = "beta") -> NoiseSchedule:
    """Linear beta schedule.

    ``sigma="beta"`` uses sigma_t = sqrt(beta_t); ``sigma="posterior"`` uses the
    true-posterior variance (1 - abar_{t-1}) / (1 - abar_t) * beta_t.
    """
    if int(T) < 1:
        raise ValueError("T must be >= 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    betas = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    if sigma == "beta":
        sig = np.sqrt(betas)
    elif sigma == "posterior":
        prev = np.concatenate([[1.0], alpha_bars[:-1]])
        sig = np.sqrt((1.0 - prev) / (1.0 - alpha_bars) * betas)
    else:
        raise ValueError(f"unknown sigma option {sigma!r}")
    for a in (betas, alphas, alpha_bars, sig):
        a.setflags(write=False)
    return NoiseSchedule(betas, alphas, alpha_bars, sig, sigma)


def _shape(a):
    return tuple(a.shape)


def forward_diffuse(x0, t: int, eps, schedule: NoiseSchedule):
    """Sample q(x_t | x_0) = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps."""
    if _shape(x0) != _shape(eps):
        raise ValueError(f"x0 {_shape(x0)} and eps {_shape(eps)} differ in shape")
    schedule._check(t)
    ab = schedule.alpha_bar(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def forward_diffuse_batch(x0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor,
                          schedule: NoiseSchedule) -> torch.Tensor:
    """Per-item steps ``t`` (shape [B]) for a batch ``x0`` of shape [B, ...]."""
    if x0.shape != eps.shape:
        raise ValueError("x0 and eps differ in shape")
    if t.min() < 1 or t.max() > schedule.T:
        raise ValueError("step outside [1, T]")
    ab = torch.tensor(schedule.alpha_bars, dtype=x0.dtype, device=x0.device)[t - 1]
    ab = ab.view(-1, *([1] * (x0.dim() - 1)))
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps


def _is_zero(a) -> bool:
    if isinstance(a, torch.Tensor):
        return not bool(torch.any(a != 0))
    return not np.any(np.asarray(a) != 0)


def ddpm_reverse_step(xt, t: int, eps_hat, noise, schedule: NoiseSchedule):
    """One ancestral step x_t -> x_{t-1} with epsilon parameterization."""
    if _shape(xt) != _shape(eps_hat) or _shape(xt) != _shape(noise):
        raise ValueError("xt, eps_hat and noise must share a shape")
    schedule._check(t)
    if t == 1 and not _is_zero(noise):
        raise ValueError("noise must be zero at t = 1")
    a, b, ab = schedule.alpha(t), schedule.beta(t), schedule.alpha_bar(t)
    mean = (xt - (b / math.sqrt(1.0 - ab)) * eps_hat) / math.sqrt(a)
    return mean + schedule.sigma(t) * noise


def _respaced_ddpm_step(xt, t: int, t_prev: int, eps_hat, noise, schedule: NoiseSchedule):
    # DDPM over a strided subsequence: effective beta' = 1 - abar_t / abar_prev.
    if t_prev == t - 1:
        return ddpm_reverse_step(xt, t, eps_hat, noise, schedule)
    ab, ab_prev = schedule.alpha_bar(t), schedule.alpha_bar(t_prev)
    a = ab / ab_prev
    b = 1.0 - a
    mean = (xt - (b / math.sqrt(1.0 - ab)) * eps_hat) / math.sqrt(a)
    if t_prev == 0:
        return mean
    if schedule.sigma_kind == "beta":
        sig = math.sqrt(b)
    else:
        sig = math.sqrt((1.0 - ab_prev) / (1.0 - ab) * b)
    return mean + sig * noise


def ddim_reverse_step(xt, t: int, t_prev: int, eps_hat, schedule: NoiseSchedule,
                      eta: float = 0.0, noise=None):
    if not 0 <= t_prev < t:
        raise ValueError(f"need 0 <= t_prev < t, got t={t}, t_prev={t_prev}")
    if not 0.0 <= eta <= 1.0:
        raise ValueError("eta must lie in [0, 1]")
    if _shape(xt) != _shape(eps_hat):
        raise ValueError("xt and eps_hat differ in shape")
    ab, ab_prev = schedule.alpha_bar(t), schedule.alpha_bar(t_prev)
    x0_hat = (xt - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)
    if t_prev == 0:
        return x0_hat
    sig = eta * math.sqrt((1.0 - ab_prev) / (1.0 - ab)) * math.sqrt(1.0 - ab / ab_prev)
    out = math.sqrt(ab_prev) * x0_hat + math.sqrt(1.0 - ab_prev - sig ** 2) * eps_hat
    if sig > 0:
        if noise is None:
            raise ValueError("eta > 0 requires a noise draw")
        out = out + sig * noise
    return out


def timestep_sequence(T: int, n: int) -> list[int]:
    """Descending, strictly decreasing steps: uniform stride over [1, T] including T."""
    if not 1 <= n <= T:
        raise ValueError(f"sample_steps {n} must lie in [1, {T}]")
    if n == 1:
        return [T]
    ts = np.unique(np.round(np.linspace(1, T, n)).astype(int))
    assert len(ts) == n
    return [int(v) for v in ts[::-1]]


def clip_eps(xt, t: int, eps_hat, schedule: NoiseSchedule, bound: float):
    """eps consistent with the x0 estimate clamped to [-bound, bound]."""
    ab = schedule.alpha_bar(t)
    x0 = ((xt - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)).clamp(-bound, bound)
    return (xt - math.sqrt(ab) * x0) / math.sqrt(1.0 - ab)


Denoiser = Callable[[torch.Tensor, int, object], torch.Tensor]


@torch.no_grad()
def sample_loop(denoiser: Denoiser, conditioning, shape, schedule: NoiseSchedule, cfg,
                rng: torch.Generator, dtype=torch.float32) -> torch.Tensor:
    """Draw x_T ~ N(0, I) and run ``cfg.sample_steps`` reverse updates.

    ``cfg`` needs ``sample_steps``, ``sampler`` and ``eta``; DDPM with fewer
    steps than T runs on the respaced chain.  With ``cfg.clip_denoised = c``
    the implied x0 estimate is clamped to [-c, c] and eps_hat re-derived from
    it before each step.
    """
    sampler = getattr(cfg, "sampler", "ddim")
    eta = float(getattr(cfg, "eta", 0.0))
    clip = getattr(cfg, "clip_denoised", None)
    steps = timestep_sequence(schedule.T, int(cfg.sample_steps))
    x = torch.randn(tuple(shape), generator=rng, dtype=dtype)
    for i, t in enumerate(steps):
        t_prev = steps[i + 1] if i + 1 < len(steps) else 0
        eps_hat = denoiser(x, t, conditioning)
        if tuple(eps_hat.shape) != tuple(x.shape):
            raise ValueError(f"denoiser returned shape {tuple(eps_hat.shape)}, expected {tuple(x.shape)}")
        if clip is not None:
            eps_hat = clip_eps(x, t, eps_hat, schedule, float(clip))
        if sampler == "ddpm":
            noise = torch.randn(x.shape, generator=rng, dtype=dtype) if t_prev > 0 else torch.zeros_like(x)
            x = _respaced_ddpm_step(x, t, t_prev, eps_hat, noise, schedule)
        elif sampler == "ddim":
            noise = torch.randn(x.shape, generator=rng, dtype=dtype) if eta > 0 and t_prev > 0 else None
            x = ddim_reverse_step(x, t, t_prev, eps_hat, schedule, eta, noise)
        else:
            raise ValueError(f"unknown sampler {sampler!r}")
    return x
