"""Deterministic spatio-temporal predictors.

Tensors inside the networks are laid out [B, L, C, H, W]; the numpy-facing
``predict`` takes and returns frames as [L, H, W, C].
"""
from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


def to_tensor(frames: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """[L, H, W, C] array -> [1, L, C, H, W] tensor."""
    return torch.as_tensor(np.asarray(frames), dtype=dtype).permute(0, 3, 1, 2).unsqueeze(0).contiguous()


def to_numpy(t: torch.Tensor) -> np.ndarray:
    """[L, C, H, W] tensor -> [L, H, W, C] array."""
    return t.detach().permute(0, 2, 3, 1).cpu().numpy()


def groups_for(ch: int) -> int:
    for g in (8, 4, 2, 1):
        if ch % g == 0:
            return g
    return 1


class ConvGRUCell(nn.Module):
    def __init__(self, input_dim, hidden_dim, kernel_size=3):
        super().__init__()
        self.hidden_dim = hidden_dim
        pad = kernel_size // 2
        self.gates = nn.Conv2d(input_dim + hidden_dim, 2 * hidden_dim, kernel_size, padding=pad)
        self.candidate = nn.Conv2d(input_dim + hidden_dim, hidden_dim, kernel_size, padding=pad)

    def forward(self, x, h=None):
        if h is None:
            h = x.new_zeros(x.shape[0], self.hidden_dim, x.shape[2], x.shape[3])
        reset, update = torch.sigmoid(self.gates(torch.cat([x, h], dim=1))).chunk(2, dim=1)
        cand = torch.tanh(self.candidate(torch.cat([x, reset * h], dim=1)))
        return (1 - update) * h + update * cand


class DeterministicPredictor(nn.Module):
    """Maps [B, L_in, C, H, W] to [B, L_out, C, H, W]."""

    downsample_factor = 1

    def __init__(self, L_in: int, L_out: int, channels: int = 1):
        super().__init__()
        self.L_in = L_in
        self.L_out = L_out
        self.channels = channels

    def check_input(self, x: torch.Tensor):
        if x.dim() != 5 or x.shape[1] != self.L_in or x.shape[2] != self.channels:
            raise ValueError(f"expected [B, {self.L_in}, {self.channels}, H, W], got {tuple(x.shape)}")
        f = self.downsample_factor
        if x.shape[-2] % f or x.shape[-1] % f:
            raise ValueError(f"spatial size {tuple(x.shape[-2:])} not divisible by {f}")

    @torch.no_grad()
    def predict(self, x: np.ndarray) -> np.ndarray:
        """Deterministic forecast mu for one [L_in, H, W, C] input."""
        p = next(self.parameters())
        mu = self(to_tensor(x, dtype=p.dtype).to(p.device))
        return to_numpy(mu[0])

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


class ConvGRUPredictor(DeterministicPredictor):
    """Encoder-forecaster ConvGRU.

    Two stride-2 conv stages bring frames to 1/4 resolution, two stacked
    ConvGRU layers scan the inputs, and the decoder unrolls L_out steps feeding
    back the encoding of its own previous output.
    """

    downsample_factor = 4

    def __init__(self, L_in, L_out, channels=1, hidden=32):
        super().__init__(L_in, L_out, channels)
        self.hidden = hidden
        self.encoder = nn.Sequential(
            nn.Conv2d(channels, hidden, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(hidden, hidden, 3, stride=2, padding=1), nn.SiLU(),
        )
        self.cells = nn.ModuleList([ConvGRUCell(hidden, hidden), ConvGRUCell(hidden, hidden)])
        self.decoder = nn.Sequential(
            nn.ConvTranspose2d(hidden, hidden, 4, stride=2, padding=1), nn.SiLU(),
            nn.ConvTranspose2d(hidden, hidden, 4, stride=2, padding=1), nn.SiLU(),
        )
        self.head = nn.Conv2d(hidden, channels, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def _step(self, feat, states):
        inp = feat
        new = []
        for cell, h in zip(self.cells, states):
            h = cell(inp, h)
            new.append(h)
            inp = h
        return inp, new

    def encode(self, x: torch.Tensor):
        """Run the recurrent encoder; returns (last frame encoding, per-layer states)."""
        self.check_input(x)
        B, L, C, H, W = x.shape
        feats = self.encoder(x.reshape(B * L, C, H, W)).reshape(B, L, self.hidden, H // 4, W // 4)
        states = [None] * len(self.cells)
        for i in range(L):
            _, states = self._step(feats[:, i], states)
        return feats[:, -1], states

    def forward(self, x):
        feat, states = self.encode(x)
        outs = []
        for _ in range(self.L_out):
            top, states = self._step(feat, states)
            frame = self.head(self.decoder(top))
            outs.append(frame)
            feat = self.encoder(frame)
        return torch.stack(outs, dim=1)


class ResConvBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.block = nn.Sequential(
            nn.GroupNorm(groups_for(ch), ch), nn.SiLU(), nn.Conv2d(ch, ch, 3, padding=1),
            nn.GroupNorm(groups_for(ch), ch), nn.SiLU(), nn.Conv2d(ch, ch, 3, padding=1),
        )

    def forward(self, x):
        return x + self.block(x)


class SimVPLitePredictor(DeterministicPredictor):
    """Recurrent-free predictor: per-frame encoder, time-stacked translator, per-frame decoder."""

    downsample_factor = 4

    def __init__(self, L_in, L_out, channels=1, hidden=32, translator_width=None, n_blocks=4):
        super().__init__(L_in, L_out, channels)
        self.hidden = hidden
        tw = translator_width or 2 * hidden
        self.encoder = nn.Sequential(
            nn.Conv2d(channels, hidden, 3, padding=1), nn.SiLU(),
            nn.Conv2d(hidden, hidden, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(hidden, hidden, 3, padding=1), nn.SiLU(),
            nn.Conv2d(hidden, hidden, 3, stride=2, padding=1), nn.SiLU(),
        )
        self.translator_in = nn.Conv2d(L_in * hidden, tw, 1)
        self.translator = nn.Sequential(*[ResConvBlock(tw) for _ in range(n_blocks)])
        self.translator_out = nn.Conv2d(tw, L_out * hidden, 1)
        self.decoder = nn.Sequential(
            nn.ConvTranspose2d(hidden, hidden, 4, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(hidden, hidden, 3, padding=1), nn.SiLU(),
            nn.ConvTranspose2d(hidden, hidden, 4, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(hidden, hidden, 3, padding=1), nn.SiLU(),
        )
        self.head = nn.Conv2d(hidden, channels, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, x):
        self.check_input(x)
        B, L, C, H, W = x.shape
        h, w = H // 4, W // 4
        z = self.encoder(x.reshape(B * L, C, H, W)).reshape(B, L * self.hidden, h, w)
        z = self.translator_out(self.translator(self.translator_in(z)))
        z = z.reshape(B * self.L_out, self.hidden, h, w)
        out = self.head(self.decoder(z))
        return out.reshape(B, self.L_out, C, H, W)


def conv_gru_predictor(cfg) -> ConvGRUPredictor:
    return ConvGRUPredictor(cfg.L_in, cfg.L_out, cfg.channels, cfg.backbone_hidden)


def simvp_lite_predictor(cfg) -> SimVPLitePredictor:
    return SimVPLitePredictor(cfg.L_in, cfg.L_out, cfg.channels, cfg.backbone_hidden)


BACKBONES = {"convgru": conv_gru_predictor, "simvp": simvp_lite_predictor}


def build_backbone(cfg) -> DeterministicPredictor:
    try:
        return BACKBONES[cfg.backbone](cfg)
    except KeyError:
        raise ValueError(f"unknown backbone {cfg.backbone!r}") from None


def deterministic_loss(mu, y):
    """Mean squared error over all elements."""
    if tuple(mu.shape) != tuple(y.shape):
        raise ValueError(f"shape mismatch: {tuple(mu.shape)} vs {tuple(y.shape)}")
    if isinstance(mu, torch.Tensor):
        return F.mse_loss(mu, y)
    d = np.asarray(mu, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    return float(np.mean(d * d))
