"""GlobalNet motion-prior encoder and the temporal-attention UNet denoiser."""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbones import ConvGRUCell, groups_for


def sinusoidal_embedding(pos: torch.Tensor, dim: int) -> torch.Tensor:
    """[N] integer positions -> [N, dim] sin/cos features."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = pos.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    """GroupNorm-SiLU-conv residual block with an additive embedding projection."""

    def __init__(self, in_ch, out_ch, emb_dim=None):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups_for(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb = nn.Linear(emb_dim, out_ch) if emb_dim else None
        self.norm2 = nn.GroupNorm(groups_for(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, emb=None):
        h = self.conv1(F.silu(self.norm1(x)))
        if self.emb is not None:
            h = h + self.emb(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class GlobalNet(nn.Module):
    """Multi-scale ConvGRU encoder of the deterministic forecast.

    Level ``l`` works at 1/2**l resolution with ``hidden * mults[l]`` channels:
    downsample, recurrent scan over the frames, residual block on the final
    state.  All biases start at zero, so a zero forecast yields zero features.
    """

    def __init__(self, channels, hidden, mults):
        super().__init__()
        self.level_channels = [hidden * m for m in mults]
        self.down = nn.ModuleList()
        self.grus = nn.ModuleList()
        self.res = nn.ModuleList()
        prev = channels
        for lvl, ch in enumerate(self.level_channels):
            stride = 1 if lvl == 0 else 2
            self.down.append(nn.Conv2d(prev, ch, 3, stride=stride, padding=1))
            self.grus.append(ConvGRUCell(ch, ch))
            self.res.append(ResBlock(ch, ch))
            prev = ch
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)) and m.bias is not None:
                nn.init.zeros_(m.bias)

    def forward(self, mu: torch.Tensor) -> list[torch.Tensor]:
        """mu [B, L, C, H, W] -> list of [B, C_l, H/2**l, W/2**l]."""
        B, L = mu.shape[:2]
        seq = mu.reshape(B * L, *mu.shape[2:])
        levels = []
        for down, gru, res in zip(self.down, self.grus, self.res):
            seq = down(seq)
            feats = seq.reshape(B, L, *seq.shape[1:])
            h = None
            states = []
            for i in range(L):
                h = gru(feats[:, i], h)
                states.append(h)
            seq = torch.stack(states, dim=1).reshape(B * L, *h.shape[1:])
            levels.append(res(h))
        return levels


class TemporalAttention(nn.Module):
    """Self-attention along the segment axis, independently at every pixel."""

    def __init__(self, ch, heads=1, max_len=None):
        super().__init__()
        if ch % heads:
            raise ValueError("channels must be divisible by heads")
        self.heads = heads
        self.norm = nn.GroupNorm(groups_for(ch), ch)
        self.qkv = nn.Linear(ch, 3 * ch)
        self.proj = nn.Linear(ch, ch)
        self.pos = nn.Parameter(torch.randn(max_len, ch) * 0.02) if max_len else None

    def attention_weights(self, x: torch.Tensor):
        """x [B, K, C, H, W] -> (weights [B*H*W, heads, K, K], values)."""
        B, K, C, H, W = x.shape
        if K == 0:
            raise ValueError("segment length must be positive")
        n = self.norm(x.reshape(B * K, C, H, W)).reshape(B, K, C, H, W)
        tok = n.permute(0, 3, 4, 1, 2).reshape(B * H * W, K, C)
        if self.pos is not None:
            tok = tok + self.pos[:K]
        q, k, v = self.qkv(tok).chunk(3, dim=-1)
        d = C // self.heads

        def split(a):
            return a.reshape(-1, K, self.heads, d).transpose(1, 2)

        q, k, v = split(q), split(k), split(v)
        w = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d), dim=-1)
        return w, v

    def forward(self, x):
        B, K, C, H, W = x.shape
        w, v = self.attention_weights(x)
        out = (w @ v).transpose(1, 2).reshape(B * H * W, K, C)
        out = self.proj(out).reshape(B, H, W, K, C).permute(0, 3, 4, 1, 2)
        return x + out


class TemporalBlock(nn.Module):
    """concat -> residual block -> norm + temporal attention -> (down|up)sample."""

    def __init__(self, in_ch, out_ch, emb_dim, K, resample=None):
        super().__init__()
        self.res = ResBlock(in_ch, out_ch, emb_dim)
        self.attn = TemporalAttention(out_ch, max_len=K)
        if resample == "down":
            self.resample = nn.Conv2d(out_ch, out_ch, 3, stride=2, padding=1)
        elif resample == "up":
            self.resample = nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"),
                                          nn.Conv2d(out_ch, out_ch, 3, padding=1))
        else:
            self.resample = nn.Identity()

    def forward(self, x, emb, K, extra=None):
        """x [B*K, C, H, W]; extra is concatenated on channels first."""
        if extra is not None:
            x = torch.cat([x, extra], dim=1)
        x = self.res(x, emb)
        BK, C, H, W = x.shape
        x = self.attn(x.reshape(BK // K, K, C, H, W)).reshape(BK, C, H, W)
        return x, self.resample(x)


def _per_item(v, B) -> torch.Tensor:
    v = torch.as_tensor(v, dtype=torch.long).reshape(-1)
    if v.numel() == 1:
        v = v.expand(B)
    if v.numel() != B:
        raise ValueError(f"expected {B} per-item indices, got {v.numel()}")
    return v


class GTUNet(nn.Module):
    """Noise predictor eps(s_t, s_prev, h, t, j) on [B, K, C, H, W] segments."""

    def __init__(self, channels, K, hidden, mults, use_globalnet=True):
        super().__init__()
        self.channels = channels
        self.K = K
        self.hidden = hidden
        self.use_globalnet = use_globalnet
        self.depth = len(mults)
        chs = [hidden * m for m in mults]
        self.level_channels = chs
        emb_dim = 4 * hidden
        self.emb_mlp = nn.Sequential(nn.Linear(hidden, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.inp = nn.Conv2d(2 * channels, hidden, 3, padding=1)

        self.down = nn.ModuleList()
        prev = hidden
        for lvl, ch in enumerate(chs):
            extra = ch if use_globalnet else 0
            resample = "down" if lvl < self.depth - 1 else None
            self.down.append(TemporalBlock(prev + extra, ch, emb_dim, K, resample))
            prev = ch
        self.mid_res1 = ResBlock(prev, prev, emb_dim)
        self.mid_attn = TemporalAttention(prev, max_len=K)
        self.mid_res2 = ResBlock(prev, prev, emb_dim)
        self.up = nn.ModuleList()
        for lvl in reversed(range(self.depth)):
            ch = chs[lvl]
            resample = "up" if lvl > 0 else None
            out_ch = chs[lvl - 1] if lvl > 0 else hidden
            self.up.append(TemporalBlock(prev + ch, out_ch, emb_dim, K, resample))
            prev = out_ch
        self.out_norm = nn.GroupNorm(groups_for(prev), prev)
        self.out = nn.Conv2d(prev, channels, 3, padding=1)

    @property
    def downsample_factor(self) -> int:
        return 2 ** (self.depth - 1)

    def embed(self, t: torch.Tensor, j: torch.Tensor, dtype) -> torch.Tensor:
        e = sinusoidal_embedding(t, self.hidden) + sinusoidal_embedding(j, self.hidden)
        return self.emb_mlp(e.to(dtype))

    def forward(self, s_t, s_prev, h, t, j):
        """s_t, s_prev [B, K, C, H, W]; h list of [B, C_l, H_l, W_l] or None; t, j [B] ints."""
        if s_t.shape != s_prev.shape:
            raise ValueError(f"s_t {tuple(s_t.shape)} and s_prev {tuple(s_prev.shape)} differ")
        B, K, C, H, W = s_t.shape
        if K != self.K or C != self.channels:
            raise ValueError(f"expected K={self.K}, C={self.channels}, got {tuple(s_t.shape)}")
        f = self.downsample_factor
        if H % f or W % f:
            raise ValueError(f"spatial size {(H, W)} not divisible by {f}")
        t, j = _per_item(t, B), _per_item(j, B)
        if t.min() < 1 or j.min() < 1:
            raise ValueError("t and j must be >= 1")
        if self.use_globalnet and h is None:
            raise ValueError("GlobalNet features required when use_globalnet is set")

        emb = self.embed(t, j, s_t.dtype).repeat_interleave(K, dim=0)
        x = torch.cat([s_t, s_prev], dim=2).reshape(B * K, 2 * C, H, W)
        x = self.inp(x)
        skips = []
        for lvl, block in enumerate(self.down):
            extra = None
            if self.use_globalnet:
                extra = h[lvl].repeat_interleave(K, dim=0)
            feat, x = block(x, emb, K, extra)
            skips.append(feat)
        x = self.mid_res1(x, emb)
        BK, Cm, Hm, Wm = x.shape
        x = self.mid_attn(x.reshape(B, K, Cm, Hm, Wm)).reshape(BK, Cm, Hm, Wm)
        x = self.mid_res2(x, emb)
        for block in self.up:
            _, x = block(x, emb, K, skips.pop())
        out = self.out(F.silu(self.out_norm(x)))
        return out.reshape(B, K, C, H, W)
