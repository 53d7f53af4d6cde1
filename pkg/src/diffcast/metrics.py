"""Thresholded verification scores (CSI, HSS, pooled CSI), SSIM and reports."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.ndimage import correlate1d

DEFAULT_THRESHOLDS = (0.2, 0.4, 0.6, 0.8)
DEFAULT_POOLS = (4, 16)


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def binarize(frames, threshold: float, data_range=(0.0, 1.0)) -> np.ndarray:
    """1 where the denormalized value is >= threshold."""
    lo, hi = float(data_range[0]), float(data_range[1])
    if not lo <= threshold <= hi:
        raise ValueError(f"threshold {threshold} outside data range [{lo}, {hi}]")
    raw = np.asarray(frames, dtype=np.float64) * (hi - lo) + lo
    return (raw >= threshold).astype(np.uint8)


def _check_binary(m):
    if not np.isin(m, (0, 1)).all():
        raise ValueError("masks must be binary")


def confusion_counts(pred_mask, true_mask) -> ConfusionCounts:
    p = np.asarray(pred_mask)
    t = np.asarray(true_mask)
    if p.shape != t.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {t.shape}")
    _check_binary(p)
    _check_binary(t)
    p = p.astype(bool)
    t = t.astype(bool)
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def csi(c: ConfusionCounts) -> float:
    den = c.tp + c.fn + c.fp
    return c.tp / den if den else 0.0


def hss(c: ConfusionCounts) -> float:
    tp, fp, fn, tn = (float(v) for v in (c.tp, c.fp, c.fn, c.tn))
    den = (tp + fn) * (fn + tn) + (tp + fp) * (fp + tn)
    return 2.0 * (tp * tn - fn * fp) / den if den else 0.0


def max_pool(mask: np.ndarray, pool: int) -> np.ndarray:
    """Non-overlapping max pooling over the two spatial axes of [..., H, W, C] or [H, W]."""
    m = np.asarray(mask)
    spatial_last = m.ndim == 2
    if spatial_last:
        m = m[..., None]
    H, W = m.shape[-3], m.shape[-2]
    if H % pool or W % pool:
        raise ValueError(f"spatial size {(H, W)} not divisible by pool {pool}")
    lead = m.shape[:-3]
    C = m.shape[-1]
    r = m.reshape(*lead, H // pool, pool, W // pool, pool, C).max(axis=(-4, -2))
    return r[..., 0] if spatial_last else r


def pooled_counts(pred, truth, threshold: float, pool: int, data_range=(0.0, 1.0)) -> ConfusionCounts:
    pm = binarize(pred, threshold, data_range)
    tm = binarize(truth, threshold, data_range)
    if pool > 1:
        pm, tm = max_pool(pm, pool), max_pool(tm, pool)
    return confusion_counts(pm, tm)


def pooled_csi(pred, truth, threshold: float, pool: int, data_range=(0.0, 1.0)) -> float:
    return csi(pooled_counts(pred, truth, threshold, pool, data_range))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def ssim(pred_frame, true_frame, win_size: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Gaussian-windowed SSIM averaged over valid window positions (and channels)."""
    a = np.asarray(pred_frame, dtype=np.float64)
    b = np.asarray(true_frame, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"frame shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    H, W = a.shape[:2]
    if H < win_size or W < win_size:
        raise ValueError(f"frame {H}x{W} smaller than {win_size}x{win_size} window")
    g = gaussian_window(win_size, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    half = win_size // 2

    def filt(img):
        out = correlate1d(img, g, axis=0, mode="constant")
        out = correlate1d(out, g, axis=1, mode="constant")
        return out[half:H - (win_size - 1 - half), half:W - (win_size - 1 - half)]

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class MetricReport:
    per_threshold: dict[float, dict[str, float]]
    mean_csi: float
    mean_hss: float
    ssim: float
    framewise: dict[str, list[float]] = field(default_factory=dict)
    n_events: int = 0

    def to_dict(self) -> dict:
        return {
            "per_threshold": {f"{k:g}": v for k, v in self.per_threshold.items()},
            "mean_csi": self.mean_csi,
            "mean_hss": self.mean_hss,
            "ssim": self.ssim,
            "framewise": self.framewise,
            "n_events": self.n_events,
        }

    def write(self, json_path, csv_path=None):
        Path(json_path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        if csv_path is not None:
            with open(csv_path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["lead_index", "csi", "hss"])
                for i, (c, h) in enumerate(zip(self.framewise["csi"], self.framewise["hss"])):
                    w.writerow([i, repr(float(c)), repr(float(h))])


def _frames_of(p) -> np.ndarray:
    if hasattr(p, "y_hat_clamped"):
        return np.asarray(p.y_hat_clamped)
    if hasattr(p, "frames"):
        return np.asarray(p.frames)
    return np.asarray(p)


def evaluate(predictions: Sequence, targets: Sequence, thresholds=DEFAULT_THRESHOLDS,
             pools=DEFAULT_POOLS, data_range=(0.0, 1.0), win_size: int = 11) -> MetricReport:
    """Micro-averaged scores: counts are summed over events and frames per threshold
    (and per lead index for the frame-wise curves) before scores are formed;
    CSI/HSS are then averaged over thresholds.  Predictions are scored on
    ``y_hat_clamped``.
    """
    if len(predictions) != len(targets):
        raise ValueError(f"{len(predictions)} predictions vs {len(targets)} targets")
    if not predictions:
        raise ValueError("nothing to evaluate")
    thresholds = [float(t) for t in thresholds]
    preds = [_frames_of(p) for p in predictions]
    truths = [_frames_of(t) for t in targets]
    L = preds[0].shape[0]
    totals = {th: ConfusionCounts() for th in thresholds}
    pooled = {(th, p): ConfusionCounts() for th in thresholds for p in pools}
    lead = {th: [ConfusionCounts() for _ in range(L)] for th in thresholds}
    ssims = []
    for pr, tr in zip(preds, truths):
        if pr.shape != tr.shape:
            raise ValueError(f"prediction {pr.shape} vs target {tr.shape}")
        for th in thresholds:
            pm = binarize(pr, th, data_range)
            tm = binarize(tr, th, data_range)
            for i in range(L):
                c = confusion_counts(pm[i], tm[i])
                lead[th][i] = lead[th][i] + c
                totals[th] = totals[th] + c
            for p in pools:
                pooled[th, p] = pooled[th, p] + confusion_counts(max_pool(pm, p), max_pool(tm, p))
        ssims.extend(ssim(pr[i], tr[i], win_size) for i in range(L))

    per = {}
    for th in thresholds:
        row = {"csi": csi(totals[th]), "hss": hss(totals[th])}
        for p in pools:
            row[f"csi_pool{p}"] = csi(pooled[th, p])
        per[th] = row
    framewise = {
        "csi": [float(np.mean([csi(lead[th][i]) for th in thresholds])) for i in range(L)],
        "hss": [float(np.mean([hss(lead[th][i]) for th in thresholds])) for i in range(L)],
    }
    return MetricReport(
        per_threshold=per,
        mean_csi=float(np.mean([per[th]["csi"] for th in thresholds])),
        mean_hss=float(np.mean([per[th]["hss"] for th in thresholds])),
        ssim=math.fsum(ssims) / len(ssims),
        framewise=framewise,
        n_events=len(preds),
    )
