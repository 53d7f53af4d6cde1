"""Visual comparison grid: inputs/truth, deterministic forecast, residual, final forecast."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import TwoSlopeNorm  # noqa: E402

INTENSITY_CMAP = "viridis"
RESIDUAL_CMAP = "RdBu_r"


def residual_norm(residual: np.ndarray) -> TwoSlopeNorm:
    """Diverging normalization with 0 at the colormap midpoint."""
    m = float(np.max(np.abs(residual))) if residual.size else 0.0
    m = max(m, 1e-6)
    return TwoSlopeNorm(vmin=-m, vcenter=0.0, vmax=m)


def residual_rgba(residual: np.ndarray) -> np.ndarray:
    return plt.get_cmap(RESIDUAL_CMAP)(residual_norm(residual)(residual))


def plot_forecast(x, y, mu, residual, y_hat, out_png, title=""):
    """Rows: inputs then truth, mu, residual (signed), y_hat; columns are frames/lead times.

    All arrays are [L, H, W, C]; only channel 0 is drawn.
    """
    L_in, L_out = len(x), len(y)
    cols = L_in + L_out
    fig, axes = plt.subplots(4, cols, figsize=(1.1 * cols, 5.2), squeeze=False)
    rnorm = residual_norm(np.asarray(residual))
    rows = [
        ("input | truth", list(x) + list(y), dict(cmap=INTENSITY_CMAP, vmin=0, vmax=1)),
        ("mu", [None] * L_in + list(mu), dict(cmap=INTENSITY_CMAP, vmin=0, vmax=1)),
        ("residual", [None] * L_in + list(residual), dict(cmap=RESIDUAL_CMAP, norm=rnorm)),
        ("y_hat", [None] * L_in + list(np.clip(y_hat, 0, 1)), dict(cmap=INTENSITY_CMAP, vmin=0, vmax=1)),
    ]
    for r, (label, frames, kw) in enumerate(rows):
        for c, fr in enumerate(frames):
            ax = axes[r, c]
            ax.set_xticks([])
            ax.set_yticks([])
            if fr is None:
                ax.axis("off")
                continue
            ax.imshow(np.asarray(fr)[..., 0], interpolation="nearest", **kw)
            if r == 0:
                ax.set_title(f"t-{L_in - c - 1}" if c < L_in else f"+{c - L_in + 1}", fontsize=7)
        axes[r, 0].set_ylabel(label, fontsize=8)
        if r > 0:
            axes[r, L_in].set_ylabel(label, fontsize=8)
    fig.text(0.01, 0.01,
             f"intensity: {INTENSITY_CMAP} on [0, 1]; residual: {RESIDUAL_CMAP} centred at 0 "
             f"(+/-{rnorm.vmax:.3f})", fontsize=7)
    if title:
        fig.suptitle(title, fontsize=9)
    fig.savefig(out_png, dpi=80, metadata={"Software": None})
    plt.close(fig)
    return out_png
