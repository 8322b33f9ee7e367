"""Figure and image artifacts: loss curves, horizon curves, frame strips and GIFs."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

OUTCOME_COLORS = {"correct_color": "tab:green", "wrong_color": "tab:orange", "disappeared": "tab:gray"}


def pretty_plot(width: float = 7.0, height: float | None = None, nrows: int = 1, ncols: int = 1):
    golden = (np.sqrt(5) - 1.0) / 2.0
    height = height or width * golden
    plt.rcParams.update({"font.size": 10, "axes.spines.top": False, "axes.spines.right": False})
    fig, axes = plt.subplots(nrows, ncols, figsize=(width, height), squeeze=False)
    return fig, axes


def _smooth(y: np.ndarray, k: int) -> np.ndarray:
    if k <= 1 or len(y) < k:
        return y
    kernel = np.ones(k) / k
    return np.convolve(y, kernel, mode="valid")


def plot_loss_curves(metrics: Sequence[dict], path: str | Path, title: str = "") -> Path:
    keys = [k for k in ("total", "image_l2", "encoding_l2", "critic_total", "critic_gp") if k in metrics[0]]
    fig, axes = pretty_plot(8.0, 3.0 * len(keys) / 2 + 1.0, nrows=len(keys))
    steps = np.array([r["step"] for r in metrics])
    win = max(1, len(steps) // 100)
    for ax, key in zip(axes[:, 0], keys):
        y = np.array([r[key] for r in metrics], dtype=float)
        ax.plot(steps, y, lw=0.5, alpha=0.35, color="tab:blue")
        ys = _smooth(y, win)
        ax.plot(steps[len(steps) - len(ys):], ys, lw=1.2, color="tab:blue")
        ax.set_ylabel(key)
        if key not in ("critic_total",) and np.all(y > 0):
            ax.set_yscale("log")
    axes[-1, 0].set_xlabel("step")
    if title:
        axes[0, 0].set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_horizon_reports(reports: Sequence, path: str | Path) -> Path:
    """Per-frame correct-color rate (and L2/SSIM when available) for each report."""
    has_ref = any(r.l2_curve for r in reports)
    fig, axes = pretty_plot(8.0, 7.0 if has_ref else 3.5, nrows=3 if has_ref else 1)
    for r in reports:
        t = np.arange(1, r.horizon + 1)
        label = r.label or "model"
        axes[0, 0].plot(t, r.frame_rates["correct_color"], label=label)
        if has_ref and r.l2_curve:
            axes[1, 0].plot(t, r.l2_curve, label=label)
            axes[2, 0].plot(t, r.ssim_curve, label=label)
    a, b = reports[0].window
    for ax in axes[:, 0]:
        ax.axvspan(a, b, color="0.9", zorder=0)
    axes[0, 0].set_ylabel("correct-color rate")
    axes[0, 0].set_ylim(-0.02, 1.02)
    if has_ref:
        axes[1, 0].set_ylabel("pixel L2")
        axes[2, 0].set_ylabel("SSIM")
    axes[-1, 0].set_xlabel("predicted frame")
    axes[0, 0].legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_outcome_bars(reports: Sequence, path: str | Path) -> Path:
    from .evaluation import OUTCOMES

    fig, axes = pretty_plot(1.5 + 1.2 * len(reports), 3.5)
    ax = axes[0, 0]
    bottom = np.zeros(len(reports))
    x = np.arange(len(reports))
    for o in OUTCOMES:
        v = np.array([r.rates[o] for r in reports])
        ax.bar(x, v, bottom=bottom, color=OUTCOME_COLORS[o], label=o.replace("_", " "))
        bottom += v
    ax.set_xticks(x, [r.label or f"run {i}" for i, r in enumerate(reports)])
    ax.set_ylabel(f"window {reports[0].window[0]}-{reports[0].window[1]}")
    ax.legend(frameon=False, fontsize=8, loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def to_uint8(frames: np.ndarray) -> np.ndarray:
    return (np.clip(frames, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def frame_grid(frames: np.ndarray, per_row: int = 20, pad: int = 1) -> np.ndarray:
    """Tile ``(T, H, W[, C])`` frames into one image, ``per_row`` frames per row."""
    frames = np.asarray(frames)
    if frames.ndim == 3:
        frames = frames[..., None]
    t, h, w, c = frames.shape
    rows = (t + per_row - 1) // per_row
    cols = min(t, per_row)
    grid = np.ones((rows * (h + pad) + pad, cols * (w + pad) + pad, c), dtype=frames.dtype)
    for k in range(t):
        r, q = divmod(k, per_row)
        y, x = pad + r * (h + pad), pad + q * (w + pad)
        grid[y : y + h, x : x + w] = frames[k]
    return grid


def save_strip(frames: np.ndarray, path: str | Path, per_row: int = 20, scale: int = 2) -> Path:
    img = to_uint8(frame_grid(frames, per_row))
    if img.shape[-1] == 1:
        img = img[..., 0]
    pil = Image.fromarray(img)
    if scale > 1:
        pil = pil.resize((pil.width * scale, pil.height * scale), Image.NEAREST)
    pil.save(path)
    return Path(path)


def save_gif(frames: np.ndarray, path: str | Path, fps: float = 10.0, scale: int = 2) -> Path:
    imgs = to_uint8(np.asarray(frames))
    if imgs.ndim == 4 and imgs.shape[-1] == 1:
        imgs = imgs[..., 0]
    pils = [Image.fromarray(f) for f in imgs]
    if scale > 1:
        pils = [p.resize((p.width * scale, p.height * scale), Image.NEAREST) for p in pils]
    pils[0].save(path, save_all=True, append_images=pils[1:], duration=int(round(1000 / fps)), loop=0)
    return Path(path)
