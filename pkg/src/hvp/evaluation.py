"""Shape presence/color scoring, image metrics and long-horizon reports.

Frames here are numpy arrays laid out ``(H, W, C)`` (or ``(B, H, W, C)`` for
the batched helpers) with values in ``[0, 1]``.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from scipy.ndimage import uniform_filter

from .shapes_world import PALETTE

OUTCOMES = ("correct_color", "wrong_color", "disappeared")
# tie-break order for window majority: the more pessimistic outcome wins
_TIE_PRIORITY = {"disappeared": 0, "wrong_color": 1, "correct_color": 2}

PRESENCE_MIN_PIXELS = 10
BACKGROUND_TOLERANCE = 0.25

SSIM_WINDOW = 7
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass(frozen=True)
class ShapeVerdict:
    outcome: str
    detected_color: tuple[float, float, float] | None
    pixel_count: int


def _palette_index(color: Sequence[float], palette: np.ndarray) -> int:
    d = np.abs(palette - np.asarray(color, dtype=np.float64)).max(axis=1)
    idx = int(np.argmin(d))
    if d[idx] > 1e-6:
        raise ValueError(f"color {tuple(color)} is not a palette entry")
    return idx


def score_frames(
    frames: np.ndarray,
    true_color_idx: np.ndarray,
    palette: np.ndarray,
    background: Sequence[float] = (0.0, 0.0, 0.0),
    bg_tol: float = BACKGROUND_TOLERANCE,
    min_pixels: int = PRESENCE_MIN_PIXELS,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised scorer over ``(B, H, W, C)`` frames.

    Returns ``(outcome_idx, dominant_palette_idx, pixel_count)`` each of
    shape ``(B,)``; outcome indices follow :data:`OUTCOMES`, and the dominant
    index is ``-1`` when nothing was detected.
    """
    frames = np.asarray(frames, dtype=np.float32)
    bg = np.asarray(background, dtype=np.float32)
    fg = np.abs(frames - bg).max(axis=-1) > bg_tol  # (B, H, W)
    counts = fg.reshape(len(frames), -1).sum(axis=1)
    pal = np.asarray(palette, dtype=np.float32)
    dist = ((frames[..., None, :] - pal) ** 2).sum(axis=-1)  # (B, H, W, K)
    nearest = dist.argmin(axis=-1)
    k = len(pal)
    hist = np.zeros((len(frames), k), dtype=np.int64)
    for j in range(k):
        hist[:, j] = ((nearest == j) & fg).reshape(len(frames), -1).sum(axis=1)
    dominant = np.where(counts > 0, hist.argmax(axis=1), -1)
    outcome = np.where(
        counts < min_pixels, 2, np.where(dominant == np.asarray(true_color_idx), 0, 1)
    )
    return outcome, dominant, counts


def score_frame(
    frame: np.ndarray,
    true_color: Sequence[float],
    palette: Sequence[Sequence[float]] = PALETTE,
    background: Sequence[float] = (0.0, 0.0, 0.0),
    bg_tol: float = BACKGROUND_TOLERANCE,
    min_pixels: int = PRESENCE_MIN_PIXELS,
) -> ShapeVerdict:
    """Classify one frame as correct_color, wrong_color or disappeared.

    A pixel is foreground when any channel differs from the background by
    more than ``bg_tol``. Foreground pixels vote for their nearest palette
    color; the shape is present when at least ``min_pixels`` pixels vote.
    """
    pal = np.asarray(palette, dtype=np.float64)
    true_idx = _palette_index(true_color, pal)
    out, dom, cnt = score_frames(frame[None], np.array([true_idx]), pal, background, bg_tol, min_pixels)
    detected = None if dom[0] < 0 else tuple(float(c) for c in pal[dom[0]])
    return ShapeVerdict(OUTCOMES[int(out[0])], detected, int(cnt[0]))


def majority_outcome(outcomes: Iterable[str]) -> str:
    """Most frequent outcome; ties go to the more pessimistic outcome."""
    counts = {o: 0 for o in OUTCOMES}
    for o in outcomes:
        counts[o] += 1
    if not any(counts.values()):
        raise ValueError("no outcomes to aggregate")
    return max(OUTCOMES, key=lambda o: (counts[o], -_TIE_PRIORITY[o]))


def _check_window(window: tuple[int, int], length: int) -> None:
    a, b = window
    if not (1 <= a <= b <= length):
        raise ValueError(f"window {window} out of range for {length} frames (1-based, inclusive)")


def score_window(
    frames: Sequence[np.ndarray],
    window: tuple[int, int],
    true_color: Sequence[float],
    palette: Sequence[Sequence[float]] = PALETTE,
    **kw,
) -> ShapeVerdict:
    """Majority verdict over frames ``a..b`` (1-based, inclusive) of a rollout."""
    _check_window(window, len(frames))
    a, b = window
    verdicts = [score_frame(frames[t - 1], true_color, palette, **kw) for t in range(a, b + 1)]
    winner = majority_outcome(v.outcome for v in verdicts)
    pick = [v for v in verdicts if v.outcome == winner]
    colors = [v.detected_color for v in pick if v.detected_color is not None]
    detected = max(set(colors), key=colors.count) if colors else None
    return ShapeVerdict(winner, detected, int(np.median([v.pixel_count for v in pick])))


# -- image metrics -------------------------------------------------------------


def l2(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def ssim_batch(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> np.ndarray:
    """SSIM of ``(..., H, W, C)`` pairs, one value per leading index.

    Uniform 7x7 windows, sample (co)variances, constants ``(0.01 L)^2`` and
    ``(0.03 L)^2``; the map is averaged over channels and over windows that
    lie fully inside the image.
    """
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim < 3:
        raise ValueError("expected (..., H, W, C) arrays")
    lead = a.shape[:-3]
    h, w, c = a.shape[-3:]
    win = SSIM_WINDOW
    if min(h, w) < win:
        raise ValueError(f"frames smaller than the {win}x{win} window")
    a = a.reshape(-1, h, w, c)
    b = b.reshape(-1, h, w, c)
    size = (1, win, win, 1)
    n = win * win
    cov_norm = n / (n - 1)
    ux = uniform_filter(a, size=size, mode="reflect")
    uy = uniform_filter(b, size=size, mode="reflect")
    uxx = uniform_filter(a * a, size=size, mode="reflect")
    uyy = uniform_filter(b * b, size=size, mode="reflect")
    uxy = uniform_filter(a * b, size=size, mode="reflect")
    vx = cov_norm * (uxx - ux * ux)
    vy = cov_norm * (uyy - uy * uy)
    vxy = cov_norm * (uxy - ux * uy)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux**2 + uy**2 + c1) * (vx + vy + c2))
    pad = (win - 1) // 2
    s = s[:, pad : h - pad, pad : w - pad, :]
    return s.mean(axis=(1, 2, 3)).reshape(lead)


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    return float(ssim_batch(a, b, data_range))


def best_of_k(candidates: Sequence[np.ndarray], reference: np.ndarray) -> int:
    """Index of the candidate rollout with the highest mean per-frame SSIM.

    Ties resolve to the lowest index.
    """
    if len(candidates) == 0:
        raise ValueError("best_of_k needs at least one candidate")
    ref = np.asarray(reference)
    scores = []
    for cand in candidates:
        cand = np.asarray(cand)
        if cand.shape != ref.shape:
            raise ValueError(f"candidate shape {cand.shape} differs from reference {ref.shape}")
        scores.append(float(np.mean(ssim_batch(cand, ref))))
    return int(np.argmax(scores))


# -- horizon reports -----------------------------------------------------------


@dataclass
class HorizonReport:
    n: int
    horizon: int
    window: tuple[int, int]
    rates: dict[str, float]
    frame_rates: dict[str, list[float]] = field(default_factory=dict)
    l2_curve: list[float] | None = None
    ssim_curve: list[float] | None = None
    window_outcomes: list[str] = field(default_factory=list)
    label: str = ""

    def to_json(self) -> dict:
        return {
            "label": self.label,
            "n": self.n,
            "horizon": self.horizon,
            "window": list(self.window),
            "rates": self.rates,
            "frame_rates": self.frame_rates,
            "l2_curve": self.l2_curve,
            "ssim_curve": self.ssim_curve,
            "window_outcomes": self.window_outcomes,
        }

    @classmethod
    def from_json(cls, d: dict) -> "HorizonReport":
        return cls(
            n=d["n"],
            horizon=d["horizon"],
            window=tuple(d["window"]),
            rates=d["rates"],
            frame_rates=d.get("frame_rates", {}),
            l2_curve=d.get("l2_curve"),
            ssim_curve=d.get("ssim_curve"),
            window_outcomes=d.get("window_outcomes", []),
            label=d.get("label", ""),
        )

    def write(self, out_dir: str | Path, stem: str = "report") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        jpath = out / f"{stem}.json"
        jpath.write_text(json.dumps(self.to_json(), indent=2))
        cpath = out / f"{stem}_curves.csv"
        with open(cpath, "w", newline="") as fh:
            wr = csv.writer(fh)
            cols = ["frame", *[f"rate_{o}" for o in OUTCOMES], "l2", "ssim"]
            wr.writerow(cols)
            for t in range(self.horizon):
                row = [t + 1, *[self.frame_rates[o][t] for o in OUTCOMES]]
                row.append("" if self.l2_curve is None else self.l2_curve[t])
                row.append("" if self.ssim_curve is None else self.ssim_curve[t])
                wr.writerow(row)
        return jpath, cpath

    def table_row(self) -> str:
        return "  ".join(f"{100 * self.rates[o]:6.1f}%" for o in OUTCOMES)


def evaluate_stream(
    frame_stream: Iterable[np.ndarray],
    true_colors: Sequence[Sequence[float]],
    window: tuple[int, int],
    horizon: int,
    palette: Sequence[Sequence[float]] = PALETTE,
    background: Sequence[float] = (0.0, 0.0, 0.0),
    reference: np.ndarray | None = None,
    label: str = "",
) -> HorizonReport:
    """Aggregate a stream of batched frames ``(B, H, W, C)``, one item per timestep.

    ``reference``, when given, holds ground truth ``(B, >=horizon, H, W, C)``
    aligned with the stream (stream item ``k`` is compared to ``reference[:, k]``).
    """
    _check_window(window, horizon)
    pal = np.asarray(palette, dtype=np.float64)
    true_idx = np.array([_palette_index(c, pal) for c in true_colors])
    b = len(true_idx)
    per_frame = np.zeros((horizon, len(OUTCOMES)))
    window_counts = np.zeros((b, len(OUTCOMES)), dtype=np.int64)
    l2s = [] if reference is not None else None
    ssims = [] if reference is not None else None
    seen = 0
    for k, frames in enumerate(frame_stream):
        if k >= horizon:
            break
        frames = np.asarray(frames)
        if frames.shape[0] != b:
            raise ValueError(f"stream batch of {frames.shape[0]} for {b} true colors")
        out, _, _ = score_frames(frames, true_idx, pal, background)
        per_frame[k] = np.bincount(out, minlength=len(OUTCOMES)) / b
        t = k + 1
        if window[0] <= t <= window[1]:
            window_counts[np.arange(b), out] += 1
        if reference is not None:
            ref = reference[:, k]
            l2s.append(float(np.mean((frames.astype(np.float64) - ref) ** 2)))
            ssims.append(float(np.mean(ssim_batch(frames, ref))))
        seen += 1
    if seen < horizon:
        raise ValueError(f"stream ended after {seen} of {horizon} frames")
    outcomes = [
        max(OUTCOMES, key=lambda o, row=row: (row[OUTCOMES.index(o)], -_TIE_PRIORITY[o]))
        for row in window_counts
    ]
    rates = {o: outcomes.count(o) / b for o in OUTCOMES}
    return HorizonReport(
        n=b,
        horizon=horizon,
        window=tuple(window),
        rates=rates,
        frame_rates={o: per_frame[:, i].tolist() for i, o in enumerate(OUTCOMES)},
        l2_curve=l2s,
        ssim_curve=ssims,
        window_outcomes=outcomes,
        label=label,
    )


def _model_stream(model, context: np.ndarray, horizon: int, noise_seed: int | None, noise_std: float) -> Iterator[np.ndarray]:
    import torch

    ctx = torch.from_numpy(np.ascontiguousarray(context.transpose(0, 1, 4, 2, 3)))
    noise = None
    if model.spec.noise_dim:
        gen = torch.Generator().manual_seed(0 if noise_seed is None else noise_seed)
        noise = model.noise(ctx.shape[0], max(horizon, ctx.shape[1]), noise_std, gen)
    with torch.no_grad():
        for out in model.iter_rollout(ctx, horizon, noise):
            yield out.composite.permute(0, 2, 3, 1).numpy()


def evaluate_checkpoint(
    model,
    context: np.ndarray,
    true_colors: Sequence[Sequence[float]],
    horizon: int,
    window: tuple[int, int],
    reference: np.ndarray | Callable[[int, int], np.ndarray] | None = None,
    batch_size: int = 256,
    noise_seed: int | None = 0,
    noise_std: float = 1.0,
    palette: Sequence[Sequence[float]] = PALETTE,
    label: str = "",
) -> HorizonReport:
    """Roll ``model`` out from ``context`` ``(N, C, H, W, ch)`` and score it.

    Items are processed in batches of ``batch_size``; per-batch reports are
    merged with weights proportional to batch size. ``reference`` may be a
    callable ``(lo, hi) -> frames`` so long ground truth is built per batch.
    """
    n = len(context)
    parts = []
    for lo in range(0, n, batch_size):
        hi = min(lo + batch_size, n)
        stream = _model_stream(model, context[lo:hi], horizon, None if noise_seed is None else noise_seed + lo, noise_std)
        if reference is None:
            ref = None
        elif callable(reference):
            ref = reference(lo, hi)
        else:
            ref = reference[lo:hi]
        parts.append(evaluate_stream(stream, true_colors[lo:hi], window, horizon, palette, reference=ref, label=label))
    return merge_reports(parts, label=label)


def merge_reports(parts: Sequence[HorizonReport], label: str = "") -> HorizonReport:
    if len(parts) == 1:
        return parts[0]
    n = sum(p.n for p in parts)
    w = [p.n / n for p in parts]

    def mix(curves):
        if any(c is None for c in curves):
            return None
        return list(np.sum([wi * np.asarray(c) for wi, c in zip(w, curves)], axis=0))

    outcomes = [o for p in parts for o in p.window_outcomes]
    return HorizonReport(
        n=n,
        horizon=parts[0].horizon,
        window=parts[0].window,
        rates={o: outcomes.count(o) / n for o in OUTCOMES},
        frame_rates={o: mix([p.frame_rates[o] for p in parts]) for o in OUTCOMES},
        l2_curve=mix([p.l2_curve for p in parts]),
        ssim_curve=mix([p.ssim_curve for p in parts]),
        window_outcomes=outcomes,
        label=label,
    )


def oracle_stream(specs, world, horizon: int) -> Iterator[np.ndarray]:
    """Ground-truth frames ``1..horizon`` for each spec, as a perfect model would emit."""
    from .shapes_world import generate_sequence

    seqs = np.stack([generate_sequence(s, world, horizon + 1) for s in specs])
    for k in range(horizon):
        yield seqs[:, k + 1]
