"""Bouncing-shape video world.

A single shape moves in straight lines, bounces specularly off the image
border and breathes: its radius follows a sinusoid. Everything here is a pure
function of its inputs, so a sequence can be regenerated bit-exactly from the
``(ShapeSpec, WorldConfig)`` pair stored in a dataset header.

Coordinates: ``x`` indexes columns, ``y`` indexes rows, and pixel ``(i, j)``
has its center at ``x=j, y=i``. A pixel takes the shape color iff its center
lies inside the shape.
"""
from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

SHAPE_KINDS = ("circle", "square", "triangle")

PALETTE: tuple[tuple[float, float, float], ...] = (
    (1.0, 0.0, 0.0),
    (0.0, 1.0, 0.0),
    (0.0, 0.0, 1.0),
    (1.0, 1.0, 0.0),
    (0.0, 1.0, 1.0),
    (1.0, 0.0, 1.0),
)
PALETTE_NAMES = ("red", "green", "blue", "yellow", "cyan", "magenta")

MAGIC = b"HVPDATA1"
FORMAT_VERSION = 1


class DatasetError(ValueError):
    """Base class for dataset container problems."""


class CorruptHeaderError(DatasetError):
    pass


class ShapeMismatchError(DatasetError):
    pass


class TruncatedPayloadError(DatasetError):
    pass


@dataclass(frozen=True)
class ShapeSpec:
    shape_kind: str
    color: tuple[float, float, float]
    base_radius: float
    radius_amplitude: float
    radius_period: float
    initial_position: tuple[float, float]
    initial_velocity: tuple[float, float]
    radius_phase: float = 0.0

    def radius_at(self, t: int) -> float:
        return self.base_radius + self.radius_amplitude * math.sin(
            2.0 * math.pi * t / self.radius_period + self.radius_phase
        )

    @property
    def max_radius(self) -> float:
        return self.base_radius + abs(self.radius_amplitude)

    def validate(self, world: "WorldConfig | None" = None) -> None:
        if self.shape_kind not in SHAPE_KINDS:
            raise ValueError(f"unknown shape_kind {self.shape_kind!r}")
        if len(self.color) != 3 or not all(0.0 <= c <= 1.0 for c in self.color):
            raise ValueError(f"color must be an RGB triple in [0,1], got {self.color}")
        if max(self.color) < 0.5:
            raise ValueError("color needs at least one channel >= 0.5")
        if self.base_radius - abs(self.radius_amplitude) < 1.0:
            raise ValueError("base_radius - radius_amplitude must be >= 1 pixel")
        if self.radius_period <= 0:
            raise ValueError("radius_period must be positive")
        if world is None:
            return
        h, w = world.image_size
        if 2.0 * self.max_radius > min(h, w) - 1:
            raise ValueError(
                f"shape with max radius {self.max_radius:.2f} cannot fit in a {h}x{w} image"
            )
        x, y = self.initial_position
        r0 = self.radius_at(0)
        if not (r0 <= x <= w - 1 - r0 and r0 <= y <= h - 1 - r0):
            raise ValueError(
                f"initial position {self.initial_position} lacks clearance for radius {r0:.2f}"
            )

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "ShapeSpec":
        return cls(
            shape_kind=d["shape_kind"],
            color=tuple(float(c) for c in d["color"]),
            base_radius=float(d["base_radius"]),
            radius_amplitude=float(d["radius_amplitude"]),
            radius_period=float(d["radius_period"]),
            initial_position=tuple(float(c) for c in d["initial_position"]),
            initial_velocity=tuple(float(c) for c in d["initial_velocity"]),
            radius_phase=float(d.get("radius_phase", 0.0)),
        )


@dataclass(frozen=True)
class WorldConfig:
    image_size: tuple[int, int] = (32, 32)
    background_color: tuple[float, float, float] = (0.0, 0.0, 0.0)
    sequence_length: int = 64
    seed: int = 0
    channels: int = 3

    def __post_init__(self) -> None:
        h, w = self.image_size
        if h < 16 or w < 16:
            raise ValueError("image_size must be at least 16x16")
        if self.sequence_length < 1:
            raise ValueError("sequence_length must be >= 1")
        if self.channels != 3:
            raise ValueError("only RGB worlds are supported")

    def replace(self, **changes) -> "WorldConfig":
        d = asdict(self)
        d.update(changes)
        d["image_size"] = tuple(d["image_size"])
        d["background_color"] = tuple(d["background_color"])
        return WorldConfig(**d)


@dataclass
class Trajectory:
    positions: np.ndarray  # (steps, 2) float64 (x, y)
    radii: np.ndarray  # (steps,) float64

    def __len__(self) -> int:
        return len(self.radii)


def _reflect_axis(p: float, v: float, r: float, upper: float) -> tuple[float, float]:
    """Keep ``p`` in ``[r, upper - r]`` by mirroring about the touched wall."""
    lo, hi = r, upper - r
    for _ in range(4):
        if p < lo:
            p = 2.0 * lo - p
            v = abs(v)
        elif p > hi:
            p = 2.0 * hi - p
            v = -abs(v)
        else:
            break
    # speeds larger than the free span could still leave us outside
    return min(max(p, lo), hi), v


def simulate_trajectory(spec: ShapeSpec, world: WorldConfig, steps: int) -> Trajectory:
    """Integrate position and radius for ``steps`` frames (frame 0 included).

    Motion is free integration ``p += v`` followed by specular reflection
    against walls inset by the radius of the *current* frame.
    """
    spec.validate(world)
    if steps < 0:
        raise ValueError("steps must be non-negative")
    h, w = world.image_size
    positions = np.empty((steps, 2), dtype=np.float64)
    radii = np.empty(steps, dtype=np.float64)
    x, y = spec.initial_position
    vx, vy = spec.initial_velocity
    for t in range(steps):
        r = spec.radius_at(t)
        if t > 0:
            x, vx = _reflect_axis(x + vx, vx, r, w - 1)
            y, vy = _reflect_axis(y + vy, vy, r, h - 1)
        positions[t] = (x, y)
        radii[t] = r
    return Trajectory(positions=positions, radii=radii)


def shape_mask(kind: str, position: Sequence[float], radius: float, size: tuple[int, int]) -> np.ndarray:
    """Boolean (H, W) mask of pixels whose centers fall inside the shape."""
    h, w = size
    if radius <= 0:
        return np.zeros((h, w), dtype=bool)
    x0, y0 = float(position[0]), float(position[1])
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = xx - x0, yy - y0
    if kind == "circle":
        return dx * dx + dy * dy <= radius * radius
    if kind == "square":
        return (np.abs(dx) <= radius) & (np.abs(dy) <= radius)
    if kind == "triangle":
        # equilateral, circumradius ``radius``, apex pointing up (towards row 0)
        angles = np.deg2rad([-90.0, 30.0, 150.0])
        vx = radius * np.cos(angles)
        vy = radius * np.sin(angles)
        inside = np.ones((h, w), dtype=bool)
        for k in range(3):
            ax, ay = vx[k], vy[k]
            bx, by = vx[(k + 1) % 3], vy[(k + 1) % 3]
            cross = (bx - ax) * (dy - ay) - (by - ay) * (dx - ax)
            inside &= cross >= 0
        return inside
    raise ValueError(f"unknown shape_kind {kind!r}")


def render_frame(spec: ShapeSpec, position: Sequence[float], radius: float, world: WorldConfig) -> np.ndarray:
    h, w = world.image_size
    frame = np.empty((h, w, world.channels), dtype=np.float32)
    frame[...] = np.asarray(world.background_color, dtype=np.float32)
    mask = shape_mask(spec.shape_kind, position, radius, (h, w))
    frame[mask] = np.asarray(spec.color, dtype=np.float32)
    return frame


def generate_sequence(spec: ShapeSpec, world: WorldConfig, length: int | None = None) -> np.ndarray:
    """Render ``(T, H, W, C)`` float32 frames; ``T`` defaults to ``world.sequence_length``."""
    steps = world.sequence_length if length is None else length
    traj = simulate_trajectory(spec, world, steps)
    h, w = world.image_size
    out = np.empty((steps, h, w, world.channels), dtype=np.float32)
    for t in range(steps):
        out[t] = render_frame(spec, traj.positions[t], traj.radii[t], world)
    return out


@dataclass(frozen=True)
class SamplingRanges:
    """Distribution used by :func:`sample_spec`, in units of the image side.

    Radii scale with ``min(H, W) / 32`` so the 32x32 and 64x64 presets see the
    same relative geometry. The minimum radius is chosen so that every shape
    kind covers comfortably more than 10 pixels at 32x32.
    """

    base_radius: tuple[float, float] = (5.5, 7.0)
    radius_amplitude: tuple[float, float] = (0.5, 1.5)
    radius_period: tuple[float, float] = (12.0, 24.0)
    speed: tuple[float, float] = (0.5, 1.5)
    palette: tuple[tuple[float, float, float], ...] = field(default=PALETTE)


def sample_spec(world: WorldConfig, rng: np.random.Generator, ranges: SamplingRanges = SamplingRanges()) -> ShapeSpec:
    h, w = world.image_size
    scale = min(h, w) / 32.0
    kind = SHAPE_KINDS[int(rng.integers(len(SHAPE_KINDS)))]
    color = ranges.palette[int(rng.integers(len(ranges.palette)))]
    base = float(rng.uniform(*ranges.base_radius)) * scale
    amp = float(rng.uniform(*ranges.radius_amplitude)) * scale
    period = float(rng.uniform(*ranges.radius_period))
    phase = float(rng.uniform(0.0, 2.0 * math.pi))
    speed = float(rng.uniform(*ranges.speed)) * scale
    heading = float(rng.uniform(0.0, 2.0 * math.pi))
    r0 = base + amp * math.sin(phase)
    x = float(rng.uniform(r0, w - 1 - r0))
    y = float(rng.uniform(r0, h - 1 - r0))
    spec = ShapeSpec(
        shape_kind=kind,
        color=tuple(float(c) for c in color),
        base_radius=base,
        radius_amplitude=amp,
        radius_period=period,
        initial_position=(x, y),
        initial_velocity=(speed * math.cos(heading), speed * math.sin(heading)),
        radius_phase=phase,
    )
    spec.validate(world)
    return spec


def sample_specs(world: WorldConfig, n: int, seed: int | None = None) -> list[ShapeSpec]:
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(world.seed if seed is None else seed)
    return [sample_spec(world, rng) for _ in range(n)]


def sample_dataset(world: WorldConfig, n: int, seed: int | None = None) -> list[tuple[ShapeSpec, np.ndarray]]:
    """Draw ``n`` specs from :class:`SamplingRanges` and render their sequences."""
    return [(s, generate_sequence(s, world)) for s in sample_specs(world, n, seed)]


@dataclass
class Dataset:
    world: WorldConfig
    specs: list[ShapeSpec]
    frames: np.ndarray  # (n, T, H, W, C) float32
    seed: int
    palette: tuple[tuple[float, float, float], ...] = PALETTE

    def __len__(self) -> int:
        return len(self.specs)

    @classmethod
    def generate(cls, world: WorldConfig, n: int, seed: int | None = None, jobs: int = 1) -> "Dataset":
        seed = world.seed if seed is None else seed
        specs = sample_specs(world, n, seed)
        if jobs > 1:
            from concurrent.futures import ProcessPoolExecutor

            with ProcessPoolExecutor(max_workers=jobs) as pool:
                seqs = list(pool.map(generate_sequence, specs, [world] * n))
        else:
            seqs = [generate_sequence(s, world) for s in specs]
        return cls(world=world, specs=specs, frames=np.stack(seqs), seed=seed)

    def metadata(self) -> dict:
        n, t, h, w, c = self.frames.shape
        return {
            "format_version": FORMAT_VERSION,
            "n": n,
            "T": t,
            "H": h,
            "W": w,
            "C": c,
            "palette": [list(p) for p in self.palette],
            "seed": self.seed,
            "payload_bytes": n * t * h * w * c * 4,
            "background_color": list(self.world.background_color),
            "specs": [s.to_json() for s in self.specs],
        }


def write_dataset(path: str | Path, dataset: Dataset) -> None:
    meta = json.dumps(dataset.metadata(), sort_keys=True).encode("utf-8")
    payload = np.ascontiguousarray(dataset.frames, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(meta)))
        fh.write(meta)
        fh.write(payload.tobytes(order="C"))


def read_dataset(path: str | Path) -> Dataset:
    raw = Path(path).read_bytes()
    buf = io.BytesIO(raw)
    if buf.read(len(MAGIC)) != MAGIC:
        raise CorruptHeaderError(f"{path}: bad magic, not an HVPDATA1 container")
    size_bytes = buf.read(8)
    if len(size_bytes) != 8:
        raise TruncatedPayloadError(f"{path}: file ends inside the header")
    (meta_len,) = struct.unpack("<Q", size_bytes)
    meta_bytes = buf.read(meta_len)
    if len(meta_bytes) != meta_len:
        raise TruncatedPayloadError(f"{path}: file ends inside the metadata block")
    try:
        meta = json.loads(meta_bytes.decode("utf-8"))
        n, t, h, w, c = (int(meta[k]) for k in ("n", "T", "H", "W", "C"))
        specs = [ShapeSpec.from_json(s) for s in meta["specs"]]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CorruptHeaderError(f"{path}: unreadable metadata ({exc})") from exc
    if len(specs) != n:
        raise ShapeMismatchError(f"{path}: header says n={n} but lists {len(specs)} specs")
    expected = n * t * h * w * c * 4
    declared = int(meta.get("payload_bytes", expected))
    if declared != expected:
        raise ShapeMismatchError(
            f"{path}: n*T*H*W*C implies {expected} payload bytes, header records {declared}"
        )
    payload = raw[buf.tell():]
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"{path}: payload truncated ({len(payload)} of {expected} bytes)"
        )
    if len(payload) > expected:
        raise ShapeMismatchError(
            f"{path}: payload has {len(payload)} bytes, header implies {expected}"
        )
    frames = np.frombuffer(payload, dtype="<f4").reshape(n, t, h, w, c).astype(np.float32)
    world = WorldConfig(
        image_size=(h, w),
        background_color=tuple(meta.get("background_color", (0.0, 0.0, 0.0))),
        sequence_length=t,
        seed=int(meta.get("seed", 0)),
    )
    palette = tuple(tuple(float(v) for v in p) for p in meta.get("palette", PALETTE))
    return Dataset(world=world, specs=specs, frames=frames, seed=int(meta.get("seed", 0)), palette=palette)
