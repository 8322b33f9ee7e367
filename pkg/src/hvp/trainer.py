"""Training loops, state noise, checkpoints and the metrics log."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch

from .model import NetSpec, PredictorState, VideoPredictor
from .objectives import (
    AlphaSchedule,
    LossBreakdown,
    SequenceCritic,
    alpha_at,
    augment_for_critic,
    critic_loss,
    loss_e2e,
    loss_epva,
    loss_epva_adversarial,
)

log = logging.getLogger(__name__)

REGIMES = ("e2e", "epva", "epva_adversarial", "epva_no_van", "e2e_plus_epva")
CHECKPOINT_VERSION = 1
MODEL_FILE = "model.pt"
MANIFEST_FILE = "manifest.json"
METRICS_FILE = "metrics.jsonl"


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, snapshot: Path):
        super().__init__(f"{message} (diagnostic snapshot: {snapshot})")
        self.snapshot = snapshot


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


@dataclass
class TrainingConfig:
    regime: str = "epva"
    context: int = 3
    horizon: int = 16
    batch_size: int = 16
    steps: int = 5000
    lr: float = 1e-3
    critic_lr: float = 1e-4
    # cosine decay of the generator lr to lr * lr_final_ratio at the last step; 1.0 keeps it constant
    lr_final_ratio: float = 1.0
    alpha_schedule: AlphaSchedule = field(default_factory=AlphaSchedule)
    lambda_gp: float = 10.0
    beta_enc_l2: float = 1e-2
    gp_at_fake: bool = False
    state_noise_std: float = 0.0
    input_noise_dim: int = 8
    input_noise_std: float = 1.0
    critic_steps_per_gen_step: int = 5
    critic_hidden: int = 64
    grad_clip: float = 5.0
    seed: int = 0
    init_from_checkpoint: str | None = None
    history_every: int = 50

    def __post_init__(self) -> None:
        if isinstance(self.alpha_schedule, dict):
            self.alpha_schedule = AlphaSchedule(**self.alpha_schedule)
        self.validate()

    def validate(self) -> None:
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}; choose from {', '.join(REGIMES)}")
        if not 1 <= self.context < self.horizon:
            raise ValueError("need 1 <= context < horizon")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")
        if self.lr <= 0 or self.critic_lr <= 0:
            raise ValueError("learning rates must be positive")
        if not 0 < self.lr_final_ratio <= 1:
            raise ValueError("lr_final_ratio must be in (0, 1]")
        if self.state_noise_std < 0 or self.input_noise_std < 0 or self.input_noise_dim < 0:
            raise ValueError("noise settings must be non-negative")
        if self.critic_steps_per_gen_step < 1:
            raise ValueError("critic_steps_per_gen_step must be >= 1")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "TrainingConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    def net_spec_for(self, base: NetSpec) -> NetSpec:
        """Adapt ``base`` to this regime; only the adversarial regime feeds input noise."""
        noise_dim = self.input_noise_dim if self.regime == "epva_adversarial" else 0
        return dataclasses.replace(base, noise_dim=noise_dim, use_van=self.regime != "epva_no_van")


def inject_state_noise(state: PredictorState, std: float, generator: torch.Generator | None = None) -> PredictorState:
    """Add zero-mean Gaussian noise to hidden and cell state; identity for ``std == 0``."""
    if std < 0:
        raise ValueError("std must be >= 0")
    if std == 0:
        return state
    noisy = [
        s + std * torch.randn(s.shape, generator=generator, dtype=s.dtype)
        for s in state
    ]
    return PredictorState(*noisy)


class BatchSampler:
    """Random temporal crops of ``horizon + 1`` frames (reference frame plus ``horizon``)."""

    def __init__(self, frames: np.ndarray, horizon: int, batch_size: int, seed: int):
        n, length = frames.shape[:2]
        if length < horizon + 1:
            raise ValueError(
                f"dataset sequences have {length} frames; training needs horizon + 1 = {horizon + 1}"
            )
        self.frames = frames
        self.clip = horizon + 1
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)

    def __call__(self) -> torch.Tensor:
        n, length = self.frames.shape[:2]
        idx = self.rng.integers(0, n, size=self.batch_size)
        off = self.rng.integers(0, length - self.clip + 1, size=self.batch_size)
        clips = np.stack([self.frames[i, o : o + self.clip] for i, o in zip(idx, off)])
        return torch.from_numpy(np.ascontiguousarray(clips.transpose(0, 1, 4, 2, 3)))


@dataclass
class TrainResult:
    model: VideoPredictor
    critic: SequenceCritic | None
    config: TrainingConfig
    step: int
    metrics: list[dict]
    checkpoint_dir: Path | None = None


def _forward_sequences(model, clip, cfg, state_noise_gen, noise_gen, train_noise=True):
    """Encode a clip and run the predictor over it.

    Returns ``(e, e_hat)`` where ``e`` covers frames ``0..T`` and ``e_hat`` covers ``1..T``.
    """
    e = model.encode(clip)
    hook = None
    if train_noise and cfg.state_noise_std > 0:
        hook = lambda s: inject_state_noise(s, cfg.state_noise_std, state_noise_gen)  # noqa: E731
    noise = model.noise(clip.shape[0], cfg.horizon, cfg.input_noise_std, noise_gen)
    e_hat = model.predict_encodings(e[:, : cfg.context], cfg.horizon, noise, hook)
    return e, e_hat


def _decode_seq(model: VideoPredictor, e_first, encs, first_frame) -> torch.Tensor:
    b, t, d = encs.shape
    out = model.van(e_first, encs.reshape(b * t, d), first_frame)
    return out.composite.reshape(b, t, *first_frame.shape[1:])


def generator_loss(model, clip, cfg, step, state_noise_gen, noise_gen, critic=None) -> LossBreakdown:
    """Regime-specific generator objective for one clip ``(B, T+1, C, H, W)``."""
    e, e_hat = _forward_sequences(model, clip, cfg, state_noise_gen, noise_gen)
    first, targets = clip[:, 0], clip[:, 1:]
    if cfg.regime == "e2e":
        return loss_e2e(_decode_seq(model, e[:, 0], e_hat, first), targets)
    from_enc = _decode_seq(model, e[:, 0], e[:, 1:], first)
    if cfg.regime in ("epva", "epva_no_van"):
        return loss_epva(from_enc, targets, e_hat, e[:, 1:], alpha_at(cfg.alpha_schedule, step))
    if cfg.regime == "e2e_plus_epva":
        a = alpha_at(cfg.alpha_schedule, step)
        ep = loss_epva(from_enc, targets, e_hat, e[:, 1:], a)
        ee = loss_e2e(_decode_seq(model, e[:, 0], e_hat, first), targets)
        return LossBreakdown(
            total=ep.total + ee.total,
            image_l2=ep.image_l2 + ee.image_l2,
            encoding_l2=ep.encoding_l2,
            alpha=a,
            weights={"image": 1.0, "encoding": a, "e2e_image": 1.0},
        )
    if cfg.regime == "epva_adversarial":
        f_enc = model.van.f_enc
        real = augment_for_critic(f_enc, e[:, 1:])
        fake = augment_for_critic(f_enc, e_hat)
        return loss_epva_adversarial(
            critic, real, fake, from_enc, targets, e_hat, e[:, 1:], cfg.beta_enc_l2
        )
    raise ValueError(cfg.regime)


def _set_requires_grad(module: torch.nn.Module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(flag)


def warm_start(model: VideoPredictor, state: dict) -> None:
    """Copy matching parameters from ``state``; pad predictor input weights for new noise inputs."""
    own = model.state_dict()
    d = model.spec.d
    for k, v in state.items():
        if k not in own:
            continue
        if own[k].shape == v.shape:
            own[k] = v.clone()
        elif k == "predictor.cell.weight_ih" and own[k].shape[0] == v.shape[0] and v.shape[1] == d:
            padded = torch.zeros_like(own[k])
            padded[:, :d] = v
            own[k] = padded
        else:
            raise CheckpointError(f"cannot warm-start {k}: {tuple(v.shape)} vs {tuple(own[k].shape)}")
    model.load_state_dict(own)


def train(
    config: TrainingConfig,
    frames: np.ndarray,
    net_spec: NetSpec,
    out_dir: str | Path | None = None,
    world: dict | None = None,
    eval_fn: Callable[[VideoPredictor], dict] | None = None,
    eval_every: int = 0,
    progress: Callable[[int, dict], None] | None = None,
) -> TrainResult:
    """Train one regime on ``frames`` of shape ``(n, L, H, W, C)``.

    Writes ``metrics.jsonl`` as it goes and a checkpoint at the end when
    ``out_dir`` is given. Non-finite losses abort with :class:`TrainingDiverged`.
    """
    config.validate()
    torch.manual_seed(config.seed)
    spec = config.net_spec_for(net_spec)
    model = VideoPredictor(spec)
    critic = None
    if config.init_from_checkpoint:
        src = load_checkpoint(config.init_from_checkpoint)
        warm_start(model, src.model.state_dict())
        log.info("warm-started from %s (step %d)", config.init_from_checkpoint, src.step)
    if config.regime == "epva_adversarial":
        critic = SequenceCritic(spec.feature_size + spec.d, config.critic_hidden)
    sampler = BatchSampler(frames, config.horizon, config.batch_size, config.seed)
    state_noise_gen = torch.Generator().manual_seed(config.seed + 1)
    noise_gen = torch.Generator().manual_seed(config.seed + 2)
    interp_gen = torch.Generator().manual_seed(config.seed + 3)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    schedule = torch.optim.lr_scheduler.CosineAnnealingLR(
        opt, T_max=config.steps, eta_min=config.lr * config.lr_final_ratio
    )
    critic_opt = None
    if critic is not None:
        critic_opt = torch.optim.Adam(critic.parameters(), lr=config.critic_lr, betas=(0.5, 0.9))

    out = Path(out_dir) if out_dir is not None else None
    metrics_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out / METRICS_FILE, "w")
    metrics: list[dict] = []
    history: list[dict] = []
    t0 = time.perf_counter()

    def emit(record: dict) -> None:
        metrics.append(record)
        if metrics_fh is not None:
            metrics_fh.write(json.dumps(record, sort_keys=True) + "\n")

    def abort(step: int, record: dict) -> None:
        where = out if out is not None else Path.cwd()
        snap = where / f"diverged_step{step}.json"
        snap.write_text(json.dumps({"step": step, "record": record, "config": config.to_json()}, indent=2, default=str))
        raise TrainingDiverged(f"non-finite loss at step {step}", snap)

    model.train()
    try:
        for step in range(1, config.steps + 1):
            record: dict = {"step": step}
            if critic is not None:
                _set_requires_grad(critic, True)
                for _ in range(config.critic_steps_per_gen_step):
                    clip = sampler()
                    with torch.no_grad():
                        e, e_hat = _forward_sequences(model, clip, config, state_noise_gen, noise_gen)
                        real = augment_for_critic(model.van.f_enc, e[:, 1:])
                        fake = augment_for_critic(model.van.f_enc, e_hat)
                    closs = critic_loss(
                        critic, real, fake, config.lambda_gp, config.gp_at_fake, generator=interp_gen
                    )
                    critic_opt.zero_grad()
                    closs.total.backward()
                    critic_opt.step()
                crec = closs.as_record()
                record.update(critic_total=crec["total"], critic_gp=crec["gradient_penalty"],
                              critic_wdist=-crec["critic_term"])
                _set_requires_grad(critic, False)
            clip = sampler()
            loss = generator_loss(model, clip, config, step - 1, state_noise_gen, noise_gen, critic)
            record.update(loss.as_record())
            record["lr"] = opt.param_groups[0]["lr"]
            record["wall_time"] = round(time.perf_counter() - t0, 3)
            if not all(math.isfinite(v) for k, v in record.items() if k != "step"):
                abort(step, record)
            opt.zero_grad()
            loss.total.backward()
            if config.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.predictor.parameters(), config.grad_clip)
            opt.step()
            schedule.step()
            if eval_fn is not None and eval_every and step % eval_every == 0:
                model.eval()
                record["eval"] = eval_fn(model)
                model.train()
            emit(record)
            if step % config.history_every == 0 or step == config.steps:
                history.append({k: v for k, v in record.items() if k != "wall_time"})
            if progress is not None:
                progress(step, record)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
        if critic is not None:
            _set_requires_grad(critic, True)
    model.eval()
    result = TrainResult(model, critic, config, config.steps, metrics)
    if out is not None:
        save_checkpoint(out, model, config, config.steps, history, critic=critic, world=world)
        result.checkpoint_dir = out
    return result


# -- checkpoints -------------------------------------------------------------


@dataclass
class Checkpoint:
    model: VideoPredictor
    critic: SequenceCritic | None
    net_spec: NetSpec
    training_config: TrainingConfig
    step: int
    manifest: dict
    path: Path


def save_checkpoint(
    path: str | Path,
    model: VideoPredictor,
    config: TrainingConfig,
    step: int,
    metric_history: Iterable[dict] = (),
    critic: SequenceCritic | None = None,
    world: dict | None = None,
) -> Path:
    """Write ``model.pt`` plus a ``manifest.json`` sidecar into directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blob = {"model": model.state_dict()}
    if critic is not None:
        blob["critic"] = critic.state_dict()
    torch.save(blob, path / MODEL_FILE)
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "net_spec": model.spec.to_json(),
        "training_config": config.to_json(),
        "step": int(step),
        "metric_history": list(metric_history),
        "world": world,
        "critic_in_features": None if critic is None else critic.proj.in_features,
        "param_sha256": parameter_hash(model),
    }
    (path / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def parameter_hash(module: torch.nn.Module, prefixes: tuple[str, ...] = ()) -> str:
    h = hashlib.sha256()
    for k, v in sorted(module.state_dict().items()):
        if prefixes and not k.startswith(prefixes):
            continue
        h.update(k.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not (path / MANIFEST_FILE).is_file() or not (path / MODEL_FILE).is_file():
        raise FileNotFoundError(f"{path}: expected {MANIFEST_FILE} and {MODEL_FILE}")
    manifest = json.loads((path / MANIFEST_FILE).read_text())
    version = manifest.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    try:
        spec = NetSpec.from_json(manifest["net_spec"])
        cfg = TrainingConfig.from_json(manifest["training_config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid manifest ({exc})") from exc
    blob = torch.load(path / MODEL_FILE, map_location="cpu", weights_only=True)
    model = VideoPredictor(spec)
    _load_strict(model, blob["model"], path)
    model.eval()
    critic = None
    if "critic" in blob:
        critic = SequenceCritic(spec.feature_size + spec.d, cfg.critic_hidden)
        _load_strict(critic, blob["critic"], path)
    return Checkpoint(model, critic, spec, cfg, int(manifest.get("step", 0)), manifest, path)


def _load_strict(module: torch.nn.Module, state: dict, path: Path) -> None:
    own = module.state_dict()
    missing = set(own) - set(state)
    extra = set(state) - set(own)
    if missing or extra:
        raise CheckpointError(f"{path}: manifest/blob disagree; missing={sorted(missing)} extra={sorted(extra)}")
    for k, v in state.items():
        if tuple(v.shape) != tuple(own[k].shape):
            raise CheckpointError(
                f"{path}: manifest/blob disagree on {k}: blob {tuple(v.shape)}, manifest implies {tuple(own[k].shape)}"
            )
    module.load_state_dict(state)


def read_metrics(path: str | Path) -> list[dict]:
    p = Path(path)
    if p.is_dir():
        p = p / METRICS_FILE
    return [json.loads(line) for line in p.read_text().splitlines() if line.strip()]
