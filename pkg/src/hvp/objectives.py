"""Losses and schedules for the three training regimes.

Reduction convention, used everywhere: an L2 term is the mean squared error
over batch and elements *within* one timestep, and timesteps are summed.
Sequence tensors are laid out ``(B, T, ...)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import torch
import torch.nn as nn

Critic = Callable[[torch.Tensor], torch.Tensor]
"""Maps ``(B, T, F)`` sequences to per-step scores ``(B, T)``."""


@dataclass
class LossBreakdown:
    total: torch.Tensor
    image_l2: torch.Tensor | float = 0.0
    encoding_l2: torch.Tensor | float = 0.0
    critic_term: torch.Tensor | float = 0.0
    gradient_penalty: torch.Tensor | float = 0.0
    alpha: float = 0.0
    weights: dict[str, float] = field(default_factory=dict)

    def as_record(self) -> dict[str, float]:
        rec = {}
        for name in ("total", "image_l2", "encoding_l2", "critic_term", "gradient_penalty"):
            v = getattr(self, name)
            rec[name] = float(v.detach()) if torch.is_tensor(v) else float(v)
        rec["alpha"] = float(self.alpha)
        rec.update({f"w_{k}": float(v) for k, v in self.weights.items()})
        return rec

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in self.as_record().values())


def _check_pair(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.dim() < 2 or b.dim() < 2:
        raise ValueError(f"{what}: expected (B, T, ...) tensors")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"{what}: sequence lengths differ ({a.shape[1]} vs {b.shape[1]})")
    if a.shape != b.shape:
        raise ValueError(f"{what}: shapes differ {tuple(a.shape)} vs {tuple(b.shape)}")


def stepwise_l2(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-timestep mean squared error, shape ``(T,)``."""
    _check_pair(a, b, "l2")
    return (a - b).pow(2).transpose(0, 1).reshape(a.shape[1], -1).mean(dim=1)


def loss_e2e(predicted_frames: torch.Tensor, target_frames: torch.Tensor) -> LossBreakdown:
    img = stepwise_l2(predicted_frames, target_frames).sum()
    return LossBreakdown(total=img, image_l2=img, weights={"image": 1.0})


@dataclass(frozen=True)
class AlphaSchedule:
    alpha_start: float = 1e-7
    alpha_end: float = 0.1
    ramp_steps: int = 4000

    def __post_init__(self) -> None:
        if not 0 < self.alpha_start <= self.alpha_end:
            raise ValueError("need 0 < alpha_start <= alpha_end")
        if self.ramp_steps < 0:
            raise ValueError("ramp_steps must be >= 0")


def alpha_at(schedule: AlphaSchedule, step: int) -> float:
    """Log-linear ramp from ``alpha_start`` to ``alpha_end``, flat afterwards."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if schedule.ramp_steps == 0 or step >= schedule.ramp_steps:
        return schedule.alpha_end
    frac = step / schedule.ramp_steps
    lo, hi = math.log(schedule.alpha_start), math.log(schedule.alpha_end)
    return math.exp(lo + frac * (hi - lo))


def loss_epva(
    decoded_from_true_enc: torch.Tensor,
    targets: torch.Tensor,
    predicted_enc: torch.Tensor,
    true_enc: torch.Tensor,
    alpha: float,
) -> LossBreakdown:
    """Image reconstruction from *encoder* outputs plus alpha-weighted encoding match.

    Both terms share one scalar so a single optimizer minimizes their sum.
    """
    if decoded_from_true_enc.shape[1] != predicted_enc.shape[1]:
        raise ValueError("image and encoding sequences differ in length")
    img = stepwise_l2(decoded_from_true_enc, targets).sum()
    enc = stepwise_l2(predicted_enc, true_enc).sum()
    return LossBreakdown(
        total=img + alpha * enc,
        image_l2=img,
        encoding_l2=enc,
        alpha=alpha,
        weights={"image": 1.0, "encoding": alpha},
    )


def augment_for_critic(f_enc: Callable[[torch.Tensor], torch.Tensor], enc: torch.Tensor) -> torch.Tensor:
    """Replace each encoding ``e`` by ``[flatten(f_enc(e)), e]``.

    ``enc`` may be ``(d,)``, ``(N, d)`` or ``(B, T, d)``; leading dims are kept.
    """
    lead, d = enc.shape[:-1], enc.shape[-1]
    flat = enc.reshape(-1, d)
    out = torch.cat([f_enc(flat).flatten(1), flat], dim=-1)
    return out.reshape(*lead, out.shape[-1])


class SequenceCritic(nn.Module):
    """Recurrent scorer emitting one score per timestep."""

    def __init__(self, in_features: int, hidden: int = 64):
        super().__init__()
        self.proj = nn.Linear(in_features, hidden)
        self.cell = nn.LSTMCell(hidden, hidden)
        self.score = nn.Linear(hidden, 1)
        self.hidden = hidden

    def forward(self, seq: torch.Tensor) -> torch.Tensor:
        b, t, _ = seq.shape
        x = torch.nn.functional.elu(self.proj(seq))
        h = seq.new_zeros(b, self.hidden)
        c = seq.new_zeros(b, self.hidden)
        scores = []
        for k in range(t):
            h, c = self.cell(x[:, k], (h, c))
            scores.append(self.score(h).squeeze(-1))
        return torch.stack(scores, dim=1)


def _check_critic_inputs(real: torch.Tensor, fake: torch.Tensor) -> None:
    if real.dim() != 3 or fake.dim() != 3:
        raise ValueError("critic inputs must be (B, T, F)")
    if real.shape != fake.shape:
        raise ValueError(f"real {tuple(real.shape)} and fake {tuple(fake.shape)} sequences differ")


def gradient_penalty(critic: Critic, points: torch.Tensor) -> torch.Tensor:
    """``sum_t mean_b (||d sum(D) / d x_t||_2 - 1)^2`` at ``points``.

    The norm is taken per timestep, so a per-step linear critic with a unit
    weight vector has zero penalty regardless of sequence length.
    """
    # the penalty is defined through a gradient, so it is needed even under no_grad
    outer_grad = torch.is_grad_enabled()
    with torch.enable_grad():
        if not points.requires_grad:
            points = points.detach().requires_grad_(True)
        scores = critic(points)
        (grad,) = torch.autograd.grad(scores.sum(), points, create_graph=outer_grad)
        norms = grad.pow(2).sum(dim=-1).clamp_min(1e-12).sqrt()  # (B, T)
        return (norms - 1.0).pow(2).mean(dim=0).sum()


def critic_loss(
    critic: Critic,
    real_seq: torch.Tensor,
    fake_seq: torch.Tensor,
    lam: float = 10.0,
    gp_at_fake: bool = False,
    interp: torch.Tensor | None = None,
    generator: torch.Generator | None = None,
) -> LossBreakdown:
    """Improved-Wasserstein critic objective, summed over timesteps.

    The penalty is evaluated at random per-sequence interpolates between real
    and fake, or at the fake sequence itself when ``gp_at_fake``. ``interp``
    fixes the interpolation weights ``(B,)`` for reproducible evaluation.
    """
    _check_critic_inputs(real_seq, fake_seq)
    d_fake = critic(fake_seq).mean(dim=0).sum()
    d_real = critic(real_seq).mean(dim=0).sum()
    if gp_at_fake:
        points = fake_seq.detach().requires_grad_(True)
    else:
        if interp is None:
            interp = torch.rand(real_seq.shape[0], generator=generator, dtype=real_seq.dtype)
        w = interp.to(real_seq.dtype).view(-1, 1, 1)
        points = (w * real_seq.detach() + (1.0 - w) * fake_seq.detach()).requires_grad_(True)
    gp = gradient_penalty(critic, points)
    term = d_fake - d_real
    return LossBreakdown(
        total=term + lam * gp,
        critic_term=term,
        gradient_penalty=gp,
        weights={"lambda": lam},
    )


def generator_adv_loss(critic: Critic, real_seq: torch.Tensor, fake_seq: torch.Tensor) -> torch.Tensor:
    """``-sum_t (D(fake) - D(real))``; differentiable w.r.t. both sequences."""
    _check_critic_inputs(real_seq, fake_seq)
    return -(critic(fake_seq) - critic(real_seq)).mean(dim=0).sum()


def loss_epva_adversarial(
    critic: Critic,
    real_seq: torch.Tensor,
    fake_seq: torch.Tensor,
    decoded_from_true_enc: torch.Tensor,
    targets: torch.Tensor,
    predicted_enc: torch.Tensor,
    true_enc: torch.Tensor,
    beta: float = 1e-2,
) -> LossBreakdown:
    """Generator-side objective: adversarial term + beta * encoding L2 + image L2."""
    adv = generator_adv_loss(critic, real_seq, fake_seq)
    img = stepwise_l2(decoded_from_true_enc, targets).sum()
    enc = stepwise_l2(predicted_enc, true_enc).sum()
    return LossBreakdown(
        total=adv + beta * enc + img,
        image_l2=img,
        encoding_l2=enc,
        critic_term=adv,
        weights={"adversarial": 1.0, "encoding": beta, "image": 1.0},
    )
