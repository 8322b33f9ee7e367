"""Encoder, feature-space predictor and analogy decoder.

Frames enter the networks as ``(B, C, H, W)`` tensors in ``[0, 1]``. The
hierarchy is strict: only context frames are ever encoded, the predictor runs
on encodings alone, and decoded frames never flow back into either network.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterator, NamedTuple, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class NetSpec:
    image_size: tuple[int, int] = (32, 32)
    channels: int = 3
    d: int = 16
    s: int = 8
    m: int = 32
    conv_widths: tuple[int, ...] = (32, 64)
    lstm_size: int = 128
    noise_dim: int = 0
    use_van: bool = True

    def __post_init__(self) -> None:
        h, w = self.image_size
        factor = 2 ** len(self.conv_widths)
        if h != w:
            raise ValueError("only square frames are supported")
        if h // factor != self.s or h % factor:
            raise ValueError(
                f"{len(self.conv_widths)} stride-2 blocks map {h}px to {h / factor:g}, not s={self.s}"
            )
        if min(self.d, self.m, self.lstm_size) < 1 or self.noise_dim < 0:
            raise ValueError("net dimensions must be positive")

    @property
    def feature_size(self) -> int:
        return self.s * self.s * self.m

    def to_json(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        d["conv_widths"] = list(self.conv_widths)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "NetSpec":
        d = dict(d)
        d["image_size"] = tuple(d["image_size"])
        d["conv_widths"] = tuple(d["conv_widths"])
        return cls(**d)

    @classmethod
    def for_image(cls, size: int, **kw) -> "NetSpec":
        """Pick ``s`` and the number of down blocks from the frame side."""
        widths = kw.pop("conv_widths", (32, 64) if size <= 32 else (32, 64, 64))
        return cls(image_size=(size, size), s=size // 2 ** len(widths), conv_widths=tuple(widths), **kw)


class PredictorState(NamedTuple):
    hidden: torch.Tensor
    cell: torch.Tensor


class VanOutput(NamedTuple):
    raw_frame: torch.Tensor  # (B, C, H, W)
    mask: torch.Tensor  # (B, 1, H, W)
    composite: torch.Tensor  # (B, C, H, W)


def composite(raw_frame: torch.Tensor, mask: torch.Tensor, first_frame: torch.Tensor) -> torch.Tensor:
    """Gate between generated pixels and the first frame, ``raw*M + (1-M)*first``.

    ``mask`` is single channel and broadcasts over the color axis. For a mask
    of exactly 0 or 1 the selected source pixel is returned unchanged.
    """
    if raw_frame.shape != first_frame.shape:
        raise ValueError(f"raw frame {tuple(raw_frame.shape)} vs first frame {tuple(first_frame.shape)}")
    if mask.dim() != raw_frame.dim() or mask.shape[-2:] != raw_frame.shape[-2:] or mask.shape[-3] != 1:
        raise ValueError(f"mask {tuple(mask.shape)} does not broadcast over {tuple(raw_frame.shape)}")
    return raw_frame * mask + (1.0 - mask) * first_frame


def _conv_trunk(in_ch: int, widths: Sequence[int]) -> list[nn.Module]:
    layers: list[nn.Module] = []
    for w in widths:
        layers += [nn.Conv2d(in_ch, w, 4, stride=2, padding=1), nn.ELU()]
        in_ch = w
    return layers


def normalize_encoding(h: torch.Tensor) -> torch.Tensor:
    """Zero-mean, unit-variance encodings; both encoder and predictor emit these."""
    return F.layer_norm(h, h.shape[-1:])


class FrameEncoder(nn.Module):
    """Image -> length-``d`` layer-normalized encoding."""

    def __init__(self, spec: NetSpec):
        super().__init__()
        self.trunk = nn.Sequential(*_conv_trunk(spec.channels, spec.conv_widths))
        self.head = nn.Linear(spec.conv_widths[-1] * spec.s * spec.s, spec.d)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return normalize_encoding(self.head(self.trunk(x).flatten(1)))


class ImageFeatures(nn.Module):
    """``f_img``: image -> (m, s, s) feature tensor."""

    def __init__(self, spec: NetSpec):
        super().__init__()
        self.net = nn.Sequential(
            *_conv_trunk(spec.channels, spec.conv_widths),
            nn.Conv2d(spec.conv_widths[-1], spec.m, 3, padding=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class EncodingFeatures(nn.Module):
    """``f_enc``: encoding -> (m, s, s) feature tensor."""

    def __init__(self, spec: NetSpec):
        super().__init__()
        self.spec = spec
        self.fc = nn.Linear(spec.d, spec.feature_size)
        self.conv = nn.Conv2d(spec.m, spec.m, 3, padding=1)

    def forward(self, e: torch.Tensor) -> torch.Tensor:
        x = self.fc(e).view(-1, self.spec.m, self.spec.s, self.spec.s)
        return self.conv(F.elu(x))


def _feature_block(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, padding=1),
        nn.ELU(),
        nn.Conv2d(out_ch, out_ch, 3, padding=1),
    )


class FrameDecoder(nn.Module):
    """``f_dec``: (m, s, s) -> raw frame in [0,1] plus a single-channel mask in [0,1]."""

    def __init__(self, spec: NetSpec):
        super().__init__()
        widths = list(reversed(spec.conv_widths))
        layers: list[nn.Module] = [nn.ELU(), nn.Conv2d(spec.m, widths[0], 3, padding=1), nn.ELU()]
        in_ch = widths[0]
        for w in widths[1:] + [widths[-1] // 2]:
            layers += [nn.ConvTranspose2d(in_ch, w, 4, stride=2, padding=1), nn.ELU()]
            in_ch = w
        layers.append(nn.Conv2d(in_ch, spec.channels + 1, 3, padding=1))
        self.net = nn.Sequential(*layers)
        self.channels = spec.channels

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        out = torch.sigmoid(self.net(x))
        return out[:, : self.channels], out[:, self.channels :]


class VisualAnalogyDecoder(nn.Module):
    """Decode a target encoding by analogy with the first frame.

    With ``use_van`` the feature tensor fed to ``f_dec`` is
    ``f_enc(e_t) + f_analogy([f_diff(f_img(I_1) - f_enc(e_1)), f_enc(e_t)])``;
    without it the decoder only sees ``f_enc(e_t)`` (the mask still gates
    against the first frame).
    """

    def __init__(self, spec: NetSpec):
        super().__init__()
        self.use_van = spec.use_van
        self.f_enc = EncodingFeatures(spec)
        self.f_dec = FrameDecoder(spec)
        if spec.use_van:
            self.f_img = ImageFeatures(spec)
            self.f_diff = _feature_block(spec.m, spec.m)
            self.f_analogy = _feature_block(2 * spec.m, spec.m)

    def reference(self, e_first: torch.Tensor, first_frame: torch.Tensor) -> torch.Tensor | None:
        """Per-sequence term ``f_diff(f_img(I_1) - f_enc(e_1))``, reusable across timesteps."""
        if not self.use_van:
            return None
        return self.f_diff(self.f_img(first_frame) - self.f_enc(e_first))

    def decode(self, ref: torch.Tensor | None, e_target: torch.Tensor, first_frame: torch.Tensor) -> VanOutput:
        z = self.f_enc(e_target)
        if ref is not None:
            reps = z.shape[0] // ref.shape[0]
            if reps > 1:
                ref = ref.repeat_interleave(reps, dim=0)
            z = z + self.f_analogy(torch.cat([ref, z], dim=1))
        raw, mask = self.f_dec(z)
        if first_frame.shape[0] != raw.shape[0]:
            first_frame = first_frame.repeat_interleave(raw.shape[0] // first_frame.shape[0], dim=0)
        return VanOutput(raw, mask, composite(raw, mask, first_frame))

    def forward(self, e_first: torch.Tensor, e_target: torch.Tensor, first_frame: torch.Tensor) -> VanOutput:
        return self.decode(self.reference(e_first, first_frame), e_target, first_frame)


class Predictor(nn.Module):
    """LSTM over encodings: ``[e_hat_t, H_t] = LSTM(input_{t-1}, H_{t-1})``."""

    def __init__(self, spec: NetSpec):
        super().__init__()
        self.spec = spec
        self.cell = nn.LSTMCell(spec.d + spec.noise_dim, spec.lstm_size)
        self.head = nn.Linear(spec.lstm_size, spec.d)

    def initial_state(self, batch: int, like: torch.Tensor) -> PredictorState:
        z = like.new_zeros(batch, self.spec.lstm_size)
        return PredictorState(z, z.clone())

    def forward(
        self, e_in: torch.Tensor, state: PredictorState, noise: torch.Tensor | None = None
    ) -> tuple[torch.Tensor, PredictorState]:
        if e_in.shape[-1] != self.spec.d:
            raise ValueError(f"predictor input has length {e_in.shape[-1]}, expected d={self.spec.d}")
        if self.spec.noise_dim:
            if noise is None:
                noise = e_in.new_zeros(e_in.shape[0], self.spec.noise_dim)
            if noise.shape[-1] != self.spec.noise_dim:
                raise ValueError(f"noise has length {noise.shape[-1]}, expected {self.spec.noise_dim}")
            e_in = torch.cat([e_in, noise], dim=-1)
        h, c = self.cell(e_in, (state.hidden, state.cell))
        return normalize_encoding(self.head(h)), PredictorState(h, c)


StateHook = Callable[[PredictorState], PredictorState]


class VideoPredictor(nn.Module):
    """Encoder + predictor LSTM + analogy decoder.

    ``tap`` (if set) is called as ``tap(step, source, tensor)`` with every
    predictor input; ``source`` is ``"encoder"`` or ``"predictor"``. Tests
    use it to check which branch of the recurrence fed each step.
    """

    def __init__(self, spec: NetSpec):
        super().__init__()
        self.spec = spec
        self.encoder = FrameEncoder(spec)
        self.predictor = Predictor(spec)
        self.van = VisualAnalogyDecoder(spec)
        self.tap: Callable[[int, str, torch.Tensor], None] | None = None

    def _check_frames(self, frames: torch.Tensor) -> None:
        want = (self.spec.channels, *self.spec.image_size)
        if tuple(frames.shape[-3:]) != want:
            raise ValueError(f"frames of shape {tuple(frames.shape[-3:])}, model expects {want}")

    def encode(self, frames: torch.Tensor) -> torch.Tensor:
        """Encode ``(..., C, H, W)`` frames into ``(..., d)``."""
        self._check_frames(frames)
        lead = frames.shape[:-3]
        e = self.encoder(frames.reshape(-1, *frames.shape[-3:]))
        return e.reshape(*lead, self.spec.d)

    def encode_frame(self, frame: torch.Tensor) -> torch.Tensor:
        """Encode one ``(B, C, H, W)`` frame; rollouts call this once per context frame."""
        self._check_frames(frame)
        return self.encoder(frame)

    def predictor_step(self, e_in, state, noise=None):
        return self.predictor(e_in, state, noise)

    def predict_encodings(
        self,
        context: torch.Tensor,
        horizon: int,
        noise: torch.Tensor | None = None,
        state_hook: StateHook | None = None,
    ) -> torch.Tensor:
        """Run the recurrence for ``horizon`` steps and stack ``e_hat_1..e_hat_T``.

        ``context`` is ``(B, C, d)`` holding ``e_0..e_{C-1}``. Step ``t`` reads
        ``e_{t-1}`` while ``t <= C`` and its own ``e_hat_{t-1}`` afterwards.
        """
        return torch.stack(list(self.iter_encodings(context, horizon, noise, state_hook)), dim=1)

    def iter_encodings(
        self,
        context: torch.Tensor,
        horizon: int,
        noise: torch.Tensor | None = None,
        state_hook: StateHook | None = None,
    ) -> Iterator[torch.Tensor]:
        if context.dim() != 3 or context.shape[1] < 1:
            raise ValueError("context must be (B, C>=1, d)")
        b, c, _ = context.shape
        if horizon < c:
            raise ValueError(f"horizon {horizon} shorter than context {c}")
        state = self.predictor.initial_state(b, context)
        e_hat = None
        for t in range(1, horizon + 1):
            if t <= c:
                e_in, source = context[:, t - 1], "encoder"
            else:
                e_in, source = e_hat, "predictor"
            if self.tap is not None:
                self.tap(t, source, e_in)
            step_noise = None if noise is None else noise[:, t - 1]
            e_hat, state = self.predictor(e_in, state, step_noise)
            if state_hook is not None:
                state = state_hook(state)
            yield e_hat

    def decode(self, e_first: torch.Tensor, e_target: torch.Tensor, first_frame: torch.Tensor) -> VanOutput:
        return self.van(e_first, e_target, first_frame)

    def iter_rollout(
        self, context_frames: torch.Tensor, horizon: int, noise: torch.Tensor | None = None
    ) -> Iterator[VanOutput]:
        """Stream decoded frames ``1..horizon`` for ``(B, C, ch, H, W)`` context.

        Only the current step's tensors are alive between yields, so memory
        does not grow with ``horizon``.
        """
        self._check_frames(context_frames)
        if context_frames.dim() != 5 or context_frames.shape[1] < 1:
            raise ValueError("context_frames must be (B, C>=1, ch, H, W)")
        first = context_frames[:, 0]
        ctx = torch.stack([self.encode_frame(context_frames[:, k]) for k in range(context_frames.shape[1])], dim=1)
        ref = self.van.reference(ctx[:, 0], first)
        steps = max(horizon, ctx.shape[1])
        for k, e_hat in enumerate(self.iter_encodings(ctx, steps, noise)):
            if k >= horizon:
                break
            yield self.van.decode(ref, e_hat, first)

    @torch.no_grad()
    def rollout(self, context_frames: torch.Tensor, horizon: int, noise: torch.Tensor | None = None) -> list[VanOutput]:
        return list(self.iter_rollout(context_frames, horizon, noise))

    def noise(self, batch: int, horizon: int, std: float, generator: torch.Generator | None = None) -> torch.Tensor | None:
        """Gaussian predictor-input noise ``(B, T, noise_dim)``, or None when disabled."""
        if not self.spec.noise_dim:
            return None
        z = torch.randn(batch, horizon, self.spec.noise_dim, generator=generator)
        return z * std
