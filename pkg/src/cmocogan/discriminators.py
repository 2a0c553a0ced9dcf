"""Label-conditioned frame and video critics with spectral normalization."""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .core import InvalidInputError, VideoClip

SIGMA_FLOOR = 1e-12
# power iterations run once on a freshly wrapped layer
WARMUP_ITERATIONS = 20


# ---------------------------------------------------------------------------
# spectral normalization
# ---------------------------------------------------------------------------


@dataclass
class SpectralState:
    """Left (``u``) and right (``v``) singular-vector estimates, kept unit-norm."""

    u: torch.Tensor
    v: torch.Tensor

    @classmethod
    def init(cls, weight: torch.Tensor, generator: torch.Generator | None = None) -> "SpectralState":
        mat = weight.reshape(weight.shape[0], -1)
        u = torch.randn(mat.shape[0], generator=generator, dtype=mat.dtype)
        v = torch.randn(mat.shape[1], generator=generator, dtype=mat.dtype)
        return cls(u / u.norm(), v / v.norm())


def _unit(x: torch.Tensor, fallback: torch.Tensor) -> torch.Tensor:
    norm = x.norm()
    if norm <= SIGMA_FLOOR:
        return fallback
    return x / norm


def spectral_normalize(weight: torch.Tensor, state: SpectralState, iterations: int = 1) -> torch.Tensor:
    """Return ``weight / sigma`` with sigma the power-iteration estimate of the top singular value.

    Conv kernels are viewed as ``[out_channels, rest]``. ``state`` is updated in place
    and warm-starts the next call. Gradients flow through ``weight`` only.
    """
    if iterations < 1:
        raise InvalidInputError("spectral normalization needs at least one power iteration")
    mat = weight.reshape(weight.shape[0], -1)
    with torch.no_grad():
        w = mat.detach()
        u, v = state.u.to(w.dtype), state.v.to(w.dtype)
        for _ in range(iterations):
            v = _unit(w.t() @ u, v)
            u = _unit(w @ v, u)
        state.u.copy_(u)
        state.v.copy_(v)
    # clones: later calls update the state in place while this graph is alive
    sigma = torch.dot(u.clone(), mat @ v.clone()).clamp_min(SIGMA_FLOOR)
    return weight / sigma


class SpectralNorm(nn.Module):
    """Wraps a conv/linear layer; power iteration runs only in training mode."""

    def __init__(self, module: nn.Module, iterations: int = 1):
        super().__init__()
        self.module = module
        self.iterations = iterations
        weight = module.weight
        del module._parameters["weight"]
        self.weight_orig = nn.Parameter(weight.detach().clone())
        state = SpectralState.init(weight.detach())
        spectral_normalize(weight.detach(), state, WARMUP_ITERATIONS)
        self.register_buffer("u", state.u)
        self.register_buffer("v", state.v)
        module.weight = weight.detach()

    @property
    def state(self) -> SpectralState:
        return SpectralState(self.u, self.v)

    def normalized_weight(self, iterations: int | None = None) -> torch.Tensor:
        if self.training or iterations is not None:
            return spectral_normalize(self.weight_orig, self.state, iterations or self.iterations)
        mat = self.weight_orig.reshape(self.weight_orig.shape[0], -1)
        sigma = torch.dot(self.u.clone(), mat @ self.v.clone()).clamp_min(SIGMA_FLOOR)
        return self.weight_orig / sigma

    def forward(self, x):
        self.module.weight = self.normalized_weight()
        return self.module(x)


def spectral_layers(model: nn.Module) -> list[SpectralNorm]:
    return [m for m in model.modules() if isinstance(m, SpectralNorm)]


# ---------------------------------------------------------------------------
# label conditioning
# ---------------------------------------------------------------------------


def _label_planes(y: torch.Tensor, spatial: tuple[int, ...]) -> torch.Tensor:
    return y.reshape(*y.shape, *([1] * len(spatial))).expand(*y.shape, *spatial)


def condition_frame(frame: torch.Tensor, y_c: torch.Tensor) -> torch.Tensor:
    """Append one constant plane per content class after the image channels.

    ``frame`` is ``[ch, H, W]`` or ``[B, ch, H, W]``; ``y_c`` is the matching one-hot.
    """
    if frame.dim() == 3:
        return condition_frame(frame[None], y_c.reshape(1, -1))[0]
    if frame.dim() != 4 or y_c.dim() != 2 or y_c.shape[0] != frame.shape[0]:
        raise InvalidInputError(f"cannot condition frames {tuple(frame.shape)} on labels {tuple(y_c.shape)}")
    planes = _label_planes(y_c.to(frame.dtype), tuple(frame.shape[2:]))
    return torch.cat([frame, planes], dim=1)


def condition_video(frames: torch.Tensor, y_m: torch.Tensor) -> torch.Tensor:
    """``[T, ch, H, W]`` clip (or ``[B, T, ch, H, W]`` batch) to ``[(B,) ch + M, T, H, W]``."""
    if frames.dim() == 4:
        return condition_video(frames[None], y_m.reshape(1, -1))[0]
    if frames.dim() != 5 or y_m.dim() != 2 or y_m.shape[0] != frames.shape[0]:
        raise InvalidInputError(f"cannot condition clips {tuple(frames.shape)} on labels {tuple(y_m.shape)}")
    video = frames.transpose(1, 2)
    planes = _label_planes(y_m.to(frames.dtype), tuple(video.shape[2:]))
    return torch.cat([video, planes], dim=1)


def sample_frame(clip: VideoClip | np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, int]:
    frames = clip.frames if isinstance(clip, VideoClip) else np.asarray(clip)
    index = int(rng.integers(0, frames.shape[0]))
    return frames[index], index


def sample_frames(videos: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
    """One uniformly drawn frame per clip from a ``[B, T, ...]`` batch."""
    B, T = videos.shape[:2]
    idx = torch.randint(0, T, (B,), generator=generator).to(videos.device)
    return videos[torch.arange(B, device=videos.device), idx]


# ---------------------------------------------------------------------------
# critics
# ---------------------------------------------------------------------------


class FrameCritic(nn.Module):
    """2-D conv critic over ``frame ⊕ content planes``; returns logits."""

    def __init__(self, channels: int, n_content: int, size: int, features: int = 16,
                 slope: float = 0.2, iterations: int = 1):
        super().__init__()
        self.in_channels = channels + n_content
        self.slope = slope
        layers = []
        ch_in, ch_out = self.in_channels, features
        while size > 6 and size % 2 == 0:
            layers += [SpectralNorm(nn.Conv2d(ch_in, ch_out, 4, 2, 1), iterations), nn.LeakyReLU(slope)]
            ch_in, ch_out, size = ch_out, ch_out * 2, size // 2
        layers.append(SpectralNorm(nn.Conv2d(ch_in, 1, size, 1, 0), iterations))
        self.main = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise InvalidInputError(f"frame critic expects [B, {self.in_channels}, H, W], got {tuple(x.shape)}")
        return self.main(x).reshape(-1)


class VideoCritic(nn.Module):
    """3-D conv critic over ``clip ⊕ motion planes`` laid out ``[B, ch + M, T, H, W]``."""

    def __init__(self, channels: int, n_motion: int, frames: int, size: int, features: int = 16,
                 slope: float = 0.2, iterations: int = 1):
        super().__init__()
        self.in_channels = channels + n_motion
        self.frames = frames
        layers = []
        ch_in, ch_out, t = self.in_channels, features, frames
        while size > 6 and size % 2 == 0:
            if t >= 4:
                kt, st, pt = 4, 2, 1
            else:
                kt, st, pt = 1, 1, 0
            conv = nn.Conv3d(ch_in, ch_out, (kt, 4, 4), (st, 2, 2), (pt, 1, 1))
            layers += [SpectralNorm(conv, iterations), nn.LeakyReLU(slope)]
            t = (t + 2 * pt - kt) // st + 1
            ch_in, ch_out, size = ch_out, ch_out * 2, size // 2
        layers.append(SpectralNorm(nn.Conv3d(ch_in, 1, (t, size, size)), iterations))
        self.main = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 5 or x.shape[1] != self.in_channels or x.shape[2] != self.frames:
            raise InvalidInputError(
                f"video critic expects [B, {self.in_channels}, {self.frames}, H, W], got {tuple(x.shape)}"
            )
        return self.main(x).reshape(-1)


@contextmanager
def frozen_state(critic: nn.Module):
    """Evaluate without touching spectral state or other train-mode behaviour."""
    was_training = critic.training
    critic.eval()
    try:
        yield critic
    finally:
        critic.train(was_training)


@torch.no_grad()
def score_frame(critic: FrameCritic, conditioned: torch.Tensor) -> torch.Tensor:
    """Probability of being real for ``[ch + C, H, W]`` (or a batch)."""
    single = conditioned.dim() == 3
    with frozen_state(critic):
        p = torch.sigmoid(critic(conditioned[None] if single else conditioned))
    return p[0] if single else p


@torch.no_grad()
def score_video(critic: VideoCritic, conditioned: torch.Tensor) -> torch.Tensor:
    single = conditioned.dim() == 4
    with frozen_state(critic):
        p = torch.sigmoid(critic(conditioned[None] if single else conditioned))
    return p[0] if single else p
