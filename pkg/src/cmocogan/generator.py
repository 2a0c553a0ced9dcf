"""Content-label-conditioned frame generator and per-video assembly."""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from .core import InvalidInputError, LatentSeed, ModelConfig, VideoClip, one_hot
from .latent_dynamics import MotionPathGenerator


def assemble_frame_input(eps_c: torch.Tensor, y_c: torch.Tensor, z_m_t: torch.Tensor) -> torch.Tensor:
    """Concatenate ``(eps_c, y_c, z_m_t)`` along the last axis."""
    if eps_c.shape[:-1] != z_m_t.shape[:-1] or y_c.shape[:-1] != z_m_t.shape[:-1]:
        raise InvalidInputError(
            f"leading dims differ: {tuple(eps_c.shape)}, {tuple(y_c.shape)}, {tuple(z_m_t.shape)}"
        )
    return torch.cat([eps_c, y_c.to(eps_c.dtype), z_m_t.to(eps_c.dtype)], dim=-1)


def _base_size(height: int, width: int) -> tuple[int, int]:
    # 4x4 base for power-of-two sizes, 6x6 for 96x96 and alike.
    if height != width:
        raise InvalidInputError("only square frames are supported")
    for base in (4, 6, 3, 5, 7):
        ratio = height / base
        if ratio >= 1 and ratio.is_integer() and math.log2(ratio).is_integer():
            return base, int(math.log2(ratio))
    raise InvalidInputError(f"frame size {height} is not base * 2**k for a small base")


class FrameGenerator(nn.Module):
    """DCGAN-style decoder: project to a small base grid, then stride-2 transposed convs."""

    def __init__(
        self,
        dim_content: int = 30,
        n_content: int = 4,
        dim_motion: int = 30,
        image_shape: tuple[int, int, int] = (3, 32, 32),
        features: int = 32,
    ):
        super().__init__()
        self.dim_content = dim_content
        self.n_content = n_content
        self.dim_motion = dim_motion
        self.image_shape = tuple(image_shape)
        channels, height, width = self.image_shape
        self.base, n_up = _base_size(height, width)
        if n_up < 1:
            raise InvalidInputError("frame size must be at least twice the base grid")

        # base grid carries features * 2**(n_up-1) channels, halved by every block
        self.base_channels = features * 2 ** (n_up - 1)
        self.project = nn.Sequential(
            nn.Linear(self.input_dim, self.base_channels * self.base * self.base, bias=False),
            nn.BatchNorm1d(self.base_channels * self.base * self.base),
            nn.ReLU(True),
        )
        blocks = []
        ch = self.base_channels
        for _ in range(n_up - 1):
            blocks += [
                nn.ConvTranspose2d(ch, ch // 2, 4, 2, 1, bias=False),
                nn.BatchNorm2d(ch // 2),
                nn.ReLU(True),
            ]
            ch //= 2
        blocks += [nn.ConvTranspose2d(ch, channels, 4, 2, 1), nn.Tanh()]
        self.decode = nn.Sequential(*blocks)

    @property
    def input_dim(self) -> int:
        return self.dim_content + self.n_content + self.dim_motion

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.input_dim:
            raise InvalidInputError(f"frame input has length {x.shape[-1]}, expected {self.input_dim}")
        h = self.project(x).view(-1, self.base_channels, self.base, self.base)
        return self.decode(h)


def generate_frame(gen: FrameGenerator, x: torch.Tensor) -> torch.Tensor:
    """Single frame ``[ch, H, W]`` from an assembled input vector (eval-mode statistics)."""
    if x.dim() != 1:
        raise InvalidInputError("generate_frame expects one input vector")
    was_training = gen.training
    gen.eval()
    try:
        return gen(x[None])[0]
    finally:
        gen.train(was_training)


class VideoGenerator(nn.Module):
    """Motion path plus frame generator; produces ``[B, T, ch, H, W]`` batches."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.motion = MotionPathGenerator(config.dim_motion, config.n_motion)
        self.frame = FrameGenerator(
            config.dim_content,
            config.n_content,
            config.dim_motion,
            config.image_shape,
            config.gen_features,
        )

    def frame_inputs(self, eps_c, y_c, eps_m, y_m) -> torch.Tensor:
        """Assembled per-frame inputs ``[B, T, input_dim]``; content part repeated over time."""
        z_m = self.motion(eps_m, y_m)
        T = z_m.shape[1]
        content = eps_c[:, None].expand(-1, T, -1)
        labels = y_c[:, None].expand(-1, T, -1)
        return assemble_frame_input(content, labels, z_m)

    def forward(self, eps_c, y_c, eps_m, y_m) -> torch.Tensor:
        x = self.frame_inputs(eps_c, y_c, eps_m, y_m)
        B, T, D = x.shape
        frames = self.frame(x.reshape(B * T, D))
        return frames.view(B, T, *frames.shape[1:])

    def sample_latents(self, labels: torch.Tensor, generator: torch.Generator | None = None):
        """Gaussian noise and one-hot labels for a ``[B, 2]`` (motion, content) label tensor."""
        cfg = self.config
        param = next(self.parameters())
        B = labels.shape[0]
        eps_c = torch.randn(B, cfg.dim_content, generator=generator).to(param)
        eps_m = torch.randn(B, cfg.frames, cfg.dim_motion, generator=generator).to(param)
        y_m = nn.functional.one_hot(labels[:, 0].long(), cfg.n_motion).to(param)
        y_c = nn.functional.one_hot(labels[:, 1].long(), cfg.n_content).to(param)
        return eps_c, y_c, eps_m, y_m


def seeds_to_tensors(seeds: list[LatentSeed], config: ModelConfig, like: torch.Tensor):
    eps_c = torch.as_tensor(np.stack([s.eps_c for s in seeds])).to(like)
    eps_m = torch.as_tensor(np.stack([s.eps_m for s in seeds])).to(like)
    y_c = torch.as_tensor(np.stack([one_hot(s.labels.content, config.n_content) for s in seeds])).to(like)
    y_m = torch.as_tensor(np.stack([one_hot(s.labels.motion, config.n_motion) for s in seeds])).to(like)
    return eps_c, y_c, eps_m, y_m


@torch.no_grad()
def generate_videos(video_gen: VideoGenerator, seeds: list[LatentSeed]) -> list[VideoClip]:
    """Deterministic batched generation in eval mode."""
    cfg = video_gen.config
    for s in seeds:
        s.labels.validate(cfg.n_motion, cfg.n_content)
        if s.eps_c.shape != (cfg.dim_content,) or s.eps_m.shape[1:] != (cfg.dim_motion,):
            raise InvalidInputError("latent seed does not match the model config")
    if not seeds:
        return []
    was_training = video_gen.training
    video_gen.eval()
    try:
        param = next(video_gen.parameters())
        out = video_gen(*seeds_to_tensors(seeds, cfg, param))
    finally:
        video_gen.train(was_training)
    return [VideoClip(v.clamp(-1, 1).cpu().numpy()) for v in out]


def generate_video(video_gen: VideoGenerator, seed: LatentSeed) -> VideoClip:
    return generate_videos(video_gen, [seed])[0]
