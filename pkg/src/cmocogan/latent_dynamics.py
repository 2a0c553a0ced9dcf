"""Motion-label-conditioned recurrent latent path.

Each step feeds ``eps_t ⊕ one_hot(motion)`` to a single GRU cell whose hidden
state is the frame's motion code. The state starts from zeros and the label is
injected at every step.
"""

from __future__ import annotations

import torch
from torch import nn

from .core import InvalidInputError, LatentSeed, one_hot


class MotionPathGenerator(nn.Module):
    def __init__(self, dim_motion: int = 30, n_motion: int = 4):
        super().__init__()
        self.dim_motion = dim_motion
        self.n_motion = n_motion
        self.cell = nn.GRUCell(dim_motion + n_motion, dim_motion)

    @property
    def input_dim(self) -> int:
        return self.cell.input_size

    def initial_state(self, batch: int, like: torch.Tensor) -> torch.Tensor:
        return like.new_zeros(batch, self.dim_motion)

    def step(self, eps_t: torch.Tensor, y_m: torch.Tensor, z_prev: torch.Tensor) -> torch.Tensor:
        """One recurrence step; accepts unbatched vectors or ``[B, dim]`` batches."""
        squeeze = eps_t.dim() == 1
        if squeeze:
            eps_t, y_m, z_prev = eps_t[None], y_m[None], z_prev[None]
        if eps_t.shape[-1] != self.dim_motion:
            raise InvalidInputError(f"noise dim {eps_t.shape[-1]} != {self.dim_motion}")
        if y_m.shape[-1] != self.n_motion:
            raise InvalidInputError(f"label dim {y_m.shape[-1]} != {self.n_motion}")
        if z_prev.shape[-1] != self.dim_motion:
            raise InvalidInputError(f"state dim {z_prev.shape[-1]} != {self.dim_motion}")
        z_t = self.cell(torch.cat([eps_t, y_m.to(eps_t.dtype)], dim=-1), z_prev)
        return z_t[0] if squeeze else z_t

    def forward(self, eps_m: torch.Tensor, y_m: torch.Tensor) -> torch.Tensor:
        """Unroll over ``eps_m [B, T, dim_motion]`` with labels ``y_m [B, n_motion]``."""
        if eps_m.dim() != 3 or eps_m.shape[1] == 0:
            raise InvalidInputError(f"motion noise must be [B, T>0, dim], got {tuple(eps_m.shape)}")
        z = self.initial_state(eps_m.shape[0], eps_m)
        path = []
        for t in range(eps_m.shape[1]):
            z = self.step(eps_m[:, t], y_m, z)
            path.append(z)
        return torch.stack(path, dim=1)


def unroll(gen: MotionPathGenerator, seed: LatentSeed) -> torch.Tensor:
    """Motion codes ``[T, dim_motion]`` for a single latent seed."""
    if seed.eps_m.shape[0] == 0:
        raise InvalidInputError("cannot unroll zero frames")
    param = next(gen.parameters())
    eps = torch.tensor(seed.eps_m, dtype=param.dtype, device=param.device)[None]
    y_m = torch.as_tensor(one_hot(seed.labels.motion, gen.n_motion), dtype=param.dtype, device=param.device)
    return gen(eps, y_m[None])[0]
