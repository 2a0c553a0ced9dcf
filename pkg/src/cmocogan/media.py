"""Animated-GIF and PNG frame-grid export for clips in [-1, 1]."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .datasets import unit_to_bytes


def _rgb(frames) -> np.ndarray:
    frames = getattr(frames, "frames", frames)
    pixels = unit_to_bytes(frames).transpose(0, 2, 3, 1)  # [T, H, W, ch]
    if pixels.shape[-1] == 1:
        pixels = np.repeat(pixels, 3, axis=-1)
    return pixels


def save_gif(frames: np.ndarray, path: str | Path, duration_ms: int = 100) -> Path:
    path = Path(path)
    images = [Image.fromarray(f, "RGB") for f in _rgb(frames)]
    images[0].save(path, save_all=True, append_images=images[1:], duration=duration_ms, loop=0)
    return path


def frame_grid(clips: Sequence[np.ndarray], pad: int = 1) -> np.ndarray:
    """One row per clip, one column per frame, separated by ``pad`` white pixels."""
    rows = [_rgb(c) for c in clips]
    T, H, W, _ = rows[0].shape
    grid = np.full((len(rows) * (H + pad) + pad, T * (W + pad) + pad, 3), 255, np.uint8)
    for r, row in enumerate(rows):
        for t, frame in enumerate(row):
            y, x = pad + r * (H + pad), pad + t * (W + pad)
            grid[y:y + H, x:x + W] = frame
    return grid


def save_grid(clips: Sequence[np.ndarray], path: str | Path) -> Path:
    path = Path(path)
    Image.fromarray(frame_grid(clips), "RGB").save(path)
    return path
