"""Synthetic moving-sprite corpus, clip-directory ingestion and the zero-shot holdout split."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np
from PIL import Image, UnidentifiedImageError

from .core import (
    SYNTHETIC_PROFILE,
    DatasetProfile,
    InvalidInputError,
    LabelPair,
    VideoClip,
)

log = logging.getLogger(__name__)

CLIP_FRAMES = 16
FRAME_PATTERN = "frame_{:04d}.png"


class DataError(Exception):
    """A corpus file or directory does not follow the documented layout."""


def bytes_to_unit(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float32) / 127.5 - 1.0


def unit_to_bytes(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((np.asarray(values) + 1.0) * 127.5), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# corpus
# ---------------------------------------------------------------------------


@dataclass
class LabeledCorpus:
    """Clips ``[N, T, ch, H, W]`` in [-1, 1] with ``[N, 2]`` (motion, content) labels."""

    frames: np.ndarray
    labels: np.ndarray
    profile: DatasetProfile
    skipped: int = 0

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1, 2)
        if len(self.frames) != len(self.labels):
            raise InvalidInputError("frames and labels disagree in length")
        if len(self.frames):
            if self.frames.ndim != 5 or tuple(self.frames.shape[2:]) != self.profile.image_shape:
                raise InvalidInputError(
                    f"clips shaped {self.frames.shape[1:]} do not match profile {self.profile.image_shape}"
                )
            m, c = self.labels[:, 0], self.labels[:, 1]
            if m.min() < 0 or m.max() >= self.profile.n_motion or c.min() < 0 or c.max() >= self.profile.n_content:
                raise InvalidInputError("corpus labels outside the profile's class counts")

    @classmethod
    def empty(cls, profile: DatasetProfile, frames: int = CLIP_FRAMES) -> "LabeledCorpus":
        return cls(np.zeros((0, frames, *profile.image_shape), np.float32), np.zeros((0, 2), np.int64), profile)

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self) -> Iterator[tuple[VideoClip, LabelPair]]:
        for clip, (m, c) in zip(self.frames, self.labels):
            yield VideoClip(clip), LabelPair(int(m), int(c))

    def subset(self, mask_or_index) -> "LabeledCorpus":
        return LabeledCorpus(self.frames[mask_or_index], self.labels[mask_or_index], self.profile)

    def combos(self) -> set[tuple[int, int]]:
        return {(int(m), int(c)) for m, c in self.labels}


# ---------------------------------------------------------------------------
# holdout split
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    """``removal_map[c]`` is the motion class withheld from content class ``c``."""

    n_motion: int
    n_content: int
    removal_map: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "removal_map", tuple(int(m) for m in self.removal_map))
        if len(self.removal_map) != self.n_content:
            raise InvalidInputError("removal map must cover every content class")
        if any(not 0 <= m < self.n_motion for m in self.removal_map):
            raise InvalidInputError("removal map names a motion class out of range")
        retained = {m for c in range(self.n_content) for m in range(self.n_motion) if m != self.removal_map[c]}
        missing = set(range(self.n_motion)) - retained
        if missing:
            raise InvalidInputError(f"motion classes {sorted(missing)} would be unseen in training")

    @property
    def heldout_combos(self) -> list[tuple[int, int]]:
        return [(self.removal_map[c], c) for c in range(self.n_content)]

    @property
    def training_combos(self) -> list[tuple[int, int]]:
        return [
            (m, c)
            for c in range(self.n_content)
            for m in range(self.n_motion)
            if m != self.removal_map[c]
        ]

    def is_heldout(self, motion: int, content: int) -> bool:
        return self.removal_map[content] == motion

    def to_json(self) -> str:
        return json.dumps(
            {"M": self.n_motion, "C": self.n_content, "removal_map": {str(c): m for c, m in enumerate(self.removal_map)}},
            indent=2,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "SplitSpec":
        d = json.loads(text)
        rm = d["removal_map"]
        if isinstance(rm, Mapping):
            removal = [rm[str(c)] for c in range(d["C"])]
        else:
            removal = list(rm)
        return cls(int(d["M"]), int(d["C"]), tuple(removal))


def build_split(n_motion: int, n_content: int, rule: str | Mapping[int, int] = "round-robin") -> SplitSpec:
    """Withhold one motion class per content class.

    ``rule`` is ``"round-robin"`` (content ``c`` loses motion ``c mod M``) or an
    explicit ``{content: motion}`` mapping.
    """
    if n_motion < 2:
        raise InvalidInputError("zero-shot holdout needs at least two motion classes")
    if n_content < 2:
        raise InvalidInputError("zero-shot holdout needs at least two content classes")
    if rule == "round-robin":
        removal = tuple(c % n_motion for c in range(n_content))
    elif isinstance(rule, Mapping):
        removal = tuple(int(rule[c]) for c in range(n_content))
    else:
        raise InvalidInputError(f"unknown split rule {rule!r}")
    return SplitSpec(n_motion, n_content, removal)


def apply_split(corpus: LabeledCorpus, spec: SplitSpec) -> tuple[LabeledCorpus, list[tuple[int, int]]]:
    removal = np.asarray(spec.removal_map, dtype=np.int64)
    if len(corpus):
        keep = corpus.labels[:, 0] != removal[corpus.labels[:, 1]]
    else:
        keep = np.zeros(0, dtype=bool)
    return corpus.subset(keep), spec.heldout_combos


class ComboSampler:
    """Uniform draws over the training (motion, content) combinations of a split."""

    def __init__(self, spec: SplitSpec):
        self.combos = np.asarray(spec.training_combos, dtype=np.int64)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.combos[rng.integers(0, len(self.combos), size=n)]


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

SPRITE_SIZE = 9
START_JITTER = 4
SYNTHETIC_COLORS = np.array(
    [[255, 0, 0], [0, 255, 0], [0, 0, 255], [255, 255, 0]], dtype=np.uint8
)
# (dy, dx) per motion class: up, down, left, right
SYNTHETIC_DIRECTIONS = np.array([[-1, 0], [1, 0], [0, -1], [0, 1]])


def _sprite_masks(size: int = SPRITE_SIZE) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    mid = (size - 1) / 2
    square = np.ones((size, size), bool)
    circle = (yy - mid) ** 2 + (xx - mid) ** 2 <= (size / 2) ** 2 - 1
    triangle = np.abs(xx - mid) <= yy / 2 + 0.5
    cross = (np.abs(xx - mid) <= 1) | (np.abs(yy - mid) <= 1)
    return np.stack([square, circle, triangle, cross])


SPRITES = _sprite_masks()


def render_clip(content: int, motion: int, start: tuple[int, int], speed: int,
                frames: int = CLIP_FRAMES, size: int = 32) -> np.ndarray:
    """Uint8 clip ``[T, 3, size, size]``: one sprite moving with wrap-around on black."""
    mask = SPRITES[content]
    ys, xs = np.nonzero(mask)
    color = SYNTHETIC_COLORS[content]
    clip = np.zeros((frames, 3, size, size), np.uint8)
    dy, dx = SYNTHETIC_DIRECTIONS[motion] * speed
    for t in range(frames):
        y0, x0 = start[0] + dy * t, start[1] + dx * t
        clip[t][:, (ys + y0) % size, (xs + x0) % size] = color[:, None]
    return clip


def generate_synthetic(profile: DatasetProfile = SYNTHETIC_PROFILE, clips_per_combo: int = 8,
                       rng_seed: int = 0, frames: int = CLIP_FRAMES,
                       start_jitter: int = START_JITTER) -> LabeledCorpus:
    """Every (motion, content) combination rendered ``clips_per_combo`` times.

    The sprite starts centred, offset by up to ``start_jitter`` px on each
    axis, and moves 1 or 2 px/frame.
    """
    if (profile.n_motion, profile.n_content) != (4, 4) or profile.channels != 3 or profile.height != profile.width:
        raise InvalidInputError("synthetic corpus needs the 4x4-class square RGB profile")
    rng = np.random.default_rng(rng_seed)
    size = profile.height
    clips, labels = [], []
    for m in range(profile.n_motion):
        for c in range(profile.n_content):
            for _ in range(clips_per_combo):
                centre = (size - SPRITES.shape[1]) // 2
                start = tuple(centre + int(j) for j in rng.integers(-start_jitter, start_jitter + 1, size=2))
                speed = int(rng.integers(1, 3))
                clips.append(render_clip(c, m, start, speed, frames, size))
                labels.append((m, c))
    if not clips:
        return LabeledCorpus.empty(profile, frames)
    return LabeledCorpus(bytes_to_unit(np.stack(clips)), np.array(labels), profile)


def _circular_position(weights: np.ndarray, axis: int, size: int) -> float:
    angles = 2 * np.pi * np.arange(size) / size
    profile_ = weights.sum(axis=axis)
    s, c = (profile_ * np.sin(angles)).sum(), (profile_ * np.cos(angles)).sum()
    return float(np.arctan2(s, c) * size / (2 * np.pi))


def oracle_label(clip: np.ndarray) -> LabelPair:
    """Recover (motion, content) of a synthetic clip ``[T, 3, H, W]`` in [-1, 1].

    Content from the dominant RGB pattern of foreground pixels; motion from the
    summed wrap-aware centroid displacement.
    """
    clip = np.asarray(clip, dtype=np.float32)
    on = clip > 0.0
    fg = on.any(axis=1)
    if not fg.any():
        return LabelPair(0, 0)
    patterns = on.transpose(0, 2, 3, 1)[fg].astype(int)
    reference = (SYNTHETIC_COLORS > 0).astype(int)
    votes = [(patterns == ref).all(axis=1).sum() for ref in reference]
    content = int(np.argmax(votes))

    size = clip.shape[-1]
    T = clip.shape[0]
    weights = fg.astype(np.float64)
    ys = np.array([_circular_position(weights[t], 1, size) for t in range(T)])
    xs = np.array([_circular_position(weights[t], 0, size) for t in range(T)])
    wrap = lambda d: (d + size / 2) % size - size / 2  # noqa: E731
    dy, dx = wrap(np.diff(ys)).sum(), wrap(np.diff(xs)).sum()
    if abs(dy) >= abs(dx):
        motion = 0 if dy < 0 else 1
    else:
        motion = 2 if dx < 0 else 3
    return LabelPair(motion, content)


# ---------------------------------------------------------------------------
# clip-directory interchange: <root>/<motion>/<content>/<clip-id>/frame_%04d.png
# ---------------------------------------------------------------------------


def temporal_indices(n_source: int, n_target: int = CLIP_FRAMES) -> list[int]:
    if n_source < n_target:
        raise InvalidInputError(f"source has {n_source} frames, need at least {n_target}")
    stride = n_source // n_target
    return [i * stride for i in range(n_target)]


def write_corpus(corpus: LabeledCorpus, root: str | Path) -> Path:
    root = Path(root)
    prof = corpus.profile
    counters: dict[tuple[int, int], int] = {}
    for clip, (m, c) in zip(corpus.frames, corpus.labels):
        key = (int(m), int(c))
        idx = counters.get(key, 0)
        counters[key] = idx + 1
        clip_dir = root / prof.motion_names[m] / prof.content_names[c] / f"{idx:05d}"
        clip_dir.mkdir(parents=True, exist_ok=True)
        pixels = unit_to_bytes(clip).transpose(0, 2, 3, 1)
        for t, frame in enumerate(pixels):
            Image.fromarray(frame, "RGB").save(clip_dir / FRAME_PATTERN.format(t))
    return root


def _load_frame(path: Path, size: tuple[int, int]) -> np.ndarray:
    with Image.open(path) as img:
        img = img.convert("RGB")
        if img.size != (size[1], size[0]):
            img = img.resize((size[1], size[0]), Image.BILINEAR)
        return np.asarray(img, dtype=np.uint8)


def ingest_clip_directory(root: str | Path, profile: DatasetProfile, frames: int = CLIP_FRAMES,
                          discover_names: bool | None = None) -> LabeledCorpus:
    """Load every clip under ``root`` into a corpus shaped for ``profile``.

    Class names come from the profile, or from the directory (sorted) when
    ``discover_names`` is set; the real-data profiles discover by default
    because their class subsets are not fixed. Clips with unreadable frames are
    skipped and counted in ``LabeledCorpus.skipped``.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"{root}: not a directory")
    if discover_names is None:
        discover_names = profile.name != "synthetic"
    motion_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not motion_dirs:
        raise DataError(f"{root}: no <motion>/<content>/<clip> directories found")
    if discover_names:
        content_names = sorted({p.name for m in motion_dirs for p in m.iterdir() if p.is_dir()})
        motion_names = [p.name for p in motion_dirs]
        if len(motion_names) != profile.n_motion or len(content_names) != profile.n_content:
            raise DataError(
                f"{root}: found {len(motion_names)} motion / {len(content_names)} content classes, "
                f"profile {profile.name} needs {profile.n_motion} / {profile.n_content}"
            )
        profile = DatasetProfile(profile.name, profile.channels, profile.height, profile.width,
                                 tuple(motion_names), tuple(content_names))

    clips, labels, skipped = [], [], 0
    for m_dir in motion_dirs:
        m = profile.motion_id(m_dir.name) if m_dir.name in profile.motion_names else None
        if m is None:
            raise DataError(f"{m_dir}: unknown motion class {m_dir.name!r}")
        for c_dir in sorted(p for p in m_dir.iterdir() if p.is_dir()):
            if c_dir.name not in profile.content_names:
                raise DataError(f"{c_dir}: unknown content class {c_dir.name!r}")
            c = profile.content_id(c_dir.name)
            for clip_dir in sorted(p for p in c_dir.iterdir() if p.is_dir()):
                paths = sorted(clip_dir.glob("frame_*.png"))
                if len(paths) < frames:
                    raise DataError(f"{clip_dir}: {len(paths)} frames, need at least {frames}")
                try:
                    pixels = np.stack([
                        _load_frame(paths[i], (profile.height, profile.width))
                        for i in temporal_indices(len(paths), frames)
                    ])
                except (OSError, UnidentifiedImageError) as exc:
                    log.warning("skipping %s: %s", clip_dir, exc)
                    skipped += 1
                    continue
                clip = bytes_to_unit(pixels.transpose(0, 3, 1, 2)[:, : profile.channels])
                if clip.shape != (frames, *profile.image_shape):
                    raise DataError(f"{clip_dir}: processed clip has shape {clip.shape}")
                clips.append(clip)
                labels.append((m, c))
    if not clips:
        corpus = LabeledCorpus.empty(profile, frames)
    else:
        corpus = LabeledCorpus(np.stack(clips), np.array(labels), profile)
    corpus.skipped = skipped
    return corpus
