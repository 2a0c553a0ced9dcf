"""Shared domain types, configuration, label encoding and seeded randomness."""

from __future__ import annotations

import configparser
import dataclasses
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np


class InvalidInputError(ValueError):
    """Raised when an operation receives arguments outside its contract."""


# ---------------------------------------------------------------------------
# labels and clips
# ---------------------------------------------------------------------------


class LabelPair(NamedTuple):
    motion: int
    content: int

    def validate(self, n_motion: int, n_content: int) -> "LabelPair":
        if not (0 <= self.motion < n_motion):
            raise InvalidInputError(f"motion id {self.motion} outside [0, {n_motion})")
        if not (0 <= self.content < n_content):
            raise InvalidInputError(f"content id {self.content} outside [0, {n_content})")
        return self


@dataclass(frozen=True)
class VideoClip:
    """A clip of ``frame_count`` frames stored as ``[T, channels, height, width]`` in [-1, 1]."""

    frames: np.ndarray

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float32)
        if frames.ndim != 4:
            raise InvalidInputError(f"clip must be [T, ch, H, W], got shape {frames.shape}")
        if frames.shape[0] < 1:
            raise InvalidInputError("clip has no frames")
        if frames.size and (frames.min() < -1.0 or frames.max() > 1.0):
            raise InvalidInputError("clip values must lie in [-1, 1]")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)

    @property
    def frame_count(self) -> int:
        return int(self.frames.shape[0])

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return tuple(self.frames.shape)

    def check(self, frame_count: int, image_shape: tuple[int, int, int]) -> "VideoClip":
        if self.frame_count != frame_count:
            raise InvalidInputError(f"expected {frame_count} frames, got {self.frame_count}")
        if tuple(self.frames.shape[1:]) != tuple(image_shape):
            raise InvalidInputError(f"expected frame shape {image_shape}, got {self.frames.shape[1:]}")
        return self


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetProfile:
    name: str
    channels: int
    height: int
    width: int
    motion_names: tuple[str, ...]
    content_names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "motion_names", tuple(self.motion_names))
        object.__setattr__(self, "content_names", tuple(self.content_names))
        if min(self.channels, self.height, self.width) <= 0:
            raise InvalidInputError("image dimensions must be positive")
        if not self.motion_names or not self.content_names:
            raise InvalidInputError("profile needs at least one motion and one content class")
        if len(set(self.motion_names)) != len(self.motion_names):
            raise InvalidInputError("duplicate motion class names")
        if len(set(self.content_names)) != len(self.content_names):
            raise InvalidInputError("duplicate content class names")

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)

    @property
    def n_motion(self) -> int:
        return len(self.motion_names)

    @property
    def n_content(self) -> int:
        return len(self.content_names)

    def motion_id(self, name: str) -> int:
        try:
            return self.motion_names.index(name)
        except ValueError:
            raise InvalidInputError(
                f"unknown motion class {name!r}; valid names: {', '.join(self.motion_names)}"
            ) from None

    def content_id(self, name: str) -> int:
        try:
            return self.content_names.index(name)
        except ValueError:
            raise InvalidInputError(
                f"unknown content class {name!r}; valid names: {', '.join(self.content_names)}"
            ) from None


SYNTHETIC_PROFILE = DatasetProfile(
    name="synthetic",
    channels=3,
    height=32,
    width=32,
    motion_names=("up", "down", "left", "right"),
    content_names=("red-square", "green-circle", "blue-triangle", "yellow-cross"),
)

# Real-corpus profiles fix the frame size; class names are taken from the clip
# directory at ingestion time because the source subsets are not named.
WEIZMANN_PROFILE = DatasetProfile(
    name="weizmann",
    channels=3,
    height=64,
    width=64,
    motion_names=tuple(f"action{i}" for i in range(4)),
    content_names=tuple(f"person{i}" for i in range(9)),
)

MUG_PROFILE = DatasetProfile(
    name="mug",
    channels=3,
    height=96,
    width=96,
    motion_names=tuple(f"expression{i}" for i in range(4)),
    content_names=tuple(f"subject{i}" for i in range(9)),
)

PROFILES = {p.name: p for p in (SYNTHETIC_PROFILE, WEIZMANN_PROFILE, MUG_PROFILE)}


@dataclass(frozen=True)
class ModelConfig:
    frames: int = 16
    n_motion: int = 4
    n_content: int = 4
    dim_content: int = 30
    dim_motion: int = 30
    channels: int = 3
    height: int = 32
    width: int = 32
    learning_rate: float = 2e-4
    betas: tuple[float, float] = (0.5, 0.999)
    batch_size: int = 32
    d_steps_per_g_step: int = 1
    steps: int = 4000
    gen_features: int = 32
    critic_features: int = 16
    power_iterations: int = 1

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        ints = {
            "frames": self.frames,
            "n_motion": self.n_motion,
            "n_content": self.n_content,
            "dim_content": self.dim_content,
            "dim_motion": self.dim_motion,
            "channels": self.channels,
            "height": self.height,
            "width": self.width,
            "batch_size": self.batch_size,
            "d_steps_per_g_step": self.d_steps_per_g_step,
            "gen_features": self.gen_features,
            "critic_features": self.critic_features,
            "power_iterations": self.power_iterations,
        }
        for key, value in ints.items():
            if int(value) <= 0:
                raise InvalidInputError(f"{key} must be positive, got {value}")
        if self.steps < 0:
            raise InvalidInputError("steps must be non-negative")
        if not self.learning_rate > 0:
            raise InvalidInputError("learning_rate must be > 0")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise InvalidInputError(f"betas must be two values in [0, 1), got {self.betas}")

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)

    @classmethod
    def for_profile(cls, profile: DatasetProfile, **overrides) -> "ModelConfig":
        base = dict(
            n_motion=profile.n_motion,
            n_content=profile.n_content,
            channels=profile.channels,
            height=profile.height,
            width=profile.width,
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# Config file: INI text with a [model] and a [dataset] section. Every key is
# optional; a missing key keeps its default. Example:
#
#   [model]
#   frames = 16
#   learning_rate = 2e-4
#   betas = 0.5, 0.999
#
#   [dataset]
#   profile = synthetic
#   motion_names = up, down, left, right

_FLOAT_KEYS = {"learning_rate"}


def load_config(path: str | Path) -> tuple[ModelConfig, DatasetProfile]:
    parser = configparser.ConfigParser()
    with open(path) as fh:
        parser.read_file(fh)
    data = parser["dataset"] if parser.has_section("dataset") else {}
    profile = PROFILES[data.get("profile", "synthetic")]
    updates = {}
    for key in ("channels", "height", "width"):
        if key in data:
            updates[key] = int(data[key])
    for key in ("motion_names", "content_names"):
        if key in data:
            updates[key] = tuple(s.strip() for s in data[key].split(",") if s.strip())
    if updates:
        profile = dataclasses.replace(profile, **updates)

    overrides: dict = {}
    if parser.has_section("model"):
        fields = {f.name for f in dataclasses.fields(ModelConfig)}
        for key, raw in parser["model"].items():
            if key not in fields:
                raise InvalidInputError(f"unknown model config key {key!r}")
            if key == "betas":
                overrides[key] = tuple(float(s) for s in raw.split(","))
            elif key in _FLOAT_KEYS:
                overrides[key] = float(raw)
            else:
                overrides[key] = int(raw)
    return ModelConfig.for_profile(profile, **overrides), profile


def dump_config(config: ModelConfig, profile: DatasetProfile) -> str:
    lines = ["[model]"]
    for key, value in config.to_dict().items():
        if key == "betas":
            value = ", ".join(repr(b) for b in value)
        lines.append(f"{key} = {value}")
    lines += [
        "",
        "[dataset]",
        f"profile = {profile.name}",
        f"channels = {profile.channels}",
        f"height = {profile.height}",
        f"width = {profile.width}",
        f"motion_names = {', '.join(profile.motion_names)}",
        f"content_names = {', '.join(profile.content_names)}",
        "",
    ]
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# encoding and randomness
# ---------------------------------------------------------------------------


def one_hot(index: int, size: int) -> np.ndarray:
    if size < 1 or not (0 <= index < size):
        raise InvalidInputError(f"class id {index} outside [0, {size})")
    vec = np.zeros(size, dtype=np.float32)
    vec[index] = 1.0
    return vec


def derive_seed(global_seed: int, component: str) -> int:
    """Per-component seed: ``SeedSequence([global_seed, crc32(component)])``, first 32-bit word.

    The rule is fixed so that a run is replayable from its global seed alone.
    """
    ss = np.random.SeedSequence([int(global_seed), zlib.crc32(component.encode())])
    return int(ss.generate_state(1)[0])


@dataclass(frozen=True)
class LatentSeed:
    eps_c: np.ndarray
    eps_m: np.ndarray
    labels: LabelPair
    rng_seed: int = field(default=0)

    @property
    def frames(self) -> int:
        return int(self.eps_m.shape[0])


def sample_seed(config: ModelConfig, labels: LabelPair, rng_seed: int) -> LatentSeed:
    """Draw the content noise and the per-frame motion noise for one video."""
    labels = LabelPair(*labels).validate(config.n_motion, config.n_content)
    rng = np.random.default_rng(int(rng_seed))
    eps_c = rng.standard_normal(config.dim_content).astype(np.float32)
    eps_m = rng.standard_normal((config.frames, config.dim_motion)).astype(np.float32)
    eps_c.setflags(write=False)
    eps_m.setflags(write=False)
    return LatentSeed(eps_c=eps_c, eps_m=eps_m, labels=labels, rng_seed=int(rng_seed))
