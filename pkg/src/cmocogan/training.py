"""Adversarial training of the conditional video GAN, checkpoints and run callbacks."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol

import numpy as np
import torch
import torch.nn.functional as F

from .core import DatasetProfile, ModelConfig, derive_seed
from .datasets import ComboSampler, LabeledCorpus, SplitSpec
from .discriminators import (
    FrameCritic,
    VideoCritic,
    condition_frame,
    condition_video,
    frozen_state,
    sample_frames,
)
from .generator import VideoGenerator

log = logging.getLogger(__name__)

SCORE_EPS = 1e-7
CHECKPOINT_FORMAT = "cmocogan-checkpoint"
CHECKPOINT_VERSION = 1


class NonFiniteLossError(FloatingPointError):
    def __init__(self, message: str, report: "LossReport | None" = None, snapshot: Path | None = None):
        super().__init__(message)
        self.report = report
        self.snapshot = snapshot


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def discriminator_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    """``-mean(log D(x)) - mean(log(1 - D(x~)))`` on probabilities."""
    real = torch.as_tensor(real_scores).clamp(SCORE_EPS, 1 - SCORE_EPS)
    fake = torch.as_tensor(fake_scores).clamp(SCORE_EPS, 1 - SCORE_EPS)
    return -torch.log(real).mean() - torch.log1p(-fake).mean()


def generator_loss(fake_scores_image: torch.Tensor, fake_scores_video: torch.Tensor) -> torch.Tensor:
    """Non-saturating form: ``-mean(log D_I(x~)) - mean(log D_V(x~))``."""
    image = torch.as_tensor(fake_scores_image).clamp(SCORE_EPS, 1 - SCORE_EPS)
    video = torch.as_tensor(fake_scores_video).clamp(SCORE_EPS, 1 - SCORE_EPS)
    return -torch.log(image).mean() - torch.log(video).mean()


def discriminator_loss_from_logits(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    """Same value as ``discriminator_loss(sigmoid(real), sigmoid(fake))`` without the clamp.

    ``-log(sigmoid(l)) = softplus(-l)`` and ``-log(1 - sigmoid(l)) = softplus(l)`` keep
    gradients alive when a critic saturates.
    """
    return F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean()


def generator_loss_from_logits(image_logits: torch.Tensor, video_logits: torch.Tensor) -> torch.Tensor:
    return F.softplus(-image_logits).mean() + F.softplus(-video_logits).mean()


# ---------------------------------------------------------------------------
# state
# ---------------------------------------------------------------------------


@dataclass
class LossReport:
    step: int
    d_loss_image: float
    d_loss_video: float
    g_loss: float
    real_image_score: float
    fake_image_score: float
    real_video_score: float
    fake_video_score: float

    FIELDS = (
        "step", "d_loss_image", "d_loss_video", "g_loss",
        "real_image_score", "fake_image_score", "real_video_score", "fake_video_score",
    )

    def is_finite(self) -> bool:
        return all(math.isfinite(getattr(self, f)) for f in self.FIELDS[1:])

    def as_row(self) -> list:
        return [getattr(self, f) for f in self.FIELDS]


@dataclass
class TrainState:
    config: ModelConfig
    generator: VideoGenerator
    frame_critic: FrameCritic
    video_critic: VideoCritic
    opt_g: torch.optim.Adam
    opt_d: torch.optim.Adam
    split: SplitSpec
    seed: int
    step: int = 0
    torch_rng: torch.Generator | None = None
    data_rng: np.random.Generator | None = None
    profile: DatasetProfile | None = None

    def modules(self) -> dict[str, torch.nn.Module]:
        return {"generator": self.generator, "frame_critic": self.frame_critic, "video_critic": self.video_critic}

    def critic_parameters(self):
        return list(self.frame_critic.parameters()) + list(self.video_critic.parameters())


def build_state(config: ModelConfig, split: SplitSpec, seed: int = 0,
                profile: DatasetProfile | None = None) -> TrainState:
    if (split.n_motion, split.n_content) != (config.n_motion, config.n_content):
        raise ValueError("split class counts do not match the model config")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(seed, "init"))
        gen = VideoGenerator(config)
        fc = FrameCritic(config.channels, config.n_content, config.height, config.critic_features,
                         iterations=config.power_iterations)
        vc = VideoCritic(config.channels, config.n_motion, config.frames, config.height,
                         config.critic_features, iterations=config.power_iterations)
    opt_g = torch.optim.Adam(gen.parameters(), lr=config.learning_rate, betas=config.betas)
    opt_d = torch.optim.Adam(list(fc.parameters()) + list(vc.parameters()),
                             lr=config.learning_rate, betas=config.betas)
    torch_rng = torch.Generator().manual_seed(derive_seed(seed, "train"))
    data_rng = np.random.default_rng(derive_seed(seed, "data"))
    return TrainState(config, gen, fc, vc, opt_g, opt_d, split, seed, 0, torch_rng, data_rng, profile)


def parameter_hash(*modules: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for module in modules:
        for name, tensor in module.state_dict().items():
            h.update(name.encode())
            h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# one step
# ---------------------------------------------------------------------------


def sample_real_batch(corpus: LabeledCorpus, batch_size: int, rng: np.random.Generator):
    idx = rng.integers(0, len(corpus), size=batch_size)
    return torch.from_numpy(corpus.frames[idx]), torch.from_numpy(corpus.labels[idx])


def _one_hots(labels: torch.Tensor, config: ModelConfig):
    y_m = F.one_hot(labels[:, 0].long(), config.n_motion).float()
    y_c = F.one_hot(labels[:, 1].long(), config.n_content).float()
    return y_m, y_c


def _critic_logits(state: TrainState, videos, y_m, y_c):
    frames = sample_frames(videos, state.torch_rng)
    image = state.frame_critic(condition_frame(frames, y_c))
    video = state.video_critic(condition_video(videos, y_m))
    return image, video


def _fake_batch(state: TrainState, batch_size: int, sampler: ComboSampler):
    labels = torch.from_numpy(sampler.sample(batch_size, state.data_rng))
    latents = state.generator.sample_latents(labels, state.torch_rng)
    eps_c, y_c, eps_m, y_m = latents
    return state.generator(eps_c, y_c, eps_m, y_m), y_m, y_c


def train_step(state: TrainState, real_batch: tuple[torch.Tensor, torch.Tensor]) -> tuple[TrainState, LossReport]:
    """``d_steps_per_g_step`` critic updates on ``real_batch``, then one generator update.

    Each loss is checked before its optimizer step; a non-finite value raises
    NonFiniteLossError and leaves ``state.step`` unchanged.
    """
    cfg = state.config
    real, real_labels = real_batch
    real = real.float()
    y_m_real, y_c_real = _one_hots(real_labels, cfg)
    B = real.shape[0]
    sampler = ComboSampler(state.split)
    state.generator.train()
    state.frame_critic.train()
    state.video_critic.train()

    for _ in range(cfg.d_steps_per_g_step):
        with torch.no_grad():
            fake, y_m_fake, y_c_fake = _fake_batch(state, B, sampler)
        real_image, real_video = _critic_logits(state, real, y_m_real, y_c_real)
        fake_image, fake_video = _critic_logits(state, fake, y_m_fake, y_c_fake)
        d_image = discriminator_loss_from_logits(real_image, fake_image)
        d_video = discriminator_loss_from_logits(real_video, fake_video)
        if not torch.isfinite(d_image + d_video):
            raise NonFiniteLossError(f"non-finite critic loss at step {state.step + 1}",
                                     _report(state.step + 1, d_image, d_video, d_image, real_image,
                                             fake_image, real_video, fake_video))
        state.opt_d.zero_grad(set_to_none=True)
        (d_image + d_video).backward()
        state.opt_d.step()

    with frozen_state(state.frame_critic), frozen_state(state.video_critic):
        fake, y_m_fake, y_c_fake = _fake_batch(state, B, sampler)
        g_image, g_video = _critic_logits(state, fake, y_m_fake, y_c_fake)
        g_loss = generator_loss_from_logits(g_image, g_video)
        if not torch.isfinite(g_loss):
            raise NonFiniteLossError(f"non-finite generator loss at step {state.step + 1}",
                                     _report(state.step + 1, d_image, d_video, g_loss, real_image,
                                             fake_image, real_video, fake_video))
        state.opt_g.zero_grad(set_to_none=True)
        g_loss.backward()
        state.opt_g.step()
    state.opt_d.zero_grad(set_to_none=True)

    state.step += 1
    return state, _report(state.step, d_image, d_video, g_loss, real_image, fake_image, real_video, fake_video)


def _report(step, d_image, d_video, g_loss, real_image, fake_image, real_video, fake_video) -> LossReport:
    return LossReport(
        step=step,
        d_loss_image=d_image.item(),
        d_loss_video=d_video.item(),
        g_loss=g_loss.item(),
        real_image_score=torch.sigmoid(real_image).mean().item(),
        fake_image_score=torch.sigmoid(fake_image).mean().item(),
        real_video_score=torch.sigmoid(real_video).mean().item(),
        fake_video_score=torch.sigmoid(fake_video).mean().item(),
    )


# ---------------------------------------------------------------------------
# loop and callbacks
# ---------------------------------------------------------------------------


class Callback(Protocol):
    def on_step(self, state: TrainState, report: LossReport) -> None: ...


class MetricsLog:
    """Append-only CSV of every step's LossReport."""

    def __init__(self, path: str | Path, every: int = 1):
        self.path = Path(path)
        self.every = every
        if not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(LossReport.FIELDS)

    def on_step(self, state, report):
        if report.step % self.every == 0:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow(report.as_row())


class PeriodicCheckpoint:
    def __init__(self, directory: str | Path, every: int):
        self.directory = Path(directory)
        self.every = every

    def on_step(self, state, report):
        if state.step % self.every == 0 or state.step == state.config.steps:
            self.directory.mkdir(parents=True, exist_ok=True)
            save_checkpoint(state, self.directory / f"step_{state.step:06d}.ckpt")
            save_checkpoint(state, self.directory / "latest.ckpt")


class ProgressLog:
    def __init__(self, every: int = 100):
        self.every = every

    def on_step(self, state, report):
        if report.step % self.every == 0:
            log.info(
                "step %d  d_img %.3f  d_vid %.3f  g %.3f",
                report.step, report.d_loss_image, report.d_loss_video, report.g_loss,
            )


def train_loop(state: TrainState, corpus: LabeledCorpus, callbacks: Iterable[Callback] = (),
               steps: int | None = None, diagnostics_dir: str | Path | None = None) -> TrainState:
    """Train until ``state.step`` reaches ``steps`` (default: ``config.steps``).

    The corpus must already be restricted to the training split. On a
    non-finite loss the pre-step state is written to ``diagnostics_dir``.
    """
    target = state.config.steps if steps is None else steps
    callbacks = list(callbacks)
    heldout = set(state.split.heldout_combos)
    if heldout & corpus.combos():
        raise ValueError("training corpus contains held-out combinations")
    if state.step < target and len(corpus) == 0:
        raise ValueError("training corpus is empty")
    while state.step < target:
        batch = sample_real_batch(corpus, state.config.batch_size, state.data_rng)
        try:
            state, report = train_step(state, batch)
        except NonFiniteLossError as exc:
            if diagnostics_dir is not None:
                out = Path(diagnostics_dir)
                out.mkdir(parents=True, exist_ok=True)
                exc.snapshot = save_checkpoint(state, out / f"abort_step_{state.step:06d}.ckpt")
                (out / "abort.json").write_text(json.dumps(dataclasses.asdict(exc.report), indent=2))
            raise
        for cb in callbacks:
            cb.on_step(state, report)
    return state


# ---------------------------------------------------------------------------
# checkpoint container
#
# A zip archive holding ``manifest.json`` and one raw little-endian blob per
# tensor under ``tensors/``. The manifest records format/version, step, seed,
# config, profile, split, tensor names/shapes/dtypes, optimizer hyper-parameters
# and both rng states.
# ---------------------------------------------------------------------------

_DTYPES = {torch.float32: "<f4", torch.int64: "<i8", torch.uint8: "|u1"}
_TORCH_DTYPES = {v: k for k, v in _DTYPES.items()}


def _tensor_blob(t: torch.Tensor) -> tuple[bytes, str]:
    t = t.detach().cpu().contiguous()
    if t.dtype not in _DTYPES:
        t = t.float()
    code = _DTYPES[t.dtype]
    return t.numpy().astype(np.dtype(code), copy=False).tobytes(), code


def _optimizer_tensors(opt: torch.optim.Optimizer, prefix: str) -> dict[str, torch.Tensor]:
    out = {}
    sd = opt.state_dict()
    for idx, pstate in sd["state"].items():
        for key, value in pstate.items():
            out[f"{prefix}/{idx}/{key}"] = torch.as_tensor(value)
    return out


def save_checkpoint(state: TrainState, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors: dict[str, torch.Tensor] = {}
    for prefix, module in state.modules().items():
        for key, t in module.state_dict().items():
            tensors[f"{prefix}/{key}"] = t
    tensors.update(_optimizer_tensors(state.opt_g, "opt_g"))
    tensors.update(_optimizer_tensors(state.opt_d, "opt_d"))
    if state.torch_rng is not None:
        tensors["rng/torch"] = state.torch_rng.get_state()

    entries = []
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", zipfile.ZIP_STORED) as zf:
        for name, t in tensors.items():
            blob, code = _tensor_blob(t)
            zf.writestr(f"tensors/{name}.bin", blob)
            entries.append({"name": name, "shape": list(t.shape), "dtype": code})
        manifest = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "step": state.step,
            "seed": state.seed,
            "config": state.config.to_dict(),
            "profile": dataclasses.asdict(state.profile) if state.profile else None,
            "split": json.loads(state.split.to_json()),
            "optimizers": {
                "opt_g": state.opt_g.state_dict()["param_groups"],
                "opt_d": state.opt_d.state_dict()["param_groups"],
            },
            "rng": {"data": state.data_rng.bit_generator.state if state.data_rng else None},
            "tensors": entries,
        }
        zf.writestr("manifest.json", json.dumps(manifest, indent=1))
    tmp.replace(path)
    return path


def read_manifest(path: str | Path) -> dict:
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {manifest.get('version')}")
    return manifest


def load_checkpoint(path: str | Path) -> TrainState:
    manifest = read_manifest(path)
    config = ModelConfig.from_dict(manifest["config"])
    split = SplitSpec.from_json(json.dumps(manifest["split"]))
    profile = DatasetProfile(**manifest["profile"]) if manifest.get("profile") else None
    state = build_state(config, split, manifest["seed"], profile)
    state.step = manifest["step"]

    tensors = {}
    with zipfile.ZipFile(path) as zf:
        for entry in manifest["tensors"]:
            raw = zf.read(f"tensors/{entry['name']}.bin")
            arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
            tensors[entry["name"]] = torch.from_numpy(arr)

    for prefix, module in state.modules().items():
        sd = {k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + "/")}
        module.load_state_dict(sd)
    for name, opt in (("opt_g", state.opt_g), ("opt_d", state.opt_d)):
        per_param: dict[int, dict] = {}
        for key, value in tensors.items():
            if key.startswith(name + "/"):
                _, idx, field = key.split("/")
                per_param.setdefault(int(idx), {})[field] = value
        opt.load_state_dict({"state": per_param, "param_groups": manifest["optimizers"][name]})
    if "rng/torch" in tensors:
        state.torch_rng.set_state(tensors["rng/torch"])
    if manifest["rng"].get("data"):
        state.data_rng.bit_generator.state = manifest["rng"]["data"]
    return state
