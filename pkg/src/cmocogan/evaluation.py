"""Video FID, the motion/content/joint classifiers and class-balance reports."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import DatasetProfile, InvalidInputError, VideoClip
from .datasets import LabeledCorpus, SplitSpec

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Frechet distance
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if cov.shape != (mean.size, mean.size):
            raise InvalidInputError(f"covariance {cov.shape} does not match mean of length {mean.size}")
        if np.abs(cov - cov.T).max(initial=0.0) > 1e-8:
            raise InvalidInputError("covariance is not symmetric")
        if mean.size and np.linalg.eigvalsh(cov).min() < -1e-6:
            raise InvalidInputError("covariance is not positive semi-definite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size


def gaussian_stats(features) -> GaussianStats:
    """Sample mean and unbiased (n - 1) covariance of ``[n, d]`` features."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 2:
        raise InvalidInputError("need at least two feature vectors")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (x.shape[0] - 1)
    return GaussianStats(mean, (cov + cov.T) / 2)


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((mat + mat.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))``.

    The trace of the product's square root is taken from the eigenvalues of the
    symmetric matrix ``S_a^(1/2) S_b S_a^(1/2)``, which share the spectrum of
    ``S_a S_b``; small negative eigenvalues are clamped at zero.
    """
    if a.dim != b.dim:
        raise InvalidInputError(f"dimension mismatch: {a.dim} vs {b.dim}")
    diff = a.mean - b.mean
    root_a = _psd_sqrt(a.cov)
    inner = root_a @ b.cov @ root_a
    eig = np.linalg.eigvalsh((inner + inner.T) / 2)
    tr_sqrt = np.sqrt(np.clip(eig, 0.0, None)).sum()
    value = diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * tr_sqrt
    return float(max(value, 0.0))


# ---------------------------------------------------------------------------
# classifiers
# ---------------------------------------------------------------------------


class ClassifierSuite(nn.Module):
    """Shared 3-D conv trunk with motion, content and joint (M*C) heads.

    Input clips are ``[B, T, ch, H, W]`` in [-1, 1]; the joint class of
    ``(m, c)`` is ``m * C + c``.
    """

    def __init__(self, channels: int, n_motion: int, n_content: int, features: int = 16):
        super().__init__()
        self.channels = channels
        self.n_motion = n_motion
        self.n_content = n_content
        f = features
        # input is each frame plus its forward difference; 5x5 first layer and
        # spatial-only pooling keep 2 px/frame motion within one kernel
        self.trunk = nn.Sequential(
            nn.Conv3d(2 * channels, f, (3, 5, 5), padding=(1, 2, 2)), nn.ReLU(True), nn.MaxPool3d((1, 2, 2)),
            nn.Conv3d(f, 2 * f, 3, padding=1), nn.ReLU(True), nn.MaxPool3d(2),
            nn.Conv3d(2 * f, 4 * f, 3, padding=1), nn.ReLU(True),
            nn.AdaptiveAvgPool3d(1), nn.Flatten(),
        )
        self.feature_dim = 4 * f
        self.head_m = nn.Linear(self.feature_dim, n_motion)
        self.head_c = nn.Linear(self.feature_dim, n_content)
        self.head_d = nn.Linear(self.feature_dim, n_motion * n_content)

    def features(self, clips: torch.Tensor) -> torch.Tensor:
        x = clips.transpose(1, 2)
        diff = torch.diff(x, dim=2, append=x[:, :, -1:])
        return self.trunk(torch.cat([x, diff], dim=1))

    def forward(self, clips: torch.Tensor):
        h = self.features(clips)
        return self.head_m(h), self.head_c(h), self.head_d(h)

    @torch.no_grad()
    def predict_proba(self, clips, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        was_training = self.training
        self.eval()
        outs = [[], [], []]
        try:
            for chunk in _batches(clips, batch_size):
                for i, logits in enumerate(self(chunk)):
                    outs[i].append(F.softmax(logits.double(), dim=1).numpy())
        finally:
            self.train(was_training)
        return tuple(np.concatenate(o) for o in outs)


def _as_array(clips) -> np.ndarray:
    if isinstance(clips, LabeledCorpus):
        return clips.frames
    if isinstance(clips, np.ndarray):
        return clips.astype(np.float32, copy=False)
    return np.stack([c.frames if isinstance(c, VideoClip) else np.asarray(c) for c in clips]).astype(np.float32)


def _batches(clips, batch_size: int):
    arr = _as_array(clips)
    for start in range(0, len(arr), batch_size):
        yield torch.from_numpy(np.ascontiguousarray(arr[start:start + batch_size]))


@dataclass
class ClassifierTrainingConfig:
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 1e-3
    features: int = 16
    noise_std: float = 0.1
    val_fraction: float = 0.1
    target_accuracy: float = 0.99
    seed: int = 0


class ClassifierTrainingError(RuntimeError):
    def __init__(self, message: str, accuracy: dict[str, float]):
        super().__init__(message)
        self.accuracy = accuracy


def head_accuracies(suite: ClassifierSuite, corpus: LabeledCorpus) -> dict[str, float]:
    pm, pc, pd = suite.predict_proba(corpus)
    m, c = corpus.labels[:, 0], corpus.labels[:, 1]
    return {
        "motion": float((pm.argmax(1) == m).mean()),
        "content": float((pc.argmax(1) == c).mean()),
        "joint": float((pd.argmax(1) == m * suite.n_content + c).mean()),
    }


def train_classifiers(corpus: LabeledCorpus, config: ClassifierTrainingConfig | None = None,
                      validation: LabeledCorpus | None = None) -> ClassifierSuite:
    """Fit the three heads on the full (pre-holdout) corpus.

    Training stops once every head reaches ``target_accuracy`` on the
    validation clips (a random ``val_fraction`` of ``corpus`` when none is
    given); running out of epochs first raises ``ClassifierTrainingError``.
    """
    cfg = config or ClassifierTrainingConfig()
    prof = corpus.profile
    M, C = prof.n_motion, prof.n_content
    missing = {(m, c) for m in range(M) for c in range(C)} - corpus.combos()
    if missing:
        raise InvalidInputError(f"classifier corpus lacks combinations {sorted(missing)}")
    rng = np.random.default_rng(cfg.seed)
    if validation is None:
        order = rng.permutation(len(corpus))
        n_val = max(1, int(round(cfg.val_fraction * len(corpus))))
        validation, corpus = corpus.subset(order[:n_val]), corpus.subset(order[n_val:])

    g = torch.Generator().manual_seed(cfg.seed)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        suite = ClassifierSuite(prof.channels, M, C, cfg.features)
    opt = torch.optim.Adam(suite.parameters(), lr=cfg.learning_rate)
    frames = torch.from_numpy(corpus.frames)
    labels = torch.from_numpy(corpus.labels)
    acc = {}
    for epoch in range(cfg.epochs):
        suite.train()
        perm = torch.randperm(len(frames), generator=g)
        for start in range(0, len(perm), cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            x = frames[idx]
            if cfg.noise_std > 0:
                x = (x + cfg.noise_std * torch.randn(x.shape, generator=g)).clamp(-1, 1)
            m, c = labels[idx, 0], labels[idx, 1]
            lm, lc, ld = suite(x)
            loss = F.cross_entropy(lm, m) + F.cross_entropy(lc, c) + F.cross_entropy(ld, m * C + c)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        acc = head_accuracies(suite, validation)
        log.info("classifier epoch %d  val acc %s", epoch + 1, acc)
        if min(acc.values()) >= cfg.target_accuracy:
            suite.eval()
            return suite
    raise ClassifierTrainingError(f"classifiers stopped at {acc} after {cfg.epochs} epochs", acc)


def save_classifiers(suite: ClassifierSuite, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "shape": [suite.channels, suite.n_motion, suite.n_content, suite.head_m.in_features // 4],
            "state_dict": suite.state_dict(),
        },
        path,
    )
    return path


def load_classifiers(path: str | Path) -> ClassifierSuite:
    blob = torch.load(path, weights_only=True)
    suite = ClassifierSuite(*blob["shape"])
    suite.load_state_dict(blob["state_dict"])
    return suite.eval()


# ---------------------------------------------------------------------------
# feature extractors and FID
# ---------------------------------------------------------------------------


class FeatureExtractor(Protocol):
    name: str

    def __call__(self, clips) -> np.ndarray: ...


class TrunkExtractor:
    """Embeds clips with a frozen classifier trunk; ``name`` pins the weights by digest."""

    def __init__(self, suite: ClassifierSuite, batch_size: int = 64):
        self.suite = suite.eval()
        self.batch_size = batch_size
        h = hashlib.sha256()
        for key, t in suite.state_dict().items():
            h.update(key.encode())
            h.update(t.cpu().numpy().tobytes())
        self.name = f"classifier-trunk:{h.hexdigest()[:16]}"

    @torch.no_grad()
    def __call__(self, clips) -> np.ndarray:
        return np.concatenate(
            [self.suite.features(chunk).double().numpy() for chunk in _batches(clips, self.batch_size)]
        )


class CallableExtractor:
    """Adapter for an external embedding network: any ``[N, T, ch, H, W] -> [N, d]`` callable."""

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], name: str):
        self.fn = fn
        self.name = name

    def __call__(self, clips) -> np.ndarray:
        return np.asarray(self.fn(_as_array(clips)), dtype=np.float64)


def compute_fid(real, generated, extractor: FeatureExtractor) -> float:
    """FID between real clips (corpus or clip list) and generated clips under ``extractor``."""
    gen = _as_array(generated)
    if len(gen) < 2:
        raise InvalidInputError("need at least two generated clips")
    return frechet_distance(gaussian_stats(extractor(real)), gaussian_stats(extractor(gen)))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class ClassificationReport:
    acc_m: float
    acc_c: float
    acc_d: float
    acc_mc: float
    heldout: dict[str, float]
    seen: dict[str, float]
    matrix: list[list[float]]
    matrix_joint: list[list[float]]
    combo_accuracy: list[list[float]]
    zero_shot_combos: list[list[int]]
    motion_counts: list[int]
    content_counts: list[int]
    n_clips: int
    fid: float | None = None
    extractor: str | None = None
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _accs(pred_m, pred_c, pred_d, m, c, C, mask) -> dict[str, float]:
    if not mask.any():
        return {"acc_m": float("nan"), "acc_c": float("nan"), "acc_d": float("nan"), "acc_mc": float("nan")}
    return {
        "acc_m": float((pred_m[mask] == m[mask]).mean()),
        "acc_c": float((pred_c[mask] == c[mask]).mean()),
        "acc_d": float((pred_d[mask] == (m * C + c)[mask]).mean()),
        "acc_mc": float(((pred_m == m) & (pred_c == c))[mask].mean()),
    }


def classification_report(suite: ClassifierSuite, clips, labels, split: SplitSpec | None = None) -> ClassificationReport:
    """Score generated clips against their intended (motion, content) labels.

    ``matrix[m][c]`` is the fraction of clips whose motion and content heads
    predict ``(m, c)``; ``matrix_joint`` is the same from the joint head.
    Accuracies are reported over all clips and separately for held-out and
    seen combinations when ``split`` is given.
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1, 2)
    M, C = suite.n_motion, suite.n_content
    pm, pc, pd = suite.predict_proba(clips)
    pred_m, pred_c, pred_d = pm.argmax(1), pc.argmax(1), pd.argmax(1)
    m, c = labels[:, 0], labels[:, 1]
    n = len(labels)

    matrix = np.zeros((M, C))
    np.add.at(matrix, (pred_m, pred_c), 1.0)
    joint = np.zeros(M * C)
    np.add.at(joint, pred_d, 1.0)
    combo_acc = np.full((M, C), np.nan)
    for mm in range(M):
        for cc in range(C):
            sel = (m == mm) & (c == cc)
            if sel.any():
                combo_acc[mm, cc] = ((pred_m == mm) & (pred_c == cc))[sel].mean()

    everything = _accs(pred_m, pred_c, pred_d, m, c, C, np.ones(n, bool))
    if split is not None:
        held = np.array([split.is_heldout(int(a), int(b)) for a, b in labels], dtype=bool)
        zero_shot = [list(x) for x in split.heldout_combos]
    else:
        held = np.zeros(n, bool)
        zero_shot = []
    return ClassificationReport(
        acc_m=everything["acc_m"],
        acc_c=everything["acc_c"],
        acc_d=everything["acc_d"],
        acc_mc=everything["acc_mc"],
        heldout=_accs(pred_m, pred_c, pred_d, m, c, C, held),
        seen=_accs(pred_m, pred_c, pred_d, m, c, C, ~held),
        matrix=(matrix / max(n, 1)).tolist(),
        matrix_joint=(joint.reshape(M, C) / max(n, 1)).tolist(),
        combo_accuracy=combo_acc.tolist(),
        zero_shot_combos=zero_shot,
        motion_counts=np.bincount(pred_m, minlength=M).tolist(),
        content_counts=np.bincount(pred_c, minlength=C).tolist(),
        n_clips=n,
        notes=[
            "acc_d is the joint head; acc_mc requires both single-factor heads to be correct",
            "heldout/seen split the same clips by whether their intended combination was withheld in training",
        ],
    )


def write_report(report: ClassificationReport, out_dir: str | Path, profile: DatasetProfile | None = None) -> dict[str, Path]:
    """Report JSON, the predicted-combination matrix as CSV and a per-head bar chart."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    M, C = len(report.matrix), len(report.matrix[0])
    motion_names = list(profile.motion_names) if profile else [str(i) for i in range(M)]
    content_names = list(profile.content_names) if profile else [str(i) for i in range(C)]

    paths = {"json": out / "report.json", "csv": out / "matrix.csv", "chart": out / "class_balance.png"}
    paths["json"].write_text(json.dumps(report.to_dict(), indent=2, default=_json_default))
    with open(paths["csv"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["motion\\content", *content_names])
        for name, row in zip(motion_names, report.matrix):
            w.writerow([name, *(f"{v:.6f}" for v in row)])
    _bar_chart(report, motion_names, content_names, paths["chart"])
    return paths


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(type(obj))


def _bar_chart(report: ClassificationReport, motion_names, content_names, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
    for ax, counts, names, title in (
        (axes[0], report.motion_counts, motion_names, "motion head"),
        (axes[1], report.content_counts, content_names, "content head"),
    ):
        ax.bar(range(len(counts)), counts)
        ax.set_xticks(range(len(counts)), names, rotation=30, ha="right")
        ax.set_title(title)
        ax.set_ylabel("generated clips")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
