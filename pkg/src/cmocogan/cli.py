"""Command-line entry points: prepare, train, generate, eval, traverse.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path


from .core import (
    PROFILES,
    SYNTHETIC_PROFILE,
    DatasetProfile,
    InvalidInputError,
    LabelPair,
    ModelConfig,
    derive_seed,
    dump_config,
    load_config,
    sample_seed,
)
from .datasets import (
    DataError,
    LabeledCorpus,
    SplitSpec,
    apply_split,
    build_split,
    generate_synthetic,
    ingest_clip_directory,
    write_corpus,
)

log = logging.getLogger("cmocogan")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass
class RunManifest:
    run_dir: str
    profile: dict
    seed: int
    config_path: str = "config.ini"
    split_path: str = "split.json"
    corpus_root: str = "corpus"
    metrics_log: str = "metrics.csv"
    checkpoints: list[str] = field(default_factory=list)
    classifiers: str | None = None
    created: str = ""

    def path(self, rel: str | None) -> Path | None:
        if rel is None:
            return None
        p = Path(rel)
        return p if p.is_absolute() else Path(self.run_dir) / p

    def save(self) -> Path:
        out = Path(self.run_dir) / MANIFEST
        out.write_text(json.dumps(dataclasses.asdict(self), indent=2))
        return out

    @classmethod
    def load(cls, run_dir: str | Path) -> "RunManifest":
        path = Path(run_dir) / MANIFEST
        if not path.exists():
            raise DataError(f"{path}: no run manifest (run `prepare` first)")
        data = json.loads(path.read_text())
        data["run_dir"] = str(Path(run_dir))
        return cls(**data)

    @property
    def dataset_profile(self) -> DatasetProfile:
        return DatasetProfile(**self.profile)


def _load_run(run_dir) -> tuple[RunManifest, ModelConfig, DatasetProfile, SplitSpec]:
    manifest = RunManifest.load(run_dir)
    config, _ = load_config(manifest.path(manifest.config_path))
    split = SplitSpec.from_json(manifest.path(manifest.split_path).read_text())
    return manifest, config, manifest.dataset_profile, split


def _load_corpus(manifest: RunManifest, profile: DatasetProfile, frames: int) -> LabeledCorpus:
    root = manifest.path(manifest.corpus_root)
    corpus = ingest_clip_directory(root, profile, frames, discover_names=False)
    if len(corpus) == 0:
        raise DataError(f"{root}: corpus is empty")
    return corpus


# ---------------------------------------------------------------------------
# prepare
# ---------------------------------------------------------------------------


def cmd_prepare(args) -> int:
    if args.config:
        config, profile = load_config(args.config)
        if args.profile != profile.name:
            profile = PROFILES[args.profile]
            config = ModelConfig.for_profile(profile, **{
                k: v for k, v in config.to_dict().items()
                if k not in ("n_motion", "n_content", "channels", "height", "width")
            })
    else:
        profile = PROFILES[args.profile]
        config = ModelConfig.for_profile(profile)
    if args.steps is not None:
        config = dataclasses.replace(config, steps=args.steps)

    run_dir = Path(args.run_dir) if args.run_dir else Path(args.runs_dir) / f"{time.strftime('%Y%m%d-%H%M%S')}-seed{args.seed}"
    if profile.name == "synthetic":
        corpus = generate_synthetic(profile, args.clips_per_combo, derive_seed(args.seed, "corpus"), config.frames)
        corpus_root = "corpus"
        run_dir.mkdir(parents=True, exist_ok=True)
        write_corpus(corpus, run_dir / corpus_root)
    else:
        if not args.root:
            raise UsageError(f"--root is required for the {profile.name} profile")
        corpus = ingest_clip_directory(args.root, profile, config.frames)
        if len(corpus) == 0:
            raise DataError(f"{args.root}: no readable clips")
        profile = corpus.profile
        corpus_root = str(Path(args.root).resolve())
        run_dir.mkdir(parents=True, exist_ok=True)

    config = ModelConfig.for_profile(profile, **{
        k: v for k, v in config.to_dict().items()
        if k not in ("n_motion", "n_content", "channels", "height", "width")
    })
    split = build_split(profile.n_motion, profile.n_content, args.rule)
    (run_dir / "split.json").write_text(split.to_json())
    (run_dir / "config.ini").write_text(dump_config(config, profile))
    manifest = RunManifest(
        run_dir=str(run_dir),
        profile=dataclasses.asdict(profile),
        seed=args.seed,
        corpus_root=corpus_root,
        created=time.strftime("%Y-%m-%dT%H:%M:%S"),
    )
    manifest.save()
    train, heldout = apply_split(corpus, split)
    print(json.dumps({
        "run_dir": str(run_dir),
        "clips": len(corpus),
        "training_clips": len(train),
        "heldout_combos": [[profile.motion_names[m], profile.content_names[c]] for m, c in heldout],
    }, indent=2))
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


class _SampleGrid:
    """Exports a frame grid with one fixed-seed clip per (motion, content) combination."""

    def __init__(self, directory: Path, every: int, seed: int):
        self.directory = directory
        self.every = every
        self.seed = seed

    def on_step(self, state, report):
        from .generator import generate_videos
        from .media import save_grid

        if state.step % self.every and state.step != state.config.steps:
            return
        cfg = state.config
        seeds = [
            sample_seed(cfg, LabelPair(m, c), derive_seed(self.seed, f"grid/{m}/{c}"))
            for m in range(cfg.n_motion) for c in range(cfg.n_content)
        ]
        self.directory.mkdir(parents=True, exist_ok=True)
        save_grid([v.frames for v in generate_videos(state.generator, seeds)],
                  self.directory / f"step_{state.step:06d}.png")


def cmd_train(args) -> int:
    from .training import (
        MetricsLog,
        PeriodicCheckpoint,
        ProgressLog,
        build_state,
        load_checkpoint,
        train_loop,
    )

    manifest, config, profile, split = _load_run(args.run)
    if args.steps is not None:
        config = dataclasses.replace(config, steps=args.steps)
    corpus = _load_corpus(manifest, profile, config.frames)
    train, _ = apply_split(corpus, split)

    if args.resume:
        state = load_checkpoint(args.resume)
        state.config = dataclasses.replace(state.config, steps=config.steps)
        log.info("resumed from %s at step %d", args.resume, state.step)
    else:
        state = build_state(config, split, manifest.seed, profile)

    run_dir = Path(manifest.run_dir)
    ckpt_dir = run_dir / "checkpoints"
    callbacks = [
        MetricsLog(manifest.path(manifest.metrics_log)),
        PeriodicCheckpoint(ckpt_dir, args.checkpoint_every),
        _SampleGrid(run_dir / "samples", args.sample_every, manifest.seed),
        ProgressLog(args.log_every),
    ]
    if state.step == 0 and config.steps > 0:
        PeriodicCheckpoint(ckpt_dir, 1).on_step(state, None)
    train_loop(state, train, callbacks, diagnostics_dir=run_dir / "diagnostics")

    manifest.checkpoints = sorted(str(p.relative_to(run_dir)) for p in ckpt_dir.glob("step_*.ckpt"))
    manifest.save()
    print(json.dumps({"step": state.step, "checkpoint": str(ckpt_dir / "latest.ckpt")}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# generate / traverse
# ---------------------------------------------------------------------------


def _checkpoint_profile(state, manifest_profile: DatasetProfile | None = None) -> DatasetProfile:
    if state.profile is not None:
        return state.profile
    if manifest_profile is not None:
        return manifest_profile
    return SYNTHETIC_PROFILE


def cmd_generate(args) -> int:
    from .generator import generate_videos
    from .media import save_gif, save_grid
    from .training import load_checkpoint

    state = load_checkpoint(args.checkpoint)
    profile = _checkpoint_profile(state)
    labels = LabelPair(profile.motion_id(args.motion), profile.content_id(args.content))
    zero_shot = state.split.is_heldout(*labels)
    seeds = [sample_seed(state.config, labels, derive_seed(args.seed, f"clip/{i}")) for i in range(args.count)]
    clips = generate_videos(state.generator, seeds)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (seed, clip) in enumerate(zip(seeds, clips)):
        gif = save_gif(clip.frames, out / f"clip_{i:03d}.gif")
        png = save_grid([clip.frames], out / f"clip_{i:03d}.png")
        entries.append({"gif": gif.name, "frames_png": png.name, "rng_seed": seed.rng_seed})
    save_grid([c.frames for c in clips], out / "grid.png")
    metadata = {
        "checkpoint": str(args.checkpoint),
        "step": state.step,
        "motion": args.motion,
        "content": args.content,
        "labels": {"motion": labels.motion, "content": labels.content},
        "zero_shot": zero_shot,
        "seed": args.seed,
        "clips": entries,
    }
    (out / "metadata.json").write_text(json.dumps(metadata, indent=2))
    print(json.dumps({"out": str(out), "count": len(clips), "zero_shot": zero_shot}))
    return EXIT_OK


def cmd_traverse(args) -> int:
    """Rows share either the content noise (``--fix content``) or the motion noise (``--fix motion``)."""
    from .core import LatentSeed
    from .generator import generate_videos
    from .media import save_grid
    from .training import load_checkpoint

    state = load_checkpoint(args.checkpoint)
    profile = _checkpoint_profile(state)
    labels = LabelPair(profile.motion_id(args.motion), profile.content_id(args.content))
    base = sample_seed(state.config, labels, derive_seed(args.seed, "traverse/base"))
    seeds = []
    for i in range(args.count):
        other = sample_seed(state.config, labels, derive_seed(args.seed, f"traverse/{i}"))
        if args.fix == "content":
            seeds.append(LatentSeed(base.eps_c, other.eps_m, labels, other.rng_seed))
        else:
            seeds.append(LatentSeed(other.eps_c, base.eps_m, labels, other.rng_seed))
    clips = generate_videos(state.generator, seeds)
    out = save_grid([c.frames for c in clips], args.out)
    print(json.dumps({"out": str(out), "fixed": args.fix, "zero_shot": state.split.is_heldout(*labels)}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def balanced_labels(n_motion: int, n_content: int, count: int) -> list[LabelPair]:
    combos = [LabelPair(m, c) for m in range(n_motion) for c in range(n_content)]
    return [combos[i % len(combos)] for i in range(count)]


def cmd_eval(args) -> int:
    from .evaluation import (
        ClassifierTrainingConfig,
        TrunkExtractor,
        classification_report,
        compute_fid,
        load_classifiers,
        save_classifiers,
        train_classifiers,
        write_report,
    )
    from .generator import generate_videos
    from .training import load_checkpoint

    manifest, config, profile, split = _load_run(args.run)
    corpus = _load_corpus(manifest, profile, config.frames)
    ckpt = Path(args.checkpoint) if args.checkpoint else Path(manifest.run_dir) / "checkpoints" / "latest.ckpt"
    if not ckpt.exists():
        raise DataError(f"{ckpt}: checkpoint not found")
    state = load_checkpoint(ckpt)

    clf_path = Path(args.classifiers) if args.classifiers else manifest.path(manifest.classifiers or "classifiers.pt")
    if clf_path.exists():
        suite = load_classifiers(clf_path)
    else:
        log.info("training classifiers on the full corpus (%d clips)", len(corpus))
        suite = train_classifiers(corpus, ClassifierTrainingConfig(seed=derive_seed(manifest.seed, "classifiers")))
        save_classifiers(suite, clf_path)
        manifest.classifiers = str(clf_path)
        manifest.save()

    labels = balanced_labels(config.n_motion, config.n_content, args.count)
    seeds = [sample_seed(state.config, lab, derive_seed(args.seed, f"eval/{i}")) for i, lab in enumerate(labels)]
    clips = generate_videos(state.generator, seeds)
    extractor = TrunkExtractor(suite)
    report = classification_report(suite, clips, labels, split)
    report.fid = compute_fid(corpus, clips, extractor)
    report.extractor = extractor.name
    out = Path(args.out) if args.out else Path(manifest.run_dir) / "eval" / f"step_{state.step:06d}"
    paths = write_report(report, out, profile)
    print(json.dumps({
        "report": str(paths["json"]),
        "fid": report.fid,
        "acc_m": report.acc_m,
        "acc_c": report.acc_c,
        "acc_d": report.acc_d,
    }, indent=2))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cmocogan", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare", help="build a corpus + holdout split and start a run directory")
    p.add_argument("--profile", choices=sorted(PROFILES), default="synthetic")
    p.add_argument("--root", help="clip directory for real-data profiles")
    p.add_argument("--clips-per-combo", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    p.add_argument("--steps", type=int)
    p.add_argument("--rule", default="round-robin")
    p.add_argument("--runs-dir", default="runs")
    p.add_argument("--run-dir")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train the conditional video GAN of a prepared run")
    p.add_argument("--run", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--resume")
    p.add_argument("--checkpoint-every", type=int, default=500)
    p.add_argument("--sample-every", type=int, default=500)
    p.add_argument("--log-every", type=int, default=100)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="generate clips for a (motion, content) pair")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--motion", required=True)
    p.add_argument("--content", required=True)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="generated")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("traverse", help="frame grid with the content or the motion noise held fixed")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--motion", required=True)
    p.add_argument("--content", required=True)
    p.add_argument("--fix", choices=("content", "motion"), default="content")
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="traverse.png")
    p.set_defaults(func=cmd_traverse)

    p = sub.add_parser("eval", help="FID, classifier accuracies and class-balance report")
    p.add_argument("--run", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--classifiers")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    from .evaluation import ClassifierTrainingError
    from .training import NonFiniteLossError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, InvalidInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ClassifierTrainingError as exc:
        print(f"classifier suite did not converge: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteLossError as exc:
        print(f"numerical abort: {exc} (snapshot: {exc.snapshot})", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
