import json
import math
import zipfile

import numpy as np
import pytest
import torch

from cmocogan.core import SYNTHETIC_PROFILE, ModelConfig
from cmocogan.datasets import apply_split, build_split, generate_synthetic
from cmocogan.training import (
    CHECKPOINT_FORMAT,
    MetricsLog,
    NonFiniteLossError,
    PeriodicCheckpoint,
    build_state,
    discriminator_loss,
    discriminator_loss_from_logits,
    generator_loss,
    generator_loss_from_logits,
    load_checkpoint,
    parameter_hash,
    read_manifest,
    sample_real_batch,
    save_checkpoint,
    train_loop,
    train_step,
)

from .oracles import central_difference_grad, relative_error

TINY = dict(frames=4, height=8, width=8, gen_features=4, critic_features=4, batch_size=4, steps=3)


@pytest.fixture(scope="module")
def tiny_corpus():
    profile = SYNTHETIC_PROFILE
    corpus = generate_synthetic(profile, 2, rng_seed=0, frames=4)
    # downsample the 32x32 sprites to 8x8 for speed
    frames = corpus.frames.reshape(*corpus.frames.shape[:3], 8, 4, 8, 4).mean(axis=(4, 6))
    from cmocogan.core import DatasetProfile
    from cmocogan.datasets import LabeledCorpus

    small = DatasetProfile("tiny", 3, 8, 8, profile.motion_names, profile.content_names)
    return LabeledCorpus(frames, corpus.labels, small)


def tiny_state(seed=0, **overrides):
    cfg = ModelConfig(**{**TINY, **overrides})
    return build_state(cfg, build_split(4, 4), seed)


def test_discriminator_loss_examples():
    assert discriminator_loss(torch.tensor([0.9]), torch.tensor([0.1])).item() == pytest.approx(0.2107210, abs=1e-6)
    assert discriminator_loss(torch.tensor([0.5]), torch.tensor([0.5])).item() == pytest.approx(2 * math.log(2), abs=1e-6)
    assert discriminator_loss(torch.tensor([1.0]), torch.tensor([0.0])).item() < 1e-6
    value = discriminator_loss(torch.tensor([0.8, 0.6]), torch.tensor([0.3, 0.1]))
    assert value.item() == pytest.approx(0.5980023, abs=1e-6)


def test_generator_loss_example():
    assert generator_loss(torch.tensor([0.5]), torch.tensor([0.5])).item() == pytest.approx(1.3862944, abs=1e-6)
    assert generator_loss(torch.tensor([0.25]), torch.tensor([0.25])).item() == pytest.approx(2.7725887, abs=1e-6)


def test_loss_clamp_keeps_values_finite():
    assert math.isfinite(discriminator_loss(torch.tensor([0.0]), torch.tensor([1.0])).item())
    assert math.isfinite(generator_loss(torch.tensor([0.0]), torch.tensor([0.0])).item())
    bound = -2 * math.log(1e-7)
    edge = discriminator_loss(torch.tensor([0.0], dtype=torch.float64), torch.tensor([1.0], dtype=torch.float64))
    assert edge.item() == pytest.approx(bound, rel=1e-6)


def test_logit_losses_match_probability_losses():
    g = torch.Generator().manual_seed(0)
    a, b = torch.randn(16, generator=g, dtype=torch.float64), torch.randn(16, generator=g, dtype=torch.float64)
    assert discriminator_loss_from_logits(a, b).item() == pytest.approx(
        discriminator_loss(torch.sigmoid(a), torch.sigmoid(b)).item(), abs=1e-9
    )
    assert generator_loss_from_logits(a, b).item() == pytest.approx(
        generator_loss(torch.sigmoid(a), torch.sigmoid(b)).item(), abs=1e-9
    )


def test_loss_gradients_match_finite_differences():
    g = torch.Generator().manual_seed(1)
    real = (torch.rand(5, generator=g, dtype=torch.float64) * 0.8 + 0.1).requires_grad_()
    fake = (torch.rand(5, generator=g, dtype=torch.float64) * 0.8 + 0.1).requires_grad_()
    for fn in (discriminator_loss, generator_loss):
        analytic = torch.autograd.grad(fn(real, fake), (real, fake))
        for param, grad in zip((real, fake), analytic):
            numeric = central_difference_grad(lambda: fn(real, fake), param.data)
            assert relative_error(grad, numeric) < 1e-4


def test_generator_loss_decreases_with_score():
    low = generator_loss(torch.tensor([0.2]), torch.tensor([0.2]))
    high = generator_loss(torch.tensor([0.7]), torch.tensor([0.7]))
    assert high < low


def test_optimizers_use_configured_hyperparameters():
    st = tiny_state()
    for opt in (st.opt_g, st.opt_d):
        group = opt.param_groups[0]
        assert group["lr"] == 2e-4
        assert group["betas"] == (0.5, 0.999)


def test_step_counter_and_scores(tiny_corpus):
    st = tiny_state()
    train, _ = apply_split(tiny_corpus, st.split)
    rng = np.random.default_rng(0)
    st, report = train_step(st, sample_real_batch(train, 4, rng))
    assert st.step == report.step == 1
    for name in ("real_image_score", "fake_image_score", "real_video_score", "fake_video_score"):
        assert 0 <= getattr(report, name) <= 1
    st, report = train_step(st, sample_real_batch(train, 4, rng))
    assert st.step == 2


def test_generator_phase_leaves_critics_untouched(tiny_corpus):
    st = tiny_state()
    train, _ = apply_split(tiny_corpus, st.split)
    batch = sample_real_batch(train, 4, np.random.default_rng(0))
    gen0, critics0 = parameter_hash(st.generator), parameter_hash(st.frame_critic, st.video_critic)
    st, _ = train_step(st, batch)
    gen1, critics1 = parameter_hash(st.generator), parameter_hash(st.frame_critic, st.video_critic)
    assert gen1 != gen0 and critics1 != critics0
    # a twin that skips the generator update ends with identical critics
    twin = tiny_state()
    twin.opt_g.step = lambda *a, **k: None
    twin, _ = train_step(twin, batch)
    assert parameter_hash(twin.frame_critic, twin.video_critic) == critics1
    for p0, p1 in zip(tiny_state().generator.parameters(), twin.generator.parameters()):
        assert torch.equal(p0, p1)  # BN running stats may move, weights may not


def test_critic_updates_lower_critic_loss(tiny_corpus):
    st = tiny_state()
    train, _ = apply_split(tiny_corpus, st.split)
    batch = sample_real_batch(train, 4, np.random.default_rng(0))
    st.opt_g.step = lambda *a, **k: None
    for group in st.opt_d.param_groups:
        group["lr"] = 1e-3
    losses = []
    for _ in range(16):
        _, rep = train_step(st, batch)
        losses.append(rep.d_loss_image + rep.d_loss_video)
    assert np.mean(losses[-4:]) < np.mean(losses[:4])


def test_training_is_deterministic_for_seed(tiny_corpus):
    hashes = []
    for _ in range(2):
        st = tiny_state(seed=5)
        train, _ = apply_split(tiny_corpus, st.split)
        train_loop(st, train, steps=3)
        hashes.append(parameter_hash(st.generator, st.frame_critic, st.video_critic))
    assert hashes[0] == hashes[1]
    other = tiny_state(seed=6)
    train_loop(other, apply_split(tiny_corpus, other.split)[0], steps=3)
    assert parameter_hash(other.generator) != hashes[0]


def test_loop_rejects_heldout_combos(tiny_corpus):
    st = tiny_state()
    with pytest.raises(ValueError, match="held-out"):
        train_loop(st, tiny_corpus, steps=1)


def test_zero_steps_is_a_no_op(tiny_corpus):
    st = tiny_state()
    h = parameter_hash(st.generator, st.frame_critic, st.video_critic)
    train_loop(st, apply_split(tiny_corpus, st.split)[0], steps=0)
    assert st.step == 0
    assert parameter_hash(st.generator, st.frame_critic, st.video_critic) == h


def test_checkpoint_round_trip_resumes_identically(tiny_corpus, tmp_path):
    st = tiny_state(seed=2)
    train, _ = apply_split(tiny_corpus, st.split)
    train_loop(st, train, steps=2)
    path = save_checkpoint(st, tmp_path / "a.ckpt")
    manifest = read_manifest(path)
    assert manifest["format"] == CHECKPOINT_FORMAT and manifest["step"] == 2
    with zipfile.ZipFile(path) as zf:
        assert "manifest.json" in zf.namelist()
        assert any(n.startswith("tensors/") for n in zf.namelist())

    restored = load_checkpoint(path)
    assert restored.step == 2
    assert parameter_hash(restored.generator, restored.frame_critic, restored.video_critic) == parameter_hash(
        st.generator, st.frame_critic, st.video_critic
    )
    train_loop(st, train, steps=4)
    train_loop(restored, train, steps=4)
    assert parameter_hash(restored.generator, restored.frame_critic, restored.video_critic) == parameter_hash(
        st.generator, st.frame_critic, st.video_critic
    )


def test_read_manifest_rejects_foreign_files(tmp_path):
    bad = tmp_path / "x.ckpt"
    with zipfile.ZipFile(bad, "w") as zf:
        zf.writestr("manifest.json", json.dumps({"format": "other"}))
    with pytest.raises(ValueError):
        read_manifest(bad)


def test_callbacks_write_metrics_and_checkpoints(tiny_corpus, tmp_path):
    st = tiny_state()
    train, _ = apply_split(tiny_corpus, st.split)
    train_loop(st, train, [MetricsLog(tmp_path / "m.csv"), PeriodicCheckpoint(tmp_path / "ck", 2)], steps=3)
    rows = (tmp_path / "m.csv").read_text().strip().splitlines()
    assert len(rows) == 4 and rows[0].startswith("step,")
    assert sorted(p.name for p in (tmp_path / "ck").iterdir()) == ["latest.ckpt", "step_000002.ckpt", "step_000003.ckpt"]


def test_nan_aborts_with_diagnostics(tiny_corpus, tmp_path):
    st = tiny_state()
    train, _ = apply_split(tiny_corpus, st.split)
    with torch.no_grad():
        next(st.frame_critic.parameters()).fill_(float("nan"))
    with pytest.raises(NonFiniteLossError) as info:
        train_loop(st, train, steps=2, diagnostics_dir=tmp_path)
    assert (tmp_path / "abort.json").exists()
    assert info.value.snapshot.exists()
    assert st.step == 0
