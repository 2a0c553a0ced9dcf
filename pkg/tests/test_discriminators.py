import numpy as np
import pytest
import torch

from cmocogan.core import InvalidInputError, VideoClip
from cmocogan.discriminators import (
    FrameCritic,
    SpectralNorm,
    SpectralState,
    VideoCritic,
    condition_frame,
    condition_video,
    sample_frame,
    score_frame,
    score_video,
    spectral_layers,
    spectral_normalize,
)

from .oracles import top_singular_value


def test_condition_frame_appends_planes():
    frame = torch.randn(3, 64, 64)
    out = condition_frame(frame, torch.eye(9)[4])
    assert out.shape == (12, 64, 64)
    assert torch.equal(out[:3], frame)
    assert torch.equal(out[3:].sum(0), torch.ones(64, 64))


def test_condition_frame_plane_values():
    out = condition_frame(torch.zeros(3, 5, 5), torch.tensor([1.0, 0.0]))
    assert torch.equal(out[3], torch.ones(5, 5))
    assert torch.equal(out[4], torch.zeros(5, 5))


def test_condition_video_layout():
    clip = torch.randn(16, 3, 64, 64)
    out = condition_video(clip, torch.eye(4)[3])
    assert out.shape == (7, 16, 64, 64)
    assert torch.equal(out[:3], clip.transpose(0, 1))
    assert torch.equal(out[6], torch.ones(16, 64, 64))


def test_condition_video_swap_changes_two_planes():
    clip = torch.randn(16, 3, 8, 8)
    a = condition_video(clip, torch.eye(4)[1])
    b = condition_video(clip, torch.eye(4)[2])
    assert int((a != b).sum()) == 2 * 16 * 8 * 8


def test_conditioning_rejects_mismatched_labels():
    with pytest.raises(InvalidInputError):
        condition_frame(torch.zeros(2, 3, 4, 4), torch.eye(3)[:3])
    with pytest.raises(InvalidInputError):
        condition_video(torch.zeros(2, 16, 3, 4, 4), torch.eye(3)[:1])


def _critics():
    torch.manual_seed(0)
    return FrameCritic(3, 9, 32), VideoCritic(3, 4, 16, 32)


def test_critic_input_channels():
    fc, vc = _critics()
    assert fc.in_channels == 12
    assert vc.in_channels == 7
    with pytest.raises(InvalidInputError):
        fc(torch.zeros(1, 11, 32, 32))
    with pytest.raises(InvalidInputError):
        vc(torch.zeros(1, 7, 8, 32, 32))


def test_scores_in_unit_interval_and_deterministic():
    fc, vc = _critics()
    x = condition_frame(torch.rand(3, 32, 32) * 2 - 1, torch.eye(9)[0])
    p = score_frame(fc, x)
    assert 0 < p < 1
    assert score_frame(fc, x) == p
    v = condition_video(torch.rand(16, 3, 32, 32) * 2 - 1, torch.eye(4)[1])
    q = score_video(vc, v)
    assert 0 < q < 1
    assert score_video(vc, v) == q


def test_zero_weight_critics_score_half():
    fc, vc = _critics()
    for critic in (fc, vc):
        for p in critic.parameters():
            torch.nn.init.zeros_(p)
    assert score_frame(fc, torch.randn(12, 32, 32)) == 0.5
    assert score_video(vc, torch.randn(7, 16, 32, 32)) == 0.5


def test_label_changes_score():
    fc, vc = _critics()
    rng = torch.Generator().manual_seed(1)
    for _ in range(100):
        frame = torch.rand(3, 32, 32, generator=rng) * 2 - 1
        a, b = torch.randperm(9, generator=rng)[:2]
        assert score_frame(fc, condition_frame(frame, torch.eye(9)[a])) != score_frame(
            fc, condition_frame(frame, torch.eye(9)[b])
        )
    for _ in range(10):
        clip = torch.rand(16, 3, 32, 32, generator=rng) * 2 - 1
        assert score_video(vc, condition_video(clip, torch.eye(4)[0])) != score_video(
            vc, condition_video(clip, torch.eye(4)[3])
        )


def test_spectral_normalize_diagonal_aligned_start():
    w = torch.diag(torch.tensor([3.0, 1.0], dtype=torch.float64))
    state = SpectralState(torch.tensor([1.0, 0.0], dtype=torch.float64), torch.tensor([1.0, 0.0], dtype=torch.float64))
    out = spectral_normalize(w, state, iterations=1)
    assert top_singular_value(out) == pytest.approx(1.0, abs=1e-12)


def test_spectral_normalize_identity_unchanged():
    w = torch.eye(5, dtype=torch.float64)
    state = SpectralState.init(w, torch.Generator().manual_seed(0))
    assert torch.allclose(spectral_normalize(w, state, 5), w, atol=1e-12)


def test_spectral_normalize_random_64():
    g = torch.Generator().manual_seed(2)
    w = torch.randn(64, 64, generator=g, dtype=torch.float64)
    state = SpectralState.init(w, g)
    # five iterations per call, warm-started until converged
    for _ in range(200):
        out = spectral_normalize(w, state, 5)
    assert abs(top_singular_value(out) - 1) < 1e-3


def test_spectral_state_unit_norm_and_zero_guard():
    g = torch.Generator().manual_seed(3)
    w = torch.randn(6, 4, generator=g)
    state = SpectralState.init(w, g)
    spectral_normalize(w, state, 3)
    assert state.u.norm() == pytest.approx(1, abs=1e-6)
    assert state.v.norm() == pytest.approx(1, abs=1e-6)
    zero = spectral_normalize(torch.zeros(6, 4), state, 3)
    assert torch.equal(zero, torch.zeros(6, 4))
    assert state.u.norm() == pytest.approx(1, abs=1e-6)


def test_spectral_normalize_rejects_zero_iterations():
    w = torch.eye(2)
    with pytest.raises(InvalidInputError):
        spectral_normalize(w, SpectralState.init(w), 0)


def test_conv_kernel_normalized_as_out_by_rest():
    g = torch.Generator().manual_seed(4)
    k = torch.randn(8, 3, 4, 4, generator=g, dtype=torch.float64)
    state = SpectralState.init(k, g)
    out = spectral_normalize(k, state, 2000)
    assert out.shape == k.shape
    assert top_singular_value(out.reshape(8, -1)) == pytest.approx(1, abs=1e-6)


def test_normalized_layers_are_nonexpanding():
    fc, vc = _critics()
    g = torch.Generator().manual_seed(5)
    for layer in spectral_layers(fc) + spectral_layers(vc):
        w = layer.normalized_weight(iterations=500).detach()
        mat = w.reshape(w.shape[0], -1)
        for _ in range(20):
            u = torch.randn(mat.shape[1], generator=g)
            u /= u.norm()
            assert (mat @ u).norm() <= 1 + 1e-3


def test_spectral_state_only_moves_in_training_mode():
    layer = SpectralNorm(torch.nn.Linear(5, 3))
    u0 = layer.u.clone()
    layer.eval()
    layer(torch.randn(2, 5))
    assert torch.equal(layer.u, u0)
    layer.train()
    layer.weight_orig.data.mul_(-1)  # force a different dominant direction sign
    layer(torch.randn(2, 5))
    assert not torch.equal(layer.u, u0)


def test_sample_frame_single_frame():
    rng = np.random.default_rng(0)
    clip = VideoClip(np.zeros((1, 3, 4, 4)))
    assert all(sample_frame(clip, rng)[1] == 0 for _ in range(20))


def test_sample_frame_uniform():
    rng = np.random.default_rng(1)
    clip = VideoClip(np.zeros((16, 1, 1, 1)))
    n = 10 ** 5
    counts = np.bincount([sample_frame(clip, rng)[1] for _ in range(n)], minlength=16)
    p = 1 / 16
    sd = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) <= 3 * sd)


def test_sample_frame_reproducible():
    clip = VideoClip(np.zeros((16, 1, 1, 1)))
    a = [sample_frame(clip, np.random.default_rng(7))[1] for _ in range(1)]
    rng1, rng2 = np.random.default_rng(7), np.random.default_rng(7)
    assert [sample_frame(clip, rng1)[1] for _ in range(50)] == [sample_frame(clip, rng2)[1] for _ in range(50)]
    assert a[0] == sample_frame(clip, np.random.default_rng(7))[1]
