import itertools
import json

import numpy as np
import pytest
from PIL import Image

from cmocogan.core import SYNTHETIC_PROFILE, WEIZMANN_PROFILE, DatasetProfile, InvalidInputError
from cmocogan.datasets import (
    ComboSampler,
    DataError,
    LabeledCorpus,
    SplitSpec,
    apply_split,
    build_split,
    bytes_to_unit,
    generate_synthetic,
    ingest_clip_directory,
    oracle_label,
    temporal_indices,
    write_corpus,
)


def test_round_robin_counts():
    spec = build_split(4, 4)
    assert len(spec.training_combos) == 12
    assert len(spec.heldout_combos) == 4
    retained = [sum(1 for m, _ in spec.training_combos if m == k) for k in range(4)]
    assert retained == [3, 3, 3, 3]
    spec = build_split(4, 9)
    assert (len(spec.training_combos), len(spec.heldout_combos)) == (27, 9)


def test_split_rejects_single_class():
    with pytest.raises(InvalidInputError):
        build_split(1, 5)
    with pytest.raises(InvalidInputError):
        build_split(3, 1)


def test_split_rejects_globally_unseen_motion():
    with pytest.raises(InvalidInputError):
        build_split(2, 2, {0: 0, 1: 0})
    with pytest.raises(InvalidInputError):
        SplitSpec(3, 2, (2, 2))
    spec = build_split(3, 2, {0: 2, 1: 1})
    assert spec.heldout_combos == [(2, 0), (1, 1)]


def test_partition_exhaustive_small_instances():
    for M, C in itertools.product(range(2, 17), repeat=2):
        spec = build_split(M, C)
        train, held = set(spec.training_combos), set(spec.heldout_combos)
        assert not train & held
        assert train | held == set(itertools.product(range(M), range(C)))
        assert len(held) == C
        assert {m for m, _ in train} == set(range(M))


def test_split_json_round_trip():
    spec = build_split(4, 9)
    text = spec.to_json()
    assert set(json.loads(text)) == {"M", "C", "removal_map"}
    assert SplitSpec.from_json(text) == spec
    assert build_split(4, 9).to_json() == text


def _one_per_combo(M, C):
    labels = np.array(list(itertools.product(range(M), range(C))))
    profile = DatasetProfile("t", 1, 2, 2, [f"m{i}" for i in range(M)], [f"c{i}" for i in range(C)])
    return LabeledCorpus(np.zeros((len(labels), 2, 1, 2, 2)), labels, profile)


def test_apply_split_counts_and_idempotence():
    corpus = _one_per_combo(2, 2)
    spec = SplitSpec(2, 2, (0, 1))
    train, held = apply_split(corpus, spec)
    assert len(train) == 2
    assert held == [(0, 0), (1, 1)]
    again, _ = apply_split(train, spec)
    np.testing.assert_array_equal(again.labels, train.labels)


def test_apply_split_empty_corpus():
    train, held = apply_split(LabeledCorpus.empty(SYNTHETIC_PROFILE), build_split(4, 4))
    assert len(train) == 0 and len(held) == 4


def test_combo_sampler_never_emits_heldout():
    spec = build_split(4, 4)
    draws = ComboSampler(spec).sample(10 ** 5, np.random.default_rng(0))
    held = set(spec.heldout_combos)
    assert not any((int(m), int(c)) in held for m, c in draws)
    assert len({tuple(d) for d in draws}) == 12


def test_synthetic_corpus_size_and_determinism():
    a = generate_synthetic(SYNTHETIC_PROFILE, 8, rng_seed=3)
    b = generate_synthetic(SYNTHETIC_PROFILE, 8, rng_seed=3)
    assert len(a) == 128
    assert a.frames.shape == (128, 16, 3, 32, 32)
    assert a.frames.tobytes() == b.frames.tobytes()
    assert a.frames.min() >= -1 and a.frames.max() <= 1


def test_oracle_labeler_recovers_every_label():
    corpus = generate_synthetic(SYNTHETIC_PROFILE, 16, rng_seed=11)
    for clip, label in corpus:
        assert oracle_label(clip.frames) == label


def test_temporal_indices():
    assert temporal_indices(64) == list(range(0, 64, 4))
    assert temporal_indices(16) == list(range(16))
    assert temporal_indices(35) == list(range(0, 32, 2))
    with pytest.raises(InvalidInputError):
        temporal_indices(10)


def test_byte_normalization():
    np.testing.assert_array_equal(bytes_to_unit(np.array([0, 255], np.uint8)), [-1.0, 1.0])


def test_write_and_ingest_round_trip(tmp_path):
    corpus = generate_synthetic(SYNTHETIC_PROFILE, 2, rng_seed=5)
    write_corpus(corpus, tmp_path / "c")
    assert (tmp_path / "c" / "up" / "red-square" / "00000" / "frame_0000.png").exists()
    loaded = ingest_clip_directory(tmp_path / "c", SYNTHETIC_PROFILE)
    order_a = np.lexsort(corpus.labels.T[::-1])
    order_b = np.lexsort(loaded.labels.T[::-1])
    np.testing.assert_array_equal(loaded.labels[order_b], corpus.labels[order_a])
    np.testing.assert_array_equal(loaded.frames[order_b], corpus.frames[order_a])
    again = ingest_clip_directory(tmp_path / "c", SYNTHETIC_PROFILE)
    assert again.frames.tobytes() == loaded.frames.tobytes()


def _write_clip(root, motion, content, clip_id, n_frames, size=20, value=255):
    d = root / motion / content / clip_id
    d.mkdir(parents=True)
    for t in range(n_frames):
        px = np.full((size, size, 3), t % 256, np.uint8)
        px[0, 0] = value
        Image.fromarray(px).save(d / f"frame_{t:04d}.png")
    return d


def test_ingest_resamples_and_resizes(tmp_path):
    motions = [f"a{i}" for i in range(4)]
    people = [f"p{i}" for i in range(9)]
    for m in motions:
        for c in people:
            _write_clip(tmp_path, m, c, "x", 64 if (m, c) == ("a0", "p0") else 16)
    corpus = ingest_clip_directory(tmp_path, WEIZMANN_PROFILE)
    assert len(corpus) == 36
    assert corpus.frames.shape[1:] == (16, 3, 64, 64)
    assert corpus.profile.motion_names == tuple(motions)
    first = corpus.frames[(corpus.labels[:, 0] == 0) & (corpus.labels[:, 1] == 0)][0]
    np.testing.assert_allclose(first[:, 0, 32, 32], bytes_to_unit(np.arange(0, 64, 4).astype(np.uint8)))


def test_ingest_errors(tmp_path):
    with pytest.raises(DataError):
        ingest_clip_directory(tmp_path, WEIZMANN_PROFILE)
    _write_clip(tmp_path, "up", "red-square", "short", 5)
    with pytest.raises(DataError, match="short"):
        ingest_clip_directory(tmp_path, SYNTHETIC_PROFILE)


def test_ingest_skips_unreadable(tmp_path):
    _write_clip(tmp_path, "up", "red-square", "good", 16, size=32)
    bad = _write_clip(tmp_path, "down", "red-square", "bad", 16, size=32)
    (bad / "frame_0003.png").write_bytes(b"not a png")
    corpus = ingest_clip_directory(tmp_path, SYNTHETIC_PROFILE)
    assert len(corpus) == 1
    assert corpus.skipped == 1
