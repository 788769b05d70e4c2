"""Corpus synthesis, file formats, and batching."""

import numpy as np
import pytest

from adashrink.data import (
    EOS_ID,
    SynthSpec,
    load_corpus,
    make_batches,
    save_corpus,
    synth_corpus,
)
from adashrink.errors import ConfigError, CorpusError

SMALL = SynthSpec(
    source_vocab=6, target_vocab=6, train_utterances=20, test_utterances=5,
    tokens_min=2, tokens_max=5, duration_min=3, duration_max=6, d_feat=4,
    noise=0.2, rule="dictionary", seed=7,
)


def test_same_seed_identical_corpora():
    a = synth_corpus(SMALL)
    b = synth_corpus(SMALL)
    for ua, ub in zip(a.utterances, b.utterances):
        assert ua.uid == ub.uid
        np.testing.assert_array_equal(ua.frames, ub.frames)
        np.testing.assert_array_equal(ua.translation, ub.translation)


def test_different_seed_differs():
    import dataclasses

    a = synth_corpus(SMALL)
    b = synth_corpus(dataclasses.replace(SMALL, seed=8))
    assert not np.array_equal(a.utterances[0].frames, b.utterances[0].frames)


def test_noiseless_frames_equal_prototypes():
    import dataclasses

    spec = dataclasses.replace(SMALL, noise=0.0)
    corpus = synth_corpus(spec)
    for u in corpus.utterances[:5]:
        # every frame of one token run must be identical
        start = 0
        for b in u.gold_boundaries:
            run = u.frames[start : b + 1]
            np.testing.assert_array_equal(run, np.broadcast_to(run[0], run.shape))
            start = b + 1


def test_gold_boundary_construction():
    """tokens (5, 2) with durations (3, 2) -> boundaries {2, 4}, 5 frames."""
    durations = np.array([3, 2])
    gold = np.cumsum(durations) - 1
    np.testing.assert_array_equal(gold, [2, 4])
    corpus = synth_corpus(SMALL)
    for u in corpus.utterances:
        assert len(u.gold_boundaries) == len(u.transcription)
        assert u.gold_boundaries[-1] == u.num_frames - 1
        assert np.all(np.diff(u.gold_boundaries) > 0)


def test_translation_rules():
    import dataclasses

    ident = synth_corpus(dataclasses.replace(SMALL, rule="identity"))
    for u in ident.utterances[:5]:
        np.testing.assert_array_equal(u.translation[:-1], u.transcription + 1)
        assert u.translation[-1] == EOS_ID

    rev = synth_corpus(dataclasses.replace(SMALL, rule="reverse"))
    fwd = synth_corpus(SMALL)
    for uf, ur in zip(fwd.utterances[:5], rev.utterances[:5]):
        np.testing.assert_array_equal(ur.translation[:-1], uf.translation[:-1][::-1])


def test_dictionary_rule_is_bijection():
    corpus = synth_corpus(SMALL)
    seen = {}
    for u in corpus.utterances:
        for src, tgt in zip(u.transcription, u.translation[:-1]):
            if src in seen:
                assert seen[src] == tgt
            seen[int(src)] = int(tgt)
            assert tgt != EOS_ID
    assert len(set(seen.values())) == len(seen)


def test_spec_validation():
    import dataclasses

    with pytest.raises(ConfigError):
        synth_corpus(dataclasses.replace(SMALL, duration_min=7, duration_max=6))
    with pytest.raises(ConfigError):
        synth_corpus(dataclasses.replace(SMALL, source_vocab=1))
    with pytest.raises(ConfigError):
        synth_corpus(dataclasses.replace(SMALL, rule="nonsense"))
    with pytest.raises(ConfigError):
        synth_corpus(dataclasses.replace(SMALL, target_vocab=3))


def test_gold_projection_stays_increasing_after_subsampling():
    """With durations >= factor, projected boundaries never collapse."""
    corpus = synth_corpus(SMALL)  # durations >= 3 > factor 2
    for u in corpus.utterances:
        projected = u.gold_boundaries // 2
        assert np.all(np.diff(projected) > 0)


# --------------------------------------------------------------------- files


def test_round_trip(tmp_path):
    corpus = synth_corpus(SMALL)
    save_corpus(corpus, tmp_path)
    loaded = load_corpus(tmp_path)
    assert loaded.source_vocab == corpus.source_vocab
    assert loaded.target_vocab == corpus.target_vocab
    assert loaded.d_feat == corpus.d_feat
    assert len(loaded.utterances) == len(corpus.utterances)
    for ua, ub in zip(corpus.utterances, loaded.utterances):
        assert ua.uid == ub.uid
        np.testing.assert_array_equal(ua.transcription, ub.transcription)
        np.testing.assert_array_equal(ua.translation, ub.translation)
        np.testing.assert_array_equal(ua.gold_boundaries, ub.gold_boundaries)
        # features pass through f32, so compare at f32 resolution
        np.testing.assert_array_equal(ua.frames.astype("<f4"), ub.frames.astype("<f4"))


def test_features_round_trip_byte_identical(tmp_path):
    corpus = synth_corpus(SMALL)
    save_corpus(corpus, tmp_path / "a")
    save_corpus(load_corpus(tmp_path / "a"), tmp_path / "b")
    a = (tmp_path / "a" / "features.bin").read_bytes()
    b = (tmp_path / "b" / "features.bin").read_bytes()
    assert a == b


def test_corrupted_magic_rejected(tmp_path):
    corpus = synth_corpus(SMALL)
    save_corpus(corpus, tmp_path)
    path = tmp_path / "features.bin"
    blob = bytearray(path.read_bytes())
    blob[:4] = b"XXXX"
    path.write_bytes(bytes(blob))
    with pytest.raises(CorpusError, match="magic"):
        load_corpus(tmp_path)


def test_truncated_payload_reports_offset(tmp_path):
    corpus = synth_corpus(SMALL)
    save_corpus(corpus, tmp_path)
    path = tmp_path / "features.bin"
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(CorpusError, match="byte"):
        load_corpus(tmp_path)


def test_manifest_count_cross_checked(tmp_path):
    corpus = synth_corpus(SMALL)
    save_corpus(corpus, tmp_path)
    manifest = (tmp_path / "manifest.tsv").read_text().splitlines()
    (tmp_path / "manifest.tsv").write_text("\n".join(manifest[:-1]) + "\n")
    with pytest.raises(CorpusError, match="manifest"):
        load_corpus(tmp_path)


def test_split_helper():
    corpus = synth_corpus(SMALL)
    assert len(corpus.split("train")) == 20
    assert len(corpus.split("test")) == 5


# ------------------------------------------------------------------ batching


def test_batches_respect_budget():
    corpus = synth_corpus(SMALL)
    budget = 60
    batches = make_batches(corpus.split("train"), budget, seed=1)
    total = 0
    for b in batches:
        padded = b.frames.shape[0] * b.frames.shape[1]
        assert padded <= budget
        total += b.size
    assert total == 20


def test_budget_of_single_utterance_gives_singletons():
    import dataclasses

    # uniform lengths: the budget fits exactly one utterance per batch
    spec = dataclasses.replace(SMALL, tokens_min=3, tokens_max=3,
                               duration_min=4, duration_max=4)
    corpus = synth_corpus(spec)
    batches = make_batches(corpus.utterances, 12, seed=0)
    assert all(b.size == 1 for b in batches)
    assert len(batches) == len(corpus.utterances)


def test_oversized_utterance_named_in_error():
    corpus = synth_corpus(SMALL)
    with pytest.raises(CorpusError, match="train-|test-"):
        make_batches(corpus.utterances, 5, seed=0)


def test_batch_order_deterministic_per_seed_and_epoch():
    corpus = synth_corpus(SMALL)
    a = [b.ids for b in make_batches(corpus.split("train"), 100, seed=3, epoch=1)]
    b = [b.ids for b in make_batches(corpus.split("train"), 100, seed=3, epoch=1)]
    c = [b.ids for b in make_batches(corpus.split("train"), 100, seed=3, epoch=2)]
    assert a == b
    assert a != c  # reshuffled across epochs


def test_batch_masks_consistent():
    corpus = synth_corpus(SMALL)
    for batch in make_batches(corpus.split("train"), 100, seed=0):
        for i in range(batch.size):
            n = int(batch.frame_mask[i].sum())
            assert np.all(batch.frames[i, n:] == 0.0)
            ty = int(batch.target_mask[i].sum())
            assert batch.targets[i, ty - 1] == EOS_ID
