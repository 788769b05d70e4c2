"""Pipeline assembly: loss wiring, shrinker variants, inference purity,
and pre-trained initialization."""

import dataclasses

import numpy as np
import pytest

from adashrink.checkpoint import load_params, save_params
from adashrink.config import ModelConfig
from adashrink.data import SynthSpec, make_batches, synth_corpus
from adashrink.errors import AdmissibilityError, CheckpointError, ShapeError
from adashrink.model import (
    expected_shapes,
    forward_infer,
    forward_train,
    init_from_pretrained,
    init_model,
    translate_batch,
)
from adashrink.tensor import Tensor

MICRO = ModelConfig(
    d_model=8, n_heads=2, ffn_dim=16, acoustic_layers=1, semantic_layers=1,
    decoder_layers=1, subsample_factor=2, d_feat=4, source_vocab=5, target_vocab=5,
)

SPEC = SynthSpec(
    source_vocab=5, target_vocab=5, train_utterances=8, test_utterances=2,
    tokens_min=2, tokens_max=4, duration_min=3, duration_max=6, d_feat=4,
    noise=0.2, seed=11,
)


@pytest.fixture(scope="module")
def corpus():
    return synth_corpus(SPEC)


@pytest.fixture(scope="module")
def batch(corpus):
    return make_batches(corpus.utterances, 200, seed=0)[0]


def test_zero_weights_reduce_total_to_st(batch):
    cfg = dataclasses.replace(MICRO, alpha=0.0, beta=0.0)
    params = init_model(cfg, seed=0)
    out = forward_train(batch, params, cfg)
    assert out.l_total == out.l_st


def test_loss_decomposition_exact(batch):
    cfg = dataclasses.replace(MICRO, alpha=0.7, beta=1.3)
    params = init_model(cfg, seed=1)
    out = forward_train(batch, params, cfg)
    assert out.l_total - (out.l_st + cfg.alpha * out.l_ctc + cfg.beta * out.l_pred) == 0.0


def test_forced_training_lengths_match_transcriptions(batch):
    params = init_model(MICRO, seed=2)
    out = forward_train(batch, params, MICRO)
    want = [len(z) for z in batch.transcriptions]
    assert out.diagnostics["shrunk_lengths"] == want


def test_admissibility_error_names_utterance(corpus):
    # one token repeated many times with short frames cannot fit after 4x subsampling
    spec = dataclasses.replace(
        SPEC, duration_min=1, duration_max=1, tokens_min=4, tokens_max=4,
        train_utterances=2, test_utterances=0, seed=3,
    )
    bad = synth_corpus(spec)
    cfg = dataclasses.replace(MICRO, subsample_factor=4)
    params = init_model(cfg, seed=0)
    b = make_batches(bad.utterances, 100, seed=0)[0]
    with pytest.raises(AdmissibilityError, match="train-"):
        forward_train(b, params, cfg)


def test_backward_populates_every_parameter(batch):
    params = init_model(MICRO, seed=3)
    out = forward_train(batch, params, MICRO)
    out.loss.backward()
    for name, p in params.items():
        assert p.grad is not None, name
        assert np.all(np.isfinite(p.grad)), name


@pytest.mark.parametrize("shrinker", ["none", "fixed", "ctc_greedy", "boundary"])
def test_all_shrinkers_run_forward(batch, shrinker):
    cfg = dataclasses.replace(MICRO, shrinker=shrinker)
    params = init_model(cfg, seed=4)
    out = forward_train(batch, params, cfg)
    assert np.isfinite(out.l_total)
    if shrinker == "none":
        # semantic encoder consumed the full-length acoustic states
        lengths = [int(n) for n in batch.frame_mask.sum(axis=1)]
        want = [(n + 1) // 2 for n in lengths]
        assert out.diagnostics["shrunk_lengths"] == want


def test_unweighted_ablation_changes_pooling(batch):
    params = init_model(MICRO, seed=5)
    weighted = forward_train(batch, params, MICRO)
    cfg = dataclasses.replace(MICRO, blank_weighting=False)
    unweighted = forward_train(batch, params, cfg)
    assert weighted.l_st != unweighted.l_st  # pooling actually differs
    assert weighted.diagnostics["shrunk_lengths"] == unweighted.diagnostics["shrunk_lengths"]


def test_detect_mode_when_forced_training_off(batch):
    cfg = dataclasses.replace(MICRO, forced_training=False)
    params = init_model(cfg, seed=6)
    out = forward_train(batch, params, cfg)
    # untrained predictor rarely crosses theta, so lengths are free-form
    assert len(out.diagnostics["shrunk_lengths"]) == batch.size


def test_asr_stage_uses_only_ctc(batch):
    params = init_model(MICRO, seed=7, arch="asr")
    out = forward_train(batch, params, MICRO, stage="asr_pretrain")
    assert out.l_st == 0.0 and out.l_pred == 0.0
    assert out.l_total == out.l_ctc > 0


def test_mt_stage_runs(batch):
    params = init_model(MICRO, seed=8, arch="mt")
    out = forward_train(batch, params, MICRO, stage="mt_pretrain")
    assert out.l_total == out.l_st > 0


# ------------------------------------------------------------------ inference


def test_inference_is_pure(corpus):
    params = init_model(MICRO, seed=9)
    utt = corpus.utterances[0]
    a = forward_infer(utt.frames, params, MICRO)
    b = forward_infer(utt.frames, params, MICRO)
    np.testing.assert_array_equal(a.tokens, b.tokens)
    np.testing.assert_array_equal(a.bd_probs, b.bd_probs)
    for ma, mb in zip(a.attn_maps, b.attn_maps):
        np.testing.assert_array_equal(ma, mb)


def test_inference_rejects_empty(corpus):
    params = init_model(MICRO, seed=9)
    with pytest.raises(ShapeError):
        forward_infer(np.zeros((0, 4)), params, MICRO)


def test_ctc_head_is_dead_at_inference(corpus, tmp_path):
    params = init_model(MICRO, seed=10)
    utt = corpus.utterances[0]
    base = forward_infer(utt.frames, params, MICRO)

    zeroed = dict(params)
    for name in list(zeroed):
        if name.startswith("ctc."):
            zeroed[name] = Tensor(np.zeros_like(zeroed[name].data))
    z = forward_infer(utt.frames, zeroed, MICRO)
    np.testing.assert_array_equal(base.tokens, z.tokens)
    np.testing.assert_array_equal(base.bd_probs, z.bd_probs)

    # deleting them from a checkpoint load works too
    trimmed = {k: v for k, v in params.items() if not k.startswith("ctc.")}
    path = str(tmp_path / "trim.adts")
    save_params(trimmed, path)
    f32_params = load_params(path, expected_shapes(MICRO, "st"), optional_prefixes=("ctc.",))
    full_path = str(tmp_path / "full.adts")
    save_params(params, full_path)
    f32_full = load_params(full_path, expected_shapes(MICRO, "st"))
    a = forward_infer(utt.frames, f32_full, MICRO)
    b = forward_infer(utt.frames, f32_params, MICRO)
    np.testing.assert_array_equal(a.tokens, b.tokens)
    np.testing.assert_array_equal(a.bd_probs, b.bd_probs)


def test_theta_near_one_degenerates_to_catch_all(corpus):
    cfg = dataclasses.replace(MICRO, theta_infer=0.999)
    params = init_model(cfg, seed=11)
    utt = corpus.utterances[0]
    out = forward_infer(utt.frames, params, cfg)
    assert out.shrunk_length == 1
    assert out.tokens.ndim == 1  # decoding still produced a sequence


def test_beam_decode_runs(corpus):
    cfg = dataclasses.replace(MICRO, beam_size=3)
    params = init_model(cfg, seed=12)
    out = forward_infer(corpus.utterances[0].frames, params, cfg)
    assert out.tokens.ndim == 1


def test_batched_matches_single(corpus):
    """Batch padding must not change any utterance's output."""
    params = init_model(MICRO, seed=13)
    utts = corpus.utterances[:3]
    batch = make_batches(utts, 500, seed=0)[0]
    out = translate_batch(batch.frames, batch.frame_mask, batch.ids, params, MICRO)
    for i, uid in enumerate(batch.ids):
        utt = next(u for u in utts if u.uid == uid)
        single = forward_infer(utt.frames, params, MICRO)
        np.testing.assert_array_equal(out.tokens[i], single.tokens)
        np.testing.assert_array_equal(out.bd_probs[i], single.bd_probs)


# ------------------------------------------------------ pre-trained transfer


def test_init_from_pretrained_round_trip(tmp_path):
    asr = init_model(MICRO, seed=20, arch="asr")
    mt = init_model(MICRO, seed=21, arch="mt")
    asr_path = str(tmp_path / "asr.adts")
    mt_path = str(tmp_path / "mt.adts")
    save_params(asr, asr_path)
    save_params(mt, mt_path)
    asr_loaded = load_params(asr_path, expected_shapes(MICRO, "asr"))
    mt_loaded = load_params(mt_path, expected_shapes(MICRO, "mt"))

    params, provenance = init_from_pretrained(MICRO, 22, asr_loaded, mt_loaded)
    st_path = str(tmp_path / "st.adts")
    save_params(params, st_path)
    reread = load_params(st_path, expected_shapes(MICRO, "st"))
    for name, src in provenance.items():
        if src == "asr":
            np.testing.assert_array_equal(reread[name].data, asr_loaded[name].data)
        elif src == "mt":
            np.testing.assert_array_equal(reread[name].data, mt_loaded[name].data)


def test_provenance_partition():
    asr = init_model(MICRO, seed=23, arch="asr")
    mt = init_model(MICRO, seed=24, arch="mt")
    params, provenance = init_from_pretrained(MICRO, 25, asr, mt)
    assert set(provenance.values()) == {"asr", "mt", "fresh"}
    fresh = [n for n, s in provenance.items() if s == "fresh"]
    assert sorted(fresh) == ["pred.proj.b", "pred.proj.w"]
    assert set(provenance) == set(params)


def test_missing_decoder_tensors_error():
    asr = init_model(MICRO, seed=26, arch="asr")
    mt = init_model(MICRO, seed=27, arch="mt")
    removed = [k for k in list(mt) if k.startswith("decoder.layers")]
    for k in removed:
        del mt[k]
    with pytest.raises(CheckpointError) as err:
        init_from_pretrained(MICRO, 28, asr, mt)
    for k in removed[:2]:
        assert k in str(err.value)


def test_shape_mismatch_names_tensor():
    asr = init_model(MICRO, seed=29, arch="asr")
    asr["ctc.proj.b"] = Tensor(np.zeros(99))
    with pytest.raises(CheckpointError, match="ctc.proj.b"):
        init_from_pretrained(MICRO, 30, asr_params=asr)
