"""Full pipeline assembly: acoustic encoder, transcription head, boundary
predictor, segment shrinking, semantic encoder, and decoder.

Three architectures share parameter names so weights transfer directly:
  asr = frontend + acoustic encoder + transcription head
  mt  = text embedding + semantic encoder + decoder
  st  = everything except the text embedding, plus the boundary predictor

The training objective is the translation cross-entropy plus alpha times
the transcription loss plus beta times the boundary-predictor loss; each
summand is normalized by its own token (or frame) count over the batch.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from .boundary import (
    BD,
    BK,
    BoundaryPosterior,
    detect_boundaries,
    forced_threshold,
    soft_boundary_targets,
)
from .config import LABEL_SMOOTHING, ModelConfig
from .ctc import CtcPosterior, SourceTranscription, ctc_loss
from .data import EOS_ID, Batch
from .errors import AdmissibilityError, CheckpointError, ConfigError, ShapeError
from .layers import (
    ParamSpec,
    Params,
    conv_specs,
    conv_subsample,
    cross_entropy_sum,
    decoder_forward,
    decoder_layer_specs,
    embedding_specs,
    encoder_forward,
    encoder_layer_specs,
    init_params,
    linear,
    sinusoidal_positions,
)
from .shrink import (
    Segmentation,
    ShrunkSequence,
    ctc_greedy_shrink,
    fixed_rate_shrink,
    mean_pool,
    spans_from_boundaries,
    weighted_shrink,
)
from .tensor import Tensor

ARCHS = ("asr", "mt", "st")
CTC_PREFIX = "ctc."


def param_specs(config: ModelConfig, arch: str) -> list[ParamSpec]:
    if arch not in ARCHS:
        raise ConfigError(f"unknown architecture {arch!r}")
    d = config.d_model
    specs: list[ParamSpec] = []
    if arch in ("asr", "st"):
        specs += conv_specs("frontend.conv1", 3, config.d_feat, d)
        specs += conv_specs("frontend.conv2", 3, d, d)
        for i in range(config.acoustic_layers):
            specs += encoder_layer_specs(f"acoustic.layers.{i}", d, config.ffn_dim)
        specs += [
            ParamSpec("ctc.proj.w", (d, config.source_vocab + 1), "xavier"),
            ParamSpec("ctc.proj.b", (config.source_vocab + 1,), "zeros"),
        ]
    if arch == "st":
        specs += [
            ParamSpec("pred.proj.w", (d, 3), "xavier"),
            ParamSpec("pred.proj.b", (3,), "zeros"),
        ]
    if arch == "mt":
        specs += embedding_specs("mt.embed", config.source_vocab, d)
    if arch in ("mt", "st"):
        for i in range(config.semantic_layers):
            specs += encoder_layer_specs(f"semantic.layers.{i}", d, config.ffn_dim)
        specs += embedding_specs("decoder.embed", config.target_vocab + 1, d)
        for i in range(config.decoder_layers):
            specs += decoder_layer_specs(f"decoder.layers.{i}", d, config.ffn_dim)
        specs += [
            ParamSpec("decoder.out.w", (d, config.target_vocab + 1), "xavier"),
            ParamSpec("decoder.out.b", (config.target_vocab + 1,), "zeros"),
        ]
    return specs


def expected_shapes(config: ModelConfig, arch: str) -> dict[str, tuple[int, ...]]:
    return {s.name: s.shape for s in param_specs(config, arch)}


def init_model(config: ModelConfig, seed: int, arch: str = "st") -> Params:
    config.validate()
    return init_params(param_specs(config, arch), seed)


def init_from_pretrained(
    config: ModelConfig,
    seed: int,
    asr_params: Params | None = None,
    mt_params: Params | None = None,
) -> tuple[Params, dict[str, str]]:
    """Fresh ST parameters, overwritten from the pre-trained checkpoints.

    The acoustic side (frontend, encoder, transcription head) comes from
    the asr model, the semantic encoder and decoder from the mt model; the
    boundary predictor always starts fresh. Returns the parameters and a
    name -> {asr, mt, fresh} provenance map.
    """
    params = init_model(config, seed, "st")
    provenance = {name: "fresh" for name in params}
    transfers = (
        ("asr", asr_params, ("frontend.", "acoustic.", "ctc.")),
        ("mt", mt_params, ("semantic.", "decoder.")),
    )
    for label, source, prefixes in transfers:
        if source is None:
            continue
        wanted = [n for n in params if n.startswith(prefixes)]
        missing = sorted(n for n in wanted if n not in source)
        if missing:
            raise CheckpointError(f"{label} checkpoint lacks tensors: {missing}")
        for name in wanted:
            if source[name].data.shape != params[name].data.shape:
                raise CheckpointError(
                    f"tensor {name}: {label} shape {source[name].data.shape} "
                    f"vs model shape {params[name].data.shape}"
                )
            params[name] = Tensor(source[name].data.copy(), requires_grad=True)
            provenance[name] = label
    return params, provenance


# ------------------------------------------------------------------ encoders


def encode_acoustic(
    frames: np.ndarray, frame_mask: np.ndarray, params: Params, config: ModelConfig
) -> tuple[Tensor, np.ndarray]:
    """Frames -> subsampled, position-encoded, encoded states (B, T', d)."""
    x = Tensor(frames)
    h, sub_mask = conv_subsample(x, frame_mask, params, "frontend", config.subsample_factor)
    pe = sinusoidal_positions(h.shape[1], config.d_model)
    h = (h + Tensor(pe[None, :, :])) * Tensor(sub_mask[:, :, None])
    h = encoder_forward(h, sub_mask, params, "acoustic", config.acoustic_layers, config.n_heads)
    return h, sub_mask


def encode_semantic(
    states: Tensor, mask: np.ndarray, params: Params, config: ModelConfig
) -> Tensor:
    pe = sinusoidal_positions(states.shape[1], config.d_model)
    h = (states + Tensor(pe[None, :, :])) * Tensor(mask[:, :, None])
    return encoder_forward(h, mask, params, "semantic", config.semantic_layers, config.n_heads)


def _ctc_posterior(h: Tensor, params: Params) -> Tensor:
    return tt.softmax(linear(h, params, "ctc.proj"), axis=-1)


def _pred_posterior(h: Tensor, params: Params) -> Tensor:
    return tt.softmax(linear(h, params, "pred.proj"), axis=-1)


# ------------------------------------------------------------------ shrinking


@dataclass
class ShrinkResult:
    states: Tensor  # (B, S_max, d)
    mask: np.ndarray  # (B, S_max)
    segmentations: list[Segmentation | None]
    lengths: list[int]


def _segment_for(
    config: ModelConfig,
    pred_b: BoundaryPosterior,
    forced_len: int | None,
    theta: float,
) -> Segmentation:
    if forced_len is not None:
        return forced_threshold(pred_b, forced_len)
    return detect_boundaries(pred_b, theta)


def shrink_batch(
    h: Tensor,
    sub_mask: np.ndarray,
    params: Params,
    config: ModelConfig,
    ids: list[str],
    pred_probs: Tensor | None,
    ctc_probs: Tensor | None,
    forced_lengths: list[int] | None,
    theta: float,
) -> ShrinkResult:
    """Apply the configured shrinker per utterance and re-pad the batch."""
    b = h.shape[0]
    lengths = sub_mask.sum(axis=1).astype(int)
    if config.shrinker == "none":
        segs: list[Segmentation | None] = [None] * b
        return ShrinkResult(h, sub_mask, segs, [int(n) for n in lengths])

    pooled: list[ShrunkSequence] = []
    segs = []
    for i in range(b):
        n = int(lengths[i])
        states_i = h[i, :n, :]
        if config.shrinker == "fixed":
            shrunk = fixed_rate_shrink(states_i, config.fixed_rate)
            segs.append(spans_from_boundaries([e for _, e in shrunk.spans], n))
        elif config.shrinker == "ctc_greedy":
            if ctc_probs is None:
                raise ConfigError("ctc_greedy shrinker needs the transcription head")
            labels = np.argmax(ctc_probs.data[i, :n, :], axis=1)
            shrunk = ctc_greedy_shrink(states_i, labels, config.source_vocab)
            segs.append(None)  # runs may not partition the frames (blanks dropped)
        elif config.shrinker == "boundary":
            assert pred_probs is not None
            pred_b = BoundaryPosterior(probs=pred_probs[i, :n, :])
            forced = forced_lengths[i] if forced_lengths is not None else None
            if forced is not None and forced > n:
                raise AdmissibilityError(
                    f"utterance {ids[i]}: transcription length {forced} exceeds "
                    f"{n} subsampled frames"
                )
            seg = _segment_for(config, pred_b, forced, theta)
            segs.append(seg)
            if config.blank_weighting:
                blank_probs = pred_probs[i, :n, BK]
                shrunk = weighted_shrink(states_i, seg, blank_probs, config.mu)
            else:
                shrunk = mean_pool(states_i, seg.spans)
        else:
            raise ConfigError(f"unknown shrinker {config.shrinker!r}")
        pooled.append(shrunk)

    s_max = max(p.num_segments for p in pooled)
    rows = [tt.pad_rows(p.states, s_max).reshape(1, s_max, config.d_model) for p in pooled]
    out = tt.concat(rows, axis=0)
    out_lengths = [p.num_segments for p in pooled]
    out_mask = (np.arange(s_max)[None, :] < np.array(out_lengths)[:, None]).astype(np.float64)
    return ShrinkResult(out, out_mask, segs, out_lengths)


# ------------------------------------------------------------------- training


@dataclass
class TrainOutput:
    loss: Tensor
    l_st: float = 0.0
    l_ctc: float = 0.0
    l_pred: float = 0.0
    l_total: float = 0.0
    diagnostics: dict = field(default_factory=dict)


def _sum_ctc_losses(ctc_probs: Tensor, batch: Batch, config: ModelConfig, lengths) -> Tensor:
    total = None
    for i in range(batch.size):
        n = int(lengths[i])
        posterior = CtcPosterior(probs=ctc_probs[i, :n, :], blank_index=config.source_vocab)
        try:
            piece = ctc_loss(posterior, SourceTranscription(batch.transcriptions[i]))
        except AdmissibilityError as exc:
            raise AdmissibilityError(f"utterance {batch.ids[i]}: {exc}") from exc
        total = piece if total is None else total + piece
    return total


def _padded_soft_targets(ctc_probs: Tensor, config: ModelConfig, lengths) -> np.ndarray:
    b, t, _ = ctc_probs.shape
    out = np.zeros((b, t, 3))
    for i in range(b):
        n = int(lengths[i])
        posterior = CtcPosterior(probs=Tensor(ctc_probs.data[i, :n, :]),
                                 blank_index=config.source_vocab)
        out[i, :n] = soft_boundary_targets(posterior).probs
    return out


def forward_train(
    batch: Batch, params: Params, config: ModelConfig, stage: str = "st_finetune"
) -> TrainOutput:
    """One training forward pass; the returned loss tensor is ready for backward().

    Loss normalization: the translation term is divided by the batch's
    target-token count, the transcription term by its source-token count,
    and the predictor term by its valid-frame count. The total is
    l_st + alpha * l_ctc + beta * l_pred in exactly that order.
    """
    if stage == "mt_pretrain":
        return _forward_mt(batch, params, config)

    h, sub_mask = encode_acoustic(batch.frames, batch.frame_mask, params, config)
    lengths = sub_mask.sum(axis=1).astype(int)

    ctc_probs = _ctc_posterior(h, params)
    n_src = sum(len(z) for z in batch.transcriptions)
    l_ctc = tt.mul(_sum_ctc_losses(ctc_probs, batch, config, lengths), 1.0 / n_src)

    if stage == "asr_pretrain":
        diag = {"shrunk_lengths": [], "boundary_counts": []}
        out = TrainOutput(loss=l_ctc, l_ctc=float(l_ctc.data))
        out.l_total = out.l_ctc
        out.diagnostics = diag
        return out

    pred_probs = _pred_posterior(h, params)
    targets = _padded_soft_targets(ctc_probs, config, lengths)
    logs = tt.log(tt.clip_min(pred_probs, 1e-10))
    n_frames = int(lengths.sum())
    l_pred = tt.mul(-tt.tsum(logs * Tensor(targets)), 1.0 / n_frames)

    forced = [len(z) for z in batch.transcriptions] if (
        config.forced_training and config.shrinker == "boundary"
    ) else None
    shrunk = shrink_batch(
        h, sub_mask, params, config, batch.ids,
        pred_probs, ctc_probs, forced, config.theta_infer,
    )

    memory = encode_semantic(shrunk.states, shrunk.mask, params, config)
    y_in = np.concatenate(
        [np.full((batch.size, 1), EOS_ID, dtype=np.int64), batch.targets[:, :-1]], axis=1
    )
    logits, _ = decoder_forward(
        y_in, memory, shrunk.mask, params, "decoder", config.decoder_layers, config.n_heads
    )
    n_tgt = int(batch.target_mask.sum())
    l_st = tt.mul(
        cross_entropy_sum(logits, batch.targets, batch.target_mask, LABEL_SMOOTHING),
        1.0 / n_tgt,
    )

    total = l_st + tt.mul(l_ctc, config.alpha) + tt.mul(l_pred, config.beta)
    boundary_counts = [
        len(s.boundary_frames) if s is not None else 0 for s in shrunk.segmentations
    ]
    return TrainOutput(
        loss=total,
        l_st=float(l_st.data),
        l_ctc=float(l_ctc.data),
        l_pred=float(l_pred.data),
        l_total=float(total.data),
        diagnostics={
            "shrunk_lengths": shrunk.lengths,
            "boundary_counts": boundary_counts,
            "n_src_tokens": n_src,
            "n_tgt_tokens": n_tgt,
            "n_frames": n_frames,
        },
    )


def _forward_mt(batch: Batch, params: Params, config: ModelConfig) -> TrainOutput:
    """Text-to-text pass: embed the transcription, encode, decode, CE loss."""
    b = batch.size
    t_max = max(len(z) for z in batch.transcriptions)
    src = np.zeros((b, t_max), dtype=np.int64)
    src_mask = np.zeros((b, t_max))
    for i, z in enumerate(batch.transcriptions):
        src[i, : len(z)] = z
        src_mask[i, : len(z)] = 1.0
    emb = tt.embedding(params["mt.embed.w"], src)
    emb = tt.mul(emb, float(np.sqrt(config.d_model)))
    memory = encode_semantic(emb, src_mask, params, config)
    y_in = np.concatenate(
        [np.full((b, 1), EOS_ID, dtype=np.int64), batch.targets[:, :-1]], axis=1
    )
    logits, _ = decoder_forward(
        y_in, memory, src_mask, params, "decoder", config.decoder_layers, config.n_heads
    )
    n_tgt = int(batch.target_mask.sum())
    l_st = tt.mul(
        cross_entropy_sum(logits, batch.targets, batch.target_mask, LABEL_SMOOTHING),
        1.0 / n_tgt,
    )
    return TrainOutput(loss=l_st, l_st=float(l_st.data), l_total=float(l_st.data))


# ------------------------------------------------------------------ inference


@dataclass
class BatchTranslation:
    ids: list[str]
    tokens: list[np.ndarray]  # generated target ids, EOS stripped
    shrunk_lengths: list[int]
    segmentations: list[Segmentation | None]
    bd_probs: list[np.ndarray]  # per-utterance BD probabilities over valid frames
    attn_maps: list[np.ndarray] = field(default_factory=list)  # per layer (B,H,Ty,S)
    gen_lengths: list[int] = field(default_factory=list)  # rows incl. the EOS step
    timing: dict = field(default_factory=dict)


def translate_batch(
    frames: np.ndarray,
    frame_mask: np.ndarray,
    ids: list[str],
    params: Params,
    config: ModelConfig,
    theta: float | None = None,
    collect_attn: bool = False,
    max_len: int | None = None,
) -> BatchTranslation:
    """Greedy batched inference. The transcription head is consulted only
    for the ctc_greedy shrinker; the boundary path never reads it."""
    theta = config.theta_infer if theta is None else theta
    t0 = time.perf_counter()
    h, sub_mask = encode_acoustic(frames, frame_mask, params, config)
    needs_ctc = config.shrinker == "ctc_greedy"
    ctc_probs = _ctc_posterior(h, params) if needs_ctc else None
    pred_probs = _pred_posterior(h, params) if config.shrinker == "boundary" else None
    shrunk = shrink_batch(
        h, sub_mask, params, config, ids, pred_probs, ctc_probs, None, theta
    )
    t1 = time.perf_counter()
    memory = encode_semantic(shrunk.states, shrunk.mask, params, config)
    b = frames.shape[0]
    cap = max_len if max_len is not None else 2 * max(shrunk.lengths) + 8
    y = np.full((b, 1), EOS_ID, dtype=np.int64)
    finished = np.zeros(b, dtype=bool)
    for _ in range(cap):
        logits, _ = decoder_forward(
            y, memory, shrunk.mask, params, "decoder", config.decoder_layers, config.n_heads
        )
        nxt = np.argmax(logits.data[:, -1, :], axis=1)
        nxt[finished] = EOS_ID
        y = np.concatenate([y, nxt[:, None]], axis=1)
        finished |= nxt == EOS_ID
        if finished.all():
            break
    tokens = []
    gen_lengths = []
    for i in range(b):
        seq = y[i, 1:]
        stops = np.nonzero(seq == EOS_ID)[0]
        end = int(stops[0]) if stops.size else seq.size
        tokens.append(seq[:end].copy())
        gen_lengths.append(min(end + 1, seq.size))
    attn = []
    if collect_attn:
        _, maps = decoder_forward(
            y[:, :-1] if y.shape[1] > 1 else y,
            memory, shrunk.mask, params, "decoder",
            config.decoder_layers, config.n_heads, collect_attn=True,
        )
        attn = [m.data for m in maps]
    t2 = time.perf_counter()

    lengths = sub_mask.sum(axis=1).astype(int)
    bd = []
    for i in range(b):
        n = int(lengths[i])
        bd.append(pred_probs.data[i, :n, BD].copy() if pred_probs is not None
                  else np.zeros(n))
    return BatchTranslation(
        ids=ids,
        tokens=tokens,
        shrunk_lengths=shrunk.lengths,
        segmentations=shrunk.segmentations,
        bd_probs=bd,
        attn_maps=attn,
        gen_lengths=gen_lengths,
        timing={
            "adapt_s": t1 - t0,
            "translate_s": t2 - t1,
            "total_s": t2 - t0,
        },
    )


@dataclass
class InferenceResult:
    tokens: np.ndarray
    attn_maps: list[np.ndarray]  # per layer (H, T_y, S)
    segmentation: Segmentation | None
    bd_probs: np.ndarray
    shrunk_length: int
    timing: dict


def forward_infer(
    frames: np.ndarray, params: Params, config: ModelConfig
) -> InferenceResult:
    """Translate a single utterance; pure function of its inputs."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise ShapeError(f"need a non-empty (T, d_feat) frame matrix, got {frames.shape}")
    if config.beam_size > 1:
        return _beam_infer(frames, params, config)
    mask = np.ones((1, frames.shape[0]))
    out = translate_batch(
        frames[None, :, :], mask, ["utt"], params, config, collect_attn=True
    )
    return InferenceResult(
        tokens=out.tokens[0],
        attn_maps=[m[0] for m in out.attn_maps],
        segmentation=out.segmentations[0],
        bd_probs=out.bd_probs[0],
        shrunk_length=out.shrunk_lengths[0],
        timing=out.timing,
    )


def _beam_infer(frames: np.ndarray, params: Params, config: ModelConfig) -> InferenceResult:
    """Length-normalized beam search over the decoder, width = beam_size."""
    mask = np.ones((1, frames.shape[0]))
    t0 = time.perf_counter()
    h, sub_mask = encode_acoustic(frames[None, :, :], mask, params, config)
    ctc_probs = _ctc_posterior(h, params) if config.shrinker == "ctc_greedy" else None
    pred_probs = _pred_posterior(h, params) if config.shrinker == "boundary" else None
    shrunk = shrink_batch(
        h, sub_mask, params, config, ["utt"], pred_probs, ctc_probs, None,
        config.theta_infer,
    )
    memory = encode_semantic(shrunk.states, shrunk.mask, params, config)
    cap = 2 * shrunk.lengths[0] + 8
    beams: list[tuple[float, list[int], bool]] = [(0.0, [EOS_ID], False)]
    for _ in range(cap):
        candidates: list[tuple[float, list[int], bool]] = []
        for score, seq, done in beams:
            if done:
                candidates.append((score, seq, True))
                continue
            logits, _ = decoder_forward(
                np.array([seq], dtype=np.int64), memory, shrunk.mask,
                params, "decoder", config.decoder_layers, config.n_heads,
            )
            logp = logits.data[0, -1, :]
            logp = logp - np.log(np.exp(logp - logp.max()).sum()) - logp.max()
            top = np.argsort(-logp)[: config.beam_size]
            for tok in top:
                candidates.append(
                    (score + float(logp[tok]), seq + [int(tok)], tok == EOS_ID)
                )
        candidates.sort(key=lambda c: c[0] / max(1, len(c[1]) - 1), reverse=True)
        beams = candidates[: config.beam_size]
        if all(done for _, _, done in beams):
            break
    best = max(beams, key=lambda c: c[0] / max(1, len(c[1]) - 1))
    seq = np.array(best[1][1:], dtype=np.int64)
    stops = np.nonzero(seq == EOS_ID)[0]
    seq = seq[: int(stops[0])] if stops.size else seq
    t1 = time.perf_counter()
    n = int(sub_mask.sum())
    return InferenceResult(
        tokens=seq,
        attn_maps=[],
        segmentation=shrunk.segmentations[0],
        bd_probs=pred_probs.data[0, :n, BD].copy() if pred_probs is not None else np.zeros(n),
        shrunk_length=shrunk.lengths[0],
        timing={"total_s": t1 - t0},
    )
