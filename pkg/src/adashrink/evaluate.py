"""Metrics and analyses: shrinking quality, boundary matching,
token-id BLEU, decoder attention entropy, threshold sweeps, and the
efficiency benchmark comparing shrinker variants."""

from __future__ import annotations

import csv
import math
import os
import time
import tracemalloc
from collections import Counter
from dataclasses import dataclass, replace

import numpy as np

from .config import ModelConfig
from .data import EOS_ID, Utterance, make_batches
from .errors import ConfigError
from .layers import Params, decoder_forward
from .model import (
    _ctc_posterior,
    _pred_posterior,
    encode_acoustic,
    encode_semantic,
    shrink_batch,
    translate_batch,
)
from .tensor import Tensor


def diff_le_k(shrunk_lengths, reference_lengths, k: int) -> float:
    """Fraction of utterances whose length difference is at most k."""
    shrunk = np.asarray(shrunk_lengths)
    ref = np.asarray(reference_lengths)
    if shrunk.size == 0 or shrunk.size != ref.size:
        raise ValueError(
            f"need equal non-empty length lists, got {shrunk.size} and {ref.size}"
        )
    return float(np.mean(np.abs(shrunk - ref) <= k))


@dataclass
class ShrinkQualityReport:
    diffs: np.ndarray
    frac_le: dict[int, float]
    mean_diff: float

    @classmethod
    def from_lengths(cls, shrunk_lengths, reference_lengths) -> "ShrinkQualityReport":
        diffs = np.abs(np.asarray(shrunk_lengths) - np.asarray(reference_lengths))
        return cls(
            diffs=diffs,
            frac_le={k: diff_le_k(shrunk_lengths, reference_lengths, k) for k in (0, 1, 2)},
            mean_diff=float(diffs.mean()),
        )


def _match_count(pred_boundaries, gold_boundaries, tolerance_frames: int) -> int:
    """Greedy one-to-one matches within +-tolerance (nearest gold, ties earlier)."""
    preds = sorted(int(p) for p in pred_boundaries)
    golds = [int(g) for g in gold_boundaries]
    taken = [False] * len(golds)
    matches = 0
    for p in preds:
        best = None
        best_dist = None
        for j, g in enumerate(golds):
            if taken[j] or abs(g - p) > tolerance_frames:
                continue
            dist = abs(g - p)
            if best is None or dist < best_dist or (dist == best_dist and g < golds[best]):
                best, best_dist = j, dist
        if best is not None:
            taken[best] = True
            matches += 1
    return matches


def boundary_prf(
    pred_boundaries, gold_boundaries, tolerance_frames: int
) -> tuple[float, float, float]:
    """Precision/recall/F1 of predicted boundaries; empty predictions score 0."""
    if tolerance_frames < 0:
        raise ValueError("tolerance must be >= 0")
    n_pred = len(list(pred_boundaries))
    n_gold = len(list(gold_boundaries))
    matches = _match_count(pred_boundaries, gold_boundaries, tolerance_frames)
    precision = matches / n_pred if n_pred else 0.0
    recall = matches / n_gold if n_gold else 0.0
    f1 = (
        2 * precision * recall / (precision + recall)
        if precision + recall > 0
        else 0.0
    )
    return precision, recall, f1


def _ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hypotheses, references, max_n: int = 4) -> float:
    """Corpus BLEU on token ids: clipped n-gram precision, add-one
    smoothing for n > 1, times the brevity penalty. Scale 0..100."""
    if len(hypotheses) != len(references) or not references:
        raise ValueError("need equally many hypotheses and references, at least one")
    if any(len(r) == 0 for r in references):
        raise ValueError("empty reference sentence")
    matched = np.zeros(max_n)
    total = np.zeros(max_n)
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp = [int(t) for t in hyp]
        ref = [int(t) for t in ref]
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            hyp_counts = _ngrams(hyp, n)
            ref_counts = _ngrams(ref, n)
            matched[n - 1] += sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())
            total[n - 1] += max(len(hyp) - n + 1, 0)
    if hyp_len == 0 or matched[0] == 0:
        return 0.0
    log_sum = math.log(matched[0] / total[0])
    for n in range(2, max_n + 1):
        log_sum += math.log((matched[n - 1] + 1.0) / (total[n - 1] + 1.0))
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_sum / max_n)


def token_accuracy(hypotheses, references) -> float:
    """Position-wise match fraction against the references (missing = wrong)."""
    matches = 0
    total = 0
    for hyp, ref in zip(hypotheses, references):
        total += len(ref)
        for i, r in enumerate(ref):
            if i < len(hyp) and int(hyp[i]) == int(r):
                matches += 1
    return matches / total if total else 0.0


@dataclass
class AttentionEntropyReport:
    per_layer: list[float]  # mean entropy of cross-attention per decoder layer

    def max_possible(self, memory_len: int) -> float:
        return math.log(memory_len)


def attention_entropy(
    attn_maps: list[np.ndarray], valid_rows: list[int], tol: float = 1e-6
) -> AttentionEntropyReport:
    """Head-averaged cross-attention entropy, averaged over target tokens.

    attn_maps holds one (B, H, T_y, S) array per decoder layer; row i of
    utterance b is used when i < valid_rows[b]. Rows must be stochastic
    over the unmasked memory (masked columns carry exactly zero weight).
    """
    per_layer = []
    for layer in attn_maps:
        rows = layer.mean(axis=1)  # (B, T_y, S), heads averaged
        entropies = []
        for b in range(rows.shape[0]):
            for i in range(min(valid_rows[b], rows.shape[1])):
                row = rows[b, i]
                if abs(row.sum() - 1.0) > tol:
                    raise ValueError(
                        f"attention row not normalized: sum={row.sum():.8f}"
                    )
                nz = row[row > 0]
                entropies.append(float(-(nz * np.log(nz)).sum()))
        per_layer.append(float(np.mean(entropies)) if entropies else 0.0)
    return AttentionEntropyReport(per_layer=per_layer)


# --------------------------------------------------------------- corpus-level


@dataclass
class EvalReport:
    ids: list[str]
    hypotheses: list[np.ndarray]
    references: list[np.ndarray]
    shrunk_lengths: list[int]
    reference_lengths: list[int]
    quality: ShrinkQualityReport
    precision: float
    recall: float
    f1: float
    bleu: float
    accuracy: float
    entropy: AttentionEntropyReport
    bd_probs: list[np.ndarray]
    theta: float

    CSV_SET = (
        "translations.csv",
        "shrink_quality.csv",
        "boundary_prf.csv",
        "attention_entropy.csv",
        "summary.csv",
    )

    def write_csvs(self, report_dir: str) -> list[str]:
        os.makedirs(report_dir, exist_ok=True)
        paths = []

        path = os.path.join(report_dir, "translations.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "hypothesis", "reference"])
            for uid, hyp, ref in zip(self.ids, self.hypotheses, self.references):
                w.writerow([uid, " ".join(map(str, hyp)), " ".join(map(str, ref))])
        paths.append(path)

        path = os.path.join(report_dir, "shrink_quality.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "shrunk_length", "reference_length", "diff"])
            for uid, s, r in zip(self.ids, self.shrunk_lengths, self.reference_lengths):
                w.writerow([uid, s, r, abs(s - r)])
        paths.append(path)

        path = os.path.join(report_dir, "boundary_prf.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["precision", "recall", "f1"])
            w.writerow([f"{self.precision:.6f}", f"{self.recall:.6f}", f"{self.f1:.6f}"])
        paths.append(path)

        path = os.path.join(report_dir, "attention_entropy.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "mean_entropy"])
            for i, e in enumerate(self.entropy.per_layer):
                w.writerow([i, f"{e:.6f}"])
        paths.append(path)

        path = os.path.join(report_dir, "summary.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "value"])
            w.writerow(["theta", self.theta])
            w.writerow(["bleu", f"{self.bleu:.4f}"])
            w.writerow(["token_accuracy", f"{self.accuracy:.6f}"])
            for k in (0, 1, 2):
                w.writerow([f"diff_le_{k}", f"{self.quality.frac_le[k]:.6f}"])
            w.writerow(["mean_length_diff", f"{self.quality.mean_diff:.6f}"])
            w.writerow(["boundary_f1", f"{self.f1:.6f}"])
        paths.append(path)
        return paths


def projected_gold_boundaries(utt: Utterance, factor: int) -> np.ndarray:
    """Gold frame boundaries mapped into the subsampled frame space."""
    return np.unique(utt.gold_boundaries // factor)


def evaluate_corpus(
    utterances: list[Utterance],
    params: Params,
    config: ModelConfig,
    theta: float | None = None,
    batch_frames: int = 4000,
    tolerance: int = 1,
) -> EvalReport:
    """Greedy-decode the corpus and compute every report metric."""
    theta = config.theta_infer if theta is None else theta
    ids, hyps, refs = [], [], []
    shrunk_lengths, ref_lengths = [], []
    bd_probs: list[np.ndarray] = []
    prec_n = rec_n = match_n = 0
    gold_total = pred_total = 0
    attn_by_layer: list[list[np.ndarray]] = [[] for _ in range(config.decoder_layers)]
    rows_per_batch: list[list[int]] = []
    all_matches = 0
    for batch in make_batches(utterances, batch_frames, seed=0, epoch=0):
        out = translate_batch(
            batch.frames, batch.frame_mask, batch.ids, params, config,
            theta=theta, collect_attn=True,
        )
        ids.extend(out.ids)
        hyps.extend(out.tokens)
        refs.extend(r[:-1] for r in _refs_of(batch))
        shrunk_lengths.extend(out.shrunk_lengths)
        ref_lengths.extend(len(z) for z in batch.transcriptions)
        bd_probs.extend(out.bd_probs)
        for li, layer_map in enumerate(out.attn_maps):
            attn_by_layer[li].append(layer_map)
        rows_per_batch.append(out.gen_lengths)
        for i, seg in enumerate(out.segmentations):
            gold = projected_gold_boundaries(
                _utt_by_id(utterances, batch.ids[i]), config.subsample_factor
            )
            pred = seg.boundary_frames if seg is not None else ()
            all_matches += _match_count(pred, gold, tolerance)
            pred_total += len(pred)
            gold_total += len(gold)
    precision = all_matches / pred_total if pred_total else 0.0
    recall = all_matches / gold_total if gold_total else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0

    entropy = _corpus_entropy(attn_by_layer, rows_per_batch)
    return EvalReport(
        ids=ids,
        hypotheses=hyps,
        references=refs,
        shrunk_lengths=shrunk_lengths,
        reference_lengths=ref_lengths,
        quality=ShrinkQualityReport.from_lengths(shrunk_lengths, ref_lengths),
        precision=precision,
        recall=recall,
        f1=f1,
        bleu=corpus_bleu(hyps, refs),
        accuracy=token_accuracy(hyps, refs),
        entropy=entropy,
        bd_probs=bd_probs,
        theta=theta,
    )


def _refs_of(batch):
    for i in range(batch.size):
        n = int(batch.target_mask[i].sum())
        yield batch.targets[i, :n]


def _utt_by_id(utterances: list[Utterance], uid: str) -> Utterance:
    for u in utterances:
        if u.uid == uid:
            return u
    raise KeyError(uid)


def _corpus_entropy(attn_by_layer, rows_per_batch) -> AttentionEntropyReport:
    per_layer = []
    n_layers = len(attn_by_layer)
    for li in range(n_layers):
        values = []
        for maps, rows in zip(attn_by_layer[li], rows_per_batch):
            rep = attention_entropy([maps], rows)
            values.append(rep.per_layer[0])
        per_layer.append(float(np.mean(values)) if values else 0.0)
    return AttentionEntropyReport(per_layer=per_layer)


# ------------------------------------------------------------ threshold sweep


@dataclass
class SweepResult:
    thetas: list[float]
    bleu: list[float]
    diff_le_2: list[float]
    mean_shrunk_length: list[float]
    histogram: np.ndarray  # counts per 0.1-wide bucket of BD probability
    total_frames: int

    def write_csvs(self, report_dir: str) -> list[str]:
        os.makedirs(report_dir, exist_ok=True)
        paths = []
        path = os.path.join(report_dir, "sweep.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["theta", "bleu", "diff_le_2", "mean_shrunk_length"])
            for i, t in enumerate(self.thetas):
                w.writerow([
                    f"{t:.3f}", f"{self.bleu[i]:.4f}", f"{self.diff_le_2[i]:.6f}",
                    f"{self.mean_shrunk_length[i]:.4f}",
                ])
        paths.append(path)
        path = os.path.join(report_dir, "histogram.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bucket_low", "bucket_high", "count"])
            for i, c in enumerate(self.histogram):
                w.writerow([f"{i / 10:.1f}", f"{(i + 1) / 10:.1f}", int(c)])
        paths.append(path)
        curves = {
            "sweep_bleu.dat": self.bleu,
            "sweep_diff2.dat": self.diff_le_2,
            "sweep_len.dat": self.mean_shrunk_length,
        }
        for name, ys in curves.items():
            path = os.path.join(report_dir, name)
            with open(path, "w") as fh:
                for t, v in zip(self.thetas, ys):
                    fh.write(f"{t:.3f} {v:.6f}\n")
            paths.append(path)
        return paths


def threshold_sweep(
    params: Params,
    utterances: list[Utterance],
    theta_grid: list[float],
    config: ModelConfig,
    batch_frames: int = 4000,
) -> SweepResult:
    """Run inference at each threshold; histogram the BD probabilities."""
    if any(not 0.0 < t < 1.0 for t in theta_grid):
        raise ConfigError(f"thresholds must lie in (0, 1): {theta_grid}")
    if sorted(theta_grid) != list(theta_grid):
        raise ConfigError("theta grid must be sorted ascending")
    bleu, diff2, mean_len = [], [], []
    histogram = np.zeros(10, dtype=np.int64)
    total_frames = 0
    for i, theta in enumerate(theta_grid):
        hyps, refs = [], []
        shrunk_lengths, ref_lengths = [], []
        for batch in make_batches(utterances, batch_frames, seed=0, epoch=0):
            out = translate_batch(
                batch.frames, batch.frame_mask, batch.ids, params, config, theta=theta
            )
            hyps.extend(out.tokens)
            refs.extend(list(_refs_of(batch)))
            shrunk_lengths.extend(out.shrunk_lengths)
            ref_lengths.extend(len(z) for z in batch.transcriptions)
            if i == 0:  # BD probabilities do not depend on theta
                for probs in out.bd_probs:
                    buckets = np.minimum((probs * 10).astype(int), 9)
                    np.add.at(histogram, buckets, 1)
                    total_frames += probs.size
        refs = [r[:-1] for r in refs]  # strip end-of-sequence
        bleu.append(corpus_bleu(hyps, refs))
        diff2.append(diff_le_k(shrunk_lengths, ref_lengths, 2))
        mean_len.append(float(np.mean(shrunk_lengths)))
    return SweepResult(
        thetas=list(theta_grid), bleu=bleu, diff_le_2=diff2,
        mean_shrunk_length=mean_len, histogram=histogram, total_frames=total_frames,
    )


# --------------------------------------------------------------- efficiency


@dataclass
class BenchRow:
    variant: str
    stage_ms: float
    stage_speedup: float
    total_ms: float
    total_speedup: float
    mem_peak_bytes: int
    mem_rel: float


@dataclass
class BenchResult:
    rows: list[BenchRow]
    repetitions: int
    batch_size: int

    def write_csv(self, path: str) -> str:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([
                "variant", "stage_ms", "stage_speedup", "total_ms",
                "total_speedup", "mem_peak_bytes", "mem_rel",
            ])
            for r in self.rows:
                w.writerow([
                    r.variant, f"{r.stage_ms:.3f}", f"{r.stage_speedup:.3f}",
                    f"{r.total_ms:.3f}", f"{r.total_speedup:.3f}",
                    r.mem_peak_bytes, f"{r.mem_rel:.3f}",
                ])
        return path


def _bench_stage(params, config, shrunk_states, shrunk_mask, decode_steps):
    """Semantic encoder + fixed-step greedy decode (the post-shrink stage)."""
    memory = encode_semantic(Tensor(shrunk_states), shrunk_mask, params, config)
    b = shrunk_states.shape[0]
    y = np.full((b, 1), EOS_ID, dtype=np.int64)
    for _ in range(decode_steps):
        logits, _ = decoder_forward(
            y, memory, shrunk_mask, params, "decoder",
            config.decoder_layers, config.n_heads,
        )
        nxt = np.argmax(logits.data[:, -1, :], axis=1)
        y = np.concatenate([y, nxt[:, None]], axis=1)
    return y


def efficiency_bench(
    params: Params,
    utterances: list[Utterance],
    config: ModelConfig,
    variants: list[str],
    repetitions: int = 20,
    batch_size: int = 16,
) -> BenchResult:
    """Median wall time and peak transient allocation of the post-shrink
    stage per shrinker variant, normalized to the no-shrink variant.

    The decode runs a fixed number of steps for every variant so the
    comparison isolates the memory-length effect. Timing is pinned to one
    BLAS thread when threadpoolctl is available.
    """
    if repetitions < 2:
        raise ConfigError("need at least 2 repetitions")
    variants = list(dict.fromkeys(["none"] + list(variants)))  # none first, dedup
    chosen = sorted(utterances, key=lambda u: u.uid)[:batch_size]
    batches = make_batches(chosen, max(u.num_frames for u in chosen) * batch_size, 0)
    batch = batches[0]
    decode_steps = int(max(len(u.translation) for u in chosen))

    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # fall back to whatever BLAS decides
        from contextlib import nullcontext

        def threadpool_limits(limits):  # noqa: ANN001
            return nullcontext()

    rows: dict[str, dict] = {}
    for variant in variants:
        cfg = replace(config, shrinker=variant)
        t_full0 = time.perf_counter()
        h, sub_mask = encode_acoustic(batch.frames, batch.frame_mask, params, cfg)
        ctc_probs = _ctc_posterior(h, params) if variant == "ctc_greedy" else None
        pred_probs = _pred_posterior(h, params) if variant == "boundary" else None
        shrunk = shrink_batch(
            h, sub_mask, params, cfg, batch.ids, pred_probs, ctc_probs, None,
            cfg.theta_infer,
        )
        shrunk_states = shrunk.states.data.copy()
        shrunk_mask = shrunk.mask
        _bench_stage(params, cfg, shrunk_states, shrunk_mask, decode_steps)
        t_full = time.perf_counter() - t_full0  # adapt stage + one full decode

        times = []
        with threadpool_limits(limits=1):
            for _ in range(repetitions):
                t0 = time.perf_counter()
                _bench_stage(params, cfg, shrunk_states, shrunk_mask, decode_steps)
                times.append(time.perf_counter() - t0)
        tracemalloc.start()
        _bench_stage(params, cfg, shrunk_states, shrunk_mask, decode_steps)
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()
        rows[variant] = {
            "stage_s": float(np.median(times)),
            "total_s": t_full,
            "mem": int(peak),
        }

    base = rows["none"]
    out = []
    for variant in variants:
        r = rows[variant]
        out.append(
            BenchRow(
                variant=variant,
                stage_ms=r["stage_s"] * 1000.0,
                stage_speedup=base["stage_s"] / r["stage_s"],
                total_ms=r["total_s"] * 1000.0,
                total_speedup=base["total_s"] / r["total_s"],
                mem_peak_bytes=r["mem"],
                mem_rel=r["mem"] / base["mem"] if base["mem"] else 0.0,
            )
        )
    return BenchResult(rows=out, repetitions=repetitions, batch_size=batch_size)
