"""Command-line entry point.

Subcommands: synth, train, eval, sweep, bench, inspect. Every run writes a
manifest.json listing the resolved configuration, seed, and produced
artifacts. Exit codes: 0 success, 2 usage or configuration problems,
3 numeric failure during training. Flags override config-file values.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .boundary import BD, BK, OT, BoundaryPosterior, detect_boundaries
from .checkpoint import load_params
from .config import (
    ModelConfig,
    STAGES,
    TrainConfig,
    config_snapshot,
    load_config,
    override,
)
from .data import SynthSpec, load_corpus, save_corpus, synth_corpus
from .errors import (
    AdmissibilityError,
    CheckpointError,
    ConfigError,
    CorpusError,
    NumericError,
    ShapeError,
)
from .evaluate import efficiency_bench, evaluate_corpus, threshold_sweep
from .model import (
    _ctc_posterior,
    _pred_posterior,
    encode_acoustic,
    expected_shapes,
    init_from_pretrained,
    init_model,
)
from .training import load_train_state, train_loop

DEFAULT_CONFIG_ENV = "ADASHRINK_CONFIG"

INSPECT_HEADER = [
    "frame", "p_bk", "p_bd", "p_ot", "is_boundary", "is_gold_boundary", "ctc_top_label",
    "ctc_top_prob", "ctc_blank_prob",
]


class _Manifest:
    def __init__(self, command: str, seed: int, snapshot: dict):
        self.record = {
            "command": command,
            "argv": sys.argv[1:],
            "seed": seed,
            "config": snapshot,
            "started_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
            "artifacts": [],
        }

    def add(self, *paths: str) -> None:
        self.record["artifacts"].extend(os.path.abspath(p) for p in paths)

    def write(self, out_dir: str) -> str:
        self.record["finished_at"] = time.strftime("%Y-%m-%dT%H:%M:%S")
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, "manifest.json")
        tmp = path + ".tmp"
        with open(tmp, "w") as fh:
            json.dump(self.record, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
        return path


def _load_spec(path: str) -> SynthSpec:
    kwargs = {}
    fields = {f: t for f, t in SynthSpec.__annotations__.items()}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
            key, raw = (p.strip() for p in line.split("=", 1))
            if key not in fields:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            kind = fields[key]
            kwargs[key] = raw if kind == "str" else (float(raw) if kind == "float" else int(raw))
    spec = SynthSpec(**kwargs)
    spec.validate()
    return spec


def _resolve_configs(args) -> tuple[ModelConfig, TrainConfig]:
    path = getattr(args, "config", None) or os.environ.get(DEFAULT_CONFIG_ENV)
    if path:
        model_cfg, train_cfg = load_config(path)
    else:
        model_cfg, train_cfg = ModelConfig(), TrainConfig()
    model_overrides = {
        k: getattr(args, k, None)
        for k in ("theta_infer", "shrinker", "alpha", "beta", "mu")
    }
    train_overrides = {
        k: getattr(args, k, None)
        for k in ("seed", "steps", "lr", "warmup_steps", "batch_frames", "corpus")
    }
    model_cfg = override(model_cfg, **model_overrides)
    train_cfg = override(train_cfg, **train_overrides)
    return model_cfg, train_cfg


def _load_model(ckpt: str, config: ModelConfig, arch: str = "st", need_ctc: bool = False):
    optional = () if need_ctc else ("ctc.",)
    return load_params(ckpt, expected_shapes(config, arch), optional_prefixes=optional)


def cmd_synth(args) -> int:
    spec = _load_spec(args.spec) if args.spec else SynthSpec()
    spec.validate()
    corpus = synth_corpus(spec)
    manifest = _Manifest("synth", spec.seed, dict(spec.__dict__))
    paths = save_corpus(corpus, args.out)
    manifest.add(*paths)
    manifest.add(manifest.write(args.out))
    print(f"wrote {len(corpus.utterances)} utterances to {args.out}")
    return 0


def cmd_train(args) -> int:
    model_cfg, train_cfg = _resolve_configs(args)
    if not train_cfg.corpus:
        raise ConfigError("no corpus: set --corpus or the corpus= key")
    corpus = load_corpus(train_cfg.corpus)
    model_cfg = override(
        model_cfg,
        d_feat=corpus.d_feat,
        source_vocab=corpus.source_vocab,
        target_vocab=corpus.target_vocab,
    )
    stage = args.stage
    arch = {"asr_pretrain": "asr", "mt_pretrain": "mt"}.get(stage, "st")

    resume_state = None
    start_step = 0
    if args.resume:
        state_path = os.path.join(args.out, "train_state.npz")
        if not os.path.exists(state_path):
            raise ConfigError(f"nothing to resume: {state_path} missing")
        params, resume_state = load_train_state(state_path)
        start_step = resume_state.step
        print(f"resuming at step {start_step}")
    elif stage in ("st_finetune", "single_stage"):
        inits = dict(item.split("=", 1) for item in (args.init or []))
        unknown = set(inits) - {"asr", "mt"}
        if unknown:
            raise ConfigError(f"unknown --init keys: {sorted(unknown)}")
        asr = load_params(inits["asr"], expected_shapes(model_cfg, "asr")) if "asr" in inits else None
        mt = load_params(inits["mt"], expected_shapes(model_cfg, "mt")) if "mt" in inits else None
        if asr is None and mt is None:
            print("warning: fine-tuning from fresh initialization (no --init given)")
        params, provenance = init_from_pretrained(model_cfg, train_cfg.seed, asr, mt)
        counts = {}
        for src in provenance.values():
            counts[src] = counts.get(src, 0) + 1
        print(f"parameter provenance: {counts}")
    else:
        params = init_model(model_cfg, train_cfg.seed, arch)

    manifest = _Manifest("train", train_cfg.seed, config_snapshot(model_cfg, train_cfg))
    result = train_loop(
        corpus.split("train"), params, model_cfg, train_cfg, stage, args.out,
        resume_state=resume_state, start_step=start_step,
    )
    manifest.add(result.final_checkpoint, result.metrics_path)
    manifest.add(manifest.write(args.out))
    print(f"finished {result.steps_done} steps; checkpoint at {result.final_checkpoint}")
    return 0


def cmd_eval(args) -> int:
    model_cfg, train_cfg = _resolve_configs(args)
    corpus = load_corpus(args.corpus)
    model_cfg = override(
        model_cfg,
        d_feat=corpus.d_feat,
        source_vocab=corpus.source_vocab,
        target_vocab=corpus.target_vocab,
    )
    params = _load_model(args.ckpt, model_cfg, need_ctc=model_cfg.shrinker == "ctc_greedy")
    theta = args.theta if args.theta is not None else model_cfg.theta_infer
    split = corpus.split(args.split)
    if not split:
        raise ConfigError(f"corpus has no {args.split!r} utterances")
    report = evaluate_corpus(split, params, model_cfg, theta=theta)
    manifest = _Manifest("eval", train_cfg.seed, config_snapshot(model_cfg, train_cfg))
    manifest.record["theta"] = theta
    paths = report.write_csvs(args.report)
    manifest.add(*paths)
    manifest.add(manifest.write(args.report))
    print(
        f"theta={theta}  bleu={report.bleu:.2f}  acc={report.accuracy:.4f}  "
        f"diff<=2={report.quality.frac_le[2]:.4f}  f1={report.f1:.4f}"
    )
    return 0


def _parse_grid(text: str) -> list[float]:
    try:
        lo, hi, step = (float(v) for v in text.split(":"))
    except ValueError as exc:
        raise ConfigError(f"grid must be lo:hi:step, got {text!r}") from exc
    if step <= 0 or hi < lo:
        raise ConfigError(f"bad grid {text!r}")
    count = int(round((hi - lo) / step)) + 1
    return [round(lo + i * step, 10) for i in range(count)]


def cmd_sweep(args) -> int:
    model_cfg, train_cfg = _resolve_configs(args)
    corpus = load_corpus(args.corpus)
    model_cfg = override(
        model_cfg,
        d_feat=corpus.d_feat,
        source_vocab=corpus.source_vocab,
        target_vocab=corpus.target_vocab,
    )
    params = _load_model(args.ckpt, model_cfg)
    grid = _parse_grid(args.grid)
    result = threshold_sweep(params, corpus.split(args.split), grid, model_cfg)
    manifest = _Manifest("sweep", train_cfg.seed, config_snapshot(model_cfg, train_cfg))
    paths = result.write_csvs(args.report)
    manifest.add(*paths)
    manifest.add(manifest.write(args.report))
    confident = (result.histogram[0] + result.histogram[9]) / max(result.total_frames, 1)
    print(f"swept {len(grid)} thresholds; confident-frame fraction {confident:.3f}")
    return 0


def cmd_bench(args) -> int:
    model_cfg, train_cfg = _resolve_configs(args)
    corpus = load_corpus(args.corpus)
    model_cfg = override(
        model_cfg,
        d_feat=corpus.d_feat,
        source_vocab=corpus.source_vocab,
        target_vocab=corpus.target_vocab,
    )
    variants = args.variants.split(",") if args.variants else ["fixed", "ctc_greedy", "boundary"]
    need_ctc = "ctc_greedy" in variants
    params = _load_model(args.ckpt, model_cfg, need_ctc=need_ctc)
    result = efficiency_bench(
        params, corpus.split(args.split), model_cfg, variants,
        repetitions=args.repetitions, batch_size=args.batch_size,
    )
    os.makedirs(args.report, exist_ok=True)
    manifest = _Manifest("bench", train_cfg.seed, config_snapshot(model_cfg, train_cfg))
    path = result.write_csv(os.path.join(args.report, "bench.csv"))
    manifest.add(path)
    manifest.add(manifest.write(args.report))
    for row in result.rows:
        print(
            f"{row.variant:>10}: stage {row.stage_ms:8.2f} ms "
            f"(speedup {row.stage_speedup:4.2f}x, mem {row.mem_rel:4.2f})"
        )
    return 0


def cmd_inspect(args) -> int:
    model_cfg, train_cfg = _resolve_configs(args)
    corpus = load_corpus(args.corpus)
    model_cfg = override(
        model_cfg,
        d_feat=corpus.d_feat,
        source_vocab=corpus.source_vocab,
        target_vocab=corpus.target_vocab,
    )
    utt = next((u for u in corpus.utterances if u.uid == args.utterance), None)
    if utt is None:
        raise ConfigError(f"unknown utterance id {args.utterance!r}")
    try:
        params = _load_model(args.ckpt, model_cfg, need_ctc=True)
        has_ctc = True
    except CheckpointError:
        params = _load_model(args.ckpt, model_cfg, need_ctc=False)
        has_ctc = False

    frames = utt.frames[None, :, :]
    mask = np.ones((1, utt.num_frames))
    h, sub_mask = encode_acoustic(frames, mask, params, model_cfg)
    n = int(sub_mask.sum())
    pred_probs = _pred_posterior(h, params)
    ctc_probs = _ctc_posterior(h, params) if has_ctc else None
    pred_b = BoundaryPosterior(probs=pred_probs[0, :n, :])
    seg = detect_boundaries(pred_b, model_cfg.theta_infer)
    gold = set((utt.gold_boundaries // model_cfg.subsample_factor).tolist())
    chosen = set(seg.boundary_frames)

    os.makedirs(args.report, exist_ok=True)
    out_path = os.path.join(args.report, f"inspect_{utt.uid}.csv")
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(INSPECT_HEADER)
        for t in range(n):
            row = pred_probs.data[0, t]
            if ctc_probs is not None:
                cp = ctc_probs.data[0, t]
                top = int(np.argmax(cp))
                ctc_cols = [top, f"{cp[top]:.6f}", f"{cp[-1]:.6f}"]
            else:
                ctc_cols = ["", "", ""]
            w.writerow(
                [t, f"{row[BK]:.6f}", f"{row[BD]:.6f}", f"{row[OT]:.6f}",
                 int(t in chosen), int(t in gold)] + ctc_cols
            )
    manifest = _Manifest("inspect", train_cfg.seed, config_snapshot(model_cfg, train_cfg))
    manifest.add(out_path)
    manifest.add(manifest.write(args.report))
    print(f"wrote {out_path} ({n} frames, {len(chosen)} boundaries, {len(gold)} gold)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adashrink",
        description="boundary-guided shrinking speech-to-text translation workbench",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--spec", help="key=value synthesis spec file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--config")
    p.add_argument("--stage", required=True, choices=STAGES)
    p.add_argument("--init", nargs="*", metavar="KIND=CKPT",
                   help="asr=<ckpt> and/or mt=<ckpt> for fine-tuning")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--corpus")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--warmup-steps", dest="warmup_steps", type=int)
    p.add_argument("--batch-frames", dest="batch_frames", type=int)
    p.add_argument("--shrinker")
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--mu", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus split")
    p.add_argument("--config")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--theta", type=float)
    p.add_argument("--split", default="test")
    p.add_argument("--shrinker")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="threshold sweep plus BD-probability histogram")
    p.add_argument("--config")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--grid", default="0.1:0.9:0.1")
    p.add_argument("--split", default="test")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bench", help="relative speed/memory of shrinker variants")
    p.add_argument("--config")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--variants", help="comma list; 'none' is always included")
    p.add_argument("--repetitions", type=int, default=20)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=16)
    p.add_argument("--split", default="test")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("inspect", help="per-frame probabilities for one utterance")
    p.add_argument("--config")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--utterance", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CorpusError, CheckpointError, ShapeError, AdmissibilityError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
