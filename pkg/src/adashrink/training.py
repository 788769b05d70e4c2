"""Training loop: Adam with inverse-square-root warmup, periodic binary
checkpoints, a full-precision resume sidecar, and a CSV metrics log.

The optimizer steps on the already-normalized batch loss (per-token /
per-frame, see forward_train), so the learning rate is independent of
batch composition. A non-finite loss aborts the run; the most recent
periodic checkpoint stays on disk.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import save_params
from .config import STAGES, ModelConfig, TrainConfig
from .data import Utterance, make_batches
from .errors import ConfigError, NumericError
from .layers import Params
from .model import forward_train
from .tensor import Tensor

METRICS_HEADER = ["step", "l_st", "l_ctc", "l_pred", "l_total", "lr", "wall_ms"]
METRICS_NOTE = (
    "# losses are batch-normalized: l_st per target token, l_ctc per source token, "
    "l_pred per valid frame; l_total = l_st + alpha*l_ctc + beta*l_pred"
)


def lr_at(step: int, base: float, warmup: int) -> float:
    """Linear warmup to `base`, then inverse-square-root decay."""
    if step < 1:
        raise ValueError("steps are 1-based")
    return base * min(step / warmup, (warmup / step) ** 0.5)


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Params) -> "AdamState":
        return cls(
            step=0,
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
        )


def adam_step(
    params: Params,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.98,
    eps: float = 1e-9,
) -> None:
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        state.m[name] = beta1 * state.m[name] + (1 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1 - beta2) * g * g
        mhat = state.m[name] / bc1
        vhat = state.v[name] / bc2
        p.data -= lr * mhat / (np.sqrt(vhat) + eps)
        p.grad = None


@dataclass
class TrainResult:
    steps_done: int
    final_checkpoint: str
    metrics_path: str
    last_losses: dict


def save_train_state(path: str, params: Params, state: AdamState) -> None:
    """Full-precision sidecar so a resumed run is bit-identical."""
    payload = {"__step__": np.array([state.step])}
    for name, p in params.items():
        payload[f"p::{name}"] = p.data
        payload[f"m::{name}"] = state.m[name]
        payload[f"v::{name}"] = state.v[name]
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        np.savez(fh, **payload)
    os.replace(tmp, path)


def load_train_state(path: str) -> tuple[Params, AdamState]:
    with np.load(path) as archive:
        step = int(archive["__step__"][0])
        params: Params = {}
        state = AdamState(step=step)
        for key in archive.files:
            if key.startswith("p::"):
                params[key[3:]] = Tensor(archive[key].copy(), requires_grad=True)
            elif key.startswith("m::"):
                state.m[key[3:]] = archive[key].copy()
            elif key.startswith("v::"):
                state.v[key[3:]] = archive[key].copy()
    return params, state


def train_loop(
    utterances: list[Utterance],
    params: Params,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    stage: str,
    out_dir: str,
    resume_state: AdamState | None = None,
    start_step: int = 0,
    quiet: bool = False,
) -> TrainResult:
    """Run `train_cfg.steps` optimizer steps over epoch-reshuffled batches."""
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}; expected one of {STAGES}")
    os.makedirs(out_dir, exist_ok=True)
    metrics_path = os.path.join(out_dir, "metrics.csv")
    fresh_log = start_step == 0 or not os.path.exists(metrics_path)
    log = open(metrics_path, "w" if fresh_log else "a", newline="")
    writer = csv.writer(log)
    if fresh_log:
        log.write(METRICS_NOTE + "\n")
        writer.writerow(METRICS_HEADER)

    state = resume_state if resume_state is not None else AdamState.for_params(params)
    step = start_step
    epoch = _epoch_of(step, utterances, train_cfg)
    final_ckpt = os.path.join(out_dir, "ckpt.adts")
    last: dict = {}
    try:
        while step < train_cfg.steps:
            batches = make_batches(utterances, train_cfg.batch_frames, train_cfg.seed, epoch)
            skip = _steps_into_epoch(step, len(batches))
            for batch in batches[skip:]:
                t0 = time.perf_counter()
                step += 1
                out = forward_train(batch, params, model_cfg, stage)
                if not np.isfinite(out.loss.data).all():
                    raise NumericError(f"non-finite loss at step {step}")
                out.loss.backward()
                adam_step(params, state, lr_at(step, train_cfg.lr, train_cfg.warmup_steps))
                wall_ms = (time.perf_counter() - t0) * 1000.0
                last = {
                    "l_st": out.l_st, "l_ctc": out.l_ctc,
                    "l_pred": out.l_pred, "l_total": out.l_total,
                }
                if step % train_cfg.log_every == 0 or step == train_cfg.steps:
                    writer.writerow([
                        step, f"{out.l_st:.6f}", f"{out.l_ctc:.6f}", f"{out.l_pred:.6f}",
                        f"{out.l_total:.6f}",
                        f"{lr_at(step, train_cfg.lr, train_cfg.warmup_steps):.8f}",
                        f"{wall_ms:.1f}",
                    ])
                    log.flush()
                    if not quiet:
                        print(f"[{stage}] step {step}/{train_cfg.steps} "
                              f"l_total={out.l_total:.4f}")
                if step % train_cfg.save_every == 0:
                    save_params(params, os.path.join(out_dir, f"ckpt_step{step}.adts"))
                    save_train_state(os.path.join(out_dir, "train_state.npz"), params, state)
                if step >= train_cfg.steps:
                    break
            epoch += 1
    finally:
        log.close()
    save_params(params, final_ckpt)
    save_train_state(os.path.join(out_dir, "train_state.npz"), params, state)
    return TrainResult(
        steps_done=step, final_checkpoint=final_ckpt,
        metrics_path=metrics_path, last_losses=last,
    )


def _epoch_of(step: int, utterances: list[Utterance], cfg: TrainConfig) -> int:
    per_epoch = len(make_batches(utterances, cfg.batch_frames, cfg.seed, 0))
    return step // per_epoch if per_epoch else 0


def _steps_into_epoch(step: int, per_epoch: int) -> int:
    return step % per_epoch if per_epoch else 0
