"""Alignment-free transcription loss and greedy decoding.

The loss marginalizes over every frame-to-token path that collapses to
the reference: consecutive repeats are merged, then blanks removed. The
forward-backward recursion runs in log space over the blank-interleaved
state lattice; its gradient with respect to the per-frame probabilities
is -gamma/p, where gamma is the state-posterior mass of each label.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AdmissibilityError, ShapeError
from .layers import Params, linear
from .tensor import Tensor, _node, softmax

PROB_FLOOR = 1e-10  # probabilities are clamped here before any log


@dataclass(frozen=True)
class SourceTranscription:
    """Reference token ids; never contains the blank id."""

    tokens: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "tokens", np.asarray(self.tokens, dtype=np.int64))
        if self.tokens.ndim != 1 or self.tokens.size < 1:
            raise ShapeError(f"transcription must be a non-empty 1-d id list")

    def __len__(self) -> int:
        return int(self.tokens.size)


@dataclass
class CtcPosterior:
    """Per-frame distributions over vocabulary + blank; rows sum to one."""

    probs: Tensor  # (T, V+1)
    blank_index: int

    @property
    def num_frames(self) -> int:
        return self.probs.shape[0]

    def validate(self, tol: float = 1e-9) -> None:
        p = self.probs.data
        if p.ndim != 2:
            raise ShapeError(f"posterior must be (T, V+1), got {p.shape}")
        if not (self.blank_index == p.shape[1] - 1):
            raise ShapeError(f"blank index {self.blank_index} must be last column")
        if np.any(p < -tol) or np.any(p > 1 + tol):
            raise ValueError("posterior entries outside [0, 1]")
        if np.max(np.abs(p.sum(axis=1) - 1.0)) > tol:
            raise ValueError("posterior rows do not sum to 1")


@dataclass(frozen=True)
class CtcPath:
    """One label per frame, over vocabulary + blank."""

    labels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))

    def __len__(self) -> int:
        return int(self.labels.size)


def ctc_head_forward(acoustic_states: Tensor, params: Params, vocab_size: int) -> CtcPosterior:
    """Project encoder states to vocab+blank logits and row-softmax them."""
    logits = linear(acoustic_states, params, "ctc.proj")
    if logits.shape[-1] != vocab_size + 1:
        raise ShapeError(
            f"ctc head emits {logits.shape[-1]} labels, expected {vocab_size + 1}"
        )
    return CtcPosterior(probs=softmax(logits, axis=-1), blank_index=vocab_size)


def min_admissible_frames(tokens: np.ndarray) -> int:
    """Tokens plus one separating blank per immediate repeat."""
    repeats = int(np.sum(tokens[1:] == tokens[:-1])) if tokens.size > 1 else 0
    return int(tokens.size) + repeats


def _extended_labels(tokens: np.ndarray, blank: int) -> np.ndarray:
    ext = np.full(2 * tokens.size + 1, blank, dtype=np.int64)
    ext[1::2] = tokens
    return ext


def ctc_loss(posterior: CtcPosterior, target: SourceTranscription) -> Tensor:
    """Negative log-probability of all paths collapsing to the target.

    Gradients flow into the posterior probabilities (and through them to
    the head logits). Raises AdmissibilityError when the frame count
    cannot fit the target, which is a data problem rather than a numeric
    failure.
    """
    tokens = target.tokens
    t_x = posterior.num_frames
    needed = min_admissible_frames(tokens)
    if t_x < needed:
        raise AdmissibilityError(
            f"{t_x} frames cannot align a transcription needing >= {needed}"
        )
    blank = posterior.blank_index
    if np.any(tokens >= blank) or np.any(tokens < 0):
        raise ValueError("transcription ids must lie in the non-blank vocabulary")

    probs = posterior.probs
    p = np.maximum(probs.data, PROB_FLOOR)
    logp = np.log(p)
    ext = _extended_labels(tokens, blank)
    s = ext.size

    # which states allow the diagonal skip from s-2
    can_skip = np.zeros(s, dtype=bool)
    can_skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])

    ninf = -np.inf
    alpha = np.full((t_x, s), ninf)
    alpha[0, 0] = logp[0, ext[0]]
    if s > 1:
        alpha[0, 1] = logp[0, ext[1]]
    for t in range(1, t_x):
        stay = alpha[t - 1]
        step = np.concatenate(([ninf], alpha[t - 1, :-1]))
        skip = np.concatenate(([ninf, ninf], alpha[t - 1, :-2]))
        skip = np.where(can_skip, skip, ninf)
        alpha[t] = np.logaddexp(np.logaddexp(stay, step), skip) + logp[t, ext]

    log_z = np.logaddexp(alpha[t_x - 1, s - 1], alpha[t_x - 1, s - 2] if s > 1 else ninf)

    # beta excludes the emission at its own frame, so alpha*beta sums to Z per frame
    beta = np.full((t_x, s), ninf)
    beta[t_x - 1, s - 1] = 0.0
    if s > 1:
        beta[t_x - 1, s - 2] = 0.0
    for t in range(t_x - 2, -1, -1):
        emit = beta[t + 1] + logp[t + 1, ext]
        stay = emit
        step = np.concatenate((emit[1:], [ninf]))
        skip = np.concatenate((emit[2:], [ninf, ninf]))
        skip_ok = np.zeros(s, dtype=bool)
        skip_ok[: s - 2] = can_skip[2:]
        skip = np.where(skip_ok, skip, ninf)
        beta[t] = np.logaddexp(np.logaddexp(stay, step), skip)

    # per-frame, per-label posterior mass gamma; exp(-inf) vanishes cleanly
    log_q = alpha + beta  # (T, S): total path mass through each state
    mass = np.exp(log_q - log_z - logp[:, ext])
    grad_p = np.zeros_like(p)
    t_idx = np.repeat(np.arange(t_x), s)
    lab_idx = np.tile(ext, t_x)
    np.add.at(grad_p, (t_idx, lab_idx), mass.reshape(-1))
    grad_p = -grad_p  # dL/dp with L = -log Z

    loss_val = -log_z

    def bk(g):
        if probs.grad is None:
            probs.grad = np.zeros_like(probs.data)
        probs.grad += g * grad_p * (probs.data > PROB_FLOOR)

    return _node(np.array(loss_val), (probs,), bk)


def collapse(path: CtcPath, blank: int) -> np.ndarray:
    """Merge consecutive repeats, then drop blanks."""
    labels = path.labels
    if labels.size == 0:
        return labels.copy()
    keep = np.ones(labels.size, dtype=bool)
    keep[1:] = labels[1:] != labels[:-1]
    dedup = labels[keep]
    return dedup[dedup != blank]


def greedy_path(posterior: CtcPosterior) -> CtcPath:
    """Per-frame argmax; ties go to the lower label id (blank is last, so
    any tied non-blank wins over blank)."""
    return CtcPath(labels=np.argmax(posterior.probs.data, axis=1))


def ctc_greedy_boundaries(path: CtcPath, blank: int):
    """Label changes on the greedy path, read as word boundaries.

    Frame t is a boundary when its label differs from the next frame's
    and is not blank; the last non-blank frame always terminates a word.
    Returns the shared Segmentation over all frames.
    """
    from .shrink import spans_from_boundaries

    labels = path.labels
    t_x = labels.size
    bounds = []
    for t in range(t_x - 1):
        if labels[t] != blank and labels[t] != labels[t + 1]:
            bounds.append(t)
    nonblank = np.nonzero(labels != blank)[0]
    if nonblank.size:
        last = int(nonblank[-1])
        if last not in bounds:
            bounds.append(last)
    return spans_from_boundaries(sorted(bounds), t_x)


def posterior_to_csv(posterior: CtcPosterior, path: str) -> None:
    """Dump per-frame probabilities for inspection: frame, then V+1 columns."""
    p = posterior.probs.data
    header = "frame," + ",".join(
        [f"p_{i}" for i in range(p.shape[1] - 1)] + ["p_blank"]
    )
    rows = np.column_stack([np.arange(p.shape[0]), p])
    np.savetxt(path, rows, delimiter=",", header=header, comments="")
