"""Segment pooling: collapse frame runs into one vector per segment.

A segmentation partitions the frame axis into inclusive spans, each ending
at a boundary frame except that frames after the last boundary are merged
into the final span (this keeps the span count equal to the boundary count,
which forced-length training relies on). Pooling is a convex combination of
the span's frames: uniform, or softmax-weighted by non-blank probability.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from .errors import ShapeError
from .tensor import Tensor


@dataclass(frozen=True)
class Segmentation:
    boundary_frames: tuple[int, ...]
    spans: tuple[tuple[int, int], ...]  # inclusive (start, end) frame ranges
    source_length: int
    threshold_used: float | None = None

    @property
    def num_segments(self) -> int:
        return len(self.spans)


@dataclass
class ShrunkSequence:
    states: Tensor  # (T_s, d)
    spans: tuple[tuple[int, int], ...]
    weights: list[np.ndarray] = field(default_factory=list)  # pooling weights per span

    @property
    def num_segments(self) -> int:
        return self.states.shape[0]


def spans_from_boundaries(
    boundary_frames: list[int], t_x: int, threshold_used: float | None = None
) -> Segmentation:
    """Spans cover (prev boundary, boundary]; trailing frames merge into the last.

    An empty boundary set yields one catch-all span over all frames.
    """
    bounds = list(boundary_frames)
    if any(b2 <= b1 for b1, b2 in zip(bounds, bounds[1:])):
        raise ValueError(f"boundary frames must be sorted and unique: {bounds}")
    if bounds and (bounds[0] < 0 or bounds[-1] >= t_x):
        raise ValueError(f"boundary frames out of range [0, {t_x}): {bounds}")
    if t_x < 1:
        raise ShapeError("cannot segment an empty sequence")
    if not bounds:
        return Segmentation((), ((0, t_x - 1),), t_x, threshold_used)
    spans = []
    prev = -1
    for b in bounds:
        spans.append((prev + 1, b))
        prev = b
    if prev < t_x - 1:  # trailing merge
        start, _ = spans[-1]
        spans[-1] = (start, t_x - 1)
    return Segmentation(tuple(bounds), tuple(spans), t_x, threshold_used)


def weighted_shrink(
    states: Tensor, seg: Segmentation, blank_probs: Tensor, mu: float
) -> ShrunkSequence:
    """Pool each span, weighting frames by softmax of mu * (1 - p_blank).

    mu = 0 reduces to the plain span mean; large mu concentrates the pool
    on the span's least-blank frame. Gradients flow through both the
    states and the weights.
    """
    if mu < 0:
        raise ValueError(f"temperature must be >= 0, got {mu}")
    t_x = states.shape[0]
    if seg.source_length != t_x or blank_probs.shape[0] != t_x:
        raise ShapeError(
            f"segmentation over {seg.source_length} frames, states {t_x}, "
            f"blank probs {blank_probs.shape[0]}"
        )
    scores = tt.mul(blank_probs, -mu)  # mu*(1-bk) = mu - mu*bk; shift-invariant
    # subtracting the global max keeps exp() small without changing any
    # within-span softmax (numerator and denominator share the factor)
    shifted = tt.exp(scores + Tensor(-scores.data.max()))
    seg_matrix = np.zeros((seg.num_segments, t_x))
    for i, (a, b) in enumerate(seg.spans):
        seg_matrix[i, a : b + 1] = 1.0
    masked = Tensor(seg_matrix) * shifted.reshape(1, t_x)  # (T_s, T_x)
    denom = tt.tsum(masked, axis=1, keepdims=True)
    weights = masked / denom
    pooled = weights @ states
    return ShrunkSequence(
        states=pooled,
        spans=seg.spans,
        weights=[weights.data[i, a : b + 1].copy() for i, (a, b) in enumerate(seg.spans)],
    )


def fixed_rate_shrink(states: Tensor, rate: int) -> ShrunkSequence:
    """Mean-pool contiguous chunks of `rate` frames; the last may be shorter."""
    if rate < 1:
        raise ValueError(f"rate must be >= 1, got {rate}")
    t_x = states.shape[0]
    starts = list(range(0, t_x, rate))
    spans = tuple((a, min(a + rate, t_x) - 1) for a in starts)
    return mean_pool(states, spans)


def ctc_greedy_shrink(states: Tensor, path_labels: np.ndarray, blank: int) -> ShrunkSequence:
    """Mean-pool maximal same-label runs of the greedy path, dropping blanks.

    An all-blank path degenerates to a single pool over every frame.
    """
    t_x = states.shape[0]
    if path_labels.shape[0] != t_x:
        raise ShapeError(f"path length {path_labels.shape[0]} vs states {t_x}")
    spans = []
    start = 0
    for t in range(1, t_x + 1):
        if t == t_x or path_labels[t] != path_labels[start]:
            if path_labels[start] != blank:
                spans.append((start, t - 1))
            start = t
    if not spans:
        spans = [(0, t_x - 1)]
    return mean_pool(states, tuple(spans))


def mean_pool(states: Tensor, spans: tuple[tuple[int, int], ...]) -> ShrunkSequence:
    t_x = states.shape[0]
    seg_matrix = np.zeros((len(spans), t_x))
    for i, (a, b) in enumerate(spans):
        seg_matrix[i, a : b + 1] = 1.0 / (b - a + 1)
    pooled = Tensor(seg_matrix) @ states
    return ShrunkSequence(
        states=pooled,
        spans=spans,
        weights=[seg_matrix[i, a : b + 1].copy() for i, (a, b) in enumerate(spans)],
    )
