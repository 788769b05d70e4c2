"""Word-boundary prediction over acoustic frames.

A three-label head classifies every frame as blank (<BK>), word boundary
(<BD>), or other (<OT>). Training targets are soft: they are derived from
the transcription-loss posteriors, with the boundary mass of frame t being
the probability that a non-blank label ends at t, i.e. differs from the
label at t+1. The targets carry no gradient back into the posterior.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .ctc import PROB_FLOOR, CtcPosterior
from .errors import ShapeError
from .layers import Params, linear
from .shrink import Segmentation, spans_from_boundaries
from .tensor import Tensor

BK, BD, OT = 0, 1, 2  # label order in all 3-way distributions


@dataclass(frozen=True)
class SoftBoundaryTargets:
    """Per-frame (BK, BD, OT) target rows; plain arrays, gradient-free."""

    probs: np.ndarray  # (T, 3)

    @property
    def num_frames(self) -> int:
        return self.probs.shape[0]


@dataclass
class BoundaryPosterior:
    """Predictor output: per-frame (BK, BD, OT) rows on the simplex."""

    probs: Tensor  # (T, 3)

    @property
    def num_frames(self) -> int:
        return self.probs.shape[0]

    @property
    def bd(self) -> np.ndarray:
        return self.probs.data[:, BD]

    @property
    def bk(self) -> np.ndarray:
        return self.probs.data[:, BK]


def soft_boundary_targets(posterior: CtcPosterior) -> SoftBoundaryTargets:
    """Derive (BK, BD, OT) targets from the per-frame label posteriors.

    BK is the blank mass. BD sums, over non-blank labels i, the chance of
    emitting i now and not continuing it at the next frame; the sequence
    end counts as "not continued", so the final frame's non-blank mass all
    goes to BD. OT is the remainder and is non-negative because the
    continuation mass can never exceed the non-blank mass.
    """
    p = posterior.probs.data
    t_x = p.shape[0]
    if t_x < 1:
        raise ShapeError("need at least one frame")
    blank = posterior.blank_index
    nonblank = np.delete(p, blank, axis=1)  # (T, V)
    cont = np.zeros_like(nonblank)
    cont[:-1] = nonblank[:-1] * (1.0 - nonblank[1:])
    cont[-1] = nonblank[-1]  # p(not continued past the end) = 1
    out = np.empty((t_x, 3))
    out[:, BK] = p[:, blank]
    out[:, BD] = cont.sum(axis=1)
    out[:, OT] = 1.0 - out[:, BK] - out[:, BD]
    return SoftBoundaryTargets(probs=out)


def predictor_forward(acoustic_states: Tensor, params: Params) -> BoundaryPosterior:
    """Linear d->3 projection plus row softmax."""
    logits = linear(acoustic_states, params, "pred.proj")
    return BoundaryPosterior(probs=tt.softmax(logits, axis=-1))


def predictor_loss(pred: BoundaryPosterior, targets: SoftBoundaryTargets) -> Tensor:
    """Frame-summed cross-entropy of the prediction against the soft targets."""
    if pred.num_frames != targets.num_frames:
        raise ShapeError(
            f"prediction has {pred.num_frames} frames, targets {targets.num_frames}"
        )
    logs = tt.log(tt.clip_min(pred.probs, PROB_FLOOR))
    return -tt.tsum(logs * Tensor(targets.probs))


def detect_boundaries(pred: BoundaryPosterior, theta: float) -> Segmentation:
    """Frames whose BD probability exceeds theta become boundaries."""
    if not 0.0 < theta < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {theta}")
    bounds = np.nonzero(pred.bd > theta)[0]
    return spans_from_boundaries(bounds.tolist(), pred.num_frames, threshold_used=theta)


def forced_threshold(pred: BoundaryPosterior, t_z: int) -> Segmentation:
    """Pick exactly the t_z most boundary-like frames (ties: lower index)."""
    t_x = pred.num_frames
    if not 1 <= t_z <= t_x:
        raise ValueError(f"need 1 <= target length <= {t_x}, got {t_z}")
    order = np.argsort(-pred.bd, kind="stable")  # stable keeps lower index first
    chosen = np.sort(order[:t_z])
    return spans_from_boundaries(chosen.tolist(), t_x)


def boundaries_to_csv(
    pred: BoundaryPosterior, seg: Segmentation, path: str
) -> None:
    """Per-frame probabilities and chosen boundaries, for plotting."""
    chosen = set(seg.boundary_frames)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "p_bk", "p_bd", "p_ot", "is_boundary"])
        for t in range(pred.num_frames):
            row = pred.probs.data[t]
            writer.writerow([t, row[BK], row[BD], row[OT], int(t in chosen)])
