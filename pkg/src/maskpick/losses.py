"""The three loss terms the selection engine minimizes.

  - background loss: cross-entropy between the background probability map
    and the complement of the selected foreground
  - flow loss: mean L1 distance between the measured flow and a synthetic
    flow rendered from the selected masks of two consecutive frames
  - regularization loss: negative IoU between consecutive foregrounds

Both per-pixel losses are means (not sums) so the default weights behave
the same at any resolution.  Cross-entropy uses natural log with the
probabilities clamped to [epsilon, 1-epsilon].
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .core import (
    BgProbMap,
    BitMask,
    FlowField,
    FrameInputs,
    Raster,
    SceneBundle,
    union_foreground,
)
from .errors import DimensionMismatch, IndexOutOfRange, MissingFlow

DEFAULT_EPSILON = 1e-6


@dataclass(frozen=True)
class LossWeights:
    """Weights of the total objective and the probability clamp."""

    lambda_i: float = 1.0
    lambda_f: float = 1.0
    lambda_p: float = 0.5
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if self.lambda_i < 0 or self.lambda_f < 0 or self.lambda_p < 0:
            raise ValueError("loss weights must be non-negative")
        if not (0.0 < self.epsilon < 0.5):
            raise ValueError(f"epsilon must be in (0, 0.5), got {self.epsilon}")


@dataclass(frozen=True)
class LossBreakdown:
    """Raw loss terms plus their weighted sum."""

    l_i: float
    l_f: float
    l_p: float
    weighted_total: float

    @staticmethod
    def build(l_i: float, l_f: float, l_p: float, weights: LossWeights) -> "LossBreakdown":
        total = weights.lambda_i * l_i + weights.lambda_f * l_f + weights.lambda_p * l_p
        return LossBreakdown(l_i, l_f, l_p, total)


def _check_dims(a_w, a_h, b_w, b_h, what: str):
    if (a_w, a_h) != (b_w, b_h):
        raise DimensionMismatch(f"{what}: {a_w}x{a_h} vs {b_w}x{b_h}")


def _clamped_logs(bg: BgProbMap, epsilon: float) -> tuple[np.ndarray, np.ndarray]:
    p = np.clip(bg.probs.values, epsilon, 1.0 - epsilon)
    return np.log(p), np.log1p(-p)


def background_loss(bg: BgProbMap, fg: BitMask, epsilon: float = DEFAULT_EPSILON) -> float:
    """Mean cross-entropy between the background map and the non-foreground.

    Pixels outside `fg` should be background (target 1), pixels inside it
    should not (target 0).
    """
    _check_dims(bg.width, bg.height, fg.width, fg.height, "background loss")
    log_p, log_q = _clamped_logs(bg, epsilon)
    inside = fg.dense()
    ce = np.where(inside, -log_q, -log_p)
    return float(ce.mean())


def background_loss_decomposed(
    bg: BgProbMap, frame: FrameInputs, epsilon: float = DEFAULT_EPSILON
) -> tuple[float, dict[int, float]]:
    """Background loss of the empty selection plus one additive delta per mask.

    For any non-overlapping selection S the exact loss is
    base + sum of deltas over S: flipping a pixel's target from background
    to foreground changes its term by log(p / (1-p)).
    """
    _check_dims(bg.width, bg.height, frame.bg.width, frame.bg.height, "decomposed loss")
    log_p, log_q = _clamped_logs(bg, epsilon)
    base = float((-log_p).mean())
    log_ratio = log_p - log_q
    hw = float(bg.width * bg.height)
    deltas: dict[int, float] = {}
    for cand in sorted(frame.candidates, key=lambda c: c.id):
        deltas[cand.id] = float(log_ratio[cand.mask.dense()].sum() / hw)
    return base, deltas


def _round_half_up(x: float) -> int:
    """Deterministic rounding, halves toward +inf (no banker's rounding)."""
    return int(math.floor(x + 0.5))


def _translate(dense: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Shift a dense mask by (dx, dy) pixels, clipping at the borders."""
    h, w = dense.shape
    out = np.zeros_like(dense)
    src_r = slice(max(0, -dy), min(h, h - dy))
    src_c = slice(max(0, -dx), min(w, w - dx))
    dst_r = slice(max(0, dy), min(h, h + dy))
    dst_c = slice(max(0, dx), min(w, w + dx))
    if src_r.start < src_r.stop and src_c.start < src_c.stop:
        out[dst_r, dst_c] = dense[src_r, src_c]
    return out


def _centroid(dense: np.ndarray) -> tuple[float, float]:
    rows, cols = np.nonzero(dense)
    return float(cols.mean()), float(rows.mean())


def _masked_mean_flow(measured: FlowField, dense: np.ndarray) -> tuple[float, float]:
    return (
        float(measured.u.values[dense].mean()),
        float(measured.v.values[dense].mean()),
    )


def match_masks(
    frame_t: FrameInputs,
    frame_t1: FrameInputs,
    sel_t: Iterable[int],
    sel_t1: Iterable[int],
    measured: FlowField,
) -> dict[int, int]:
    """Pair each selected mask of frame t with at most one of frame t+1.

    Each t-mask (ascending id) is translated by the rounded mean measured
    flow inside it, then greedily grabs the unused t+1 mask with the
    highest IoU against the translated mask; zero-IoU pairs are discarded
    and IoU ties go to the lower t+1 id.
    """
    taken: set[int] = set()
    matches: dict[int, int] = {}
    t1_dense = {
        j: frame_t1.candidate_by_id(j).mask.dense() for j in sorted(set(sel_t1))
    }
    t1_area = {j: int(d.sum()) for j, d in t1_dense.items()}
    for i in sorted(set(sel_t)):
        dense_i = frame_t.candidate_by_id(i).mask.dense()
        mu, mv = _masked_mean_flow(measured, dense_i)
        moved = _translate(dense_i, _round_half_up(mu), _round_half_up(mv))
        moved_area = int(moved.sum())
        best_iou = 0.0
        best_j = None
        for j, dense_j in t1_dense.items():
            if j in taken:
                continue
            inter = int(np.count_nonzero(moved & dense_j))
            if inter == 0:
                continue
            iou = inter / float(moved_area + t1_area[j] - inter)
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j is not None:
            matches[i] = best_j
            taken.add(best_j)
    return matches


def synthetic_flow(
    frame_t: FrameInputs,
    frame_t1: FrameInputs,
    sel_t: Iterable[int],
    sel_t1: Iterable[int],
    measured: FlowField,
) -> FlowField:
    """Render the flow implied by the selected masks.

    Background pixels (outside every selected mask of frame t) get the mean
    measured flow over that region (over the whole image if it is empty).
    A matched mask gets the constant displacement between its centroid and
    its match's centroid; an unmatched mask gets the background value.
    """
    _check_dims(
        measured.width, measured.height, frame_t.bg.width, frame_t.bg.height, "synthetic flow"
    )
    sel_t = sorted(set(sel_t))
    fg = union_foreground(frame_t, sel_t).dense()
    outside = ~fg
    if outside.any():
        bg_u, bg_v = _masked_mean_flow(measured, outside)
    else:
        bg_u = float(measured.u.values.mean())
        bg_v = float(measured.v.values.mean())

    u = np.full(fg.shape, bg_u, dtype=np.float64)
    v = np.full(fg.shape, bg_v, dtype=np.float64)
    matches = match_masks(frame_t, frame_t1, sel_t, sel_t1, measured)
    for i in sel_t:
        dense_i = frame_t.candidate_by_id(i).mask.dense()
        j = matches.get(i)
        if j is None:
            u[dense_i] = bg_u
            v[dense_i] = bg_v
        else:
            cx_i, cy_i = _centroid(dense_i)
            cx_j, cy_j = _centroid(frame_t1.candidate_by_id(j).mask.dense())
            u[dense_i] = cx_j - cx_i
            v[dense_i] = cy_j - cy_i
    return FlowField(Raster(u), Raster(v))


def flow_loss(measured: FlowField, synthetic: FlowField) -> float:
    """Mean per-pixel L1 distance between the two flows."""
    _check_dims(measured.width, measured.height, synthetic.width, synthetic.height, "flow loss")
    diff = np.abs(measured.u.values - synthetic.u.values) + np.abs(
        measured.v.values - synthetic.v.values
    )
    return float(diff.mean())


def regularization_loss(fg_t: BitMask, fg_t1: BitMask) -> float:
    """Negative IoU of two consecutive foregrounds; 0 when both are empty."""
    _check_dims(fg_t.width, fg_t.height, fg_t1.width, fg_t1.height, "regularization loss")
    a = fg_t.dense()
    b = fg_t1.dense()
    union = int(np.count_nonzero(a | b))
    if union == 0:
        return 0.0
    inter = int(np.count_nonzero(a & b))
    return -inter / float(union)


def pair_cost(
    scene: SceneBundle,
    t: int,
    sel_t: Iterable[int],
    sel_t1: Iterable[int],
    weights: LossWeights,
) -> LossBreakdown:
    """All loss terms attached to the transition t -> t+1.

    l_i is the background loss of frame t+1's selection; l_f and l_p
    compare the two selections.  Summing frame 0's background loss with
    every transition's weighted total gives the full objective.
    """
    if not (0 <= t < scene.num_frames - 1):
        raise IndexOutOfRange(f"transition index {t} outside 0..{scene.num_frames - 2}")
    frame_t = scene.frames[t]
    frame_t1 = scene.frames[t + 1]
    if frame_t.flow_to_next is None:
        raise MissingFlow(f"frame {t} has no flow field")
    fg_t = union_foreground(frame_t, sel_t)
    fg_t1 = union_foreground(frame_t1, sel_t1)
    l_i = background_loss(frame_t1.bg, fg_t1, weights.epsilon)
    synth = synthetic_flow(frame_t, frame_t1, sel_t, sel_t1, frame_t.flow_to_next)
    l_f = flow_loss(frame_t.flow_to_next, synth)
    l_p = regularization_loss(fg_t, fg_t1)
    return LossBreakdown.build(l_i, l_f, l_p, weights)
