"""Selection quality against ground truth: greedy IoU matching, P/R/F1.

Predicted masks and ground-truth masks are matched one-to-one per frame in
descending IoU order; a pair counts as a match iff its IoU reaches the
threshold.  Precision and recall aggregate match counts over all frames;
an empty denominator is reported as 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import SceneBundle
from .io import GroundTruthDocument, SelectionDocument


@dataclass(frozen=True)
class FrameMatches:
    index: int
    matches: tuple[tuple[int, int, float], ...]  # (pred id, gt id, IoU)
    num_pred: int
    num_gt: int


@dataclass(frozen=True)
class EvalReport:
    frames: tuple[FrameMatches, ...]
    iou_threshold: float
    total_pred: int
    total_gt: int
    total_matched: int
    precision: float
    recall: float
    f1: float


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    union = int(np.count_nonzero(a | b))
    if union == 0:
        return 0.0
    return int(np.count_nonzero(a & b)) / float(union)


def evaluate_selection(
    scene: SceneBundle,
    gt: GroundTruthDocument,
    doc: SelectionDocument,
    iou_threshold: float = 0.5,
) -> EvalReport:
    if len(gt.frames) != scene.num_frames or len(doc.frames) != scene.num_frames:
        raise ValueError(
            f"frame counts differ: scene {scene.num_frames}, "
            f"gt {len(gt.frames)}, prediction {len(doc.frames)}"
        )
    by_index = {fs.index: fs for fs in doc.frames}
    if sorted(by_index) != list(range(scene.num_frames)):
        raise ValueError(f"prediction frame indices {sorted(by_index)} are not 0..T-1")
    frames = []
    total_pred = total_gt = total_matched = 0
    for t in range(scene.num_frames):
        frame = scene.frames[t]
        pred = {
            cand_id: frame.candidate_by_id(cand_id).mask.dense()
            for cand_id in by_index[t].selected
        }
        truth = {obj_id: mask.dense() for obj_id, mask in gt.frames[t]}
        pairs = []
        for pid, pmask in sorted(pred.items()):
            for gid, gmask in sorted(truth.items()):
                iou = _iou(pmask, gmask)
                if iou >= iou_threshold:
                    pairs.append((iou, pid, gid))
        pairs.sort(key=lambda p: (-p[0], p[1], p[2]))
        used_pred: set[int] = set()
        used_gt: set[int] = set()
        matches = []
        for iou, pid, gid in pairs:
            if pid in used_pred or gid in used_gt:
                continue
            used_pred.add(pid)
            used_gt.add(gid)
            matches.append((pid, gid, iou))
        frames.append(
            FrameMatches(
                index=t,
                matches=tuple(matches),
                num_pred=len(pred),
                num_gt=len(truth),
            )
        )
        total_pred += len(pred)
        total_gt += len(truth)
        total_matched += len(matches)
    precision = total_matched / total_pred if total_pred else 0.0
    recall = total_matched / total_gt if total_gt else 0.0
    f1 = (
        2.0 * precision * recall / (precision + recall)
        if (precision + recall) > 0
        else 0.0
    )
    return EvalReport(
        frames=tuple(frames),
        iou_threshold=iou_threshold,
        total_pred=total_pred,
        total_gt=total_gt,
        total_matched=total_matched,
        precision=precision,
        recall=recall,
        f1=f1,
    )
