"""Bit-exact readers and writers for every on-disk format.

Formats (all multi-byte values little-endian):
  manifest   JSON: width, height, num_frames, frames[{index, candidates,
             background, flow?}]; paths resolve relative to the manifest.
  .flo       float32 magic 202021.25, int32 width, int32 height, then
             row-major interleaved (u, v) float32 pairs.
  .pmap      ASCII "PMAP", uint32 width, uint32 height, then width*height
             float32 probabilities in [0, 1], row-major.
  .cand      text: "CAND 1 <W> <H> <N>" header, then per candidate the two
             lines "id <int> score <float>" and "rle <run0> <run1> ...".
  selection  JSON document for a SelectionResult (tolerant reader: unknown
             fields are ignored, missing required fields are fatal).
  gt         JSON ground truth: per-frame object masks as RLE runs.

Every reader validates every documented invariant at load time; nothing is
deferred.  Declared sizes are capped so malformed headers cannot trigger
huge allocations.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import (
    BgProbMap,
    BitMask,
    FlowField,
    FrameInputs,
    MaskCandidate,
    Raster,
    SceneBundle,
)
from .errors import (
    BadMagic,
    DimensionMismatch,
    DuplicateId,
    MissingFlow,
    ParseError,
    RunSumMismatch,
    TruncatedFile,
    ValueOutOfRange,
)
from .losses import LossBreakdown, LossWeights
from .optimizer import EvalCounters, SelectionResult

FLO_MAGIC = 202021.25
MAX_PIXELS = 1 << 26  # refuse absurd declared sizes before allocating


# ---------------------------------------------------------------------------
# optical flow (.flo)
# ---------------------------------------------------------------------------

def write_flow(flow: FlowField, path: str) -> None:
    h, w = flow.height, flow.width
    interleaved = np.empty((h, w, 2), dtype="<f4")
    interleaved[:, :, 0] = flow.u.values
    interleaved[:, :, 1] = flow.v.values
    with open(path, "wb") as fh:
        fh.write(struct.pack("<f", FLO_MAGIC))
        fh.write(struct.pack("<ii", w, h))
        fh.write(interleaved.tobytes())


def read_flow(path: str) -> FlowField:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4:
        raise TruncatedFile("flow file shorter than its magic", path=path, offset=len(data))
    (magic,) = struct.unpack_from("<f", data, 0)
    if magic != struct.unpack("<f", struct.pack("<f", FLO_MAGIC))[0]:
        raise BadMagic(f"flow magic {magic!r} != {FLO_MAGIC}", path=path, offset=0)
    if len(data) < 12:
        raise TruncatedFile("flow file shorter than its header", path=path, offset=len(data))
    w, h = struct.unpack_from("<ii", data, 4)
    if w < 1 or h < 1 or w * h > MAX_PIXELS:
        raise ParseError(f"implausible flow dimensions {w}x{h}", path=path, offset=4)
    expected = 12 + 8 * w * h
    if len(data) < expected:
        raise TruncatedFile(
            f"flow payload needs {expected} bytes, file has {len(data)}",
            path=path,
            offset=len(data),
        )
    if len(data) > expected:
        raise ParseError(f"{len(data) - expected} trailing bytes", path=path, offset=expected)
    pairs = np.frombuffer(data, dtype="<f4", count=2 * w * h, offset=12).reshape(h, w, 2)
    return FlowField(
        Raster(pairs[:, :, 0].astype(np.float64)),
        Raster(pairs[:, :, 1].astype(np.float64)),
    )


# ---------------------------------------------------------------------------
# background probability map (.pmap)
# ---------------------------------------------------------------------------

def write_probmap(pmap: BgProbMap, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(b"PMAP")
        fh.write(struct.pack("<II", pmap.width, pmap.height))
        fh.write(pmap.probs.values.astype("<f4").tobytes())


def read_probmap(path: str) -> BgProbMap:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4:
        raise TruncatedFile("probability map shorter than its magic", path=path, offset=len(data))
    if data[:4] != b"PMAP":
        raise BadMagic(f"probability-map magic {data[:4]!r} != b'PMAP'", path=path, offset=0)
    if len(data) < 12:
        raise TruncatedFile("probability map shorter than its header", path=path, offset=len(data))
    w, h = struct.unpack_from("<II", data, 4)
    if w < 1 or h < 1 or w * h > MAX_PIXELS:
        raise ParseError(f"implausible map dimensions {w}x{h}", path=path, offset=4)
    expected = 12 + 4 * w * h
    if len(data) < expected:
        raise TruncatedFile(
            f"map payload needs {expected} bytes, file has {len(data)}",
            path=path,
            offset=len(data),
        )
    if len(data) > expected:
        raise ParseError(f"{len(data) - expected} trailing bytes", path=path, offset=expected)
    vals = np.frombuffer(data, dtype="<f4", count=w * h, offset=12).reshape(h, w)
    in_range = (vals >= 0.0) & (vals <= 1.0)
    if not bool(in_range.all()):
        bad_flat = int(np.argmin(in_range))
        raise ValueOutOfRange(
            f"probability {vals.reshape(-1)[bad_flat]} outside [0,1]",
            path=path,
            offset=12 + 4 * bad_flat,
        )
    return BgProbMap(Raster(vals.astype(np.float64)))


# ---------------------------------------------------------------------------
# candidate masks (.cand, text)
# ---------------------------------------------------------------------------

def write_candidates(candidates: list[MaskCandidate], width: int, height: int, path: str) -> None:
    lines = [f"CAND 1 {width} {height} {len(candidates)}"]
    for cand in candidates:
        if (cand.mask.width, cand.mask.height) != (width, height):
            raise DimensionMismatch(
                f"candidate {cand.id} is {cand.mask.width}x{cand.mask.height}, "
                f"file is {width}x{height}"
            )
        lines.append(f"id {cand.id} score {cand.score!r}")
        lines.append("rle " + " ".join(str(r) for r in cand.mask.runs))
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def read_candidates(path: str) -> tuple[list[MaskCandidate], int, int]:
    with open(path, "r", encoding="ascii", errors="replace") as fh:
        lines = [line.rstrip("\n") for line in fh]
    if not lines or not lines[0].startswith("CAND "):
        raise BadMagic("candidate file must start with 'CAND '", path=path, offset=0)
    header = lines[0].split()
    if len(header) != 5 or header[1] != "1":
        raise ParseError(f"bad candidate header {lines[0]!r}", path=path, offset=1)
    try:
        width, height, count = int(header[2]), int(header[3]), int(header[4])
    except ValueError:
        raise ParseError(f"non-integer candidate header {lines[0]!r}", path=path, offset=1)
    if width < 1 or height < 1 or width * height > MAX_PIXELS or count < 0:
        raise ParseError(f"implausible candidate header {lines[0]!r}", path=path, offset=1)
    body = [line for line in lines[1:] if line.strip()]
    if len(body) != 2 * count:
        raise ParseError(
            f"expected {2 * count} candidate lines, found {len(body)}", path=path, offset=2
        )
    candidates: list[MaskCandidate] = []
    seen: set[int] = set()
    for i in range(count):
        id_line = body[2 * i].split()
        rle_line = body[2 * i + 1].split()
        lineno = 2 + 2 * i
        if len(id_line) != 4 or id_line[0] != "id" or id_line[2] != "score":
            raise ParseError(f"bad candidate line {body[2 * i]!r}", path=path, offset=lineno)
        try:
            cand_id = int(id_line[1])
            score = float(id_line[3])
        except ValueError:
            raise ParseError(f"bad candidate line {body[2 * i]!r}", path=path, offset=lineno)
        if not (0.0 <= score <= 1.0):
            raise ValueOutOfRange(f"score {score} outside [0,1]", path=path, offset=lineno)
        if cand_id in seen:
            raise DuplicateId(f"candidate id {cand_id} repeated", path=path, offset=lineno)
        seen.add(cand_id)
        if rle_line[:1] != ["rle"]:
            raise ParseError(f"expected rle line, got {body[2 * i + 1]!r}", path=path, offset=lineno + 1)
        try:
            runs = tuple(int(r) for r in rle_line[1:])
        except ValueError:
            raise ParseError(f"non-integer run length", path=path, offset=lineno + 1)
        if any(r < 0 for r in runs) or sum(runs) != width * height:
            raise RunSumMismatch(
                f"candidate {cand_id}: runs sum to {sum(runs)}, expected {width * height}"
            )
        mask = BitMask(width, height, runs)
        if mask.area < 1:
            raise ParseError(f"candidate {cand_id} has an empty mask", path=path, offset=lineno + 1)
        candidates.append(MaskCandidate(id=cand_id, score=score, mask=mask))
    return candidates, width, height


# ---------------------------------------------------------------------------
# scene manifest
# ---------------------------------------------------------------------------

def _load_json(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", path=path, offset=exc.pos)
    if not isinstance(doc, dict):
        raise ParseError("top-level JSON value must be an object", path=path, offset=0)
    return doc


def _require(doc: dict, key: str, path: str):
    if key not in doc:
        raise ParseError(f"missing required field {key!r}", path=path)
    return doc[key]


def read_scene(manifest_path: str) -> SceneBundle:
    """Load and fully validate a scene from its manifest."""
    doc = _load_json(manifest_path)
    base = os.path.dirname(os.path.abspath(manifest_path))
    try:
        width = int(_require(doc, "width", manifest_path))
        height = int(_require(doc, "height", manifest_path))
        num_frames = int(_require(doc, "num_frames", manifest_path))
    except (TypeError, ValueError) as exc:
        raise ParseError(f"malformed manifest header: {exc}", path=manifest_path)
    frame_docs = _require(doc, "frames", manifest_path)
    if not isinstance(frame_docs, list) or len(frame_docs) != num_frames:
        raise ParseError(
            f"manifest declares {num_frames} frames but lists {len(frame_docs)}",
            path=manifest_path,
        )
    if num_frames < 1:
        raise ParseError("a scene needs at least one frame", path=manifest_path)

    first_index: Optional[int] = None
    frames: list[FrameInputs] = []
    for pos, fdoc in enumerate(frame_docs):
        if not isinstance(fdoc, dict):
            raise ParseError(f"frame entry {pos} is not an object", path=manifest_path)
        try:
            index = int(_require(fdoc, "index", manifest_path))
        except (TypeError, ValueError) as exc:
            raise ParseError(f"malformed frame index: {exc}", path=manifest_path)
        if first_index is None:
            first_index = index
        if index != first_index + pos:
            raise ParseError(
                f"frame indices must be consecutive ascending, got {index} at position {pos}",
                path=manifest_path,
            )
        cand_rel = _require(fdoc, "candidates", manifest_path)
        bg_rel = _require(fdoc, "background", manifest_path)
        if not isinstance(cand_rel, str) or not isinstance(bg_rel, str):
            raise ParseError(f"frame {index}: file paths must be strings", path=manifest_path)
        cand_path = os.path.join(base, cand_rel)
        bg_path = os.path.join(base, bg_rel)
        candidates, cw, ch = read_candidates(cand_path)
        if (cw, ch) != (width, height):
            raise DimensionMismatch(
                f"frame {index}: candidate file is {cw}x{ch}, scene is {width}x{height}"
            )
        bg = read_probmap(bg_path)
        if (bg.width, bg.height) != (width, height):
            raise DimensionMismatch(
                f"frame {index}: probability map is {bg.width}x{bg.height}, "
                f"scene is {width}x{height}"
            )
        is_last = pos == num_frames - 1
        flow = None
        if "flow" in fdoc and fdoc["flow"] is not None:
            if is_last:
                raise ParseError("the last frame must not list a flow file", path=manifest_path)
            if not isinstance(fdoc["flow"], str):
                raise ParseError(f"frame {index}: file paths must be strings", path=manifest_path)
            flow = read_flow(os.path.join(base, fdoc["flow"]))
            if (flow.width, flow.height) != (width, height):
                raise DimensionMismatch(
                    f"frame {index}: flow is {flow.width}x{flow.height}, "
                    f"scene is {width}x{height}"
                )
        elif not is_last:
            raise MissingFlow(f"frame {index} is not last but the manifest lists no flow file")
        frames.append(
            FrameInputs(index=pos, candidates=tuple(candidates), bg=bg, flow_to_next=flow)
        )
    return SceneBundle(width=width, height=height, frames=tuple(frames))


# ---------------------------------------------------------------------------
# selection document
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FrameSelection:
    index: int
    selected: tuple[int, ...]
    breakdown: LossBreakdown


@dataclass(frozen=True)
class SelectionDocument:
    frames: tuple[FrameSelection, ...]
    objective: float
    weights: LossWeights
    counters: EvalCounters


def selection_document(result: SelectionResult, weights: LossWeights) -> SelectionDocument:
    """Flatten a SelectionResult into the per-frame document shape.

    Frame t pairs its own unary loss with the pair terms of transition
    t -> t+1; the last frame's pair terms are 0, so the per-frame weighted
    totals sum to the full objective.
    """
    frames = []
    num_frames = len(result.chosen)
    for t, combo in enumerate(result.chosen):
        if t < num_frames - 1:
            trans = result.breakdowns[t]
            bd = LossBreakdown.build(combo.unary_li, trans.l_f, trans.l_p, weights)
        else:
            bd = LossBreakdown.build(combo.unary_li, 0.0, 0.0, weights)
        frames.append(FrameSelection(index=t, selected=combo.selection, breakdown=bd))
    return SelectionDocument(
        frames=tuple(frames),
        objective=result.objective,
        weights=weights,
        counters=result.counters,
    )


def write_selection(doc: SelectionDocument, path: str) -> None:
    payload = {
        "objective": doc.objective,
        "weights": {
            "lambda_i": doc.weights.lambda_i,
            "lambda_f": doc.weights.lambda_f,
            "lambda_p": doc.weights.lambda_p,
            "epsilon": doc.weights.epsilon,
        },
        "counters": {
            "li_evaluations": doc.counters.li_evaluations,
            "pair_evaluations": doc.counters.pair_evaluations,
            "tree_nodes_expanded": doc.counters.tree_nodes_expanded,
            "trellis_edges_relaxed": doc.counters.trellis_edges_relaxed,
        },
        "frames": [
            {
                "index": fs.index,
                "selected": list(fs.selected),
                "loss": {
                    "l_i": fs.breakdown.l_i,
                    "l_f": fs.breakdown.l_f,
                    "l_p": fs.breakdown.l_p,
                    "weighted_total": fs.breakdown.weighted_total,
                },
            }
            for fs in doc.frames
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def read_selection(path: str) -> SelectionDocument:
    doc = _load_json(path)
    try:
        weights_doc = _require(doc, "weights", path)
        counters_doc = _require(doc, "counters", path)
        frames_doc = _require(doc, "frames", path)
        weights = LossWeights(
            lambda_i=float(_require(weights_doc, "lambda_i", path)),
            lambda_f=float(_require(weights_doc, "lambda_f", path)),
            lambda_p=float(_require(weights_doc, "lambda_p", path)),
            epsilon=float(_require(weights_doc, "epsilon", path)),
        )
        counters = EvalCounters(
            li_evaluations=int(_require(counters_doc, "li_evaluations", path)),
            pair_evaluations=int(_require(counters_doc, "pair_evaluations", path)),
            tree_nodes_expanded=int(_require(counters_doc, "tree_nodes_expanded", path)),
            trellis_edges_relaxed=int(_require(counters_doc, "trellis_edges_relaxed", path)),
        )
        frames = []
        for fdoc in frames_doc:
            loss = _require(fdoc, "loss", path)
            frames.append(
                FrameSelection(
                    index=int(_require(fdoc, "index", path)),
                    selected=tuple(int(i) for i in _require(fdoc, "selected", path)),
                    breakdown=LossBreakdown(
                        l_i=float(_require(loss, "l_i", path)),
                        l_f=float(_require(loss, "l_f", path)),
                        l_p=float(_require(loss, "l_p", path)),
                        weighted_total=float(_require(loss, "weighted_total", path)),
                    ),
                )
            )
        objective = float(_require(doc, "objective", path))
    except ParseError:
        raise
    except (TypeError, ValueError, AttributeError) as exc:
        raise ParseError(f"malformed selection document: {exc}", path=path)
    return SelectionDocument(
        frames=tuple(frames), objective=objective, weights=weights, counters=counters
    )


# ---------------------------------------------------------------------------
# ground truth
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GroundTruthDocument:
    width: int
    height: int
    frames: tuple[tuple[tuple[int, BitMask], ...], ...]  # per frame: (object id, mask)


def write_ground_truth(gt: GroundTruthDocument, path: str) -> None:
    payload = {
        "width": gt.width,
        "height": gt.height,
        "frames": [
            {
                "index": t,
                "objects": [
                    {"id": obj_id, "rle": list(mask.runs)} for obj_id, mask in frame
                ],
            }
            for t, frame in enumerate(gt.frames)
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def read_ground_truth(path: str) -> GroundTruthDocument:
    doc = _load_json(path)
    try:
        width = int(_require(doc, "width", path))
        height = int(_require(doc, "height", path))
        frames = []
        for fdoc in _require(doc, "frames", path):
            objs = []
            for odoc in _require(fdoc, "objects", path):
                runs = tuple(int(r) for r in _require(odoc, "rle", path))
                objs.append((int(_require(odoc, "id", path)), BitMask(width, height, runs)))
            frames.append(tuple(objs))
    except (ParseError, RunSumMismatch, DimensionMismatch):
        raise
    except (TypeError, ValueError, AttributeError) as exc:
        raise ParseError(f"malformed ground-truth document: {exc}", path=path)
    return GroundTruthDocument(width=width, height=height, frames=tuple(frames))
