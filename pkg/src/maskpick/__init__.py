"""maskpick: pick the per-frame object masks that best explain a video.

Given per-frame candidate masks, a background probability map, and an
optical-flow field, the engine selects the non-overlapping subset of masks
per frame that minimizes a weighted sum of background, flow, and
consistency losses, using a per-frame top-K search followed by a
shortest-path decode over the whole video.
"""

from .core import (
    BgProbMap,
    BitMask,
    FlowField,
    FrameInputs,
    MaskCandidate,
    Raster,
    SceneBundle,
    masks_overlap,
    rle_decode,
    rle_encode,
    union_foreground,
)
from .evaluate import EvalReport, evaluate_selection
from .io import read_scene, selection_document, write_selection
from .losses import (
    LossBreakdown,
    LossWeights,
    background_loss,
    background_loss_decomposed,
    flow_loss,
    pair_cost,
    regularization_loss,
    synthetic_flow,
)
from .optimizer import (
    AblationFlags,
    Combination,
    EvalCounters,
    FrameShortlist,
    SelectionResult,
    Trellis,
    build_trellis,
    enumerate_topk,
    oracle,
    select,
    shortest_path,
)
from .synth import SynthConfig, SynthScene, emit, generate

__all__ = [
    "AblationFlags",
    "BgProbMap",
    "BitMask",
    "Combination",
    "EvalCounters",
    "EvalReport",
    "FlowField",
    "FrameInputs",
    "FrameShortlist",
    "LossBreakdown",
    "LossWeights",
    "MaskCandidate",
    "Raster",
    "SceneBundle",
    "SelectionResult",
    "SynthConfig",
    "SynthScene",
    "Trellis",
    "background_loss",
    "background_loss_decomposed",
    "build_trellis",
    "emit",
    "enumerate_topk",
    "evaluate_selection",
    "flow_loss",
    "generate",
    "masks_overlap",
    "oracle",
    "pair_cost",
    "read_scene",
    "regularization_loss",
    "rle_decode",
    "rle_encode",
    "select",
    "selection_document",
    "shortest_path",
    "synthetic_flow",
    "union_foreground",
    "write_selection",
]
