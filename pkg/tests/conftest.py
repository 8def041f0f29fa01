import numpy as np

from maskpick.core import (
    BgProbMap,
    FlowField,
    FrameInputs,
    MaskCandidate,
    Raster,
    SceneBundle,
    rle_encode,
)


def mask_from(rows, width=None):
    """Dense 0/1 row strings or arrays -> BitMask."""
    grid = np.array([[int(c) for c in row] for row in rows], dtype=bool)
    return rle_encode(grid)


def candidate(cand_id, rows, score=0.5):
    return MaskCandidate(id=cand_id, score=score, mask=mask_from(rows))


def flat_raster(width, height, values):
    return Raster(np.asarray(values, dtype=np.float64).reshape(height, width))


def make_frame(index, candidates, probs, flow_uv=None):
    """probs: 2-D list/array; flow_uv: (u 2-D, v 2-D) or None."""
    bg = BgProbMap(Raster(np.asarray(probs, dtype=np.float64)))
    flow = None
    if flow_uv is not None:
        u, v = flow_uv
        flow = FlowField(
            Raster(np.asarray(u, dtype=np.float64)),
            Raster(np.asarray(v, dtype=np.float64)),
        )
    return FrameInputs(index=index, candidates=tuple(candidates), bg=bg, flow_to_next=flow)


def make_scene(frames, width, height):
    return SceneBundle(width=width, height=height, frames=tuple(frames))


def random_frame(rng, width, height, n_masks, index=0, with_flow=False, max_mask=4):
    """A random frame whose candidate masks are random small rectangles."""
    cands = []
    for i in range(n_masks):
        w = int(rng.integers(1, max_mask + 1))
        h = int(rng.integers(1, max_mask + 1))
        x = int(rng.integers(0, width - w + 1))
        y = int(rng.integers(0, height - h + 1))
        dense = np.zeros((height, width), dtype=bool)
        dense[y : y + h, x : x + w] = True
        cands.append(MaskCandidate(id=i, score=float(rng.uniform(0, 1)), mask=rle_encode(dense)))
    probs = rng.uniform(0.0, 1.0, size=(height, width))
    flow = None
    if with_flow:
        flow = (rng.normal(0, 1, size=(height, width)), rng.normal(0, 1, size=(height, width)))
    return make_frame(index, cands, probs, flow)
