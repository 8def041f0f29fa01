"""Raster and binary-mask primitives shared by every other module.

Conventions fixed here and relied on everywhere else:
  - rasters are row-major, float64, shape (height, width)
  - masks are run-length encoded row-major, alternating 0-runs and 1-runs,
    the first run counting zeros (and possibly being 0)
  - selections are collections of candidate ids; the canonical form is the
    ascending-sorted tuple
  - frames are 0-based internally
All types are immutable after construction and all operations are pure.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .errors import DimensionMismatch, MissingFlow, RunSumMismatch


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Raster:
    """A width x height grid of float64 scalars, row-major."""

    values: np.ndarray  # shape (height, width)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise DimensionMismatch(f"raster must be 2-D and non-empty, got shape {v.shape}")
        object.__setattr__(self, "values", _freeze(v))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def __eq__(self, other):
        return (
            isinstance(other, Raster)
            and self.values.shape == other.values.shape
            and bool(np.array_equal(self.values, other.values))
        )

    @staticmethod
    def constant(width: int, height: int, value: float) -> "Raster":
        return Raster(np.full((height, width), value, dtype=np.float64))


@dataclass(frozen=True)
class BitMask:
    """A binary mask stored as alternating run lengths (zeros first)."""

    width: int
    height: int
    runs: tuple[int, ...]

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise DimensionMismatch(f"mask dimensions must be positive, got {self.width}x{self.height}")
        runs = tuple(int(r) for r in self.runs)
        if any(r < 0 for r in runs):
            raise RunSumMismatch(f"negative run length in {runs}")
        if sum(runs) != self.width * self.height:
            raise RunSumMismatch(
                f"runs sum to {sum(runs)}, expected {self.width * self.height}"
            )
        object.__setattr__(self, "runs", runs)

    @property
    def area(self) -> int:
        """Number of set pixels (sum of 1-runs)."""
        return sum(self.runs[1::2])

    def dense(self) -> np.ndarray:
        """Decode to a (height, width) bool array."""
        return rle_decode(self)

    @staticmethod
    def from_dense(grid: np.ndarray) -> "BitMask":
        return rle_encode(grid)

    @staticmethod
    def empty(width: int, height: int) -> "BitMask":
        return BitMask(width, height, (width * height,))


def rle_encode(grid: np.ndarray) -> BitMask:
    """Encode a dense binary grid into a BitMask (row-major, zeros first)."""
    g = np.asarray(grid)
    if g.ndim != 2 or g.shape[0] < 1 or g.shape[1] < 1:
        raise DimensionMismatch(f"grid must be 2-D and non-empty, got shape {g.shape}")
    height, width = g.shape
    flat = (g.reshape(-1) != 0).astype(np.int8)
    # boundaries where the value changes, plus both ends
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0] == 1:
        runs = [0] + runs
    return BitMask(width, height, tuple(runs))


def rle_decode(mask: BitMask) -> np.ndarray:
    """Decode a BitMask into a (height, width) bool array."""
    flat = np.zeros(mask.width * mask.height, dtype=bool)
    pos = 0
    value = False
    for run in mask.runs:
        if value:
            flat[pos : pos + run] = True
        pos += run
        value = not value
    return flat.reshape(mask.height, mask.width)


def intersection_area(a: BitMask, b: BitMask) -> int:
    """Pixel count of the intersection of two same-sized masks."""
    if (a.width, a.height) != (b.width, b.height):
        raise DimensionMismatch(
            f"mask dimensions differ: {a.width}x{a.height} vs {b.width}x{b.height}"
        )
    return int(np.count_nonzero(a.dense() & b.dense()))


@dataclass(frozen=True)
class MaskCandidate:
    """One proposed object mask with its detector confidence."""

    id: int
    score: float
    mask: BitMask
    area: int = field(default=-1)

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"candidate score must be in [0,1], got {self.score}")
        true_area = self.mask.area
        if self.area == -1:
            object.__setattr__(self, "area", true_area)
        elif self.area != true_area:
            raise ValueError(f"cached area {self.area} != mask area {true_area}")
        if self.area < 1:
            raise ValueError("candidate masks must be non-empty")


def masks_overlap(a: MaskCandidate, b: MaskCandidate, tolerance: int = 0) -> bool:
    """True iff the two candidate masks share more than `tolerance` pixels."""
    return intersection_area(a.mask, b.mask) > tolerance


@dataclass(frozen=True)
class FlowField:
    """Per-pixel displacement to the next frame, split into u (x) and v (y)."""

    u: Raster
    v: Raster

    def __post_init__(self):
        if (self.u.width, self.u.height) != (self.v.width, self.v.height):
            raise DimensionMismatch(
                f"flow channel dimensions differ: {self.u.width}x{self.u.height}"
                f" vs {self.v.width}x{self.v.height}"
            )

    @property
    def width(self) -> int:
        return self.u.width

    @property
    def height(self) -> int:
        return self.u.height


@dataclass(frozen=True)
class BgProbMap:
    """Per-pixel probability of belonging to the background, in [0,1]."""

    probs: Raster

    def __post_init__(self):
        v = self.probs.values
        in_range = (v >= 0.0) & (v <= 1.0)
        if not bool(in_range.all()):
            bad = v[~in_range].flat[0]
            raise ValueError(f"background probability {bad} outside [0,1]")

    @property
    def width(self) -> int:
        return self.probs.width

    @property
    def height(self) -> int:
        return self.probs.height


@dataclass(frozen=True)
class FrameInputs:
    """Everything ingested for one frame: candidates, background map, flow."""

    index: int
    candidates: tuple[MaskCandidate, ...]
    bg: BgProbMap
    flow_to_next: Optional[FlowField] = None

    def __post_init__(self):
        object.__setattr__(self, "candidates", tuple(self.candidates))
        ids = [c.id for c in self.candidates]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate candidate ids in frame {self.index}")
        w, h = self.bg.width, self.bg.height
        for c in self.candidates:
            if (c.mask.width, c.mask.height) != (w, h):
                raise DimensionMismatch(
                    f"frame {self.index}: candidate {c.id} is "
                    f"{c.mask.width}x{c.mask.height}, frame is {w}x{h}"
                )
        if self.flow_to_next is not None and (
            self.flow_to_next.width,
            self.flow_to_next.height,
        ) != (w, h):
            raise DimensionMismatch(f"frame {self.index}: flow dimensions differ from frame")

    def candidate_by_id(self, cand_id: int) -> MaskCandidate:
        for c in self.candidates:
            if c.id == cand_id:
                return c
        raise KeyError(f"no candidate with id {cand_id} in frame {self.index}")


@dataclass(frozen=True)
class SceneBundle:
    """A whole video's ingested inputs."""

    width: int
    height: int
    frames: tuple[FrameInputs, ...]

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        if len(self.frames) < 1:
            raise ValueError("a scene needs at least one frame")
        last = len(self.frames) - 1
        for t, frame in enumerate(self.frames):
            if frame.index != t:
                raise ValueError(f"frame indices must be 0..T-1 in order, got {frame.index} at {t}")
            if (frame.bg.width, frame.bg.height) != (self.width, self.height):
                raise DimensionMismatch(f"frame {t} dimensions differ from scene")
            if t < last and frame.flow_to_next is None:
                raise MissingFlow(f"frame {t} is not the last frame but has no flow field")
            if t == last and frame.flow_to_next is not None:
                raise ValueError("the last frame must not carry a flow field")

    @property
    def num_frames(self) -> int:
        return len(self.frames)


def union_foreground(frame: FrameInputs, selection: Iterable[int]) -> BitMask:
    """Union of the selected candidates' masks as one binary image."""
    sel = sorted(set(selection))
    w, h = frame.bg.width, frame.bg.height
    if not sel:
        return BitMask.empty(w, h)
    acc = np.zeros((h, w), dtype=bool)
    for cand_id in sel:
        acc |= frame.candidate_by_id(cand_id).mask.dense()
    return rle_encode(acc)
