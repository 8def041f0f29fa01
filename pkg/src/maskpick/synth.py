"""Deterministic synthetic scenes: moving shapes, exact flow, noisy maps.

Stands in for the upstream detector / flow / background networks so the
selection engine can be exercised end to end.  Each scene contains:

  - `objects` rectangles/ellipses moving at constant integer velocities,
    placed so they stay inside the frame and never overlap each other;
    their masks are emitted verbatim as candidates (the ground truth)
  - distractor candidates cycling through four kinds per frame:
    union of two ground-truth masks, a ground-truth mask translated by
    at least 3 px, a random background rectangle, and the top half of a
    ground-truth mask
  - a background probability map (epsilon_bg on objects, 1 - epsilon_bg
    elsewhere) and a flow field (object velocity on object pixels, the
    camera flow elsewhere), both with optional seeded Gaussian noise

All randomness comes from one splitmix64 stream in a fixed draw order, so
identical configs produce byte-identical scenes on any platform.  Values
destined for float32 files are quantized at generation time, which makes
emit + read a lossless round trip.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .core import (
    BgProbMap,
    BitMask,
    FlowField,
    FrameInputs,
    MaskCandidate,
    Raster,
    SceneBundle,
    rle_encode,
)
from .errors import ConfigInvalid, OutputExistsError
from .io import (
    GroundTruthDocument,
    write_candidates,
    write_flow,
    write_ground_truth,
    write_probmap,
)

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

_PLACEMENT_ATTEMPTS = 500
_OFFSET_ATTEMPTS = 64
_DISTRACTOR_KINDS = ("union", "translate", "background_rect", "top_half")


class SplitMix64:
    """Counter-based splitmix64 stream.

    Draw number i (0-based) is mix(seed + (i+1) * 0x9E3779B97F4A7C15 mod 2^64)
    with the standard splitmix64 finalizer
        z ^= z >> 30; z *= 0xBF58476D1CE4E5B9;
        z ^= z >> 27; z *= 0x94D049BB133111EB;
        z ^= z >> 31.
    The counter form lets noise fields use vectorized uint64 arithmetic
    while scalar draws stay in plain Python; both yield the same stream.
    Gaussians come from Box-Muller pairs: two uniforms (u+0.5)/2^53 from
    consecutive draws give sqrt(-2 ln u1) * (cos, sin)(2 pi u2).
    """

    def __init__(self, seed: int):
        self.seed = seed & _MASK64
        self.counter = 0

    def _value(self, i: int) -> int:
        z = (self.seed + (i + 1) * _GOLDEN) & _MASK64
        z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
        z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
        return z ^ (z >> 31)

    def next_u64(self) -> int:
        v = self._value(self.counter)
        self.counter += 1
        return v

    def batch_u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter, self.counter + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + (idx + np.uint64(1)) * np.uint64(_GOLDEN)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
            z = z ^ (z >> np.uint64(31))
        return z

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi]; modulo bias is below 2^-50 here."""
        if hi < lo:
            raise ValueError(f"empty range [{lo}, {hi}]")
        return lo + self.next_u64() % (hi - lo + 1)

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * ((self.next_u64() >> 11) * 2.0**-53)

    def gaussians(self, n: int) -> np.ndarray:
        m = (n + 1) // 2
        u1 = ((self.batch_u64(m) >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
        u2 = ((self.batch_u64(m) >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
        radius = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.empty(2 * m, dtype=np.float64)
        out[0::2] = radius * np.cos(theta)
        out[1::2] = radius * np.sin(theta)
        return out[:n]


@dataclass(frozen=True)
class SynthConfig:
    width: int = 64
    height: int = 48
    num_frames: int = 8
    objects: int = 2
    shapes: tuple[str, ...] = ("rectangle", "ellipse")
    velocity_range: tuple[int, int] = (1, 3)  # (min, max) per-axis speed
    camera_flow: tuple[float, float] = (0.0, 0.0)
    distractors_per_frame: int = 3
    bg_noise_sigma: float = 0.0
    flow_noise_sigma: float = 0.0
    epsilon_bg: float = 0.05
    seed: int = 0
    size_range: tuple[int, int] = (6, 14)  # object bounding-box side lengths

    def __post_init__(self):
        if self.width < 12 or self.height < 12:
            raise ConfigInvalid("frame must be at least 12x12")
        if self.num_frames < 1:
            raise ConfigInvalid("need at least one frame")
        if self.objects < 0 or self.distractors_per_frame < 0:
            raise ConfigInvalid("counts must be non-negative")
        if self.bg_noise_sigma < 0 or self.flow_noise_sigma < 0:
            raise ConfigInvalid("noise sigmas must be non-negative")
        if not (0.0 < self.epsilon_bg < 0.5):
            raise ConfigInvalid(f"epsilon_bg must be in (0, 0.5), got {self.epsilon_bg}")
        if not self.shapes or any(s not in ("rectangle", "ellipse") for s in self.shapes):
            raise ConfigInvalid(f"unknown shape kind in {self.shapes}")
        smin, smax = self.size_range
        if smin < 4 or smax < smin:
            raise ConfigInvalid(f"bad size range {self.size_range}")
        vmin, vmax = self.velocity_range
        if vmin < 0 or vmax < vmin:
            raise ConfigInvalid(f"bad velocity range {self.velocity_range}")


@dataclass(frozen=True)
class _ObjectPlan:
    kind: str
    w: int
    h: int
    vx: int
    vy: int
    x0: int
    y0: int
    template: np.ndarray  # dense shape within its bounding box

    def position(self, t: int) -> tuple[int, int]:
        return self.x0 + t * self.vx, self.y0 + t * self.vy


@dataclass(frozen=True)
class SynthScene:
    scene: SceneBundle
    ground_truth: GroundTruthDocument
    # per frame: candidate id -> {"kind": "ground_truth", "object": i}
    #                         or {"kind": "distractor", "distractor": name}
    provenance: tuple[dict[int, dict], ...]
    config: SynthConfig


def _shape_template(kind: str, w: int, h: int) -> np.ndarray:
    if kind == "rectangle":
        return np.ones((h, w), dtype=bool)
    # ellipse inscribed in the box, pixel set iff its center lies inside
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    sy, sx = h / 2.0, w / 2.0
    rr, cc = np.mgrid[0:h, 0:w]
    return ((cc - cx) / sx) ** 2 + ((rr - cy) / sy) ** 2 <= 1.0


def _place(template: np.ndarray, x: int, y: int, width: int, height: int) -> np.ndarray:
    dense = np.zeros((height, width), dtype=bool)
    h, w = template.shape
    dense[y : y + h, x : x + w] = template
    return dense


def _translate_clip(dense: np.ndarray, dx: int, dy: int) -> np.ndarray:
    h, w = dense.shape
    out = np.zeros_like(dense)
    src_r = slice(max(0, -dy), min(h, h - dy))
    src_c = slice(max(0, -dx), min(w, w - dx))
    if src_r.start < src_r.stop and src_c.start < src_c.stop:
        out[max(0, dy) : max(0, dy) + (src_r.stop - src_r.start),
            max(0, dx) : max(0, dx) + (src_c.stop - src_c.start)] = dense[src_r, src_c]
    return out


def _boxes_overlap(a: tuple[int, int, int, int], b: tuple[int, int, int, int]) -> bool:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    return ax < bx + bw and bx < ax + aw and ay < by + bh and by < ay + ah


def _plan_objects(config: SynthConfig, rng: SplitMix64) -> list[_ObjectPlan]:
    smin, smax = config.size_range
    smax_w = min(smax, config.width - 1)
    smax_h = min(smax, config.height - 1)
    if smax_w < smin or smax_h < smin:
        raise ConfigInvalid("frame too small for the object size range")
    vmin, vmax = config.velocity_range
    horizon = config.num_frames - 1
    plans: list[_ObjectPlan] = []
    for i in range(config.objects):
        kind = config.shapes[i % len(config.shapes)]
        for attempt in range(_PLACEMENT_ATTEMPTS):
            w = rng.randint(smin, smax_w)
            h = rng.randint(smin, smax_h)
            vx = rng.randint(-vmax, vmax)
            vy = rng.randint(-vmax, vmax)
            if max(abs(vx), abs(vy)) < vmin:
                continue
            # distinct velocities keep the flow cue able to tell objects
            # (and unions of objects) apart; drop the preference after half
            # the attempts so degenerate ranges (e.g. all-static) still place
            if attempt < _PLACEMENT_ATTEMPTS // 2 and any(
                (p.vx, p.vy) == (vx, vy) for p in plans
            ):
                continue
            lo_x = max(0, -horizon * vx)
            hi_x = config.width - w - max(0, horizon * vx)
            lo_y = max(0, -horizon * vy)
            hi_y = config.height - h - max(0, horizon * vy)
            if lo_x > hi_x or lo_y > hi_y:
                continue
            x0 = rng.randint(lo_x, hi_x)
            y0 = rng.randint(lo_y, hi_y)
            collision = False
            for t in range(config.num_frames):
                box = (x0 + t * vx, y0 + t * vy, w, h)
                for p in plans:
                    px, py = p.position(t)
                    if _boxes_overlap(box, (px, py, p.w, p.h)):
                        collision = True
                        break
                if collision:
                    break
            if collision:
                continue
            plans.append(
                _ObjectPlan(kind, w, h, vx, vy, x0, y0, _shape_template(kind, w, h))
            )
            break
        else:
            raise ConfigInvalid(
                f"could not place object {i} after {_PLACEMENT_ATTEMPTS} attempts"
            )
    return plans


def _distractor_mask(
    kind: str,
    config: SynthConfig,
    rng: SplitMix64,
    gt_dense: list[np.ndarray],
) -> tuple[np.ndarray, str]:
    """One distractor mask; falls back to a background rectangle when the
    kind needs ground-truth objects and there are none."""
    if kind != "background_rect" and not gt_dense:
        kind = "background_rect"
    if kind == "union":
        if len(gt_dense) == 1:
            a = b = 0
        else:
            a = rng.randint(0, len(gt_dense) - 1)
            b = rng.randint(0, len(gt_dense) - 2)
            if b >= a:
                b += 1
        return gt_dense[a] | gt_dense[b], "union"
    if kind == "translate":
        o = rng.randint(0, len(gt_dense) - 1)
        base = gt_dense[o]
        for _ in range(_OFFSET_ATTEMPTS):
            dx = rng.randint(-5, 5)
            dy = rng.randint(-5, 5)
            if max(abs(dx), abs(dy)) < 3:
                continue
            moved = _translate_clip(base, dx, dy)
            if moved.any() and (moved & base).any():
                return moved, "translate"
        # size_range >= 4 guarantees a (3, 0) shift still overlaps
        return _translate_clip(base, 3, 0), "translate"
    if kind == "top_half":
        o = rng.randint(0, len(gt_dense) - 1)
        base = gt_dense[o]
        rows = np.nonzero(base.any(axis=1))[0]
        cut = rows[0] + (len(rows) + 1) // 2
        out = base.copy()
        out[cut:, :] = False
        return out, "top_half"
    rw = rng.randint(3, max(3, config.width // 4))
    rh = rng.randint(3, max(3, config.height // 4))
    rx = rng.randint(0, config.width - rw)
    ry = rng.randint(0, config.height - rh)
    dense = np.zeros((config.height, config.width), dtype=bool)
    dense[ry : ry + rh, rx : rx + rw] = True
    return dense, "background_rect"


def _quantize_f32(values: np.ndarray) -> np.ndarray:
    """Round to float32 so the emitted files round-trip losslessly."""
    return values.astype(np.float32).astype(np.float64)


def generate(config: SynthConfig) -> SynthScene:
    """Build a scene from a config; identical configs give identical scenes.

    Draw order (the stream contract): object plans in id order, then per
    frame the ground-truth scores in id order, each distractor's shape
    draws followed by its score, the background noise batch (only when
    bg_noise_sigma > 0), and the flow noise batch (only when
    flow_noise_sigma > 0 and the frame is not last; u plane then v plane).
    """
    rng = SplitMix64(config.seed)
    plans = _plan_objects(config, rng)
    W, H, T = config.width, config.height, config.num_frames

    frames: list[FrameInputs] = []
    gt_frames: list[tuple[tuple[int, BitMask], ...]] = []
    provenance: list[dict[int, dict]] = []
    for t in range(T):
        gt_dense = [
            _place(p.template, *p.position(t), W, H) for p in plans
        ]
        candidates: list[MaskCandidate] = []
        frame_prov: dict[int, dict] = {}
        gt_entries = []
        for i, dense in enumerate(gt_dense):
            score = rng.uniform(0.8, 0.95)
            mask = rle_encode(dense)
            candidates.append(MaskCandidate(id=i, score=score, mask=mask))
            frame_prov[i] = {"kind": "ground_truth", "object": i}
            gt_entries.append((i, mask))
        for j in range(config.distractors_per_frame):
            kind = _DISTRACTOR_KINDS[j % len(_DISTRACTOR_KINDS)]
            dense, actual_kind = _distractor_mask(kind, config, rng, gt_dense)
            score = rng.uniform(0.3, 0.8)
            cand_id = config.objects + j
            candidates.append(
                MaskCandidate(id=cand_id, score=score, mask=rle_encode(dense))
            )
            frame_prov[cand_id] = {"kind": "distractor", "distractor": actual_kind}

        obj_union = np.zeros((H, W), dtype=bool)
        for dense in gt_dense:
            obj_union |= dense
        probs = np.where(obj_union, config.epsilon_bg, 1.0 - config.epsilon_bg)
        if config.bg_noise_sigma > 0:
            probs = probs + config.bg_noise_sigma * rng.gaussians(W * H).reshape(H, W)
        probs = _quantize_f32(np.clip(probs, 0.0, 1.0))
        bg = BgProbMap(Raster(probs))

        flow = None
        if t < T - 1:
            u = np.full((H, W), float(config.camera_flow[0]))
            v = np.full((H, W), float(config.camera_flow[1]))
            for p, dense in zip(plans, gt_dense):
                u[dense] = float(p.vx)
                v[dense] = float(p.vy)
            if config.flow_noise_sigma > 0:
                noise = config.flow_noise_sigma * rng.gaussians(2 * W * H)
                u = u + noise[: W * H].reshape(H, W)
                v = v + noise[W * H :].reshape(H, W)
            flow = FlowField(Raster(_quantize_f32(u)), Raster(_quantize_f32(v)))

        frames.append(
            FrameInputs(index=t, candidates=tuple(candidates), bg=bg, flow_to_next=flow)
        )
        gt_frames.append(tuple(gt_entries))
        provenance.append(frame_prov)

    scene = SceneBundle(width=W, height=H, frames=tuple(frames))
    gt_doc = GroundTruthDocument(width=W, height=H, frames=tuple(gt_frames))
    return SynthScene(scene, gt_doc, tuple(provenance), config)


def emit(synth_scene: SynthScene, directory: str) -> str:
    """Write the scene in the on-disk formats; returns the manifest path.

    Refuses to write into an existing non-empty directory so a partial
    older scene can never be silently mixed with a new one.
    """
    if os.path.exists(directory) and os.listdir(directory):
        raise OutputExistsError(f"directory {directory!r} exists and is not empty")
    os.makedirs(directory, exist_ok=True)
    scene = synth_scene.scene
    manifest_frames = []
    for t, frame in enumerate(scene.frames):
        cand_name = f"frame_{t:04d}.cand"
        bg_name = f"frame_{t:04d}.pmap"
        write_candidates(
            list(frame.candidates), scene.width, scene.height,
            os.path.join(directory, cand_name),
        )
        write_probmap(frame.bg, os.path.join(directory, bg_name))
        entry = {"index": t, "candidates": cand_name, "background": bg_name}
        if frame.flow_to_next is not None:
            flow_name = f"frame_{t:04d}.flo"
            write_flow(frame.flow_to_next, os.path.join(directory, flow_name))
            entry["flow"] = flow_name
        manifest_frames.append(entry)
    manifest = {
        "width": scene.width,
        "height": scene.height,
        "num_frames": scene.num_frames,
        "frames": manifest_frames,
    }
    manifest_path = os.path.join(directory, "manifest.json")
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    write_ground_truth(synth_scene.ground_truth, os.path.join(directory, "gt.json"))
    prov_payload = {
        "frames": [
            {"index": t, "candidates": {str(k): v for k, v in prov.items()}}
            for t, prov in enumerate(synth_scene.provenance)
        ]
    }
    with open(os.path.join(directory, "provenance.json"), "w", encoding="utf-8") as fh:
        json.dump(prov_payload, fh, indent=2)
        fh.write("\n")
    return manifest_path


def read_provenance(path: str) -> tuple[dict[int, dict], ...]:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    return tuple(
        {int(k): v for k, v in fdoc["candidates"].items()} for fdoc in doc["frames"]
    )
