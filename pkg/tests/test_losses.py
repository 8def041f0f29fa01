import itertools
import math

import numpy as np
import pytest

from maskpick.core import (
    BgProbMap,
    BitMask,
    FlowField,
    MaskCandidate,
    Raster,
    rle_encode,
    union_foreground,
)
from maskpick.errors import DimensionMismatch, IndexOutOfRange, MissingFlow
from maskpick.losses import (
    LossWeights,
    background_loss,
    background_loss_decomposed,
    flow_loss,
    pair_cost,
    regularization_loss,
    synthetic_flow,
)

from conftest import candidate, flat_raster, make_frame, make_scene, mask_from, random_frame


def bg_map(values, width, height):
    return BgProbMap(flat_raster(width, height, values))


def reference_ce(probs, fg_dense, eps):
    """Plain-loop cross-entropy oracle."""
    total = 0.0
    h, w = probs.shape
    for r in range(h):
        for c in range(w):
            p = min(max(probs[r, c], eps), 1.0 - eps)
            q = 0.0 if fg_dense[r, c] else 1.0
            total += -(q * math.log(p) + (1.0 - q) * math.log(1.0 - p))
    return total / (h * w)


# ---------------------------------------------------------------------------
# background loss
# ---------------------------------------------------------------------------

def test_background_loss_uniform_half():
    bg = bg_map([0.5] * 4, 2, 2)
    for fg in (BitMask(2, 2, (4,)), BitMask(2, 2, (0, 4)), BitMask(2, 2, (1, 1, 2))):
        assert background_loss(bg, fg) == pytest.approx(math.log(2), abs=1e-12)


def test_background_loss_perfect_agreement():
    eps = 1e-6
    bg = bg_map([1.0 - eps] * 4, 2, 2)
    got = background_loss(bg, BitMask(2, 2, (4,)), epsilon=eps)
    assert got == pytest.approx(-math.log(1.0 - 1e-6), rel=1e-9)


def test_background_loss_hand_example():
    # fg covers exactly the two 0.1 pixels: every term is -ln 0.9
    bg = bg_map([0.9, 0.9, 0.1, 0.1], 2, 2)
    fg = mask_from(["00", "11"])
    assert background_loss(bg, fg) == pytest.approx(-math.log(0.9), abs=1e-12)


def test_background_loss_matches_reference_and_is_finite():
    rng = np.random.default_rng(5)
    for _ in range(25):
        h, w = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        probs = rng.uniform(size=(h, w))
        probs[rng.uniform(size=(h, w)) < 0.2] = 0.0  # saturation hits the clamp
        probs[rng.uniform(size=(h, w)) < 0.2] = 1.0
        fg = rng.uniform(size=(h, w)) < 0.4
        got = background_loss(BgProbMap(Raster(probs)), rle_encode(fg))
        assert got >= 0.0 and math.isfinite(got)
        assert got == pytest.approx(reference_ce(probs, fg, 1e-6), rel=1e-12)


def test_background_loss_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        background_loss(bg_map([0.5] * 4, 2, 2), BitMask(3, 2, (6,)))


# ---------------------------------------------------------------------------
# decomposition
# ---------------------------------------------------------------------------

def test_delta_zero_at_half():
    frame = make_frame(0, [candidate(0, ["10", "00"])], [[0.5, 0.9], [0.9, 0.9]])
    _, deltas = background_loss_decomposed(frame.bg, frame)
    assert deltas[0] == 0.0


def test_delta_single_pixel():
    frame = make_frame(0, [candidate(0, ["10", "00"])], [[0.1, 0.5], [0.5, 0.5]])
    _, deltas = background_loss_decomposed(frame.bg, frame)
    assert deltas[0] == pytest.approx(math.log(1.0 / 9.0) / 4.0, rel=1e-12)


def test_decomposition_exact_over_all_subsets():
    rng = np.random.default_rng(17)
    for _ in range(20):
        h, w = 5, 6
        frame = random_frame(rng, w, h, n_masks=int(rng.integers(1, 6)))
        base, deltas = background_loss_decomposed(frame.bg, frame)
        assert base == pytest.approx(
            background_loss(frame.bg, BitMask(w, h, (w * h,))), abs=1e-12
        )
        ids = [c.id for c in frame.candidates]
        dense = {c.id: c.mask.dense() for c in frame.candidates}
        for r in range(len(ids) + 1):
            for sel in itertools.combinations(ids, r):
                # only non-overlapping selections decompose exactly
                union_area = np.zeros((h, w), dtype=bool)
                total_area = 0
                for i in sel:
                    union_area |= dense[i]
                    total_area += int(dense[i].sum())
                if int(union_area.sum()) != total_area:
                    continue
                direct = background_loss(frame.bg, union_foreground(frame, sel))
                decomposed = base + sum(deltas[i] for i in sel)
                assert abs(direct - decomposed) <= 1e-9


# ---------------------------------------------------------------------------
# synthetic flow
# ---------------------------------------------------------------------------

def _two_frame_scene(cands_t, cands_t1, probs, u, v):
    h = len(probs)
    w = len(probs[0])
    f0 = make_frame(0, cands_t, probs, (u, v))
    f1 = make_frame(1, cands_t1, probs)
    return make_scene([f0, f1], w, h)


def test_synthetic_flow_empty_selection_is_mean():
    u = [[1.0, 2.0], [3.0, 4.0]]
    v = [[0.5, 0.5], [1.5, 1.5]]
    f0 = make_frame(0, [], [[0.5, 0.5], [0.5, 0.5]], (u, v))
    f1 = make_frame(1, [], [[0.5, 0.5], [0.5, 0.5]])
    synth = synthetic_flow(f0, f1, [], [], f0.flow_to_next)
    assert np.allclose(synth.u.values, 2.5)
    assert np.allclose(synth.v.values, 1.0)


def test_synthetic_flow_translated_rectangle():
    # a 2x2 block moves +3 in x; measured flow is exact, background is zero
    h, w = 6, 10
    m0 = np.zeros((h, w), dtype=bool)
    m0[2:4, 1:3] = True
    m1 = np.zeros((h, w), dtype=bool)
    m1[2:4, 4:6] = True
    u = np.where(m0, 3.0, 0.0)
    v = np.zeros((h, w))
    c0 = MaskCandidate(id=0, score=0.9, mask=rle_encode(m0))
    c1 = MaskCandidate(id=0, score=0.9, mask=rle_encode(m1))
    f0 = make_frame(0, [c0], np.full((h, w), 0.5), (u, v))
    f1 = make_frame(1, [c1], np.full((h, w), 0.5))
    synth = synthetic_flow(f0, f1, [0], [0], f0.flow_to_next)
    assert np.allclose(synth.u.values[m0], 3.0, atol=1e-9)
    assert np.allclose(synth.v.values[m0], 0.0, atol=1e-9)
    assert np.allclose(synth.u.values[~m0], 0.0, atol=1e-9)


def test_synthetic_flow_unmatched_gets_background():
    h, w = 4, 6
    m0 = np.zeros((h, w), dtype=bool)
    m0[1:3, 1:3] = True
    u = np.where(m0, 2.0, 0.25)
    v = np.zeros((h, w))
    c0 = MaskCandidate(id=0, score=0.9, mask=rle_encode(m0))
    f0 = make_frame(0, [c0], np.full((h, w), 0.5), (u, v))
    f1 = make_frame(1, [], np.full((h, w), 0.5))
    synth = synthetic_flow(f0, f1, [0], [], f0.flow_to_next)
    # nothing to match at t+1: the mask region falls back to the
    # outside-foreground mean, which is exactly 0.25 here
    assert np.allclose(synth.u.values, 0.25, atol=1e-12)
    assert np.allclose(synth.v.values, 0.0, atol=1e-12)


def test_synthetic_flow_identity_translation_zero_field():
    h, w = 5, 5
    m = np.zeros((h, w), dtype=bool)
    m[1:3, 1:4] = True
    c0 = MaskCandidate(id=0, score=0.9, mask=rle_encode(m))
    c1 = MaskCandidate(id=0, score=0.9, mask=rle_encode(m))
    zero = np.zeros((h, w))
    f0 = make_frame(0, [c0], np.full((h, w), 0.5), (zero, zero))
    f1 = make_frame(1, [c1], np.full((h, w), 0.5))
    synth = synthetic_flow(f0, f1, [0], [0], f0.flow_to_next)
    assert np.allclose(synth.u.values, 0.0) and np.allclose(synth.v.values, 0.0)


# ---------------------------------------------------------------------------
# flow loss
# ---------------------------------------------------------------------------

def _flow(u, v):
    return FlowField(Raster(np.asarray(u, float)), Raster(np.asarray(v, float)))


def test_flow_loss_identical_zero():
    f = _flow([[1.0, -2.0]], [[0.5, 3.0]])
    assert flow_loss(f, f) == 0.0


def test_flow_loss_constant_offset():
    rng = np.random.default_rng(2)
    u = rng.normal(size=(3, 4))
    v = rng.normal(size=(3, 4))
    shifted = _flow(u + 0.75, v - 1.25)
    assert flow_loss(_flow(u, v), shifted) == pytest.approx(2.0, rel=1e-12)


def test_flow_loss_hand_example():
    measured = _flow([[1.0, 0.0]], [[0.0, 2.0]])
    synthetic = _flow([[0.0, 0.0]], [[0.0, 0.0]])
    assert flow_loss(measured, synthetic) == pytest.approx(1.5, abs=1e-12)


def test_flow_loss_metric_properties():
    rng = np.random.default_rng(23)
    for _ in range(30):
        shape = (3, 3)
        fa = _flow(rng.normal(size=shape), rng.normal(size=shape))
        fb = _flow(rng.normal(size=shape), rng.normal(size=shape))
        fc = _flow(rng.normal(size=shape), rng.normal(size=shape))
        dab = flow_loss(fa, fb)
        assert dab == flow_loss(fb, fa)
        assert dab >= 0.0
        assert flow_loss(fa, fa) == 0.0
        assert dab <= flow_loss(fa, fc) + flow_loss(fc, fb) + 1e-12


# ---------------------------------------------------------------------------
# regularization loss
# ---------------------------------------------------------------------------

def test_regularization_examples():
    full = BitMask(2, 2, (0, 4))
    empty = BitMask(2, 2, (4,))
    left = mask_from(["10", "10"])
    right = mask_from(["01", "01"])
    assert regularization_loss(full, full) == -1.0
    assert regularization_loss(empty, empty) == 0.0
    assert regularization_loss(left, right) == 0.0
    assert regularization_loss(left, empty) == 0.0  # one empty: plain IoU


def test_regularization_bounds_and_symmetry():
    rng = np.random.default_rng(29)
    for _ in range(300):
        a = rle_encode(rng.uniform(size=(4, 5)) < rng.uniform())
        b = rle_encode(rng.uniform(size=(4, 5)) < rng.uniform())
        lp = regularization_loss(a, b)
        assert -1.0 <= lp <= 0.0
        assert lp == regularization_loss(b, a)
        if a.area > 0:
            assert regularization_loss(a, a) == -1.0
        assert (lp == -1.0) == (a == b and a.area > 0)


# ---------------------------------------------------------------------------
# pair cost
# ---------------------------------------------------------------------------

def _random_scene(seed, w=6, h=5, T=3, n=3):
    rng = np.random.default_rng(seed)
    frames = []
    for t in range(T):
        f = random_frame(rng, w, h, n_masks=n, index=t, with_flow=t < T - 1)
        frames.append(f)
    return make_scene(frames, w, h)


def test_pair_cost_zero_weights():
    scene = _random_scene(1)
    w0 = LossWeights(lambda_i=0.0, lambda_f=0.0, lambda_p=0.0)
    for sel_t in ([], [0], [0, 1]):
        bd = pair_cost(scene, 0, sel_t, [1], w0)
        assert bd.weighted_total == 0.0


def test_pair_cost_matches_reference_objective():
    """weighted_total must equal an independently assembled sum of the
    three published formulas."""
    scene = _random_scene(42, w=4, h=4, T=2, n=3)
    weights = LossWeights(lambda_i=1.0, lambda_f=1.0, lambda_p=0.5)
    ids = [c.id for c in scene.frames[0].candidates]
    for sel_t in ([], [0], [1, 2], ids):
        for sel_t1 in ([], [0], [2]):
            bd = pair_cost(scene, 0, sel_t, sel_t1, weights)
            fg_t = union_foreground(scene.frames[0], sel_t)
            fg_t1 = union_foreground(scene.frames[1], sel_t1)
            l_i = reference_ce(
                scene.frames[1].bg.probs.values, fg_t1.dense(), weights.epsilon
            )
            synth = synthetic_flow(
                scene.frames[0], scene.frames[1], sel_t, sel_t1,
                scene.frames[0].flow_to_next,
            )
            measured = scene.frames[0].flow_to_next
            l_f = float(
                (
                    np.abs(measured.u.values - synth.u.values)
                    + np.abs(measured.v.values - synth.v.values)
                ).mean()
            )
            l_p = regularization_loss(fg_t, fg_t1)
            expected = 1.0 * l_i + 1.0 * l_f + 0.5 * l_p
            assert bd.weighted_total == pytest.approx(expected, abs=1e-9)
            assert bd.l_i == pytest.approx(l_i, abs=1e-9)


def test_pair_cost_errors():
    scene = _random_scene(3, T=2)
    with pytest.raises(IndexOutOfRange):
        pair_cost(scene, 1, [], [], LossWeights())
    with pytest.raises(IndexOutOfRange):
        pair_cost(scene, -1, [], [], LossWeights())
    # a validated bundle always carries flow; simulate a corrupted one
    object.__setattr__(scene.frames[0], "flow_to_next", None)
    with pytest.raises(MissingFlow):
        pair_cost(scene, 0, [], [], LossWeights())


def test_pair_cost_deterministic():
    scene = _random_scene(9)
    a = pair_cost(scene, 0, [0, 1], [2], LossWeights())
    b = pair_cost(scene, 0, [0, 1], [2], LossWeights())
    assert a == b


def test_perfect_scene_argmin_is_ground_truth():
    """On a clean 2-frame scene, brute force over all valid combo pairs
    puts the ground-truth pair at the argmin of the full objective."""
    from maskpick.synth import SynthConfig, generate

    cfg = SynthConfig(
        width=48, height=36, num_frames=2, objects=2, distractors_per_frame=2, seed=5
    )
    ss = generate(cfg)
    scene = ss.scene
    weights = LossWeights()
    frames = scene.frames
    ids0 = [c.id for c in frames[0].candidates]
    ids1 = [c.id for c in frames[1].candidates]

    def valid(frame, sel):
        dense = [frame.candidate_by_id(i).mask.dense() for i in sel]
        for a in range(len(dense)):
            for b in range(a + 1, len(dense)):
                if (dense[a] & dense[b]).any():
                    return False
        return True

    best = None
    for r0 in range(len(ids0) + 1):
        for s0 in itertools.combinations(ids0, r0):
            if not valid(frames[0], s0):
                continue
            l_i0 = background_loss(frames[0].bg, union_foreground(frames[0], s0))
            for r1 in range(len(ids1) + 1):
                for s1 in itertools.combinations(ids1, r1):
                    if not valid(frames[1], s1):
                        continue
                    bd = pair_cost(scene, 0, s0, s1, weights)
                    total = weights.lambda_i * l_i0 + bd.weighted_total
                    key = (total, len(s0) + len(s1), (s0, s1))
                    if best is None or key < best:
                        best = key
    gt_pair = ((0, 1), (0, 1))
    assert best[2] == gt_pair
