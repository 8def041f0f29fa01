"""Two-stage minimization of the selection objective, plus an exact oracle.

Stage 1 runs per frame: a best-first (Dijkstra-style) search over an
implicit binary decision tree whose level i decides whether candidate i is
selected.  Branch weights come from the additive decomposition of the
background loss; taking a mask that overlaps an already-taken one is an
infinite-weight branch and is pruned.  Because per-mask deltas can be
negative, both branches at level i carry a uniform shift max(0, -delta_i),
which keeps weights non-negative without changing the leaf ordering (every
root-leaf path crosses every level exactly once).  Leaves therefore pop in
ascending (loss, #masks, id-list) order and the search stops after k of
them.

Stage 2 runs Dijkstra over the combination trellis: layer t holds frame
t's shortlist, transition edges cost
    lambda_i * L_I(t+1 combo) + lambda_f * L_F + lambda_p * L_p + shift
with shift = lambda_p, again a uniform per-edge constant that makes edges
non-negative (L_p is in [-1, 0]) and cancels out of the argmin because all
complete paths have the same edge count.  The search runs to exhaustion so
every transition edge is evaluated exactly once, which pins the pair
evaluation counter to exactly K^2 * (T-1) on full shortlists.

Ties are broken everywhere by the canonical key
(cost, number of selected masks, sorted id-list); path ties resolve to the
smallest predecessor shortlist rank, which matches a first-minimizer
Viterbi scan.

Evaluation budget: per frame the search performs at most 1 + N + k
background-loss evaluations, so li_evaluations <= 3 * k * max(N,1)^3 * T.
"""

from __future__ import annotations

import heapq
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .core import BitMask, FrameInputs, SceneBundle, rle_encode, union_foreground
from .errors import (
    EmptyShortlist,
    IndexOutOfRange,
    InstanceTooLarge,
    TooManyCandidates,
)
from .losses import (
    LossBreakdown,
    LossWeights,
    _round_half_up,
    _translate,
    background_loss_decomposed,
    flow_loss,
    regularization_loss,
    synthetic_flow,
)

N_MAX_DEFAULT = 24
ORACLE_MAX_CANDIDATES = 14
ORACLE_MAX_FRAMES = 12


@dataclass(frozen=True)
class AblationFlags:
    """Switches reproducing the ablation rows of the objective."""

    use_flow: bool = True
    use_regularization: bool = True
    overlap_constraint: bool = True


@dataclass
class EvalCounters:
    """Instrumentation: how many times each costly quantity was computed."""

    li_evaluations: int = 0
    pair_evaluations: int = 0
    tree_nodes_expanded: int = 0
    trellis_edges_relaxed: int = 0

    def merge(self, other: "EvalCounters") -> None:
        self.li_evaluations += other.li_evaluations
        self.pair_evaluations += other.pair_evaluations
        self.tree_nodes_expanded += other.tree_nodes_expanded
        self.trellis_edges_relaxed += other.trellis_edges_relaxed

    def total(self) -> int:
        return self.li_evaluations + self.pair_evaluations


@dataclass(frozen=True)
class Combination:
    """One realization of a frame's selection variables."""

    frame: int
    selection: tuple[int, ...]  # ascending candidate ids
    foreground: BitMask
    unary_li: float


@dataclass(frozen=True)
class FrameShortlist:
    """The k best combinations of one frame, ascending by unary loss."""

    frame: int
    combos: tuple[Combination, ...]


@dataclass
class Trellis:
    """The video-level graph: one layer per frame, one node per combination.

    `edge_cost((t,k),(t+1,k'))` returns the raw pair terms (l_f, l_p) of
    the transition; `shift` is the uniform per-transition-edge constant
    that keeps shifted edge costs non-negative.
    """

    shortlists: list[FrameShortlist]
    edge_cost: Callable[[tuple[int, int], tuple[int, int]], tuple[float, float]]
    shift: float
    weights: LossWeights
    counters: EvalCounters


@dataclass(frozen=True)
class SelectionResult:
    """Chosen combination per frame with loss breakdowns and counters."""

    chosen: tuple[Combination, ...]
    objective: float
    breakdowns: tuple[LossBreakdown, ...]  # one per transition
    counters: EvalCounters


class _FrameContext:
    """Per-frame precomputation: decomposition, overlaps, branch shifts."""

    def __init__(self, frame: FrameInputs, weights: LossWeights, tolerance: int):
        self.frame = frame
        self.cands = sorted(frame.candidates, key=lambda c: c.id)
        self.ids = [c.id for c in self.cands]
        self.dense = [c.mask.dense() for c in self.cands]
        base, by_id = background_loss_decomposed(frame.bg, frame, weights.epsilon)
        self.base = base
        self.deltas = [by_id[i] for i in self.ids]
        n = len(self.cands)
        self.overlap = [[False] * n for _ in range(n)]
        for a in range(n):
            for b in range(a + 1, n):
                inter = int(np.count_nonzero(self.dense[a] & self.dense[b]))
                self.overlap[a][b] = self.overlap[b][a] = inter > tolerance
        self.shifts = [max(0.0, -d) for d in self.deltas]
        total = 0.0
        for s in self.shifts:
            total += s
        self.total_shift = total

    def unary(self, take: Sequence[int]) -> float:
        """Unary loss of a selection, folded exactly like the tree search."""
        take_set = set(take)
        c = self.base
        for j in range(len(self.deltas)):
            c += self.shifts[j]
            if j in take_set:
                c += self.deltas[j]
        return c - self.total_shift

    def foreground(self, take: Sequence[int]) -> BitMask:
        h, w = self.frame.bg.height, self.frame.bg.width
        acc = np.zeros((h, w), dtype=bool)
        for j in take:
            acc |= self.dense[j]
        return rle_encode(acc)


def enumerate_topk(
    frame: FrameInputs,
    k: int,
    weights: Optional[LossWeights] = None,
    tolerance: int = 0,
    *,
    overlap_constraint: bool = True,
    n_max: int = N_MAX_DEFAULT,
    counters: Optional[EvalCounters] = None,
    _ctx: Optional[_FrameContext] = None,
) -> FrameShortlist:
    """The min(k, #valid) non-overlapping selections with smallest unary loss.

    The result only depends on the candidate set, never on its order; the
    empty selection is always legal.  With the overlap constraint disabled
    the overlap penalty is 0 instead of infinite, so every subset competes.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(frame.candidates) > n_max:
        raise TooManyCandidates(
            f"frame {frame.index} has {len(frame.candidates)} candidates, cap is {n_max}"
        )
    weights = weights or LossWeights()
    counters = counters if counters is not None else EvalCounters()
    ctx = _ctx if _ctx is not None else _FrameContext(frame, weights, tolerance)
    n = len(ctx.cands)
    counters.li_evaluations += 1 + n  # empty-selection base plus one delta per mask

    # entries: (shifted cost, #selected, selected index tuple, level)
    heap: list[tuple[float, int, tuple[int, ...], int]] = [(ctx.base, 0, (), 0)]
    leaves: list[tuple[float, tuple[int, ...]]] = []
    while heap and len(leaves) < k:
        cost, count, idxs, level = heapq.heappop(heap)
        if level == n:
            leaves.append((cost, idxs))
            counters.li_evaluations += 1
            continue
        counters.tree_nodes_expanded += 1
        skip_cost = cost + ctx.shifts[level]
        heapq.heappush(heap, (skip_cost, count, idxs, level + 1))
        if overlap_constraint and any(ctx.overlap[level][j] for j in idxs):
            continue  # infinite-weight branch
        take_cost = skip_cost + ctx.deltas[level]
        heapq.heappush(heap, (take_cost, count + 1, idxs + (level,), level + 1))

    combos = []
    for cost, idxs in leaves:
        combos.append(
            Combination(
                frame=frame.index,
                selection=tuple(ctx.ids[j] for j in idxs),
                foreground=ctx.foreground(idxs),
                unary_li=cost - ctx.total_shift,
            )
        )
    # leaves pop in shifted-cost order; removing the shift can turn
    # ulp-separated costs into exact ties, so re-sort on the final key
    combos.sort(key=lambda c: (c.unary_li, len(c.selection), c.selection))
    return FrameShortlist(frame.index, tuple(combos))


class _TransitionCache:
    """Memoized pair-term evaluation for one transition t -> t+1.

    With internally disjoint selections both pair terms decompose into
    per-candidate pieces: the foreground IoU reduces to a cross-frame
    intersection table and the flow L1 splits into per-mask and
    outside-foreground sums.  The dense loss-module path is kept as the
    fallback when selections may overlap.
    """

    def __init__(self, scene: SceneBundle, t: int, counters: EvalCounters, disjoint: bool):
        self.scene = scene
        self.t = t
        self.counters = counters
        self.disjoint = disjoint
        self.frame_t = scene.frames[t]
        self.frame_t1 = scene.frames[t + 1]
        flow = self.frame_t.flow_to_next
        self.u = flow.u.values
        self.v = flow.v.values
        self.hw = float(self.u.size)
        self.total_u = float(self.u.sum())
        self.total_v = float(self.v.sum())

        def prep(frame):
            cands = sorted(frame.candidates, key=lambda c: c.id)
            dense = {c.id: c.mask.dense() for c in cands}
            area = {c.id: c.area for c in cands}
            cent = {}
            for c in cands:
                rows, cols = np.nonzero(dense[c.id])
                cent[c.id] = (float(cols.mean()), float(rows.mean()))
            return [c.id for c in cands], dense, area, cent

        self.ids_t, self.dense_t, self.area_t, self.cent_t = prep(self.frame_t)
        self.ids_t1, self.dense_t1, self.area_t1, self.cent_t1 = prep(self.frame_t1)

        self.sum_u = {i: float(self.u[d].sum()) for i, d in self.dense_t.items()}
        self.sum_v = {i: float(self.v[d].sum()) for i, d in self.dense_t.items()}

        # IoU of each t-mask translated by its rounded mean flow vs each t+1 mask
        self.tiou: dict[tuple[int, int], float] = {}
        self.cross_inter: dict[tuple[int, int], int] = {}
        for i in self.ids_t:
            d = self.dense_t[i]
            a = self.area_t[i]
            moved = _translate(
                d,
                _round_half_up(self.sum_u[i] / a),
                _round_half_up(self.sum_v[i] / a),
            )
            moved_area = int(moved.sum())
            for j in self.ids_t1:
                dj = self.dense_t1[j]
                inter = int(np.count_nonzero(moved & dj))
                if inter > 0:
                    self.tiou[(i, j)] = inter / float(moved_area + self.area_t1[j] - inter)
                self.cross_inter[(i, j)] = int(np.count_nonzero(d & dj))

        self._bg: dict[tuple[int, ...], tuple[float, float, float]] = {}
        self._m1: dict[tuple[int, int], float] = {}
        self._m2: dict[tuple[int, tuple[int, ...]], float] = {}
        self._pairs: dict[tuple[tuple[int, ...], tuple[int, ...]], tuple[float, float]] = {}

    def _background(self, sel_t: tuple[int, ...]) -> tuple[float, float, float]:
        """(mean u, mean v, outside L1 sum) for one frame-t selection."""
        hit = self._bg.get(sel_t)
        if hit is not None:
            return hit
        area = sum(self.area_t[i] for i in sel_t)
        outside_count = self.hw - area
        if outside_count > 0:
            bu = (self.total_u - sum(self.sum_u[i] for i in sel_t)) / outside_count
            bv = (self.total_v - sum(self.sum_v[i] for i in sel_t)) / outside_count
        else:
            bu = self.total_u / self.hw
            bv = self.total_v / self.hw
        if sel_t:
            fg = np.zeros_like(self.dense_t[sel_t[0]])
            for i in sel_t:
                fg |= self.dense_t[i]
            outside = ~fg
        else:
            outside = np.ones(self.u.shape, dtype=bool)
        t3 = float(np.abs(self.u[outside] - bu).sum() + np.abs(self.v[outside] - bv).sum())
        result = (bu, bv, t3)
        self._bg[sel_t] = result
        return result

    def _match(self, sel_t: tuple[int, ...], sel_t1: tuple[int, ...]) -> dict[int, int]:
        taken: set[int] = set()
        matches: dict[int, int] = {}
        for i in sel_t:
            best_iou = 0.0
            best = None
            for j in sel_t1:
                if j in taken:
                    continue
                iou = self.tiou.get((i, j), 0.0)
                if iou > best_iou:
                    best_iou, best = iou, j
            if best is not None:
                matches[i] = best
                taken.add(best)
        return matches

    def _matched_term(self, i: int, j: int) -> float:
        hit = self._m1.get((i, j))
        if hit is not None:
            return hit
        du = self.cent_t1[j][0] - self.cent_t[i][0]
        dv = self.cent_t1[j][1] - self.cent_t[i][1]
        d = self.dense_t[i]
        term = float(np.abs(self.u[d] - du).sum() + np.abs(self.v[d] - dv).sum())
        self._m1[(i, j)] = term
        return term

    def _unmatched_term(self, i: int, sel_t: tuple[int, ...]) -> float:
        key = (i, sel_t)
        hit = self._m2.get(key)
        if hit is not None:
            return hit
        bu, bv, _ = self._background(sel_t)
        d = self.dense_t[i]
        term = float(np.abs(self.u[d] - bu).sum() + np.abs(self.v[d] - bv).sum())
        self._m2[key] = term
        return term

    def pair_terms(self, sel_t: tuple[int, ...], sel_t1: tuple[int, ...]) -> tuple[float, float]:
        key = (sel_t, sel_t1)
        hit = self._pairs.get(key)
        if hit is not None:
            return hit
        self.counters.pair_evaluations += 1
        if self.disjoint:
            matches = self._match(sel_t, sel_t1)
            _, _, lf_sum = self._background(sel_t)
            for i in sel_t:
                j = matches.get(i)
                if j is None:
                    lf_sum += self._unmatched_term(i, sel_t)
                else:
                    lf_sum += self._matched_term(i, j)
            l_f = lf_sum / self.hw
            inter = 0
            for i in sel_t:
                for j in sel_t1:
                    inter += self.cross_inter[(i, j)]
            union = sum(self.area_t[i] for i in sel_t) + sum(
                self.area_t1[j] for j in sel_t1
            ) - inter
            l_p = -inter / float(union) if union > 0 else 0.0
        else:
            synth = synthetic_flow(
                self.frame_t, self.frame_t1, sel_t, sel_t1, self.frame_t.flow_to_next
            )
            l_f = flow_loss(self.frame_t.flow_to_next, synth)
            l_p = regularization_loss(
                union_foreground(self.frame_t, sel_t),
                union_foreground(self.frame_t1, sel_t1),
            )
        self._pairs[key] = (l_f, l_p)
        return (l_f, l_p)


def _fold_objective(
    unaries: Sequence[float],
    pair_terms: Sequence[tuple[float, float]],
    weights: LossWeights,
) -> float:
    """Canonical left-to-right accumulation of the total objective."""
    total = weights.lambda_i * unaries[0]
    for t, (l_f, l_p) in enumerate(pair_terms):
        total += weights.lambda_f * l_f
        total += weights.lambda_p * l_p
        total += weights.lambda_i * unaries[t + 1]
    return total


def build_trellis(
    scene: SceneBundle,
    shortlists: Sequence[FrameShortlist],
    weights: LossWeights,
    counters: Optional[EvalCounters] = None,
    selections_disjoint: bool = True,
) -> Trellis:
    """Assemble the video-level trellis over the per-frame shortlists.

    Pair terms are evaluated lazily on first relaxation and cached, so each
    transition edge costs exactly one evaluation.  `selections_disjoint`
    enables the decomposed fast path and must only be set when every
    shortlist selection is internally non-overlapping.
    """
    if len(shortlists) != scene.num_frames:
        raise ValueError("need exactly one shortlist per frame")
    for sl in shortlists:
        if not sl.combos:
            raise EmptyShortlist(f"frame {sl.frame} has an empty shortlist")
    counters = counters if counters is not None else EvalCounters()
    caches: dict[int, _TransitionCache] = {}

    def edge_cost(a: tuple[int, int], b: tuple[int, int]) -> tuple[float, float]:
        (t, k), (t1, kp) = a, b
        if t1 != t + 1 or not (0 <= t < scene.num_frames - 1):
            raise IndexOutOfRange(f"invalid trellis edge {a} -> {b}")
        cache = caches.get(t)
        if cache is None:
            cache = _TransitionCache(scene, t, counters, selections_disjoint)
            caches[t] = cache
        return cache.pair_terms(
            shortlists[t].combos[k].selection, shortlists[t1].combos[kp].selection
        )

    return Trellis(
        shortlists=list(shortlists),
        edge_cost=edge_cost,
        shift=weights.lambda_p,
        weights=weights,
        counters=counters,
    )


def shortest_path(trellis: Trellis) -> SelectionResult:
    """Dijkstra over the shifted trellis, run to exhaustion.

    Running until the queue drains (instead of stopping at the sink) makes
    every transition edge relax exactly once, and equal-distance ties keep
    the smallest predecessor rank, matching a first-minimizer Viterbi scan.
    """
    shortlists = trellis.shortlists
    num_frames = len(shortlists)
    w = trellis.weights
    counters = trellis.counters

    dist = [[float("inf")] * len(sl.combos) for sl in shortlists]
    pred: list[list[Optional[int]]] = [[None] * len(sl.combos) for sl in shortlists]
    settled = [[False] * len(sl.combos) for sl in shortlists]
    heap: list[tuple[float, int, int]] = []
    for k, combo in enumerate(shortlists[0].combos):
        d = w.lambda_i * combo.unary_li
        counters.trellis_edges_relaxed += 1
        dist[0][k] = d
        heapq.heappush(heap, (d, 0, k))

    sink_dist = float("inf")
    sink_pred: Optional[int] = None
    while heap:
        d, t, k = heapq.heappop(heap)
        if settled[t][k]:
            continue
        settled[t][k] = True
        if t == num_frames - 1:
            counters.trellis_edges_relaxed += 1  # zero-cost sink edge
            if d < sink_dist:
                sink_dist, sink_pred = d, k
            continue
        for kp, combo in enumerate(shortlists[t + 1].combos):
            l_f, l_p = trellis.edge_cost((t, k), (t + 1, kp))
            counters.trellis_edges_relaxed += 1
            edge = w.lambda_f * l_f
            edge += w.lambda_p * l_p
            edge += w.lambda_i * combo.unary_li
            edge += trellis.shift
            nd = d + edge
            if nd < dist[t + 1][kp]:
                dist[t + 1][kp] = nd
                pred[t + 1][kp] = k
                heapq.heappush(heap, (nd, t + 1, kp))
            elif nd == dist[t + 1][kp] and pred[t + 1][kp] is not None and k < pred[t + 1][kp]:
                pred[t + 1][kp] = k

    ks = [0] * num_frames
    ks[num_frames - 1] = sink_pred
    for t in range(num_frames - 1, 0, -1):
        ks[t - 1] = pred[t][ks[t]]
    chosen = tuple(shortlists[t].combos[ks[t]] for t in range(num_frames))

    pair_terms = [
        trellis.edge_cost((t, ks[t]), (t + 1, ks[t + 1])) for t in range(num_frames - 1)
    ]
    breakdowns = tuple(
        LossBreakdown.build(chosen[t + 1].unary_li, l_f, l_p, w)
        for t, (l_f, l_p) in enumerate(pair_terms)
    )
    objective = _fold_objective([c.unary_li for c in chosen], pair_terms, w)
    return SelectionResult(chosen, objective, breakdowns, counters)


def _pruned(frame: FrameInputs, n_max: int) -> FrameInputs:
    if len(frame.candidates) <= n_max:
        return frame
    keep = sorted(frame.candidates, key=lambda c: (-c.score, c.id))[:n_max]
    return replace(frame, candidates=tuple(sorted(keep, key=lambda c: c.id)))


def select(
    scene: SceneBundle,
    weights: Optional[LossWeights] = None,
    k: int = 10,
    tolerance: int = 0,
    ablation: Optional[AblationFlags] = None,
    threads: int = 1,
    n_max: int = N_MAX_DEFAULT,
) -> SelectionResult:
    """Full two-stage selection over a scene.

    Frames beyond `n_max` candidates are pre-pruned to the highest-score
    ones.  Stage 1 may run frames on a thread pool; results are identical
    to sequential execution for any thread count.
    """
    weights = weights or LossWeights()
    ablation = ablation or AblationFlags()
    eff = replace(
        weights,
        lambda_f=weights.lambda_f if ablation.use_flow else 0.0,
        lambda_p=weights.lambda_p if ablation.use_regularization else 0.0,
    )
    counters = EvalCounters()
    frames = [_pruned(f, n_max) for f in scene.frames]

    def stage1(frame: FrameInputs) -> tuple[FrameShortlist, EvalCounters]:
        local = EvalCounters()
        sl = enumerate_topk(
            frame,
            k,
            eff,
            tolerance,
            overlap_constraint=ablation.overlap_constraint,
            n_max=n_max,
            counters=local,
        )
        return sl, local

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            stage1_out = list(pool.map(stage1, frames))
    else:
        stage1_out = [stage1(f) for f in frames]
    shortlists = []
    for sl, local in stage1_out:
        shortlists.append(sl)
        counters.merge(local)

    trellis = build_trellis(
        scene,
        shortlists,
        eff,
        counters=counters,
        selections_disjoint=ablation.overlap_constraint and tolerance == 0,
    )
    return shortest_path(trellis)


def oracle(
    scene: SceneBundle,
    weights: Optional[LossWeights] = None,
    tolerance: int = 0,
) -> SelectionResult:
    """Exact global minimum by exhaustive per-frame enumeration plus chain DP.

    Valid because the objective couples only consecutive frames.  Guarded
    to N <= 14 candidates and T <= 12 frames; beyond that the subset
    enumeration is computationally prohibitive.
    """
    weights = weights or LossWeights()
    num_frames = scene.num_frames
    if num_frames > ORACLE_MAX_FRAMES:
        raise InstanceTooLarge(f"{num_frames} frames exceeds oracle guard {ORACLE_MAX_FRAMES}")
    for frame in scene.frames:
        if len(frame.candidates) > ORACLE_MAX_CANDIDATES:
            raise InstanceTooLarge(
                f"frame {frame.index} has {len(frame.candidates)} candidates, "
                f"oracle guard is {ORACLE_MAX_CANDIDATES}"
            )

    counters = EvalCounters()
    contexts = [_FrameContext(f, weights, tolerance) for f in scene.frames]
    # (unary, selected index tuple) per frame, canonically sorted
    layers: list[list[tuple[float, tuple[int, ...]]]] = []
    for ctx in contexts:
        n = len(ctx.cands)
        counters.li_evaluations += 1 + n
        entries = []
        for bits in range(1 << n):
            idxs = tuple(j for j in range(n) if bits >> j & 1)
            ok = True
            for a in range(len(idxs)):
                for b in range(a + 1, len(idxs)):
                    if ctx.overlap[idxs[a]][idxs[b]]:
                        ok = False
                        break
                if not ok:
                    break
            if not ok:
                continue
            counters.li_evaluations += 1
            entries.append((ctx.unary(idxs), idxs))
        entries.sort(key=lambda e: (e[0], len(e[1]), tuple(ctx.ids[j] for j in e[1])))
        layers.append(entries)

    disjoint = tolerance == 0
    caches = [
        _TransitionCache(scene, t, counters, disjoint) for t in range(num_frames - 1)
    ]

    def sel_ids(t: int, entry_idx: int) -> tuple[int, ...]:
        return tuple(contexts[t].ids[j] for j in layers[t][entry_idx][1])

    dist = [weights.lambda_i * u for u, _ in layers[0]]
    counters.trellis_edges_relaxed += len(dist)
    preds: list[list[int]] = []
    for t in range(num_frames - 1):
        nxt = layers[t + 1]
        ndist = [float("inf")] * len(nxt)
        npred = [0] * len(nxt)
        ids_here = [sel_ids(t, j) for j in range(len(layers[t]))]
        ids_next = [sel_ids(t + 1, j) for j in range(len(nxt))]
        for jp, (u1, _) in enumerate(nxt):
            best = float("inf")
            best_j = 0
            for j in range(len(layers[t])):
                l_f, l_p = caches[t].pair_terms(ids_here[j], ids_next[jp])
                counters.trellis_edges_relaxed += 1
                cand = dist[j] + weights.lambda_f * l_f
                cand = cand + weights.lambda_p * l_p
                cand = cand + weights.lambda_i * u1
                if cand < best:
                    best = cand
                    best_j = j
            ndist[jp] = best
            npred[jp] = best_j
        dist = ndist
        preds.append(npred)

    last = min(range(len(dist)), key=lambda j: (dist[j], j))
    counters.trellis_edges_relaxed += len(dist)
    picks = [0] * num_frames
    picks[num_frames - 1] = last
    for t in range(num_frames - 1, 0, -1):
        picks[t - 1] = preds[t - 1][picks[t]]

    chosen = []
    for t in range(num_frames):
        unary, idxs = layers[t][picks[t]]
        ctx = contexts[t]
        chosen.append(
            Combination(
                frame=t,
                selection=tuple(ctx.ids[j] for j in idxs),
                foreground=ctx.foreground(idxs),
                unary_li=unary,
            )
        )
    pair_terms = [
        caches[t].pair_terms(chosen[t].selection, chosen[t + 1].selection)
        for t in range(num_frames - 1)
    ]
    breakdowns = tuple(
        LossBreakdown.build(chosen[t + 1].unary_li, l_f, l_p, weights)
        for t, (l_f, l_p) in enumerate(pair_terms)
    )
    objective = _fold_objective([c.unary_li for c in chosen], pair_terms, weights)
    return SelectionResult(tuple(chosen), objective, breakdowns, counters)
