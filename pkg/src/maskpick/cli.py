"""Command-line entry point.

Subcommands: gen (synthesize a scene), select (two-stage optimization),
oracle (exact exhaustive optimum), eval (match a selection against ground
truth), bench (evaluation-count budget run).  Exit codes: 0 ok,
1 io/validation error, 2 usage error, 3 oracle size guard, 4 budget
violation.  Each command prints one JSON report to stdout; diagnostics go
to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from typing import Optional, Sequence

from . import io as mio
from .errors import ConfigInvalid, InstanceTooLarge, MaskPickError
from .evaluate import evaluate_selection
from .losses import LossWeights
from .optimizer import AblationFlags, SelectionResult, oracle, select
from .synth import SynthConfig, emit, generate

BENCH_BUDGET = 10**8


def _counters_dict(result: SelectionResult) -> dict:
    c = result.counters
    return {
        "li_evaluations": c.li_evaluations,
        "pair_evaluations": c.pair_evaluations,
        "tree_nodes_expanded": c.tree_nodes_expanded,
        "trellis_edges_relaxed": c.trellis_edges_relaxed,
    }


def _parse_camera_flow(text: str) -> tuple[float, float]:
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"camera flow must be 'u,v', got {text!r}")
    return float(parts[0]), float(parts[1])


def cmd_gen(args) -> int:
    config = SynthConfig(
        width=args.width,
        height=args.height,
        num_frames=args.frames,
        objects=args.objects,
        distractors_per_frame=args.distractors,
        bg_noise_sigma=args.bg_noise,
        flow_noise_sigma=args.flow_noise,
        camera_flow=args.camera_flow,
        seed=args.seed,
    )
    manifest = emit(generate(config), args.out)
    print(json.dumps({"manifest": manifest}))
    return 0


def _run_selection(args, exact: bool) -> int:
    scene = mio.read_scene(args.scene)
    weights = LossWeights(
        lambda_i=getattr(args, "lambda_i", 1.0),
        lambda_f=getattr(args, "lambda_f", 1.0),
        lambda_p=getattr(args, "lambda_p", 0.5),
    )
    if exact:
        result = oracle(scene, weights, tolerance=args.overlap_tolerance)
    else:
        ablation = AblationFlags(
            use_flow=not args.no_flow,
            use_regularization=not args.no_reg,
            overlap_constraint=not args.no_overlap_constraint,
        )
        result = select(
            scene,
            weights,
            k=args.k,
            tolerance=args.overlap_tolerance,
            ablation=ablation,
            threads=args.threads,
        )
    doc = mio.selection_document(result, weights)
    mio.write_selection(doc, args.out)
    print(
        json.dumps(
            {
                "objective": result.objective,
                "output": args.out,
                "counters": _counters_dict(result),
            }
        )
    )
    return 0


def cmd_select(args) -> int:
    return _run_selection(args, exact=False)


def cmd_oracle(args) -> int:
    return _run_selection(args, exact=True)


def cmd_eval(args) -> int:
    scene = mio.read_scene(args.scene)
    gt = mio.read_ground_truth(args.gt)
    doc = mio.read_selection(args.pred)
    report = evaluate_selection(scene, gt, doc, iou_threshold=args.iou)
    print(
        json.dumps(
            {
                "precision": report.precision,
                "recall": report.recall,
                "f1": report.f1,
                "iou_threshold": report.iou_threshold,
                "total_pred": report.total_pred,
                "total_gt": report.total_gt,
                "total_matched": report.total_matched,
                "frames": [
                    {
                        "index": fm.index,
                        "matches": [list(m) for m in fm.matches],
                        "num_pred": fm.num_pred,
                        "num_gt": fm.num_gt,
                    }
                    for fm in report.frames
                ],
            }
        )
    )
    return 0


def cmd_bench(args) -> int:
    # static objects plus a moving camera keep long trajectories inside the
    # frame while the flow cue still separates objects from background
    objects = min(3, max(0, args.n))
    config = SynthConfig(
        width=64,
        height=48,
        num_frames=args.t,
        objects=objects,
        distractors_per_frame=max(0, args.n - objects),
        velocity_range=(0, 0),
        camera_flow=(1.0, 0.5),
        bg_noise_sigma=0.05,
        flow_noise_sigma=0.1,
        seed=args.seed,
    )
    synth_scene = generate(config)
    start = time.perf_counter()
    result = select(synth_scene.scene, LossWeights(), k=args.k)
    wall = time.perf_counter() - start
    total = result.counters.total()
    # analytic worst case K*T*N^3 + K^2*T^2; actual counters sit far below
    worst_case = args.k * args.t * max(args.n, 1) ** 3 + args.k**2 * args.t**2
    print(
        json.dumps(
            {
                "n": args.n,
                "t": args.t,
                "k": args.k,
                "counters": _counters_dict(result),
                "total_evaluations": total,
                "worst_case_bound": worst_case,
                "budget": BENCH_BUDGET,
                "wall_time_s": wall,
            }
        )
    )
    if total > BENCH_BUDGET:
        print(f"budget violation: {total} > {BENCH_BUDGET}", file=sys.stderr)
        return 4
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maskpick",
        description="Select per-frame object masks in a video by minimizing "
        "background, flow, and consistency losses.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic scene")
    gen.add_argument("--out", required=True, help="output directory")
    gen.add_argument("--frames", type=int, default=8)
    gen.add_argument("--objects", type=int, default=2)
    gen.add_argument("--width", type=int, default=64)
    gen.add_argument("--height", type=int, default=48)
    gen.add_argument("--distractors", type=int, default=3)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--bg-noise", type=float, default=0.0, dest="bg_noise")
    gen.add_argument("--flow-noise", type=float, default=0.0, dest="flow_noise")
    gen.add_argument(
        "--camera-flow", type=_parse_camera_flow, default=(0.0, 0.0), dest="camera_flow"
    )
    gen.set_defaults(func=cmd_gen)

    sel = sub.add_parser("select", help="run the two-stage selection")
    sel.add_argument("--scene", required=True, help="scene manifest path")
    sel.add_argument("--out", required=True, help="selection document path")
    sel.add_argument("--k", type=int, default=10)
    sel.add_argument("--lambda-i", type=float, default=1.0, dest="lambda_i")
    sel.add_argument("--lambda-f", type=float, default=1.0, dest="lambda_f")
    sel.add_argument("--lambda-p", type=float, default=0.5, dest="lambda_p")
    sel.add_argument("--overlap-tolerance", type=int, default=0, dest="overlap_tolerance")
    sel.add_argument("--no-flow", action="store_true", dest="no_flow")
    sel.add_argument("--no-reg", action="store_true", dest="no_reg")
    sel.add_argument(
        "--no-overlap-constraint", action="store_true", dest="no_overlap_constraint"
    )
    sel.add_argument("--threads", type=int, default=1)
    sel.set_defaults(func=cmd_select)

    orc = sub.add_parser("oracle", help="exact exhaustive optimum (small scenes)")
    orc.add_argument("--scene", required=True)
    orc.add_argument("--out", required=True)
    orc.add_argument("--lambda-i", type=float, default=1.0, dest="lambda_i")
    orc.add_argument("--lambda-f", type=float, default=1.0, dest="lambda_f")
    orc.add_argument("--lambda-p", type=float, default=0.5, dest="lambda_p")
    orc.add_argument("--overlap-tolerance", type=int, default=0, dest="overlap_tolerance")
    orc.set_defaults(func=cmd_oracle)

    ev = sub.add_parser("eval", help="score a selection against ground truth")
    ev.add_argument("--pred", required=True, help="selection document path")
    ev.add_argument("--scene", required=True, help="scene manifest path")
    ev.add_argument("--gt", required=True, help="ground-truth JSON path")
    ev.add_argument("--iou", type=float, default=0.5)
    ev.set_defaults(func=cmd_eval)

    bench = sub.add_parser("bench", help="evaluation-count budget check")
    bench.add_argument("--n", type=int, default=15, help="candidates per frame")
    bench.add_argument("--t", type=int, default=180, help="frames")
    bench.add_argument("--k", type=int, default=10)
    bench.add_argument("--seed", type=int, default=0)
    bench.set_defaults(func=cmd_bench)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except InstanceTooLarge as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ConfigInvalid as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (MaskPickError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
