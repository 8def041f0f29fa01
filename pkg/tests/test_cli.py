import json
import os

from maskpick.cli import main
from maskpick.io import read_scene, read_selection, selection_document, write_selection
from maskpick.losses import LossWeights
from maskpick.optimizer import AblationFlags, select
from maskpick.synth import read_provenance


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def gen_scene(capsys, tmp_path, name="scene", **flags):
    args = [
        "gen", "--out", str(tmp_path / name), "--frames", "4", "--objects", "2",
        "--width", "48", "--height", "36", "--distractors", "2", "--seed", "7",
    ]
    for key, value in flags.items():
        args += [f"--{key}", str(value)]
    code, out, _ = run(capsys, *args)
    assert code == 0
    return json.loads(out)["manifest"]


def test_gen_creates_expected_files(capsys, tmp_path):
    manifest = gen_scene(capsys, tmp_path)
    d = os.path.dirname(manifest)
    names = sorted(os.listdir(d))
    assert names.count("manifest.json") == 1
    assert sum(n.endswith(".cand") for n in names) == 4
    assert sum(n.endswith(".pmap") for n in names) == 4
    assert sum(n.endswith(".flo") for n in names) == 3
    assert "gt.json" in names and "provenance.json" in names


def test_gen_missing_out_is_usage_error(capsys):
    code, _, _ = run(capsys, "gen", "--frames", "4")
    assert code == 2


def test_gen_invalid_config_exit_2(capsys, tmp_path):
    code, _, err = run(
        capsys, "gen", "--out", str(tmp_path / "x"), "--frames", "40",
        "--objects", "1", "--width", "16", "--height", "16",
        "--distractors", "0", "--seed", "0",
    )
    assert code == 2
    assert err.strip()


def test_gen_deterministic(capsys, tmp_path):
    m1 = gen_scene(capsys, tmp_path, name="a")
    m2 = gen_scene(capsys, tmp_path, name="b")
    d1, d2 = os.path.dirname(m1), os.path.dirname(m2)
    for name in sorted(os.listdir(d1)):
        with open(os.path.join(d1, name), "rb") as fa, open(os.path.join(d2, name), "rb") as fb:
            assert fa.read() == fb.read(), name


def test_select_defaults_recover_ground_truth(capsys, tmp_path):
    manifest = gen_scene(capsys, tmp_path)
    out = tmp_path / "sel.json"
    code, stdout, _ = run(capsys, "select", "--scene", manifest, "--out", str(out))
    assert code == 0
    report = json.loads(stdout)
    assert "objective" in report and "counters" in report
    doc = read_selection(str(out))
    prov = read_provenance(os.path.join(os.path.dirname(manifest), "provenance.json"))
    for fs in doc.frames:
        gt_ids = tuple(
            sorted(i for i, p in prov[fs.index].items() if p["kind"] == "ground_truth")
        )
        assert fs.selected == gt_ids


def test_select_flag_ablation_equals_zero_weights(capsys, tmp_path):
    manifest = gen_scene(capsys, tmp_path)
    out_flags = tmp_path / "flags.json"
    code, _, _ = run(
        capsys, "select", "--scene", manifest, "--out", str(out_flags),
        "--no-flow", "--no-reg",
    )
    assert code == 0
    scene = read_scene(manifest)
    weights = LossWeights()
    result = select(
        scene, weights, k=10,
        ablation=AblationFlags(use_flow=False, use_regularization=False),
    )
    doc = read_selection(str(out_flags))
    assert [fs.selected for fs in doc.frames] == [c.selection for c in result.chosen]


def test_select_k1_not_better_than_default(capsys, tmp_path):
    manifest = gen_scene(capsys, tmp_path, **{"bg-noise": 0.1, "flow-noise": 0.3})
    out1 = tmp_path / "k1.json"
    out10 = tmp_path / "k10.json"
    code1, stdout1, _ = run(capsys, "select", "--scene", manifest, "--out", str(out1), "--k", "1")
    code10, stdout10, _ = run(capsys, "select", "--scene", manifest, "--out", str(out10))
    assert code1 == 0 and code10 == 0
    assert json.loads(stdout1)["objective"] >= json.loads(stdout10)["objective"]


def test_select_threads_invariant(capsys, tmp_path):
    manifest = gen_scene(capsys, tmp_path, **{"bg-noise": 0.05})
    outs = []
    for threads in (1, 3):
        out = tmp_path / f"t{threads}.json"
        code, _, _ = run(
            capsys, "select", "--scene", manifest, "--out", str(out),
            "--threads", str(threads),
        )
        assert code == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


def test_select_missing_scene_exit_1(capsys, tmp_path):
    code, _, err = run(
        capsys, "select", "--scene", str(tmp_path / "nope.json"),
        "--out", str(tmp_path / "o.json"),
    )
    assert code == 1
    assert err.strip()


def test_oracle_small_scene_not_worse(capsys, tmp_path):
    manifest = gen_scene(capsys, tmp_path, **{"bg-noise": 0.1})
    sel_out = tmp_path / "sel.json"
    orc_out = tmp_path / "orc.json"
    _, sel_stdout, _ = run(capsys, "select", "--scene", manifest, "--out", str(sel_out), "--k", "2")
    code, orc_stdout, _ = run(capsys, "oracle", "--scene", manifest, "--out", str(orc_out))
    assert code == 0
    assert json.loads(orc_stdout)["objective"] <= json.loads(sel_stdout)["objective"] + 1e-12


def test_oracle_full_k_select_equivalent(capsys, tmp_path):
    manifest = gen_scene(capsys, tmp_path)
    scene = read_scene(manifest)
    n = max(len(f.candidates) for f in scene.frames)
    sel_out = tmp_path / "sel.json"
    orc_out = tmp_path / "orc.json"
    run(capsys, "select", "--scene", manifest, "--out", str(sel_out), "--k", str(2 ** n))
    run(capsys, "oracle", "--scene", manifest, "--out", str(orc_out))
    sel_doc = read_selection(str(sel_out))
    orc_doc = read_selection(str(orc_out))
    # identical selections and losses; counters differ by algorithm
    assert sel_doc.frames == orc_doc.frames
    assert sel_doc.objective == orc_doc.objective


def test_oracle_oversized_exit_3(capsys, tmp_path):
    code, _, _ = run(
        capsys, "gen", "--out", str(tmp_path / "big"), "--frames", "2",
        "--objects", "2", "--width", "64", "--height", "48",
        "--distractors", "14", "--seed", "3",
    )
    assert code == 0
    code, _, err = run(
        capsys, "oracle", "--scene", str(tmp_path / "big" / "manifest.json"),
        "--out", str(tmp_path / "o.json"),
    )
    assert code == 3
    assert err.strip()


def test_eval_perfect(capsys, tmp_path):
    manifest = gen_scene(capsys, tmp_path)
    sel_out = tmp_path / "sel.json"
    run(capsys, "select", "--scene", manifest, "--out", str(sel_out))
    gt = os.path.join(os.path.dirname(manifest), "gt.json")
    code, stdout, _ = run(
        capsys, "eval", "--pred", str(sel_out), "--scene", manifest, "--gt", gt
    )
    assert code == 0
    report = json.loads(stdout)
    assert report["precision"] == report["recall"] == report["f1"] == 1.0


def test_eval_empty_predictions(capsys, tmp_path):
    manifest = gen_scene(capsys, tmp_path)
    scene = read_scene(manifest)
    weights = LossWeights()
    # force empty selections by writing a doctored document
    result = select(scene, weights)
    doc = selection_document(result, weights)
    empty = doc.__class__(
        frames=tuple(
            fs.__class__(index=fs.index, selected=(), breakdown=fs.breakdown)
            for fs in doc.frames
        ),
        objective=doc.objective,
        weights=doc.weights,
        counters=doc.counters,
    )
    pred = tmp_path / "empty.json"
    write_selection(empty, str(pred))
    gt = os.path.join(os.path.dirname(manifest), "gt.json")
    code, stdout, _ = run(capsys, "eval", "--pred", str(pred), "--scene", manifest, "--gt", gt)
    assert code == 0
    report = json.loads(stdout)
    assert report["precision"] == 0.0 and report["recall"] == 0.0 and report["f1"] == 0.0


def test_eval_half_recall(capsys, tmp_path):
    manifest = gen_scene(capsys, tmp_path)
    scene = read_scene(manifest)
    weights = LossWeights()
    result = select(scene, weights)
    doc = selection_document(result, weights)
    # keep only ground-truth object 0 in every frame
    halved = doc.__class__(
        frames=tuple(
            fs.__class__(index=fs.index, selected=(0,), breakdown=fs.breakdown)
            for fs in doc.frames
        ),
        objective=doc.objective,
        weights=doc.weights,
        counters=doc.counters,
    )
    pred = tmp_path / "half.json"
    write_selection(halved, str(pred))
    gt = os.path.join(os.path.dirname(manifest), "gt.json")
    code, stdout, _ = run(capsys, "eval", "--pred", str(pred), "--scene", manifest, "--gt", gt)
    assert code == 0
    report = json.loads(stdout)
    assert report["recall"] == 0.5
    assert report["precision"] == 1.0


def test_eval_unknown_id_exit_1(capsys, tmp_path):
    manifest = gen_scene(capsys, tmp_path)
    scene = read_scene(manifest)
    weights = LossWeights()
    doc = selection_document(select(scene, weights), weights)
    bad = doc.__class__(
        frames=tuple(
            fs.__class__(index=fs.index, selected=(99,), breakdown=fs.breakdown)
            for fs in doc.frames
        ),
        objective=doc.objective,
        weights=doc.weights,
        counters=doc.counters,
    )
    pred = tmp_path / "bad.json"
    write_selection(bad, str(pred))
    gt = os.path.join(os.path.dirname(manifest), "gt.json")
    code, _, err = run(capsys, "eval", "--pred", str(pred), "--scene", manifest, "--gt", gt)
    assert code == 1
    assert err.strip()


def test_bench_tiny(capsys):
    code, stdout, _ = run(capsys, "bench", "--n", "6", "--t", "5", "--k", "3")
    assert code == 0
    report = json.loads(stdout)
    assert report["counters"]["pair_evaluations"] == 3 * 3 * 4
    assert report["total_evaluations"] <= 10**8
    assert report["wall_time_s"] >= 0.0
    assert report["worst_case_bound"] == 3 * 5 * 6**3 + 9 * 25


def test_bench_reference_size_bound_matches_claim():
    # the analytic worst case at N=15, T=180, K=10 sits in the 1e6..1e8 band
    bound = 10 * 180 * 15**3 + 100 * 180**2
    assert 10**6 <= bound <= 10**8


def test_bench_single_frame_no_pairs(capsys):
    code, stdout, _ = run(capsys, "bench", "--n", "5", "--t", "1", "--k", "4")
    assert code == 0
    assert json.loads(stdout)["counters"]["pair_evaluations"] == 0


def test_bench_k1_single_path(capsys):
    code, stdout, _ = run(capsys, "bench", "--n", "5", "--t", "6", "--k", "1")
    assert code == 0
    assert json.loads(stdout)["counters"]["pair_evaluations"] <= 5
