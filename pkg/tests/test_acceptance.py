"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` to see the verdicts.
"""

import json
import math
import time

import numpy as np
import pytest

from cadalign.annotations import read_annotation, write_annotation
from cadalign.cad_db import initial_pose_from_obb
from cadalign.cli import main
from cadalign.config import PipelineConfig, RefinementConfig, WEIGHT_PRESETS
from cadalign.geometry import (
    Pose9,
    TriMesh,
    chamfer_one_way,
    quat_about_axis,
    quat_from_axis_angle,
    quat_mul,
    rotation_angle,
)
from cadalign.objective import chamfer_translation_gradient, eval_objective, posed_chamfer
from cadalign.render import Camera, fuse_depth, render_depth
from cadalign.retrieval import (
    ShapeDistances,
    annotate_scene,
    cluster_pairs,
    cluster_retrievals,
    prepare_object,
    refine_pose,
    retrieve_top_k,
    score,
)
from cadalign.synth import database_in_memory

from conftest import brute_chamfer, clone_scene, single_object_scene

SCANNET = WEIGHT_PRESETS["scannet"]


def verdict(number, ok, detail):
    print(f"\n{'PASS' if ok else 'FAIL'} criterion {number:>2}: {detail}")
    assert ok, detail


# 1 ---------------------------------------------------------------------------


def test_c01_chamfer_matches_brute_force():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        p = rng.normal(size=(rng.integers(1, 501), 3)) * rng.uniform(0.01, 10)
        q = rng.normal(size=(rng.integers(1, 501), 3)) * rng.uniform(0.01, 10) + rng.normal(size=3)
        worst = max(worst, abs(chamfer_one_way(p, q) - brute_chamfer(p, q)))
    elapsed = time.perf_counter() - t0
    verdict(1, worst <= 1e-9 and elapsed < 10, f"max |kd-tree - brute| = {worst:.2e} on 100 instances in {elapsed:.2f}s")


# 2 ---------------------------------------------------------------------------

CAM = Camera(fx=40.0, fy=40.0, cx=16.0, cy=12.0, width=32, height=24)


def plane(z, half):
    v = [[-half, -half, z], [half, -half, z], [half, half, z], [-half, half, z]]
    return TriMesh(v, [[0, 1, 2], [0, 2, 3]])


def random_mesh(rng, n_tris=5):
    centers = rng.uniform([-1, -1, 1.5], [1, 1, 4], (n_tris, 1, 3))
    v = (centers + rng.normal(scale=0.6, size=(n_tris, 3, 3))).reshape(-1, 3)
    return TriMesh(v, np.arange(3 * n_tris).reshape(-1, 3))


def test_c02_rasterizer_ground_truth():
    d = render_depth([plane(2.0, 0.4)], CAM)
    covered = d > 0
    plane_ok = 0 < covered.sum() < d.size and np.all(d[covered] == 2.0)

    near, far = plane(2.0, 0.4), plane(3.0, 50.0)
    joint = render_depth([far, near], CAM)
    occlusion_ok = np.all(joint[covered] == 2.0) and np.all(joint[~covered] == 3.0)

    rng = np.random.default_rng(3)
    fused_ok = 0
    for _ in range(20):
        a, b = random_mesh(rng), random_mesh(rng)
        fused = fuse_depth(render_depth([a], CAM), render_depth([b], CAM))
        fused_ok += np.array_equal(fused, render_depth([a, b], CAM))
    verdict(2, bool(plane_ok and occlusion_ok and fused_ok == 20),
            f"plane exact={plane_ok}, occlusion={occlusion_ok}, fuse==joint on {fused_ok}/20 scenes")


# 3 ---------------------------------------------------------------------------

FLOOR_SAMPLES = 4_000_000


def test_c03_objective_floor_and_dominance():
    t0 = time.perf_counter()
    db = database_in_memory({"chair": 6, "table": 3}, seed=1)
    scan, _, pose = single_object_scene(db, "chair_002", "chair")
    cfg = PipelineConfig(n_t=8)
    ctx = prepare_object(scan, scan.annotations[0], cfg)
    model = db.model("chair_002")

    # the floor is measured with dense surface samples so that the sampling
    # gap of the CAD cloud does not dominate the Chamfer term
    floor = eval_objective(ctx.cache, model, pose, SCANNET, n_samples=FLOOR_SAMPLES).total

    gt = score(ctx.cache, model, pose, cfg).total
    worst_margin = math.inf
    rng = np.random.default_rng(0)
    for _ in range(6):
        d = rng.normal(size=3)
        d *= 0.5 / np.linalg.norm(d)
        moved = Pose9(pose.scale, pose.rotation, pose.translation + d)
        worst_margin = min(worst_margin, score(ctx.cache, model, moved, cfg).total - gt)
    for mid in sorted(db.category_index["chair"]):
        if mid != "chair_002":
            other = db.model(mid)
            p0 = initial_pose_from_obb(ctx.ann.obb, other)
            worst_margin = min(worst_margin, score(ctx.cache, other, p0, cfg).total - gt)
    elapsed = time.perf_counter() - t0
    verdict(3, floor <= 1e-3 and worst_margin > 0 and elapsed < 120,
            f"floor {floor:.2e} ({FLOOR_SAMPLES} samples), smallest dominance margin {worst_margin:.4f}, {elapsed:.1f}s")


# 4 ---------------------------------------------------------------------------


def test_c04_planted_model_retrieval():
    t0 = time.perf_counter()
    db = database_in_memory({"chair": 51}, seed=11)
    cfg = PipelineConfig(n_t=8)
    rng = np.random.default_rng(0)
    hits, misses = 0, []
    for s in range(10):
        planted = f"chair_{5 * s:03d}"
        x, y, yaw = rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4), rng.uniform(-math.pi, math.pi)
        scan, _, _ = single_object_scene(db, planted, "chair", x, y, yaw, seed=100 + s,
                                         obb_noise={"translation": 0.01, "yaw_deg": 2.0, "scale": 0.02})
        top = retrieve_top_k(prepare_object(scan, scan.annotations[0], cfg), db, cfg, k=3)
        if top[0].model_id == planted:
            hits += 1
        else:
            misses.append((planted, top[0].model_id))
    elapsed = time.perf_counter() - t0
    verdict(4, hits >= 9 and elapsed < 900, f"{hits}/10 rank-1 hits among 51 models in {elapsed:.1f}s; misses {misses}")


# 5 ---------------------------------------------------------------------------


def random_unit(rng):
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


@pytest.mark.slow
def test_c05_perturb_and_recover():
    db = database_in_memory({"chair": 8}, seed=1)
    model = db.model("chair_007")
    scan, _, pose = single_object_scene(db, "chair_007", "chair", count=16)
    cfg = PipelineConfig(n_t=8)
    ctx = prepare_object(scan, scan.annotations[0], cfg)
    rng = np.random.default_rng(5)
    recovered, never_worse, worst = 0, True, (0.0, 0.0, 0.0)
    for _ in range(20):
        start = Pose9(
            pose.scale * rng.uniform(0.9, 1.1, 3),
            quat_mul(quat_from_axis_angle(random_unit(rng) * math.radians(rng.uniform(0, 15))), pose.rotation),
            pose.translation + random_unit(rng) * rng.uniform(0, 0.1),
        )
        b0 = score(ctx.cache, model, start, cfg)
        refined, b1 = refine_pose(ctx.cache, model, start, cfg, RefinementConfig())
        t_err = float(np.linalg.norm(refined.translation - pose.translation))
        r_err = math.degrees(rotation_angle(refined.rotation, pose.rotation))
        s_err = float(np.max(np.abs(refined.scale / pose.scale - 1)))
        worst = tuple(max(a, b) for a, b in zip(worst, (t_err, r_err, s_err)))
        recovered += t_err <= 0.01 and r_err <= 2.0 and s_err <= 0.02
        never_worse &= b1.total <= b0.total
    verdict(5, recovered >= 18 and never_worse,
            f"{recovered}/20 recovered, never worse={never_worse}, "
            f"worst errors {worst[0] * 100:.2f} cm / {worst[1]:.2f} deg / {worst[2] * 100:.2f}%")


# 6 ---------------------------------------------------------------------------


def test_c06_cloning():
    db = database_in_memory({"chair": 20, "table": 5}, seed=1)
    scan, _ = clone_scene(db, "chair_003", "table_002")
    cfg = PipelineConfig(n_t=8, refinement=RefinementConfig(steps=10))
    out = annotate_scene(scan, db, cfg)
    by = out.by_id()
    sizes = [len(c["members"]) for c in out.clusters]
    chair_ids = {by[i].model_id for i in (1, 2, 3, 4)}

    dist = ShapeDistances(db)
    everything = {i: mid for i, mid in enumerate(sorted(db.models))}
    groups = []
    for tau in np.r_[0.0, np.geomspace(1e-4, 1.0, 40)]:
        cl = cluster_retrievals(everything, db, tau, distances=dist)
        groups.append(len(cl) + len(everything) - sum(len(c.members) for c in cl))
    monotone = all(a >= b for a, b in zip(groups, groups[1:]))
    verdict(6, sizes == [4] and chair_ids == {"chair_003"} and monotone,
            f"cluster sizes {sizes}, chair models {sorted(chair_ids)}, table {by[5].model_id}, "
            f"group count over tau sweep {groups[0]} -> {groups[-1]} monotone={monotone}")


# 7 ---------------------------------------------------------------------------


def test_c07_clustering_rule_trace():
    tau = 3e-3
    chain = []
    c1 = cluster_pairs([(5e-3, "A", "C"), (1e-3, "A", "B"), (2e-3, "B", "C")], tau, chain)
    merge = []
    c2 = cluster_pairs([(1e-3, "A", "B"), (1.5e-3, "C", "D"), (2.5e-3, "B", "C"),
                        (9e-3, "A", "D"), (8e-3, "A", "C"), (7e-3, "B", "D")], tau, merge)
    ok = (chain == [("new", "A", "B"), ("join", "B", "C")]
          and [c.members for c in c1] == [("A", "B", "C")]
          and merge == [("new", "A", "B"), ("new", "C", "D"), ("merge", "B", "C")]
          and [c.members for c in c2] == [("A", "B", "C", "D")])
    verdict(7, ok, f"chain trace {chain}; merge trace {merge}")


# 8 ---------------------------------------------------------------------------


def test_c08_chamfer_translation_gradient():
    db = database_in_memory({"chair": 3}, seed=4)
    rng = np.random.default_rng(8)
    worst = 0.0
    for k in range(10):
        model = db.model(f"chair_{k % 3:03d}")
        pose = Pose9(rng.uniform(0.7, 1.3, 3), quat_about_axis("z", rng.uniform(-3, 3)), rng.normal(size=3))
        obj = pose.apply(model.sampled_points(400, 100 + k)) + rng.normal(scale=0.03, size=(400, 3))
        cad = pose.apply(model.sampled_points(2000, k))
        grad = chamfer_translation_gradient(obj, cad)
        h = 1e-7
        fd = np.array([
            (posed_chamfer(obj, model, Pose9(pose.scale, pose.rotation, pose.translation + h * e), 2000, k)[0]
             - posed_chamfer(obj, model, Pose9(pose.scale, pose.rotation, pose.translation - h * e), 2000, k)[0])
            / (2 * h)
            for e in np.eye(3)
        ])
        worst = max(worst, float(np.linalg.norm(grad - fd) / np.linalg.norm(fd)))
    verdict(8, worst <= 1e-4, f"max relative gradient error {worst:.2e} over 10 configurations")


# 9 ---------------------------------------------------------------------------


def test_c09_evaluation_conventions(tmp_path):
    assert main(["synth-db", "--counts", "chair=3,table=2", "--seed", "2", "--out", str(tmp_path / "db")]) == 0
    db_path = str(tmp_path / "db" / "db.jsonl")
    spec = {"scene_id": "eval", "room": {"size": [4, 4, 2.5]},
            "objects": [{"id": i, "model_id": m, "class": c, "on_floor": True,
                         "pose": {"translation": t, "rotation": [math.cos(y / 2), 0, 0, math.sin(y / 2)],
                                  "scale": [1, 1, 1]}}
                        for i, m, c, t, y in ((1, "chair_000", "chair", [0.5, 0.2, 0], 0.4),
                                              (2, "table_001", "table", [-0.7, -0.3, 0], -1.1))],
            "camera": {"count": 4}}
    (tmp_path / "spec.json").write_text(json.dumps(spec))
    assert main(["synth", "--spec", str(tmp_path / "spec.json"), "--db", db_path, "--out", str(tmp_path / "s")]) == 0
    gt_path = tmp_path / "s" / "ground_truth.json"
    gt = read_annotation(gt_path)

    def run(pred, name):
        write_annotation(pred, tmp_path / f"{name}.json")
        assert main(["evaluate", "--pred", str(tmp_path / f"{name}.json"), "--ref", str(gt_path),
                     "--db", db_path, "--out", str(tmp_path / name)]) == 0
        return json.loads((tmp_path / name / "deviation_report.json").read_text())["objects"]

    def modified(fn):
        pred = read_annotation(gt_path)
        for obj in pred.objects:
            obj.pose = fn(obj.pose)
        return pred

    shifted = run(modified(lambda p: Pose9(p.scale, p.rotation, p.translation + np.array([0.06, -0.06, 0.0])
                                           * (0.085 / math.hypot(0.06, 0.06)))), "shift")
    turned = run(modified(lambda p: Pose9(p.scale, quat_mul(quat_about_axis("z", math.radians(6.33)), p.rotation),
                                          p.translation)), "turn")
    same = run(gt, "same")
    t_ok = all(abs(r["translation"] - 0.085) < 1e-9 and r["rotation"] == 0 for r in shifted)
    r_ok = all(abs(r["rotation"] - 6.33) < 1e-6 and r["translation"] == 0 for r in turned)
    zero = all(r[k] == 0 for r in same for k in ("translation", "rotation", "scale", "shape"))
    verdict(9, t_ok and r_ok and zero,
            f"offset reports {[round(r['translation'], 6) for r in shifted]} m, "
            f"rotation reports {[round(r['rotation'], 6) for r in turned]} deg, self-comparison zero={zero}")


# 10 --------------------------------------------------------------------------


def test_c10_thread_count_does_not_change_output(tmp_path):
    assert main(["synth-db", "--counts", "chair=6,table=3", "--seed", "1", "--out", str(tmp_path / "db")]) == 0
    db_path = str(tmp_path / "db" / "db.jsonl")
    spec = {"scene_id": "threads", "room": {"size": [4, 4, 2.5]}, "seed": 5,
            "objects": [{"id": i, "model_id": m, "class": c, "on_floor": True,
                         "pose": {"translation": t, "rotation": [1, 0, 0, 0], "scale": [1, 1, 1]}}
                        for i, m, c, t in ((1, "chair_001", "chair", [0.6, 0.3, 0]),
                                           (2, "chair_001", "chair", [-0.6, 0.5, 0]),
                                           (3, "table_002", "table", [0.0, -0.7, 0]))],
            "camera": {"count": 10, "radius": 2.0, "height": 1.5}}
    (tmp_path / "spec.json").write_text(json.dumps(spec))
    (tmp_path / "cfg.json").write_text(json.dumps({"n_t": 6, "refinement": {"steps": 10}}))
    assert main(["synth", "--spec", str(tmp_path / "spec.json"), "--db", db_path, "--out", str(tmp_path / "s")]) == 0
    outputs = []
    for threads in (1, 8):
        out = tmp_path / f"t{threads}"
        rc = main(["annotate", "--scene", str(tmp_path / "s" / "scan.json"), "--db", db_path,
                   "--config", str(tmp_path / "cfg.json"), "--threads", str(threads), "--out", str(out)])
        assert rc == 0
        outputs.append((out / "annotations.json").read_bytes())
    verdict(10, outputs[0] == outputs[1],
            f"annotations.json identical for 1 and 8 threads ({len(outputs[0])} bytes)")
