import math

import numpy as np
import pytest

from cadalign.annotations import ObjectResult, SceneAnnotation
from cadalign.errors import NoOverlap
from cadalign.evaluate import N_BINS, evaluate, histogram, plot_histograms
from cadalign.geometry import Pose9, chamfer_symmetric, normalize_unit_diagonal, quat_about_axis, quat_mul


def scene(poses, models=None, ids=None):
    ids = ids or list(range(1, len(poses) + 1))
    models = models or ["chair_001"] * len(poses)
    return SceneAnnotation("s", "scannet", [
        ObjectResult(i, "chair", m, p) for i, m, p in zip(ids, models, poses)
    ])


def base_poses(n=4):
    rng = np.random.default_rng(0)
    return [Pose9(rng.uniform(0.8, 1.2, 3), quat_about_axis("z", rng.uniform(-3, 3)), rng.normal(size=3))
            for _ in range(n)]


def test_self_comparison_is_zero(small_db):
    ref = scene(base_poses(), ["chair_001", "chair_002", "table_000", "chair_001"])
    rep = evaluate(ref, ref, small_db)
    for row in rep["objects"]:
        assert row["translation"] == row["rotation"] == row["scale"] == row["shape"] == 0.0
    for h in rep["histograms"].values():
        assert sum(h["counts"]) + h["overflow"] == 4


def test_translation_offset_reports_meters(small_db):
    ref = base_poses()
    pred = [Pose9(p.scale, p.rotation, p.translation + [0.085, 0, 0]) for p in ref]
    rep = evaluate(scene(pred), scene(ref), small_db)
    for row in rep["objects"]:
        assert row["translation"] == pytest.approx(0.085, abs=1e-12)
        assert row["rotation"] == 0.0


def test_yaw_offset_reports_degrees(small_db):
    ref = base_poses()
    yaw = quat_about_axis("z", math.radians(6.33))
    pred = [Pose9(p.scale, quat_mul(p.rotation, yaw), p.translation) for p in ref]
    rep = evaluate(scene(pred), scene(ref), small_db)
    for row in rep["objects"]:
        assert row["rotation"] == pytest.approx(6.33, abs=1e-6)


def test_scale_error_definition_and_swap(small_db):
    ref = [Pose9([1.0, 2.0, 1.0])]
    pred = [Pose9([1.1, 2.0, 0.8])]
    fwd = evaluate(scene(pred), scene(ref), small_db)["objects"][0]
    back = evaluate(scene(ref), scene(pred), small_db)["objects"][0]
    assert fwd["scale"] == pytest.approx((0.1 + 0.0 + 0.2) / 3)
    assert back["scale"] == pytest.approx((abs(1 / 1.1 - 1) + abs(1 / 0.8 - 1)) / 3)


def test_swap_keeps_symmetric_errors(small_db):
    rng = np.random.default_rng(3)
    a = [Pose9(rng.uniform(0.5, 2, 3), rng.normal(size=4), rng.normal(size=3)) for _ in range(3)]
    b = [Pose9(rng.uniform(0.5, 2, 3), rng.normal(size=4), rng.normal(size=3)) for _ in range(3)]
    ma, mb = ["chair_001", "chair_002", "table_001"], ["chair_003", "chair_002", "table_002"]
    fwd = evaluate(scene(a, ma), scene(b, mb), small_db)["objects"]
    back = evaluate(scene(b, mb), scene(a, ma), small_db)["objects"]
    for f, r in zip(fwd, back):
        for key in ("translation", "rotation", "shape"):
            assert f[key] == pytest.approx(r[key], abs=1e-12)


def test_shape_error_is_normalized_symmetric_chamfer(small_db):
    pose = [Pose9()]
    row = evaluate(scene(pose, ["chair_001"]), scene(pose, ["table_002"]), small_db, n_samples=2000)["objects"][0]
    a = normalize_unit_diagonal(small_db.model("chair_001").sampled_points(2000, 0))
    b = normalize_unit_diagonal(small_db.model("table_002").sampled_points(2000, 0))
    assert row["shape"] == pytest.approx(chamfer_symmetric(a, b), abs=1e-12)
    assert row["shape"] > 0.05


def test_unmatched_and_no_overlap(small_db):
    poses = base_poses(3)
    pred = scene(poses, ids=[1, 2, 3])
    ref = scene(poses, ids=[2, 3, 4])
    rep = evaluate(pred, ref, small_db)
    assert [r["object_id"] for r in rep["objects"]] == [2, 3]
    assert rep["unmatched"] == {"pred_only": [1], "ref_only": [4]}
    with pytest.raises(NoOverlap):
        evaluate(scene(poses, ids=[1, 2, 3]), scene(poses, ids=[7, 8, 9]), small_db)
    failed = SceneAnnotation("s", "x", [ObjectResult(2, "chair", status="failed", error="boom")])
    with pytest.raises(NoOverlap):
        evaluate(failed, ref, small_db)


def test_histogram_binning():
    vals = np.r_[np.linspace(0, 1, 99), 50.0]
    h = histogram(vals)
    hi = np.percentile(vals, 99)
    assert len(h["counts"]) == N_BINS and len(h["edges"]) == N_BINS + 1
    assert h["edges"][0] == 0.0 and h["edges"][-1] == pytest.approx(hi)
    assert h["overflow"] == int((vals > hi).sum()) >= 1
    assert sum(h["counts"]) + h["overflow"] == len(vals)
    zeros = histogram(np.zeros(5))
    assert zeros["counts"][0] == 5 and zeros["overflow"] == 0


def test_plot_writes_png(small_db, tmp_path):
    ref = scene(base_poses())
    rep = evaluate(ref, ref, small_db)
    plot_histograms(rep, tmp_path / "h.png")
    assert (tmp_path / "h.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
