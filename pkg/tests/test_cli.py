import json

import numpy as np
import pytest

from cadalign.annotations import SceneAnnotation, read_annotation, write_annotation
from cadalign.cad_db import load_database
from cadalign.cli import main
from cadalign.evaluate import evaluate
from cadalign.meshio import write_mesh
from cadalign.objective import iou
from cadalign.overlays import composed_scene, frame_layers, outline
from cadalign.render import render_mask
from cadalign.scene import load_scan, split_scene
from cadalign.synth import box_mesh

FAST_CONFIG = {"n_t": 4, "refinement": {"steps": 2}}


def spec_doc(**extra):
    doc = {
        "scene_id": "cli",
        "room": {"size": [4, 4, 2.5]},
        "seed": 3,
        "objects": [
            {"id": 1, "model_id": "chair_002", "class": "chair", "on_floor": True,
             "pose": {"translation": [0.3, -0.2, 0], "rotation": [1, 0, 0, 0], "scale": [1, 1, 1]}},
            {"id": 2, "model_id": "table_001", "class": "table", "on_floor": True,
             "pose": {"translation": [-0.8, 0.6, 0], "rotation": [0.98, 0, 0, 0.2], "scale": [1, 1.1, 1]}},
        ],
        "camera": {"count": 8, "radius": 2.0, "height": 1.4},
    }
    doc.update(extra)
    return doc


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth-db", "--counts", "chair=5,table=3", "--seed", "1", "--out", str(root / "db")]) == 0
    (root / "spec.json").write_text(json.dumps(spec_doc()))
    (root / "fast.json").write_text(json.dumps(FAST_CONFIG))
    assert main(["synth", "--spec", str(root / "spec.json"), "--db", str(root / "db" / "db.jsonl"),
                 "--out", str(root / "scene")]) == 0
    return root


def annotate(ws, out, *extra, scene=None, db=None):
    return main([
        "annotate", "--scene", str(scene or ws / "scene" / "scan.json"),
        "--db", str(db or ws / "db" / "db.jsonl"), "--config", str(ws / "fast.json"),
        "--out", str(out), *extra,
    ])


def test_synth_outputs(workspace):
    scan = load_scan(workspace / "scene" / "scan.json")
    assert len(scan.frames) == 8
    assert set(np.unique(scan.scene_mesh.instance_ids)) == {0, 1, 2}
    gt = read_annotation(workspace / "scene" / "ground_truth.json")
    assert [o.model_id for o in gt.objects] == ["chair_002", "table_001"]


def test_synth_is_byte_deterministic(workspace, tmp_path):
    args = ["synth", "--spec", str(workspace / "spec.json"), "--db", str(workspace / "db" / "db.jsonl")]
    assert main(args + ["--out", str(tmp_path / "again")]) == 0
    for f in sorted((workspace / "scene").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "again" / f.relative_to(workspace / "scene")).read_bytes(), f


def test_synth_cube_in_shell(tmp_path):
    write_mesh(box_mesh([-0.2, -0.2, -0.2], [0.2, 0.2, 0.2]), tmp_path / "cube.obj")
    (tmp_path / "db.jsonl").write_text(json.dumps({"id": "cube", "category": "box", "mesh_path": "cube.obj"}) + "\n")
    spec = {"scene_id": "cube", "room": {"size": [3, 3, 2]},
            "objects": [{"id": 1, "model_id": "cube", "class": "box", "on_floor": True,
                         "pose": {"translation": [0, 0, 0], "rotation": [1, 0, 0, 0], "scale": [1, 1, 1]}}],
            "camera": {"count": 8, "radius": 1.2, "height": 1.0}}
    (tmp_path / "spec.json").write_text(json.dumps(spec))
    assert main(["synth", "--spec", str(tmp_path / "spec.json"), "--db", str(tmp_path / "db.jsonl"),
                 "--out", str(tmp_path / "out")]) == 0
    scan = load_scan(tmp_path / "out" / "scan.json")
    assert len(scan.frames) == 8
    assert (scan.scene_mesh.instance_ids == 1).sum() > 0


def test_synth_rejects_object_outside_room(workspace, tmp_path):
    doc = spec_doc()
    doc["objects"][0]["pose"]["translation"] = [5.0, 0, 0]
    (tmp_path / "spec.json").write_text(json.dumps(doc))
    with pytest.raises(ValueError):
        main(["synth", "--spec", str(tmp_path / "spec.json"), "--db", str(workspace / "db" / "db.jsonl"),
              "--out", str(tmp_path / "o")])


def test_ground_truth_evaluates_to_zero(workspace, tmp_path):
    gt = workspace / "scene" / "ground_truth.json"
    assert main(["evaluate", "--pred", str(gt), "--ref", str(gt), "--db", str(workspace / "db" / "db.jsonl"),
                 "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "deviation_report.json").read_text())
    assert all(r[k] == 0 for r in rep["objects"] for k in ("translation", "rotation", "scale", "shape"))
    assert (tmp_path / "deviations.png").exists()


def test_annotate_ok(workspace, tmp_path):
    assert annotate(workspace, tmp_path) == 0
    doc = json.loads((tmp_path / "annotations.json").read_text())
    assert doc["weight_preset"] == "scannet"
    assert [o["status"] for o in doc["objects"]] == ["ok", "ok"]
    assert [o["model_id"] for o in doc["objects"]] == ["chair_002", "table_001"]
    pose = doc["objects"][0]["pose"]
    assert set(pose) == {"translation", "rotation", "scale"} and len(pose["rotation"]) == 4


def test_annotate_exit_codes(workspace, tmp_path):
    assert annotate(workspace, tmp_path / "a", db=workspace / "missing.jsonl") == 3
    assert annotate(workspace, tmp_path / "b", scene=workspace / "missing.json") == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    assert annotate(workspace, tmp_path / "c", scene=bad) == 2


def _edit_labels(workspace, tmp_path, labels):
    scene = tmp_path / "scene"
    scene.mkdir()
    for f in (workspace / "scene").rglob("*"):
        if f.is_file():
            dst = scene / f.relative_to(workspace / "scene")
            dst.parent.mkdir(parents=True, exist_ok=True)
            dst.write_bytes(f.read_bytes())
    doc = json.loads((scene / "scan.json").read_text())
    for a, label in zip(doc["annotations"], labels):
        a["label"] = label
    (scene / "scan.json").write_text(json.dumps(doc))
    return scene / "scan.json"


def test_unmapped_class_is_isolated(workspace, tmp_path):
    manifest = _edit_labels(workspace, tmp_path, ["chair", "sofa"])
    assert annotate(workspace, tmp_path / "out", scene=manifest) == 0
    objs = json.loads((tmp_path / "out" / "annotations.json").read_text())["objects"]
    assert objs[0]["status"] == "ok"
    assert objs[1]["status"] == "failed" and "sofa" in objs[1]["error"]


def test_all_objects_failed(workspace, tmp_path):
    manifest = _edit_labels(workspace, tmp_path, ["sofa", "lamp"])
    assert annotate(workspace, tmp_path / "out", scene=manifest) == 4


def test_preset_flag(workspace, tmp_path):
    assert annotate(workspace, tmp_path, "--preset", "arkitscenes") == 0
    doc = json.loads((tmp_path / "annotations.json").read_text())
    assert doc["weight_preset"] == "arkitscenes"
    assert doc["weights"] == {"lambda_m": 0.3, "lambda_s": 1.3, "lambda_sil": 0.4, "lambda_cd": 1.5}


# ---------------------------------------------------------------------------
# overlays


def test_overlay_silhouettes_match_ground_truth(workspace):
    scan = load_scan(workspace / "scene" / "scan.json")
    db = load_database(workspace / "db" / "db.jsonl")
    gt = read_annotation(workspace / "scene" / "ground_truth.json")
    background, cads = composed_scene(scan, gt, db)
    checked = 0
    for fr in scan.frames:
        _, masks = frame_layers(background, cads, fr.camera)
        for ann in scan.annotations:
            hole, obj = split_scene(scan.scene_mesh, ann.segmentation)
            ref = render_mask(obj, [hole], fr.camera)
            if ref.any() or masks[ann.object_id].any():
                assert iou(ref, masks[ann.object_id]) >= 0.99
                checked += 1
    assert checked > 0


def test_outline_is_mask_boundary():
    m = np.zeros((6, 7), bool)
    m[1:5, 2:6] = True
    o = outline(m)
    assert np.all(o <= m)
    inner = np.zeros_like(m)
    inner[2:4, 3:5] = True
    assert np.array_equal(m & ~o, inner)


def test_render_overlays_cli(workspace, tmp_path):
    args = ["render-overlays", "--scene", str(workspace / "scene" / "scan.json"),
            "--annotations", str(workspace / "scene" / "ground_truth.json"),
            "--db", str(workspace / "db" / "db.jsonl"), "--config", str(workspace / "fast.json")]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert len(files) == 3 * 4
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_render_overlays_without_annotations(workspace, tmp_path):
    empty = tmp_path / "empty.json"
    write_annotation(SceneAnnotation("cli", "scannet", []), empty)
    assert main(["render-overlays", "--scene", str(workspace / "scene" / "scan.json"),
                 "--annotations", str(empty), "--db", str(workspace / "db" / "db.jsonl"),
                 "--out", str(tmp_path / "o")]) == 0
    assert len(list((tmp_path / "o").glob("outline_*.png"))) == 8


def test_evaluate_after_annotate(workspace, tmp_path):
    assert annotate(workspace, tmp_path) == 0
    db = load_database(workspace / "db" / "db.jsonl")
    rep = evaluate(read_annotation(tmp_path / "annotations.json"),
                   read_annotation(workspace / "scene" / "ground_truth.json"), db)
    for row in rep["objects"]:
        assert row["shape"] == 0.0 and row["translation"] < 0.02
