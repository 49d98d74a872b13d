"""Synthetic furniture models and rendered RGB-D scenes with known ground truth.

Scene spec (JSON)::

    {
      "scene_id": "synth_000",
      "room": {"size": [5.0, 5.0, 2.8]},
      "objects": [{"id": 1, "model_id": "chair_000", "class": "chair",
                   "pose": {"translation": [...], "rotation": [w, x, y, z], "scale": [...]}}],
      "camera": {"count": 16, "radius": 2.2, "height": 1.5, "center": [0, 0, 0],
                 "look_at": [0, 0, 0.4], "fx": 70, "fy": 70, "image_width": 80, "image_height": 60,
                 "phase": 0.0, "rings": 1, "ring_height_step": 0.0},
      "noise": 0.0,
      "seed": 0,
      "supervision": "both",
      "obb_noise": {"translation": 0.0, "yaw_deg": 0.0, "scale": 0.0},
      "subdivide": 0.05
    }

The room shell spans ``[-sx/2, sx/2] x [-sy/2, sy/2] x [0, sz]`` with z up.
Objects are subdivided so that no edge exceeds ``subdivide`` meters, which
gives the scene mesh a vertex density comparable to a reconstruction.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .annotations import ObjectResult, SceneAnnotation, write_annotation
from .cad_db import CadDatabase, CadModel, canonicalize
from .geometry import Obb, Pose9, TriMesh, merge_meshes, quat_about_axis, quat_mul, quat_to_matrix
from .meshio import write_obj
from .render import look_at_camera, render_depth
from .scene import Frame, ObjectAnnotation, RgbdScan, save_scan, write_json

# ---------------------------------------------------------------------------
# procedural furniture


def box_mesh(lo, hi, rotation: Optional[np.ndarray] = None, pivot=None) -> TriMesh:
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    c = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], float)
    v = lo + c * (hi - lo)
    if rotation is not None:
        pivot = np.asarray(pivot if pivot is not None else 0.5 * (lo + hi), float)
        v = (v - pivot) @ quat_to_matrix(rotation).T + pivot
    f = [
        [0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5],  # -x, +x
        [0, 4, 5], [0, 5, 1], [2, 3, 7], [2, 7, 6],  # -y, +y
        [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3],  # -z, +z
    ]
    return TriMesh(v, f)


def _legs(rng, w, d, h, t, inset):
    xs = (-w / 2 + inset, w / 2 - inset - t)
    ys = (-d / 2 + inset, d / 2 - inset - t)
    return [box_mesh([x, y, 0], [x + t, y + t, h]) for x in xs for y in ys]


def make_chair(rng: np.random.Generator) -> TriMesh:
    w = rng.uniform(0.40, 0.55)
    d = rng.uniform(0.40, 0.55)
    seat_h = rng.uniform(0.40, 0.50)
    seat_t = rng.uniform(0.03, 0.09)
    back_h = rng.uniform(0.25, 0.50)
    back_t = rng.uniform(0.03, 0.08)
    leg_t = rng.uniform(0.03, 0.07)
    parts = []
    if rng.uniform() < 0.75:
        parts += _legs(rng, w, d, seat_h - seat_t, leg_t, rng.uniform(0.0, 0.04))
    else:
        post = rng.uniform(0.05, 0.09)
        parts.append(box_mesh([-post / 2, -post / 2, 0.04], [post / 2, post / 2, seat_h - seat_t]))
        base = rng.uniform(0.45, 0.6)
        parts.append(box_mesh([-base / 2, -0.04, 0], [base / 2, 0.04, 0.04]))
        parts.append(box_mesh([-0.04, -base / 2, 0], [0.04, base / 2, 0.04]))
    parts.append(box_mesh([-w / 2, -d / 2, seat_h - seat_t], [w / 2, d / 2, seat_h]))
    style = rng.integers(3)
    y0 = d / 2 - back_t
    if style == 0:  # solid back
        parts.append(box_mesh([-w / 2, y0, seat_h], [w / 2, d / 2, seat_h + back_h]))
    elif style == 1:  # slats
        n = int(rng.integers(2, 5))
        post = rng.uniform(0.03, 0.05)
        parts.append(box_mesh([-w / 2, y0, seat_h], [-w / 2 + post, d / 2, seat_h + back_h]))
        parts.append(box_mesh([w / 2 - post, y0, seat_h], [w / 2, d / 2, seat_h + back_h]))
        rail = rng.uniform(0.04, 0.08)
        parts.append(box_mesh([-w / 2, y0, seat_h + back_h - rail], [w / 2, d / 2, seat_h + back_h]))
        for i in range(n):
            x = -w / 2 + post + (i + 1) * (w - 2 * post) / (n + 1)
            parts.append(box_mesh([x - 0.015, y0 + 0.005, seat_h], [x + 0.015, d / 2 - 0.005, seat_h + back_h - rail]))
    else:  # reclined panel
        tilt = rng.uniform(0.1, 0.3)
        q = quat_about_axis("x", -tilt)
        parts.append(box_mesh([-w / 2, y0, seat_h], [w / 2, d / 2, seat_h + back_h], q,
                              pivot=[0, d / 2 - back_t / 2, seat_h]))
    if rng.uniform() < 0.35:
        arm_h = rng.uniform(0.15, 0.25)
        arm_w = rng.uniform(0.04, 0.07)
        for sx in (-1, 1):
            x0 = sx * w / 2 - (arm_w if sx > 0 else 0)
            parts.append(box_mesh([x0, -d / 2, seat_h + arm_h - 0.03], [x0 + arm_w, d / 2, seat_h + arm_h]))
            parts.append(box_mesh([x0, -d / 2 + 0.02, seat_h], [x0 + arm_w, -d / 2 + 0.06, seat_h + arm_h]))
    return merge_meshes(parts)


def make_table(rng: np.random.Generator) -> TriMesh:
    w = rng.uniform(0.8, 1.6)
    d = rng.uniform(0.6, 1.0)
    h = rng.uniform(0.65, 0.78)
    top_t = rng.uniform(0.03, 0.07)
    parts = [box_mesh([-w / 2, -d / 2, h - top_t], [w / 2, d / 2, h])]
    leg_t = rng.uniform(0.04, 0.09)
    if rng.uniform() < 0.8:
        parts += _legs(rng, w, d, h - top_t, leg_t, rng.uniform(0.0, 0.08))
        if rng.uniform() < 0.4:
            s = rng.uniform(0.1, 0.3)
            parts.append(box_mesh([-w / 2 + 0.1, -d / 2 + 0.1, s], [w / 2 - 0.1, d / 2 - 0.1, s + 0.02]))
    else:
        parts.append(box_mesh([-0.06, -0.06, 0.04], [0.06, 0.06, h - top_t]))
        parts.append(box_mesh([-w / 4, -d / 4, 0], [w / 4, d / 4, 0.04]))
    return merge_meshes(parts)


def make_cabinet(rng: np.random.Generator) -> TriMesh:
    w = rng.uniform(0.4, 1.2)
    d = rng.uniform(0.3, 0.6)
    h = rng.uniform(0.6, 1.8)
    parts = [box_mesh([-w / 2, -d / 2, 0.05], [w / 2, d / 2, h])]
    parts.append(box_mesh([-w / 2 + 0.03, -d / 2 + 0.03, 0], [w / 2 - 0.03, d / 2 - 0.03, 0.05]))
    n = int(rng.integers(1, 4))
    for i in range(n):
        z = 0.05 + (i + 0.5) * (h - 0.05) / n
        parts.append(box_mesh([-0.08, -d / 2 - 0.03, z - 0.015], [0.08, -d / 2, z + 0.015]))
    return merge_meshes(parts)


MAKERS = {"chair": make_chair, "table": make_table, "cabinet": make_cabinet}


def make_model(category: str, seed: int) -> TriMesh:
    mesh = MAKERS[category](np.random.default_rng(seed))
    return mesh


def write_database(out_dir, counts: dict, seed: int = 0, prefix: str = "") -> Path:
    """Write ``counts[category]`` procedural models per category plus a JSONL manifest."""
    out_dir = Path(out_dir)
    (out_dir / "meshes").mkdir(parents=True, exist_ok=True)
    lines = []
    for ci, (cat, n) in enumerate(sorted(counts.items())):
        for i in range(n):
            mid = f"{prefix}{cat}_{i:03d}"
            write_obj(make_model(cat, seed * 1_000_003 + ci * 10_007 + i), out_dir / "meshes" / f"{mid}.obj")
            lines.append(json.dumps({"id": mid, "category": cat, "mesh_path": f"meshes/{mid}.obj"}))
    path = out_dir / "db.jsonl"
    path.write_text("\n".join(lines) + "\n")
    return path


def database_in_memory(counts: dict, seed: int = 0, prefix: str = "") -> CadDatabase:
    """Same models as :func:`write_database` without touching the disk."""
    models = []
    for ci, (cat, n) in enumerate(sorted(counts.items())):
        for i in range(n):
            mid = f"{prefix}{cat}_{i:03d}"
            mesh, center = canonicalize(make_model(cat, seed * 1_000_003 + ci * 10_007 + i))
            models.append(CadModel(mid, cat, mesh, center))
    return CadDatabase.from_models(models)


# ---------------------------------------------------------------------------
# scene synthesis


def subdivide(mesh: TriMesh, max_edge: float) -> TriMesh:
    """Split each triangle into a k x k barycentric grid so edges stay below ``max_edge``."""
    if max_edge <= 0 or len(mesh.faces) == 0:
        return mesh
    tri = mesh.triangles()
    edges = np.stack([
        np.linalg.norm(tri[:, 1] - tri[:, 0], axis=1),
        np.linalg.norm(tri[:, 2] - tri[:, 1], axis=1),
        np.linalg.norm(tri[:, 0] - tri[:, 2], axis=1),
    ], axis=1).max(axis=1)
    ks = np.maximum(1, np.ceil(edges / max_edge).astype(int))
    ids = mesh.instance_ids
    verts, faces, labels = [], [], []
    offset = 0
    for k in np.unique(ks):
        sel = np.flatnonzero(ks == k)
        # barycentric grid points (i, j) with i + j <= k
        ij = [(i, j) for i in range(k + 1) for j in range(k + 1 - i)]
        pos = {p: n for n, p in enumerate(ij)}
        bary = np.array([[1 - (i + j) / k, i / k, j / k] for i, j in ij])
        local = []
        for i in range(k):
            for j in range(k - i):
                local.append([pos[(i, j)], pos[(i + 1, j)], pos[(i, j + 1)]])
                if i + j + 1 < k:
                    local.append([pos[(i + 1, j)], pos[(i + 1, j + 1)], pos[(i, j + 1)]])
        local = np.array(local)
        t = tri[sel]  # (m, 3, 3)
        v = np.einsum("pb,mbc->mpc", bary, t).reshape(-1, 3)
        npts = len(ij)
        f = (local[None, :, :] + (np.arange(len(sel)) * npts)[:, None, None]).reshape(-1, 3) + offset
        verts.append(v)
        faces.append(f)
        if ids is not None:
            labels.append(np.repeat(ids[mesh.faces[sel, 0]], npts))
        offset += len(v)
    return TriMesh(np.concatenate(verts), np.concatenate(faces), np.concatenate(labels) if ids is not None else None)


def room_shell(size) -> TriMesh:
    sx, sy, sz = size
    lo = np.array([-sx / 2, -sy / 2, 0.0])
    hi = np.array([sx / 2, sy / 2, sz])
    shell = box_mesh(lo, hi)
    return TriMesh(shell.vertices, shell.faces, np.zeros(len(shell.vertices), dtype=np.int64))


@dataclass
class SceneSpec:
    scene_id: str = "synth"
    room_size: tuple = (5.0, 5.0, 2.8)
    objects: list = field(default_factory=list)  # dicts: id, model_id, class, pose (Pose9), on_floor
    camera: dict = field(default_factory=dict)
    noise: float = 0.0
    seed: int = 0
    supervision: str = "both"  # "both" | "obb" | "segmentation"
    obb_noise: dict = field(default_factory=dict)
    subdivide: float = 0.05

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        objs = []
        for o in d.get("objects", []):
            objs.append({"id": int(o["id"]), "model_id": o["model_id"], "class": o["class"],
                         "pose": Pose9.from_dict(o["pose"]), "on_floor": bool(o.get("on_floor", False))})
        spec = cls(
            scene_id=d.get("scene_id", "synth"),
            room_size=tuple(d.get("room", {}).get("size", (5.0, 5.0, 2.8))),
            objects=objs,
            camera=dict(d.get("camera", {})),
            noise=float(d.get("noise", 0.0)),
            seed=int(d.get("seed", 0)),
            supervision=d.get("supervision", "both"),
            obb_noise=dict(d.get("obb_noise", {})),
            subdivide=float(d.get("subdivide", 0.05)),
        )
        spec.validate()
        return spec

    def to_dict(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "room": {"size": list(self.room_size)},
            "objects": [{"id": o["id"], "model_id": o["model_id"], "class": o["class"],
                         "pose": o["pose"].to_dict(), "on_floor": o.get("on_floor", False)}
                        for o in self.objects],
            "camera": self.camera,
            "noise": self.noise,
            "seed": self.seed,
            "supervision": self.supervision,
            "obb_noise": self.obb_noise,
            "subdivide": self.subdivide,
        }

    def validate(self) -> None:
        if int(self.camera.get("count", 16)) < 1:
            raise ValueError("camera trajectory needs at least one frame")
        if self.supervision not in ("both", "obb", "segmentation"):
            raise ValueError(f"unknown supervision {self.supervision!r}")
        ids = [o["id"] for o in self.objects]
        if len(set(ids)) != len(ids) or any(i <= 0 for i in ids):
            raise ValueError("object ids must be unique positive integers")


def trajectory(cam: dict) -> list:
    count = int(cam.get("count", 16))
    rings = int(cam.get("rings", 1))
    radius = float(cam.get("radius", 2.2))
    height = float(cam.get("height", 1.5))
    step = float(cam.get("ring_height_step", 0.0))
    center = np.asarray(cam.get("center", [0.0, 0.0, 0.0]), float)
    look = np.asarray(cam.get("look_at", [0.0, 0.0, 0.4]), float)
    phase = float(cam.get("phase", 0.0))
    sweep = float(cam.get("sweep", 2 * math.pi))
    fx = float(cam.get("fx", 70.0))
    fy = float(cam.get("fy", fx))
    width, height_px = int(cam.get("image_width", 80)), int(cam.get("image_height", 60))
    cams = []
    for k in range(count):
        ring = k % rings
        ang = phase + sweep * k / count
        eye = center + np.array([radius * math.cos(ang), radius * math.sin(ang), height + ring * step])
        cams.append(look_at_camera(eye, look, [0, 0, 1], fx, fy, width, height_px))
    return cams


def gt_obb(model: CadModel, pose: Pose9) -> Obb:
    return Obb(center=pose.translation, half_extents=pose.scale * model.half_extents, rotation=pose.rotation)


def _perturb_obb(obb: Obb, noise: dict, rng) -> Obb:
    t = float(noise.get("translation", 0.0))
    yaw = math.radians(float(noise.get("yaw_deg", 0.0)))
    s = float(noise.get("scale", 0.0))
    if not (t or yaw or s):
        return obb
    dq = quat_about_axis("z", rng.normal(0, yaw)) if yaw else np.array([1.0, 0, 0, 0])
    return Obb(
        center=obb.center + rng.normal(0, t, 3) * np.array([1, 1, 0]),
        half_extents=obb.half_extents * np.exp(rng.normal(0, s, 3)),
        rotation=quat_mul(dq, obb.rotation),
    )


def build_scene(spec: SceneSpec, db: CadDatabase) -> tuple[RgbdScan, SceneAnnotation]:
    """Render a scan for ``spec``; returns the scan and its ground-truth annotation."""
    rng = np.random.default_rng(spec.seed)
    parts = [room_shell(spec.room_size)]
    lo = np.array([-spec.room_size[0] / 2, -spec.room_size[1] / 2, 0.0])
    hi = np.array([spec.room_size[0] / 2, spec.room_size[1] / 2, spec.room_size[2]])
    gt_results, boxes = [], {}
    for o in spec.objects:
        model = db.model(o["model_id"])
        if o.get("on_floor"):
            # drop the object so its lowest vertex rests on z = 0
            lowest = o["pose"].apply(model.mesh.vertices)[:, 2].min()
            t = o["pose"].translation - np.array([0.0, 0.0, lowest])
            o = {**o, "pose": Pose9(o["pose"].scale, o["pose"].rotation, t), "on_floor": False}
        posed = model.mesh.transformed(o["pose"])
        if np.any(posed.vertices < lo - 1e-6) or np.any(posed.vertices > hi + 1e-6):
            raise ValueError(f"object {o['id']} is not inside the room shell")
        labeled = TriMesh(posed.vertices, posed.faces, np.full(len(posed.vertices), o["id"]))
        parts.append(subdivide(labeled, spec.subdivide))
        boxes[o["id"]] = gt_obb(model, o["pose"])
        gt_results.append(ObjectResult(object_id=o["id"], label=o["class"], model_id=model.model_id,
                                       pose=o["pose"]))
    mesh = merge_meshes(parts)
    frames = []
    for cam in trajectory(spec.camera):
        depth = render_depth([mesh], cam)
        if spec.noise > 0:
            valid = depth > 0
            depth = np.where(valid, depth + rng.normal(0.0, spec.noise, depth.shape), 0.0)
            depth[depth < 0] = 0.0
        # quantize the way a 16-bit millimetre PNG would
        depth = np.clip(np.round(depth / 0.001), 0, 65535) * 0.001
        frames.append(Frame(cam, depth, 0.001))
    anns = []
    for o in spec.objects:
        obb = _perturb_obb(boxes[o["id"]], spec.obb_noise, rng) if spec.supervision != "segmentation" else None
        seg = np.flatnonzero(mesh.instance_ids == o["id"]) if spec.supervision != "obb" else None
        anns.append(ObjectAnnotation.supplied(o["id"], o["class"], obb, seg))
    scan = RgbdScan(frames, mesh, 2, anns, spec.scene_id)
    return scan, SceneAnnotation(scene_id=spec.scene_id, preset="ground_truth", objects=gt_results)


def cmd_synth(spec: SceneSpec, db: CadDatabase, out_dir) -> tuple[Path, Path]:
    scan, gt = build_scene(spec, db)
    out_dir = Path(out_dir)
    manifest = save_scan(scan, out_dir)
    gt_path = out_dir / "ground_truth.json"
    write_annotation(gt, gt_path)
    write_json(out_dir / "spec.json", spec.to_dict())
    return manifest, gt_path


def place_on_floor(model: CadModel, x: float, y: float, yaw: float, scale=(1.0, 1.0, 1.0)) -> Pose9:
    scale = np.asarray(scale, float)
    return Pose9(scale=scale, rotation=quat_about_axis("z", yaw),
                 translation=[x, y, model.half_extents[2] * scale[2]])
