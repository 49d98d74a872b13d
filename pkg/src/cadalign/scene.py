"""Scanned-scene data model, manifest I/O and per-object preprocessing."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import (
    DepthDecodeError,
    EmptySegmentation,
    ManifestInvalid,
    MeshParseError,
    MissingAsset,
    NoVisibleFrames,
)
from .geometry import Obb, TriMesh, axis_index, fit_obb_gravity_aligned, points_in_obb
from .meshio import read_mesh, write_ply
from .render import Camera, depth_from_png, depth_to_png

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Frame:
    camera: Camera
    depth: np.ndarray
    depth_scale: float = 0.001
    rgb_path: Optional[str] = None


@dataclass(frozen=True, eq=False)
class ObjectAnnotation:
    object_id: int
    label: str
    obb: Optional[Obb] = None
    segmentation: Optional[np.ndarray] = None
    obb_supplied: bool = False
    segmentation_supplied: bool = False

    def __post_init__(self):
        if self.segmentation is not None:
            seg = np.unique(np.asarray(self.segmentation, dtype=np.int64))
            seg.setflags(write=False)
            object.__setattr__(self, "segmentation", seg)

    @classmethod
    def supplied(cls, object_id, label, obb=None, segmentation=None) -> "ObjectAnnotation":
        if obb is None and segmentation is None:
            raise ValueError(f"object {object_id}: needs an oriented box or a segmentation")
        return cls(
            object_id, label, obb, segmentation,
            obb_supplied=obb is not None, segmentation_supplied=segmentation is not None,
        )


@dataclass(frozen=True, eq=False)
class RgbdScan:
    frames: list
    scene_mesh: TriMesh
    gravity_axis: int = 2
    annotations: list = field(default_factory=list)
    scene_id: str = "scene"

    def annotation(self, object_id: int) -> ObjectAnnotation:
        for ann in self.annotations:
            if ann.object_id == object_id:
                return ann
        raise KeyError(object_id)


@dataclass(frozen=True)
class FrameSelection:
    object_id: Optional[int]
    indices: tuple
    n_t: int

    def __len__(self):
        return len(self.indices)


# ---------------------------------------------------------------------------
# manifest I/O

_AXIS_NAMES = "xyz"


def _require(d: dict, key: str, where: str):
    if not isinstance(d, dict) or key not in d:
        raise ManifestInvalid(f"{where}: missing field {key!r}")
    return d[key]


def load_scan(manifest_path) -> RgbdScan:
    """Load a scan manifest; depth PNGs are decoded to meters."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise MissingAsset(f"manifest not found: {manifest_path}")
    try:
        doc = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestInvalid(f"{manifest_path}: {exc}") from exc
    root = manifest_path.parent

    try:
        gravity = axis_index(doc.get("gravity_axis", "z"))
    except ValueError as exc:
        raise ManifestInvalid(f"{manifest_path}: {exc}") from exc
    mesh_path = root / _require(doc, "mesh", str(manifest_path))
    if not mesh_path.exists():
        raise MissingAsset(f"mesh file not found: {mesh_path}")
    try:
        mesh = read_mesh(mesh_path)
    except MeshParseError as exc:
        raise ManifestInvalid(str(exc)) from exc

    frames = []
    for i, fr in enumerate(_require(doc, "frames", str(manifest_path))):
        where = f"{manifest_path} frames[{i}]"
        intr = _require(fr, "intrinsics", where)
        try:
            cam = Camera.from_camera_to_world(
                float(intr["fx"]), float(intr["fy"]), float(intr["cx"]), float(intr["cy"]),
                int(intr["width"]), int(intr["height"]),
                np.asarray(_require(fr, "camera_to_world", where), dtype=np.float64),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise ManifestInvalid(f"{where}: bad camera: {exc}") from exc
        scale = float(fr.get("depth_scale", 0.001))
        depth_path = root / _require(fr, "depth", where)
        if not depth_path.exists():
            raise MissingAsset(f"{where}: depth file not found: {depth_path}")
        try:
            depth = depth_from_png(depth_path, scale)
        except Exception as exc:  # PIL raises a zoo of types
            raise DepthDecodeError(f"{where}: cannot decode {depth_path}: {exc}") from exc
        if depth.shape != cam.shape:
            raise DepthDecodeError(
                f"{where}: depth {depth_path} has shape {depth.shape}, camera expects {cam.shape}"
            )
        frames.append(Frame(cam, depth, scale, fr.get("rgb")))

    anns = []
    seen = set()
    for i, a in enumerate(doc.get("annotations", [])):
        where = f"{manifest_path} annotations[{i}]"
        oid = int(_require(a, "id", where))
        if oid in seen:
            raise ManifestInvalid(f"{where}: duplicate object id {oid}")
        seen.add(oid)
        obb = Obb.from_dict(a["obb"]) if a.get("obb") else None
        seg = None
        if a.get("segmentation") is not None:
            seg = np.asarray(a["segmentation"], dtype=np.int64)
            if len(seg) and (seg.min() < 0 or seg.max() >= len(mesh.vertices)):
                raise ManifestInvalid(f"{where}: segmentation index out of range")
        elif a.get("instance_id") is not None:
            if mesh.instance_ids is None:
                raise ManifestInvalid(f"{where}: instance_id given but mesh has no instance labels")
            seg = np.flatnonzero(mesh.instance_ids == int(a["instance_id"]))
        if obb is None and seg is None:
            raise ManifestInvalid(f"{where}: needs 'obb' or a segmentation")
        anns.append(ObjectAnnotation.supplied(oid, str(_require(a, "label", where)), obb, seg))

    return RgbdScan(frames, mesh, gravity, anns, str(doc.get("scene_id", manifest_path.parent.name)))


def save_scan(scan: RgbdScan, out_dir, mesh_name: str = "mesh.ply") -> Path:
    """Write ``scan`` as a manifest directory; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_ply(scan.scene_mesh, out_dir / mesh_name)
    frames = []
    for i, fr in enumerate(scan.frames):
        rel = f"depth/{i:05d}.png"
        depth_to_png(fr.depth, out_dir / rel, fr.depth_scale)
        cam = fr.camera
        frames.append({
            "intrinsics": {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
                           "width": cam.width, "height": cam.height},
            "camera_to_world": cam.camera_to_world().reshape(-1).tolist(),
            "depth": rel,
            "depth_scale": fr.depth_scale,
            "rgb": fr.rgb_path,
        })
    anns = []
    for a in scan.annotations:
        entry = {"id": a.object_id, "label": a.label}
        if a.obb_supplied and a.obb is not None:
            entry["obb"] = a.obb.to_dict()
        if a.segmentation_supplied and a.segmentation is not None:
            entry["segmentation"] = a.segmentation.tolist()
        anns.append(entry)
    doc = {
        "scene_id": scan.scene_id,
        "gravity_axis": _AXIS_NAMES[scan.gravity_axis],
        "mesh": mesh_name,
        "frames": frames,
        "annotations": anns,
    }
    path = out_dir / "scan.json"
    write_json(path, doc)
    return path


def write_json(path, doc) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2) + "\n")
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# preprocessing


def frame_sees_box(camera: Camera, obb: Obb) -> bool:
    u, v, z = camera.project(obb.corners())
    ok = (z > 0) & (u >= 0) & (u < camera.width) & (v >= 0) & (v < camera.height)
    return bool(ok.any())


def select_frames(
    scan: RgbdScan, obb: Obb, n_t: int, mode: str = "even", object_id: Optional[int] = None
) -> FrameSelection:
    """Frames that see at least one box corner, regularly subsampled to ``n_t``.

    ``mode="even"`` spreads picks over the qualifying list and always keeps
    its first and last entry; ``mode="stride"`` takes every k-th frame from
    the start with ``k = ceil(m / n_t)``.
    """
    if n_t < 1:
        raise ValueError("n_t must be >= 1")
    qualifying = [i for i, fr in enumerate(scan.frames) if frame_sees_box(fr.camera, obb)]
    m = len(qualifying)
    if m == 0:
        raise NoVisibleFrames(f"object {object_id}: box is not visible in any frame")
    if m <= n_t:
        picks = list(range(m))
    elif mode == "stride":
        step = -(-m // n_t)
        picks = list(range(0, m, step))[:n_t]
    elif mode == "even":
        if n_t == 1:
            picks = [(m - 1) // 2]
        else:
            # round-half-up of i * (m - 1) / (n_t - 1) in integer arithmetic
            picks = [(2 * i * (m - 1) + (n_t - 1)) // (2 * (n_t - 1)) for i in range(n_t)]
    else:
        raise ValueError(f"unknown frame sampling mode {mode!r}")
    return FrameSelection(object_id, tuple(qualifying[p] for p in picks), n_t)


def derive_missing_supervision(
    scan: RgbdScan, ann: ObjectAnnotation, margin: float = 0.02
) -> ObjectAnnotation:
    """Fill in whichever of box / segmentation is missing from the other."""
    if ann.obb is not None and ann.segmentation is not None:
        return ann
    if ann.obb is None and ann.segmentation is None:
        raise ValueError(f"object {ann.object_id}: nothing to derive from")
    if ann.obb is None:
        pts = scan.scene_mesh.vertices[ann.segmentation]
        return replace(ann, obb=fit_obb_gravity_aligned(pts, scan.gravity_axis))
    seg = points_in_obb(ann.obb, scan.scene_mesh.vertices, margin)
    return replace(ann, segmentation=seg)


def _segmentation_of(ann: ObjectAnnotation) -> np.ndarray:
    if ann.segmentation is None:
        raise ValueError(f"object {ann.object_id}: segmentation not resolved; derive it first")
    return ann.segmentation


def split_scene(mesh: TriMesh, segmentation) -> tuple[TriMesh, TriMesh]:
    """``(hole, object)``: faces not touching / touching a segmented vertex.

    Both parts are compacted (unused vertices dropped, indices re-mapped);
    together they hold every face of ``mesh`` exactly once.
    """
    seg = np.asarray(segmentation, dtype=np.int64)
    removed = np.zeros(len(mesh.vertices), dtype=bool)
    removed[seg] = True
    touches = removed[mesh.faces].any(axis=1) if len(mesh.faces) else np.zeros(0, bool)
    keep_vertices = ~removed
    hole = _compact(mesh, keep_vertices, mesh.faces[~touches])
    obj_vertices = np.zeros(len(mesh.vertices), dtype=bool)
    obj_vertices[mesh.faces[touches].reshape(-1)] = True
    obj = _compact(mesh, obj_vertices, mesh.faces[touches])
    return hole, obj


def _compact(mesh: TriMesh, keep: np.ndarray, faces: np.ndarray) -> TriMesh:
    remap = np.full(len(mesh.vertices), -1, dtype=np.int64)
    remap[keep] = np.arange(int(keep.sum()))
    ids = mesh.instance_ids[keep] if mesh.instance_ids is not None else None
    return TriMesh(mesh.vertices[keep], remap[faces].reshape(-1, 3), ids)


def remove_object(scan: RgbdScan, ann: ObjectAnnotation) -> TriMesh:
    """Scene mesh with the object's vertices and every face touching them removed."""
    seg = _segmentation_of(ann)
    if len(seg) == 0:
        return scan.scene_mesh
    hole, _ = split_scene(scan.scene_mesh, seg)
    return hole


def object_point_cloud(scan: RgbdScan, ann: ObjectAnnotation) -> np.ndarray:
    seg = _segmentation_of(ann)
    if len(seg) == 0:
        raise EmptySegmentation(f"object {ann.object_id}: segmentation is empty")
    return scan.scene_mesh.vertices[seg]
