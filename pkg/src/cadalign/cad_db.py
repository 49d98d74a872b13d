"""Category-indexed CAD model database with cached surface samples.

Manifest: JSON lines, one model per line::

    {"id": "chair_0001", "category": "chair", "mesh_path": "meshes/chair_0001.obj", "up_axis": "y"}

``mesh_path`` is relative to the manifest. ``up_axis`` (optional) declares the
model's canonical up direction; models are rotated so it matches the
database's gravity axis. On load every mesh is re-centered so its bounding
box is symmetric about the origin; the original center is kept in
``CadModel.original_center``.

Sample cache layout (when ``cache_dir`` is set): one ``.npy`` file per
``<sha1 of mesh bytes>_<n>_<seed>.npy``. Files are written atomically and
can be deleted at any time.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DegenerateModel, ManifestInvalid, MeshParseError, UnknownClass, UnknownModel
from .geometry import Obb, Pose9, TriMesh, axis_index, quat_from_axis_angle, quat_to_matrix, sample_surface
from .meshio import read_mesh


@dataclass(eq=False)
class CadModel:
    model_id: str
    category: str
    mesh: TriMesh
    original_center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    cache_dir: Optional[Path] = None
    _samples: dict = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.mesh.bounds()

    @property
    def half_extents(self) -> np.ndarray:
        lo, hi = self.bounds
        return 0.5 * (hi - lo)

    def content_hash(self) -> str:
        h = hashlib.sha1()
        h.update(np.ascontiguousarray(self.mesh.vertices).tobytes())
        h.update(np.ascontiguousarray(self.mesh.faces).tobytes())
        return h.hexdigest()

    def sampled_points(self, n: int = 10000, seed: int = 0, use_cache: bool = True) -> np.ndarray:
        key = (n, seed)
        if use_cache:
            with self._lock:
                hit = self._samples.get(key)
            if hit is not None:
                return hit
        pts = None
        disk = None
        if use_cache and self.cache_dir is not None:
            disk = Path(self.cache_dir) / f"{self.content_hash()}_{n}_{seed}.npy"
            if disk.exists():
                try:
                    pts = np.load(disk)
                except (OSError, ValueError):
                    pts = None
        if pts is None:
            pts = sample_surface(self.mesh, n, seed)
            if disk is not None:
                disk.parent.mkdir(parents=True, exist_ok=True)
                tmp = disk.with_name(f"{disk.stem}.{os.getpid()}.{threading.get_ident()}.tmp.npy")
                np.save(tmp, pts)
                os.replace(tmp, disk)
        pts.setflags(write=False)
        if use_cache:
            with self._lock:
                # first writer wins so every caller sees one object
                pts = self._samples.setdefault(key, pts)
        return pts


@dataclass(eq=False)
class CadDatabase:
    models: dict
    category_index: dict
    gravity_axis: int = 2

    def __len__(self):
        return len(self.models)

    def model(self, model_id: str) -> CadModel:
        try:
            return self.models[model_id]
        except KeyError:
            raise UnknownModel(f"unknown model id {model_id!r}") from None

    @classmethod
    def from_models(cls, models, gravity_axis=2) -> "CadDatabase":
        by_id = {}
        index: dict[str, list] = {}
        for m in models:
            if m.model_id in by_id:
                raise ManifestInvalid(f"duplicate model id {m.model_id!r}")
            by_id[m.model_id] = m
            index.setdefault(m.category, []).append(m.model_id)
        index = {k: sorted(v) for k, v in sorted(index.items())}
        return cls(dict(sorted(by_id.items())), index, axis_index(gravity_axis))


def _up_rotation(up: int, gravity: int) -> np.ndarray:
    if up == gravity:
        return np.eye(3)
    axis = np.cross(np.eye(3)[up], np.eye(3)[gravity])
    return quat_to_matrix(quat_from_axis_angle(axis * (np.pi / 2)))


def canonicalize(mesh: TriMesh, up_axis=None, gravity_axis=2) -> tuple[TriMesh, np.ndarray]:
    """Rotate ``up_axis`` onto ``gravity_axis`` and center the bounding box at the origin."""
    v = mesh.vertices
    if up_axis is not None:
        v = v @ _up_rotation(axis_index(up_axis), axis_index(gravity_axis)).T
    lo, hi = v.min(axis=0), v.max(axis=0)
    center = 0.5 * (lo + hi)
    return TriMesh(v - center, mesh.faces), center


def load_database(manifest, gravity_axis="z", cache_dir=None) -> CadDatabase:
    manifest = Path(manifest)
    if not manifest.exists():
        raise ManifestInvalid(f"database manifest not found: {manifest}")
    root = manifest.parent
    models = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip():
            continue
        where = f"{manifest}:{lineno}"
        try:
            row = json.loads(line)
            mid, cat, rel = str(row["id"]), str(row["category"]), row["mesh_path"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ManifestInvalid(f"{where}: {exc}") from exc
        path = root / rel
        if not path.exists():
            raise MeshParseError(f"model {mid!r}: mesh file not found: {path}")
        try:
            raw = read_mesh(path)
        except MeshParseError as exc:
            raise MeshParseError(f"model {mid!r}: {exc}") from exc
        if len(raw.vertices) == 0 or len(raw.faces) == 0:
            raise MeshParseError(f"model {mid!r}: mesh has no faces")
        mesh, center = canonicalize(raw, row.get("up_axis"), gravity_axis)
        models.append(
            CadModel(mid, cat, mesh, center, Path(cache_dir) if cache_dir is not None else None)
        )
    return CadDatabase.from_models(models, gravity_axis)


def candidates_for_class(db: CadDatabase, label: str, class_map: Optional[dict] = None) -> list:
    category = (class_map or {}).get(label, label)
    try:
        return list(db.category_index[category])
    except KeyError:
        raise UnknownClass(label, db.category_index.keys()) from None


def get_sampled_points(db: CadDatabase, model_id: str, n: int = 10000, seed: int = 0) -> np.ndarray:
    return db.model(model_id).sampled_points(n, seed)


def initial_pose_from_obb(obb: Obb, model: CadModel) -> Pose9:
    """Pose that maps the model's canonical bounding box onto ``obb``."""
    he = model.half_extents
    if np.any(he <= 0):
        raise DegenerateModel(f"model {model.model_id!r} has zero extent along an axis")
    return Pose9(scale=obb.half_extents / he, rotation=obb.rotation, translation=obb.center)
