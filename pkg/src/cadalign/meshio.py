"""PLY and OBJ reading/writing. Polygons are fan-triangulated on load."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
from plyfile import PlyData, PlyElement, PlyParseError

from .errors import MeshParseError
from .geometry import TriMesh


def _fan(polys) -> np.ndarray:
    tris = []
    for poly in polys:
        poly = [int(i) for i in poly]
        for i in range(1, len(poly) - 1):
            tri = (poly[0], poly[i], poly[i + 1])
            if len(set(tri)) == 3:
                tris.append(tri)
    return np.array(tris, dtype=np.int64).reshape(-1, 3)


def read_ply(path) -> TriMesh:
    try:
        ply = PlyData.read(str(path))
        vert = ply["vertex"]
        v = np.stack([vert["x"], vert["y"], vert["z"]], axis=1).astype(np.float64)
        names = vert.data.dtype.names
        ids = np.asarray(vert["instance_id"], dtype=np.int64) if "instance_id" in names else None
        if "face" in ply:
            face = ply["face"]
            key = "vertex_indices" if "vertex_indices" in face.data.dtype.names else "vertex_index"
            faces = _fan(face[key])
        else:
            faces = np.zeros((0, 3), dtype=np.int64)
        return TriMesh(v, faces, ids)
    except (PlyParseError, KeyError, ValueError, OSError) as exc:
        raise MeshParseError(f"{path}: {exc}") from exc


def write_ply(mesh: TriMesh, path, binary: bool = True) -> None:
    fields = [("x", "f8"), ("y", "f8"), ("z", "f8")]
    if mesh.instance_ids is not None:
        fields.append(("instance_id", "i4"))
    vdata = np.empty(len(mesh.vertices), dtype=fields)
    vdata["x"], vdata["y"], vdata["z"] = mesh.vertices.T
    if mesh.instance_ids is not None:
        vdata["instance_id"] = mesh.instance_ids
    fdata = np.empty(len(mesh.faces), dtype=[("vertex_indices", "i4", (3,))])
    fdata["vertex_indices"] = mesh.faces
    ply = PlyData(
        [PlyElement.describe(vdata, "vertex"), PlyElement.describe(fdata, "face")],
        text=not binary,
    )
    _atomic_write(path, ply.write)


def read_obj(path) -> TriMesh:
    verts, polys = [], []
    try:
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.split()
                if not parts:
                    continue
                if parts[0] == "v":
                    verts.append([float(x) for x in parts[1:4]])
                elif parts[0] == "f":
                    idx = []
                    for tok in parts[1:]:
                        i = int(tok.split("/")[0])
                        idx.append(i - 1 if i > 0 else len(verts) + i)
                    polys.append(idx)
        return TriMesh(np.array(verts, dtype=np.float64).reshape(-1, 3), _fan(polys))
    except (ValueError, IndexError, OSError) as exc:
        raise MeshParseError(f"{path}: {exc}") from exc


def write_obj(mesh: TriMesh, path) -> None:
    def _write(fh):
        for x, y, z in mesh.vertices.tolist():
            fh.write(f"v {x!r} {y!r} {z!r}\n")
        for f in mesh.faces.tolist():
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")

    _atomic_write(path, _write, mode="w")


def read_mesh(path) -> TriMesh:
    suffix = Path(path).suffix.lower()
    if suffix == ".ply":
        return read_ply(path)
    if suffix == ".obj":
        return read_obj(path)
    raise MeshParseError(f"{path}: unsupported mesh format {suffix!r}")


def write_mesh(mesh: TriMesh, path) -> None:
    if Path(path).suffix.lower() == ".obj":
        write_obj(mesh, path)
    else:
        write_ply(mesh, path)


def _atomic_write(path, writer, mode="wb") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, mode) as fh:
        writer(fh)
    os.replace(tmp, path)
