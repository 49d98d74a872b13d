"""Software z-buffer rasterizer for depth maps and visible-silhouette masks.

Depth maps are ``(H, W)`` float64 arrays holding camera-space z in meters;
any value ``<= 0`` or non-finite is invalid. Rendered maps use ``0.0`` for
uncovered pixels. Masks are ``(H, W)`` bool arrays. Pixels are sampled at
their centers ``(u + 0.5, v + 0.5)`` with the origin at the top-left corner
and the camera looking down +z (x right, y down).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, Union

import numba
import numpy as np

from .errors import DimensionMismatch
from .geometry import TriMesh, matrix_to_quat, quat_to_matrix

NEAR_PLANE = 1e-4


@dataclass(frozen=True, eq=False)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    # world -> camera rigid transform
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (self.width > 0 and self.height > 0):
            raise ValueError("image size must be positive")
        q = np.asarray(self.rotation, dtype=np.float64)
        q = q / np.linalg.norm(q)
        q.setflags(write=False)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def world_to_camera(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = quat_to_matrix(self.rotation)
        m[:3, 3] = self.translation
        return m

    def camera_to_world(self) -> np.ndarray:
        r = quat_to_matrix(self.rotation)
        m = np.eye(4)
        m[:3, :3] = r.T
        m[:3, 3] = -r.T @ self.translation
        return m

    @classmethod
    def from_camera_to_world(cls, fx, fy, cx, cy, width, height, cam_to_world) -> "Camera":
        m = np.asarray(cam_to_world, dtype=np.float64).reshape(4, 4)
        r_wc = m[:3, :3]
        u, _, vt = np.linalg.svd(r_wc)
        r_wc = u @ vt
        r = r_wc.T
        return cls(fx, fy, cx, cy, width, height, matrix_to_quat(r), -r @ m[:3, 3])

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, float) @ quat_to_matrix(self.rotation).T + self.translation

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Pixel coordinates ``(u, v)`` and camera depth ``z`` of world points."""
        pc = self.to_camera(points)
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * pc[:, 0] / z + self.cx
            v = self.fy * pc[:, 1] / z + self.cy
        return u, v, z

    def backproject(self, depth: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """World points for the valid pixels of ``depth`` plus their flat indices."""
        valid = valid_mask(depth)
        vv, uu = np.nonzero(valid)
        z = depth[vv, uu]
        x = (uu + 0.5 - self.cx) / self.fx * z
        y = (vv + 0.5 - self.cy) / self.fy * z
        pc = np.stack([x, y, z], axis=1)
        r = quat_to_matrix(self.rotation)
        return (pc - self.translation) @ r, np.flatnonzero(valid)

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "camera_to_world": self.camera_to_world().reshape(-1).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls.from_camera_to_world(
            d["fx"], d["fy"], d["cx"], d["cy"], d["width"], d["height"], d["camera_to_world"]
        )


def look_at_camera(eye, target, up, fx, fy, width, height, cx=None, cy=None) -> Camera:
    """Camera at ``eye`` looking at ``target``; image y points against ``up``."""
    eye, target, up = (np.asarray(a, dtype=np.float64) for a in (eye, target, up))
    z = target - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-9:
        raise ValueError("view direction parallel to up vector")
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    r = np.stack([x, y, z])  # rows: camera axes in world coordinates
    return Camera(
        fx, fy,
        width / 2.0 if cx is None else cx,
        height / 2.0 if cy is None else cy,
        width, height, matrix_to_quat(r), -r @ eye,
    )


# ---------------------------------------------------------------------------
# rasterization kernel


@numba.njit(cache=True, nogil=True)
def _raster_tri(p0, p1, p2, fx, fy, cx, cy, depth, tri_id, ident):
    h, w = depth.shape
    x0 = fx * p0[0] / p0[2] + cx
    y0 = fy * p0[1] / p0[2] + cy
    x1 = fx * p1[0] / p1[2] + cx
    y1 = fy * p1[1] / p1[2] + cy
    x2 = fx * p2[0] / p2[2] + cx
    y2 = fy * p2[1] / p2[2] + cy
    area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
    if area == 0.0 or not np.isfinite(area):
        return
    sgn = 1.0 if area > 0 else -1.0
    inv_area = 1.0 / area
    z0, z1, z2 = p0[2], p1[2], p2[2]
    constant_z = z0 == z1 and z1 == z2
    iz0 = 1.0 / z0
    diz1 = 1.0 / z1 - iz0
    diz2 = 1.0 / z2 - iz0
    umin = max(int(np.ceil(min(x0, x1, x2) - 0.5)), 0)
    umax = min(int(np.floor(max(x0, x1, x2) - 0.5)), w - 1)
    vmin = max(int(np.ceil(min(y0, y1, y2) - 0.5)), 0)
    vmax = min(int(np.floor(max(y0, y1, y2) - 0.5)), h - 1)
    for v in range(vmin, vmax + 1):
        py = v + 0.5
        for u in range(umin, umax + 1):
            px = u + 0.5
            e0 = ((x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)) * sgn
            e1 = ((x0 - x2) * (py - y2) - (y0 - y2) * (px - x2)) * sgn
            e2 = ((x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)) * sgn
            if e0 < 0.0 or e1 < 0.0 or e2 < 0.0:
                continue
            if constant_z:
                z = z0
            else:
                b1 = e1 * sgn * inv_area
                b2 = e2 * sgn * inv_area
                z = 1.0 / (iz0 + b1 * diz1 + b2 * diz2)
            if z < depth[v, u]:
                depth[v, u] = z
                tri_id[v, u] = ident


@numba.njit(cache=True, nogil=True)
def _raster_mesh(vcam, faces, fx, fy, cx, cy, near, depth, tri_id, id_offset):
    poly = np.empty((4, 3))
    for f in range(faces.shape[0]):
        a = vcam[faces[f, 0]]
        b = vcam[faces[f, 1]]
        c = vcam[faces[f, 2]]
        ident = id_offset + f
        n_in = (a[2] > near) + (b[2] > near) + (c[2] > near)
        if n_in == 0:
            continue
        if n_in == 3:
            _raster_tri(a, b, c, fx, fy, cx, cy, depth, tri_id, ident)
            continue
        # Sutherland-Hodgman against the near plane
        k = 0
        for i in range(3):
            if i == 0:
                s, e = c, a
            elif i == 1:
                s, e = a, b
            else:
                s, e = b, c
            s_in = s[2] > near
            e_in = e[2] > near
            if s_in != e_in:
                t = (near - s[2]) / (e[2] - s[2])
                for j in range(3):
                    poly[k, j] = s[j] + t * (e[j] - s[j])
                poly[k, 2] = near
                k += 1
            if e_in:
                for j in range(3):
                    poly[k, j] = e[j]
                k += 1
        for i in range(1, k - 1):
            _raster_tri(poly[0], poly[i], poly[i + 1], fx, fy, cx, cy, depth, tri_id, ident)


Renderable = Union[TriMesh, tuple]


def _iter_world_meshes(meshes: Iterable[Renderable]):
    for item in meshes:
        if isinstance(item, TriMesh):
            yield item.vertices, item.faces
        else:
            mesh, pose = item
            yield (mesh.vertices if pose is None else pose.apply(mesh.vertices)), mesh.faces


def rasterize(meshes: Iterable[Renderable], camera: Camera, near: float = NEAR_PLANE):
    """Z-buffer ``meshes`` into ``camera``.

    Returns ``(depth, tri_id)`` where ``depth`` is ``+inf`` on uncovered pixels
    and ``tri_id`` is the global index of the front-most triangle (or -1),
    counting faces across ``meshes`` in order. Ties keep the lower index.
    """
    depth = np.full(camera.shape, np.inf)
    tri_id = np.full(camera.shape, -1, dtype=np.int64)
    r = quat_to_matrix(camera.rotation)
    offset = 0
    for verts, faces in _iter_world_meshes(meshes):
        if len(faces):
            vcam = np.ascontiguousarray(verts @ r.T + camera.translation)
            _raster_mesh(
                vcam, np.ascontiguousarray(faces), float(camera.fx), float(camera.fy),
                float(camera.cx), float(camera.cy), near, depth, tri_id, offset,
            )
        offset += len(faces)
    return depth, tri_id


def _finish(depth: np.ndarray) -> np.ndarray:
    depth[~np.isfinite(depth)] = 0.0
    return depth


def render_depth(meshes: Sequence[Renderable], camera: Camera) -> np.ndarray:
    """Camera-space depth of the nearest surface per pixel; 0 where nothing is hit.

    ``meshes`` holds world-space :class:`TriMesh` objects or ``(mesh, pose)`` pairs.
    """
    depth, _ = rasterize(meshes, camera)
    return _finish(depth)


def render_mask(
    target: Renderable,
    occluders: Sequence[Renderable],
    camera: Camera,
    occlusion: bool = True,
) -> np.ndarray:
    """Pixels where ``target`` is the front-most surface.

    With ``occlusion=False`` the free-floating projection of ``target`` is
    returned instead. Ties between target and occluder go to the target.
    """
    if not occlusion:
        depth, _ = rasterize([target], camera)
        return np.isfinite(depth)
    target_faces = len(target.faces if isinstance(target, TriMesh) else target[0].faces)
    _, tri_id = rasterize([target, *occluders], camera)
    return (tri_id >= 0) & (tri_id < target_faces)


def valid_mask(depth: np.ndarray) -> np.ndarray:
    return np.isfinite(depth) & (depth > 0)


def fuse_depth(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-pixel minimum over valid entries; invalid (0) only where both are."""
    if a.shape != b.shape:
        raise DimensionMismatch(f"cannot fuse depth maps of shape {a.shape} and {b.shape}")
    va, vb = valid_mask(a), valid_mask(b)
    out = np.where(va, a, np.inf)
    out = np.where(vb & (b < out), b, out)
    return _finish(out)


def depth_to_png(depth: np.ndarray, path, meters_per_unit: float = 0.001) -> None:
    """Write a 16-bit grayscale PNG (0 = invalid, saturating at 65535 units)."""
    from PIL import Image

    units = np.zeros(depth.shape, dtype=np.float64)
    valid = valid_mask(depth)
    units[valid] = np.round(depth[valid] / meters_per_unit)
    units = np.clip(units, 0, 65535).astype(np.uint16)
    _write_png(Image.fromarray(units), path)


def mask_to_png(mask: np.ndarray, path) -> None:
    from PIL import Image

    _write_png(Image.fromarray((mask.astype(np.uint16) * 65535).astype(np.uint16)), path)


def _write_png(img, path) -> None:
    import os

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    img.save(tmp, format="PNG")
    os.replace(tmp, path)


def depth_from_png(path, meters_per_unit: float = 0.001) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as img:
        arr = np.array(img)
    if arr.ndim != 2:
        raise ValueError(f"{path}: expected a single-channel depth image")
    return arr.astype(np.float64) * meters_per_unit
