"""Numeric substrate: meshes, 9-DoF poses, oriented boxes, sampling and Chamfer distances.

Point clouds are plain ``(N, 3)`` float64 arrays. Quaternions are stored
``(w, x, y, z)`` and are always unit length.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateCloud, EmptyCloud, ZeroAreaMesh

AXES = {"x": 0, "y": 1, "z": 2}
# In-plane axes for each up axis, in right-handed cyclic order.
_PLANE_AXES = {0: (1, 2), 1: (2, 0), 2: (0, 1)}


def axis_index(axis) -> int:
    if isinstance(axis, str):
        try:
            return AXES[axis.lower()]
        except KeyError:
            raise ValueError(f"unknown axis {axis!r}") from None
    axis = int(axis)
    if axis not in (0, 1, 2):
        raise ValueError(f"unknown axis {axis!r}")
    return axis


def as_cloud(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        return pts.reshape(0, 3)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected (N, 3) points, got shape {pts.shape}")
    return pts


# ---------------------------------------------------------------------------
# quaternions


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n == 0.0:
        raise ValueError("cannot normalize a zero quaternion")
    q = q / n
    # canonical hemisphere keeps serialization stable
    if q[0] < 0:
        q = -q
    return q


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    return quat_normalize(q)


def quat_mul(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_from_axis_angle(rotvec) -> np.ndarray:
    """Quaternion for a rotation vector (axis times angle in radians)."""
    rotvec = np.asarray(rotvec, dtype=np.float64)
    angle = np.linalg.norm(rotvec)
    if angle < 1e-12:
        # second-order expansion keeps finite differences smooth around zero
        q = np.array([1.0 - angle * angle / 8.0, *(0.5 * rotvec)])
        return q / np.linalg.norm(q)
    axis = rotvec / angle
    return np.array([np.cos(angle / 2), *(np.sin(angle / 2) * axis)])


def quat_about_axis(axis, angle: float) -> np.ndarray:
    v = np.zeros(3)
    v[axis_index(axis)] = angle
    return quat_from_axis_angle(v)


def rotation_angle(q_a, q_b) -> float:
    """Geodesic angle in radians between two unit quaternions."""
    d = abs(float(np.dot(np.asarray(q_a, float), np.asarray(q_b, float))))
    return 2.0 * np.arccos(min(1.0, d))


# ---------------------------------------------------------------------------
# core types


def _frozen(a, dtype=np.float64, shape=None) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    if shape is not None and a.shape != shape:
        raise ValueError(f"expected shape {shape}, got {a.shape}")
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray
    instance_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.array(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(f):
            if f.min() < 0 or f.max() >= len(v):
                raise ValueError("face index out of range")
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise ValueError("face references the same vertex twice")
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if self.instance_ids is not None:
            ids = np.array(self.instance_ids, dtype=np.int64).reshape(-1)
            if len(ids) != len(v):
                raise ValueError("instance_ids length must match vertex count")
            ids.setflags(write=False)
            object.__setattr__(self, "instance_ids", ids)

    @classmethod
    def empty(cls) -> "TriMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    def __len__(self):
        return len(self.faces)

    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    def face_areas(self) -> np.ndarray:
        tri = self.triangles()
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if len(self.vertices) == 0:
            raise ValueError("empty mesh has no bounds")
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def transformed(self, pose: "Pose9") -> "TriMesh":
        return TriMesh(pose.apply(self.vertices), self.faces, self.instance_ids)

    def same_as(self, other: "TriMesh") -> bool:
        ids_equal = (self.instance_ids is None and other.instance_ids is None) or (
            self.instance_ids is not None
            and other.instance_ids is not None
            and np.array_equal(self.instance_ids, other.instance_ids)
        )
        return (
            np.array_equal(self.vertices, other.vertices)
            and np.array_equal(self.faces, other.faces)
            and ids_equal
        )


def merge_meshes(meshes) -> TriMesh:
    """Concatenate meshes, keeping face order (first mesh's faces come first)."""
    verts, faces, ids = [], [], []
    offset = 0
    any_ids = any(m.instance_ids is not None for m in meshes)
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + offset)
        if any_ids:
            ids.append(m.instance_ids if m.instance_ids is not None else np.full(len(m.vertices), -1))
        offset += len(m.vertices)
    if not verts:
        return TriMesh.empty()
    return TriMesh(
        np.concatenate(verts), np.concatenate(faces), np.concatenate(ids) if any_ids else None
    )


@dataclass(frozen=True, eq=False)
class Pose9:
    """Per-axis scale, then rotation, then translation.

    ``world = translation + R @ (scale * canonical)``
    """

    scale: np.ndarray = field(default_factory=lambda: np.ones(3))
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        s = _frozen(self.scale, shape=(3,))
        if not np.all(s > 0) or not np.all(np.isfinite(s)):
            raise ValueError(f"scale components must be positive, got {s}")
        q = np.asarray(self.rotation, dtype=np.float64)
        if q.shape != (4,):
            raise ValueError("rotation must be a (w, x, y, z) quaternion")
        object.__setattr__(self, "scale", s)
        object.__setattr__(self, "rotation", _frozen(quat_normalize(q)))
        object.__setattr__(self, "translation", _frozen(self.translation, shape=(3,)))

    @classmethod
    def identity(cls) -> "Pose9":
        return cls()

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def linear(self) -> np.ndarray:
        return self.rotation_matrix() * self.scale[None, :]

    def matrix4(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.linear()
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        pts = as_cloud(points)
        return (pts * self.scale) @ self.rotation_matrix().T + self.translation

    def apply_inverse(self, points) -> np.ndarray:
        pts = as_cloud(points)
        return ((pts - self.translation) @ self.rotation_matrix()) / self.scale

    def to_dict(self) -> dict:
        return {
            "translation": [float(v) for v in self.translation],
            "rotation": [float(v) for v in self.rotation],
            "scale": [float(v) for v in self.scale],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Pose9":
        return cls(scale=d["scale"], rotation=d["rotation"], translation=d["translation"])

    def __repr__(self):
        return (
            f"Pose9(scale={np.round(self.scale, 6).tolist()}, "
            f"rotation={np.round(self.rotation, 6).tolist()}, "
            f"translation={np.round(self.translation, 6).tolist()})"
        )


def transform_points(pose: Pose9, cloud) -> np.ndarray:
    return pose.apply(cloud)


@dataclass(frozen=True, eq=False)
class Obb:
    center: np.ndarray
    half_extents: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        he = _frozen(self.half_extents, shape=(3,))
        if not np.all(he > 0):
            raise ValueError(f"half_extents must be strictly positive, got {he}")
        object.__setattr__(self, "center", _frozen(self.center, shape=(3,)))
        object.__setattr__(self, "half_extents", he)
        object.__setattr__(self, "rotation", _frozen(quat_normalize(self.rotation)))

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def to_local(self, points) -> np.ndarray:
        return (as_cloud(points) - self.center) @ self.rotation_matrix()

    def corners(self) -> np.ndarray:
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], float)
        return (signs * self.half_extents) @ self.rotation_matrix().T + self.center

    def to_dict(self) -> dict:
        return {
            "center": [float(v) for v in self.center],
            "half_extents": [float(v) for v in self.half_extents],
            "rotation": [float(v) for v in self.rotation],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Obb":
        return cls(center=d["center"], half_extents=d["half_extents"], rotation=d["rotation"])


# ---------------------------------------------------------------------------
# surface sampling

_M64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = (x + np.uint64(0x9E3779B97F4A7C15)) & _M64
    x = ((x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & _M64
    x = ((x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & _M64
    return x ^ (x >> np.uint64(31))


def _counter_uniform(seed: int, tri: np.ndarray, k: np.ndarray, dim: int) -> np.ndarray:
    """Uniform [0, 1) values addressed by (seed, triangle, sample, dimension)."""
    with np.errstate(over="ignore"):
        key = _splitmix64(np.array([seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64))
        x = _splitmix64(key ^ tri.astype(np.uint64))
        x = _splitmix64(x ^ (k.astype(np.uint64) * np.uint64(2) + np.uint64(dim)))
    return (x >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def sample_surface(mesh: TriMesh, n: int, seed: int = 0) -> np.ndarray:
    """Area-weighted uniform samples on the mesh surface.

    Per-triangle counts come from a multinomial draw keyed by ``seed``; the
    positions inside each triangle come from a counter-based stream keyed by
    ``(seed, triangle index)``, so the result never depends on evaluation order.
    """
    areas = mesh.face_areas() if len(mesh.faces) else np.zeros(0)
    total = float(areas.sum())
    if not total > 0:
        raise ZeroAreaMesh("mesh has zero surface area")
    rng = np.random.Generator(np.random.Philox(key=seed & 0xFFFFFFFFFFFFFFFF))
    counts = rng.multinomial(n, areas / total)
    tri = np.repeat(np.arange(len(areas)), counts)
    starts = np.cumsum(counts) - counts
    k = np.arange(n) - np.repeat(starts, counts)
    r1 = np.sqrt(_counter_uniform(seed, tri, k, 0))
    r2 = _counter_uniform(seed, tri, k, 1)
    a = 1.0 - r1
    b = r1 * (1.0 - r2)
    c = r1 * r2
    v = mesh.vertices[mesh.faces[tri]]
    return a[:, None] * v[:, 0] + b[:, None] * v[:, 1] + c[:, None] * v[:, 2]


# ---------------------------------------------------------------------------
# Chamfer distances (Euclidean norm, not squared)


def _check_nonempty(*clouds):
    for c in clouds:
        if len(c) == 0:
            raise EmptyCloud("point cloud is empty")


def nearest_distances(p, q) -> tuple[np.ndarray, np.ndarray]:
    """Exact nearest-neighbour distance and index in ``q`` for each point of ``p``."""
    p, q = as_cloud(p), as_cloud(q)
    _check_nonempty(p, q)
    return cKDTree(q).query(p, k=1)


def chamfer_one_way(p, q) -> float:
    """Mean over ``p`` of the Euclidean distance to the nearest point of ``q``."""
    d, _ = nearest_distances(p, q)
    return float(d.mean())


def chamfer_symmetric(a, b) -> float:
    return chamfer_one_way(a, b) + chamfer_one_way(b, a)


def normalize_unit_diagonal(points) -> np.ndarray:
    """Center a cloud on its bounding box and scale the box diagonal to 1."""
    pts = as_cloud(points)
    _check_nonempty(pts)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    diag = float(np.linalg.norm(hi - lo))
    if diag == 0:
        raise DegenerateCloud("cloud collapses to a single point")
    return (pts - 0.5 * (lo + hi)) / diag


# ---------------------------------------------------------------------------
# gravity-aligned oriented boxes


def _cross2(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull_2d(points: np.ndarray) -> np.ndarray:
    """Andrew's monotone chain; counter-clockwise hull without collinear points."""
    pts = np.unique(np.asarray(points, dtype=np.float64), axis=0)
    if len(pts) < 3:
        return pts
    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and _cross2(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in pts[::-1]:
        while len(upper) >= 2 and _cross2(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def min_area_rectangle(points2d: np.ndarray) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Rotating calipers over the convex hull.

    Returns ``(angle, center, half_sizes, hull)`` where ``angle`` is the
    rectangle's first-axis direction in ``[-pi/4, pi/4)``.
    """
    hull = convex_hull_2d(points2d)
    if len(hull) < 3:
        raise DegenerateCloud("projected points are collinear")
    edges = np.roll(hull, -1, axis=0) - hull
    angles = np.arctan2(edges[:, 1], edges[:, 0])
    # a rectangle is invariant to quarter turns; fold into [-pi/4, pi/4)
    angles = np.mod(angles + np.pi / 4, np.pi / 2) - np.pi / 4
    best = None
    for ang in angles:
        c, s = np.cos(ang), np.sin(ang)
        u = hull @ np.array([c, s])
        v = hull @ np.array([-s, c])
        area = (u.max() - u.min()) * (v.max() - v.min())
        if best is None or area < best[0] * (1 - 1e-12):
            best = (area, ang, u.min(), u.max(), v.min(), v.max())
    _, ang, u0, u1, v0, v1 = best
    c, s = np.cos(ang), np.sin(ang)
    uc, vc = 0.5 * (u0 + u1), 0.5 * (v0 + v1)
    center = np.array([uc * c - vc * s, uc * s + vc * c])
    return float(ang), center, np.array([0.5 * (u1 - u0), 0.5 * (v1 - v0)]), hull


def fit_obb_gravity_aligned(cloud, up_axis="z", min_half_extent: float = 1e-9) -> Obb:
    """Yaw-only minimum-area box about ``up_axis``, extruded over the vertical extent."""
    pts = as_cloud(cloud)
    if len(pts) < 3:
        raise DegenerateCloud("need at least 3 points to fit a box")
    up = axis_index(up_axis)
    a, b = _PLANE_AXES[up]
    ang, c2, hs, _ = min_area_rectangle(pts[:, [a, b]])
    if np.any(hs <= 0):
        raise DegenerateCloud("projected points are collinear")
    lo, hi = pts[:, up].min(), pts[:, up].max()
    center = np.zeros(3)
    center[a], center[b] = c2
    center[up] = 0.5 * (lo + hi)
    half = np.zeros(3)
    half[a], half[b] = hs
    half[up] = 0.5 * (hi - lo)
    # pad so every point stays inside after the round trip through the rotation
    pad = 1e-12 * max(1.0, float(np.abs(pts).max()))
    half = np.maximum(half + pad, min_half_extent)
    return Obb(center=center, half_extents=half, rotation=quat_about_axis(up, ang))


def points_in_obb(box: Obb, cloud, margin: float = 0.0) -> np.ndarray:
    """Sorted indices of points inside the closed box grown by ``margin``."""
    if margin < 0:
        raise ValueError("margin must be non-negative")
    pts = as_cloud(cloud)
    if len(pts) == 0:
        return np.zeros(0, dtype=np.int64)
    local = box.to_local(pts)
    inside = np.all(np.abs(local) <= box.half_extents + margin, axis=1)
    return np.flatnonzero(inside)
