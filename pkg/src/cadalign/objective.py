"""Render-and-compare objective: depth matching, silhouette IoU and one-way Chamfer."""

from __future__ import annotations

import threading
import weakref
from collections import OrderedDict
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .cad_db import CadModel
from .config import ObjectiveWeights
from .errors import EmptyCloud, EmptySelection
from .geometry import Pose9, TriMesh, chamfer_one_way, nearest_distances
from .render import Camera, rasterize, render_depth, render_mask, valid_mask
from .scene import FrameSelection, ObjectAnnotation, RgbdScan, object_point_cloud, split_scene


@dataclass(frozen=True, eq=False)
class CachedFrame:
    index: int
    camera: Camera
    sensor: np.ndarray  # captured depth
    hole: np.ndarray  # scene with the object removed
    full: np.ndarray  # whole scene mesh
    object_mask: np.ndarray  # object silhouette in the whole scene


@dataclass(frozen=True, eq=False)
class FrameCache:
    object_id: int
    frames: tuple
    object_points: np.ndarray
    silhouette_occlusion: bool = True

    def __len__(self):
        return len(self.frames)


@dataclass(frozen=True)
class ObjectiveBreakdown:
    l_dpt: float
    l_sil: float
    l_cd: float
    total: float

    @classmethod
    def combine(cls, l_dpt, l_sil, l_cd, w: ObjectiveWeights) -> "ObjectiveBreakdown":
        l_dpt, l_sil, l_cd = float(l_dpt), float(l_sil), float(l_cd)
        return cls(l_dpt, l_sil, l_cd, l_dpt + w.lambda_sil * l_sil + w.lambda_cd * l_cd)

    def to_dict(self) -> dict:
        return {"l_dpt": self.l_dpt, "l_sil": self.l_sil, "l_cd": self.l_cd, "total": self.total}


def build_frame_cache(
    scan: RgbdScan,
    ann: ObjectAnnotation,
    selection: FrameSelection,
    silhouette_occlusion: bool = True,
) -> FrameCache:
    """Render the per-object references once: hole scene, full scene and object mask."""
    if len(selection) == 0:
        raise EmptySelection(f"object {ann.object_id}: no frames selected")
    if ann.segmentation is None:
        raise ValueError(f"object {ann.object_id}: segmentation not resolved; derive it first")
    hole, obj = split_scene(scan.scene_mesh, ann.segmentation)
    frames = []
    for t in selection.indices:
        fr = scan.frames[t]
        cam = fr.camera
        frames.append(
            CachedFrame(
                index=t,
                camera=cam,
                sensor=fr.depth,
                hole=render_depth([hole], cam),
                full=render_depth([scan.scene_mesh], cam),
                object_mask=render_mask(obj, [hole], cam, occlusion=silhouette_occlusion),
            )
        )
    return FrameCache(ann.object_id, tuple(frames), object_point_cloud(scan, ann), silhouette_occlusion)


# ---------------------------------------------------------------------------
# individual terms


def _depth_residual(d_cad, ref, semantics, penalty):
    ref_valid = valid_mask(ref)
    cad_valid = valid_mask(d_cad)
    if semantics == "intersect":
        m = ref_valid & cad_valid
        n = int(m.sum())
        return (float(np.abs(d_cad[m] - ref[m]).sum()) / n) if n else 0.0
    n = int(ref_valid.sum())
    if n == 0:
        return 0.0
    both = ref_valid & cad_valid
    uncovered = int((ref_valid & ~cad_valid).sum())
    return (float(np.abs(d_cad[both] - ref[both]).sum()) + penalty * uncovered) / n


def eval_l_dpt(
    cache: FrameCache,
    candidate_depths: Sequence[np.ndarray],
    w: ObjectiveWeights,
    mask_semantics: str = "intersect",
    uncovered_penalty: float = 1.0,
) -> float:
    """Mean over frames of weighted, valid-pixel-normalized L1 depth residuals.

    ``candidate_depths[t]`` is the scene-with-replacement depth for frame ``t``.
    Under ``"intersect"`` a pixel is compared only where the reference and the
    candidate are both valid; ``"penalize"`` compares every valid reference
    pixel and charges ``uncovered_penalty`` where the candidate is invalid.
    """
    if len(cache) == 0:
        raise EmptySelection("frame cache is empty")
    total = 0.0
    for fr, d_cad in zip(cache.frames, candidate_depths, strict=True):
        if w.lambda_m:
            total += w.lambda_m * _depth_residual(d_cad, fr.full, mask_semantics, uncovered_penalty)
        if w.lambda_s:
            total += w.lambda_s * _depth_residual(d_cad, fr.sensor, mask_semantics, uncovered_penalty)
    return total / len(cache)


def iou(a: np.ndarray, b: np.ndarray) -> float:
    union = int(np.count_nonzero(a | b))
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def eval_l_sil(cache: FrameCache, candidate_masks: Sequence[np.ndarray]) -> float:
    if len(cache) == 0:
        raise EmptySelection("frame cache is empty")
    return sum(
        1.0 - iou(fr.object_mask, m) for fr, m in zip(cache.frames, candidate_masks, strict=True)
    ) / len(cache)


def eval_l_cd(object_cloud: np.ndarray, cad_cloud_world: np.ndarray) -> float:
    return chamfer_one_way(object_cloud, cad_cloud_world)


# ---------------------------------------------------------------------------
# Chamfer term with cached per-scale trees

_TREE_CACHE_SIZE = 16
_trees: "weakref.WeakKeyDictionary[CadModel, OrderedDict]" = weakref.WeakKeyDictionary()
_trees_lock = threading.Lock()


def _scaled_tree(model: CadModel, scale: np.ndarray, n: int, seed: int) -> cKDTree:
    key = (n, seed, scale.tobytes())
    with _trees_lock:
        per_model = _trees.setdefault(model, OrderedDict())
        tree = per_model.get(key)
        if tree is not None:
            per_model.move_to_end(key)
            return tree
    tree = cKDTree(model.sampled_points(n, seed) * scale)
    with _trees_lock:
        per_model[key] = tree
        while len(per_model) > _TREE_CACHE_SIZE:
            per_model.popitem(last=False)
    return tree


def posed_chamfer(object_points: np.ndarray, model: CadModel, pose: Pose9, n: int, seed: int):
    """One-way Chamfer from the object to the posed model samples.

    Distances are computed in the rotated frame, ``|R^T (p - t) - s * q|``,
    which equals the world-frame distance and lets the tree over ``s * q``
    be reused while only rotation and translation change.
    """
    if len(object_points) == 0:
        raise EmptyCloud("object point cloud is empty")
    local = (object_points - pose.translation) @ pose.rotation_matrix()
    d, idx = _scaled_tree(model, pose.scale, n, seed).query(local, k=1)
    return float(d.mean()), idx


def chamfer_translation_gradient(object_points: np.ndarray, cad_points_world: np.ndarray) -> np.ndarray:
    """Gradient of the one-way Chamfer term w.r.t. a rigid shift of the CAD samples."""
    d, idx = nearest_distances(object_points, cad_points_world)
    diff = object_points - cad_points_world[idx]
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(d[:, None] > 0, diff / d[:, None], 0.0)
    return -unit.mean(axis=0)


# ---------------------------------------------------------------------------
# combined objective


def render_candidate(cache: FrameCache, model: CadModel, pose: Pose9):
    """Per-frame fused depth and visible CAD silhouette for ``model`` at ``pose``."""
    world = TriMesh(pose.apply(model.mesh.vertices), model.mesh.faces)
    depths, masks = [], []
    for fr in cache.frames:
        cad, _ = rasterize([world], fr.camera)
        cad_valid = np.isfinite(cad)
        hole_valid = fr.hole > 0
        in_front = cad_valid & (~hole_valid | (cad <= fr.hole))
        depths.append(np.where(in_front, cad, fr.hole))
        masks.append(in_front if cache.silhouette_occlusion else cad_valid)
    return depths, masks


def eval_objective(
    cache: FrameCache,
    model: CadModel,
    pose: Pose9,
    w: ObjectiveWeights,
    n_samples: int = 10000,
    seed: int = 0,
    mask_semantics: str = "intersect",
    uncovered_penalty: float = 1.0,
) -> ObjectiveBreakdown:
    depths, masks = render_candidate(cache, model, pose)
    l_dpt = eval_l_dpt(cache, depths, w, mask_semantics, uncovered_penalty)
    l_sil = eval_l_sil(cache, masks)
    l_cd, _ = posed_chamfer(cache.object_points, model, pose, n_samples, seed)
    return ObjectiveBreakdown.combine(l_dpt, l_sil, l_cd, w)
