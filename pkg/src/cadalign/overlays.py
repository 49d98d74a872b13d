"""Per-frame debug images: sensor depth, composed CAD depth, silhouette outlines."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .annotations import SceneAnnotation
from .cad_db import CadDatabase
from .geometry import TriMesh
from .render import Camera, _write_png, depth_to_png, rasterize
from .scene import RgbdScan, derive_missing_supervision, split_scene


def composed_scene(scan: RgbdScan, annotation: SceneAnnotation, db: CadDatabase, margin: float = 0.02):
    """Scene mesh with annotated objects cut out, plus the posed CAD meshes.

    Returns ``(background, cads)`` where ``cads`` is a list of ``(object_id, world mesh)``.
    """
    results = {o.object_id: o for o in annotation.objects if o.status == "ok" and o.pose is not None}
    seg = []
    cads = []
    for ann in scan.annotations:
        res = results.get(ann.object_id)
        if res is None:
            continue
        ann = derive_missing_supervision(scan, ann, margin)
        seg.append(ann.segmentation)
        model = db.model(res.model_id)
        cads.append((ann.object_id, TriMesh(res.pose.apply(model.mesh.vertices), model.mesh.faces)))
    background = scan.scene_mesh
    if seg:
        background, _ = split_scene(scan.scene_mesh, np.concatenate(seg))
    return background, cads


def frame_layers(background: TriMesh, cads: list, camera: Camera):
    """Composed depth (0 = invalid) and each CAD's visible silhouette for one camera."""
    depth, tri = rasterize([*(m for _, m in cads), background], camera)
    masks = {}
    start = 0
    for oid, mesh in cads:
        masks[oid] = (tri >= start) & (tri < start + len(mesh.faces))
        start += len(mesh.faces)
    depth[~np.isfinite(depth)] = 0.0
    return depth, masks


def outline(mask: np.ndarray) -> np.ndarray:
    """Mask pixels with at least one 4-neighbour outside the mask."""
    padded = np.pad(mask, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return mask & ~interior


_PALETTE = np.array([
    [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200], [245, 130, 48],
    [145, 30, 180], [70, 240, 240], [240, 50, 230], [210, 245, 60], [250, 190, 212],
], dtype=np.uint8)


def outline_image(depth: np.ndarray, masks: dict) -> np.ndarray:
    valid = depth > 0
    gray = np.zeros(depth.shape, dtype=np.uint8)
    if valid.any():
        lo, hi = depth[valid].min(), depth[valid].max()
        span = hi - lo if hi > lo else 1.0
        gray[valid] = (255 - 200 * (depth[valid] - lo) / span).astype(np.uint8)
    img = np.repeat(gray[:, :, None], 3, axis=2)
    for k, oid in enumerate(sorted(masks)):
        img[outline(masks[oid])] = _PALETTE[k % len(_PALETTE)]
    return img


def render_overlays(
    scan: RgbdScan, annotation: SceneAnnotation, db: CadDatabase, out_dir, n_frames: int = 20,
) -> list:
    """Write ``sensor_XXXXX.png``, ``composed_XXXXX.png`` and ``outline_XXXXX.png`` per frame."""
    from PIL import Image

    out_dir = Path(out_dir)
    background, cads = composed_scene(scan, annotation, db)
    m = len(scan.frames)
    if m == 0:
        return []
    if m <= n_frames:
        picks = range(m)
    else:
        picks = sorted({(2 * i * (m - 1) + (n_frames - 1)) // (2 * (n_frames - 1)) for i in range(n_frames)}) \
            if n_frames > 1 else [(m - 1) // 2]
    written = []
    for t in picks:
        fr = scan.frames[t]
        depth, masks = frame_layers(background, cads, fr.camera)
        paths = (out_dir / f"sensor_{t:05d}.png", out_dir / f"composed_{t:05d}.png", out_dir / f"outline_{t:05d}.png")
        depth_to_png(fr.depth, paths[0], fr.depth_scale)
        depth_to_png(depth, paths[1], fr.depth_scale)
        _write_png(Image.fromarray(outline_image(depth, masks)), paths[2])
        written.extend(paths)
    return written
