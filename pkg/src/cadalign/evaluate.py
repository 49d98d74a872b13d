"""Deviation metrics between two annotation sets (translation, rotation, scale, shape)."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .annotations import SceneAnnotation
from .cad_db import CadDatabase
from .errors import NoOverlap
from .geometry import Pose9, chamfer_symmetric, normalize_unit_diagonal, rotation_angle

CRITERIA = ("translation", "rotation", "scale", "shape")
N_BINS = 30

DEFINITIONS = {
    "translation": "Euclidean distance between translations, meters",
    "rotation": "geodesic angle between rotations, degrees",
    "scale": "mean over axes of |s_pred / s_ref - 1|",
    "shape": "symmetric Chamfer distance (Euclidean, mean nearest-neighbour) between the two "
             "models' canonical surface samples, each normalized to a unit-diagonal bounding box",
    "histogram": f"{N_BINS} uniform bins on [0, p99] where p99 is the 99th percentile of the "
                 "criterion's values (1.0 if p99 is 0); values above p99 go to the overflow bin",
}


def translation_error(pred: Pose9, ref: Pose9) -> float:
    return float(np.linalg.norm(pred.translation - ref.translation))


def rotation_error_deg(pred: Pose9, ref: Pose9) -> float:
    return math.degrees(rotation_angle(pred.rotation, ref.rotation))


def scale_error(pred: Pose9, ref: Pose9) -> float:
    return float(np.mean(np.abs(pred.scale / ref.scale - 1.0)))


class ShapeError:
    def __init__(self, db: CadDatabase, n: int = 10000, seed: int = 0):
        self.db, self.n, self.seed = db, n, seed
        self._clouds: dict = {}

    def _cloud(self, mid):
        if mid not in self._clouds:
            self._clouds[mid] = normalize_unit_diagonal(self.db.model(mid).sampled_points(self.n, self.seed))
        return self._clouds[mid]

    def __call__(self, a: str, b: str) -> float:
        if a == b:
            return 0.0
        return chamfer_symmetric(self._cloud(a), self._cloud(b))


def histogram(values) -> dict:
    values = np.asarray(values, dtype=np.float64)
    hi = float(np.percentile(values, 99)) if len(values) else 0.0
    if not hi > 0:
        hi = 1.0
    inside = values[values <= hi]
    counts, edges = np.histogram(inside, bins=N_BINS, range=(0.0, hi))
    return {"edges": edges.tolist(), "counts": counts.tolist(), "overflow": int((values > hi).sum())}


def evaluate(pred: SceneAnnotation, ref: SceneAnnotation, db: CadDatabase, n_samples: int = 10000) -> dict:
    """Per-object and aggregate deviations of ``pred`` from ``ref``."""
    p = {o.object_id: o for o in pred.objects if o.status == "ok" and o.pose is not None}
    r = {o.object_id: o for o in ref.objects if o.status == "ok" and o.pose is not None}
    common = sorted(set(p) & set(r))
    if not common:
        raise NoOverlap("no object ids in common between prediction and reference")
    shape = ShapeError(db, n_samples)
    rows = []
    for oid in common:
        a, b = p[oid], r[oid]
        rows.append({
            "object_id": oid,
            "model_pred": a.model_id,
            "model_ref": b.model_id,
            "translation": translation_error(a.pose, b.pose),
            "rotation": rotation_error_deg(a.pose, b.pose),
            "scale": scale_error(a.pose, b.pose),
            "shape": shape(a.model_id, b.model_id),
        })
    summary, hists = {}, {}
    for c in CRITERIA:
        vals = np.array([row[c] for row in rows])
        summary[c] = {"mean": float(vals.mean()), "median": float(np.median(vals)), "max": float(vals.max())}
        hists[c] = histogram(vals)
    return {
        "scene_pred": pred.scene_id,
        "scene_ref": ref.scene_id,
        "objects": rows,
        "summary": summary,
        "histograms": hists,
        "unmatched": {"pred_only": sorted(set(p) - set(r)), "ref_only": sorted(set(r) - set(p))},
        "metadata": {"definitions": DEFINITIONS, "n_samples": n_samples},
    }


def plot_histograms(report: dict, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    units = {"translation": "m", "rotation": "deg", "scale": "", "shape": ""}
    fig, axes = plt.subplots(1, 4, figsize=(14, 3))
    for ax, c in zip(axes, CRITERIA):
        h = report["histograms"][c]
        edges = np.asarray(h["edges"])
        ax.bar(edges[:-1], h["counts"], width=np.diff(edges), align="edge")
        ax.set_title(f"{c} (overflow {h['overflow']})")
        ax.set_xlabel(units[c])
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
