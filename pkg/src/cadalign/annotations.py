"""Scene annotation documents: the JSON written by ``annotate`` and ``synth``.

::

    {
      "scene_id": "...",
      "weight_preset": "scannet",
      "weights": {"lambda_m": ..., "lambda_s": ..., "lambda_sil": ..., "lambda_cd": ...},
      "objects": [
        {"object_id": 1, "class": "chair", "status": "ok", "model_id": "chair_004",
         "pose": {"translation": [x, y, z], "rotation": [w, x, y, z], "scale": [sx, sy, sz]},
         "cluster_id": 0,
         "objective": {"l_dpt": ..., "l_sil": ..., "l_cd": ..., "total": ...},
         "top_k": [{"model_id": "...", "total": ...}, ...],
         "error": null}
      ],
      "clusters": [{"cluster_id": 0, "members": [1, 2], "model_id": "chair_004"}]
    }
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .geometry import Pose9
from .scene import write_json


@dataclass
class ObjectResult:
    object_id: int
    label: str
    model_id: Optional[str] = None
    pose: Optional[Pose9] = None
    cluster_id: Optional[int] = None
    objective: Optional[dict] = None
    top_k: list = field(default_factory=list)
    status: str = "ok"
    error: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "object_id": self.object_id,
            "class": self.label,
            "status": self.status,
            "model_id": self.model_id,
            "pose": self.pose.to_dict() if self.pose is not None else None,
            "cluster_id": self.cluster_id,
            "objective": self.objective,
            "top_k": self.top_k,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectResult":
        return cls(
            object_id=int(d["object_id"]),
            label=d.get("class", ""),
            model_id=d.get("model_id"),
            pose=Pose9.from_dict(d["pose"]) if d.get("pose") else None,
            cluster_id=d.get("cluster_id"),
            objective=d.get("objective"),
            top_k=list(d.get("top_k", [])),
            status=d.get("status", "ok"),
            error=d.get("error"),
        )


@dataclass
class SceneAnnotation:
    scene_id: str
    preset: str
    objects: list
    weights: Optional[dict] = None
    clusters: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "weight_preset": self.preset,
            "weights": self.weights,
            "objects": [o.to_dict() for o in sorted(self.objects, key=lambda o: o.object_id)],
            "clusters": self.clusters,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneAnnotation":
        return cls(
            scene_id=d.get("scene_id", ""),
            preset=d.get("weight_preset", ""),
            objects=[ObjectResult.from_dict(o) for o in d.get("objects", [])],
            weights=d.get("weights"),
            clusters=list(d.get("clusters", [])),
        )

    def by_id(self) -> dict:
        return {o.object_id: o for o in self.objects}


def write_annotation(ann: SceneAnnotation, path) -> None:
    write_json(path, ann.to_dict())


def read_annotation(path) -> SceneAnnotation:
    return SceneAnnotation.from_dict(json.loads(Path(path).read_text()))
