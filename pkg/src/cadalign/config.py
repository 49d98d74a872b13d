"""Weights, presets and pipeline settings, loadable from a JSON config file."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path


@dataclass(frozen=True)
class ObjectiveWeights:
    lambda_m: float = 0.75
    lambda_s: float = 0.9
    lambda_sil: float = 0.3
    lambda_cd: float = 2.0

    def __post_init__(self):
        vals = (self.lambda_m, self.lambda_s, self.lambda_sil, self.lambda_cd)
        if any(v < 0 for v in vals):
            raise ValueError("objective weights must be non-negative")

    def check_depth_weights(self) -> None:
        if not (self.lambda_m > 0 or self.lambda_s > 0):
            raise ValueError("at least one of lambda_m, lambda_s must be positive")


WEIGHT_PRESETS = {
    "scannet": ObjectiveWeights(lambda_m=0.75, lambda_s=0.9, lambda_sil=0.3, lambda_cd=2.0),
    "arkitscenes": ObjectiveWeights(lambda_m=0.3, lambda_s=1.3, lambda_sil=0.4, lambda_cd=1.5),
}


@dataclass(frozen=True)
class RefinementConfig:
    steps: int = 200
    lr_translation: float = 0.01
    lr_rotation: float = 0.02
    lr_log_scale: float = 0.01
    eps_translation: float = 0.002
    eps_rotation: float = 0.005
    eps_log_scale: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    # learning rate decays geometrically to lr * final_lr_fraction at the last step
    final_lr_fraction: float = 0.05
    yaw_only: bool = False

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("refinement needs at least one step")
        positive = [
            self.lr_translation, self.lr_rotation, self.lr_log_scale,
            self.eps_translation, self.eps_rotation, self.eps_log_scale,
            self.beta1, self.beta2, self.adam_eps, self.final_lr_fraction,
        ]
        if any(v <= 0 for v in positive):
            raise ValueError("refinement rates, epsilons and moments must be positive")


@dataclass(frozen=True)
class PipelineConfig:
    preset: str = "scannet"
    weights: ObjectiveWeights = field(default_factory=lambda: WEIGHT_PRESETS["scannet"])
    n_t: int = 20
    frame_sampling: str = "even"  # "even" | "stride"
    segmentation_margin: float = 0.02
    n_samples: int = 10000
    sample_seed: int = 0
    top_k: int = 3
    tau: float = 3e-3
    cluster_normalize: bool = True
    clone_pool: str = "category"  # "category" | "topk"
    mask_semantics: str = "intersect"  # "intersect" | "penalize"
    uncovered_penalty: float = 1.0
    silhouette_occlusion: bool = True
    refine: bool = True
    refinement: RefinementConfig = field(default_factory=RefinementConfig)
    class_map: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.frame_sampling not in ("even", "stride"):
            raise ValueError(f"frame_sampling must be 'even' or 'stride', got {self.frame_sampling!r}")
        if self.clone_pool not in ("category", "topk"):
            raise ValueError(f"clone_pool must be 'category' or 'topk', got {self.clone_pool!r}")
        if self.mask_semantics not in ("intersect", "penalize"):
            raise ValueError(f"mask_semantics must be 'intersect' or 'penalize', got {self.mask_semantics!r}")
        if self.n_t < 1 or self.top_k < 1 or self.n_samples < 1:
            raise ValueError("n_t, top_k and n_samples must be >= 1")
        self.weights.check_depth_weights()

    def to_dict(self) -> dict:
        return asdict(self)


def _build(cls, data: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"{where}: unknown keys {sorted(unknown)}")
    return cls(**data)


def config_from_dict(doc: dict, preset: str | None = None) -> PipelineConfig:
    doc = dict(doc)
    preset = preset or doc.pop("preset", "scannet")
    doc.pop("preset", None)
    if preset not in WEIGHT_PRESETS and preset != "custom":
        raise ValueError(f"unknown weight preset {preset!r}")
    weights = WEIGHT_PRESETS.get(preset, ObjectiveWeights())
    if "weights" in doc:
        weights = replace(weights, **doc.pop("weights"))
    elif preset == "custom":
        raise ValueError("preset 'custom' requires a 'weights' table")
    refinement = _build(RefinementConfig, doc.pop("refinement", {}), "refinement")
    return _build(PipelineConfig, {**doc, "preset": preset, "weights": weights,
                                   "refinement": refinement}, "config")


def load_config(path=None, preset: str | None = None) -> PipelineConfig:
    doc = json.loads(Path(path).read_text()) if path else {}
    return config_from_dict(doc, preset)
