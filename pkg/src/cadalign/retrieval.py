"""Exhaustive retrieval, shape-clone clustering, joint retrieval and pose refinement."""

from __future__ import annotations

import logging
from concurrent.futures import Executor, ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .annotations import ObjectResult, SceneAnnotation
from .cad_db import CadDatabase, CadModel, candidates_for_class, initial_pose_from_obb
from .config import PipelineConfig, RefinementConfig
from .errors import DegenerateModel
from .geometry import Pose9, chamfer_symmetric, normalize_unit_diagonal, quat_from_axis_angle, quat_mul
from .objective import FrameCache, ObjectiveBreakdown, build_frame_cache, eval_objective
from .scene import ObjectAnnotation, RgbdScan, derive_missing_supervision, select_frames

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Candidate:
    model_id: str
    pose: Pose9
    breakdown: ObjectiveBreakdown


@dataclass(frozen=True)
class Cluster:
    cluster_id: int
    members: tuple
    model_id: Optional[str] = None


@dataclass(frozen=True)
class ObjectContext:
    """Everything the objective needs for one target object."""

    ann: ObjectAnnotation
    cache: FrameCache


class _Serial(Executor):
    def map(self, fn, *iterables, timeout=None, chunksize=1):
        return map(fn, *iterables)


@contextmanager
def _executor(threads: int):
    if threads <= 1:
        yield _Serial()
    else:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            yield ex


def score(cache: FrameCache, model: CadModel, pose: Pose9, cfg: PipelineConfig) -> ObjectiveBreakdown:
    return eval_objective(
        cache, model, pose, cfg.weights,
        n_samples=cfg.n_samples, seed=cfg.sample_seed,
        mask_semantics=cfg.mask_semantics, uncovered_penalty=cfg.uncovered_penalty,
    )


def prepare_object(scan: RgbdScan, ann: ObjectAnnotation, cfg: PipelineConfig) -> ObjectContext:
    ann = derive_missing_supervision(scan, ann, cfg.segmentation_margin)
    sel = select_frames(scan, ann.obb, cfg.n_t, cfg.frame_sampling, ann.object_id)
    cache = build_frame_cache(scan, ann, sel, cfg.silhouette_occlusion)
    return ObjectContext(ann, cache)


def _rank(cands: Iterable[Candidate]) -> list:
    return sorted(cands, key=lambda c: (c.breakdown.total, c.model_id))


def evaluate_candidates(
    ctx: ObjectContext, db: CadDatabase, model_ids: Sequence[str], cfg: PipelineConfig,
    executor: Optional[Executor] = None,
) -> list:
    """Score every model at its box-initialized pose; degenerate models are skipped."""

    def one(mid):
        model = db.model(mid)
        try:
            pose = initial_pose_from_obb(ctx.ann.obb, model)
        except DegenerateModel as exc:
            logger.warning("skipping %s: %s", mid, exc)
            return None
        return Candidate(mid, pose, score(ctx.cache, model, pose, cfg))

    results = (executor or _Serial()).map(one, model_ids)
    return _rank(c for c in results if c is not None)


def retrieve_top_k(
    ctx: ObjectContext, db: CadDatabase, cfg: PipelineConfig, k: Optional[int] = None,
    executor: Optional[Executor] = None,
) -> list:
    """The ``k`` best category models by objective total, ties broken by model id."""
    ids = candidates_for_class(db, ctx.ann.label, cfg.class_map)
    return evaluate_candidates(ctx, db, ids, cfg, executor)[: k or cfg.top_k]


# ---------------------------------------------------------------------------
# cloning


def cluster_pairs(pairs: Iterable[tuple], tau: float, trace: Optional[list] = None) -> list:
    """Bottom-up clustering over ``(distance, a, b)`` pairs with ``distance < tau``.

    Pairs are visited from lowest to highest distance (ties by id pair):
    a pair of unassigned objects opens a cluster, an unassigned object joins
    its partner's cluster, and two different clusters are merged. When
    ``trace`` is given, one ``(event, a, b)`` tuple is appended per applied
    rule, with event ``"new"``, ``"join"`` or ``"merge"``.
    """
    assigned: dict = {}
    clusters: dict = {}
    next_key = 0
    for d, a, b in sorted((float(d), min(a, b), max(a, b)) for d, a, b in pairs):
        if not d < tau:
            break
        ca, cb = assigned.get(a), assigned.get(b)
        if ca is None and cb is None:
            clusters[next_key] = {a, b}
            assigned[a] = assigned[b] = next_key
            next_key += 1
            event = "new"
        elif ca is None or cb is None:
            key = ca if ca is not None else cb
            new = a if ca is None else b
            clusters[key].add(new)
            assigned[new] = key
            event = "join"
        elif ca != cb:
            keep, drop = min(ca, cb), max(ca, cb)
            for o in clusters.pop(drop):
                assigned[o] = keep
                clusters[keep].add(o)
            event = "merge"
        else:
            continue
        if trace is not None:
            trace.append((event, a, b))
    groups = sorted((tuple(sorted(m)) for m in clusters.values()), key=lambda m: m[0])
    return [Cluster(i, m) for i, m in enumerate(groups)]


class ShapeDistances:
    """Symmetric Chamfer between models' canonical samples, memoized per pair."""

    def __init__(self, db: CadDatabase, n: int = 10000, seed: int = 0, normalize: bool = True):
        self.db, self.n, self.seed, self.normalize = db, n, seed, normalize
        self._clouds: dict = {}
        self._pairs: dict = {}

    def cloud(self, model_id: str) -> np.ndarray:
        if model_id not in self._clouds:
            pts = self.db.model(model_id).sampled_points(self.n, self.seed)
            self._clouds[model_id] = normalize_unit_diagonal(pts) if self.normalize else pts
        return self._clouds[model_id]

    def __call__(self, a: str, b: str) -> float:
        if a == b:
            return 0.0
        key = (min(a, b), max(a, b))
        if key not in self._pairs:
            self._pairs[key] = chamfer_symmetric(self.cloud(key[0]), self.cloud(key[1]))
        return self._pairs[key]


def cluster_retrievals(
    best_models: dict, db: CadDatabase, tau: float = 3e-3, normalize: bool = True,
    n: int = 10000, seed: int = 0, distances: Optional[ShapeDistances] = None,
) -> list:
    """Group objects whose retrieved models are shape clones (``best_models``: object id -> model id)."""
    dist = distances or ShapeDistances(db, n, seed, normalize)
    ids = sorted(best_models)
    pairs = [
        (dist(best_models[a], best_models[b]), a, b)
        for i, a in enumerate(ids) for b in ids[i + 1:]
    ]
    return cluster_pairs(pairs, tau)


def joint_retrieve(
    members: Sequence[ObjectContext], db: CadDatabase, cfg: PipelineConfig,
    pool: Optional[Sequence[str]] = None, executor: Optional[Executor] = None,
) -> tuple:
    """Model minimizing the summed objective over all cluster members.

    Returns ``(model_id, {object_id: Candidate})``; each member is scored at
    its own box-initialized pose.
    """
    if pool is None:
        pool = sorted({mid for m in members for mid in candidates_for_class(db, m.ann.label, cfg.class_map)})

    def one(mid):
        model = db.model(mid)
        cands = {}
        try:
            for m in members:
                pose = initial_pose_from_obb(m.ann.obb, model)
                cands[m.ann.object_id] = Candidate(mid, pose, score(m.cache, model, pose, cfg))
        except DegenerateModel as exc:
            logger.warning("skipping %s: %s", mid, exc)
            return None
        return sum(c.breakdown.total for c in cands.values()), mid, cands

    scored = [r for r in (executor or _Serial()).map(one, sorted(pool)) if r is not None]
    if not scored:
        raise ValueError("joint retrieval pool is empty")
    total, mid, cands = min(scored, key=lambda r: (r[0], r[1]))
    return mid, cands


# ---------------------------------------------------------------------------
# refinement


def perturb_pose(pose0: Pose9, params: np.ndarray) -> Pose9:
    """Apply ``[dt(3), rotvec(3), dlogscale(3)]``; the rotation increment acts on the left."""
    return Pose9(
        scale=pose0.scale * np.exp(params[6:9]),
        rotation=quat_mul(quat_from_axis_angle(params[3:6]), pose0.rotation),
        translation=pose0.translation + params[0:3],
    )


def adam_fd_minimize(
    f: Callable[[np.ndarray], float], x0: np.ndarray, lr: np.ndarray, eps: np.ndarray,
    rcfg: RefinementConfig, active: Optional[np.ndarray] = None,
):
    """Adam on central finite-difference gradients; returns ``(best_x, best_f, f0)``."""
    x = np.array(x0, dtype=np.float64)
    active = np.ones_like(x, dtype=bool) if active is None else np.asarray(active, bool)
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    f0 = f(x)
    best_x, best_f = x.copy(), f0
    steps = rcfg.steps
    for step in range(1, steps + 1):
        g = np.zeros_like(x)
        for i in np.flatnonzero(active):
            e = np.zeros_like(x)
            e[i] = eps[i]
            g[i] = (f(x + e) - f(x - e)) / (2 * eps[i])
        m = rcfg.beta1 * m + (1 - rcfg.beta1) * g
        v = rcfg.beta2 * v + (1 - rcfg.beta2) * g * g
        m_hat = m / (1 - rcfg.beta1 ** step)
        v_hat = v / (1 - rcfg.beta2 ** step)
        decay = rcfg.final_lr_fraction ** ((step - 1) / max(steps - 1, 1))
        x = x - lr * decay * m_hat / (np.sqrt(v_hat) + rcfg.adam_eps)
        fx = f(x)
        if fx < best_f:
            best_x, best_f = x.copy(), fx
    return best_x, best_f, f0


def refine_pose(
    cache: FrameCache, model: CadModel, pose0: Pose9, cfg: PipelineConfig,
    rcfg: Optional[RefinementConfig] = None, gravity_axis: int = 2,
) -> tuple:
    """Minimize the objective over the 9 pose parameters; returns the best pose visited."""
    rcfg = rcfg or cfg.refinement
    lr = np.repeat([rcfg.lr_translation, rcfg.lr_rotation, rcfg.lr_log_scale], 3)
    eps = np.repeat([rcfg.eps_translation, rcfg.eps_rotation, rcfg.eps_log_scale], 3)
    active = np.ones(9, dtype=bool)
    if rcfg.yaw_only:
        active[3:6] = False
        active[3 + gravity_axis] = True
    evals: dict = {}

    def f(x):
        key = x.tobytes()
        if key not in evals:
            evals[key] = score(cache, model, perturb_pose(pose0, x), cfg)
        return evals[key].total

    best_x, _, _ = adam_fd_minimize(f, np.zeros(9), lr, eps, rcfg, active)
    best = perturb_pose(pose0, best_x) if np.any(best_x) else pose0
    return best, evals[best_x.tobytes()]


# ---------------------------------------------------------------------------
# whole scene


def _refine_candidate(ctx, db, cand: Candidate, cfg: PipelineConfig, gravity_axis: int) -> Candidate:
    if not cfg.refine:
        return cand
    pose, bd = refine_pose(ctx.cache, db.model(cand.model_id), cand.pose, cfg, gravity_axis=gravity_axis)
    return Candidate(cand.model_id, pose, bd)


def annotate_scene(scan: RgbdScan, db: CadDatabase, cfg: PipelineConfig, threads: int = 1) -> SceneAnnotation:
    """Retrieve, clone-cluster and refine a CAD model for every annotated object.

    A failure on one object is logged and recorded in its result; the other
    objects are still processed.
    """
    results: dict = {}
    contexts: dict = {}
    topk: dict = {}

    def fail(ann, exc):
        logger.error("object %s failed: %s", ann.object_id, exc)
        results[ann.object_id] = ObjectResult(ann.object_id, ann.label, status="failed",
                                              error=f"{type(exc).__name__}: {exc}")

    with _executor(threads) as ex:
        for ann in scan.annotations:
            try:
                ctx = prepare_object(scan, ann, cfg)
                cands = retrieve_top_k(ctx, db, cfg, cfg.top_k, ex)
                if not cands:
                    raise ValueError("no usable candidate models")
            except Exception as exc:  # isolate per-object failures
                fail(ann, exc)
                continue
            contexts[ann.object_id] = ctx
            topk[ann.object_id] = cands

        best = {oid: c[0].model_id for oid, c in topk.items()}
        clusters = cluster_retrievals(best, db, cfg.tau, cfg.cluster_normalize, cfg.n_samples, cfg.sample_seed)
        cluster_docs = []
        clustered = set()
        for cl in clusters:
            members = [contexts[o] for o in cl.members]
            try:
                pool = None
                if cfg.clone_pool == "topk":
                    pool = sorted({c.model_id for o in cl.members for c in topk[o]})
                mid, cands = joint_retrieve(members, db, cfg, pool, ex)
            except Exception as exc:
                logger.error("joint retrieval for cluster %s failed: %s", cl.members, exc)
                continue
            clustered.update(cl.members)
            cluster_docs.append({"cluster_id": cl.cluster_id, "members": list(cl.members), "model_id": mid})
            refined = list(ex.map(
                lambda m: _refine_candidate(m, db, cands[m.ann.object_id], cfg, scan.gravity_axis), members
            ))
            for m, cand in zip(members, refined):
                results[m.ann.object_id] = _result(m.ann, cand, topk[m.ann.object_id], cl.cluster_id)

        for oid, cands in topk.items():
            if oid in clustered:
                continue
            ctx = contexts[oid]
            try:
                refined = list(ex.map(lambda c: _refine_candidate(ctx, db, c, cfg, scan.gravity_axis), cands))
            except Exception as exc:
                fail(ctx.ann, exc)
                continue
            results[oid] = _result(ctx.ann, _rank(refined)[0], cands, None)

    return SceneAnnotation(
        scene_id=scan.scene_id,
        preset=cfg.preset,
        objects=[results[o] for o in sorted(results)],
        weights={"lambda_m": cfg.weights.lambda_m, "lambda_s": cfg.weights.lambda_s,
                 "lambda_sil": cfg.weights.lambda_sil, "lambda_cd": cfg.weights.lambda_cd},
        clusters=cluster_docs,
    )


def _result(ann: ObjectAnnotation, cand: Candidate, history: list, cluster_id) -> ObjectResult:
    return ObjectResult(
        object_id=ann.object_id,
        label=ann.label,
        model_id=cand.model_id,
        pose=cand.pose,
        cluster_id=cluster_id,
        objective=cand.breakdown.to_dict(),
        top_k=[{"model_id": c.model_id, "total": c.breakdown.total} for c in history],
    )
