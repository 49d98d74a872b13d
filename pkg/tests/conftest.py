import numpy as np
import pytest

from cadalign.synth import SceneSpec, build_scene, database_in_memory, place_on_floor


def brute_chamfer(p, q):
    """O(|P||Q|) one-way Chamfer with the Euclidean norm."""
    d = np.sqrt(((p[:, None, :] - q[None, :, :]) ** 2).sum(axis=2))
    return d.min(axis=1).mean()


def single_object_scene(db, model_id, label, x=0.2, y=-0.1, yaw=0.6, seed=3, count=12, **spec_kw):
    """One object on the floor, orbited by ``count`` cameras."""
    model = db.model(model_id)
    pose = place_on_floor(model, x, y, yaw)
    spec = SceneSpec(
        scene_id=f"single_{model_id}",
        objects=[{"id": 1, "model_id": model_id, "class": label, "pose": pose}],
        camera={"count": count, "radius": 2.0, "height": 1.4, "look_at": [x, y, 0.4]},
        seed=seed,
        **spec_kw,
    )
    scan, gt = build_scene(spec, db)
    return scan, gt, pose


@pytest.fixture(scope="session")
def small_db():
    return database_in_memory({"chair": 6, "table": 3}, seed=1)


@pytest.fixture(scope="session")
def chair_scene(small_db):
    return single_object_scene(small_db, "chair_002", "chair")


CLONE_SPOTS = [(-1.0, -0.3, 0.4), (-0.3, 0.9, 2.0), (0.7, 0.8, -1.0), (1.0, -0.5, 3.0)]


def clone_scene(db, chair_id, table_id, seed=7, count=16, **spec_kw):
    """Four copies of one chair plus one table, orbited from the room center."""
    objects = []
    for i, (x, y, yaw) in enumerate(CLONE_SPOTS, start=1):
        objects.append({"id": i, "model_id": chair_id, "class": "chair",
                        "pose": place_on_floor(db.model(chair_id), x, y, yaw)})
    objects.append({"id": 5, "model_id": table_id, "class": "table",
                    "pose": place_on_floor(db.model(table_id), 0.0, -1.3, 0.1)})
    spec = SceneSpec(
        scene_id="clones",
        objects=objects,
        camera={"count": count, "rings": 2, "radius": 1.9, "height": 1.5, "ring_height_step": 0.4,
                "look_at": [0.0, 0.0, 0.3]},
        seed=seed,
        **spec_kw,
    )
    return build_scene(spec, db)
