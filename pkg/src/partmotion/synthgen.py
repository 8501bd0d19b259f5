"""Procedural articulated objects, posed point clouds and training tuples.

Objects are unions of axis-aligned boxes: a static base plus one or more
movable parts, each attached by a revolute or prismatic joint. Points are
sampled uniformly over box surfaces and keep their identity across poses, so
row ``i`` of every posed cloud is the same material point.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geom import RigidTransform, axis_angle_matrix, identity_transforms

CATEGORIES = ("door", "laptop", "oven", "refrigerator", "microwave", "table", "storage")

REVOLUTE_RANGE = (0.0, math.pi / 2)
PRISMATIC_RANGE = (0.0, 0.4)
DELTA_MIN = {"revolute": 0.15, "prismatic": 0.05}

FORMAT_VERSION = 1


class DatasetError(ValueError):
    pass


class DatasetFormatError(DatasetError):
    pass


class DatasetTruncatedError(DatasetError):
    pass


class DatasetVersionError(DatasetError):
    pass


@dataclass(frozen=True)
class JointSpec:
    kind: str
    axis: np.ndarray
    pivot: np.ndarray
    pose_min: float
    pose_max: float

    def __post_init__(self):
        if self.kind not in ("revolute", "prismatic"):
            raise ValueError(f"unknown joint kind {self.kind!r}")
        axis = np.asarray(self.axis, dtype=np.float64)
        if abs(np.linalg.norm(axis) - 1.0) > 1e-9:
            raise ValueError("joint axis must be unit length")
        if not self.pose_min < self.pose_max:
            raise ValueError("pose_min must be below pose_max")
        object.__setattr__(self, "axis", axis)
        object.__setattr__(self, "pivot", np.asarray(self.pivot, dtype=np.float64))

    def transform(self, value: float) -> RigidTransform:
        """Rigid motion taking a part from rest (pose 0) to ``value``."""
        if self.kind == "revolute":
            R = axis_angle_matrix(self.axis, value)
            return RigidTransform(R, self.pivot - R @ self.pivot)
        return RigidTransform(np.eye(3), value * self.axis)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "axis": self.axis.tolist(),
            "pivot": self.pivot.tolist(),
            "pose_min": self.pose_min,
            "pose_max": self.pose_max,
        }

    @classmethod
    def from_dict(cls, d) -> JointSpec:
        return cls(d["kind"], d["axis"], d["pivot"], d["pose_min"], d["pose_max"])


@dataclass
class ArticulatedObject:
    rest_cloud: np.ndarray
    part_labels: np.ndarray  # -1 for base, j for joint j
    joints: list[JointSpec]
    category: str
    seed: int

    @property
    def n_points(self) -> int:
        return len(self.rest_cloud)

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    @property
    def movable_mask(self) -> np.ndarray:
        return self.part_labels >= 0

    @property
    def per_joint_masks(self) -> np.ndarray:
        return np.stack([self.part_labels == j for j in range(self.n_joints)])

    def dominant_joint(self) -> int:
        return int(np.argmax(self.per_joint_masks.sum(1)))


@dataclass
class TrainingTuple:
    I1: np.ndarray
    I2: np.ndarray
    I3: np.ndarray
    phi1: np.ndarray
    phi2: np.ndarray
    phi3: np.ndarray
    movable_mask: np.ndarray
    gt_transforms_1to3: np.ndarray
    part_labels: np.ndarray = field(default=None)


# ---------------------------------------------------------------------------
# geometry


def _box_faces(center, half):
    """Yield (area, origin, u, v) per face; face points are origin + a*u + b*v, a,b in [0,1]."""
    c = np.asarray(center, dtype=np.float64)
    h = np.asarray(half, dtype=np.float64)
    for ax in range(3):
        o1, o2 = [i for i in range(3) if i != ax]
        for sgn in (-1.0, 1.0):
            origin = c.copy()
            origin[ax] += sgn * h[ax]
            origin[o1] -= h[o1]
            origin[o2] -= h[o2]
            u = np.zeros(3)
            v = np.zeros(3)
            u[o1] = 2 * h[o1]
            v[o2] = 2 * h[o2]
            yield 4 * h[o1] * h[o2], origin, u, v


def _sample_boxes(boxes, n, rng) -> np.ndarray:
    faces = [f for center, half in boxes for f in _box_faces(center, half)]
    areas = np.array([f[0] for f in faces])
    counts = rng.multinomial(n, areas / areas.sum())
    out = []
    for (_, origin, u, v), k in zip(faces, counts):
        ab = rng.random((k, 2))
        out.append(origin + ab[:, :1] * u + ab[:, 1:] * v)
    return np.concatenate(out) if out else np.zeros((0, 3))


def _boxes_area(boxes) -> float:
    return float(sum(f[0] for center, half in boxes for f in _box_faces(center, half)))


def _revolute(axis, pivot) -> JointSpec:
    return JointSpec("revolute", np.asarray(axis, float), pivot, *REVOLUTE_RANGE)


def _prismatic(axis) -> JointSpec:
    return JointSpec("prismatic", np.asarray(axis, float), np.zeros(3), *PRISMATIC_RANGE)


def _hinged_front_door(rng, W, D, H, n_sides):
    """Box body with a front door (facing -y) hinged on a vertical edge."""
    t = 0.03
    base = [((0, 0, H / 2), (W / 2, D / 2, H / 2))]
    door = [((0, -D / 2 - t / 2, H / 2), (W / 2, t / 2, H / 2))]
    side = 1.0 if n_sides == 1 else float(rng.choice([-1.0, 1.0]))
    joint = _revolute((0, 0, side), (side * W / 2, -D / 2 - t, 0.0))
    return base, [door], [joint]


def _build_door(rng):
    W = rng.uniform(0.5, 0.8)
    H = rng.uniform(0.9, 1.2)
    t = rng.uniform(0.03, 0.05)
    fw = rng.uniform(0.05, 0.08)
    base = [
        ((-W / 2 - fw / 2, 0, H / 2 + fw / 2), (fw / 2, 0.06, H / 2 + fw / 2)),
        ((W / 2 + fw / 2, 0, H / 2 + fw / 2), (fw / 2, 0.06, H / 2 + fw / 2)),
        ((0, 0, H + fw / 2), (W / 2, 0.06, fw / 2)),
    ]
    panel = [((0, 0, H / 2), (W / 2, t / 2, H / 2))]
    # four hinge orientations: hinge side x turning direction
    side = float(rng.choice([-1.0, 1.0]))
    sense = float(rng.choice([-1.0, 1.0]))
    joint = _revolute((0, 0, sense), (side * W / 2, 0.0, 0.0))
    return base, [panel], [joint]


def _build_laptop(rng):
    W = rng.uniform(0.6, 0.8)
    D = rng.uniform(0.4, 0.55)
    t = 0.03
    base = [((0, 0, t / 2), (W / 2, D / 2, t / 2))]
    screen = [((0, 0, 1.5 * t), (W / 2, D / 2, t / 2))]
    # lid lies closed on the base at rest and lifts about the back edge
    joint = _revolute((-1, 0, 0), (0.0, D / 2, t))
    return base, [screen], [joint]


def _build_oven(rng):
    W = rng.uniform(0.6, 0.8)
    D = rng.uniform(0.5, 0.7)
    H = rng.uniform(0.6, 0.8)
    t = 0.03
    dh = H * rng.uniform(0.6, 0.8)
    base = [((0, 0, H / 2), (W / 2, D / 2, H / 2))]
    door = [((0, -D / 2 - t / 2, dh / 2), (W / 2 * 0.95, t / 2, dh / 2))]
    joint = _revolute((1, 0, 0), (0.0, -D / 2 - t, 0.0))
    return base, [door], [joint]


def _build_refrigerator(rng):
    return _hinged_front_door(rng, rng.uniform(0.5, 0.7), rng.uniform(0.5, 0.65), rng.uniform(1.1, 1.4), 2)


def _build_microwave(rng):
    return _hinged_front_door(rng, rng.uniform(0.6, 0.8), rng.uniform(0.35, 0.45), rng.uniform(0.3, 0.4), 2)


def _drawer(cx, cz, w, d, h, front_y):
    t = 0.015
    cy = front_y + d / 2
    return [
        ((cx, front_y + t / 2, cz), (w / 2, t / 2, h / 2)),  # front
        ((cx, front_y + d - t / 2, cz), (w / 2, t / 2, h / 2)),  # back
        ((cx - w / 2 + t / 2, cy, cz), (t / 2, d / 2, h / 2)),
        ((cx + w / 2 - t / 2, cy, cz), (t / 2, d / 2, h / 2)),
        ((cx, cy, cz - h / 2 + t / 2), (w / 2, d / 2, t / 2)),  # bottom
    ]


def _build_table(rng):
    W = rng.uniform(0.8, 1.0)
    D = rng.uniform(0.5, 0.7)
    H = rng.uniform(0.6, 0.75)
    top_t = 0.04
    leg = 0.04
    base = [((0, 0, H - top_t / 2), (W / 2, D / 2, top_t / 2))]
    for sx in (-1, 1):
        for sy in (-1, 1):
            c = (sx * (W / 2 - leg / 2), sy * (D / 2 - leg / 2), (H - top_t) / 2)
            base.append((c, (leg / 2, leg / 2, (H - top_t) / 2)))
    dh = 0.12
    drawer = _drawer(0.0, H - top_t - dh / 2, W * 0.6, D * 0.85, dh, -D / 2)
    return base, [drawer], [_prismatic((0, -1, 0))]


def _build_storage(rng):
    W = rng.uniform(0.5, 0.7)
    D = rng.uniform(0.45, 0.6)
    H = rng.uniform(0.6, 0.8)
    t = 0.02
    base = [
        ((0, D / 2 - t / 2, H / 2), (W / 2, t / 2, H / 2)),  # back
        ((-W / 2 + t / 2, 0, H / 2), (t / 2, D / 2, H / 2)),
        ((W / 2 - t / 2, 0, H / 2), (t / 2, D / 2, H / 2)),
        ((0, 0, H - t / 2), (W / 2, D / 2, t / 2)),
        ((0, 0, t / 2), (W / 2, D / 2, t / 2)),
    ]
    inner_h = (H - 2 * t) / 2
    parts = []
    for k in range(2):
        cz = t + inner_h * (k + 0.5)
        parts.append(_drawer(0.0, cz, W - 2 * t, D - t, inner_h * 0.9, -D / 2))
    joints = [_prismatic((0, -1, 0)), _prismatic((0, -1, 0))]
    return base, parts, joints


_BUILDERS = {
    "door": _build_door,
    "laptop": _build_laptop,
    "oven": _build_oven,
    "refrigerator": _build_refrigerator,
    "microwave": _build_microwave,
    "table": _build_table,
    "storage": _build_storage,
}


def make_object(category: str, seed: int, n_points: int) -> ArticulatedObject:
    """Build one articulated object; ``(category, seed, n_points)`` fixes it exactly."""
    if category not in _BUILDERS:
        raise ValueError(f"unknown category {category!r}; expected one of {CATEGORIES}")
    if n_points < 64:
        raise ValueError("n_points must be at least 64")
    seed = int(seed)
    rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, CATEGORIES.index(category)])
    base, parts, joints = _BUILDERS[category](rng)

    areas = np.array([_boxes_area(base)] + [_boxes_area(p) for p in parts])
    n_mov = int(round(n_points * areas[1:].sum() / areas.sum()))
    n_mov = min(max(n_mov, math.ceil(0.1 * n_points)), math.floor(0.9 * n_points))
    part_counts = rng.multinomial(n_mov, areas[1:] / areas[1:].sum())
    # every movable part needs enough points for registration
    while part_counts.min() < 3:
        part_counts[np.argmax(part_counts)] -= 1
        part_counts[np.argmin(part_counts)] += 1

    clouds = [_sample_boxes(base, n_points - n_mov, rng)]
    labels = [np.full(n_points - n_mov, -1, dtype=np.int64)]
    for j, (boxes, k) in enumerate(zip(parts, part_counts)):
        clouds.append(_sample_boxes(boxes, int(k), rng))
        labels.append(np.full(int(k), j, dtype=np.int64))
    cloud = np.concatenate(clouds)
    label = np.concatenate(labels)
    perm = rng.permutation(n_points)
    return ArticulatedObject(cloud[perm], label[perm], joints, category, seed)


def _check_pose(obj: ArticulatedObject, pose) -> np.ndarray:
    pose = np.atleast_1d(np.asarray(pose, dtype=np.float64))
    if pose.shape != (obj.n_joints,):
        raise ValueError(f"pose has {pose.shape[0]} entries, object has {obj.n_joints} joints")
    return pose


def pose_cloud(obj: ArticulatedObject, pose) -> np.ndarray:
    pose = _check_pose(obj, pose)
    out = obj.rest_cloud.copy()
    for j, joint in enumerate(obj.joints):
        m = obj.part_labels == j
        out[m] = joint.transform(pose[j]).apply(obj.rest_cloud[m])
    return out


def gt_point_transforms(obj: ArticulatedObject, phi_from, phi_to) -> np.ndarray:
    """Per-point ``(N, 3, 4)`` rigid transforms carrying pose ``phi_from`` to ``phi_to``."""
    phi_from = _check_pose(obj, phi_from)
    phi_to = _check_pose(obj, phi_to)
    T = identity_transforms(obj.n_points)
    for j, joint in enumerate(obj.joints):
        rel = joint.transform(phi_to[j]).compose(joint.transform(phi_from[j]).inverse())
        T[obj.part_labels == j] = rel.as_matrix()
    return T


def joint_transform_between(obj: ArticulatedObject, joint: int, phi_from, phi_to) -> RigidTransform:
    phi_from = _check_pose(obj, phi_from)
    phi_to = _check_pose(obj, phi_to)
    jt = obj.joints[joint]
    return jt.transform(phi_to[joint]).compose(jt.transform(phi_from[joint]).inverse())


def _default_delta(obj: ArticulatedObject) -> np.ndarray:
    return np.array([DELTA_MIN[j.kind] for j in obj.joints])


def make_tuple(obj: ArticulatedObject, phi1, phi2, phi3) -> TrainingTuple:
    return TrainingTuple(
        I1=pose_cloud(obj, phi1),
        I2=pose_cloud(obj, phi2),
        I3=pose_cloud(obj, phi3),
        phi1=_check_pose(obj, phi1),
        phi2=_check_pose(obj, phi2),
        phi3=_check_pose(obj, phi3),
        movable_mask=obj.movable_mask.copy(),
        gt_transforms_1to3=gt_point_transforms(obj, phi1, phi3),
        part_labels=obj.part_labels.copy(),
    )


def sample_tuple(obj: ArticulatedObject, rng: np.random.Generator, delta_min=None) -> TrainingTuple:
    """Draw poses uniformly within joint limits, with per-joint ``|phi1 - phi2| >= delta_min``.

    Poses are rounded to float32 so a stored dataset reproduces them exactly.
    """
    lo = np.array([j.pose_min for j in obj.joints])
    hi = np.array([j.pose_max for j in obj.joints])
    delta = _default_delta(obj) if delta_min is None else np.broadcast_to(np.asarray(delta_min, float), lo.shape)

    def draw():
        return rng.uniform(lo, hi).astype(np.float32).astype(np.float64)

    for _ in range(1000):
        phi1, phi2 = draw(), draw()
        if np.all(np.abs(phi1 - phi2) >= delta):
            return make_tuple(obj, phi1, phi2, draw())
    raise ValueError("joint range too narrow for delta_min: 1000 resamples failed")


# ---------------------------------------------------------------------------
# dataset files


def object_seed(dataset_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(dataset_seed), int(index)]).generate_state(1, np.uint64)[0])


@dataclass
class Dataset:
    meta: dict
    objects: list[ArticulatedObject]
    tuples: list[list[TrainingTuple]]

    @property
    def n_points(self) -> int:
        return int(self.meta["n_points"])

    @property
    def n_joints(self) -> int:
        return int(self.meta["joints_per_object"])

    def flat(self) -> list[tuple[int, TrainingTuple]]:
        return [(i, t) for i, ts in enumerate(self.tuples) for t in ts]

    def __len__(self) -> int:
        return sum(len(ts) for ts in self.tuples)


def _record_size(n: int, j: int) -> int:
    return 9 * n * 4 + 3 * j * 4 + n


def _encode_tuple(t: TrainingTuple) -> bytes:
    f = np.concatenate([t.I1.ravel(), t.I2.ravel(), t.I3.ravel(), t.phi1, t.phi2, t.phi3]).astype("<f4")
    return f.tobytes() + np.asarray(t.movable_mask, dtype=np.uint8).tobytes()


def write_dataset(objects, tuples_per_object: int, path, seed: int = 0, delta_min=None, tuples=None) -> Dataset:
    """Sample tuples for each object and write them to ``path``.

    ``tuples`` may be given directly (one list per object) instead of sampling.
    """
    path = Path(path)
    objects = list(objects)
    if not objects:
        raise ValueError("no objects to write")
    cats = {o.category for o in objects}
    joints = {o.n_joints for o in objects}
    npts = {o.n_points for o in objects}
    if len(npts) != 1 or len(joints) != 1:
        raise ValueError("all objects must share point count and joint count")
    if tuples is None:
        rng = np.random.default_rng(seed)
        tuples = [[sample_tuple(o, rng, delta_min) for _ in range(tuples_per_object)] for o in objects]
    path.mkdir(parents=True, exist_ok=True)
    n, J = npts.pop(), joints.pop()
    meta = {
        "format_version": FORMAT_VERSION,
        "category": cats.pop() if len(cats) == 1 else "mixed",
        "n_points": n,
        "n_objects": len(objects),
        "tuples_per_object": tuples_per_object,
        "joints_per_object": J,
    }
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")
    for i, (obj, ts) in enumerate(zip(objects, tuples)):
        desc = {
            "category": obj.category,
            "seed": obj.seed,
            "n_points": n,
            "n_tuples": len(ts),
            "joints": [j.to_dict() for j in obj.joints],
        }
        (path / f"obj_{i}.json").write_text(json.dumps(desc, indent=2, sort_keys=True), encoding="utf-8")
        with open(path / f"obj_{i}.bin", "wb") as fh:
            for t in ts:
                fh.write(_encode_tuple(t))
    return read_dataset(path)


def read_dataset(path) -> Dataset:
    path = Path(path)
    try:
        meta = json.loads((path / "meta.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DatasetFormatError(f"{path}: missing meta.json") from None
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"{path}: malformed meta.json ({e})") from None
    keys = {"format_version", "category", "n_points", "n_objects", "tuples_per_object", "joints_per_object"}
    if not isinstance(meta, dict) or not keys <= meta.keys():
        raise DatasetFormatError(f"{path}: meta.json missing keys {sorted(keys - set(meta))}")
    if meta["format_version"] != FORMAT_VERSION:
        raise DatasetVersionError(f"{path}: format_version {meta['format_version']}, expected {FORMAT_VERSION}")
    n, J = int(meta["n_points"]), int(meta["joints_per_object"])
    rec = _record_size(n, J)
    objects, tuples = [], []
    for i in range(int(meta["n_objects"])):
        try:
            desc = json.loads((path / f"obj_{i}.json").read_text(encoding="utf-8"))
            payload = (path / f"obj_{i}.bin").read_bytes()
        except FileNotFoundError as e:
            raise DatasetTruncatedError(f"{path}: missing object file {e.filename}") from None
        except json.JSONDecodeError as e:
            raise DatasetFormatError(f"{path}: malformed obj_{i}.json ({e})") from None
        if desc.get("n_points") != n or len(desc.get("joints", [])) != J:
            raise DatasetFormatError(f"obj_{i}: header point/joint count disagrees with meta.json")
        expected = rec * int(desc["n_tuples"])
        if len(payload) < expected:
            raise DatasetTruncatedError(f"obj_{i}.bin: {len(payload)} bytes, expected {expected}")
        if len(payload) != expected:
            raise DatasetFormatError(f"obj_{i}.bin: payload size {len(payload)} does not match header ({expected})")
        obj = make_object(desc["category"], desc["seed"], n)
        if [j.to_dict() for j in obj.joints] != desc["joints"]:
            raise DatasetFormatError(f"obj_{i}: joint specs do not match regenerated object")
        ts = []
        for k in range(int(desc["n_tuples"])):
            chunk = payload[k * rec : (k + 1) * rec]
            f = np.frombuffer(chunk[: rec - n], dtype="<f4")
            mask = np.frombuffer(chunk[rec - n :], dtype=np.uint8)
            if np.any(mask > 1) or not np.array_equal(mask.astype(bool), obj.movable_mask):
                raise DatasetFormatError(f"obj_{i} tuple {k}: movable mask corrupt")
            clouds = f[: 9 * n].reshape(3, n, 3)
            phis = f[9 * n :].reshape(3, J)
            p64 = phis.astype(np.float64)
            ts.append(
                TrainingTuple(
                    I1=clouds[0].copy(),
                    I2=clouds[1].copy(),
                    I3=clouds[2].copy(),
                    phi1=phis[0].copy(),
                    phi2=phis[1].copy(),
                    phi3=phis[2].copy(),
                    movable_mask=mask.astype(bool),
                    gt_transforms_1to3=gt_point_transforms(obj, p64[0], p64[2]),
                    part_labels=obj.part_labels.copy(),
                )
            )
        objects.append(obj)
        tuples.append(ts)
    return Dataset(meta, objects, tuples)


def generate_split(category: str, n_objects: int, tuples_per_object: int, n_points: int, seed: int, out_dir, test_fraction: float = 1 / 8):
    """Write ``train/`` and ``test/`` datasets, holding out whole objects (7:1 by default)."""
    out_dir = Path(out_dir)
    objects = [make_object(category, object_seed(seed, i), n_points) for i in range(n_objects)]
    n_test = max(1, int(round(n_objects * test_fraction))) if n_objects > 1 else 0
    n_train = n_objects - n_test
    train = write_dataset(objects[:n_train], tuples_per_object, out_dir / "train", seed=seed)
    test = write_dataset(objects[n_train:], tuples_per_object, out_dir / "test", seed=seed + 1) if n_test else None
    return train, test


def is_nonempty_dir(path) -> bool:
    return os.path.isdir(path) and any(os.scandir(path))
