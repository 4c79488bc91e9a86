"""Synthetic object models and labeled scenes for desk-scale training and
evaluation: surface-sampled boxes, cylinders, and smooth random blobs with
per-vertex colors, farthest-point keypoints, and scene rendering with sector
occlusion, position noise, and background clutter."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .backproject import PointCloud
from .errors import ConfigInvalid, RegistryMiss, TooFewVertices
from .geometry import RigidTransform, Rotation, sample_uniform_rotation
from .metrics import model_diameter


@dataclass
class ObjectModel:
    id: int
    vertices: np.ndarray  # (m, 3) object frame, meters
    keypoints: np.ndarray  # (M, 3) object frame
    center: np.ndarray  # (3,)
    diameter: float
    colors: np.ndarray = None  # (m, 3) in [0, 1]
    symmetric: bool = False
    kind: str = ""

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64).reshape(-1, 3)
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)


def select_keypoints(model, m: int) -> np.ndarray:
    """Farthest point sampling over the vertices, seeded at the vertex
    farthest from the centroid; deterministic (ties resolve to the lowest
    index)."""
    verts = np.asarray(getattr(model, "vertices", model), dtype=np.float64).reshape(-1, 3)
    if m > len(verts):
        raise TooFewVertices(f"requested {m} keypoints from {len(verts)} vertices")
    if m < 1:
        raise ValueError("need at least one keypoint")
    centroid = verts.mean(axis=0)
    chosen = [int(np.argmax(np.linalg.norm(verts - centroid, axis=1)))]
    dist = np.linalg.norm(verts - verts[chosen[0]], axis=1)
    while len(chosen) < m:
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(verts - verts[nxt], axis=1))
    return verts[chosen].copy()


DEFAULT_SIZES = {
    "box": (0.12, 0.16, 0.22),
    "cylinder": (0.055, 0.16),
    "blob": 0.09,
}

BASE_COLORS = {
    "box": (0.80, 0.30, 0.20),
    "cylinder": (0.20, 0.70, 0.30),
    "blob": (0.25, 0.35, 0.80),
}


def _box_surface(n: int, extents, rng: np.random.Generator) -> np.ndarray:
    ex, ey, ez = extents
    half = np.array([ex, ey, ez]) / 2.0
    corners = np.array(
        [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=np.float64
    ) * half
    n_sample = max(n - len(corners), 0)
    areas = np.array([ey * ez, ey * ez, ex * ez, ex * ez, ex * ey, ex * ey])
    counts = rng.multinomial(n_sample, areas / areas.sum())
    pts = []
    for face, count in enumerate(counts):
        axis = face // 2
        sign = 1.0 if face % 2 else -1.0
        p = rng.uniform(-half, half, size=(count, 3))
        p[:, axis] = sign * half[axis]
        pts.append(p)
    return np.vstack([corners] + pts)


def _cylinder_surface(n: int, size, rng: np.random.Generator) -> np.ndarray:
    radius, height = size
    side_area = 2.0 * np.pi * radius * height
    cap_area = np.pi * radius**2
    counts = rng.multinomial(n, np.array([side_area, cap_area, cap_area]) / (side_area + 2 * cap_area))
    theta = rng.uniform(0.0, 2.0 * np.pi, counts[0])
    z = rng.uniform(-height / 2.0, height / 2.0, counts[0])
    side = np.column_stack([radius * np.cos(theta), radius * np.sin(theta), z])
    caps = []
    for sign, count in zip((1.0, -1.0), counts[1:]):
        r = radius * np.sqrt(rng.uniform(0.0, 1.0, count))
        phi = rng.uniform(0.0, 2.0 * np.pi, count)
        caps.append(
            np.column_stack([r * np.cos(phi), r * np.sin(phi), np.full(count, sign * height / 2.0)])
        )
    return np.vstack([side] + caps)


def _blob_surface(n: int, base_radius: float, rng: np.random.Generator) -> np.ndarray:
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    lobes = rng.normal(size=(6, 3))
    lobes /= np.linalg.norm(lobes, axis=1, keepdims=True)
    amp = rng.uniform(-0.25, 0.25, size=6)
    sharp = rng.uniform(2.0, 6.0, size=6)
    radial = 1.0 + sum(
        amp[j] * np.exp(sharp[j] * (dirs @ lobes[j] - 1.0)) for j in range(6)
    )
    return base_radius * radial[:, None] * dirs


def generate_object(
    kind: str,
    n_vertices: int = 600,
    seed: int = 0,
    size=None,
    class_id: int = 1,
    n_keypoints: int = 8,
    symmetric: bool = None,
) -> ObjectModel:
    """Surface-sampled model of the given kind, deterministic per seed."""
    if n_vertices < 50:
        raise ConfigInvalid("n_vertices must be at least 50")
    if kind not in DEFAULT_SIZES:
        raise ConfigInvalid(f"unknown object kind {kind!r}")
    rng = np.random.default_rng(seed)
    size = DEFAULT_SIZES[kind] if size is None else size
    if kind == "box":
        verts = _box_surface(n_vertices, size, rng)
        scale = max(size) / 2.0
    elif kind == "cylinder":
        verts = _cylinder_surface(n_vertices, size, rng)
        scale = max(size[0], size[1] / 2.0)
    else:
        verts = _blob_surface(n_vertices, size, rng)
        scale = size
    base = np.asarray(BASE_COLORS[kind])
    if kind == "blob":
        tint = Rotation(sample_uniform_rotation(rng).m)
        dirs = verts / np.linalg.norm(verts, axis=1, keepdims=True)
        colors = 0.5 + 0.5 * tint.apply(dirs)
    else:
        colors = base + 0.25 * verts / scale
    colors = np.clip(colors, 0.0, 1.0)
    if symmetric is None:
        symmetric = kind in ("box", "cylinder")
    return ObjectModel(
        id=class_id,
        vertices=verts,
        keypoints=select_keypoints(verts, n_keypoints),
        center=verts.mean(axis=0),
        diameter=model_diameter(verts),
        colors=colors,
        symmetric=symmetric,
        kind=kind,
    )


def make_default_models(seed: int = 0, n_vertices: int = 600, n_keypoints: int = 8):
    """Three-object family: a box and a cylinder (symmetric) plus a blob."""
    return [
        generate_object("box", n_vertices, seed=seed + 1, class_id=1, n_keypoints=n_keypoints),
        generate_object("cylinder", n_vertices, seed=seed + 2, class_id=2, n_keypoints=n_keypoints),
        generate_object("blob", n_vertices, seed=seed + 3, class_id=3, n_keypoints=n_keypoints),
    ]


@dataclass(frozen=True)
class SceneConfig:
    """Scene recipe; occlusion may be a fixed fraction or a (lo, hi) range."""

    noise_sigma: float = 0.0
    occlusion: object = 0.0
    n_background: int = 0
    n_instances: int = 1
    max_object_points: int = None
    translation_low: tuple = (-0.12, -0.12, 0.45)
    translation_high: tuple = (0.12, 0.12, 0.75)
    background_margin: float = 0.25
    poses: list = None  # optional [(class_id, RigidTransform)]

    def __post_init__(self):
        occ = self.occlusion
        lo, hi = (occ, occ) if np.isscalar(occ) else (occ[0], occ[1])
        if not (0.0 <= lo <= hi <= 0.9):
            raise ConfigInvalid("occlusion fraction must lie in [0, 0.9]")
        if self.noise_sigma < 0.0:
            raise ConfigInvalid("noise sigma must be non-negative")
        if self.n_background < 0:
            raise ConfigInvalid("background point count must be non-negative")

    def draw_occlusion(self, rng: np.random.Generator) -> float:
        if np.isscalar(self.occlusion):
            return float(self.occlusion)
        return float(rng.uniform(self.occlusion[0], self.occlusion[1]))


@dataclass
class SceneSample:
    """One labeled scene: cloud with colors, per-point class labels, ground
    truth offsets to each instance's keypoints (last slot is the center),
    and the generating poses."""

    cloud: PointCloud
    labels: np.ndarray  # (N,) ints, 0 = background
    gt_offsets: np.ndarray  # (N, M + 1, 3)
    gt_poses: list  # [(class_id, RigidTransform)]
    scene_seed: int

    @property
    def n_keypoints(self) -> int:
        return self.gt_offsets.shape[1] - 1


def _sector_occlusion(points: np.ndarray, center: np.ndarray, fraction: float, rng) -> np.ndarray:
    """Indices KEPT after removing a contiguous angular sector of points
    around a random axis through the center; the removed count is exact."""
    m = len(points)
    n_remove = int(round(fraction * m))
    if n_remove == 0:
        return np.arange(m)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    helper = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(axis, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(axis, e1)
    rel = points - center
    angles = np.arctan2(rel @ e2, rel @ e1)
    order = np.argsort(angles, kind="stable")
    start = rng.integers(0, m)
    removed = order[(start + np.arange(n_remove)) % m]
    keep = np.ones(m, dtype=bool)
    keep[removed] = False
    return np.nonzero(keep)[0]


def render_scene(objects, config: SceneConfig, seed: int) -> SceneSample:
    """Compose posed object models into a labeled scene.

    Offsets are computed from the noise-free surface points, then Gaussian
    position noise is added to the observed points, so each point's votes aim
    at the true transformed keypoints. Background clutter is appended with
    label 0 and zero offsets.
    """
    rng = np.random.default_rng(seed)
    by_id = {obj.id: obj for obj in objects}
    n_kp = objects[0].keypoints.shape[0]

    if config.poses is not None:
        instances = list(config.poses)
    else:
        instances = []
        for _ in range(config.n_instances):
            obj = objects[rng.integers(0, len(objects))]
            rot = sample_uniform_rotation(rng)
            t = rng.uniform(config.translation_low, config.translation_high)
            instances.append((obj.id, RigidTransform(rot, t)))

    points, colors, labels, offsets = [], [], [], []
    for class_id, pose in instances:
        obj = by_id[class_id]
        verts = obj.vertices
        cols = obj.colors
        if config.max_object_points is not None and len(verts) > config.max_object_points:
            pick = rng.choice(len(verts), size=config.max_object_points, replace=False)
            verts, cols = verts[pick], cols[pick]
        cam_pts = pose.apply(verts)
        keep = _sector_occlusion(cam_pts, pose.apply(obj.center), config.draw_occlusion(rng), rng)
        cam_pts, cols = cam_pts[keep], cols[keep]
        kp_cam = pose.apply(np.vstack([obj.keypoints, obj.center]))
        points.append(cam_pts)
        colors.append(cols)
        labels.append(np.full(len(cam_pts), class_id, dtype=int))
        offsets.append(kp_cam[None, :, :] - cam_pts[:, None, :])

    if config.n_background > 0:
        centers = np.array([pose.translation for _, pose in instances])
        lo = centers.min(axis=0) - config.background_margin
        hi = centers.max(axis=0) + config.background_margin
        bg = rng.uniform(lo, hi, size=(config.n_background, 3))
        points.append(bg)
        colors.append(rng.uniform(0.0, 1.0, size=(config.n_background, 3)))
        labels.append(np.zeros(config.n_background, dtype=int))
        offsets.append(np.zeros((config.n_background, n_kp + 1, 3)))

    points = np.vstack(points)
    colors = np.vstack(colors)
    labels = np.concatenate(labels)
    offsets = np.vstack(offsets)
    if config.noise_sigma > 0.0:
        points = points + rng.normal(0.0, config.noise_sigma, size=points.shape)
    perm = rng.permutation(len(points))
    return SceneSample(
        cloud=PointCloud(points=points[perm], attributes=colors[perm]),
        labels=labels[perm],
        gt_offsets=offsets[perm],
        gt_poses=instances,
        scene_seed=seed,
    )


# on-disk formats -----------------------------------------------------------


class Registry:
    """Object models keyed by class id."""

    def __init__(self, models):
        self.models = {m.id: m for m in models}

    def lookup(self, class_id: int) -> ObjectModel:
        if class_id not in self.models:
            raise RegistryMiss(f"no model registered for class {class_id}")
        return self.models[class_id]

    def __getitem__(self, class_id: int) -> ObjectModel:
        return self.lookup(class_id)

    def __iter__(self):
        return iter(sorted(self.models))

    def __len__(self):
        return len(self.models)

    def class_ids(self):
        return sorted(self.models)

    def n_keypoints(self) -> int:
        return next(iter(self.models.values())).keypoints.shape[0]


def save_registry(registry: Registry, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    for cls in registry:
        model = registry[cls]
        cloud = PointCloud(points=model.vertices, attributes=model.colors)
        from .backproject import write_ply_cloud

        write_ply_cloud(os.path.join(directory, f"model_{cls:03d}.ply"), cloud)
        meta = {
            "id": model.id,
            "kind": model.kind,
            "symmetric": model.symmetric,
            "keypoints": model.keypoints.tolist(),
            "center": model.center.tolist(),
            "diameter": model.diameter,
        }
        with open(os.path.join(directory, f"model_{cls:03d}.json"), "w") as f:
            json.dump(meta, f, indent=2)
            f.write("\n")


def load_registry(directory) -> Registry:
    from .backproject import read_ply_cloud

    models = []
    for name in sorted(os.listdir(directory)):
        if not (name.startswith("model_") and name.endswith(".json")):
            continue
        with open(os.path.join(directory, name)) as f:
            meta = json.load(f)
        cloud = read_ply_cloud(os.path.join(directory, name[:-5] + ".ply"))
        models.append(
            ObjectModel(
                id=int(meta["id"]),
                vertices=cloud.points,
                keypoints=np.asarray(meta["keypoints"]),
                center=np.asarray(meta["center"]),
                diameter=float(meta["diameter"]),
                colors=cloud.attributes,
                symmetric=bool(meta["symmetric"]),
                kind=meta.get("kind", ""),
            )
        )
    if not models:
        raise RegistryMiss(f"no model files found in {directory}")
    return Registry(models)


def save_scene(path_stem, sample: SceneSample) -> None:
    """ASCII PLY (points, colors, label, offsets) plus a JSON pose sidecar."""
    n = len(sample.cloud)
    n_slots = sample.gt_offsets.shape[1]
    props = ["x", "y", "z", "r", "g", "b", "label"]
    for j in range(n_slots):
        props += [f"off_{j}_x", f"off_{j}_y", f"off_{j}_z"]
    with open(str(path_stem) + ".ply", "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {n}\n")
        for p in props:
            f.write(f"property float64 {p}\n")
        f.write("end_header\n")
        table = np.hstack(
            [
                sample.cloud.points,
                sample.cloud.attributes[:, :3],
                sample.labels[:, None].astype(np.float64),
                sample.gt_offsets.reshape(n, -1),
            ]
        )
        for row in table:
            f.write(" ".join(f"{v:.17g}" for v in row) + "\n")
    sidecar = {
        "scene_seed": sample.scene_seed,
        "n_keypoints": sample.n_keypoints,
        "poses": [
            {"class": int(cls), "rotation": pose.rotation.m.tolist(), "translation": pose.translation.tolist()}
            for cls, pose in sample.gt_poses
        ],
    }
    with open(str(path_stem) + ".json", "w") as f:
        json.dump(sidecar, f, indent=2)
        f.write("\n")


def load_scene(path_stem) -> SceneSample:
    from .backproject import _read_ascii_ply

    names, rows = _read_ascii_ply(str(path_stem) + ".ply")
    with open(str(path_stem) + ".json") as f:
        sidecar = json.load(f)
    n_slots = sidecar["n_keypoints"] + 1
    pts = rows[:, :3]
    cols = rows[:, 3:6]
    labels = rows[:, names.index("label")].astype(int)
    off_start = names.index("off_0_x")
    offsets = rows[:, off_start : off_start + 3 * n_slots].reshape(len(rows), n_slots, 3)
    poses = [
        (int(p["class"]), RigidTransform(Rotation(np.asarray(p["rotation"])), np.asarray(p["translation"])))
        for p in sidecar["poses"]
    ]
    return SceneSample(
        cloud=PointCloud(points=pts, attributes=cols),
        labels=labels,
        gt_offsets=offsets,
        gt_poses=poses,
        scene_seed=int(sidecar["scene_seed"]),
    )
