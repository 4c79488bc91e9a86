"""Pose evaluation metrics: vertex-pair ADD, nearest-point ADD-S, the capped
accuracy-threshold AUC, and the 10%-of-diameter hit criterion."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyInput
from .geometry import RigidTransform


def _vertices(model_or_vertices) -> np.ndarray:
    v = getattr(model_or_vertices, "vertices", model_or_vertices)
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise EmptyInput("model has no vertices")
    return v.reshape(-1, 3)


def add(gt: RigidTransform, pred: RigidTransform, model) -> float:
    """Mean distance between paired model vertices under the two poses."""
    verts = _vertices(model)
    return float(np.linalg.norm(gt.apply(verts) - pred.apply(verts), axis=1).mean())


def add_s(gt: RigidTransform, pred: RigidTransform, model, accelerated: bool = True) -> float:
    """Mean nearest-point distance from GT-posed vertices to predicted-posed ones."""
    verts = _vertices(model)
    a = gt.apply(verts)
    b = pred.apply(verts)
    if accelerated:
        dist, _ = cKDTree(b).query(a, k=1)
        return float(np.mean(dist))
    return add_s_brute(gt, pred, model)


def add_s_brute(gt: RigidTransform, pred: RigidTransform, model, chunk: int = 512) -> float:
    """O(m^2) reference: explicit pairwise distances, min over the second pose."""
    verts = _vertices(model)
    a = gt.apply(verts)
    b = pred.apply(verts)
    mins = np.empty(len(a))
    for start in range(0, len(a), chunk):
        block = a[start : start + chunk]
        d = np.sqrt(((block[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1))
        mins[start : start + chunk] = d.min(axis=1)
    return float(mins.mean())


def auc(distances, max_threshold: float = 0.1) -> float:
    """Exact area, in percent, under the accuracy-vs-threshold step curve on
    [0, max_threshold], normalized by max_threshold. Distances above the cap
    (including inf for missed detections) contribute zero.
    """
    d = np.asarray(distances, dtype=np.float64)
    if d.size == 0:
        raise EmptyInput("auc of an empty distance list")
    if np.any(d < 0.0):
        raise ValueError("distances must be non-negative")
    mass = np.clip(max_threshold - d, 0.0, None)
    return float(100.0 * mass.sum() / (d.size * max_threshold))


def model_diameter(model_or_vertices, chunk: int = 512) -> float:
    """Exact max pairwise vertex distance, O(m^2)."""
    verts = _vertices(model_or_vertices)
    best = 0.0
    for start in range(0, len(verts), chunk):
        block = verts[start : start + chunk]
        d2 = ((block[:, None, :] - verts[None, :, :]) ** 2).sum(axis=-1)
        best = max(best, float(d2.max()))
    return float(np.sqrt(best))


def add_s_01d_hit(distance: float, model) -> bool:
    """True iff the distance is below 10% of the model diameter."""
    return bool(distance < 0.1 * model.diameter)


@dataclass
class ObjectMetrics:
    class_id: int
    symmetric: bool
    add_values: list = field(default_factory=list)
    add_s_values: list = field(default_factory=list)

    def matched(self) -> np.ndarray:
        """ADD(-S): nearest-point distances for symmetric objects, paired otherwise."""
        return np.asarray(self.add_s_values if self.symmetric else self.add_values)

    @property
    def n_samples(self) -> int:
        return len(self.add_values)


@dataclass
class PoseMetricsReport:
    per_object: dict  # class_id -> ObjectMetrics
    diameters: dict  # class_id -> float

    def adds_auc(self, class_id: int, cap: float = 0.1) -> float:
        return auc(self.per_object[class_id].add_s_values, cap)

    def add_s_auc(self, class_id: int, cap: float = 0.1) -> float:
        return auc(self.per_object[class_id].matched(), cap)

    def hit_rate_01d(self, class_id: int) -> float:
        m = self.per_object[class_id]
        d = self.diameters[class_id]
        matched = m.matched()
        return float(100.0 * np.mean(matched < 0.1 * d))

    def rows(self):
        for cls in sorted(self.per_object):
            m = self.per_object[cls]
            yield {
                "object": cls,
                "adds_auc": self.adds_auc(cls),
                "add_s_auc": self.add_s_auc(cls),
                "hit_rate_01d": self.hit_rate_01d(cls),
                "n_samples": m.n_samples,
            }

    def mean_hit_rate(self) -> float:
        return float(np.mean([r["hit_rate_01d"] for r in self.rows()]))


def evaluate_dataset(detections_by_scene, gt_by_scene, registry) -> PoseMetricsReport:
    """Aggregate per-object distances over scenes.

    detections_by_scene: per scene, a list of InstanceDetection.
    gt_by_scene: per scene, a list of (class_id, RigidTransform).
    Detections are matched to GT by class within the scene (best
    inlier_fraction when several); a GT instance without a detection counts
    as a miss at every threshold via an infinite distance.
    """
    per_object: dict = {}
    diameters: dict = {}
    for detections, gts in zip(detections_by_scene, gt_by_scene):
        for cls, gt_pose in gts:
            model = registry.lookup(cls)
            if cls not in per_object:
                per_object[cls] = ObjectMetrics(class_id=cls, symmetric=model.symmetric)
                diameters[cls] = model.diameter
            candidates = [d for d in detections if d.class_id == cls]
            if candidates:
                best = max(candidates, key=lambda d: d.inlier_fraction)
                per_object[cls].add_values.append(add(gt_pose, best.pose, model))
                per_object[cls].add_s_values.append(add_s(gt_pose, best.pose, model))
            else:
                per_object[cls].add_values.append(np.inf)
                per_object[cls].add_s_values.append(np.inf)
    return PoseMetricsReport(per_object=per_object, diameters=diameters)


def report_to_csv(report: PoseMetricsReport, path) -> None:
    with open(path, "w") as f:
        f.write("object,adds_auc,add_s_auc,hit_rate_01d,n_samples\n")
        for row in report.rows():
            f.write(
                f"{row['object']},{row['adds_auc']:.6f},{row['add_s_auc']:.6f},"
                f"{row['hit_rate_01d']:.6f},{row['n_samples']}\n"
            )


def distances_to_json(report: PoseMetricsReport, path) -> None:
    payload = {
        str(cls): {
            "symmetric": m.symmetric,
            "add": [float(v) for v in m.add_values],
            "add_s": [float(v) for v in m.add_s_values],
        }
        for cls, m in report.per_object.items()
    }
    with open(path, "w") as f:
        json.dump(payload, f, indent=2)
        f.write("\n")
