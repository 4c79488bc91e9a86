"""Full network assembly: point-cloud lift, equivariant trunk, invariant
conversion, appearance encoder, and the two fusion heads, with an analytic
backward pass through the whole graph."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from .backproject import PointCloud
from .errors import ConfigInvalid
from .geometry import Rotation
from .heads import AppearanceEncoder, KpHead, SegHead, appearance_input
from .layers import (
    Layer,
    Sequential,
    VNBatchNorm,
    VNInvariant,
    VNLinear,
    VNPoolConcat,
    VNReLU,
    assign_params,
    init_layer_params,
    load_params,
    named_params,
    rotate_feature,
    save_params,
)

LIFT_CHANNELS = 8


@dataclass(frozen=True)
class ModelConfig:
    n_classes: int
    n_keypoints: int = 8
    lift_neighbors: int = 16
    lift_scales: tuple = (10.0, 60.0, 240.0, 600.0, 6000.0)
    lift_cap: float = 2.0
    vn_widths: tuple = (16, 32, 32)
    batch_norm: bool = False
    pool_mode: str = "every"  # every | final | none
    invariant_branch: int = 8
    invariant_hidden: int = 64
    invariant_out: int = 64
    app_hidden: int = 32
    app_out: int = 32
    head_hidden: int = 128

    def __post_init__(self):
        if self.n_classes < 1:
            raise ConfigInvalid("n_classes must be at least 1")
        if self.n_keypoints < 1:
            raise ConfigInvalid("n_keypoints must be at least 1")
        if self.pool_mode not in ("every", "final", "none"):
            raise ConfigInvalid(f"unknown pool_mode {self.pool_mode!r}")
        if len(self.lift_scales) != LIFT_CHANNELS - 3:
            raise ConfigInvalid(f"lift_scales must have {LIFT_CHANNELS - 3} entries")
        if not self.vn_widths or any(w < 1 for w in self.vn_widths):
            raise ConfigInvalid("vn_widths must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["lift_scales"] = tuple(d["lift_scales"])
        d["vn_widths"] = tuple(d["vn_widths"])
        return cls(**d)


def lift_cloud(
    points: np.ndarray,
    attributes: np.ndarray = None,
    neighbors: int = 16,
    scales=(10.0, 60.0, 240.0, 600.0, 6000.0),
    cap: float = 2.0,
) -> np.ndarray:
    """Per-point equivariant input channels, shape (N, 8, 3).

    Geometry channels: position centered on the cloud mean, mean edge vectors
    to the nearest k and 4k neighbours (two scales of local geometry), and two
    cross products tying them together. Color channels: the centered direction
    scaled by each (attribute - 1/2); rotation-invariant scalars riding on an
    equivariant direction, which lets the trunk's invariant gates read
    appearance without breaking equivariance. Channel norms saturate at `cap`
    (direction kept; the rescale reads only the rotation-invariant norm) so
    far-flung clutter cannot dominate pooled statistics. neighbors must stay
    well below N: once the neighbour set is every other point, the edge
    channels collapse onto the centered one and the per-point frame
    degenerates.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = points.shape[0]
    if n == 0:
        return np.zeros((0, LIFT_CHANNELS, 3))
    centered = points - points.mean(axis=0)
    k_near = min(neighbors, n - 1)
    k_far = min(4 * neighbors, n - 1)
    if k_near >= 1:
        tree = cKDTree(points)
        _, idx = tree.query(points, k=k_far + 1)
        idx = np.atleast_2d(idx)
        edge_near = points[idx[:, 1 : k_near + 1]].mean(axis=1) - points
        edge_far = points[idx[:, 1:]].mean(axis=1) - points
    else:
        edge_near = np.zeros_like(points)
        edge_far = np.zeros_like(points)
    radial = centered / np.maximum(np.linalg.norm(centered, axis=1, keepdims=True), 1e-12)
    if attributes is not None and attributes.shape[1] >= 3:
        tint = np.asarray(attributes, dtype=np.float64)[:, :3] - 0.5
    else:
        tint = np.zeros((n, 3))
    v = np.stack(
        [
            scales[0] * centered,
            scales[1] * edge_far,
            scales[2] * edge_near,
            scales[3] * np.cross(centered, edge_far),
            scales[4] * np.cross(edge_far, edge_near),
            2.0 * tint[:, 0:1] * radial,
            2.0 * tint[:, 1:2] * radial,
            2.0 * tint[:, 2:3] * radial,
        ],
        axis=1,
    )
    if cap is not None:
        norms = np.linalg.norm(v, axis=-1, keepdims=True)
        v = v * np.minimum(1.0, cap / np.maximum(norms, 1e-30))
    return v


@dataclass
class ModelOutputs:
    equivariant: np.ndarray  # (N, C, 3)
    invariant: np.ndarray  # (N, S)
    appearance: np.ndarray  # (N, A)
    logits: np.ndarray  # (N, K)
    offsets: np.ndarray  # (N, M + 1, 3)


class PoseModel(Layer):
    """Trunk of alternating channel-mix (VNLinear) and direction-gated
    truncation (VNReLU) blocks, optional norm layers, and a pooled global
    channel concatenated back per point; heads fan out from the trunk output.
    """

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        blocks = []
        c = LIFT_CHANNELS
        for i, width in enumerate(cfg.vn_widths):
            blocks.append(VNLinear(c, width))
            if cfg.batch_norm:
                blocks.append(VNBatchNorm(width))
            blocks.append(VNReLU(width, width))
            c = width
            last = i == len(cfg.vn_widths) - 1
            if cfg.pool_mode == "every" or (cfg.pool_mode == "final" and last):
                blocks.append(VNPoolConcat())
                c *= 2
        self.trunk_channels = c
        self.backbone = Sequential(blocks)
        self.invariant = VNInvariant(
            c,
            branch_a=cfg.invariant_branch,
            branch_b=cfg.invariant_branch,
            hidden=cfg.invariant_hidden,
            out=cfg.invariant_out,
        )
        self.appearance = AppearanceEncoder(cfg.app_hidden, cfg.app_out)
        self.seg_head = SegHead(cfg.invariant_out, cfg.app_out, cfg.head_hidden, cfg.n_classes)
        self.kp_head = KpHead(c, cfg.app_out, cfg.head_hidden, cfg.n_keypoints)

    def children(self):
        return [
            ("backbone", self.backbone),
            ("invariant", self.invariant),
            ("appearance", self.appearance),
            ("seg", self.seg_head),
            ("kp", self.kp_head),
        ]

    def lift(self, points, attributes=None) -> np.ndarray:
        return lift_cloud(
            points, attributes, self.cfg.lift_neighbors, self.cfg.lift_scales, self.cfg.lift_cap
        )

    def lift_from_cloud(self, cloud: PointCloud) -> np.ndarray:
        return self.lift(cloud.points, cloud.attributes)

    def appearance_from_cloud(self, cloud: PointCloud) -> np.ndarray:
        return appearance_input(cloud)

    def forward(self, v, app_in, train=False, ctx=None) -> ModelOutputs:
        """v: lifted feature (N, 3, 3); app_in: (N, 5) appearance inputs."""
        cache = self._new_cache(ctx)
        for key in ("backbone", "invariant", "appearance", "seg", "kp"):
            cache[key] = {}
        equi = self.backbone.forward(v, train=train, ctx=cache["backbone"])
        inv = self.invariant.forward(equi, train=train, ctx=cache["invariant"])
        app = self.appearance.forward(app_in, train=train, ctx=cache["appearance"])
        logits = self.seg_head.forward(inv, app, train=train, ctx=cache["seg"])
        offsets = self.kp_head.forward(equi, app, train=train, ctx=cache["kp"])
        return ModelOutputs(equi, inv, app, logits, offsets)

    def backward(self, d_logits, d_offsets, ctx=None):
        """Returns (d v, d app_in) and accumulates parameter gradients."""
        cache = self._get_cache(ctx)
        d_inv, d_app_seg = self.seg_head.backward(d_logits, ctx=cache["seg"])
        d_equi_kp, d_app_kp = self.kp_head.backward(d_offsets, ctx=cache["kp"])
        d_equi_inv = self.invariant.backward(d_inv, ctx=cache["invariant"])
        dv = self.backbone.backward(d_equi_kp + d_equi_inv, ctx=cache["backbone"])
        d_app_in = self.appearance.backward(d_app_seg + d_app_kp, ctx=cache["appearance"])
        return dv, d_app_in

    # keypoint-path rotation consistency ------------------------------------

    def kp_path_forward(self, v, app_in, train=False, ctx=None) -> np.ndarray:
        cache = self._new_cache(ctx)
        cache["backbone"] = {}
        cache["appearance"] = {}
        cache["kp"] = {}
        equi = self.backbone.forward(v, train=train, ctx=cache["backbone"])
        app = self.appearance.forward(app_in, train=train, ctx=cache["appearance"])
        return self.kp_head.forward(equi, app, train=train, ctx=cache["kp"])

    def kp_path_backward(self, d_offsets, ctx):
        cache = self._get_cache(ctx)
        d_equi, d_app = self.kp_head.backward(d_offsets, ctx=cache["kp"])
        dv = self.backbone.backward(d_equi, ctx=cache["backbone"])
        d_app_in = self.appearance.backward(d_app, ctx=cache["appearance"])
        return dv, d_app_in

    def kp_consistency_residual(self, v, app_in, rotation: Rotation, train=False) -> float:
        """Mean |offsets(v) - offsets(v @ R) @ R^T| over the keypoint path."""
        r = rotation.m
        straight = self.kp_path_forward(v, app_in, train=train, ctx={})
        rotated = self.kp_path_forward(rotate_feature(v, r), app_in, train=train, ctx={})
        return float(np.mean(np.abs(straight - rotate_feature(rotated, r.T))))

    def so3_term(self, v, app_in, rotation: Rotation, weight: float = 1.0, train=False):
        """Rotation-consistency penalty on the keypoint path; accumulates
        weighted parameter gradients through both evaluation paths and
        returns (value, d v, d app_in)."""
        r = rotation.m
        ctx_straight, ctx_rotated = {}, {}
        straight = self.kp_path_forward(v, app_in, train=train, ctx=ctx_straight)
        rotated = self.kp_path_forward(rotate_feature(v, r), app_in, train=train, ctx=ctx_rotated)
        diff = straight - rotate_feature(rotated, r.T)
        value = float(np.mean(np.abs(diff)))
        g = weight * np.sign(diff) / diff.size
        dv, d_app = self.kp_path_backward(g, ctx_straight)
        dv2, d_app2 = self.kp_path_backward(-rotate_feature(g, r), ctx_rotated)
        dv += rotate_feature(dv2, r.T)
        d_app += d_app2
        return value, dv, d_app


def init_model(cfg: ModelConfig, seed: int) -> PoseModel:
    model = PoseModel(cfg)
    init_layer_params(model, np.random.default_rng(seed))
    return model


def save_model(model: PoseModel, path) -> None:
    """Parameter container plus the architecture config in the manifest."""
    save_params(named_params(model), path)
    manifest_path = str(path) + ".json"
    with open(manifest_path) as f:
        manifest = json.load(f)
    manifest["model_config"] = model.cfg.to_dict()
    with open(manifest_path, "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")


def load_model(path) -> PoseModel:
    with open(str(path) + ".json") as f:
        manifest = json.load(f)
    cfg = ModelConfig.from_dict(manifest["model_config"])
    model = PoseModel(cfg)
    assign_params(model, load_params(path))
    return model
