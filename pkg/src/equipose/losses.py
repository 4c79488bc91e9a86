"""Training losses: focal segmentation, L1 offset losses, the rotation-consistency
penalty on equivariant stacks, and their weighted sum."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import EmptyMaskWarning, LabelOutOfRange
from .geometry import Rotation
from .layers import rotate_feature


@dataclass(frozen=True)
class LossWeights:
    """Weights for the total objective; all must be non-negative."""

    seg: float = 1.0
    kp: float = 1.0
    center: float = 1.0
    so3: float = 0.5

    def __post_init__(self):
        for name in ("seg", "kp", "center", "so3"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"loss weight {name} must be >= 0")

    def as_tuple(self):
        return (self.seg, self.kp, self.center, self.so3)


@dataclass
class LossReport:
    seg: float
    kp: float
    center: float
    so3: float
    total: float

    CSV_HEADER = "step,seg,kp,center,so3,total"

    def csv_row(self, step: int) -> str:
        return f"{step},{self.seg:.12g},{self.kp:.12g},{self.center:.12g},{self.so3:.12g},{self.total:.12g}"


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _check_labels(labels: np.ndarray, n_classes: int):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise LabelOutOfRange(
            f"labels must lie in [0, {n_classes}), got range [{labels.min()}, {labels.max()}]"
        )
    return labels.astype(int)


def focal_loss(logits, labels, gamma: float = 2.0, alpha: float = 0.25) -> float:
    """Mean over points of -alpha * (1 - p_t)^gamma * log p_t."""
    return focal_loss_grad(logits, labels, gamma, alpha)[0]


def focal_loss_grad(logits, labels, gamma: float = 2.0, alpha: float = 0.25):
    """(loss, d loss / d logits)."""
    logits = np.asarray(logits, dtype=np.float64)
    n, k = logits.shape
    labels = _check_labels(labels, k)
    logp = log_softmax(logits)
    p = np.exp(logp)
    idx = np.arange(n)
    pt = p[idx, labels]
    logpt = logp[idx, labels]
    one_minus = 1.0 - pt
    loss = float(np.mean(-alpha * one_minus**gamma * logpt))

    # dL/dp_t, then through the softmax jacobian row of the true class
    if gamma == 0.0:
        d_pt = -alpha / pt
    else:
        d_pt = alpha * gamma * one_minus ** (gamma - 1.0) * logpt - alpha * one_minus**gamma / pt
    onehot = np.zeros_like(p)
    onehot[idx, labels] = 1.0
    d_logits = d_pt[:, None] * pt[:, None] * (onehot - p) / n
    return loss, d_logits


def l1_offset_loss(pred, gt, mask) -> float:
    """Mean over masked points (and keypoint slots) of the L1 norm of the
    per-slot 3-vector error. Empty masks return 0 with EmptyMaskWarning."""
    return l1_offset_loss_grad(pred, gt, mask)[0]


def l1_offset_loss_grad(pred, gt, mask):
    """(loss, d loss / d pred); gradient is zero outside the mask."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"pred/gt shapes differ: {pred.shape} vs {gt.shape}")
    mask = np.asarray(mask, dtype=bool)
    grad = np.zeros_like(pred)
    if not mask.any():
        warnings.warn("offset loss over empty mask; returning 0", EmptyMaskWarning)
        return 0.0, grad
    diff = pred[mask] - gt[mask]
    n_vectors = diff.size // 3
    loss = float(np.abs(diff).sum() / n_vectors)
    grad[mask] = np.sign(diff) / n_vectors
    return loss, grad


def center_loss(pred_center, gt_center, mask) -> float:
    """Identical contract to l1_offset_loss, applied to the center slot."""
    return l1_offset_loss(pred_center, gt_center, mask)


def center_loss_grad(pred_center, gt_center, mask):
    return l1_offset_loss_grad(pred_center, gt_center, mask)


def so3_loss(stack, v, rotation: Rotation) -> float:
    """Mean absolute value of f(v) - f(v @ R) @ R^T over all output entries.

    Vanishes (up to float error) whenever the stack is built purely from the
    equivariant layer kit; strictly positive once any channel-flattening dense
    layer breaks equivariance.
    """
    r = rotation.m
    out_straight = stack.forward(v, ctx={})
    out_rotated = stack.forward(rotate_feature(v, r), ctx={})
    return float(np.mean(np.abs(out_straight - rotate_feature(out_rotated, r.T))))


def so3_loss_grad(stack, v, rotation: Rotation, weight: float = 1.0):
    """(loss, d loss / d v); parameter gradients are accumulated on the stack,
    flowing through both evaluation paths."""
    r = rotation.m
    ctx_straight, ctx_rotated = {}, {}
    out_straight = stack.forward(v, ctx=ctx_straight)
    out_rotated = stack.forward(rotate_feature(v, r), ctx=ctx_rotated)
    diff = out_straight - rotate_feature(out_rotated, r.T)
    loss = float(np.mean(np.abs(diff)))
    g = weight * np.sign(diff) / diff.size
    dv = stack.backward(g, ctx=ctx_straight)
    dv_rotated = stack.backward(-rotate_feature(g, r), ctx=ctx_rotated)
    dv += rotate_feature(dv_rotated, r.T)
    return loss, dv


def total_loss(parts, weights: LossWeights) -> LossReport:
    """Weighted sum of (seg, kp, center, so3) part values."""
    seg, kp, center, so3 = (float(p) for p in parts)
    w = weights.as_tuple()
    total = w[0] * seg + w[1] * kp + w[2] * center + w[3] * so3
    return LossReport(seg=seg, kp=kp, center=center, so3=so3, total=total)
