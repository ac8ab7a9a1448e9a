"""Scale-regularized landmark regression loss, its closed-form gradients, and PDL.

Array conventions (leading batch dimensions are allowed everywhere):

* ``gt``, ``pred_rel``: ``[..., J, 2]`` normalized coordinates
* ``visible``: ``[..., J]`` booleans
* ``thetas``: ``[..., J, 2, 3]`` affine matrices ``[a | t]``
* ``area``: ``[...]`` convex-hull area of the visible ground truth
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, DimensionError
from .geometry import apply_matrices, matrices_adjugate_transpose, matrices_det

# PDL threshold at the reference 512-pixel resolution
REFERENCE_THRESHOLD_PX = 35.0
REFERENCE_EXTENT = 512


def pdl_threshold(width: int) -> float:
    """Distance threshold scaled linearly from 35 px at 512 px."""
    return REFERENCE_THRESHOLD_PX * width / REFERENCE_EXTENT


@dataclass
class ScaleRegConfig:
    lam: float = 0.4
    enabled: bool = True
    # invisible landmarks are kept in the scale term unless this is set
    mask_invisible: bool = False
    # fewer visible landmarks than this and the sample gets no scale term
    min_visible: int = 3

    def __post_init__(self):
        if not 0.0 < self.lam <= 1.0:
            raise ValueError(f"lambda must lie in (0, 1], got {self.lam}")


@dataclass
class LossBreakdown:
    regression: float
    scale: float
    total: float
    per_landmark: np.ndarray  # [J, 2]: (regression term, scale term)


def _check(gt, visible, pred_rel, thetas):
    if gt.shape != pred_rel.shape or gt.shape[-1] != 2:
        raise DimensionError(f"gt {gt.shape} vs pred_rel {pred_rel.shape}")
    if visible.shape != gt.shape[:-1]:
        raise DimensionError(f"visible {visible.shape} vs gt {gt.shape}")
    if thetas.shape != gt.shape[:-1] + (2, 3):
        raise DimensionError(f"thetas {thetas.shape} vs gt {gt.shape}")


def regression_terms(gt, visible, pred_rel, thetas) -> np.ndarray:
    """Per-landmark ``0.5 * |l - theta l'|^2``, zero where invisible."""
    gt, pred_rel, thetas = (np.asarray(x, dtype=np.float64) for x in (gt, pred_rel, thetas))
    visible = np.asarray(visible, dtype=bool)
    _check(gt, visible, pred_rel, thetas)
    r = gt - apply_matrices(thetas, pred_rel)
    return np.where(visible, 0.5 * (r * r).sum(axis=-1), 0.0)


def regression_loss(gt, visible, pred_rel, thetas):
    return regression_terms(gt, visible, pred_rel, thetas).sum(axis=-1)


def convex_hull_area(points, visible=None) -> float:
    """Area of the convex hull of the visible points (monotone chain + shoelace)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if visible is not None:
        pts = pts[np.asarray(visible, dtype=bool).reshape(-1)]
    if len(pts) == 0:
        raise DegenerateInputError("convex hull of zero visible landmarks")
    uniq = sorted(set(map(tuple, pts.tolist())))
    if len(uniq) < 3:
        return 0.0

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list = []
    for p in uniq:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(uniq):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    hull = lower[:-1] + upper[:-1]
    if len(hull) < 3:
        return 0.0
    xs = np.array([p[0] for p in hull])
    ys = np.array([p[1] for p in hull])
    return float(0.5 * abs(np.dot(xs, np.roll(ys, -1)) - np.dot(ys, np.roll(xs, -1))))


def _scale_mask(visible, cfg: ScaleRegConfig) -> np.ndarray:
    visible = np.asarray(visible, dtype=bool)
    active = visible.sum(axis=-1, keepdims=True) >= cfg.min_visible
    mask = np.broadcast_to(active, visible.shape)
    if cfg.mask_invisible:
        mask = mask & visible
    return mask


def scale_terms(thetas, area, cfg: ScaleRegConfig, visible=None) -> np.ndarray:
    """Per-landmark ``0.5 * (lam * C - 4 det a)^2``.

    With ``visible`` given, samples with too few visible landmarks (and,
    optionally, invisible landmarks) contribute zero.
    """
    thetas = np.asarray(thetas, dtype=np.float64)
    if not cfg.enabled:
        return np.zeros(thetas.shape[:-2])
    area = np.asarray(area, dtype=np.float64)
    if np.any(area < 0):
        raise ValueError("hull area must be non-negative")
    resid = cfg.lam * area[..., None] - 4.0 * matrices_det(thetas)
    terms = 0.5 * resid * resid
    if visible is not None:
        terms = np.where(_scale_mask(visible, cfg), terms, 0.0)
    return terms


def scale_loss(thetas, area, cfg: ScaleRegConfig, visible=None):
    return scale_terms(thetas, area, cfg, visible).sum(axis=-1)


def loss_breakdown(gt, visible, pred_rel, thetas, cfg: ScaleRegConfig) -> LossBreakdown:
    """Loss of one sample, hull area computed from its visible ground truth."""
    reg = regression_terms(gt, visible, pred_rel, thetas)
    area = convex_hull_area(gt, visible) if np.any(visible) else 0.0
    sc = scale_terms(thetas, area, cfg, visible)
    r, s = float(reg.sum()), float(sc.sum())
    return LossBreakdown(regression=r, scale=s, total=r + s, per_landmark=np.stack([reg, sc], axis=-1))


def loss_gradients(gt, visible, pred_rel, thetas, area, cfg: ScaleRegConfig):
    """Closed-form ``(dL/dpred_rel [...,J,2], dL/dtheta [...,J,2,3])``.

    * ``dL/dl'  = -a^T (l - theta l')``
    * ``dL/dtheta (regression) = -(l - theta l') [l'; 1]^T``
    * ``dL/da (scale) = -4 (lam C - 4 det a) adj(a)^T``; translation gets none.
    """
    gt, pred_rel, thetas = (np.asarray(x, dtype=np.float64) for x in (gt, pred_rel, thetas))
    visible = np.asarray(visible, dtype=bool)
    _check(gt, visible, pred_rel, thetas)
    a = thetas[..., :, :2]
    resid = np.where(visible[..., None], gt - apply_matrices(thetas, pred_rel), 0.0)
    grad_rel = -np.einsum("...ji,...j->...i", a, resid)
    homog = np.concatenate([pred_rel, np.ones(pred_rel.shape[:-1] + (1,))], axis=-1)
    grad_theta = -resid[..., :, None] * homog[..., None, :]
    if cfg.enabled:
        area = np.asarray(area, dtype=np.float64)
        sresid = cfg.lam * area[..., None] - 4.0 * matrices_det(thetas)
        sresid = np.where(_scale_mask(visible, cfg), sresid, 0.0)
        grad_theta[..., :, :2] += -4.0 * sresid[..., None, None] * matrices_adjugate_transpose(thetas)
    return grad_rel, grad_theta


def loss_target_gradients(gt, visible, pred_rel, thetas, area, cfg: ScaleRegConfig):
    """``(dL/dgt [...,J,2], dL/darea [...])`` with the other inputs held fixed."""
    gt, pred_rel, thetas = (np.asarray(x, dtype=np.float64) for x in (gt, pred_rel, thetas))
    visible = np.asarray(visible, dtype=bool)
    _check(gt, visible, pred_rel, thetas)
    grad_gt = np.where(visible[..., None], gt - apply_matrices(thetas, pred_rel), 0.0)
    if not cfg.enabled:
        return grad_gt, np.zeros(gt.shape[:-2])
    area = np.asarray(area, dtype=np.float64)
    sresid = np.where(_scale_mask(visible, cfg), cfg.lam * area[..., None] - 4.0 * matrices_det(thetas), 0.0)
    return grad_gt, cfg.lam * sresid.sum(axis=-1)


# --------------------------------------------------------------------------
# metric


def landmark_hits(gt_pixels, pred_pixels, visible, threshold_px: float) -> np.ndarray:
    """Boolean ``[..., J]``: visible and within ``threshold_px`` (Euclidean)."""
    if not threshold_px > 0:
        raise ValueError("threshold_px must be positive")
    d = np.linalg.norm(np.asarray(gt_pixels, float) - np.asarray(pred_pixels, float), axis=-1)
    return np.asarray(visible, dtype=bool) & (d <= threshold_px)


def pdl(gt_pixels, pred_pixels, visible, threshold_px: float) -> float:
    """Percentage of visible landmarks predicted within ``threshold_px`` pixels."""
    visible = np.asarray(visible, dtype=bool)
    n = int(visible.sum())
    if n == 0:
        raise DegenerateInputError("PDL over zero visible landmarks")
    hits = landmark_hits(gt_pixels, pred_pixels, visible, threshold_px)
    return 100.0 * int(hits.sum()) / n
