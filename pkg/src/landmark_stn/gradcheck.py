"""Central finite-difference verification of every analytic gradient."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .losses import ScaleRegConfig, loss_gradients, loss_target_gradients, regression_terms, scale_terms
from .model import ModelConfig, batch_loss, build_model, forward, loss_and_grads

# floor on the relative-error denominator so exact zeros compare by absolute error
_REL_FLOOR = 1e-8


def tiny_config(**kw) -> ModelConfig:
    """8x8 input, two 2-channel conv stages, M = 2, J = 2.

    ``scale_min_visible`` is lowered to 2 so the scale term stays active with
    only two landmarks.
    """
    base = dict(
        channels=(2, 2), image_extent=8, dilations=(1, 2), recurrent_steps=2, num_landmarks=2,
        head_hidden=4, scale_min_visible=2,
    )
    base.update(kw)
    return ModelConfig(**base)


def relative_error(numeric, analytic) -> np.ndarray:
    numeric, analytic = np.asarray(numeric), np.asarray(analytic)
    denom = np.maximum(np.maximum(np.abs(numeric), np.abs(analytic)), _REL_FLOOR)
    return np.abs(numeric - analytic) / denom


@dataclass
class GradcheckReport:
    tolerance: float
    per_tensor: dict = field(default_factory=dict)  # parameter name -> worst rel error
    loss_inputs: dict = field(default_factory=dict)  # loss input name -> worst rel error
    seconds: float = 0.0

    @property
    def per_layer(self) -> dict:
        out: dict = {}
        for name, err in self.per_tensor.items():
            layer = name.split(".")[0]
            out[layer] = max(out.get(layer, 0.0), err)
        return out

    @property
    def worst(self) -> float:
        return max(list(self.per_tensor.values()) + list(self.loss_inputs.values()) + [0.0])

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance

    def lines(self) -> list:
        rows = [f"{k:12s} {v:.3e}" for k, v in sorted(self.per_layer.items())]
        rows += [f"loss:{k:7s} {v:.3e}" for k, v in sorted(self.loss_inputs.items())]
        rows.append(f"worst        {self.worst:.3e} ({'PASS' if self.passed else 'FAIL'} at < {self.tolerance:g})")
        return rows


def random_problem(cfg: ModelConfig, seed: int, batch: int = 2, jitter: float = 0.05):
    """Seeded parameters and a random batch.

    Localization heads are jittered away from zero: an exact identity puts
    every sampling point on an integer pixel where bilinear interpolation is
    not differentiable, and finite differences straddle the kink.
    """
    params = build_model(cfg, seed)
    rng = np.random.default_rng([seed, 1])
    for k in params:
        if k.startswith(("glob.", "loc.")):
            params[k] = params[k] + rng.normal(scale=jitter, size=params[k].shape)
    J, ext = cfg.num_landmarks, cfg.image_extent
    images = rng.uniform(size=(batch, cfg.in_channels, ext, ext))
    gt = rng.uniform(-0.8, 0.8, size=(batch, J, 2))
    visible = np.ones((batch, J), dtype=bool)
    if batch > 1 and J > 1:
        visible[-1, 0] = False
    area = rng.uniform(0.2, 1.0, size=batch)
    return params, images, gt, visible, area


def check_parameters(cfg: ModelConfig, params, images, gt, visible, area, eps: float = 1e-5) -> dict:
    """Worst relative error per parameter tensor over every scalar entry."""
    _, grads, _ = loss_and_grads(params, cfg, images, gt, visible, area)

    def f(p):
        trace, _ = forward(p, cfg, images)
        return float(batch_loss(cfg, trace, gt, visible, area).total.mean())

    out = {}
    for name, value in params.items():
        worst = 0.0
        probe = dict(params)
        for idx in np.ndindex(value.shape):
            plus = value.copy()
            plus[idx] += eps
            probe[name] = plus
            fp = f(probe)
            minus = value.copy()
            minus[idx] -= eps
            probe[name] = minus
            fm = f(probe)
            worst = max(worst, float(relative_error((fp - fm) / (2 * eps), grads[name][idx])))
        out[name] = worst
    return out


def check_loss_inputs(gt, visible, pred_rel, thetas, area, cfg: ScaleRegConfig, eps: float = 1e-5) -> dict:
    """Worst relative error of the closed-form loss gradients per input."""
    inputs = {"pred_rel": pred_rel, "theta": thetas, "gt": gt, "area": np.asarray(area, dtype=np.float64)}
    g_rel, g_theta = loss_gradients(gt, visible, pred_rel, thetas, area, cfg)
    g_gt, g_area = loss_target_gradients(gt, visible, pred_rel, thetas, area, cfg)
    analytic = {"pred_rel": g_rel, "theta": g_theta, "gt": g_gt, "area": g_area}

    def total(v):
        return float(
            regression_terms(v["gt"], visible, v["pred_rel"], v["theta"]).sum()
            + scale_terms(v["theta"], v["area"], cfg, visible).sum()
        )

    out = {}
    for name, value in inputs.items():
        worst = 0.0
        for idx in np.ndindex(value.shape):
            probe = dict(inputs)
            plus = value.copy()
            plus[idx] += eps
            probe[name] = plus
            fp = total(probe)
            minus = value.copy()
            minus[idx] -= eps
            probe[name] = minus
            fm = total(probe)
            worst = max(worst, float(relative_error((fp - fm) / (2 * eps), analytic[name][idx])))
        out[name] = worst
    return out


def gradcheck(cfg: ModelConfig | None = None, seed: int = 0, tolerance: float = 1e-4, eps: float = 1e-5) -> GradcheckReport:
    """Whole-network plus loss-input finite-difference check."""
    t0 = time.perf_counter()
    cfg = tiny_config() if cfg is None else cfg
    params, images, gt, visible, area = random_problem(cfg, seed)
    report = GradcheckReport(tolerance)
    report.per_tensor = check_parameters(cfg, params, images, gt, visible, area, eps)
    trace, _ = forward(params, cfg, images)
    report.loss_inputs = check_loss_inputs(gt, visible, trace.rel, trace.thetas, area, cfg.scale_reg(), eps)
    report.seconds = time.perf_counter() - t0
    return report


def scale_term_isolation(gt, visible, pred_rel, thetas, area, cfg: ScaleRegConfig) -> float:
    """Max deviation between (on - off) theta gradients and the closed-form scale term."""
    from .geometry import matrices_adjugate_transpose, matrices_det
    from .losses import _scale_mask

    on = ScaleRegConfig(cfg.lam, True, cfg.mask_invisible, cfg.min_visible)
    off = ScaleRegConfig(cfg.lam, False, cfg.mask_invisible, cfg.min_visible)
    _, g_on = loss_gradients(gt, visible, pred_rel, thetas, area, on)
    _, g_off = loss_gradients(gt, visible, pred_rel, thetas, area, off)
    sresid = np.asarray(cfg.lam * np.asarray(area)[..., None] - 4.0 * matrices_det(thetas))
    sresid = np.where(_scale_mask(visible, on), sresid, 0.0)
    expected = np.zeros_like(g_on)
    expected[..., :, :2] = -4.0 * sresid[..., None, None] * matrices_adjugate_transpose(thetas)
    return float(np.abs((g_on - g_off) - expected).max())
