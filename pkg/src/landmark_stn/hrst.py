"""Hierarchical recurrent spatial transformer head.

Step 1 predicts one global transform from the whole feature map. Each later
step crops the feature map through every landmark's current transform and
predicts a per-landmark refinement that is composed on the right::

    theta_j(i) = theta_j(i-1) @ delta_j(i-1 -> i),   theta_j(1) = theta_global

After the last step a regressor reads each landmark's crop and emits a
relative coordinate ``l'_j``; the prediction in image coordinates is
``theta_j l'_j``.

All three regressors are small MLPs over flattened features and are shared
across recurrent steps. The refinement head and the landmark regressor emit
one slot per landmark (6 and 2 values respectively); landmark ``j`` reads
slot ``j`` from its own crop, which keeps landmarks distinguishable even when
their crops coincide.

Parameters live in a flat ``dict[str, ndarray]`` under the prefixes
``glob.``, ``loc.`` and ``reg.``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DimensionError, NumericError
from .geometry import (
    AffineTransform,
    apply_matrices,
    compose_matrices,
    compose_matrices_backward,
    identity_matrices,
    sample_crops,
    sample_crops_backward,
)
from .tensor import linear, linear_backward, relu, relu_backward

LANDMARK_NAMES = ("L. Collar", "R. Collar", "L. Sleeve", "R. Sleeve", "L. Hem", "R. Hem")

# regressor outputs are row-major [a | t]: a11 a12 t1 a21 a22 t2
_IDENTITY_RAW = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


@dataclass
class LandmarkSet:
    points: np.ndarray  # [J, 2] normalized (x, y)
    visible: np.ndarray  # [J] bool

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        self.visible = np.asarray(self.visible, dtype=bool).reshape(-1)
        if len(self.visible) != len(self.points):
            raise DimensionError(f"{len(self.points)} points but {len(self.visible)} visibility flags")

    def __len__(self) -> int:
        return len(self.points)


# --------------------------------------------------------------------------
# MLP regressors


def init_mlp(rng: np.random.Generator, params: dict, prefix: str, n_in: int, n_out: int, hidden: int, zero_last: bool):
    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    if hidden > 0:
        params[f"{prefix}.w1"] = uniform((hidden, n_in), n_in) * np.sqrt(6.0)
        params[f"{prefix}.b1"] = np.zeros(hidden)
        last_in = hidden
        names = (f"{prefix}.w2", f"{prefix}.b2")
    else:
        last_in = n_in
        names = (f"{prefix}.w", f"{prefix}.b")
    params[names[0]] = np.zeros((n_out, last_in)) if zero_last else uniform((n_out, last_in), last_in)
    params[names[1]] = np.zeros(n_out)


def mlp_forward(params: dict, prefix: str, x: np.ndarray):
    if f"{prefix}.w1" in params:
        pre = linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"])
        h = relu(pre)
        return linear(h, params[f"{prefix}.w2"], params[f"{prefix}.b2"]), (x, pre, h)
    return linear(x, params[f"{prefix}.w"], params[f"{prefix}.b"]), (x,)


def mlp_backward(params: dict, prefix: str, cache, grad_y: np.ndarray, grads: dict) -> np.ndarray:
    if len(cache) == 3:
        x, pre, h = cache
        gh, gw, gb = linear_backward(h, params[f"{prefix}.w2"], grad_y)
        grads[f"{prefix}.w2"] += gw
        grads[f"{prefix}.b2"] += gb
        gpre = relu_backward(pre, gh)
        gx, gw, gb = linear_backward(x, params[f"{prefix}.w1"], gpre)
        grads[f"{prefix}.w1"] += gw
        grads[f"{prefix}.b1"] += gb
        return gx
    (x,) = cache
    gx, gw, gb = linear_backward(x, params[f"{prefix}.w"], grad_y)
    grads[f"{prefix}.w"] += gw
    grads[f"{prefix}.b"] += gb
    return gx


def init_head_params(
    rng: np.random.Generator, feat_dim: int, num_landmarks: int, hidden: int, use_stn: bool, use_hrst: bool
) -> dict:
    params: dict = {}
    if use_stn:
        init_mlp(rng, params, "glob", feat_dim, 6, hidden, zero_last=True)
    if use_hrst:
        init_mlp(rng, params, "loc", feat_dim, 6 * num_landmarks, hidden, zero_last=True)
    init_mlp(rng, params, "reg", feat_dim, 2 * num_landmarks, hidden, zero_last=False)
    return params


# --------------------------------------------------------------------------
# transforms from regressor output


def _residual_affine(raw: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(raw)):
        raise NumericError("localization regressor produced non-finite output")
    return (raw + _IDENTITY_RAW).reshape(raw.shape[:-1] + (2, 3))


def predict_transform(params: dict, features: np.ndarray, prefix: str = "glob"):
    """Affine transform = identity + regressor output (row-major ``[a | t]``).

    A 1-D feature vector gives an :class:`AffineTransform`; a batch ``[B, N]``
    gives matrices ``[B, 2, 3]``.
    """
    x = np.asarray(features, dtype=np.float64)
    raw, _ = mlp_forward(params, prefix, x.reshape(-1, x.shape[-1]) if x.ndim > 1 else x)
    if raw.shape[-1] != 6:
        raise DimensionError(f"localization head emits {raw.shape[-1]} values, expected 6")
    m = _residual_affine(raw)
    return AffineTransform.from_matrix(m) if x.ndim == 1 else m


# --------------------------------------------------------------------------
# forward / backward


@dataclass
class StepRecord:
    thetas_in: np.ndarray  # [B, J, 2, 3] transforms the crops were taken through
    deltas: np.ndarray  # [B, J, 2, 3] predicted refinements
    thetas_out: np.ndarray  # [B, J, 2, 3] composed result
    crops: np.ndarray = field(repr=False, default=None)  # type: ignore[assignment]
    cache: tuple = field(repr=False, default=())


@dataclass
class HrstTrace:
    steps: int
    num_landmarks: int
    use_stn: bool
    fconv: np.ndarray = field(repr=False)
    theta_global: np.ndarray  # [B, 2, 3]
    theta_local: np.ndarray  # [B, J, 2, 3] product of refinements
    thetas: np.ndarray  # [B, J, 2, 3] final composed transforms
    rel: np.ndarray  # [B, J, 2] relative coordinates l'
    pred: np.ndarray  # [B, J, 2] predictions theta l' in image coordinates
    records: list = field(default_factory=list, repr=False)
    glob_cache: tuple = field(default=(), repr=False)
    final_crops: Optional[np.ndarray] = field(default=None, repr=False)
    reg_cache: tuple = field(default=(), repr=False)

    def dump(self, sample: int = 0) -> str:
        """Per step, per landmark, the six affine values of the running transform."""
        lines = []
        for j in range(self.num_landmarks):
            lines.append(f"step 1 landmark {j} " + AffineTransform.from_matrix(self.theta_global[sample]).to_text())
        for i, rec in enumerate(self.records, start=2):
            for j in range(self.num_landmarks):
                lines.append(f"step {i} landmark {j} " + AffineTransform.from_matrix(rec.thetas_out[sample, j]).to_text())
        return "\n".join(lines)


def _crop(fconv: np.ndarray, thetas: np.ndarray) -> np.ndarray:
    """Resample ``fconv [B,C,h,w]`` through ``thetas [B,J,2,3]`` -> ``[B*J, C, h, w]``."""
    b, c, h, w = fconv.shape
    return sample_crops(fconv, thetas, h, w).reshape(b * thetas.shape[1], c, h, w)


def _crop_backward(fconv: np.ndarray, thetas: np.ndarray, grad_crops: np.ndarray):
    b, c, h, w = fconv.shape
    j = thetas.shape[1]
    return sample_crops_backward(fconv, thetas, grad_crops.reshape(b, j, c, h, w))


def _take_slots(out: np.ndarray, b: int, j: int, width: int) -> np.ndarray:
    # out: [B*J, width*J]; row (b, j) keeps slot j
    o = out.reshape(b, j, j, width)
    idx = np.arange(j)
    return o[:, idx, idx, :]


def _scatter_slots(g: np.ndarray, j: int) -> np.ndarray:
    b, _, width = g.shape
    full = np.zeros((b, j, j, width))
    idx = np.arange(j)
    full[:, idx, idx, :] = g
    return full.reshape(b * j, j * width)


def hrst_forward(params: dict, fconv: np.ndarray, steps: int, num_landmarks: int, use_stn: bool = True) -> HrstTrace:
    """Run the head on ``fconv [B, C, h, w]`` (or ``[C, h, w]``) for ``steps`` steps.

    Running fewer steps than the model was trained with is exactly truncated
    inference, since the regressors are shared across steps.
    """
    if steps < 1:
        raise ValueError(f"recurrent steps must be >= 1, got {steps}")
    fconv = np.asarray(fconv, dtype=np.float64)
    if fconv.ndim == 3:
        fconv = fconv[None]
    b = fconv.shape[0]
    J = num_landmarks
    flat = fconv.reshape(b, -1)

    if not use_stn:
        if steps != 1:
            raise ValueError("a head without a transformer has exactly one step")
        out, reg_cache = mlp_forward(params, "reg", flat)
        if out.shape[-1] != 2 * J:
            raise DimensionError(f"regressor emits {out.shape[-1]} values, expected {2 * J}")
        rel = out.reshape(b, J, 2)
        eye = identity_matrices(b, J)
        return HrstTrace(
            steps=1, num_landmarks=J, use_stn=False, fconv=fconv,
            theta_global=identity_matrices(b), theta_local=eye.copy(), thetas=eye,
            rel=rel, pred=rel.copy(), reg_cache=reg_cache,
        )

    raw, glob_cache = mlp_forward(params, "glob", flat)
    theta_global = _residual_affine(raw)
    thetas = np.repeat(theta_global[:, None], J, axis=1)
    local = identity_matrices(b, J)
    records = []
    for _ in range(2, steps + 1):
        if "loc.w2" not in params and "loc.w" not in params:
            raise DimensionError("multi-step head needs refinement regressor parameters")
        crops = _crop(fconv, thetas)
        out, cache = mlp_forward(params, "loc", crops.reshape(b * J, -1))
        if out.shape[-1] != 6 * J:
            raise DimensionError(f"refinement head emits {out.shape[-1]} values, expected {6 * J}")
        deltas = _residual_affine(_take_slots(out, b, J, 6))
        new = compose_matrices(thetas, deltas)
        local = compose_matrices(local, deltas)
        records.append(StepRecord(thetas_in=thetas, deltas=deltas, thetas_out=new, crops=crops, cache=cache))
        thetas = new

    crops = _crop(fconv, thetas)
    out, reg_cache = mlp_forward(params, "reg", crops.reshape(b * J, -1))
    if out.shape[-1] != 2 * J:
        raise DimensionError(f"regressor emits {out.shape[-1]} values, expected {2 * J}")
    rel = _take_slots(out, b, J, 2)
    return HrstTrace(
        steps=steps, num_landmarks=J, use_stn=True, fconv=fconv,
        theta_global=theta_global, theta_local=local, thetas=thetas,
        rel=rel, pred=apply_matrices(thetas, rel), records=records,
        glob_cache=glob_cache, final_crops=crops, reg_cache=reg_cache,
    )


def backproject_prediction_grad(thetas: np.ndarray, rel: np.ndarray, grad_pred: np.ndarray):
    """Chain ``dL/d(theta l')`` into ``(dL/dl', dL/dtheta)``."""
    grad_rel = np.einsum("...ji,...j->...i", thetas[..., :, :2], grad_pred)
    homog = np.concatenate([rel, np.ones(rel.shape[:-1] + (1,))], axis=-1)
    return grad_rel, grad_pred[..., :, None] * homog[..., None, :]


def zero_grads(params: dict) -> dict:
    return {k: np.zeros_like(v) for k, v in params.items()}


def hrst_backward(params: dict, trace: HrstTrace, grad_rel: np.ndarray, grad_theta: np.ndarray):
    """Backpropagate loss gradients w.r.t. ``l'`` and the final transforms.

    Returns ``(param_grads, grad_fconv)``. ``grad_theta`` is ignored for a head
    without a transformer (its transform is the constant identity).
    """
    fconv = trace.fconv
    b, J = fconv.shape[0], trace.num_landmarks
    if grad_rel.shape != (b, J, 2) or grad_theta.shape != (b, J, 2, 3):
        raise DimensionError(f"gradients {grad_rel.shape}/{grad_theta.shape} do not match trace ({b}, {J})")
    grads = zero_grads(params)

    if not trace.use_stn:
        gflat = mlp_backward(params, "reg", trace.reg_cache, grad_rel.reshape(b, 2 * J), grads)
        return grads, gflat.reshape(fconv.shape)

    gcrops = mlp_backward(params, "reg", trace.reg_cache, _scatter_slots(grad_rel, J), grads)
    g_fconv, g_theta = _crop_backward(fconv, trace.thetas, gcrops.reshape(trace.final_crops.shape))
    g_theta = g_theta + grad_theta

    for rec in reversed(trace.records):
        g_in, g_delta = compose_matrices_backward(rec.thetas_in, rec.deltas, g_theta)
        graw = _scatter_slots(g_delta.reshape(b, J, 6), J)
        gcrops = mlp_backward(params, "loc", rec.cache, graw, grads)
        gf, gt = _crop_backward(fconv, rec.thetas_in, gcrops.reshape(rec.crops.shape))
        g_fconv += gf
        g_theta = g_in + gt

    g_global = g_theta.sum(axis=1)
    gflat = mlp_backward(params, "glob", trace.glob_cache, g_global.reshape(b, 6), grads)
    g_fconv += gflat.reshape(fconv.shape)
    return grads, g_fconv
