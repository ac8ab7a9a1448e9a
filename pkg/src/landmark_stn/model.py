"""Desk-scale landmark network: conv backbone, selective last stage, HR-ST head."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from .errors import ConfigError
from .hrst import HrstTrace, hrst_backward, hrst_forward, init_head_params
from .losses import ScaleRegConfig, loss_gradients, regression_terms, scale_terms
from .selective import ScaleTowerBank, selective_backward, selective_forward_cached
from .tensor import avg_pool2, avg_pool2_backward, conv2d_backward, conv2d_with_cols, relu, relu_backward


@dataclass
class ModelConfig:
    channels: tuple = (8, 16, 32, 32)
    kernel_size: int = 3
    in_channels: int = 1
    image_extent: int = 64
    dilations: tuple = (1, 2, 4, 8)
    aggregation: str = "max"
    recurrent_steps: int = 3
    num_landmarks: int = 6
    head_hidden: int = 64
    lam: float = 0.4
    use_stn: bool = True
    use_selective: bool = True
    use_hrst: bool = True
    use_scale_reg: bool = True
    scale_mask_invisible: bool = False
    scale_min_visible: int = 3

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.dilations = tuple(int(d) for d in self.dilations)
        self.validate()

    def validate(self) -> None:
        if not self.channels or any(c < 1 for c in self.channels):
            raise ConfigError(f"bad channel widths {self.channels}")
        if self.kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be odd")
        if self.use_hrst and not self.use_stn:
            raise ConfigError("use_hrst requires use_stn")
        if self.use_scale_reg and not self.use_stn:
            raise ConfigError("use_scale_reg requires use_stn")
        if self.recurrent_steps < 1:
            raise ConfigError("recurrent_steps must be >= 1")
        if self.num_landmarks < 1:
            raise ConfigError("num_landmarks must be >= 1")
        if self.aggregation not in ("max", "avg"):
            raise ConfigError(f"aggregation must be max or avg, got {self.aggregation!r}")
        if not 0.0 < self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in (0, 1], got {self.lam}")
        if self.image_extent % (2 ** (len(self.channels) - 1)):
            raise ConfigError(f"image_extent {self.image_extent} not divisible by 2^{len(self.channels) - 1}")

    @property
    def steps(self) -> int:
        """Recurrent steps actually run (1 unless the hierarchical head is on)."""
        return self.recurrent_steps if self.use_hrst else 1

    @property
    def feature_extent(self) -> int:
        return self.image_extent // 2 ** (len(self.channels) - 1)

    @property
    def feature_dim(self) -> int:
        return self.channels[-1] * self.feature_extent**2

    @property
    def tower_dilations(self) -> tuple:
        return self.dilations if self.use_selective else (1,)

    def scale_reg(self) -> ScaleRegConfig:
        return ScaleRegConfig(
            lam=self.lam,
            enabled=self.use_scale_reg,
            mask_invisible=self.scale_mask_invisible,
            min_visible=self.scale_min_visible,
        )

    def replace(self, **kw) -> "ModelConfig":
        vals = {f.name: getattr(self, f.name) for f in fields(self)}
        vals.update(kw)
        return ModelConfig(**vals)


def build_model(cfg: ModelConfig, seed: int) -> dict:
    """Seeded parameters; localization heads start at zero output (identity)."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    params: dict = {}
    cin = cfg.in_channels
    k = cfg.kernel_size
    for i, cout in enumerate(cfg.channels):
        bound = np.sqrt(6.0 / (cin * k * k))
        params[f"conv{i}.w"] = rng.uniform(-bound, bound, size=(cout, cin, k, k))
        params[f"conv{i}.b"] = np.zeros(cout)
        cin = cout
    params.update(
        init_head_params(rng, cfg.feature_dim, cfg.num_landmarks, cfg.head_hidden, cfg.use_stn, cfg.use_hrst)
    )
    return params


def parameter_count(cfg: ModelConfig) -> int:
    total, cin, k = 0, cfg.in_channels, cfg.kernel_size
    for cout in cfg.channels:
        total += cout * cin * k * k + cout
        cin = cout

    def mlp(n_in, n_out):
        h = cfg.head_hidden
        return h * n_in + h + n_out * h + n_out if h > 0 else n_in * n_out + n_out

    J, D = cfg.num_landmarks, cfg.feature_dim
    total += mlp(D, 2 * J)
    if cfg.use_stn:
        total += mlp(D, 6)
    if cfg.use_hrst:
        total += mlp(D, 6 * J)
    return total


@dataclass
class ForwardCache:
    stages: list = field(default_factory=list)  # (input, pre-activation, selection, im2col)
    fconv: Optional[np.ndarray] = None


def backbone_forward(params: dict, cfg: ModelConfig, images: np.ndarray):
    cache = ForwardCache()
    h = images
    last = len(cfg.channels) - 1
    for i in range(len(cfg.channels)):
        w, b = params[f"conv{i}.w"], params[f"conv{i}.b"]
        sel = None
        if i == last:
            bank = ScaleTowerBank(w, cfg.tower_dilations, cfg.aggregation)
            z, sel, cols = selective_forward_cached(bank, h)
        else:
            z, cols = conv2d_with_cols(h, w, 1, cfg.kernel_size // 2)
        z = z + b[:, None, None]
        cache.stages.append((h, z, sel, cols))
        a = relu(z)
        h = avg_pool2(a) if i < last else a
    cache.fconv = h
    return h, cache


def backbone_backward(params: dict, cfg: ModelConfig, cache: ForwardCache, grad_fconv: np.ndarray, grads: dict):
    g = grad_fconv
    last = len(cfg.channels) - 1
    for i in range(last, -1, -1):
        h, z, sel, cols = cache.stages[i]
        if i < last:
            g = avg_pool2_backward(g)
        gz = relu_backward(z, g)
        grads[f"conv{i}.b"] += gz.sum(axis=(0, 2, 3))
        w = params[f"conv{i}.w"]
        need = i > 0
        if i == last:
            bank = ScaleTowerBank(w, cfg.tower_dilations, cfg.aggregation)
            g, gw = selective_backward(bank, h, sel, gz, need, cols)
        else:
            g, gw = conv2d_backward(h, w, 1, cfg.kernel_size // 2, gz, need, cols)
        grads[f"conv{i}.w"] += gw
    return grads


def forward(params: dict, cfg: ModelConfig, images: np.ndarray, steps: Optional[int] = None):
    """Full forward on ``images [B, C, H, W]``; returns ``(trace, backbone cache)``."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    fconv, cache = backbone_forward(params, cfg, images)
    trace = hrst_forward(params, fconv, cfg.steps if steps is None else steps, cfg.num_landmarks, cfg.use_stn)
    return trace, cache


def backward(params: dict, cfg: ModelConfig, trace: HrstTrace, cache: ForwardCache, grad_rel, grad_theta) -> dict:
    grads, grad_fconv = hrst_backward(params, trace, grad_rel, grad_theta)
    return backbone_backward(params, cfg, cache, grad_fconv, grads)


@dataclass
class BatchLoss:
    regression: np.ndarray  # [B]
    scale: np.ndarray  # [B]

    @property
    def total(self) -> np.ndarray:
        return self.regression + self.scale


def batch_loss(cfg: ModelConfig, trace: HrstTrace, gt, visible, area) -> BatchLoss:
    sr = cfg.scale_reg()
    reg = regression_terms(gt, visible, trace.rel, trace.thetas).sum(axis=-1)
    sc = scale_terms(trace.thetas, area, sr, visible).sum(axis=-1)
    if not cfg.use_stn:
        sc = np.zeros_like(sc)
    return BatchLoss(reg, sc)


def loss_and_grads(params: dict, cfg: ModelConfig, images, gt, visible, area):
    """Mean-over-batch loss and parameter gradients."""
    trace, cache = forward(params, cfg, images)
    losses = batch_loss(cfg, trace, gt, visible, area)
    g_rel, g_theta = loss_gradients(gt, visible, trace.rel, trace.thetas, area, cfg.scale_reg())
    b = trace.rel.shape[0]
    grads = backward(params, cfg, trace, cache, g_rel / b, g_theta / b)
    return losses, grads, trace
