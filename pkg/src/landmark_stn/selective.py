"""Selective dilated convolution: one shared kernel run at several dilations.

The towers' responses are merged per element, either by maximum (the winning
tower is remembered for the backward pass) or by arithmetic mean.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import conv2d, conv2d_backward, conv2d_with_cols, elementwise_max_select, max_select_backward

DEFAULT_DILATIONS = (1, 2, 4, 8)
AGGREGATIONS = ("max", "avg")


@dataclass
class ScaleTowerBank:
    kernel: np.ndarray
    dilations: Sequence[int] = DEFAULT_DILATIONS
    aggregation: str = "max"

    def __post_init__(self):
        self.dilations = tuple(int(d) for d in self.dilations)
        if not self.dilations:
            raise ConfigError("dilations must be non-empty")
        if any(d < 1 for d in self.dilations):
            raise ConfigError(f"dilations must be positive, got {self.dilations}")
        if any(b <= a for a, b in zip(self.dilations, self.dilations[1:])):
            raise ConfigError(f"dilations must be strictly increasing, got {self.dilations}")
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"aggregation must be one of {AGGREGATIONS}, got {self.aggregation!r}")
        kh, kw = self.kernel.shape[2:]
        if kh % 2 == 0 or kw % 2 == 0 or kh != kw:
            raise ConfigError(f"selective towers need a square odd kernel, got {kh}x{kw}")

    def padding(self, dilation: int) -> int:
        # keeps every tower at the input's spatial extent
        return dilation * (self.kernel.shape[2] - 1) // 2


def parse_dilations(text: str) -> tuple[int, ...]:
    return tuple(int(tok) for tok in text.replace(" ", "").split(",") if tok)


def tower_outputs(bank: ScaleTowerBank, F: np.ndarray) -> list[np.ndarray]:
    return [conv2d(F, bank.kernel, d, bank.padding(d)) for d in bank.dilations]


def selective_forward(bank: ScaleTowerBank, F: np.ndarray) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Return ``(F_conv, selection)``; ``selection`` is ``None`` in average mode."""
    out, selection, _ = selective_forward_cached(bank, F)
    return out, selection


def selective_forward_cached(bank: ScaleTowerBank, F: np.ndarray):
    """:func:`selective_forward` plus each tower's im2col matrix for the backward pass."""
    pairs = [conv2d_with_cols(F, bank.kernel, d, bank.padding(d)) for d in bank.dilations]
    towers = [t for t, _ in pairs]
    cols = [c for _, c in pairs]
    shape = towers[0].shape
    if any(t.shape != shape for t in towers):
        raise ConfigError(f"tower shapes diverge: {[t.shape for t in towers]}")
    if bank.aggregation == "avg":
        return sum(towers) / len(towers), None, cols
    out, selection = elementwise_max_select(towers)
    return out, selection, cols


def selective_backward(
    bank: ScaleTowerBank,
    F: np.ndarray,
    selection: Optional[np.ndarray],
    grad_out: np.ndarray,
    need_input_grad: bool = True,
    cols: Optional[list] = None,
) -> tuple[Optional[np.ndarray], np.ndarray]:
    """Return ``(grad_F, grad_kernel)``; the kernel gradient sums over towers."""
    n = len(bank.dilations)
    if bank.aggregation == "avg":
        routed = [grad_out / n] * n
    else:
        if selection is None or selection.shape != grad_out.shape:
            got = None if selection is None else selection.shape
            raise DimensionError(f"selection {got} does not match grad_out {grad_out.shape}")
        routed = max_select_backward(selection, grad_out, n)

    grad_F = np.zeros_like(F) if need_input_grad else None
    grad_kernel = np.zeros_like(bank.kernel)
    cols = cols if cols is not None else [None] * n
    for d, g, c in zip(bank.dilations, routed, cols):
        gi, gk = conv2d_backward(F, bank.kernel, d, bank.padding(d), g, need_input_grad, c)
        grad_kernel += gk
        if need_input_grad:
            grad_F += gi
    return grad_F, grad_kernel
