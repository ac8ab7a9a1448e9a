"""Dense float64 tensor ops with explicit forward/backward pairs.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Spatial ops take
either a single map ``[C, H, W]`` or a batch ``[N, C, H, W]`` and return the
same rank they were given. Convolution is cross-correlation with zero padding.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError

DTYPE = np.float64


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=DTYPE)


@dataclass
class GradPair:
    """A value and the gradient accumulated against it."""

    value: np.ndarray
    grad: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.value = as_tensor(self.value)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise DimensionError(f"grad shape {self.grad.shape} != value shape {self.value.shape}")

    def accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.value.shape:
            raise DimensionError(f"cannot accumulate {g.shape} into {self.value.shape}")
        self.grad += g

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


# --------------------------------------------------------------------------
# convolution


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"expected [C,H,W] or [N,C,H,W], got shape {x.shape}")


def _check_conv_args(x: np.ndarray, kernel: np.ndarray, dilation: int, padding: int) -> None:
    if isinstance(dilation, bool) or not isinstance(dilation, (int, np.integer)) or dilation < 1:
        raise ValueError(f"dilation must be a positive integer, got {dilation!r}")
    if isinstance(padding, bool) or not isinstance(padding, (int, np.integer)) or padding < 0:
        raise ValueError(f"padding must be a non-negative integer, got {padding!r}")
    if kernel.ndim != 4:
        raise DimensionError(f"kernel must be [C_out,C_in,kH,kW], got {kernel.shape}")
    if x.shape[1] != kernel.shape[1]:
        raise DimensionError(f"input has {x.shape[1]} channels, kernel expects {kernel.shape[1]}")
    kh, kw = kernel.shape[2:]
    if x.shape[2] + 2 * padding < dilation * (kh - 1) + 1 or x.shape[3] + 2 * padding < dilation * (kw - 1) + 1:
        raise DimensionError(
            f"dilated kernel extent {dilation * (kh - 1) + 1}x{dilation * (kw - 1) + 1} "
            f"does not fit padded input {x.shape[2] + 2 * padding}x{x.shape[3] + 2 * padding}"
        )


def _im2col(x: np.ndarray, kh: int, kw: int, dilation: int, padding: int):
    """Columns ``[C*kH*kW, N*H'*W']`` (rows match the kernel layout).

    Samples and positions share one axis so forward and kernel gradient are
    each a single matrix product.
    """
    n, c, h, w = x.shape
    if padding:
        xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
        xp[:, :, padding:padding + h, padding:padding + w] = x
        x = xp
    eh, ew = dilation * (kh - 1) + 1, dilation * (kw - 1) + 1
    win = sliding_window_view(x, (eh, ew), axis=(2, 3))[..., ::dilation, ::dilation]
    oh, ow = win.shape[2], win.shape[3]
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * oh * ow)
    return cols, oh, ow


def conv2d(input: np.ndarray, kernel: np.ndarray, dilation: int = 1, padding: int = 0) -> np.ndarray:
    """Dilated 2-D cross-correlation.

    ``out[o,y,x] = sum_{c,i,j} input[c, y+i*d-p, x+j*d-p] * kernel[o,c,i,j]``
    with zero reads outside the input. Output extent is ``H + 2p - d(kH-1)``.
    """
    return conv2d_with_cols(input, kernel, dilation, padding)[0]


def conv2d_with_cols(input: np.ndarray, kernel: np.ndarray, dilation: int = 1, padding: int = 0):
    """:func:`conv2d` that also returns its im2col matrix for reuse in backward."""
    x, squeeze = _batched(np.asarray(input, dtype=DTYPE))
    kernel = np.asarray(kernel, dtype=DTYPE)
    _check_conv_args(x, kernel, dilation, padding)
    cout, _, kh, kw = kernel.shape
    cols, oh, ow = _im2col(x, kh, kw, dilation, padding)
    out = (kernel.reshape(cout, -1) @ cols).reshape(cout, x.shape[0], oh, ow).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out)
    return (out[0] if squeeze else out), cols


def conv2d_backward(
    input: np.ndarray,
    kernel: np.ndarray,
    dilation: int,
    padding: int,
    grad_out: np.ndarray,
    need_input_grad: bool = True,
    cols: np.ndarray | None = None,
) -> tuple[np.ndarray | None, np.ndarray]:
    """Return ``(grad_input, grad_kernel)`` for :func:`conv2d`.

    ``cols`` may carry the im2col matrix from :func:`conv2d_with_cols`.
    """
    x, squeeze = _batched(np.asarray(input, dtype=DTYPE))
    kernel = np.asarray(kernel, dtype=DTYPE)
    _check_conv_args(x, kernel, dilation, padding)
    go, _ = _batched(np.asarray(grad_out, dtype=DTYPE))
    n, c, h, w = x.shape
    cout, _, kh, kw = kernel.shape
    oh = h + 2 * padding - dilation * (kh - 1)
    ow = w + 2 * padding - dilation * (kw - 1)
    if go.shape != (n, cout, oh, ow):
        raise DimensionError(f"grad_out shape {go.shape} != forward output shape {(n, cout, oh, ow)}")

    if cols is None:
        cols, _, _ = _im2col(x, kh, kw, dilation, padding)
    elif cols.shape != (c * kh * kw, n * oh * ow):
        raise DimensionError(f"cached columns {cols.shape} do not match this convolution")
    g = np.ascontiguousarray(go.transpose(1, 0, 2, 3)).reshape(cout, n * oh * ow)
    # one GEMM over every (sample, position) pair in fixed order: deterministic
    grad_kernel = (g @ cols.T).reshape(kernel.shape)
    if not need_input_grad:
        return None, grad_kernel

    dcols = (kernel.reshape(cout, -1).T @ g).reshape(c, kh, kw, n, oh, ow)
    gxp = np.zeros((c, n, h + 2 * padding, w + 2 * padding), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            y0, x0 = i * dilation, j * dilation
            gxp[:, :, y0:y0 + oh, x0:x0 + ow] += dcols[:, i, j]
    grad_input = np.ascontiguousarray(gxp[:, :, padding:padding + h, padding:padding + w].transpose(1, 0, 2, 3))
    return (grad_input[0] if squeeze else grad_input), grad_kernel


# --------------------------------------------------------------------------
# dense layers and pointwise ops


def linear(input: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """``weight @ input + bias``; ``input`` may be ``[N]`` or a batch ``[B, N]``."""
    x = np.asarray(input, dtype=DTYPE)
    if weight.ndim != 2 or bias.shape != (weight.shape[0],) or x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape}, weight {weight.shape}, bias {bias.shape}")
    return x @ weight.T + bias


def linear_backward(input: np.ndarray, weight: np.ndarray, grad_out: np.ndarray):
    """Return ``(grad_input, grad_weight, grad_bias)`` for :func:`linear`."""
    x = np.asarray(input, dtype=DTYPE)
    if grad_out.shape[:-1] != x.shape[:-1] or grad_out.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear_backward: grad_out {grad_out.shape} vs input {x.shape}")
    x2 = x.reshape(-1, x.shape[-1])
    g2 = grad_out.reshape(-1, weight.shape[0])
    return grad_out @ weight, g2.T @ x2, g2.sum(axis=0)


def relu(input: np.ndarray) -> np.ndarray:
    return np.maximum(input, 0.0)


def relu_backward(input: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # derivative at exactly 0 is taken as 0
    return np.where(input > 0.0, grad_out, 0.0)


def avg_pool2(input: np.ndarray) -> np.ndarray:
    """Non-overlapping 2x2 mean pooling (stride 2)."""
    x, squeeze = _batched(np.asarray(input, dtype=DTYPE))
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avg_pool2 needs even spatial extent, got {h}x{w}")
    out = x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    return out[0] if squeeze else out


def avg_pool2_backward(grad_out: np.ndarray) -> np.ndarray:
    g = np.asarray(grad_out, dtype=DTYPE) * 0.25
    return np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1)


# --------------------------------------------------------------------------
# element-wise max over towers


def elementwise_max_select(towers: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Per-element max over equally shaped towers.

    Returns ``(out, selection)`` where ``selection`` holds the index of the
    winning tower; ties go to the lowest index.
    """
    if len(towers) == 0:
        raise ValueError("elementwise_max_select needs at least one tower")
    shape = towers[0].shape
    for t in towers[1:]:
        if t.shape != shape:
            raise DimensionError(f"tower shapes differ: {shape} vs {t.shape}")
    stacked = np.stack([np.asarray(t, dtype=DTYPE) for t in towers])
    selection = np.argmax(stacked, axis=0)  # first occurrence on ties
    out = np.take_along_axis(stacked, selection[None], axis=0)[0]
    return out, selection


def max_select_backward(selection: np.ndarray, grad_out: np.ndarray, num_towers: int) -> list[np.ndarray]:
    """Route each gradient element to its selected tower only."""
    if selection.shape != grad_out.shape:
        raise DimensionError(f"selection {selection.shape} does not match grad_out {grad_out.shape}")
    return [np.where(selection == s, grad_out, 0.0) for s in range(num_towers)]


# --------------------------------------------------------------------------
# serialization: rank:u32, extents:u32..., then little-endian f64 row-major


def tensor_to_bytes(t: np.ndarray) -> bytes:
    t = np.asarray(t, dtype="<f8")
    header = struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape)
    return header + np.ascontiguousarray(t).tobytes()


def tensor_from_bytes(buf: bytes | memoryview, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor at ``offset``; returns ``(tensor, next_offset)``."""
    if len(buf) < offset + 4:
        raise EOFError("truncated tensor header")
    (rank,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    if len(buf) < offset + 4 * rank:
        raise EOFError("truncated tensor extents")
    shape = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    count = int(np.prod(shape, dtype=np.int64))
    nbytes = 8 * count
    if len(buf) < offset + nbytes:
        raise EOFError("truncated tensor data")
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=offset)
    return data.reshape(shape).astype(DTYPE), offset + nbytes


def write_tensor(fp: BinaryIO, t: np.ndarray) -> None:
    fp.write(tensor_to_bytes(t))


def read_tensor(fp: BinaryIO) -> np.ndarray:
    head = fp.read(4)
    if len(head) < 4:
        raise EOFError("truncated tensor header")
    (rank,) = struct.unpack("<I", head)
    ext = fp.read(4 * rank)
    shape = struct.unpack(f"<{rank}I", ext) if len(ext) == 4 * rank else None
    if shape is None:
        raise EOFError("truncated tensor extents")
    body = fp.read(8 * int(np.prod(shape, dtype=np.int64)))
    t, _ = tensor_from_bytes(head + ext + body)
    return t
