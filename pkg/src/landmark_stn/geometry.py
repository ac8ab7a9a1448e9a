"""Affine transforms in normalized coordinates, sampling grids, bilinear sampling.

Normalized coordinates put the image on ``[-1, 1]^2`` with pixel ``i`` of an
extent ``n`` centred at ``-1 + (2i + 1) / n``. Points and grid entries are
stored ``(x, y)``.

Batched helpers work on ``[..., 2, 3]`` matrices ``[a | t]``; the
:class:`AffineTransform` dataclass is the single-transform view of the same
thing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, SingularityError

# grid coordinates this close to a pixel centre are snapped onto it, so the
# identity warp reproduces its input exactly
_SNAP = 1e-10


@dataclass(frozen=True)
class AffineTransform:
    a: np.ndarray  # 2x2 linear block
    t: np.ndarray  # translation

    def __post_init__(self):
        a = np.array(self.a, dtype=np.float64).reshape(2, 2)
        t = np.array(self.t, dtype=np.float64).reshape(2)
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(t))):
            raise ValueError("affine entries must be finite")
        a.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.eye(2), np.zeros(2))

    @classmethod
    def from_params(cls, p) -> "AffineTransform":
        """From six values ordered a11 a12 a21 a22 t1 t2."""
        p = np.asarray(p, dtype=np.float64).reshape(6)
        return cls(p[:4].reshape(2, 2), p[4:])

    @classmethod
    def from_matrix(cls, m) -> "AffineTransform":
        m = np.asarray(m, dtype=np.float64).reshape(2, 3)
        return cls(m[:, :2], m[:, 2])

    def params(self) -> np.ndarray:
        return np.concatenate([self.a.ravel(), self.t])

    def matrix(self) -> np.ndarray:
        return np.concatenate([self.a, self.t[:, None]], axis=1)

    def to_text(self) -> str:
        return " ".join(repr(float(v)) for v in self.params())

    @classmethod
    def from_text(cls, s: str) -> "AffineTransform":
        vals = s.split()
        if len(vals) != 6:
            raise ValueError(f"expected 6 affine values, got {len(vals)}")
        return cls.from_params([float(v) for v in vals])

    def __eq__(self, other):
        if not isinstance(other, AffineTransform):
            return NotImplemented
        return bool(np.array_equal(self.a, other.a) and np.array_equal(self.t, other.t))

    __hash__ = None  # type: ignore[assignment]


def linear_det(T: AffineTransform) -> float:
    a = T.a
    return float(a[0, 0] * a[1, 1] - a[0, 1] * a[1, 0])


def affine_apply(T: AffineTransform, p) -> np.ndarray:
    """``a @ p + t`` for a point ``(x, y)`` or an array of points ``[..., 2]``."""
    p = np.asarray(p, dtype=np.float64)
    return p @ T.a.T + T.t


def affine_compose(outer: AffineTransform, inner: AffineTransform) -> AffineTransform:
    """Transform equivalent to applying ``inner`` first, then ``outer``."""
    return AffineTransform(outer.a @ inner.a, outer.a @ inner.t + outer.t)


def affine_adjugate_transpose(T: AffineTransform) -> np.ndarray:
    """``det(a) * inv(a).T`` written as the cofactor matrix; defined for singular ``a``."""
    (a11, a12), (a21, a22) = T.a
    return np.array([[a22, -a21], [-a12, a11]])


def affine_inverse(T: AffineTransform) -> AffineTransform:
    det = linear_det(T)
    if abs(det) <= 1e-9:
        raise SingularityError(det)
    inv_a = affine_adjugate_transpose(T).T / det
    return AffineTransform(inv_a, -inv_a @ T.t)


# --------------------------------------------------------------------------
# batched matrix helpers ([..., 2, 3])


def identity_matrices(*shape: int) -> np.ndarray:
    m = np.zeros((*shape, 2, 3))
    m[..., 0, 0] = 1.0
    m[..., 1, 1] = 1.0
    return m


def compose_matrices(outer: np.ndarray, inner: np.ndarray) -> np.ndarray:
    a = outer[..., :, :2] @ inner[..., :, :2]
    t = (outer[..., :, :2] @ inner[..., :, 2:]) + outer[..., :, 2:]
    return np.concatenate([a, t], axis=-1)


def compose_matrices_backward(outer: np.ndarray, inner: np.ndarray, grad: np.ndarray):
    """Gradients of :func:`compose_matrices` w.r.t. ``outer`` and ``inner``."""
    ga, gt = grad[..., :, :2], grad[..., :, 2:]
    oa = outer[..., :, :2]
    g_outer = np.concatenate(
        [ga @ np.swapaxes(inner[..., :, :2], -1, -2) + gt @ np.swapaxes(inner[..., :, 2:], -1, -2), gt], axis=-1
    )
    oaT = np.swapaxes(oa, -1, -2)
    g_inner = np.concatenate([oaT @ ga, oaT @ gt], axis=-1)
    return g_outer, g_inner


def apply_matrices(m: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Apply ``[..., 2, 3]`` transforms to ``[..., 2]`` points."""
    return np.einsum("...ij,...j->...i", m[..., :, :2], p) + m[..., :, 2]


def matrices_det(m: np.ndarray) -> np.ndarray:
    return m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] * m[..., 1, 0]


def matrices_adjugate_transpose(m: np.ndarray) -> np.ndarray:
    out = np.empty(m.shape[:-2] + (2, 2))
    out[..., 0, 0] = m[..., 1, 1]
    out[..., 0, 1] = -m[..., 1, 0]
    out[..., 1, 0] = -m[..., 0, 1]
    out[..., 1, 1] = m[..., 0, 0]
    return out


# --------------------------------------------------------------------------
# coordinate conventions


def normalized_center(i, n: int):
    """Normalized coordinate of pixel index ``i`` in an extent ``n``."""
    return -1.0 + (2.0 * np.asarray(i, dtype=np.float64) + 1.0) / n


def pixel_to_normalized(p, width: int, height: int) -> np.ndarray:
    """Continuous pixel-index coordinates ``(x, y)`` to normalized ones."""
    if width < 1 or height < 1:
        raise ValueError("width and height must be >= 1")
    p = np.asarray(p, dtype=np.float64)
    ext = np.array([width, height], dtype=np.float64)
    return (2.0 * p + 1.0) / ext - 1.0


def normalized_to_pixel(p, width: int, height: int) -> np.ndarray:
    if width < 1 or height < 1:
        raise ValueError("width and height must be >= 1")
    p = np.asarray(p, dtype=np.float64)
    ext = np.array([width, height], dtype=np.float64)
    return ((p + 1.0) * ext - 1.0) / 2.0


# --------------------------------------------------------------------------
# grids and sampling


def _base_grid(out_h: int, out_w: int) -> np.ndarray:
    """Homogeneous source coordinates ``[out_h, out_w, 3]`` (x, y, 1)."""
    if out_h < 1 or out_w < 1:
        raise ValueError("grid extent must be >= 1")
    xs = normalized_center(np.arange(out_w), out_w)
    ys = normalized_center(np.arange(out_h), out_h)
    g = np.ones((out_h, out_w, 3))
    g[..., 0] = xs[None, :]
    g[..., 1] = ys[:, None]
    return g


def generate_grid(T, out_h: int, out_w: int) -> np.ndarray:
    """Sampling grid ``[out_h, out_w, 2]`` = T applied to each output pixel centre.

    ``T`` may be an :class:`AffineTransform` or an array of matrices
    ``[..., 2, 3]``, giving a grid of shape ``[..., out_h, out_w, 2]``.
    """
    m = T.matrix() if isinstance(T, AffineTransform) else np.asarray(T, dtype=np.float64)
    base = _base_grid(out_h, out_w)
    return np.einsum("hwk,...ik->...hwi", base, m)


def generate_grid_backward(grad_grid: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the ``[..., 2, 3]`` matrix given ``dL/dgrid``."""
    out_h, out_w = grad_grid.shape[-3], grad_grid.shape[-2]
    base = _base_grid(out_h, out_w)
    return np.einsum("...hwi,hwk->...ik", grad_grid, base)


def _prep_sample(F: np.ndarray, grid: np.ndarray):
    F = np.asarray(F, dtype=np.float64)
    grid = np.asarray(grid, dtype=np.float64)
    squeeze = F.ndim == 3
    if squeeze:
        F, grid = F[None], grid[None]
    if F.ndim != 4 or grid.ndim != 4 or grid.shape[-1] != 2 or grid.shape[0] != F.shape[0]:
        raise DimensionError(f"bilinear_sample: F {F.shape}, grid {grid.shape}")
    b, c, H, W = F.shape
    px = ((grid[..., 0] + 1.0) * W - 1.0) / 2.0
    py = ((grid[..., 1] + 1.0) * H - 1.0) / 2.0
    for arr in (px, py):
        r = np.rint(arr)
        near = np.abs(arr - r) < _SNAP
        arr[near] = r[near]
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    wx = px - x0
    wy = py - y0
    corners = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        yy, xx = y0 + dy, x0 + dx
        valid = (yy >= 0) & (yy < H) & (xx >= 0) & (xx < W)
        idx = np.where(valid, yy * W + xx, 0)
        corners.append((idx, valid))
    return F, squeeze, wx, wy, corners


def _gather(Ff: np.ndarray, idx: np.ndarray, valid: np.ndarray) -> np.ndarray:
    # Ff: [B, C, H*W]; idx/valid: [B, h, w] -> [B, C, h, w]
    b = Ff.shape[0]
    vals = np.take_along_axis(Ff, idx.reshape(b, 1, -1), axis=2).reshape(Ff.shape[:2] + idx.shape[1:])
    return vals * valid[:, None]


def bilinear_sample(F: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Sample ``F [C,H,W]`` at ``grid [h,w,2]`` with a bilinear kernel.

    Out-of-image neighbours read as zero. Batched ``[B,C,H,W]`` / ``[B,h,w,2]``
    inputs are accepted too.
    """
    F, squeeze, wx, wy, corners = _prep_sample(F, grid)
    b, c, H, W = F.shape
    # channel-last rows so one gather fetches every channel of all four corners
    rows = F.transpose(0, 2, 3, 1).reshape(b * H * W, c)
    offs = (np.arange(b) * (H * W)).reshape(1, b, 1)
    idx = np.stack([i.reshape(b, -1) for i, _ in corners]) + offs  # [4, B, q]
    w = np.stack([(1 - wy) * (1 - wx), (1 - wy) * wx, wy * (1 - wx), wy * wx]).reshape(4, b, -1)
    w = w * np.stack([v.reshape(b, -1) for _, v in corners])
    out = np.einsum("kbqc,kbq->bcq", rows[idx], w).reshape((b, c) + wx.shape[1:])
    return out[0] if squeeze else out


def bilinear_sample_backward(F: np.ndarray, grid: np.ndarray, grad_out: np.ndarray):
    """Return ``(grad_F, grad_grid)`` for :func:`bilinear_sample`."""
    F, squeeze, wx, wy, corners = _prep_sample(F, grid)
    go = np.asarray(grad_out, dtype=np.float64)
    if squeeze:
        go = go[None]
    b, c, H, W = F.shape
    Ff = F.reshape(b, c, -1)
    (i00, v00), (i01, v01), (i10, v10), (i11, v11) = corners
    f00 = _gather(Ff, i00, v00)
    f01 = _gather(Ff, i01, v01)
    f10 = _gather(Ff, i10, v10)
    f11 = _gather(Ff, i11, v11)

    # d out / d px, d out / d py, summed over channels against grad_out
    dwx = ((1 - wy)[:, None] * (f01 - f00) + wy[:, None] * (f11 - f10))
    dwy = ((1 - wx)[:, None] * (f10 - f00) + wx[:, None] * (f11 - f01))
    gpx = (go * dwx).sum(axis=1)
    gpy = (go * dwy).sum(axis=1)
    grad_grid = np.stack([gpx * (W / 2.0), gpy * (H / 2.0)], axis=-1)

    n = b * H * W
    offs = np.broadcast_to((np.arange(b) * (H * W))[:, None, None], i00.shape)
    chan = (np.arange(c) * n)[:, None]
    go_c = go.transpose(1, 0, 2, 3).reshape(c, -1)
    flat = np.zeros(c * n)
    for idx, valid, w in (
        (i00, v00, (1 - wy) * (1 - wx)),
        (i01, v01, (1 - wy) * wx),
        (i10, v10, wy * (1 - wx)),
        (i11, v11, wy * wx),
    ):
        gidx = (chan + (idx + offs).ravel()[None, :]).ravel()
        contrib = (go_c * (w * valid).ravel()[None, :]).ravel()
        flat += np.bincount(gidx, weights=contrib, minlength=c * n)
    grad_F = flat.reshape(c, b, H, W).transpose(1, 0, 2, 3).copy()
    if squeeze:
        return grad_F[0], grad_grid[0]
    return grad_F, grad_grid


# --------------------------------------------------------------------------
# many crops of one map: sampling as a product with an interpolation matrix


def _interp_matrix(grid: np.ndarray, H: int, W: int):
    """Dense bilinear weights ``[B, H*W, K*h*w]`` for grids ``[B, K, h, w, 2]``."""
    b = grid.shape[0]
    q = int(np.prod(grid.shape[1:4]))
    px = ((grid[..., 0] + 1.0) * W - 1.0) / 2.0
    py = ((grid[..., 1] + 1.0) * H - 1.0) / 2.0
    for arr in (px, py):
        r = np.rint(arr)
        near = np.abs(arr - r) < _SNAP
        arr[near] = r[near]
    px, py = px.reshape(b, q), py.reshape(b, q)
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    wx, wy = px - x0, py - y0
    S = np.zeros((b, H * W, q))
    bi = np.broadcast_to(np.arange(b)[:, None], (b, q))
    qi = np.broadcast_to(np.arange(q)[None, :], (b, q))
    corners = []
    for dy, dx, w in ((0, 0, (1 - wy) * (1 - wx)), (0, 1, (1 - wy) * wx), (1, 0, wy * (1 - wx)), (1, 1, wy * wx)):
        yy, xx = y0 + dy, x0 + dx
        valid = (yy >= 0) & (yy < H) & (xx >= 0) & (xx < W)
        idx = np.where(valid, np.clip(yy, 0, H - 1) * W + np.clip(xx, 0, W - 1), 0)
        # one corner never repeats an (b, idx, q) triple, so plain += is safe
        S[bi, idx, qi] += w * valid
        corners.append((idx, valid))
    return S, corners, wx, wy, bi, qi


def sample_crops(F: np.ndarray, thetas: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resample ``F [B,C,H,W]`` through ``thetas [B,K,2,3]`` -> ``[B,K,C,out_h,out_w]``.

    Same values as :func:`bilinear_sample` on each (map, transform) pair.
    """
    b, c = F.shape[:2]
    k = thetas.shape[1]
    # stack the K crops along the grid's row axis and gather once
    grid = generate_grid(thetas, out_h, out_w).reshape(b, k * out_h, out_w, 2)
    out = bilinear_sample(F, grid)
    return out.reshape(b, c, k, out_h, out_w).transpose(0, 2, 1, 3, 4)


def sample_crops_backward(F: np.ndarray, thetas: np.ndarray, grad_out: np.ndarray):
    """Return ``(grad_F [B,C,H,W], grad_thetas [B,K,2,3])`` for :func:`sample_crops`."""
    b, c, H, W = F.shape
    k, _, out_h, out_w = grad_out.shape[1:]
    grid = generate_grid(thetas, out_h, out_w)
    S, corners, wx, wy, bi, qi = _interp_matrix(grid, H, W)
    go = grad_out.transpose(0, 2, 1, 3, 4).reshape(b, c, -1)
    Ff = F.reshape(b, c, H * W)
    grad_F = (go @ S.transpose(0, 2, 1)).reshape(F.shape)
    gS = Ff.transpose(0, 2, 1) @ go  # [B, H*W, q]
    g = [gS[bi, idx, qi] * valid for idx, valid in corners]
    gpx = (g[1] - g[0]) * (1 - wy) + (g[3] - g[2]) * wy
    gpy = (g[2] - g[0]) * (1 - wx) + (g[3] - g[1]) * wx
    grad_grid = np.stack([gpx * (W / 2.0), gpy * (H / 2.0)], axis=-1).reshape(b, k, out_h, out_w, 2)
    return grad_F, generate_grid_backward(grad_grid)
