"""SGD-with-momentum training, evaluation, and checkpoints."""

from __future__ import annotations

import csv
import json
import math
import logging
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .errors import DegenerateInputError, DivergenceError, FormatError, NumericError
from .geometry import matrices_det, normalized_to_pixel
from .hrst import LANDMARK_NAMES, hrst_forward
from .losses import landmark_hits, pdl_threshold, regression_terms, scale_terms
from .model import ModelConfig, backbone_forward, loss_and_grads
from .synth import CLUTTER_LEVELS, SCALE_CLASSES, SplitArrays, clutter_level
from .tensor import tensor_from_bytes, tensor_to_bytes

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0
    # clip the global gradient norm to this value (0 disables)
    grad_clip: float = 5.0
    # "constant" or "cosine" (per-batch decay from lr to 0 over the run)
    schedule: str = "constant"
    checkpoint_interval: int = 0  # epochs; 0 disables
    checkpoint_dir: Optional[str] = None
    dataset: Optional[str] = None

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError(f"learning rate must be >= 0, got {self.lr}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"schedule must be constant or cosine, got {self.schedule!r}")

    def lr_at(self, step: int, total_steps: int) -> float:
        if self.schedule == "constant" or total_steps <= 0:
            return self.lr
        return 0.5 * self.lr * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class EpochStats:
    epoch: int
    train_regression: float
    train_scale: float
    train_total: float
    val_regression: float = float("nan")
    val_scale: float = float("nan")
    val_total: float = float("nan")
    # mean |4 det(a_j) - lam * C| over validation landmarks
    val_scale_residual: float = float("nan")


@dataclass
class TrainState:
    params: dict
    velocity: dict
    epoch: int  # epochs completed
    history: list = field(default_factory=list)


def _clip(grads: dict, max_norm: float) -> None:
    if max_norm <= 0:
        return
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if norm > max_norm:
        s = max_norm / norm
        for g in grads.values():
            g *= s


def batch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def sgd_step(params: dict, velocity: dict, grads: dict, lr: float, momentum: float) -> None:
    for k, g in grads.items():
        v = velocity[k]
        v *= momentum
        v += g
        params[k] -= lr * v


def _forward_batches(params, cfg: ModelConfig, data: SplitArrays, batch_size: int, steps: Optional[int] = None):
    for s in range(0, len(data), batch_size):
        fconv, _ = backbone_forward(params, cfg, data.images[s:s + batch_size])
        yield s, hrst_forward(params, fconv, cfg.steps if steps is None else steps, cfg.num_landmarks, cfg.use_stn)


def loss_summary(params: dict, cfg: ModelConfig, data: SplitArrays, batch_size: int = 64) -> dict:
    """Mean per-sample loss terms and the mean scale residual on ``data``."""
    sr = cfg.scale_reg()
    reg = sc = resid_sum = 0.0
    resid_n = 0
    for s, trace in _forward_batches(params, cfg, data, batch_size):
        e = s + trace.rel.shape[0]
        gt, vis, area = data.landmarks[s:e], data.visible[s:e], data.area[s:e]
        reg += float(regression_terms(gt, vis, trace.rel, trace.thetas).sum())
        if cfg.use_scale_reg:
            sc += float(scale_terms(trace.thetas, area, sr, vis).sum())
        active = vis.sum(axis=1) >= sr.min_visible
        r = np.abs(4.0 * matrices_det(trace.thetas) - cfg.lam * area[:, None])[active]
        resid_sum += float(r.sum())
        resid_n += r.size
    n = max(len(data), 1)
    return {
        "regression": reg / n,
        "scale": sc / n,
        "total": reg / n + sc / n,
        "scale_residual": resid_sum / resid_n if resid_n else float("nan"),
    }


def train(
    params: dict,
    cfg: ModelConfig,
    data: SplitArrays,
    tcfg: TrainConfig,
    val: Optional[SplitArrays] = None,
    resume: Optional[TrainState] = None,
    on_epoch: Optional[Callable[[TrainState], None]] = None,
) -> TrainState:
    """Train in place on a copy of ``params``; returns the final :class:`TrainState`.

    Determinism: batch order depends only on ``(tcfg.seed, epoch)`` and all
    reductions run in fixed order, so a resumed run replays an uninterrupted
    one bit for bit.
    """
    if len(data) == 0:
        raise DegenerateInputError("empty training split")
    if resume is not None:
        state = TrainState(
            {k: v.copy() for k, v in resume.params.items()},
            {k: v.copy() for k, v in resume.velocity.items()},
            resume.epoch,
            list(resume.history),
        )
    else:
        state = TrainState({k: v.copy() for k, v in params.items()}, {k: np.zeros_like(v) for k, v in params.items()}, 0)

    n = len(data)
    per_epoch = -(-n // tcfg.batch_size)
    for epoch in range(state.epoch, tcfg.epochs):
        order = batch_order(n, tcfg.seed, epoch)
        reg_sum = sc_sum = 0.0
        for bi, s in enumerate(range(0, n, tcfg.batch_size)):
            idx = np.sort(order[s:s + tcfg.batch_size])
            try:
                losses, grads, _ = loss_and_grads(
                    state.params, cfg, data.images[idx], data.landmarks[idx], data.visible[idx], data.area[idx]
                )
            except NumericError as exc:
                raise DivergenceError(epoch + 1, bi, float("nan")) from exc
            total = float(losses.total.mean())
            if not np.isfinite(total) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise DivergenceError(epoch + 1, bi, total)
            reg_sum += float(losses.regression.sum())
            sc_sum += float(losses.scale.sum())
            _clip(grads, tcfg.grad_clip)
            lr = tcfg.lr_at(epoch * per_epoch + bi, tcfg.epochs * per_epoch)
            sgd_step(state.params, state.velocity, grads, lr, tcfg.momentum)

        stats = EpochStats(epoch + 1, reg_sum / n, sc_sum / n, reg_sum / n + sc_sum / n)
        if val is not None and len(val):
            v = loss_summary(state.params, cfg, val)
            stats.val_regression, stats.val_scale = v["regression"], v["scale"]
            stats.val_total, stats.val_scale_residual = v["total"], v["scale_residual"]
        state.history.append(stats)
        state.epoch = epoch + 1
        log.info("epoch %d: train %.5f (reg %.5f, scale %.5f) val %.5f", stats.epoch, stats.train_total,
                 stats.train_regression, stats.train_scale, stats.val_total)
        if tcfg.checkpoint_interval and tcfg.checkpoint_dir and state.epoch % tcfg.checkpoint_interval == 0:
            save_checkpoint(Path(tcfg.checkpoint_dir) / f"epoch{state.epoch:04d}.ckpt", state, cfg, tcfg)
        if on_epoch is not None:
            on_epoch(state)
    return state


# --------------------------------------------------------------------------
# checkpoints: magic, u32 json length, json metadata, u32 tensor count,
# then (u32 name length, name, tensor) per tensor

_MAGIC = b"LMCKPT1\n"


def save_checkpoint(path, state: TrainState, cfg: ModelConfig, tcfg: TrainConfig) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "epoch": state.epoch,
        "history": [asdict(h) for h in state.history],
        "model": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg).items()},
        "train": asdict(tcfg),
    }
    tensors = [(f"param/{k}", v) for k, v in state.params.items()]
    tensors += [(f"velocity/{k}", v) for k, v in state.velocity.items()]
    header = json.dumps(meta).encode()
    parts = [_MAGIC, struct.pack("<I", len(header)), header, struct.pack("<I", len(tensors))]
    for name, t in tensors:
        nb = name.encode()
        parts += [struct.pack("<I", len(nb)), nb, tensor_to_bytes(t)]
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load_checkpoint(path):
    """Return ``(TrainState, ModelConfig, TrainConfig)``."""
    buf = Path(path).read_bytes()
    if not buf.startswith(_MAGIC):
        raise FormatError(f"{path}: not a checkpoint")
    try:
        off = len(_MAGIC)
        (hl,) = struct.unpack_from("<I", buf, off)
        off += 4
        meta = json.loads(buf[off:off + hl].decode())
        off += hl
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        params, velocity = {}, {}
        for _ in range(count):
            (nl,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off:off + nl].decode()
            off += nl
            t, off = tensor_from_bytes(buf, off)
            kind, key = name.split("/", 1)
            (params if kind == "param" else velocity)[key] = t
    except (struct.error, EOFError, ValueError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint ({exc})") from None
    cfg = ModelConfig(**meta["model"])
    tcfg = TrainConfig(**meta["train"])
    history = [EpochStats(**h) for h in meta["history"]]
    return TrainState(params, velocity, meta["epoch"], history), cfg, tcfg


# --------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    threshold_px: float
    pdl: float
    per_landmark: dict
    per_scale: dict
    per_clutter: dict
    per_step: dict  # step -> PDL with inference truncated at that step
    hits: np.ndarray = field(repr=False)  # [N, J] at the final step
    errors_px: np.ndarray = field(repr=False)  # [N, J]
    visible: np.ndarray = field(repr=False)
    losses: np.ndarray = field(repr=False)  # [N, 2]: regression, scale
    timing_ms: dict = field(default_factory=dict)  # step -> median forward time


def _pdl_or_nan(hits: np.ndarray, visible: np.ndarray) -> float:
    n = int(visible.sum())
    return 100.0 * int(hits.sum()) / n if n else float("nan")


def evaluate(
    params: dict,
    cfg: ModelConfig,
    data: SplitArrays,
    threshold_px: Optional[float] = None,
    batch_size: int = 64,
    predictions: Optional[np.ndarray] = None,
) -> EvalReport:
    """PDL overall, per landmark, per scale class, per clutter level and per step.

    ``predictions`` (normalized ``[N, J, 2]``) replaces the model output for
    the final step, which is how ground truth can be scored as a prediction.
    """
    if len(data) == 0:
        raise DegenerateInputError("cannot evaluate an empty split")
    ext = data.images.shape[-1]
    thr = pdl_threshold(ext) if threshold_px is None else float(threshold_px)
    if not thr > 0:
        raise ValueError("threshold_px must be positive")
    gt_px = normalized_to_pixel(data.landmarks, ext, data.images.shape[-2])
    sr = cfg.scale_reg()

    fconvs = [backbone_forward(params, cfg, data.images[s:s + batch_size])[0] for s in range(0, len(data), batch_size)]
    per_step, final = {}, None
    for step in range(1, cfg.steps + 1):
        preds, thetas, rels = [], [], []
        for fconv in fconvs:
            tr = hrst_forward(params, fconv, step, cfg.num_landmarks, cfg.use_stn)
            preds.append(tr.pred)
            thetas.append(tr.thetas)
            rels.append(tr.rel)
        pred = np.concatenate(preds)
        if step == cfg.steps:
            if predictions is not None:
                pred = np.asarray(predictions, dtype=np.float64)
            final = (pred, np.concatenate(thetas), np.concatenate(rels))
        hits = landmark_hits(gt_px, normalized_to_pixel(pred, ext, ext), data.visible, thr)
        per_step[step] = _pdl_or_nan(hits, data.visible)

    pred, thetas, rels = final
    pred_px = normalized_to_pixel(pred, ext, ext)
    hits = landmark_hits(gt_px, pred_px, data.visible, thr)
    errors = np.linalg.norm(gt_px - pred_px, axis=-1)
    overall = _pdl_or_nan(hits, data.visible)
    if np.isnan(overall):
        raise DegenerateInputError("no visible landmarks in split")
    per_step[cfg.steps] = overall

    names = LANDMARK_NAMES if cfg.num_landmarks == len(LANDMARK_NAMES) else tuple(
        f"landmark{j}" for j in range(cfg.num_landmarks)
    )
    per_landmark = {names[j]: _pdl_or_nan(hits[:, j], data.visible[:, j]) for j in range(cfg.num_landmarks)}
    cls = np.array(data.scale_class)
    lvl = np.array([clutter_level(c) for c in data.clutter])
    per_scale = {c: _pdl_or_nan(hits[cls == c], data.visible[cls == c]) for c in SCALE_CLASSES}
    per_clutter = {c: _pdl_or_nan(hits[lvl == c], data.visible[lvl == c]) for c in CLUTTER_LEVELS}

    if predictions is not None:
        reg = regression_terms(data.landmarks, data.visible, pred, np.broadcast_to(np.eye(2, 3), thetas.shape))
    else:
        reg = regression_terms(data.landmarks, data.visible, rels, thetas)
    sc = scale_terms(thetas, data.area, sr, data.visible) if cfg.use_scale_reg else np.zeros_like(reg)
    return EvalReport(
        threshold_px=thr, pdl=overall, per_landmark=per_landmark, per_scale=per_scale, per_clutter=per_clutter,
        per_step=per_step, hits=hits, errors_px=errors, visible=data.visible.copy(),
        losses=np.stack([reg.sum(axis=1), sc.sum(axis=1)], axis=1),
    )


def time_inference(params: dict, cfg: ModelConfig, images: np.ndarray, passes: int = 50) -> dict:
    """Median wall-clock (ms) of a full forward truncated at each step.

    Each pass times every step count back to back, so slow drift in machine
    load shifts all the medians alike instead of one of them.
    """
    steps = range(1, cfg.steps + 1)
    samples = {s: [] for s in steps}
    for _ in range(passes):
        for step in steps:
            t0 = time.perf_counter()
            fconv, _ = backbone_forward(params, cfg, images)
            hrst_forward(params, fconv, step, cfg.num_landmarks, cfg.use_stn)
            samples[step].append((time.perf_counter() - t0) * 1e3)
    out = {s: float(np.median(v)) for s, v in samples.items()}
    return out


# --------------------------------------------------------------------------
# reports


@dataclass
class RunReport:
    history: list  # EpochStats per epoch
    test: Optional[EvalReport] = None
    timing_ms: dict = field(default_factory=dict)  # step -> median forward ms

    def epoch_rows(self) -> list:
        names = [f.name for f in fields(EpochStats)]
        return [names] + [[getattr(h, n) for n in names] for h in self.history]

    def summary_rows(self) -> list:
        """``(section, key, value)`` rows; timing rows are kept separate."""
        rows = [["section", "key", "value"]]
        t = self.test
        if t is not None:
            rows.append(["pdl", "threshold_px", t.threshold_px])
            rows.append(["pdl", "overall", t.pdl])
            rows += [["landmark", k, v] for k, v in t.per_landmark.items()]
            rows += [["scale", k, v] for k, v in t.per_scale.items()]
            rows += [["clutter", k, v] for k, v in t.per_clutter.items()]
            rows += [["step", str(k), v] for k, v in sorted(t.per_step.items())]
        return rows

    def timing_rows(self) -> list:
        rows = [["step", "median_ms", "increment_ms"]]
        prev = None
        for k in sorted(self.timing_ms):
            v = self.timing_ms[k]
            rows.append([k, v, "" if prev is None else v - prev])
            prev = v
        return rows

    def sample_rows(self, seeds=None) -> list:
        """Per sample: id, per-landmark pixel error, hit flags, loss breakdown."""
        t = self.test
        if t is None:
            return []
        J = t.errors_px.shape[1]
        head = ["sample"] + [f"err{j}" for j in range(J)] + [f"hit{j}" for j in range(J)]
        head += ["regression", "scale", "total"]
        rows = [head]
        for i in range(len(t.errors_px)):
            sid = seeds[i] if seeds is not None else i
            err = [e if v else "" for e, v in zip(t.errors_px[i], t.visible[i])]
            reg, sc = t.losses[i]
            rows.append([sid] + err + [int(h) for h in t.hits[i]] + [reg, sc, reg + sc])
        return rows

    def fingerprint(self) -> str:
        """Digest of everything except wall-clock timing."""
        import hashlib

        h = hashlib.sha256()
        for rows in (self.epoch_rows(), self.summary_rows(), self.sample_rows()):
            for r in rows:
                h.update(repr(r).encode())
        return h.hexdigest()


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def write_report(report: RunReport, out_dir, seeds=None) -> None:
    out = Path(out_dir)
    write_csv(out / "epochs.csv", report.epoch_rows())
    if report.test is not None:
        write_csv(out / "summary.csv", report.summary_rows())
        write_csv(out / "samples.csv", report.sample_rows(seeds))
    if report.timing_ms:
        write_csv(out / "timing.csv", report.timing_rows())
