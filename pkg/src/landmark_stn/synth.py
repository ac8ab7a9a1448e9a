"""Procedural garment images with exact landmark annotations.

A canonical T-shirt polygon in template coordinates carries six landmark
vertices (collar, sleeve cuff and hem corners, left then right). Each sample
jitters the landmark vertices (pose), maps the polygon through a random global
affine (scale class, rotation, anisotropy, off-centre translation), renders it
with shading over a cluttered background, and records where the landmarks
ended up. Everything is a pure function of ``(seed, config)``.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterator, Optional

import numba
import numpy as np

from .errors import FormatError
from .geometry import AffineTransform, affine_apply, affine_inverse, normalized_center
from .hrst import LandmarkSet
from .losses import convex_hull_area
from .tensor import tensor_from_bytes, tensor_to_bytes

log = logging.getLogger(__name__)

SCALE_CLASSES = ("XS", "S", "M", "L", "XL")
# garment extent as a fraction of the image extent
SCALE_FRACTIONS = {"XS": 0.10, "S": 0.25, "M": 0.50, "L": 0.75, "XL": 0.95}
CLUTTER_LEVELS = ("none", "low", "medium", "high")
_CLUTTER_RANGES = {"none": (0, 0), "low": (1, 2), "medium": (3, 5), "high": (6, 8)}

FORMAT_VERSION = "lmsynth-1"
SPLITS = ("train", "val", "test")

# template polygon; entries with a landmark index are annotated vertices
_TEMPLATE = [
    ((-0.25, -0.85), 0),  # left collar
    ((0.0, -0.65), None),
    ((0.25, -0.85), 1),  # right collar
    ((0.60, -0.80), None),
    ((0.98, -0.30), None),
    ((0.78, -0.08), 3),  # right sleeve cuff
    ((0.52, -0.32), None),
    ((0.55, 0.90), 5),  # right hem
    ((-0.55, 0.90), 4),  # left hem
    ((-0.52, -0.32), None),
    ((-0.78, -0.08), 2),  # left sleeve cuff
    ((-0.98, -0.30), None),
    ((-0.60, -0.80), None),
]
TEMPLATE_POLYGON = np.array([v for v, _ in _TEMPLATE])
LANDMARK_VERTEX = {j: i for i, (_, j) in enumerate(_TEMPLATE) if j is not None}
CANONICAL_LANDMARKS = np.array([TEMPLATE_POLYGON[LANDMARK_VERTEX[j]] for j in range(6)])


@dataclass
class GeneratorConfig:
    extent: int = 64
    num_landmarks: int = 6
    rotation_deg: float = 20.0
    anisotropy: float = 0.15
    scale_jitter: float = 0.1
    center_deviation: float = 0.9
    pose_jitter: float = 0.05
    clutter_max: int = 8
    noise_std: float = 0.03
    supersample: int = 2
    balanced: bool = True
    # fixed global affine (six values) instead of a random one
    transform: Optional[tuple] = None

    def validate(self) -> None:
        if self.extent < 32:
            raise ValueError(f"extent must be >= 32 to rasterize the template, got {self.extent}")
        if self.num_landmarks != 6:
            raise ValueError("the garment template has exactly 6 landmarks")
        if not 0 <= self.clutter_max <= 8:
            raise ValueError("clutter_max must lie in [0, 8]")
        if self.supersample < 1:
            raise ValueError("supersample must be >= 1")


@dataclass
class SampleMeta:
    seed: int
    scale_class: str
    clutter: int
    transform: AffineTransform

    @property
    def clutter_level(self) -> str:
        return clutter_level(self.clutter)


@dataclass
class SampleRecord:
    image: np.ndarray  # [1, H, W] in [0, 1]
    landmarks: LandmarkSet
    meta: SampleMeta


def clutter_level(count: int) -> str:
    for name, (lo, hi) in _CLUTTER_RANGES.items():
        if lo <= count <= hi:
            return name
    raise ValueError(f"clutter count {count} out of range")


def _inside(px: np.ndarray, py: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Even-odd point-in-polygon for arrays of query points."""
    inside = np.zeros(px.shape, dtype=bool)
    n = len(poly)
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        if y1 == y2:
            continue
        crosses = (y1 > py) != (y2 > py)
        xint = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (px < xint)
    return inside


def _sample_points(extent: int, ss: int):
    offs = (np.arange(ss) + 0.5) / ss - 0.5  # sub-pixel offsets in pixels
    idx = (np.arange(extent)[:, None] + offs[None, :]).ravel()
    coords = normalized_center(idx, extent)
    ys, xs = np.meshgrid(coords, coords, indexing="ij")
    return xs, ys


def _downsample(img: np.ndarray, extent: int, ss: int) -> np.ndarray:
    return img.reshape(extent, ss, extent, ss).mean(axis=(1, 3))


def _random_transform(rng: np.random.Generator, cfg: GeneratorConfig, scale_class: str) -> AffineTransform:
    s = SCALE_FRACTIONS[scale_class] * (1.0 + rng.uniform(-cfg.scale_jitter, cfg.scale_jitter))
    ang = np.deg2rad(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg))
    ax = s * (1.0 + rng.uniform(-cfg.anisotropy, cfg.anisotropy))
    ay = s * (1.0 + rng.uniform(-cfg.anisotropy, cfg.anisotropy))
    c, sn = np.cos(ang), np.sin(ang)
    a = np.array([[c, -sn], [sn, c]]) @ np.diag([ax, ay])
    room = max(1.0 - s, 0.05) * cfg.center_deviation
    t = rng.uniform(-room, room, size=2)
    return AffineTransform(a, t)


def _clutter_shape(rng: np.random.Generator, xs, ys, small: bool) -> np.ndarray:
    cx, cy = rng.uniform(-1, 1, size=2)
    r = rng.uniform(0.05, 0.2) if small else rng.uniform(0.1, 0.45)
    if rng.uniform() < 0.5:
        ang = rng.uniform(0, np.pi)
        rx, ry = r, r * rng.uniform(0.4, 1.0)
        dx, dy = xs - cx, ys - cy
        u = dx * np.cos(ang) + dy * np.sin(ang)
        v = -dx * np.sin(ang) + dy * np.cos(ang)
        return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
    k = int(rng.integers(3, 6))
    angs = np.sort(rng.uniform(0, 2 * np.pi, size=k))
    rad = r * rng.uniform(0.6, 1.0, size=k)
    poly = np.stack([cx + rad * np.cos(angs), cy + rad * np.sin(angs)], axis=1)
    return _inside(xs, ys, poly)


def generate_sample(seed: int, cfg: GeneratorConfig) -> SampleRecord:
    cfg.validate()
    rng = np.random.default_rng(seed)
    if cfg.balanced:
        scale_class = SCALE_CLASSES[seed % len(SCALE_CLASSES)]
        level = CLUTTER_LEVELS[seed % len(CLUTTER_LEVELS)]
    else:
        scale_class = SCALE_CLASSES[int(rng.integers(len(SCALE_CLASSES)))]
        level = CLUTTER_LEVELS[int(rng.integers(len(CLUTTER_LEVELS)))]
    lo, hi = _CLUTTER_RANGES[level]
    lo, hi = min(lo, cfg.clutter_max), min(hi, cfg.clutter_max)
    n_clutter = int(rng.integers(lo, hi + 1))

    if cfg.transform is not None:
        T = AffineTransform.from_params(cfg.transform)
    else:
        T = _random_transform(rng, cfg, scale_class)

    poly = TEMPLATE_POLYGON.copy()
    jitter = rng.normal(0.0, cfg.pose_jitter, size=(6, 2)) if cfg.pose_jitter > 0 else np.zeros((6, 2))
    for j, vi in LANDMARK_VERTEX.items():
        poly[vi] = poly[vi] + jitter[j]
    template_lms = np.array([poly[LANDMARK_VERTEX[j]] for j in range(6)])
    points = affine_apply(T, template_lms)
    visible = np.all(np.abs(points) <= 1.0, axis=1)

    n, ss = cfg.extent, cfg.supersample
    xs, ys = _sample_points(n, ss)
    # background: level plus a linear ramp
    base = rng.uniform(0.05, 0.35)
    gx, gy = rng.uniform(-0.1, 0.1, size=2)
    img = base + gx * xs + gy * ys

    behind = n_clutter - n_clutter // 3
    for k in range(n_clutter):
        shade = rng.uniform(0.0, 1.0)
        if k == behind:
            img = _draw_garment(img, xs, ys, T, poly, rng)
        img = np.where(_clutter_shape(rng, xs, ys, small=k >= behind), shade, img)
    if behind == n_clutter:
        img = _draw_garment(img, xs, ys, T, poly, rng)

    img = _downsample(img, n, ss)
    if cfg.noise_std > 0:
        img = img + rng.normal(0.0, cfg.noise_std, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return SampleRecord(
        image=img[None].astype(np.float64),
        landmarks=LandmarkSet(points, visible),
        meta=SampleMeta(seed=int(seed), scale_class=scale_class, clutter=n_clutter, transform=T),
    )


def _draw_garment(img, xs, ys, T: AffineTransform, poly, rng) -> np.ndarray:
    try:
        inv = affine_inverse(T)
    except ArithmeticError:
        return img
    q = affine_apply(inv, np.stack([xs, ys], axis=-1))
    qx, qy = q[..., 0], q[..., 1]
    mask = _inside(qx, qy, poly)
    body = rng.uniform(0.55, 0.8)
    shade = body + 0.15 * qy  # vertical ramp: darker shoulders, lighter hem
    shade = np.where(np.abs(qx) > 0.55, body + 0.2, shade)  # sleeves
    shade = np.where(qy < -0.6, body - 0.3, shade)  # collar band
    return np.where(mask, np.clip(shade, 0.0, 1.0), img)


# --------------------------------------------------------------------------
# dataset files


@dataclass
class DatasetConfig:
    train: int = 1600
    val: int = 800
    test: int = 600
    seed: int = 0
    gen: GeneratorConfig = field(default_factory=GeneratorConfig)

    def split_seeds(self) -> dict:
        out, start = {}, self.seed
        for name in SPLITS:
            count = getattr(self, name)
            out[name] = list(range(start, start + count))
            start += count
        return out


@dataclass
class ManifestEntry:
    split: str
    index: int
    seed: int
    scale_class: str
    clutter: int
    offset: int
    length: int
    checksum: int
    transform: AffineTransform


@dataclass
class DatasetManifest:
    version: str
    extent: int
    num_landmarks: int
    counts: dict
    gen: dict
    entries: list

    def split_entries(self, split: str) -> list:
        return [e for e in self.entries if e.split == split]

    def validate(self) -> None:
        if self.version != FORMAT_VERSION:
            raise FormatError(f"manifest version {self.version!r}, expected {FORMAT_VERSION!r}")
        seen: dict = {}
        for e in self.entries:
            if e.seed in seen and seen[e.seed] != e.split:
                raise FormatError(f"seed {e.seed} appears in both {seen[e.seed]!r} and {e.split!r} splits")
            seen[e.seed] = e.split
        for name in SPLITS:
            if len(self.split_entries(name)) != self.counts.get(name, 0):
                raise FormatError(f"split {name!r}: manifest lists {len(self.split_entries(name))} samples, "
                                  f"header says {self.counts.get(name, 0)}")


@numba.njit(cache=True)
def _fnv1a64(data):
    h = np.uint64(0xCBF29CE484222325)
    prime = np.uint64(0x100000001B3)
    for b in data:
        h = (h ^ np.uint64(b)) * prime
    return h


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a."""
    return int(_fnv1a64(np.frombuffer(data, dtype=np.uint8)))


def _encode_sample(rec: SampleRecord) -> bytes:
    return (
        tensor_to_bytes(rec.image)
        + tensor_to_bytes(rec.landmarks.points)
        + tensor_to_bytes(rec.landmarks.visible.astype(np.float64))
    )


def _decode_sample(blob: bytes, entry: ManifestEntry) -> SampleRecord:
    img, off = tensor_from_bytes(blob, 0)
    pts, off = tensor_from_bytes(blob, off)
    vis, off = tensor_from_bytes(blob, off)
    if off != len(blob):
        raise FormatError(f"{entry.split} sample {entry.index}: {len(blob) - off} trailing bytes")
    meta = SampleMeta(entry.seed, entry.scale_class, entry.clutter, entry.transform)
    return SampleRecord(image=img, landmarks=LandmarkSet(pts, vis > 0.5), meta=meta)


def _gen_items(cfg: GeneratorConfig) -> dict:
    return {f.name: getattr(cfg, f.name) for f in fields(cfg)}


def write_dataset(cfg: DatasetConfig, path) -> DatasetManifest:
    """Write ``manifest.txt`` plus ``train.bin``/``val.bin``/``test.bin`` under ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for split, seeds in cfg.split_seeds().items():
        offset = 0
        with open(path / f"{split}.bin", "wb") as fp:
            for i, s in enumerate(seeds):
                rec = generate_sample(s, cfg.gen)
                blob = _encode_sample(rec)
                fp.write(blob)
                entries.append(
                    ManifestEntry(split, i, s, rec.meta.scale_class, rec.meta.clutter, offset, len(blob),
                                  fnv1a64(blob), rec.meta.transform)
                )
                offset += len(blob)
    manifest = DatasetManifest(
        version=FORMAT_VERSION,
        extent=cfg.gen.extent,
        num_landmarks=cfg.gen.num_landmarks,
        counts={name: getattr(cfg, name) for name in SPLITS},
        gen=_gen_items(cfg.gen),
        entries=entries,
    )
    write_manifest(manifest, path / "manifest.txt", seed=cfg.seed)
    return manifest


def write_manifest(m: DatasetManifest, file, seed: int = 0) -> None:
    lines = [
        f"version = {m.version}",
        f"extent = {m.extent}",
        f"num_landmarks = {m.num_landmarks}",
        f"seed = {seed}",
    ]
    lines += [f"{name} = {m.counts[name]}" for name in SPLITS]
    lines += [f"gen.{k} = {v}" for k, v in m.gen.items()]
    for e in m.entries:
        lines.append(
            f"sample {e.split} {e.index} {e.seed} {e.scale_class} {e.clutter} "
            f"{e.offset} {e.length} {e.checksum:016x} {e.transform.to_text()}"
        )
    Path(file).write_text("\n".join(lines) + "\n")


def read_manifest(file) -> DatasetManifest:
    header: dict = {}
    entries = []
    for lineno, line in enumerate(Path(file).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("sample "):
            tok = line.split()
            if len(tok) != 15:
                raise FormatError(f"manifest line {lineno}: expected 15 fields, got {len(tok)}")
            entries.append(
                ManifestEntry(
                    split=tok[1], index=int(tok[2]), seed=int(tok[3]), scale_class=tok[4], clutter=int(tok[5]),
                    offset=int(tok[6]), length=int(tok[7]), checksum=int(tok[8], 16),
                    transform=AffineTransform.from_text(" ".join(tok[9:15])),
                )
            )
            continue
        if "=" not in line:
            raise FormatError(f"manifest line {lineno}: cannot parse {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        header[k] = v
    try:
        m = DatasetManifest(
            version=header["version"],
            extent=int(header["extent"]),
            num_landmarks=int(header["num_landmarks"]),
            counts={name: int(header.get(name, 0)) for name in SPLITS},
            gen={k[4:]: v for k, v in header.items() if k.startswith("gen.")},
            entries=entries,
        )
    except KeyError as exc:
        raise FormatError(f"manifest is missing {exc.args[0]!r}") from None
    m.validate()
    return m


def iter_samples(path, split: str, manifest: Optional[DatasetManifest] = None) -> Iterator[SampleRecord]:
    """Yield checksum-verified samples of one split in index order."""
    path = Path(path)
    manifest = manifest or read_manifest(path / "manifest.txt")
    data = (path / f"{split}.bin").read_bytes()
    for e in manifest.split_entries(split):
        blob = data[e.offset:e.offset + e.length]
        if len(blob) != e.length:
            raise FormatError(f"{split} sample {e.index}: truncated blob ({len(blob)} of {e.length} bytes)")
        if fnv1a64(blob) != e.checksum:
            raise FormatError(f"{split} sample {e.index}: checksum mismatch")
        try:
            yield _decode_sample(blob, e)
        except (EOFError, struct.error) as exc:
            raise FormatError(f"{split} sample {e.index}: {exc}") from None


def read_dataset(path):
    """Return ``(manifest, {split: sample iterator})``."""
    path = Path(path)
    manifest = read_manifest(path / "manifest.txt")
    return manifest, {name: iter_samples(path, name, manifest) for name in SPLITS}


@dataclass
class SplitArrays:
    """One split stacked into arrays for batched training and evaluation."""

    images: np.ndarray  # [N, 1, H, W]
    landmarks: np.ndarray  # [N, J, 2]
    visible: np.ndarray  # [N, J]
    area: np.ndarray  # [N] convex-hull area of visible ground truth
    scale_class: list
    clutter: list
    seeds: list
    transforms: np.ndarray  # [N, 2, 3] generating affine

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx) -> "SplitArrays":
        idx = np.asarray(idx, dtype=np.int64)
        return SplitArrays(
            self.images[idx], self.landmarks[idx], self.visible[idx], self.area[idx],
            [self.scale_class[i] for i in idx], [self.clutter[i] for i in idx],
            [self.seeds[i] for i in idx], self.transforms[idx],
        )


def stack_records(records) -> SplitArrays:
    records = list(records)
    J = 6
    if records:
        J = len(records[0].landmarks)
    area = [
        convex_hull_area(r.landmarks.points, r.landmarks.visible) if r.landmarks.visible.any() else 0.0
        for r in records
    ]
    return SplitArrays(
        images=np.stack([r.image for r in records]) if records else np.zeros((0, 1, 1, 1)),
        landmarks=np.stack([r.landmarks.points for r in records]) if records else np.zeros((0, J, 2)),
        visible=np.stack([r.landmarks.visible for r in records]) if records else np.zeros((0, J), bool),
        area=np.array(area, dtype=np.float64),
        scale_class=[r.meta.scale_class for r in records],
        clutter=[r.meta.clutter for r in records],
        seeds=[r.meta.seed for r in records],
        transforms=np.stack([r.meta.transform.matrix() for r in records]) if records else np.zeros((0, 2, 3)),
    )


def load_split(path, split: str) -> SplitArrays:
    return stack_records(iter_samples(path, split))


def generate_split(seeds, cfg: GeneratorConfig) -> SplitArrays:
    return stack_records(generate_sample(s, cfg) for s in seeds)


def stratify(manifest: DatasetManifest, split: str = "test") -> dict:
    """Indices of ``split`` grouped by ``scale:<class>`` and ``clutter:<level>``.

    Every bin is present; empty ones are logged rather than dropped.
    """
    bins: dict = {f"scale:{c}": [] for c in SCALE_CLASSES}
    bins.update({f"clutter:{lvl}": [] for lvl in CLUTTER_LEVELS})
    for e in manifest.split_entries(split):
        bins[f"scale:{e.scale_class}"].append(e.index)
        bins[f"clutter:{clutter_level(e.clutter)}"].append(e.index)
    for k, v in bins.items():
        if not v:
            log.warning("stratify: bin %s of split %s is empty", k, split)
    return bins
