import dataclasses

import numpy as np
import pytest

from landmark_stn.errors import FormatError
from landmark_stn.synth import (
    CANONICAL_LANDMARKS,
    CLUTTER_LEVELS,
    SCALE_CLASSES,
    DatasetConfig,
    GeneratorConfig,
    clutter_level,
    generate_sample,
    load_split,
    read_dataset,
    read_manifest,
    stratify,
    write_dataset,
    write_manifest,
)

STILL = dict(pose_jitter=0.0, clutter_max=0)


def test_identity_transform_gives_canonical_landmarks():
    rec = generate_sample(3, GeneratorConfig(transform=(1, 0, 0, 1, 0, 0), **STILL))
    assert np.array_equal(rec.landmarks.points, CANONICAL_LANDMARKS)
    assert rec.landmarks.visible.all()
    assert rec.meta.clutter == 0


def test_pure_translation_shifts_every_landmark():
    rec = generate_sample(5, GeneratorConfig(transform=(1, 0, 0, 1, 0.5, 0), **STILL))
    np.testing.assert_array_equal(rec.landmarks.points - CANONICAL_LANDMARKS, np.tile([0.5, 0.0], (6, 1)))


def test_regeneration_is_bit_identical():
    cfg = GeneratorConfig()
    for seed in (0, 17, 123):
        a, b = generate_sample(seed, cfg), generate_sample(seed, cfg)
        assert a.image.tobytes() == b.image.tobytes()
        assert a.landmarks.points.tobytes() == b.landmarks.points.tobytes()
        assert np.array_equal(a.landmarks.visible, b.landmarks.visible)
        assert a.meta.transform == b.meta.transform


def test_sample_invariants():
    cfg = GeneratorConfig()
    for seed in range(40):
        rec = generate_sample(seed, cfg)
        assert rec.image.shape == (1, 64, 64)
        assert rec.image.min() >= 0.0 and rec.image.max() <= 1.0
        pts, vis = rec.landmarks.points, rec.landmarks.visible
        assert np.all(np.abs(pts[vis]) <= 1.0)
        assert np.all(np.any(np.abs(pts[~vis]) > 1.0, axis=1))
        assert rec.meta.scale_class in SCALE_CLASSES
        assert clutter_level(rec.meta.clutter) in CLUTTER_LEVELS


def test_off_image_translation_marks_landmarks_invisible():
    rec = generate_sample(0, GeneratorConfig(transform=(1, 0, 0, 1, 1.2, 0), **STILL))
    # the right-hand landmarks leave the frame, the left-hand ones stay
    assert not rec.landmarks.visible.all() and rec.landmarks.visible.any()


def test_extent_too_small():
    with pytest.raises(ValueError):
        generate_sample(0, GeneratorConfig(extent=16))


def small_dataset(tmp_path, **kw):
    cfg = DatasetConfig(train=4, val=2, test=4, seed=100, gen=GeneratorConfig(**kw))
    return cfg, write_dataset(cfg, tmp_path)


def test_round_trip_is_lossless(tmp_path):
    cfg, manifest = small_dataset(tmp_path)
    m2, splits = read_dataset(tmp_path)
    assert m2.entries == manifest.entries
    for split, seeds in cfg.split_seeds().items():
        records = list(splits[split])
        assert [r.meta.seed for r in records] == seeds
        for rec, seed in zip(records, seeds):
            ref = generate_sample(seed, cfg.gen)
            assert rec.image.tobytes() == ref.image.tobytes()
            assert rec.landmarks.points.tobytes() == ref.landmarks.points.tobytes()
            assert np.array_equal(rec.landmarks.visible, ref.landmarks.visible)
            assert rec.meta.transform == ref.meta.transform


def test_corrupted_byte_names_the_sample(tmp_path):
    _, manifest = small_dataset(tmp_path)
    entry = manifest.split_entries("test")[2]
    blob = bytearray((tmp_path / "test.bin").read_bytes())
    blob[entry.offset + entry.length // 2] ^= 0xFF
    (tmp_path / "test.bin").write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="test sample 2: checksum"):
        load_split(tmp_path, "test")
    load_split(tmp_path, "train")  # other splits unaffected


def test_truncated_blob_and_version_mismatch(tmp_path):
    _, manifest = small_dataset(tmp_path)
    data = (tmp_path / "val.bin").read_bytes()
    (tmp_path / "val.bin").write_bytes(data[:-10])
    with pytest.raises(FormatError, match="val sample 1: truncated"):
        load_split(tmp_path, "val")
    text = (tmp_path / "manifest.txt").read_text().replace("lmsynth-1", "lmsynth-0")
    (tmp_path / "manifest.txt").write_text(text)
    with pytest.raises(FormatError, match="version"):
        read_manifest(tmp_path / "manifest.txt")


def test_overlapping_split_seeds_rejected(tmp_path):
    _, manifest = small_dataset(tmp_path)
    entries = list(manifest.entries)
    i = next(k for k, e in enumerate(entries) if e.split == "test")
    entries[i] = dataclasses.replace(entries[i], seed=entries[0].seed)
    write_manifest(dataclasses.replace(manifest, entries=entries), tmp_path / "manifest.txt")
    with pytest.raises(FormatError, match="appears in both"):
        read_manifest(tmp_path / "manifest.txt")


def test_split_seeds_are_disjoint():
    seeds = DatasetConfig().split_seeds()
    assert sum(len(v) for v in seeds.values()) == len(set().union(*map(set, seeds.values())))


def test_stratify_matches_independent_scan(tmp_path):
    cfg = DatasetConfig(train=0, val=0, test=23, seed=7, gen=GeneratorConfig(balanced=False))
    manifest = write_dataset(cfg, tmp_path)
    bins = stratify(manifest)
    records = load_split(tmp_path, "test")
    for c in SCALE_CLASSES:
        assert bins[f"scale:{c}"] == [i for i, s in enumerate(records.scale_class) if s == c]
    for lvl in CLUTTER_LEVELS:
        assert bins[f"clutter:{lvl}"] == [i for i, k in enumerate(records.clutter) if clutter_level(k) == lvl]


def test_stratify_balanced_bins_within_one(tmp_path):
    cfg = DatasetConfig(train=0, val=0, test=22, seed=3)
    manifest = write_dataset(cfg, tmp_path)
    bins = stratify(manifest)
    for prefix in ("scale:", "clutter:"):
        sizes = [len(v) for k, v in bins.items() if k.startswith(prefix)]
        assert sum(sizes) == 22 and max(sizes) - min(sizes) <= 1


def test_stratify_single_class_reports_empty_bins(tmp_path, caplog):
    cfg = DatasetConfig(train=0, val=0, test=4, seed=0, gen=GeneratorConfig(clutter_max=0))
    manifest = write_dataset(cfg, tmp_path)
    with caplog.at_level("WARNING"):
        bins = stratify(manifest)
    assert bins["clutter:none"] == [0, 1, 2, 3]
    assert bins["clutter:high"] == []
    assert "clutter:high" in caplog.text


def test_load_split_arrays(tmp_path):
    small_dataset(tmp_path)
    arr = load_split(tmp_path, "train")
    assert arr.images.shape == (4, 1, 64, 64) and arr.landmarks.shape == (4, 6, 2)
    assert np.all(arr.area > 0)
    sub = arr.subset([2, 0])
    assert sub.seeds == [arr.seeds[2], arr.seeds[0]]
