import numpy as np
import pytest

from landmark_stn.errors import ConfigError
from landmark_stn.geometry import identity_matrices
from landmark_stn.gradcheck import gradcheck, tiny_config
from landmark_stn.hrst import mlp_forward
from landmark_stn.model import (
    ModelConfig,
    backbone_forward,
    build_model,
    forward,
    loss_and_grads,
    parameter_count,
)

SMALL = dict(channels=(2, 3, 4), image_extent=16, head_hidden=5, dilations=(1, 2))


def test_same_seed_gives_identical_parameters():
    cfg = ModelConfig(**SMALL)
    a, b = build_model(cfg, 3), build_model(cfg, 3)
    assert a.keys() == b.keys()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    c = build_model(cfg, 4)
    assert any(not np.array_equal(a[k], c[k]) for k in a)


@pytest.mark.parametrize(
    "flags",
    [
        {},
        dict(use_hrst=False),
        dict(use_hrst=False, use_scale_reg=False),
        dict(use_stn=False, use_hrst=False, use_scale_reg=False),
        dict(head_hidden=0),
    ],
)
def test_parameter_count_matches_built_model(flags):
    cfg = ModelConfig(**{**SMALL, **flags})
    params = build_model(cfg, 0)
    assert parameter_count(cfg) == sum(p.size for p in params.values())


@pytest.mark.parametrize(
    "flags",
    [dict(use_stn=False), dict(use_stn=False, use_hrst=False), dict(aggregation="median"), dict(lam=0.0)],
)
def test_inconsistent_flags_raise(flags):
    with pytest.raises(ConfigError):
        ModelConfig(**flags)


def test_without_transformer_prediction_is_plain_regressor():
    cfg = ModelConfig(**SMALL, use_stn=False, use_hrst=False, use_scale_reg=False)
    params = build_model(cfg, 1)
    assert not any(k.startswith(("glob", "loc")) for k in params)
    images = np.random.default_rng(0).uniform(size=(3, 1, 16, 16))
    trace, _ = forward(params, cfg, images)
    fconv, _ = backbone_forward(params, cfg, images)
    raw, _ = mlp_forward(params, "reg", fconv.reshape(3, -1))
    assert np.array_equal(trace.pred, raw.reshape(3, 6, 2))
    assert np.array_equal(trace.thetas, identity_matrices(3, 6))
    assert not trace.records


def test_fresh_model_starts_from_identity_transforms():
    cfg = ModelConfig(**SMALL)
    params = build_model(cfg, 2)
    trace, _ = forward(params, cfg, np.random.default_rng(1).uniform(size=(2, 1, 16, 16)))
    assert np.array_equal(trace.thetas, identity_matrices(2, 6))
    assert np.array_equal(trace.pred, trace.rel)


def test_selective_off_uses_single_tower():
    assert ModelConfig(use_selective=False).tower_dilations == (1,)
    assert ModelConfig().tower_dilations == (1, 2, 4, 8)
    assert ModelConfig(use_hrst=False).steps == 1


def test_truncated_forward_matches_step_count():
    cfg = ModelConfig(**SMALL)
    params = build_model(cfg, 5)
    for k in params:
        if k.startswith(("glob.", "loc.")):
            params[k] = params[k] + np.random.default_rng(0).normal(scale=0.05, size=params[k].shape)
    images = np.random.default_rng(2).uniform(size=(2, 1, 16, 16))
    full, _ = forward(params, cfg, images)
    two, _ = forward(params, cfg, images, steps=2)
    assert np.array_equal(two.thetas, full.records[0].thetas_out)


def test_loss_and_grads_shapes():
    cfg = ModelConfig(**SMALL)
    params = build_model(cfg, 0)
    rng = np.random.default_rng(3)
    images = rng.uniform(size=(2, 1, 16, 16))
    gt = rng.uniform(-0.8, 0.8, size=(2, 6, 2))
    vis = np.ones((2, 6), bool)
    losses, grads, _ = loss_and_grads(params, cfg, images, gt, vis, np.array([1.0, 0.5]))
    assert losses.regression.shape == (2,) and np.all(losses.total >= losses.regression)
    assert grads.keys() == params.keys()
    assert all(grads[k].shape == params[k].shape for k in params)


def test_gradcheck_tiny_model_passes():
    report = gradcheck(tiny_config(), seed=1)
    assert report.passed, "\n".join(report.lines())
    assert report.worst < 1e-4
