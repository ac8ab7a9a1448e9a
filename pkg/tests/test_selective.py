import numpy as np
import pytest

from landmark_stn.errors import ConfigError, DimensionError
from landmark_stn.selective import (
    DEFAULT_DILATIONS,
    ScaleTowerBank,
    parse_dilations,
    selective_backward,
    selective_forward,
    tower_outputs,
)
from landmark_stn.tensor import conv2d, conv2d_backward

from oracles import naive_conv


def test_default_dilations():
    assert DEFAULT_DILATIONS == (1, 2, 4, 8)
    assert parse_dilations("1, 2,4") == (1, 2, 4)


def test_bank_validation():
    k = np.zeros((1, 1, 3, 3))
    for bad in [(), (2, 1), (1, 1), (0, 1)]:
        with pytest.raises(ConfigError):
            ScaleTowerBank(k, bad)
    with pytest.raises(ConfigError):
        ScaleTowerBank(k, (1,), "median")
    with pytest.raises(ConfigError):
        ScaleTowerBank(np.zeros((1, 1, 2, 2)), (1,))


def test_single_tower_is_plain_conv():
    rng = np.random.default_rng(0)
    F = rng.normal(size=(2, 3, 6, 6))
    k = rng.normal(size=(4, 3, 3, 3))
    bank = ScaleTowerBank(k, (1,))
    out, sel = selective_forward(bank, F)
    assert np.array_equal(out, conv2d(F, k, 1, 1))
    assert not sel.any()
    g = rng.normal(size=out.shape)
    gF, gk = selective_backward(bank, F, sel, g)
    rF, rk = conv2d_backward(F, k, 1, 1, g)
    assert np.array_equal(gF, rF) and np.array_equal(gk, rk)


def test_identity_kernel_ties_go_to_first_tower():
    F = np.random.default_rng(1).normal(size=(2, 5, 5))
    k = np.zeros((2, 2, 1, 1))
    k[0, 0, 0, 0] = k[1, 1, 0, 0] = 1.0
    out, sel = selective_forward(ScaleTowerBank(k, (1, 2, 4)), F)
    assert np.array_equal(out, F)
    assert not sel.any()


def test_max_equals_brute_force_over_100_instances():
    rng = np.random.default_rng(2)
    for _ in range(100):
        c, h, w = rng.integers(1, 3), rng.integers(5, 10), rng.integers(5, 10)
        F = rng.normal(size=(c, h, w))
        k = rng.normal(size=(2, c, 3, 3))
        dil = (1, 2, 4)
        out, sel = selective_forward(ScaleTowerBank(k, dil), F)
        towers = np.stack([naive_conv(F, k, d, d) for d in dil])
        np.testing.assert_allclose(out, towers.max(axis=0), atol=1e-12)
        # bound and exhaustiveness: >= every tower, equal to the selected one
        assert np.all(out[None] >= towers - 1e-12)
        np.testing.assert_allclose(out, np.take_along_axis(towers, sel[None], 0)[0], atol=1e-12)


def test_average_mode():
    rng = np.random.default_rng(3)
    F = rng.normal(size=(2, 8, 8))
    k = rng.normal(size=(3, 2, 3, 3))
    bank = ScaleTowerBank(k, (1, 2, 4, 8), "avg")
    out, sel = selective_forward(bank, F)
    assert sel is None
    np.testing.assert_allclose(out, np.mean(tower_outputs(bank, F), axis=0), atol=1e-12)
    g = rng.normal(size=out.shape)
    gF, gk = selective_backward(bank, F, None, g)
    refF = sum(conv2d_backward(F, k, d, d, g / 4)[0] for d in bank.dilations)
    np.testing.assert_allclose(gF, refF, atol=1e-12)


def test_shape_invariance_across_dilations():
    F = np.zeros((1, 1, 8, 8))
    bank = ScaleTowerBank(np.zeros((2, 1, 3, 3)), (1, 2, 4, 8))
    assert all(t.shape == (1, 2, 8, 8) for t in tower_outputs(bank, F))


def test_backward_zero_and_stale_selection():
    rng = np.random.default_rng(4)
    F = rng.normal(size=(1, 2, 6, 6))
    bank = ScaleTowerBank(rng.normal(size=(2, 2, 3, 3)), (1, 2))
    out, sel = selective_forward(bank, F)
    gF, gk = selective_backward(bank, F, sel, np.zeros_like(out))
    assert not gF.any() and not gk.any()
    with pytest.raises(DimensionError):
        selective_backward(bank, F, sel[..., :3], np.zeros((1, 2, 6, 3)))
    with pytest.raises(DimensionError):
        selective_backward(bank, F, None, np.zeros_like(out))


def test_backward_finite_differences():
    rng = np.random.default_rng(5)
    F = rng.normal(size=(2, 2, 7, 7))
    k = rng.normal(size=(2, 2, 3, 3))
    bank = ScaleTowerBank(k, (1, 2, 4))
    out, sel = selective_forward(bank, F)
    g = rng.normal(size=out.shape)
    gF, gk = selective_backward(bank, F, sel, g)

    def f():
        return float((selective_forward(ScaleTowerBank(k, (1, 2, 4)), F)[0] * g).sum())

    eps = 1e-6
    for arr, grad in ((F, gF), (k, gk)):
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + eps
            fp = f()
            arr[idx] = old - eps
            fm = f()
            arr[idx] = old
            num = (fp - fm) / (2 * eps)
            assert abs(num - grad[idx]) <= 1e-5 * max(1.0, abs(num))


def test_routing_exclusivity_by_term_isolation():
    """One nonzero output gradient touches only the winning tower's taps."""
    rng = np.random.default_rng(6)
    F = rng.normal(size=(1, 1, 9, 9))
    k = rng.normal(size=(1, 1, 3, 3))
    dil = (1, 2, 4)
    bank = ScaleTowerBank(k, dil)
    out, sel = selective_forward(bank, F)
    for y, x in [(4, 4), (0, 0), (2, 7), (8, 3)]:
        g = np.zeros_like(out)
        g[0, 0, y, x] = 1.0
        gF, gk = selective_backward(bank, F, sel, g)
        s = int(sel[0, 0, y, x])
        refF, refk = conv2d_backward(F, k, dil[s], dil[s], g)
        assert np.array_equal(gk, refk)
        assert np.array_equal(gF, refF)
        # the other towers' receptive fields receive nothing beyond the shared centre tap
        for other in range(len(dil)):
            if other == s:
                continue
            leak = conv2d_backward(F, k, dil[other], dil[other], g)[0]
            only_other = (leak != 0) & (refF == 0)
            assert not gF[only_other].any()
