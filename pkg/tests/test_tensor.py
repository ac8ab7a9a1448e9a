import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from landmark_stn.errors import DimensionError
from landmark_stn.tensor import (
    GradPair,
    avg_pool2,
    avg_pool2_backward,
    conv2d,
    conv2d_backward,
    elementwise_max_select,
    linear,
    linear_backward,
    max_select_backward,
    read_tensor,
    relu,
    relu_backward,
    tensor_from_bytes,
    tensor_to_bytes,
    write_tensor,
)

from oracles import central_diff, naive_conv


@pytest.mark.parametrize("d,p", [(1, 0), (1, 1), (2, 2), (3, 1), (2, 0)])
def test_conv_matches_direct_loop(d, p):
    rng = np.random.default_rng(d * 10 + p)
    x = rng.normal(size=(3, 9, 8))
    k = rng.normal(size=(2, 3, 3, 3))
    np.testing.assert_allclose(conv2d(x, k, d, p), naive_conv(x, k, d, p), atol=1e-12)


def test_conv_batch_matches_per_sample():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 2, 7, 7))
    k = rng.normal(size=(3, 2, 3, 3))
    out = conv2d(x, k, 2, 2)
    for n in range(4):
        np.testing.assert_allclose(out[n], conv2d(x[n], k, 2, 2), atol=1e-13)


def test_conv_identity_kernel_is_identity():
    x = np.random.default_rng(1).normal(size=(1, 5, 5))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    assert np.array_equal(conv2d(x, k, 1, 1), x)


def test_conv_output_extent():
    x = np.zeros((1, 10, 10))
    k = np.zeros((1, 1, 3, 3))
    assert conv2d(x, k, 4, 0).shape == (1, 2, 2)
    assert conv2d(x, k, 4, 4).shape == (1, 10, 10)


def test_conv_rejects_bad_arguments():
    x = np.zeros((2, 5, 5))
    with pytest.raises(DimensionError):
        conv2d(x, np.zeros((1, 3, 3, 3)))
    with pytest.raises(DimensionError):
        conv2d(x, np.zeros((1, 2, 3, 3)), dilation=3, padding=0)
    with pytest.raises(ValueError):
        conv2d(x, np.zeros((1, 2, 3, 3)), dilation=0)
    with pytest.raises(ValueError):
        conv2d(x, np.zeros((1, 2, 3, 3)), padding=-1)


@pytest.mark.parametrize("d,p", [(1, 1), (2, 2), (2, 0), (3, 3)])
def test_conv_backward_finite_differences(d, p):
    rng = np.random.default_rng(7 + d)
    x = rng.normal(size=(2, 2, 7, 6))
    k = rng.normal(size=(3, 2, 3, 3))
    gout = rng.normal(size=conv2d(x, k, d, p).shape)

    def f():
        return float((conv2d(x, k, d, p) * gout).sum())

    gx, gk = conv2d_backward(x, k, d, p, gout)
    np.testing.assert_allclose(gx, central_diff(f, x), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(gk, central_diff(f, k), rtol=1e-6, atol=1e-8)


def test_conv_backward_zero_grad_and_shape_check():
    x = np.ones((1, 4, 4))
    k = np.ones((1, 1, 3, 3))
    gx, gk = conv2d_backward(x, k, 1, 1, np.zeros((1, 4, 4)))
    assert not gx.any() and not gk.any()
    with pytest.raises(DimensionError):
        conv2d_backward(x, k, 1, 1, np.zeros((1, 3, 3)))
    none, _ = conv2d_backward(x, k, 1, 1, np.ones((1, 4, 4)), need_input_grad=False)
    assert none is None


def test_linear_and_backward():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 5))
    w = rng.normal(size=(3, 5))
    b = rng.normal(size=3)
    np.testing.assert_allclose(linear(x, w, b), np.stack([w @ r + b for r in x]), atol=1e-13)
    g = rng.normal(size=(4, 3))

    def f():
        return float((linear(x, w, b) * g).sum())

    gx, gw, gb = linear_backward(x, w, g)
    np.testing.assert_allclose(gx, central_diff(f, x), rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(gw, central_diff(f, w), rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(gb, central_diff(f, b), rtol=1e-6, atol=1e-9)
    with pytest.raises(DimensionError):
        linear(x, w, np.zeros(2))


def test_relu_gradient_is_zero_at_zero():
    x = np.array([-1.0, 0.0, 2.0])
    assert np.array_equal(relu(x), [0.0, 0.0, 2.0])
    assert np.array_equal(relu_backward(x, np.ones(3)), [0.0, 0.0, 1.0])


def test_avg_pool_and_adjoint():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 3, 6, 4))
    y = avg_pool2(x)
    assert y.shape == (2, 3, 3, 2)
    assert y[1, 2, 0, 1] == pytest.approx(x[1, 2, 0:2, 2:4].mean())
    g = rng.normal(size=y.shape)
    # adjoint identity <pool x, g> == <x, pool^T g>
    assert float((y * g).sum()) == pytest.approx(float((x * avg_pool2_backward(g)).sum()), rel=1e-12)
    with pytest.raises(DimensionError):
        avg_pool2(np.zeros((1, 3, 3)))


def test_max_select_ties_and_routing():
    a = np.array([[1.0, 5.0], [2.0, 2.0]])
    b = np.array([[3.0, 5.0], [1.0, 2.0]])
    out, sel = elementwise_max_select([a, b])
    assert np.array_equal(out, [[3.0, 5.0], [2.0, 2.0]])
    assert np.array_equal(sel, [[1, 0], [0, 0]])  # ties resolve to the first tower
    g = np.arange(4.0).reshape(2, 2) + 1
    ga, gb = max_select_backward(sel, g, 2)
    assert np.array_equal(ga + gb, g)
    assert not np.any((ga != 0) & (gb != 0))
    with pytest.raises(DimensionError):
        max_select_backward(sel, np.zeros((3, 3)), 2)
    with pytest.raises(ValueError):
        elementwise_max_select([])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 5), min_size=0, max_size=4), st.integers(0, 2**31))
def test_serialization_round_trip(shape, seed):
    shape = tuple(shape)
    t = np.random.default_rng(seed).normal(size=shape)
    buf = tensor_to_bytes(t)
    back, end = tensor_from_bytes(buf)
    assert end == len(buf)
    assert back.shape == shape and np.array_equal(back, t)


def test_serialization_layout_and_truncation():
    t = np.array([[1.0, 2.0, 3.0]])
    buf = tensor_to_bytes(t)
    assert buf[:12] == b"\x02\x00\x00\x00\x01\x00\x00\x00\x03\x00\x00\x00"
    assert np.frombuffer(buf[12:], "<f8").tolist() == [1.0, 2.0, 3.0]
    for cut in (2, 6, len(buf) - 1):
        with pytest.raises(EOFError):
            tensor_from_bytes(buf[:cut])
    fp = io.BytesIO()
    write_tensor(fp, t)
    write_tensor(fp, t * 2)
    fp.seek(0)
    assert np.array_equal(read_tensor(fp), t)
    assert np.array_equal(read_tensor(fp), t * 2)
    with pytest.raises(EOFError):
        read_tensor(fp)


def test_special_values_survive_serialization():
    t = np.array([np.nan, np.inf, -0.0, 5e-324])
    back, _ = tensor_from_bytes(tensor_to_bytes(t))
    assert back.tobytes() == t.tobytes()


def test_gradpair_accumulates():
    p = GradPair(np.zeros(3))
    p.accumulate(np.ones(3))
    p.accumulate(np.ones(3))
    assert np.array_equal(p.grad, [2.0, 2.0, 2.0])
    p.zero_grad()
    assert not p.grad.any()
    with pytest.raises(DimensionError):
        p.accumulate(np.ones(2))
