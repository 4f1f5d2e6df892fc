import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.signal import correlate

from metakd.tensor import (
    Tensor,
    grad,
    no_grad,
    read_tensor,
    tensor_from_bytes,
    tensor_to_bytes,
    write_tensor,
)
from metakd import nn


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def test_elementwise_forward_values():
    a, b = Tensor([1.0, 2.0, 4.0]), Tensor([2.0, 2.0, 2.0])
    np.testing.assert_array_equal((a + b).data, [3, 4, 6])
    np.testing.assert_array_equal((a - b).data, [-1, 0, 2])
    np.testing.assert_array_equal((a * b).data, [2, 4, 8])
    np.testing.assert_array_equal((a / b).data, [0.5, 1, 2])
    np.testing.assert_array_equal((a**2).data, [1, 4, 16])
    np.testing.assert_array_equal((2 - a).data, [1, 0, -2])


def test_data_is_float64_and_contiguous():
    t = Tensor(np.arange(6, dtype=np.int32).reshape(2, 3).T)
    assert t.data.dtype == np.float64
    assert t.data.flags["C_CONTIGUOUS"]


def test_polynomial_gradient():
    x = leaf([0.5, -1.5, 2.0])
    (g,) = grad((x**3).sum(), [x])
    np.testing.assert_allclose(g.data, 3 * x.data**2, rtol=1e-14)


def test_higher_order_derivatives_of_cubic():
    x = leaf(1.7)
    y = x**3
    (g1,) = grad(y, [x], create_graph=True)
    (g2,) = grad(g1, [x], create_graph=True)
    (g3,) = grad(g2, [x])
    assert g1.item() == pytest.approx(3 * 1.7**2, rel=1e-14)
    assert g2.item() == pytest.approx(6 * 1.7, rel=1e-14)
    assert g3.item() == pytest.approx(6.0, rel=1e-14)


def test_gradient_without_create_graph_is_constant():
    x = leaf(2.0)
    (g,) = grad(x * x, [x])
    assert not g.requires_grad


def test_mixed_partial_of_product():
    x, y = leaf(3.0), leaf(-2.0)
    (gx,) = grad(x * x * y, [x], create_graph=True)
    (gxy,) = grad(gx, [y])
    assert gxy.item() == pytest.approx(2 * 3.0)


def test_broadcast_gradient_sums_over_expanded_axes():
    a = leaf(np.ones((3, 1)))
    b = leaf(np.arange(4.0))
    ga, gb = grad((a * b).sum(), [a, b])
    np.testing.assert_array_equal(ga.data, np.full((3, 1), 6.0))
    np.testing.assert_array_equal(gb.data, np.full(4, 3.0))


def test_unreachable_input_gets_zero_gradient():
    x, y = leaf([1.0, 2.0]), leaf([[3.0]])
    gx, gy = grad((x * 2).sum(), [x, y])
    np.testing.assert_array_equal(gy.data, np.zeros((1, 1)))


def test_non_scalar_loss_rejected():
    x = leaf([1.0, 2.0])
    with pytest.raises(ValueError, match="scalar"):
        grad(x * 2, [x])


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with no_grad():
        y = x * 3
    assert not y.requires_grad and y.is_leaf


def test_constants_never_require_grad():
    a = Tensor([1.0, 2.0])
    b = a * a + 1
    assert not b.requires_grad


def test_abs_subgradient_is_zero_at_zero():
    x = leaf([-2.0, 0.0, 3.0])
    (g,) = grad(x.abs().sum(), [x])
    np.testing.assert_array_equal(g.data, [-1.0, 0.0, 1.0])


def test_matmul_batched_gradient_matches_closed_form():
    rng = np.random.default_rng(0)
    a, b = leaf(rng.normal(size=(2, 3, 4))), leaf(rng.normal(size=(4, 5)))
    w = rng.normal(size=(2, 3, 5))
    ga, gb = grad(((a @ b) * Tensor(w)).sum(), [a, b])
    np.testing.assert_allclose(ga.data, w @ b.data.T, rtol=1e-12)
    np.testing.assert_allclose(gb.data, np.einsum("nij,nik->jk", a.data, w), rtol=1e-12)


@pytest.mark.parametrize("pad", [0, 1, 2])
def test_conv2d_matches_scipy_correlation(pad):
    rng = np.random.default_rng(pad)
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    out = nn.conv2d(Tensor(x), Tensor(w), padding=pad).data
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ref = np.stack([
        np.stack([sum(correlate(xp[n, c], w[o, c], mode="valid") for c in range(3)) for o in range(4)])
        for n in range(2)
    ])
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_conv_gradients_twice_differentiable():
    # d/dw of <grad_x conv(x, w), v> is linear in v: check against brute-force FD of the first gradient
    rng = np.random.default_rng(3)
    x, w = leaf(rng.normal(size=(1, 2, 5, 5))), leaf(rng.normal(size=(3, 2, 3, 3)))
    proj, v = rng.normal(size=(1, 3, 5, 5)), rng.normal(size=(1, 2, 5, 5))

    def inner(w_arr, create):
        ww = Tensor(w_arr, requires_grad=True)
        xx = Tensor(x.data, requires_grad=True)
        (gx,) = grad((nn.conv2d(xx * xx, ww) * Tensor(proj)).sum(), [xx], create_graph=create)
        return (gx * Tensor(v)).sum(), ww

    s, ww = inner(w.data, True)
    (analytic,) = grad(s, [ww])
    num = np.zeros_like(w.data)
    h = 1e-5
    for i in range(w.data.size):
        up, dn = w.data.copy(), w.data.copy()
        up.flat[i] += h
        dn.flat[i] -= h
        num.flat[i] = (inner(up, False)[0].item() - inner(dn, False)[0].item()) / (2 * h)
    np.testing.assert_allclose(analytic.data, num, rtol=1e-6, atol=1e-8)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.integers(0, 2**32 - 1))
def test_serialization_round_trip_is_bit_exact(shape, seed):
    arr = np.random.default_rng(seed).normal(size=shape) * 1e3
    back = tensor_from_bytes(tensor_to_bytes(arr))
    assert back.shape == tuple(shape)
    assert back.data.tobytes() == np.asarray(arr, dtype=np.float64).tobytes()


def test_serialization_layout_and_truncation():
    blob = tensor_to_bytes(np.array([[1.0, 2.0, 3.0]]))
    assert blob[:12] == b"\x02\x00\x00\x00\x01\x00\x00\x00\x03\x00\x00\x00"
    assert len(blob) == 12 + 3 * 8
    with pytest.raises(EOFError):
        tensor_from_bytes(blob[:-1])
    buf = io.BytesIO()
    write_tensor(buf, Tensor([5.0]))
    write_tensor(buf, Tensor([6.0]))
    buf.seek(0)
    assert read_tensor(buf).item() == 5.0 and read_tensor(buf).item() == 6.0
