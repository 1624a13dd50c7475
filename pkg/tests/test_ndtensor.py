import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ovseg import ndtensor as nt
from ovseg.errors import ContractError, DimensionError
from ovseg.ndtensor import Tape, Tensor

from conftest import fd_check

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


# ---------------------------------------------------------------- matmul


def test_matmul_identity_and_small_product():
    a = Tensor([[3.0, 4.0], [5.0, 6.0]])
    assert np.array_equal((Tensor(np.eye(2)) @ a).data, a.data)
    assert (Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_grad_matches_hand_value():
    A = Tensor([[1.0, 1.0]], requires_grad=True)
    B = Tensor([[2.0], [5.0]])
    with Tape() as tape:
        loss = (A @ B).sum()
    tape.backward(loss)
    assert np.allclose(A.grad, [[2.0, 5.0]])
    assert fd_check(lambda a: (a @ B).sum(), A.data) < 1e-6


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_batched_matmul_broadcast_grad(rng):
    a = rng.standard_normal((2, 3, 4))
    b = rng.standard_normal((4, 2))
    assert fd_check(lambda x, y: nt.square(x @ y).sum(), a, b) < 1e-6


# ---------------------------------------------------------------- softmax / layer norm


def test_softmax_examples():
    assert np.allclose(nt.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    for c in (-7.0, 0.0, 123.4):
        assert np.allclose(nt.softmax(Tensor([c, c, c])).data, 1 / 3)


@given(hnp.arrays(np.float64, st.integers(1, 12), elements=finite))
def test_softmax_sums_to_one(x):
    s = nt.softmax(Tensor(x)).data
    assert abs(s.sum() - 1.0) < 1e-12
    assert np.all(s >= 0) and np.all(s <= 1)


def test_softmax_grad(rng):
    x = rng.standard_normal(5)
    w = rng.standard_normal(5)
    assert fd_check(lambda t: (nt.softmax(t) * Tensor(w)).sum(), x) < 1e-6


def test_softmax_empty_axis():
    with pytest.raises(DimensionError):
        nt.softmax(Tensor(np.zeros((2, 0))), axis=-1)


def test_layer_norm_examples():
    g, b = Tensor(np.ones(3)), Tensor(np.zeros(3))
    assert np.allclose(nt.layer_norm(Tensor([1.0, 1.0, 1.0]), g, b).data, 0.0)
    out = nt.layer_norm(Tensor([-1.0, 1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
    assert np.allclose(out, [-1.0, 1.0], atol=1e-5)


def test_layer_norm_grad(rng):
    x, g, b = rng.standard_normal((2, 4)), rng.standard_normal(4), rng.standard_normal(4)
    w = rng.standard_normal((2, 4))
    err = fd_check(lambda a, gg, bb: (nt.layer_norm(a, gg, bb) * Tensor(w)).sum(), x, g, b)
    assert err < 1e-5


def test_layer_norm_empty_axis():
    with pytest.raises(DimensionError):
        nt.layer_norm(Tensor(np.zeros((3, 0))), Tensor(np.zeros(0)), Tensor(np.zeros(0)))


# ---------------------------------------------------------------- convolution


def test_conv_identity_kernel(rng):
    x = rng.standard_normal((1, 5, 6))
    out = nt.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
    assert np.array_equal(out.data, x)


def test_conv_constant_image():
    out = nt.conv2d(Tensor(np.full((1, 5, 5), 2.5)), Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 3, 3)
    assert np.allclose(out.data, 22.5)


def test_conv_weight_grad(rng):
    x = rng.standard_normal((1, 4, 4))
    w = rng.standard_normal((1, 1, 2, 2))
    assert fd_check(lambda k: nt.square(nt.conv2d(Tensor(x), k)).sum(), w) < 1e-5


def test_conv_matches_naive_loops(rng):
    x = rng.standard_normal((2, 6, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    out = nt.conv2d(Tensor(x), Tensor(w), Tensor(b), padding=1, stride=2).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(out)
    for o in range(3):
        for i in range(out.shape[1]):
            for j in range(out.shape[2]):
                ref[o, i, j] = b[o] + (xp[:, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o]).sum()
    assert np.allclose(out, ref, atol=1e-12)


def test_conv_full_grad_with_padding_and_stride(rng):
    x = rng.standard_normal((2, 5, 5))
    w = rng.standard_normal((2, 2, 3, 3))
    b = rng.standard_normal(2)
    err = fd_check(lambda a, k, c: nt.square(nt.conv2d(a, k, c, padding=1, stride=2)).sum(), x, w, b)
    assert err < 1e-5


def test_conv_kernel_too_large():
    with pytest.raises(DimensionError):
        nt.conv2d(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))


# ---------------------------------------------------------------- backward semantics


def test_backward_square_sum():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        loss = nt.square(x).sum()
    tape.backward(loss)
    assert x.grad.tolist() == [2.0, 4.0, 6.0]


def test_backward_constant_loss_gives_zero_grad():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = Tensor(3.0) * Tensor(2.0)
    tape.backward(loss)
    assert x.grad.tolist() == [0.0, 0.0]


def test_backward_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ContractError):
        tape.backward(y)


def test_backward_accumulates_without_reset():
    x = Tensor([1.0, -1.0], requires_grad=True)
    for _ in range(2):
        with Tape() as tape:
            loss = (x * 3.0).sum()
        tape.backward(loss)
    assert x.grad.tolist() == [6.0, 6.0]


def test_module_level_backward_uses_recording_tape():
    x = Tensor([2.0], requires_grad=True)
    with Tape():
        loss = (x * x).sum()
    nt.backward(loss)
    assert x.grad.tolist() == [4.0]


def test_no_recording_outside_tape():
    x = Tensor([2.0], requires_grad=True)
    y = x * x
    assert y._tape is None


def test_backward_deterministic(rng):
    data = rng.standard_normal((3, 4))

    def run():
        x = Tensor(data, requires_grad=True)
        with Tape() as tape:
            loss = nt.softmax(nt.tanh(x @ Tensor(data.T)), axis=-1).sum() + nt.gelu(x).mean()
        tape.backward(loss)
        return x.grad.tobytes()

    assert run() == run()


def test_non_finite_values_raise():
    with np.errstate(divide="ignore"), pytest.raises(FloatingPointError):
        nt.log(Tensor([0.0]))


# ---------------------------------------------------------------- elementwise / shape ops


@pytest.mark.parametrize("fn", [
    lambda a: nt.exp(a).sum(),
    lambda a: nt.tanh(a).sum(),
    lambda a: nt.gelu(a).sum(),
    lambda a: nt.log(nt.square(a) + 1.0).sum(),
    lambda a: nt.sqrt(nt.square(a) + 1.0).sum(),
    lambda a: (a / (nt.square(a) + 2.0)).sum(),
    lambda a: nt.log_softmax(a, axis=0).sum() * 0.5 + nt.square(a).mean(),
    lambda a: nt.square(nt.l2_normalize(a) - 0.3).sum(),
    lambda a: nt.square(a.transpose(1, 0).reshape(-1)[1:4]).sum(),
    lambda a: nt.square(nt.concat([a, a * 2.0], axis=0)).sum(),
    lambda a: nt.square(nt.stack([a, -a], axis=1)).mean(),
    lambda a: nt.square(nt.take(a, np.array([2, 0, 0]), 1)).sum(),
    lambda a: nt.square(nt.pad2d(a, 2, "reflect")).sum(),
    lambda a: nt.square(nt.resize_bilinear(a, 5, 7)).sum(),
    lambda a: nt.square(a.sum(axis=0, keepdims=True) - a).sum(),
])
def test_elementwise_grads(fn, rng):
    assert fd_check(fn, rng.standard_normal((3, 3))) < 1e-6


def test_window_ops_grads(rng):
    r = 1
    padded = rng.standard_normal((2, 5, 6))
    centre = rng.standard_normal((2, 3, 4))
    weights = rng.standard_normal((9, 3, 4))
    # some weight gradients are ~1e-5, so roundoff dominates at tighter tolerances
    assert fd_check(lambda p, c: nt.square(nt.window_dot(p, c, r)).sum(), padded, centre, h=1e-5) < 1e-4
    assert fd_check(lambda p, w: nt.square(nt.window_sum(p, w, r)).sum(), padded, weights, h=1e-5) < 1e-4


def test_window_dot_matches_loops(rng):
    r = 2
    centre = rng.standard_normal((3, 4, 5))
    padded = rng.standard_normal((3, 8, 9))
    out = nt.window_dot(Tensor(padded), Tensor(centre), r).data
    o = 0
    for dy in range(2 * r + 1):
        for dx in range(2 * r + 1):
            for i in range(4):
                for j in range(5):
                    assert np.isclose(out[o, i, j], centre[:, i, j] @ padded[:, i + dy, j + dx])
            o += 1


@given(st.integers(1, 6), st.integers(0, 15))
def test_reflect_index_matches_numpy_and_stays_in_range(n, pad):
    idx = nt.reflect_index(n, pad)
    assert idx.min() >= 0 and idx.max() < n
    assert np.array_equal(idx[pad:pad + n], np.arange(n))
    if n > 1 and pad < n:
        ref = np.pad(np.arange(n), pad, mode="reflect")
        assert np.array_equal(idx, ref)


def test_interp_matrix_rows_sum_to_one():
    for n_in, n_out in [(4, 8), (7, 3), (5, 5), (1, 4)]:
        assert np.allclose(nt.interp_matrix(n_in, n_out).sum(axis=1), 1.0)


def test_resize_bilinear_doubling_matches_half_pixel_convention():
    x = Tensor(np.array([[[0.0, 4.0]]]))
    out = nt.resize_bilinear(x, 1, 4).data[0, 0]
    # output centres map to source coords -0.25, 0.25, 0.75, 1.25 (clipped)
    assert np.allclose(out, [0.0, 1.0, 3.0, 4.0])
