import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from argsdiff import tensor as tn
from argsdiff.tensor import DimensionError, NonFiniteError, TapeError, Tensor
from gradcheck import max_gradcheck_error, numeric_grad


def brute_conv(x, w, stride):
    """Direct sliding-window cross-correlation with zero padding k//2."""
    cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    p = k // 2
    xp = np.zeros((cin, h + 2 * p, wd + 2 * p))
    xp[:, p:p + h, p:p + wd] = x
    ho, wo = -(-h // stride), -(-wd // stride)
    out = np.zeros((cout, ho, wo))
    for o in range(cout):
        for i in range(ho):
            for j in range(wo):
                r, c = i * stride, j * stride
                out[o, i, j] = np.sum(xp[:, r:r + k, c:c + k] * w[o])
    return out


# ---------------------------------------------------------------- matmul


def test_matmul_identity():
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(tn.matmul(Tensor(np.eye(2)), b).data, b.data)


def test_matmul_row_by_column():
    assert tn.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_grad_matches_finite_differences():
    b = np.array([[2.0, 3.0], [4.0, 5.0]])
    a0 = np.eye(2)
    fd = numeric_grad(lambda a: float(np.sum(a @ b)), a0)
    a = Tensor(a0, requires_grad=True)
    tn.backward(tn.sum(tn.matmul(a, Tensor(b))))
    np.testing.assert_allclose(a.grad, fd, rtol=1e-8)
    np.testing.assert_allclose(a.grad, [[5.0, 9.0], [5.0, 9.0]], rtol=1e-8)


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        tn.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


# ---------------------------------------------------------------- conv2d


def test_conv_zero_input_zero_output():
    w = Tensor(np.random.default_rng(0).standard_normal((3, 2, 3, 3)))
    assert not tn.conv2d(Tensor(np.zeros((2, 6, 6))), w).data.any()


def test_conv_ones_window_counts():
    out = tn.conv2d(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 1, 3, 3)))).data[0]
    assert out[1, 1] == out[2, 2] == 9.0
    assert out[0, 0] == out[3, 3] == out[0, 3] == 4.0
    assert out[0, 1] == 6.0


@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("hw", [(5, 5), (6, 7), (8, 8)])
def test_conv_matches_brute_force(stride, hw, rng):
    x = rng.standard_normal((2, *hw))
    w = rng.standard_normal((3, 2, 3, 3))
    got = tn.conv2d(Tensor(x), Tensor(w), stride=stride).data
    np.testing.assert_allclose(got, brute_conv(x, w, stride), atol=1e-12)
    assert got.shape[1:] == (-(-hw[0] // stride), -(-hw[1] // stride))


def test_conv_batched_equals_per_sample(rng):
    x = rng.standard_normal((3, 2, 8, 8))
    w = Tensor(rng.standard_normal((4, 2, 3, 3)))
    batched = tn.conv2d(Tensor(x), w, stride=2).data
    for n in range(3):
        np.testing.assert_array_equal(batched[n], tn.conv2d(Tensor(x[n]), w, stride=2).data)


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_gradcheck_input_and_weight(stride, rng):
    x0 = rng.standard_normal((2, 5, 5))
    w0 = rng.standard_normal((3, 2, 3, 3))
    probe = rng.standard_normal(tn.conv2d(Tensor(x0), Tensor(w0), stride).shape)
    assert max_gradcheck_error(lambda x: tn.sum(tn.conv2d(x, Tensor(w0), stride) * Tensor(probe)), x0) < 1e-4
    assert max_gradcheck_error(lambda w: tn.sum(tn.conv2d(Tensor(x0), w, stride) * Tensor(probe)), w0) < 1e-4


def test_conv_channel_mismatch():
    with pytest.raises(DimensionError):
        tn.conv2d(Tensor(np.ones((3, 4, 4))), Tensor(np.ones((1, 2, 3, 3))))


# ---------------------------------------------------------------- resize


def test_resize_factor_one_is_identity(rng):
    x = rng.standard_normal((2, 3, 5))
    np.testing.assert_array_equal(tn.resize_nearest(Tensor(x), 1).data, x)


def test_resize_block_replication():
    out = tn.resize_nearest(Tensor([[[1.0, 2.0], [3.0, 4.0]]]), 2).data[0]
    expected = np.array([[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]], dtype=float)
    np.testing.assert_array_equal(out, expected)


def test_resize_backward_block_sum(rng):
    x0 = rng.standard_normal((2, 3, 3))
    fd = numeric_grad(lambda v: float(np.sum(v.repeat(3, 1).repeat(3, 2))), x0)
    x = Tensor(x0, requires_grad=True)
    tn.backward(tn.sum(tn.resize_nearest(x, 3)))
    np.testing.assert_allclose(x.grad, 9.0)
    np.testing.assert_allclose(fd, 9.0, rtol=1e-6)


# ---------------------------------------------------------------- elementwise


def test_silu_at_zero():
    assert tn.silu(Tensor(0.0)).item() == 0.0


def test_add_zero_identity(rng):
    x = rng.standard_normal((3, 4))
    np.testing.assert_array_equal(tn.add(Tensor(x), 0.0).data, x)
    np.testing.assert_array_equal(tn.elementwise("add", Tensor(x), Tensor(np.zeros((3, 4)))).data, x)


def test_silu_derivative_at_one():
    fd = numeric_grad(lambda v: float(v * (1 / (1 + np.exp(-v)))), np.array(1.0))
    x = Tensor(1.0, requires_grad=True)
    tn.backward(tn.silu(x))
    assert x.grad == pytest.approx(fd, rel=1e-8)
    assert x.grad == pytest.approx(0.9277, abs=5e-5)


def test_elementwise_shape_mismatch():
    with pytest.raises(DimensionError):
        tn.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(DimensionError):
        tn.mul(Tensor(np.ones((2, 2))), Tensor(np.ones(2)))


def test_non_finite_forward_is_an_error():
    with pytest.raises(NonFiniteError):
        tn.square(Tensor([1e200]))


# ---------------------------------------------------------------- backward contract


def test_backward_sum_gives_ones(rng):
    x = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    tn.backward(tn.sum(x * 1.0))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_backward_sum_of_squares():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    tn.backward(tn.sum(tn.square(x)))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_second_backward_on_same_tape_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = tn.sum(tn.square(x))
    tn.backward(y)
    with pytest.raises(TapeError):
        tn.backward(y)


def test_non_scalar_root_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(TapeError):
        tn.backward(x * 2.0)


def test_accumulation_across_tapes_is_additive():
    x = Tensor([1.0, -2.0], requires_grad=True)
    tn.backward(tn.sum(tn.square(x)))
    tn.backward(tn.sum(x * 3.0))
    np.testing.assert_array_equal(x.grad, [2.0 + 3.0, -4.0 + 3.0])


def test_each_op_visited_once_in_reverse():
    tape = tn.new_tape()
    x = Tensor([1.0, 2.0], requires_grad=True)
    h = x * 2.0
    y = tn.sum(h * h)
    assert len(tape) == 3
    assert [op[0] for op in tape.ops] == [h, tape.ops[1][0], y]
    tn.backward(y)
    assert tape.consumed and len(tape) == 0
    np.testing.assert_array_equal(x.grad, 8.0 * x.data)


def test_reusing_intermediate_of_replayed_tape_rejected():
    x = Tensor([1.0], requires_grad=True)
    h = tn.square(x)
    tn.backward(tn.sum(h))
    with pytest.raises(TapeError):
        tn.sum(h * 2.0)


def test_no_grad_records_nothing():
    tape = tn.new_tape()
    x = Tensor([1.0], requires_grad=True)
    with tn.no_grad():
        y = tn.square(x)
    assert len(tape) == 0 and not y.tracked


# ---------------------------------------------------------------- invariants


def _op_cases(rng):
    """(name, scalar-valued builder, input) triples covering every differentiable op."""
    a_shape = (3, 4)
    other = rng.standard_normal(a_shape)
    mat = rng.standard_normal((4, 2))
    bias = rng.standard_normal(4)
    m3 = rng.standard_normal((5, 3))
    probe = rng.standard_normal((5, 4))
    return [
        ("add", lambda x: tn.sum(tn.add(x, Tensor(other)) * Tensor(other)), a_shape),
        ("sub", lambda x: tn.sum(tn.sub(Tensor(other), x) * Tensor(other)), a_shape),
        ("mul", lambda x: tn.sum(tn.mul(x, Tensor(other))), a_shape),
        ("scale", lambda x: tn.sum(tn.square(tn.scale(x, -1.7))), a_shape),
        ("square", lambda x: tn.sum(tn.square(x) * Tensor(other)), a_shape),
        ("silu", lambda x: tn.sum(tn.silu(x) * Tensor(other)), a_shape),
        ("matmul", lambda x: tn.sum(tn.square(tn.matmul(x, Tensor(mat)))), a_shape),
        ("mean", lambda x: tn.mean(tn.square(x)), a_shape),
        ("reshape", lambda x: tn.sum(tn.reshape(x, (2, 6)) * Tensor(other.reshape(2, 6))), a_shape),
        ("transpose", lambda x: tn.sum(tn.transpose(x) * Tensor(other.T)), a_shape),
        ("concat", lambda x: tn.sum(tn.square(tn.concat([x, x * 2.0], axis=1))), a_shape),
        ("add_bias", lambda x: tn.sum(tn.square(tn.add_bias(x, Tensor(bias), 1))), a_shape),
        ("mode_product", lambda x: tn.sum(tn.mode_product(x, Tensor(m3), 0) * Tensor(probe)), a_shape),
        ("resize", lambda x: tn.sum(tn.resize_nearest(tn.reshape(x, (1, 3, 4)), 2) * Tensor(np.arange(48.0).reshape(1, 6, 8))), a_shape),
    ]


def test_every_op_matches_finite_differences_at_100_points():
    rng = np.random.default_rng(7)
    for name, build, shape in _op_cases(rng):
        worst = 0.0
        for _ in range(100):
            worst = max(worst, max_gradcheck_error(build, rng.standard_normal(shape)))
        assert worst < 1e-4, name


def test_mode_product_grad_wrt_matrix(rng):
    x = Tensor(rng.standard_normal((4, 5, 3)))
    probe = Tensor(rng.standard_normal((4, 5, 2)))
    assert max_gradcheck_error(lambda m: tn.sum(tn.mode_product(x, m, 2) * probe), rng.standard_normal((2, 3))) < 1e-4


def test_add_bias_grad_wrt_bias_batched(rng):
    x = Tensor(rng.standard_normal((2, 3, 4, 4)))
    probe = Tensor(rng.standard_normal((2, 3, 4, 4)))
    assert max_gradcheck_error(lambda b: tn.sum(tn.add_bias(x, b, 1) * probe), rng.standard_normal((2, 3))) < 1e-4
    assert max_gradcheck_error(lambda b: tn.sum(tn.add_bias(x, b, 1) * probe), rng.standard_normal(3)) < 1e-4


def test_forward_determinism(rng):
    x = rng.standard_normal((2, 8, 8))
    w = rng.standard_normal((3, 2, 3, 3))
    a = tn.silu(tn.conv2d(Tensor(x), Tensor(w), 2)).data
    b = tn.silu(tn.conv2d(Tensor(x), Tensor(w), 2)).data
    assert a.tobytes() == b.tobytes()


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-10, 10)))
def test_transpose_roundtrip_and_grad(x):
    t = Tensor(x, requires_grad=True)
    y = tn.transpose(tn.transpose(t))
    np.testing.assert_array_equal(y.data, x)
    tn.backward(tn.sum(y * 2.0))
    np.testing.assert_array_equal(t.grad, np.full((3, 4), 2.0))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (2, 5), elements=st.floats(-30, 30)))
def test_silu_bounded_below(x):
    # silu attains its minimum of about -0.2785 near x = -1.278
    assert tn.silu(Tensor(x)).data.min() >= -0.2785
