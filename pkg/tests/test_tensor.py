import math

import numpy as np
import pytest

from ggam import tensor as T
from ggam.tensor import Tensor


def rng(seed=0):
    return np.random.Generator(np.random.PCG64(seed))


# ---------------------------------------------------------------------------
# construction


def test_create_row_major_layout():
    t = T.create([2, 2], [1, 2, 3, 4])
    assert t.data[1, 1] == 4.0
    assert t.data[0, 1] == 2.0


def test_create_zero_vector():
    t = T.create([3], [0, 0, 0])
    assert t.shape == (3,)
    assert np.array_equal(t.data, np.zeros(3))


def test_create_length_mismatch():
    with pytest.raises(ValueError):
        T.create([2], [1, 2, 3])


def test_create_never_has_grad():
    t = T.create([2], [1, 2], requires_grad=True)
    assert t.grad is None


# ---------------------------------------------------------------------------
# elementwise ops


def test_sigmoid_symmetry_point():
    assert T.sigmoid(Tensor(0.0)).item() == 0.5


def test_relu_definition():
    out = T.relu(Tensor([-3.0, 3.0]))
    assert np.array_equal(out.data, [0.0, 3.0])


def test_exp_matches_math_library():
    # oracle: scalar math library applied elementwise
    out = T.exp(Tensor([0.0, 1.0]))
    expected = [math.exp(0.0), math.exp(1.0)]
    assert np.allclose(out.data, expected, atol=1e-6)
    assert abs(out.data[1] - 2.718282) < 1e-6


def test_log_rejects_nonpositive_with_index():
    with pytest.raises(ValueError, match=r"index \(1,\)"):
        T.log(Tensor([1.0, 0.0, 2.0]))


def test_hadamard_definition():
    assert np.array_equal(T.hadamard(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [3.0, 8.0])


def test_add_identity():
    x = Tensor([[1.0, -2.0], [0.5, 3.0]])
    out = T.add(x, Tensor(np.zeros((2, 2))))
    assert np.array_equal(out.data, x.data)


def test_div_by_zero_element():
    with pytest.raises(ZeroDivisionError):
        T.div(Tensor([1.0, 1.0]), Tensor([0.0, 1.0]))


def test_incompatible_shapes_raise():
    with pytest.raises(ValueError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


def test_broadcast_stretches_size_one_axis():
    out = T.hadamard(Tensor(np.ones((2, 3))), Tensor([[2.0], [3.0]]))
    assert np.array_equal(out.data, [[2, 2, 2], [3, 3, 3]])


def test_broadcast_backward_sums_stretched_axes():
    y = Tensor([2.0, 3.0], requires_grad=True)
    x = Tensor(np.arange(6, dtype=float).reshape(3, 2), requires_grad=True)
    T.backward(T.reduce_sum(T.hadamard(x, y)))
    assert np.array_equal(y.grad, x.data.sum(axis=0))
    assert np.array_equal(x.grad, np.tile(y.data, (3, 1)))


# ---------------------------------------------------------------------------
# matmul


def test_matmul_identity():
    x = Tensor(rng(1).normal(size=(2, 5)))
    out = T.matmul(Tensor(np.eye(2)), x)
    assert np.array_equal(out.data, x.data)


def test_matmul_hand_case():
    out = T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    assert out.data.tolist() == [[11.0]]


def test_matmul_matches_triple_loop():
    r = rng(2)
    a, b = r.normal(size=(3, 4)), r.normal(size=(4, 2))
    # oracle: naive triple loop
    expected = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                expected[i, j] += a[i, k] * b[k, j]
    assert np.allclose(T.matmul(Tensor(a), Tensor(b)).data, expected, atol=1e-12)


def test_matmul_dimension_mismatch():
    with pytest.raises(ValueError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


# ---------------------------------------------------------------------------
# conv2d


def conv_oracle(x, k, stride, pad):
    # independent sliding-window evaluation
    cin, w, h = x.shape
    cout, _, kw, kh = k.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    wo = (w + 2 * pad - kw) // stride + 1
    ho = (h + 2 * pad - kh) // stride + 1
    out = np.zeros((cout, wo, ho))
    for o in range(cout):
        for i in range(wo):
            for j in range(ho):
                out[o, i, j] = np.sum(xp[:, i * stride : i * stride + kw, j * stride : j * stride + kh] * k[o])
    return out


def test_conv2d_identity_kernel():
    x = rng(3).normal(size=(1, 4, 4))
    out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), stride=1, pad=0)
    assert np.array_equal(out.data, x)


def test_conv2d_hand_case():
    x = Tensor([[[1.0, 2.0], [3.0, 4.0]]])
    k = Tensor(np.ones((1, 1, 2, 2)))
    assert T.conv2d(x, k, stride=1, pad=0).data.tolist() == [[[10.0]]]


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (3, 2)])
def test_conv2d_matches_sliding_window_oracle(stride, pad):
    r = rng(4)
    x = r.normal(size=(2, 8, 8))
    k = r.normal(size=(4, 2, 3, 3))
    out = T.conv2d(Tensor(x), Tensor(k), stride=stride, pad=pad)
    assert np.allclose(out.data, conv_oracle(x, k, stride, pad), atol=1e-10)


def test_conv2d_output_shape_formula():
    out = T.conv2d(Tensor(np.zeros((1, 9, 7))), Tensor(np.zeros((2, 1, 3, 3))), stride=2, pad=1)
    assert out.shape == (2, (9 + 2 - 3) // 2 + 1, (7 + 2 - 3) // 2 + 1)


def test_conv2d_kernel_too_large():
    with pytest.raises(ValueError):
        T.conv2d(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))), stride=1, pad=0)


def test_conv2d_channel_mismatch():
    with pytest.raises(ValueError):
        T.conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 3, 2, 2))))


# ---------------------------------------------------------------------------
# maxpool2d


def test_maxpool_size_one_is_identity():
    x = rng(5).normal(size=(2, 3, 3))
    assert np.array_equal(T.maxpool2d(Tensor(x), 1).data, x)


def test_maxpool_hand_case():
    assert T.maxpool2d(Tensor([[[1.0, 2.0], [3.0, 4.0]]]), 2).data.tolist() == [[[4.0]]]


def test_maxpool_matches_window_scan_oracle():
    x = rng(6).normal(size=(3, 8, 8))
    out = T.maxpool2d(Tensor(x), 2)
    expected = np.zeros((3, 4, 4))
    for c in range(3):
        for i in range(4):
            for j in range(4):
                expected[c, i, j] = x[c, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2].max()
    assert np.array_equal(out.data, expected)


def test_maxpool_gradient_first_max_tie_rule():
    x = Tensor([[[2.0, 2.0], [2.0, 2.0]]], requires_grad=True)
    T.backward(T.reduce_sum(T.maxpool2d(x, 2)))
    assert np.array_equal(x.grad, [[[1.0, 0.0], [0.0, 0.0]]])


def test_maxpool_non_divisible():
    with pytest.raises(ValueError):
        T.maxpool2d(Tensor(np.zeros((1, 5, 4))), 2)


# ---------------------------------------------------------------------------
# reductions


def test_mean_of_constant_tensor():
    out = T.reduce_mean(Tensor(np.full((3, 4), 2.5)))
    assert out.item() == 2.5


def test_sum_axis_zero():
    assert np.array_equal(T.reduce_sum(Tensor([[1.0, 2.0], [3.0, 4.0]]), axes=(0,)).data, [4.0, 6.0])


def test_reduce_matches_loop_oracle():
    x = rng(7).normal(size=(3, 4, 2))
    out = T.reduce_sum(Tensor(x), axes=(0, 2))
    expected = np.zeros(4)
    for j in range(4):
        for i in range(3):
            for k in range(2):
                expected[j] += x[i, j, k]
    assert np.allclose(out.data, expected, atol=1e-12)
    mean = T.reduce_mean(Tensor(x), axes=(1,))
    assert np.allclose(mean.data, expected_mean_oracle(x), atol=1e-12)


def expected_mean_oracle(x):
    out = np.zeros((x.shape[0], x.shape[2]))
    for i in range(x.shape[0]):
        for k in range(x.shape[2]):
            out[i, k] = sum(x[i, j, k] for j in range(x.shape[1])) / x.shape[1]
    return out


def test_reduce_invalid_axis():
    with pytest.raises(ValueError):
        T.reduce_sum(Tensor(np.zeros((2, 2))), axes=(2,))


def test_global_avg_pool_is_spatial_mean():
    x = rng(8).normal(size=(4, 3, 5))
    assert np.allclose(T.global_avg_pool(Tensor(x)).data, x.mean(axis=(1, 2)), atol=1e-15)


# ---------------------------------------------------------------------------
# softmax


def test_softmax_uniform_on_equal_inputs():
    out = T.softmax(Tensor(np.full(5, 1.3)), axis=0)
    assert np.allclose(out.data, 0.2, atol=1e-12)


def test_softmax_closed_form():
    out = T.softmax(Tensor([0.0, math.log(3.0)]), axis=0)
    assert np.allclose(out.data, [0.25, 0.75], atol=1e-12)


def test_softmax_shift_invariance():
    x = rng(9).normal(size=(6,))
    a = T.softmax(Tensor(x), axis=0).data
    b = T.softmax(Tensor(x + 17.0), axis=0).data
    assert np.allclose(a, b, atol=1e-12)


def test_softmax_outputs_positive_and_normalized():
    r = rng(10)
    for _ in range(20):
        x = r.normal(size=(3, 5)) * 5
        out = T.softmax(Tensor(x), axis=1).data
        assert np.all(out > 0)
        assert np.allclose(out.sum(axis=1), 1.0, atol=1e-12)


def test_softmax_rejects_nonfinite():
    with pytest.raises(ValueError):
        T.softmax(Tensor([1.0, np.inf]), axis=0)


# ---------------------------------------------------------------------------
# backward semantics


def test_backward_square_gradient():
    x = Tensor([3.0], requires_grad=True)
    T.backward(T.reduce_sum(T.hadamard(x, x)))
    assert np.array_equal(x.grad, [6.0])


def test_backward_sum_gives_exact_ones():
    x = Tensor(rng(11).normal(size=(3, 4, 2)), requires_grad=True)
    T.backward(T.reduce_sum(x))
    assert np.array_equal(x.grad, np.ones((3, 4, 2)))


def test_backward_requires_scalar_root():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        T.backward(T.exp(x))


def test_backward_accumulates_without_reset():
    x = Tensor([2.0], requires_grad=True)
    out = T.reduce_sum(T.hadamard(x, x))
    T.backward(out)
    T.backward(out)
    assert np.array_equal(x.grad, [8.0])


def test_no_requires_grad_never_accumulates():
    x = Tensor([1.0, 2.0], requires_grad=False)
    w = Tensor([3.0, 4.0], requires_grad=True)
    T.backward(T.reduce_sum(T.hadamard(x, w)))
    assert x.grad is None
    assert np.array_equal(w.grad, x.data)


def test_zero_grad_clears_graph():
    x = Tensor([1.0], requires_grad=True)
    out = T.reduce_sum(T.hadamard(x, x))
    T.backward(out)
    T.zero_grad(out)
    assert x.grad is None


def test_backward_composite_matches_finite_differences():
    r = rng(12)
    x = Tensor(r.normal(size=(2, 6, 6)), requires_grad=True)
    k = Tensor(r.normal(size=(2, 2, 3, 3)), requires_grad=True)
    w = Tensor(r.normal(size=(8, 3)), requires_grad=True)

    def builder(xi, ki, wi):
        conv = T.relu(T.conv2d(xi, ki, stride=1, pad=1))
        pooled = T.maxpool2d(conv, 3)
        flat = T.reshape(pooled, (1, 8))
        return T.reduce_sum(T.matmul(flat, wi))

    report = T.grad_check(builder, [x, k, w], eps=1e-5, tol=1e-4)
    assert report.passed, report


def test_backward_stop_at_keeps_frontier_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    mid = T.hadamard(x, x)
    out = T.reduce_sum(T.hadamard(mid, Tensor([3.0, 4.0])))
    T.backward(out, stop_at=[mid])
    assert np.array_equal(mid.grad, [3.0, 4.0])
    assert x.grad is None  # sweep stopped above x


def test_determinism_bit_identical():
    def compute():
        r = rng(13)
        x = Tensor(r.normal(size=(2, 8, 8)), requires_grad=True)
        k = Tensor(r.normal(size=(3, 2, 3, 3)), requires_grad=True)
        out = T.reduce_sum(T.softmax(T.global_avg_pool(T.conv2d(x, k, 1, 1)), axis=0))
        T.backward(out)
        return out.data.copy(), x.grad.copy(), k.grad.copy()

    a, b = compute(), compute()
    for u, v in zip(a, b):
        assert np.array_equal(u, v)


# ---------------------------------------------------------------------------
# grad_check


def test_grad_check_linear_graph_near_exact():
    r = rng(14)
    x = Tensor(r.normal(size=(4,)), requires_grad=True)
    w = Tensor(r.normal(size=(4,)))
    report = T.grad_check(lambda t: T.reduce_sum(T.hadamard(t, w)), [x], eps=1e-5, tol=1e-10)
    assert report.passed
    assert max(report.max_rel_error) < 1e-10


def test_grad_check_detects_corrupted_backward():
    x = Tensor([0.7, -0.3], requires_grad=True)

    def broken_square(t):
        out = Tensor(t.data**2, requires_grad=True)
        # deliberately wrong rule: d(x^2)/dx claimed to be 3x
        out.node = T._Node("broken", (t,), lambda g: (g * 3.0 * t.data,))
        return T.reduce_sum(out)

    report = T.grad_check(broken_square, [x], eps=1e-5, tol=1e-4)
    assert not report.passed


def test_grad_check_rejects_nonscalar_builder():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        T.grad_check(lambda t: T.exp(t), [x])


def test_no_grad_suppresses_graph():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        out = T.hadamard(x, x)
    assert out.node is None and not out.requires_grad
