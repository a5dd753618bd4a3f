import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from eianet import tensor as T
from eianet.errors import ContractError, DimensionError
from eianet.gradcheck import check_gradients
from eianet.tensor import Tensor

from oracles import naive_conv2d


# -- matmul ---------------------------------------------------------------------------
def test_matmul_identity():
    A = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(Tensor(np.eye(2)), Tensor(A)).data, A)


def test_matmul_hand_value():
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    assert np.array_equal(out.data, [[3.0], [7.0]])


def test_matmul_gradient_is_ones_times_b_transpose():
    rng = np.random.default_rng(3)
    A = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    B = Tensor(rng.standard_normal((4, 2)))
    T.matmul(A, B).sum().backward()
    np.testing.assert_allclose(A.grad, np.ones((3, 2)) @ B.data.T, rtol=1e-14)
    res = check_gradients(lambda: T.matmul(A, B).sum(), [A], h=1e-6)
    assert res["max_rel_error"] < 1e-6
    np.testing.assert_allclose(res["numeric"].reshape(3, 4), np.ones((3, 2)) @ B.data.T, rtol=1e-6)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


# -- conv2d -------------------------------------------------------------------------------
def test_conv_identity_1x1():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 5, 5))
    w = np.eye(3).reshape(3, 3, 1, 1)
    assert np.array_equal(T.conv2d(Tensor(x), Tensor(w)).data, x)


def test_conv_zero_kernel():
    x = np.random.default_rng(1).standard_normal((1, 3, 4, 4))
    out = T.conv2d(Tensor(x), Tensor(np.zeros((2, 3, 3, 3))), padding=1)
    assert out.shape == (1, 2, 4, 4)
    assert not out.data.any()


@pytest.mark.parametrize("stride,padding,size", [(1, 1, 4), (1, 0, 5), (2, 1, 5), (2, 0, 7)])
def test_conv_matches_loop_oracle(stride, padding, size):
    rng = np.random.default_rng(size + stride)
    x = rng.standard_normal((1, 3, size, size))
    w = rng.standard_normal((2, 3, 3, 3))
    out = T.conv2d(Tensor(x), Tensor(w), stride=stride, padding=padding).data
    assert np.max(np.abs(out - naive_conv2d(x, w, stride, padding))) < 1e-10


def test_conv_non_integral_output():
    with pytest.raises(DimensionError):
        T.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))), stride=2, padding=1)


def test_conv_channel_mismatch():
    with pytest.raises(DimensionError):
        T.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


# -- softmax / normalisation -------------------------------------------------------------
def test_softmax_symmetric():
    np.testing.assert_array_equal(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_softmax_large_inputs():
    out = T.softmax(Tensor([1000.0, 1000.0 + np.log(2.0)])).data
    np.testing.assert_allclose(out, [1 / 3, 2 / 3], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(
    hnp.arrays(np.float64, (3, 5), elements=st.floats(-50, 50)),
    st.floats(-100, 100),
)
def test_softmax_normalised_and_shift_invariant(x, shift):
    a = T.softmax(Tensor(x), axis=1).data
    b = T.softmax(Tensor(x + shift), axis=1).data
    assert np.all(a > 0)
    np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_softmax_gradient():
    rng = np.random.default_rng(2)
    x = Tensor(rng.standard_normal((4, 6)), requires_grad=True)
    R = rng.standard_normal((4, 6))
    assert check_gradients(lambda: (T.softmax(x, axis=1) * R).sum(), [x])["max_rel_error"] < 1e-5


@pytest.mark.parametrize(
    "vec,expected",
    [([3.0, 4.0], [0.6, 0.8]), ([1.0, 0.0], [1.0, 0.0]), ([0.0, 0.0], [0.0, 0.0])],
)
def test_l2_normalize_cases(vec, expected):
    np.testing.assert_allclose(T.l2_normalize(Tensor([vec]), axis=1).data, [expected], atol=1e-15)


def test_l2_normalize_unit_rows():
    x = np.random.default_rng(4).standard_normal((10, 7))
    out = T.l2_normalize(Tensor(x), axis=1).data
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-14)


# -- orthonormal columns --------------------------------------------------------------------
def test_orthonormal_one_by_one():
    U = T.orthonormal_columns(1, 1, seed=5).data
    assert U.shape == (1, 1) and abs(abs(U[0, 0]) - 1.0) < 1e-15


def test_orthonormal_gram_4x3():
    for seed in range(10):
        U = T.orthonormal_columns(4, 3, seed).data
        assert np.max(np.abs(U.T @ U - np.eye(3))) <= 1e-10


@pytest.mark.parametrize("d", [1, 2, 7, 33, 64, 128])
def test_orthonormal_gram_up_to_128(d):
    for K in sorted({1, max(1, d // 3), max(1, d - 1), d}):
        U = T.orthonormal_columns(d, K, seed=d * 1000 + K).data
        assert np.max(np.abs(U.T @ U - np.eye(K))) <= 1e-10


def test_orthonormal_deterministic():
    a = T.orthonormal_columns(16, 5, 11).data
    b = T.orthonormal_columns(16, 5, 11).data
    assert a.tobytes() == b.tobytes()


def test_orthonormal_rejects_wide():
    with pytest.raises(DimensionError):
        T.orthonormal_columns(3, 4, 0)


# -- backward contract ------------------------------------------------------------------------
def test_backward_sum_gives_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_square_gives_2x():
    x = Tensor([1.5, -2.0, 3.0], requires_grad=True)
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, 2 * x.data)


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        (x * 2.0).backward()


def test_backward_rejects_reused_tape():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = (x * x).sum()
    loss.backward()
    with pytest.raises(ContractError):
        loss.backward()


def test_backward_rejects_graph_built_on_consumed_nodes():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = x * x
    y.sum().backward()
    with pytest.raises(ContractError):
        (y * 3.0).sum().backward()


def test_backward_visits_reverse_creation_order():
    x = Tensor([1.0], requires_grad=True)
    a = x * 2.0
    b = a + 1.0
    c = T.exp(b)
    loss = c.sum()
    visited = []
    for node in (a, b, c, loss):
        fn = node._backward

        def spy(g, fn=fn, node=node):
            visited.append(node)
            return fn(g)

        node._backward = spy
    loss.backward()
    assert visited == [loss, c, b, a]


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = x * 3.0
    assert not y.requires_grad and y._backward is None


def test_grad_populated_for_intermediates_with_matching_shape():
    x = Tensor(np.ones((2, 3)), requires_grad=True)
    h = x * 2.0
    h.sum().backward()
    assert h.grad.shape == h.shape and x.grad.shape == x.shape


# -- finite-difference sweep over every differentiable op ----------------------------------
def _ops(rng):
    def pos(shape):
        return Tensor(rng.uniform(0.5, 2.0, shape), requires_grad=True)

    def any_(shape):
        return Tensor(rng.standard_normal(shape), requires_grad=True)

    a, b, c = any_((3, 4)), any_((3, 4)), any_((1, 4))
    p = pos((3, 4))
    m1, m2 = any_((2, 3, 4)), any_((2, 4, 5))
    x4 = any_((2, 3, 5, 5))
    w3 = any_((4, 3, 3, 3))
    w1 = any_((4, 3, 1, 1))
    return {
        "add": (lambda: a + c, [a, c]),
        "sub": (lambda: a - b, [a, b]),
        "mul": (lambda: a * c, [a, c]),
        "div": (lambda: a / p, [a, p]),
        "scalar": (lambda: a * 3.0 - 1.5, [a]),
        "relu": (lambda: T.relu(a), [a]),
        "exp": (lambda: T.exp(a), [a]),
        "log": (lambda: T.log(p), [p]),
        "square": (lambda: T.square(a), [a]),
        "sum_axis": (lambda: a.sum(axis=1, keepdims=True), [a]),
        "mean": (lambda: a.mean(axis=0), [a]),
        "reshape": (lambda: a.reshape(4, 3), [a]),
        "transpose": (lambda: m1.transpose(0, 2, 1), [m1]),
        "take": (lambda: a[np.array([0, 2, 2])], [a]),
        "matmul_batched": (lambda: T.matmul(m1, m2), [m1, m2]),
        "softmax": (lambda: T.softmax(a, axis=1), [a]),
        "log_softmax": (lambda: T.log_softmax(a, axis=0), [a]),
        "l2_normalize": (lambda: T.l2_normalize(a, axis=1), [a]),
        "conv3x3": (lambda: T.conv2d(x4, w3, padding=1), [x4, w3]),
        "conv3x3_stride2": (lambda: T.conv2d(x4, w3, stride=2, padding=0), [x4, w3]),
        "conv1x1": (lambda: T.conv2d(x4, w1), [x4, w1]),
        "avg_pool": (lambda: T.avg_pool2d(T.conv2d(x4, w1)[:, :, :4, :4], 2), [x4, w1]),
        "gap": (lambda: T.global_average_pool(x4), [x4]),
        "clamp_min": (lambda: T.clamp_min(a, -0.3), [a]),
    }


@pytest.mark.parametrize("op", sorted(_ops(np.random.default_rng(0))))
def test_finite_differences_every_op(op):
    worst = 0.0
    for trial in range(100 if op not in {"conv3x3", "conv3x3_stride2", "avg_pool"} else 20):
        rng = np.random.default_rng(trial)
        fn, params = _ops(rng)[op]
        shape = fn().shape
        R = rng.standard_normal(shape)
        res = check_gradients(lambda: (fn() * R).sum(), params, n_samples=20, h=1e-6, seed=trial)
        worst = max(worst, res["max_rel_error"])
    assert worst < 1e-4, f"{op}: max relative error {worst:.2e}"


def test_determinism_bitwise():
    def run():
        rng = np.random.default_rng(9)
        x = Tensor(rng.standard_normal((2, 3, 6, 6)), requires_grad=True)
        w = Tensor(rng.standard_normal((4, 3, 3, 3)), requires_grad=True)
        y = T.softmax(T.global_average_pool(T.relu(T.conv2d(x, w, padding=1))), axis=1)
        y.sum().backward()
        return y.data.tobytes() + w.grad.tobytes()

    assert run() == run()


def test_tensor_shape_invariant():
    for shape in itertools.product([1, 2, 3], repeat=3):
        t = Tensor(np.zeros(shape))
        assert int(np.prod(t.shape)) == t.data.size


def test_gradcheck_floor_tracks_difference_noise():
    big = Tensor(np.array([1e6, 1e-6]), requires_grad=True)
    res = check_gradients(lambda: (big * big).sum() * 0.5, [big], h=1e-6)
    # the 1e-6 entry sits far below what a 1e-6 step can resolve on a 5e11 loss
    assert res["floor"] > 1e-3
    assert res["max_rel_error"] < 1e-4
    small = Tensor(np.array([0.3]), requires_grad=True)
    assert check_gradients(lambda: (small * small).sum(), [small])["floor"] == 1e4 * np.finfo(float).eps / 1e-6
