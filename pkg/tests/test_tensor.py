import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cpgan import tensor as T
from cpgan.gradcheck import grad_check
from cpgan.tensor import Graph, Tensor

from gradcases import build_cases

CASES = sorted(build_cases(np.random.default_rng(0)))


@pytest.mark.parametrize("name", CASES)
def test_primitive_gradients(name, f64):
    f, params = build_cases(np.random.default_rng(7))[name]
    report = grad_check(f, params, h=1e-4, tol=1e-5)
    assert report.passed, f"{name}: {report}"


@pytest.mark.parametrize("name", CASES)
def test_primitive_gradients_on_100_instances(name, f64):
    failures = []
    for seed in range(100):
        f, params = build_cases(np.random.default_rng([100, seed]))[name]
        report = grad_check(f, params, h=1e-4, tol=1e-5)
        if not report.passed:
            failures.append((seed, str(report)))
    assert not failures, failures[:3]


def test_fresh_tensor_per_op(f64):
    a = Tensor(np.ones(3), requires_grad=True)
    b = a * 2.0
    assert b is not a and b.data is not a.data
    np.testing.assert_array_equal(a.data, np.ones(3))


def test_reused_subexpression_accumulates(f64):
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    y = x * x
    (T.sum_(y + y)).backward()
    np.testing.assert_allclose(x.grad, 4 * x.data)


def test_backward_visits_each_node_once(f64):
    x = Tensor(np.array([0.3]), requires_grad=True)
    h = T.tanh(x)
    out = T.sum_(h * h + h)
    nodes = Graph.trace(out).run_backward(np.ones(()))
    assert len(nodes) == len({id(n) for n in nodes})


def test_clear_zeroes_grads_not_values(f64):
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    g = Graph.trace(T.sum_(x * x))
    g.run_backward(np.ones(()))
    assert x.grad.any()
    g.clear()
    np.testing.assert_array_equal(x.grad, 0.0)
    np.testing.assert_array_equal(x.data, [1.0, 2.0])


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError, match="shape mismatch"):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((3, 2)))


def test_matmul_error_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_take_out_of_range():
    with pytest.raises(IndexError):
        T.take(Tensor(np.ones((3, 2))), np.array([3]), axis=0)


def test_softmax_empty_axis():
    with pytest.raises(ValueError):
        T.softmax(Tensor(np.ones((2, 0))), axis=1)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = x * 3.0
    assert y.is_leaf and not y.requires_grad


def test_precision_modes():
    assert Tensor([1.0]).dtype == np.float32
    with T.precision("float64"):
        assert Tensor([1.0]).dtype == np.float64
    with pytest.raises(ValueError):
        T.set_precision("float16")


def test_softmax_extreme_logits_stay_finite(f64):
    out = T.softmax(Tensor(np.array([[1000.0, -1000.0, 0.0]])), axis=1)
    assert np.isfinite(out.data).all()
    np.testing.assert_allclose(out.data.sum(), 1.0)


def test_masked_softmax_zeroes_excluded():
    out = T.softmax(Tensor(np.array([[1.0, 5.0, 2.0]])), axis=1, mask=np.array([[True, False, True]]))
    assert out.data[0, 1] == 0.0
    np.testing.assert_allclose(out.data.sum(), 1.0, atol=1e-6)


def test_cosine_zero_vector_is_zero(f64):
    out = T.cosine(Tensor(np.zeros((1, 3))), Tensor(np.ones((1, 3))), axis=1)
    assert out.data[0] == 0.0


def test_conv2d_matches_direct_loop(f64, rng):
    x = rng.standard_normal((1, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    out = T.conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((1, 3, 3, 3))
    for o in range(3):
        for i in range(3):
            for j in range(3):
                ref[0, o, i, j] = (xp[0, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * w[o]).sum()
    np.testing.assert_allclose(out, ref, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)),
              elements=st.floats(-50, 50, allow_nan=False)))
def test_softmax_rows_sum_to_one(x):
    with T.precision("float64"):
        out = T.softmax(Tensor(x), axis=1).data
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)
    assert (out >= 0).all()


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 5)),
              elements=st.floats(-30, 30, allow_nan=False)))
def test_logsumexp_matches_log_of_sum(x):
    with T.precision("float64"):
        out = T.logsumexp(Tensor(x), axis=1).data
    np.testing.assert_allclose(out, np.log(np.exp(x).sum(axis=1)), rtol=1e-12, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3))
def test_expand_adjoint_is_sum(a, b, seed):
    rng = np.random.default_rng(seed)
    with T.precision("float64"):
        x = Tensor(rng.standard_normal((1, b)), requires_grad=True)
        g = rng.standard_normal((a, b))
        T.expand(x, (a, b)).backward(g)
    np.testing.assert_allclose(x.grad, g.sum(axis=0, keepdims=True))


def test_cosine_propagates_nan():
    x = Tensor(np.array([[np.nan, 1.0], [0.0, 0.0]]))
    y = Tensor(np.array([[1.0, 1.0], [1.0, 2.0]]))
    c = T.cosine(x, y).data
    assert np.isnan(c[0]) and c[1] == 0.0


def test_softmax_shift_invariance():
    rng = np.random.default_rng(11)
    with T.precision("float64"):
        for _ in range(1000):
            x = rng.standard_normal(int(rng.integers(1, 9))) * 5
            shift = rng.standard_normal() * 50
            a = T.softmax(Tensor(x)).data
            b = T.softmax(Tensor(x + shift)).data
            assert np.abs(a - b).max() <= 1e-9
            assert abs(a.sum() - 1) <= 1e-6


def test_replay_is_bitwise_identical():
    def run():
        rng = np.random.default_rng(5)
        x = Tensor(rng.standard_normal((2, 3, 6, 6)), requires_grad=True)
        w = Tensor(rng.standard_normal((4, 3, 3, 3)), requires_grad=True)
        y = T.softmax(T.reshape(T.conv2d(x, w, padding=1), (2, -1)), axis=1)
        out = T.sum_(y * y)
        out.backward()
        return out.data.tobytes(), x.grad.tobytes(), w.grad.tobytes()

    with T.deterministic():
        assert run() == run()
