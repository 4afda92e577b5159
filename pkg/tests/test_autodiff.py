import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from src import autodiff as ad
from src.errors import GradientError, ShapeError


def test_forward_values():
    assert np.array_equal(ad.matmul([[1.0, 2.0], [3.0, 4.0]], [[1.0], [1.0]]).data, [[3.0], [7.0]])
    assert np.array_equal(ad.relu([-1.0, 0.0, 2.0]).data, [0.0, 0.0, 2.0])
    assert ad.sigmoid([0.0]).data[0] == 0.5


def test_square_gradient():
    w = ad.parameter([3.0])
    with ad.Trace() as tape:
        loss = ad.sum_(ad.square(w))
    tape.backward(loss)
    assert np.array_equal(w.grad, [6.0])


def test_reused_operand_accumulates():
    w = ad.parameter([2.0])
    with ad.Trace() as tape:
        loss = ad.sum_(w * w)
    tape.backward(loss)
    assert np.array_equal(w.grad, [4.0])


def test_broadcast_gradient_is_reduced():
    a = ad.parameter(np.ones((4, 3)))
    b = ad.parameter(np.arange(3.0))
    with ad.Trace() as tape:
        loss = ad.sum_(a * b)
    tape.backward(loss)
    assert a.grad.shape == (4, 3)
    assert np.array_equal(b.grad, [4.0, 4.0, 4.0])


def test_gather_scatters_repeated_rows():
    table = ad.parameter(np.arange(6.0).reshape(3, 2))
    with ad.Trace() as tape:
        loss = ad.sum_(ad.getitem(table, np.array([0, 0, 2])))
    tape.backward(loss)
    assert np.array_equal(table.grad, [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]])


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(ShapeError) as info:
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))
    assert "matmul" in info.value.message
    assert "(2, 3)" in info.value.message
    with pytest.raises(ShapeError):
        ad.add(np.ones(3), np.ones(4))


def test_backward_rejects_non_scalar_and_empty_trace():
    w = ad.parameter(np.ones(3))
    with ad.Trace() as tape:
        out = ad.square(w)
    with pytest.raises(GradientError):
        tape.backward(out)
    with pytest.raises(GradientError):
        ad.Trace().backward(ad.constant(1.0))


def test_no_trace_suspends_recording():
    w = ad.parameter([1.0, 2.0])
    with ad.Trace() as tape:
        with ad.no_trace():
            ad.sum_(ad.square(w))
        assert len(tape) == 0
        ad.sum_(w)
        assert len(tape) == 1


def test_constants_do_not_record():
    with ad.Trace() as tape:
        ad.exp(ad.constant([1.0])) + 1.0
    assert len(tape) == 0


def test_trace_is_thread_local():
    seen = []
    with ad.Trace():
        worker = threading.Thread(target=lambda: seen.append(ad.active_trace()))
        worker.start()
        worker.join()
        assert ad.active_trace() is not None
    assert seen == [None]


def test_unary_ops_match_finite_differences():
    rng = np.random.default_rng(0)
    x = ad.parameter(rng.uniform(0.5, 2.0, size=(3, 4)))
    weights = ad.constant(rng.normal(size=(3, 40)))

    def fn(t):
        parts = [ad.sin(t), ad.cos(t), ad.exp(t), ad.log(t), ad.sigmoid(t),
                 ad.softplus(t), ad.sqrt(t), ad.square(t), ad.div(1.0, t), ad.relu(t - 1.25)]
        return ad.sum_(ad.concat(parts, axis=1) * weights)

    assert ad.gradcheck(fn, [x]) < 1e-6


def test_structural_ops_match_finite_differences():
    rng = np.random.default_rng(1)
    a = ad.parameter(rng.normal(size=(2, 3)))
    b = ad.parameter(rng.normal(size=(3, 2)))
    weights = rng.normal(size=(4, 3))

    def fn(x, y):
        joined = ad.stack([x, ad.reshape(y, (2, 3))], axis=0)
        picked = ad.getitem(ad.reshape(joined, (4, 3)), np.array([3, 0, 0, 1]))
        spread = ad.broadcast_to(ad.sum_(x, axis=0, keepdims=True), (4, 3))
        return ad.sum_((picked + spread) * weights) + ad.sum_(x @ y)

    assert ad.gradcheck(fn, [a, b]) < 1e-6


def test_mlp_matches_finite_differences():
    rng = np.random.default_rng(2)
    dims = [4, 6, 6, 6, 6, 2]
    layers = [(ad.parameter(rng.normal(scale=0.5, size=(i, o))), ad.parameter(rng.normal(size=o)))
              for i, o in zip(dims[:-1], dims[1:])]
    x = ad.constant(rng.normal(size=(5, 4)))
    flat = [t for pair in layers for t in pair]

    def fn(*params):
        h = x
        for k in range(0, len(params), 2):
            h = h @ params[k] + params[k + 1]
            if k < len(params) - 2:
                h = ad.softplus(h)
        return ad.sum_(ad.square(h))

    assert ad.gradcheck(fn, flat) < 1e-4


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (3,), elements=st.floats(-10, 10)),
       arrays(np.float64, (3,), elements=st.floats(-10, 10)))
def test_product_gradient_is_other_factor(a, b):
    x, y = ad.parameter(a), ad.parameter(b)
    with ad.Trace() as tape:
        loss = ad.sum_(x * y)
    tape.backward(loss)
    assert np.array_equal(x.grad, b)
    assert np.array_equal(y.grad, a)


def test_scalar_tensors_keep_zero_dims():
    assert ad.constant(0.5).shape == ()
    w = ad.parameter(0.5)
    with ad.Trace() as tape:
        loss = ad.square(w) * 3.0
    tape.backward(loss)
    assert w.grad.shape == ()
    assert w.grad == 3.0
    assert ad.stack([w, ad.constant(1.0), ad.constant(2.0)]).shape == (3,)


_STEPS = [
    lambda t, w: ad.sin(t),
    lambda t, w: ad.cos(t),
    lambda t, w: ad.sigmoid(t),
    lambda t, w: ad.softplus(ad.sin(t)),
    lambda t, w: ad.square(ad.sin(t)),
    lambda t, w: ad.sqrt(ad.softplus(ad.cos(t)) + 0.5),
    lambda t, w: ad.log(ad.sigmoid(t) + 0.5),
    lambda t, w: ad.div(1.0, ad.softplus(t) + 1.0),
    lambda t, w: ad.exp(ad.scale(ad.cos(t), 0.5)),
    lambda t, w: ad.sin(t @ w),
    lambda t, w: ad.sigmoid(t @ w) * ad.cos(t),
]


def _random_graph(seed):
    rng = np.random.default_rng(seed)
    steps = [_STEPS[i] for i in rng.integers(len(_STEPS), size=int(rng.integers(1, 21)))]
    x = ad.parameter(rng.normal(size=(2, 3)))
    w = ad.parameter(rng.normal(scale=0.5, size=(3, 3)))
    readout = rng.normal(size=(2, 3))

    def fn(a, b):
        h = a
        for step in steps:
            h = h + 0.5 * step(h, b)
        return ad.sum_(h * readout)

    return fn, x, w


@pytest.mark.parametrize("seed", range(100))
def test_composed_graphs_match_finite_differences(seed):
    fn, x, w = _random_graph(seed)
    assert ad.gradcheck(fn, [x, w]) < 1e-4


def test_gradients_are_bit_identical_across_runs():
    def grads():
        fn, x, w = _random_graph(42)
        with ad.Trace() as tape:
            loss = fn(x, w)
        tape.backward(loss)
        return x.grad, w.grad

    first, second = grads(), grads()
    assert all(np.array_equal(a, b) for a, b in zip(first, second))


@settings(max_examples=25, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5))
def test_gradient_is_linear(alpha, beta):
    rng = np.random.default_rng(3)
    x = ad.parameter(rng.normal(size=(4, 3)))
    w = rng.normal(size=(3, 2))

    def f(t):
        return ad.sum_(ad.sin(t) * 2.0)

    def g(t):
        return ad.sum_(ad.softplus(t @ w))

    def grad_of(fn):
        x.zero_grad()
        with ad.Trace() as tape:
            loss = fn(x)
        tape.backward(loss)
        return x.grad.copy()

    combined = grad_of(lambda t: f(t) * alpha + g(t) * beta)
    assert np.allclose(combined, alpha * grad_of(f) + beta * grad_of(g), rtol=1e-12, atol=1e-12)
