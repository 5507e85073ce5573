import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prefixvqa import tensor as T
from prefixvqa.errors import DegenerateMaskError, DimensionError
from prefixvqa.tensor import Graph, Tensor, backward, finite_diff_check


def rand(rng, *shape):
    return Tensor(rng.uniform(-2, 2, size=shape), requires_grad=True)


# -- matmul -----------------------------------------------------------------

def test_matmul_hand_example():
    out = T.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[5, 6], [7, 8]]))
    np.testing.assert_array_equal(out.data, [[19, 22], [43, 50]])


def test_matmul_identity_and_zero():
    a = Tensor(np.random.default_rng(0).normal(size=(3, 3)))
    np.testing.assert_array_equal(T.matmul(a, Tensor(np.eye(3))).data, a.data)
    np.testing.assert_array_equal(T.matmul(a, Tensor(np.zeros((3, 2)))).data, np.zeros((3, 2)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_associativity_on_random_chains():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a, b, c = (Tensor(rng.normal(size=(8, 8))) for _ in range(3))
        left = T.matmul(T.matmul(a, b), c).data
        right = T.matmul(a, T.matmul(b, c)).data
        assert np.max(np.abs(left - right)) <= 1e-9 * np.max(np.abs(left))


# -- masked softmax -----------------------------------------------------------

def test_masked_softmax_examples():
    np.testing.assert_allclose(T.masked_softmax(Tensor([[0.0, 0.0]]), [[True, True]]).data, [[0.5, 0.5]])
    np.testing.assert_allclose(T.masked_softmax(Tensor([[0.0, math.log(3)]]), [[True, True]]).data,
                               [[0.25, 0.75]], atol=1e-15)
    out = T.masked_softmax(Tensor([[5.0, 100.0]]), [[True, False]]).data
    assert out[0, 0] == 1.0 and out[0, 1] == 0.0


def test_masked_softmax_fully_masked_row():
    with pytest.raises(DegenerateMaskError):
        T.masked_softmax(Tensor([[1.0, 2.0], [3.0, 4.0]]), [[True, True], [False, False]])


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 9), st.integers(0, 2**32 - 1))
def test_masked_softmax_rows_sum_to_one(rows, cols, seed):
    rng = np.random.default_rng(seed)
    mask = rng.random((rows, cols)) < 0.5
    mask[np.arange(rows), rng.integers(cols, size=rows)] = True
    y = T.masked_softmax(Tensor(rng.normal(scale=10, size=(rows, cols))), mask).data
    assert np.all(y[~mask] == 0.0)
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12, rtol=0)


# -- layer norm ----------------------------------------------------------------

def test_layer_norm_examples():
    one, zero = Tensor(np.ones(2)), Tensor(np.zeros(2))
    np.testing.assert_allclose(T.layer_norm(Tensor([1.0, 3.0]), one, zero, eps=0.0).data, [-1.0, 1.0])
    np.testing.assert_allclose(T.layer_norm(Tensor([4.0, 4.0]), one, zero).data, [0.0, 0.0])
    bias = Tensor([0.3, -0.7])
    x = Tensor(np.random.default_rng(0).normal(size=(5, 2)))
    np.testing.assert_array_equal(T.layer_norm(x, Tensor(np.zeros(2)), bias).data, np.tile(bias.data, (5, 1)))


# -- cross entropy -------------------------------------------------------------

def test_cross_entropy_examples():
    assert float(T.cross_entropy_masked(Tensor(np.zeros((1, 4))), [2], [True]).data) == pytest.approx(math.log(4), abs=1e-12)
    saturated = np.zeros((1, 5))
    saturated[0, 3] = 1e4
    assert float(T.cross_entropy_masked(Tensor(saturated), [3], [True]).data) == pytest.approx(0.0, abs=1e-12)
    two = Tensor([[0.0, 0.0], [9.0, -9.0]])
    assert float(T.cross_entropy_masked(two, [0, 1], [True, False]).data) == pytest.approx(math.log(2), abs=1e-12)


def test_cross_entropy_errors():
    with pytest.raises(DegenerateMaskError):
        T.cross_entropy_masked(Tensor(np.zeros((2, 3))), [0, 1], [False, False])
    with pytest.raises(IndexError):
        T.cross_entropy_masked(Tensor(np.zeros((1, 3))), [3], [True])


def test_cross_entropy_batch_is_mean_of_sample_means():
    rng = np.random.default_rng(3)
    logits = rng.normal(size=(2, 4, 5))
    targets = rng.integers(5, size=(2, 4))
    mask = np.array([[True, False, False, False], [True, True, True, False]])
    batched = float(T.cross_entropy_masked(Tensor(logits), targets, mask).data)
    singles = [float(T.cross_entropy_masked(Tensor(logits[i]), targets[i], mask[i]).data) for i in range(2)]
    assert batched == pytest.approx(np.mean(singles), abs=1e-12)


# -- backward ------------------------------------------------------------------

def test_backward_linear_form_gives_outer_product_rows():
    rng = np.random.default_rng(0)
    w = rand(rng, 3, 4)
    x = Tensor(rng.normal(size=(4, 1)))
    backward(T.sum_(T.matmul(w, x)))
    np.testing.assert_allclose(w.grad, np.tile(x.data.T, (3, 1)))


def test_backward_unreached_leaf_and_constant_graph():
    rng = np.random.default_rng(0)
    used, unused = rand(rng, 2), rand(rng, 3)
    backward(T.sum_(used), params=[used, unused])
    np.testing.assert_array_equal(unused.grad, np.zeros(3))
    const = T.sum_(Tensor([1.0, 2.0]))
    leaf = rand(rng, 2)
    backward(const, params=[leaf])
    np.testing.assert_array_equal(leaf.grad, np.zeros(2))


def test_backward_rejects_non_scalar():
    with pytest.raises(DimensionError):
        backward(rand(np.random.default_rng(0), 2, 2))


def test_gradient_accumulates_over_two_passes():
    rng = np.random.default_rng(5)
    w = rand(rng, 3, 3)
    x = Tensor(rng.normal(size=(2, 3)))

    def loss():
        return T.sum_(T.gelu(T.linear(x, w)))

    backward(loss())
    once = w.grad.copy()
    backward(loss())
    np.testing.assert_array_equal(w.grad, 2 * once)


def test_graph_is_topological_and_visits_each_node_once():
    rng = np.random.default_rng(2)
    a = rand(rng, 3, 3)
    h = T.gelu(T.matmul(a, a))
    loss = T.sum_(T.add(h, h))
    graph = Graph.trace(loss)
    pos = {id(n): i for i, n in enumerate(graph.nodes)}
    for n in graph.nodes:
        for p in n._parents:
            assert pos[id(p)] < pos[id(n)]
    assert len(pos) == len(graph.nodes)
    calls = {}
    for n in graph.nodes:
        if n._backward is not None:
            fn = n._backward

            def counted(g, fn=fn, key=id(n)):
                calls[key] = calls.get(key, 0) + 1
                return fn(g)

            n._backward = counted
    backward(loss, graph)
    assert calls and set(calls.values()) == {1}
    assert loss._backward is None  # graph freed


def test_no_grad_records_nothing():
    w = rand(np.random.default_rng(0), 2, 2)
    with T.no_grad():
        out = T.matmul(w, w)
    assert not out.requires_grad and out._parents == ()


# -- finite differences ------------------------------------------------------------

def test_fd_exact_for_linear_function():
    c = np.random.default_rng(0).normal(size=6)
    x = Tensor(np.random.default_rng(1).uniform(-2, 2, 6))
    assert finite_diff_check(lambda t: T.sum_(T.mul(t, Tensor(c))), x) <= 1e-9


def test_fd_two_layer_mlp_with_cross_entropy():
    rng = np.random.default_rng(7)
    w1, w2 = rand(rng, 6, 5), rand(rng, 4, 6)
    b1 = rand(rng, 6)
    x = Tensor(rng.uniform(-2, 2, (3, 5)))
    targets = [0, 3, 1]

    def f(_):
        h = T.gelu(T.linear(x, w1, b1))
        return T.cross_entropy_masked(T.linear(h, w2), targets, [True, True, True])

    for p in (w1, b1, w2):
        assert finite_diff_check(f, p, eps=1e-5) < 1e-4


def test_fd_detects_corrupted_gradient():
    rng = np.random.default_rng(0)
    x = rand(rng, 4)

    def buggy_square_sum(t):
        def bw(g):
            grad = 2 * t.data * g
            grad[1] *= 2.0
            return (grad,)

        return Tensor._result(np.array((t.data ** 2).sum()), (t,), bw)

    err = finite_diff_check(buggy_square_sum, x)
    assert err == pytest.approx(0.5, abs=1e-6)


def _primitive_cases():
    rng = np.random.default_rng(11)
    w = Tensor(rng.uniform(-2, 2, (3, 4)))
    b = Tensor(rng.uniform(-2, 2, (4,)))
    probe3 = Tensor(rng.normal(size=(2, 3, 4)))
    mask = rng.random((2, 3, 4)) < 0.6
    mask[..., 0] = True
    ids = np.array([[0, 2, 2], [1, 0, 3]])
    rows = Tensor(rng.uniform(-2, 2, (2, 2, 4)))
    gain, bias = Tensor(rng.uniform(-2, 2, 4)), Tensor(rng.uniform(-2, 2, 4))

    def weighted(t):
        return T.sum_(T.mul(t, Tensor(np.random.default_rng(t.data.size).normal(size=t.shape))))

    return {
        "add": ((2, 3, 4), lambda x: weighted(T.add(x, probe3))),
        "add_broadcast": ((4,), lambda x: weighted(T.add(probe3, x))),
        "mul": ((2, 3, 4), lambda x: weighted(T.mul(x, x))),
        "scale": ((3, 4), lambda x: weighted(T.scale(x, -1.7))),
        "matmul": ((2, 3, 3), lambda x: weighted(T.matmul(x, T.transpose(x)))),
        "linear": ((2, 3, 4), lambda x: weighted(T.linear(x, w, Tensor(b.data[:3])))),
        "linear_weight": ((3, 4), lambda x: weighted(T.linear(probe3, x, Tensor(b.data[:3])))),
        "transpose": ((2, 3, 4), lambda x: weighted(T.transpose(x, (2, 0, 1)))),
        "reshape": ((2, 3, 4), lambda x: weighted(T.reshape(x, (6, 4)))),
        "expand": ((3, 4), lambda x: weighted(T.expand(x, (2,)))),
        "concat": ((2, 3, 4), lambda x: weighted(T.concat([x, T.scale(x, 2.0), probe3], axis=1))),
        "slice": ((2, 3, 4), lambda x: weighted(T.slice_(x, 1, 1, 3))),
        "index": ((2, 3, 4), lambda x: weighted(T.index(x, (slice(None), [0, 2, 2])))),
        "sum": ((3, 4), lambda x: T.sum_(T.mul(x, x))),
        "mean": ((3, 4), lambda x: T.mean(T.mul(x, x))),
        "gelu": ((2, 3, 4), lambda x: weighted(T.gelu(x))),
        "embedding": ((4, 4), lambda x: weighted(T.embedding_lookup(x, ids))),
        "place_rows_base": ((2, 5, 4), lambda x: weighted(T.place_rows(x, rows, [1, 3]))),
        "place_rows_rows": ((2, 2, 4), lambda x: weighted(T.place_rows(Tensor(np.zeros((2, 5, 4))), x, [0, 2]))),
        "masked_softmax": ((2, 3, 4), lambda x: weighted(T.masked_softmax(x, mask))),
        "layer_norm": ((2, 3, 4), lambda x: weighted(T.layer_norm(x, gain, bias))),
        "layer_norm_gain": ((4,), lambda x: weighted(T.layer_norm(probe3, x, bias))),
        "cross_entropy": ((2, 3, 4), lambda x: T.cross_entropy_masked(x, [[0, 1, 3], [2, 2, 0]],
                                                                       [[True, False, True], [True, True, True]])),
    }


@pytest.mark.parametrize("name", sorted(_primitive_cases()))
def test_primitive_gradients_match_finite_differences(name):
    shape, f = _primitive_cases()[name]
    x = Tensor(np.random.default_rng(zlib.crc32(name.encode())).uniform(-2, 2, shape))
    assert finite_diff_check(f, x, eps=1e-5) < 1e-4
