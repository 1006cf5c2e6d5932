import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mirrormeta import autodiff as ad
from oracles import central_diff, rel_err


def _weighted(out, rng):
    """Reduce an op output to a scalar with fixed random weights."""
    w = out.graph.constant(rng.normal(size=out.shape))
    return ad.sum_(ad.mul(out, w)) if out.shape != () else out


def _away_from_zero(rng, shape):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < 0.05, 0.5, x)


# name -> (input shapes, builder(graph vars) -> Var)
OP_CASES = {
    "add": ([(3, 4), (3, 4)], lambda a, b: ad.add(a, b)),
    "add_scalar": ([(), (5,)], lambda a, b: ad.add(a, b)),
    "subtract": ([(6,), (6,)], lambda a, b: ad.sub(a, b)),
    "multiply": ([(2, 5), (2, 5)], lambda a, b: ad.mul(a, b)),
    "multiply_scalar": ([(4, 3), ()], lambda a, b: ad.mul(a, b)),
    "divide": ([(7,), (7,)], lambda a, b: ad.div(a, ad.add(ad.square(b), 1.0))),
    "matmul": ([(3, 4), (4, 2)], lambda a, b: ad.matmul(a, b)),
    "mode_product": ([(4, 6), (2, 4), (3, 6)], lambda x, u, v: ad.mode_product(x, [u, v], [0, 1])),
    "mode_product_3d": ([(2, 3, 4), (3, 3), (2, 4)], lambda x, u, v: ad.mode_product(x, [u, v], [1, 2])),
    "mode_product_bias": ([(4, 6), (2, 4), (3, 6), (2, 3)],
                          lambda x, u, v, b: ad.mode_product(x, [u, v], [0, 1], [False, False], bias=b)),
    "mode_product_trans": ([(4, 6), (4, 2)], lambda x, u: ad.mode_product(x, [u], [0], [True])),
    "mode_product_relu": ([(4, 6), (2, 4), (3, 6), (2, 3)],
                          lambda x, u, v, b: ad.mode_product(x, [u, v], [0, 1], bias=b, relu=True)),
    "coupling": ([(2, 3), (12,)], lambda z, c: ad.coupling(z, c)),
    "concat": ([(3,), (5,), (2,)], lambda a, b, c: ad.concat([a, b, c])),
    "gather": ([(8,)], lambda a: ad.gather(a, np.array([[0, 3], [7, 3]]))),
    "reshape": ([(12,)], lambda a: ad.reshape(a, (3, 4))),
    "sum": ([(4, 5)], lambda a: ad.sum_(a)),
    "sum_axis": ([(4, 5)], lambda a: ad.sum_(a, axis=1)),
    "mean": ([(4, 5)], lambda a: ad.mean(a)),
    "relu": ([(16,)], lambda a: ad.relu(a)),
    "logistic": ([(16,)], lambda a: ad.logistic(a)),
    "tanh": ([(16,)], lambda a: ad.tanh(a)),
    "sin": ([(16,)], lambda a: ad.sin(a)),
    "square": ([(16,)], lambda a: ad.square(a)),
    "softmax_xent": ([(6, 4)], lambda a: ad.softmax_xent(a, np.array([0, 3, 1, 1, 2, 0]))),
    "squared_error": ([(5, 2), (5, 2)], lambda a, b: ad.squared_error(a, b)),
    "transpose": ([(3, 5)], lambda a: ad.transpose(a)),
    "broadcast": ([(4,)], lambda a: ad.broadcast(a, (3, 4), axis=0)),
}


def _scalar_fn(name, seed):
    shapes, build = OP_CASES[name]

    def f(*arrays, create=None):
        g = ad.Graph() if create is None else create
        xs = [g.constant(a) for a in arrays]
        out = build(*xs)
        return _weighted(out, np.random.default_rng(seed)), xs

    return shapes, f


@pytest.mark.parametrize("name", sorted(OP_CASES))
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_op_gradient_matches_finite_differences(name, seed):
    shapes, f = _scalar_fn(name, seed)
    rng = np.random.default_rng(100 + seed)
    inputs = [_away_from_zero(rng, s) for s in shapes]
    g = ad.Graph()
    out, xs = f(*inputs, create=g)
    grads = g.grad(out, xs)
    for k, (x, gk) in enumerate(zip(inputs, grads)):
        def fk(v, k=k):
            args = list(inputs)
            args[k] = v
            return f(*args)[0].item()
        expected = central_diff(fk, x, h=1e-5)
        assert rel_err(gk.value, expected) <= 1e-6, (name, k)


@pytest.mark.parametrize("name", sorted(set(OP_CASES) - {"relu", "gather", "concat", "reshape", "sum",
                                                        "sum_axis", "mean", "transpose", "broadcast"}))
def test_second_order_matches_finite_differences_of_gradient(name):
    # d/dx <grad f(x), v> against finite differences of the first gradient
    shapes, f = _scalar_fn(name, 7)
    rng = np.random.default_rng(11)
    inputs = [_away_from_zero(rng, s) for s in shapes]
    v = rng.normal(size=shapes[0])

    def directional(x0, create):
        g = ad.Graph()
        out, xs = f(x0, *inputs[1:], create=g)
        (gx,) = g.grad(out, [xs[0]], create_graph=create)
        return g, xs, ad.sum_(ad.mul(gx, g.constant(v))) if gx.shape != () else ad.mul(gx, g.constant(v))

    g, xs, dd = directional(inputs[0], True)
    (hv,) = g.grad(dd, [xs[0]])
    expected = central_diff(lambda x0: directional(x0, False)[2].item(), inputs[0], h=1e-5)
    assert rel_err(hv.value, expected) <= 1e-6


def test_examples():
    g = ad.Graph()
    x = g.constant([0.0])
    assert ad.logistic(x).value.tolist() == [0.5]
    X = g.constant(np.ones((4, 6)))
    U = g.constant(np.ones((2, 4)))
    V = g.constant(np.ones((3, 6)))
    assert ad.mode_product(X, [U, V], [0, 1]).shape == (2, 3)
    logits = g.constant(np.zeros((1, 3)))
    assert ad.softmax_xent(logits, [1]).item() == pytest.approx(math.log(3), abs=1e-12)


def test_first_and_second_derivative_of_square():
    g = ad.Graph()
    x = g.constant(3.0)
    (dx,) = g.grad(ad.square(x), [x], create_graph=True)
    assert dx.item() == 6.0
    (ddx,) = g.grad(dx, [x])
    assert ddx.item() == 2.0


def test_double_grad_of_quadratic_form_is_twice_the_matrix():
    rng = np.random.default_rng(3)
    for d in range(1, 9):
        B = rng.normal(size=(d, d))
        A = B + B.T
        g = ad.Graph()
        x = g.constant(rng.normal(size=(d, 1)))
        f = ad.sum_(ad.mul(x, ad.matmul(g.constant(A), x)))
        (gx,) = g.grad(f, [x], create_graph=True)
        rows = []
        for i in range(d):
            e = np.zeros((d, 1))
            e[i] = 1.0
            (hi,) = g.grad(ad.sum_(ad.mul(gx, g.constant(e))), [x])
            rows.append(hi.value.ravel())
        assert np.max(np.abs(np.array(rows) - 2 * A)) <= 1e-10


def test_two_layer_mlp_gradient_against_finite_differences():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(7, 3))
    y = rng.normal(size=(7, 2))
    W1, b1 = rng.normal(size=(3, 5)), rng.normal(size=5)
    W2, b2 = rng.normal(size=(5, 2)), rng.normal(size=2)

    def loss(g, W1, b1, W2, b2):
        h = ad.tanh(ad.matmul(g.constant(X), W1) + ad.broadcast(b1, (7, 5), axis=0))
        out = ad.matmul(h, W2) + ad.broadcast(b2, (7, 2), axis=0)
        return ad.squared_error(out, g.constant(y))

    params = [W1, b1, W2, b2]
    g = ad.Graph()
    vs = [g.constant(p) for p in params]
    grads = g.grad(loss(g, *vs), vs)
    for k, (p, gk) in enumerate(zip(params, grads)):
        def fk(v, k=k):
            gg = ad.Graph()
            args = [gg.constant(q) for q in params]
            args[k] = gg.constant(v)
            return loss(gg, *args).item()
        assert rel_err(gk.value, central_diff(fk, p)) <= 1e-6


@settings(max_examples=50, deadline=None)
@given(
    x=arrays(np.float64, 6, elements=st.floats(-3, 3)),
    a=st.floats(-5, 5),
    b=st.floats(-5, 5),
)
def test_grad_is_linear(x, a, b):
    def grads_of(build):
        g = ad.Graph()
        v = g.constant(x)
        (gv,) = g.grad(build(v), [v])
        return gv.value

    f = lambda v: ad.sum_(ad.sin(v))
    h = lambda v: ad.sum_(ad.mul(ad.tanh(v), v))
    combo = grads_of(lambda v: ad.add(f(v) * a, h(v) * b))
    separate = a * grads_of(f) + b * grads_of(h)
    assert np.max(np.abs(combo - separate)) <= 1e-12 * max(1.0, np.max(np.abs(separate)))


def test_unconnected_wrt_gets_zero_gradient():
    g = ad.Graph()
    x = g.constant([1.0, 2.0])
    y = g.constant([3.0])
    out = ad.sum_(ad.square(x))
    gx, gy = g.grad(out, [x, y])
    assert gy.value.tolist() == [0.0]
    assert gx.value.tolist() == [2.0, 4.0]


def test_non_scalar_output_rejected():
    g = ad.Graph()
    x = g.constant([1.0, 2.0])
    with pytest.raises(ad.NonScalarError):
        g.grad(ad.square(x), [x])


@pytest.mark.parametrize("build", [
    lambda g: ad.add(g.constant(np.ones(3)), g.constant(np.ones(4))),
    lambda g: ad.matmul(g.constant(np.ones((2, 3))), g.constant(np.ones((2, 3)))),
    lambda g: ad.mode_product(g.constant(np.ones((4, 6))), [g.constant(np.ones((2, 5)))], [0]),
    lambda g: ad.reshape(g.constant(np.ones(5)), (2, 3)),
    lambda g: ad.squared_error(g.constant(np.ones(3)), g.constant(np.ones((3, 1)))),
    lambda g: ad.concat([g.constant(np.ones((2, 2)))]),
])
def test_shape_mismatch_raises_typed_error(build):
    with pytest.raises(ad.ShapeError) as info:
        build(ad.Graph())
    assert info.value.op in str(info.value)
    assert len(info.value.shapes) >= 1


def test_broadcasting_beyond_scalar_is_rejected():
    g = ad.Graph()
    with pytest.raises(ad.ShapeError):
        ad.add(g.constant(np.ones((3, 1))), g.constant(np.ones((3, 4))))


def test_checked_mode_detects_non_finite():
    g = ad.Graph(check_finite=True)
    x = g.constant([0.0])
    with pytest.raises(ad.NonFiniteError):
        ad.div(g.constant([1.0]), x)


def test_nodes_only_reference_earlier_nodes():
    g = ad.Graph()
    x = g.constant(np.arange(4.0))
    y = ad.sum_(ad.mul(ad.sin(x), x))
    g.grad(y, [x], create_graph=True)
    for i, node in enumerate(g.nodes):
        assert all(j < i for j in node.inputs)


def test_create_graph_false_leaves_graph_size_bounded():
    g = ad.Graph()
    x = g.constant(np.arange(4.0))
    y = ad.sum_(ad.square(x))
    before = len(g)
    g.grad(y, [x])
    assert len(g) == before + 1
