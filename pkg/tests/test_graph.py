import numpy as np
import pytest

from handsplat import graph as G


def fd_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


UNARY = [G.tanh, G.sigmoid, G.exp, G.sin, G.cos, G.square,
         lambda v: G.sqrt(v * v + 1.0), lambda v: G.softmax(v, axis=1)]


@pytest.mark.parametrize("op", UNARY)
def test_unary_ops_match_finite_differences(op):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 4))
    P = rng.normal(size=(3, 4))
    xv = G.param(x)
    G.backward(G.sum_(op(xv) * P))
    num = fd_grad(lambda a: float(G.sum_(op(G.const(a)) * P).value), x)
    np.testing.assert_allclose(xv.grad, num, rtol=1e-6, atol=1e-8)


def test_binary_ops_with_broadcasting():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(4, 3)), rng.uniform(0.5, 2.0, (3,))
    for fn in (lambda x, y: x + y, lambda x, y: x - y, lambda x, y: x * y, lambda x, y: x / y,
               lambda x, y: 2.0 / y + x):
        av, bv = G.param(a), G.param(b)
        G.backward(G.sum_(G.square(fn(av, bv))))
        na = fd_grad(lambda t: float(G.sum_(G.square(fn(G.const(t), G.const(b)))).value), a)
        nb = fd_grad(lambda t: float(G.sum_(G.square(fn(G.const(a), G.const(t)))).value), b)
        np.testing.assert_allclose(av.grad, na, rtol=1e-6, atol=1e-8)
        np.testing.assert_allclose(bv.grad, nb, rtol=1e-6, atol=1e-8)


def test_matmul_concat_index_rows():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(5, 3)), rng.normal(size=(3, 2))
    idx = np.array([4, 0, 4, 2])

    def f(x):
        y = G.matmul(x, b)
        z = G.concat([y, G.take_rows(y, np.array([1, 1, 3, 0, 2]))], axis=1)
        w = G.replace_rows(z, idx[:2], G.take_rows(z, idx[2:]) * 2.0)
        return G.sum_(G.tanh(w[:, 1:]) * 3.0)
    av = G.param(a)
    G.backward(f(av))
    np.testing.assert_allclose(av.grad, fd_grad(lambda t: float(f(G.const(t)).value), a), rtol=1e-6, atol=1e-8)


def test_backward_visits_each_node_once_with_shared_subgraph():
    x = G.param(np.array([2.0]))
    y = x * x
    z = y + y + y          # shared node reached three times
    G.backward(G.sum_(z))
    np.testing.assert_allclose(x.grad, [12.0])
    order = G.topo_order(z)
    assert len(order) == len({id(n) for n in order})


def test_unreached_leaf_has_no_gradient():
    a, b = G.param(np.ones(3)), G.param(np.ones(3))
    G.backward(G.sum_(a * 2.0))
    assert b.grad is None
    np.testing.assert_array_equal(a.grad, 2.0)


def test_scatter_rows_last_writer_wins():
    rows = G.param(np.arange(8.0).reshape(4, 2))
    out = G.scatter_rows(rows, np.array([1, 0, 1, 3]), 5)
    np.testing.assert_array_equal(out.value, [[2, 3], [4, 5], [0, 0], [6, 7], [0, 0]])
    G.backward(G.sum_(out))
    np.testing.assert_array_equal(rows.grad, [[0, 0], [1, 1], [1, 1], [1, 1]])


def test_replace_rows_keeps_other_rows_bitwise():
    base = G.param(np.random.default_rng(3).normal(size=(6, 3)))
    out = G.replace_rows(base, np.array([2]), G.const(np.zeros((1, 3))))
    keep = [0, 1, 3, 4, 5]
    assert out.value[keep].tobytes() == base.value[keep].tobytes()
