"""Per-op reverse-mode gradients against central finite differences."""

import numpy as np
import pytest

from complexq2 import autograd as ag
from complexq2.autograd import CVar, Var
from complexq2.tensor import ComplexTensor, hermitian_matmul

H = 1e-5


def numeric_grad(f, arrays, i):
    x = arrays[i]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + H
        up = f(*arrays)
        x[idx] = orig - H
        down = f(*arrays)
        x[idx] = orig
        g[idx] = (up - down) / (2 * H)
    return g


def check(op, shapes, seed=0, rtol=1e-6):
    """Compare tape gradients of ``sum(op(...) * probe)`` against differences."""
    rng = np.random.default_rng(seed)
    arrays = [rng.standard_normal(s) for s in shapes]
    out_shape = op(*[Var(a) for a in arrays]).shape
    probe = rng.standard_normal(out_shape)

    def scalar(*arrs):
        with ag.no_grad():
            return float(np.sum(op(*[Var(a) for a in arrs]).value * probe))

    leaves = [Var(a.copy(), requires_grad=True) for a in arrays]
    ag.backward(op(*leaves), probe)
    for i, leaf in enumerate(leaves):
        np.testing.assert_allclose(leaf.grad, numeric_grad(scalar, arrays, i), rtol=rtol, atol=1e-8)


@pytest.mark.parametrize(
    "op, shapes",
    [
        (ag.add, [(3, 4), (4,)]),
        (ag.sub, [(2, 3), (2, 3)]),
        (ag.mul, [(3, 4), (1, 4)]),
        (ag.neg, [(5,)]),
        (lambda x: ag.reshape(x, (6, 2)), [(3, 4)]),
        (lambda x: ag.transpose(x, (1, 0, 2)), [(2, 3, 4)]),
        (ag.concat_last, [(2, 3), (2, 5)]),
        (lambda x: ag.slice_last(x, 1, 4), [(3, 6)]),
        (ag.matmul, [(2, 3, 4), (4, 5)]),
        (lambda x, g: ag.rmsnorm(x, g, 1e-6), [(3, 7), (7,)]),
        (lambda q, k, v: ag.attention(q, k, v, True, 0.4), [(2, 5, 3), (2, 5, 3), (2, 5, 3)]),
        (lambda q, k, v: ag.attention(q, k, v, False, 0.7), [(4, 3), (4, 3), (4, 2)]),
    ],
)
def test_op_gradients(op, shapes):
    check(op, shapes)


def test_relu2_derivative_values():
    x = Var(np.array([3.0, -1.0]), requires_grad=True)
    ag.backward(ag.relu2(x))
    assert x.grad.tolist() == [6.0, 0.0]


def test_relu2_gradient():
    rng = np.random.default_rng(1)
    # keep away from the kink at zero
    base = rng.uniform(0.1, 2, size=(3, 4)) * rng.choice([-1, 1], size=(3, 4))
    x = Var(base.copy(), requires_grad=True)
    ag.backward(ag.relu2(x), np.ones((3, 4)))
    np.testing.assert_allclose(x.grad, 2 * np.maximum(base, 0))


def test_embedding_gradient_accumulates_repeats():
    table = Var(np.zeros((4, 2)), requires_grad=True)
    ag.backward(ag.embedding(table, np.array([[1, 1, 3]])), np.ones((1, 3, 2)))
    assert table.grad.tolist() == [[0, 0], [2, 2], [0, 0], [1, 1]]


class TestCrossEntropy:
    def test_uniform(self):
        assert float(ag.cross_entropy(np.zeros((3, 16)), [0, 5, 9]).value) == pytest.approx(np.log(16))

    def test_large_margin(self):
        logits = np.zeros((1, 8))
        logits[0, 2] = 100.0
        assert float(ag.cross_entropy(logits, [2]).value) == pytest.approx(0.0, abs=1e-40)

    def test_scalar_oracle(self):
        rng = np.random.default_rng(2)
        z = rng.standard_normal((3, 5))
        t = [4, 0, 2]
        expected = np.mean([np.log(sum(np.exp(row))) - row[ti] for row, ti in zip(z, t)])
        assert float(ag.cross_entropy(z, t).value) == pytest.approx(expected, rel=1e-10)

    def test_gradient(self):
        t = np.array([1, 3, 0])
        check(lambda z: ag.cross_entropy(z, t), [(3, 4)])


def test_hermitian_matmul_gradient_formula():
    rng = np.random.default_rng(3)
    x = CVar.leaf(ComplexTensor(rng.standard_normal((2, 3)), rng.standard_normal((2, 3))))
    w = ComplexTensor(rng.standard_normal((3, 4)), rng.standard_normal((3, 4)))
    g_re, g_im = rng.standard_normal((2, 2, 4))
    y = ag.c_hermitian_matmul(x, CVar.const(w))
    loss = ag.add(ag.mul(y.re, g_re), ag.mul(y.im, g_im))
    ag.backward(loss, np.ones((2, 4)))
    np.testing.assert_allclose(x.re.grad, g_re @ w.re.T + g_im @ w.im.T, rtol=1e-12)

    def f(xr, xi):
        y = hermitian_matmul(ComplexTensor(xr, xi), w)
        return float(np.sum(y.re * g_re + y.im * g_im))

    arrays = [x.re.value.copy(), x.im.value.copy()]
    np.testing.assert_allclose(x.re.grad, numeric_grad(f, arrays, 0), rtol=1e-6)
    np.testing.assert_allclose(x.im.grad, numeric_grad(f, arrays, 1), rtol=1e-6)


def test_complex_ops_gradients():
    def cm(ar, ai, br, bi):
        out = ag.c_mul(CVar(ar, ai), CVar(br, bi))
        return ag.concat_last(out.re, out.im)

    check(cm, [(2, 3)] * 4)

    cos, sin = np.cos([0.3, 1.1, 2.0]), np.sin([0.3, 1.1, 2.0])

    def rot(xr, xi):
        out = ag.c_rotate(CVar(xr, xi), cos, sin)
        return ag.concat_last(out.re, out.im)

    check(rot, [(4, 3)] * 2)


def test_ste_passes_gradient_through():
    x = Var(np.array([0.3, -1.2]), requires_grad=True)
    y = ag.ste(x, np.array([1.0, -1.0]))
    assert y.value.tolist() == [1.0, -1.0]
    ag.backward(ag.mul(y, np.array([2.0, 5.0])))
    assert x.grad.tolist() == [2.0, 5.0]


def test_qat_linear_ste_swap():
    """The STE gradient equals the gradient of the plain matmul at the quantized point."""
    from complexq2.quantize import quantize_dequantize_activation, quantize_dequantize_weights

    rng = np.random.default_rng(4)
    xt = ComplexTensor(rng.standard_normal((3, 8)), rng.standard_normal((3, 8)))
    wt = ComplexTensor(rng.standard_normal((8, 5)), rng.standard_normal((8, 5)))
    probe_re, probe_im = rng.standard_normal((2, 3, 5))

    def run(fn, x, w):
        xv, wv = CVar.leaf(x), CVar.leaf(w)
        y = fn(xv, wv)
        ag.backward(ag.add(ag.mul(y.re, probe_re), ag.mul(y.im, probe_im)), np.ones((3, 5)))
        return y, xv, wv

    y1, x1, w1 = run(ag.qat_linear, xt, wt)
    xq, wq = quantize_dequantize_activation(xt), quantize_dequantize_weights(wt)
    y2, x2, w2 = run(ag.c_hermitian_matmul, xq, wq)
    np.testing.assert_array_equal(y1.re.value, y2.re.value)
    for a, b in ((x1, x2), (w1, w2)):
        np.testing.assert_array_equal(a.re.grad, b.re.grad)
        np.testing.assert_array_equal(a.im.grad, b.im.grad)


def test_no_grad_builds_no_graph():
    x = Var(np.ones(3), requires_grad=True)
    with ag.no_grad():
        y = ag.mul(x, x)
    assert not y.requires_grad and y.parents == ()


def test_shared_subexpression_accumulates():
    x = Var(np.array([2.0]), requires_grad=True)
    y = ag.mul(x, x)
    ag.backward(ag.add(y, y))
    assert x.grad.tolist() == [8.0]
