import numpy as np
import pytest

from neuralgde import autodiff as ad
from neuralgde.numerics import RngStream


def tape_grad(fn, *arrays):
    leaves = [ad.Var(a) for a in arrays]
    out = fn(*leaves)
    ad.backward(out)
    return [ad.grad_of(v) for v in leaves]


def fd_grad(fn, *arrays, eps=1e-6):
    grads = []
    for i, a in enumerate(arrays):
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            plus = [x.copy() for x in arrays]
            minus = [x.copy() for x in arrays]
            plus[i][idx] += eps
            minus[i][idx] -= eps
            g[idx] = (float(ad.value(fn(*plus))) - float(ad.value(fn(*minus)))) / (2 * eps)
        grads.append(g)
    return grads


rng = RngStream(11)
A = rng.normal(size=(3, 4))
B = rng.normal(size=(4, 2))
C = rng.normal(size=(3, 4))
POS = rng.uniform(0.5, 2.0, size=(3, 4))

CASES = {
    "add_broadcast": (lambda a, b: ad.sum(ad.square(ad.add(a, ad.sum(b, axis=0)))), (A, rng.normal(size=(2, 4)))),
    "sub_mul": (lambda a, c: ad.sum(ad.mul(ad.sub(a, c), a)), (A, C)),
    "div": (lambda a, p: ad.sum(ad.div(a, p)), (A, POS)),
    "matmul": (lambda a, b: ad.sum(ad.tanh(ad.matmul(a, b))), (A, B)),
    "exp_log": (lambda p: ad.sum(ad.log(ad.exp(ad.mul(p, 0.5)))), (POS,)),
    "sigmoid_mean": (lambda a: ad.sum(ad.square(ad.mean(ad.sigmoid(a), axis=1))), (A,)),
    "softmax": (lambda a, c: ad.sum(ad.mul(ad.masked_softmax(a), c)), (A, C)),
    "reshape_swap": (lambda a, b: ad.sum(ad.matmul(ad.swap_last(ad.reshape(a, (4, 3))), ad.reshape(a, (4, 3)))), (A, B)),
    "getitem_fancy": (lambda a: ad.sum(ad.square(ad.getitem(a, ([0, 0, 2], slice(None))))), (A,)),
    "getitem_slice": (lambda a: ad.sum(ad.getitem(a, (slice(1, 3), 2))), (A,)),
    "concat": (lambda a, c: ad.sum(ad.square(ad.concat([a, c], axis=0))), (A, C)),
    "broadcast_to": (lambda b: ad.sum(ad.square(ad.broadcast_to(ad.sum(b, axis=1, keepdims=True), (4, 5)))), (B,)),
    "diamond": (lambda a: ad.sum(ad.mul(ad.tanh(a), ad.add(ad.tanh(a), a))), (A,)),
}


@pytest.mark.parametrize("name", sorted(CASES))
def test_tape_matches_finite_differences(name):
    fn, arrays = CASES[name]
    for g, f in zip(tape_grad(fn, *arrays), fd_grad(fn, *arrays)):
        np.testing.assert_allclose(g, f, rtol=1e-6, atol=1e-8)


def test_plain_arrays_skip_the_tape():
    out = ad.tanh(ad.matmul(A, B))
    assert isinstance(out, np.ndarray)
    np.testing.assert_allclose(out, np.tanh(A @ B))


def test_operator_overloads():
    x = ad.Var(np.array([1.0, 2.0]))
    y = (x * 3.0 - 1.0) / 2.0 + x
    ad.backward(ad.sum(-y))
    np.testing.assert_allclose(x.grad, [-2.5, -2.5])


def test_nonscalar_output_needs_cotangent():
    x = ad.Var(np.ones(3))
    with pytest.raises(ValueError):
        ad.backward(ad.mul(x, 2.0))
    ad.backward(ad.mul(x, 2.0), np.array([1.0, 0.0, -1.0]))
    np.testing.assert_allclose(x.grad, [2.0, 0.0, -2.0])


def test_unbroadcast_reduces_to_shape():
    g = np.ones((2, 3, 4))
    np.testing.assert_array_equal(ad.unbroadcast(g, (3, 1)), np.full((3, 1), 8.0))
    np.testing.assert_array_equal(ad.unbroadcast(g, ()), 24.0)


def test_deep_chain_does_not_recurse():
    x = ad.Var(np.array(0.5))
    y = x
    for _ in range(5000):
        y = ad.mul(y, 1.0)
    ad.backward(y)
    assert float(x.grad) == 1.0
