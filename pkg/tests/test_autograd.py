import numpy as np
import pytest

from bld.autograd import Tensor, log_softmax, logsumexp


def numeric_grad(fn, x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar-valued fn at x."""
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn(x)
        flat[i] = orig - step
        lo = fn(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return g


def check_grad(build, shape, seed=0, step=1e-6, tol=1e-7):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=shape)

    def scalar(arr):
        return float(build(Tensor(arr)).data)

    t = Tensor(x.copy(), requires_grad=True)
    out = build(t)
    out.backward()
    num = numeric_grad(scalar, x.copy(), step)
    assert np.allclose(t.grad, num, atol=tol, rtol=1e-5), (t.grad, num)


@pytest.mark.parametrize(
    "build,shape",
    [
        (lambda t: (t * 3.0 + 1.0).sum(), (4, 3)),
        (lambda t: (t * t).sum(), (5,)),
        (lambda t: (t / (t * t + 2.0)).sum(), (3, 2)),
        (lambda t: (-t).tanh().sum(), (4,)),
        (lambda t: (t.exp() + 1.0).log().sum(), (2, 3)),
        (lambda t: t.mean(axis=1).sum(), (3, 4)),
        (lambda t: t.reshape(6).sum(axis=0), (2, 3)),
        (lambda t: t.transpose(1, 0, 2).sum(), (2, 3, 2)),
        (lambda t: t[1:, :2].sum(), (4, 3)),
        (lambda t: logsumexp(t, axis=-1).sum(), (3, 5)),
        (lambda t: (log_softmax(t, axis=-1) * log_softmax(t, axis=-1)).sum(), (2, 4)),
    ],
)
def test_elementwise_grads(build, shape):
    check_grad(build, shape)


def test_matmul_grads():
    rng = np.random.default_rng(1)
    b = rng.normal(size=(3, 4))

    check_grad(lambda t: (t @ b).sum(), (5, 3))
    check_grad(lambda t: (Tensor(b) @ t).sum(), (4, 2))
    # batched: (N, d) @ (slots, d, w)
    w = rng.normal(size=(2, 3, 4))
    a = rng.normal(size=(5, 3))
    check_grad(lambda t: (t @ Tensor(w)).sum(), (5, 3))
    check_grad(lambda t: (Tensor(a) @ t).sum(), (2, 3, 4))


def test_take_rows_accumulates_repeats():
    t = Tensor(np.ones((3, 2)), requires_grad=True)
    out = t.take_rows([0, 0, 2]).sum()
    out.backward()
    assert np.array_equal(t.grad, [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]])


def test_broadcast_add_grad():
    check_grad(lambda t: (t + np.ones((4, 3))).sum(), (3,))
    check_grad(lambda t: (np.ones((4, 1)) * t).sum(), (4, 3))


def test_grad_accumulates_across_uses():
    t = Tensor(np.array([2.0]), requires_grad=True)
    out = (t * 3.0 + t * t).sum()
    out.backward()
    assert np.allclose(t.grad, [3.0 + 4.0])


def test_backward_requires_scalar():
    t = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (t * 2.0).backward()


def test_logsumexp_stability():
    x = Tensor(np.array([[1000.0, 1000.0], [-np.inf, 0.0]]))
    out = logsumexp(x, axis=-1)
    assert np.allclose(out.data, [1000.0 + np.log(2.0), 0.0])


def test_log_softmax_normalizes():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 7)) * 10)
    p = np.exp(log_softmax(x, axis=-1).data)
    assert np.allclose(p.sum(axis=-1), 1.0, atol=1e-12)
