import numpy as np
import pytest

from kgrec import autodiff as ad
from kgrec.autodiff import Tensor


def fd_grad(f, x: Tensor, h=1e-5):
    g = np.zeros_like(x.data)
    flat = x.data.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = float(f().data)
        flat[i] = orig - h
        lo = float(f().data)
        flat[i] = orig
        gf[i] = (hi - lo) / (2 * h)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)


def test_softmax_symmetry():
    out = ad.softmax(Tensor([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-15)


def test_softmax_direct_value():
    out = ad.softmax(Tensor([np.log(2.0), 0.0]))
    np.testing.assert_allclose(out.data, [2 / 3, 1 / 3], atol=1e-15)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(7, 9)) * 10)
    out = ad.softmax(x, temperature=0.7)
    assert np.all(out.data >= 0)
    np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)


def test_stop_gradient_forward_identity_and_block():
    x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    y = ad.stop_gradient(x)
    assert np.array_equal(y.data, x.data)
    loss = ad.sum_(ad.mul(y, y))
    ad.backward(loss)
    assert x.grad is None


def test_stop_gradient_equals_constant_subtree():
    rng = np.random.default_rng(3)
    a = Tensor(rng.normal(size=(4,)), requires_grad=True)
    b = Tensor(rng.normal(size=(4,)), requires_grad=True)

    # loss = sum(a * sg(b * a)): grads wrt a must match treating sg arg as const
    loss = ad.sum_(ad.mul(a, ad.stop_gradient(ad.mul(b, a))))
    ad.backward(loss)
    const = Tensor((b.data * a.data).copy())
    a2 = Tensor(a.data.copy(), requires_grad=True)
    loss2 = ad.sum_(ad.mul(a2, const))
    ad.backward(loss2)
    np.testing.assert_array_equal(a.grad, a2.grad)
    assert b.grad is None


def test_simple_square_gradient():
    x = Tensor([3.0], requires_grad=True)
    loss = ad.sum_(ad.mul(x, x))
    ad.backward(loss)
    np.testing.assert_allclose(x.grad, [6.0], atol=1e-14)


def test_softmax_nll_closed_form_gradient():
    rng = np.random.default_rng(1)
    logits = Tensor(rng.normal(size=(5, 8)), requires_grad=True)
    targets = rng.integers(0, 8, size=5)
    loss = ad.sum_(ad.nll_from_logits(logits, targets))
    ad.backward(loss)
    p = np.exp(logits.data - logits.data.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    p[np.arange(5), targets] -= 1.0
    np.testing.assert_allclose(logits.grad, p, atol=1e-12)


def test_matmul_gradient_finite_difference():
    rng = np.random.default_rng(2)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)

    def f():
        return ad.sum_(ad.mul(ad.matmul(a, b), ad.matmul(a, b)))

    for p in (a, b):
        p.zero_grad()
    ad.backward(f())
    assert rel_err(a.grad, fd_grad(f, a)) < 1e-4
    assert rel_err(b.grad, fd_grad(f, b)) < 1e-4


@pytest.mark.parametrize("seed", range(100))
def test_primitives_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    n, m = int(rng.integers(2, 5)), int(rng.integers(2, 5))
    x = Tensor(rng.normal(size=(n, m)), requires_grad=True)
    w = Tensor(rng.normal(size=(m, n)), requires_grad=True)
    gain = Tensor(rng.normal(size=(m,)), requires_grad=True)
    bias = Tensor(rng.normal(size=(m,)), requires_grad=True)
    targets = rng.integers(0, n, size=n)
    idx = rng.integers(0, n, size=(3,))
    const_a = rng.normal(size=(n, m))
    const_b = rng.normal(size=(n, m))
    builders = [
        lambda: ad.sum_(ad.mul(ad.softmax(x, temperature=0.5), const_a)),
        lambda: ad.sum_(ad.mul(ad.layer_norm(x, gain, bias), const_b)),
        lambda: ad.sum_(ad.nll_from_logits(ad.matmul(x, w), targets)),
        lambda: ad.sum_(ad.max_const(ad.matmul(x, w), 0.1)),
        lambda: ad.sum_(ad.mul(ad.gather(x, idx), ad.gather(x, idx))),
        lambda: ad.mean(ad.concat([x, ad.mul(x, x)], axis=0)),
        lambda: ad.sum_(ad.log_softmax(ad.add(x, x))),
    ]
    f = builders[seed % len(builders)]
    params = [x, w, gain, bias]
    err = ad.grad_check(f, params, h=1e-5)
    assert err < 1e-4


def test_grad_check_linear_exact():
    rng = np.random.default_rng(7)
    a = rng.normal(size=(6,))
    theta = Tensor(rng.normal(size=(6,)), requires_grad=True)

    def f():
        return ad.sum_(ad.mul(theta, a))

    assert ad.grad_check(f, [theta]) < 1e-10


def test_grad_check_constant_zero():
    theta = Tensor(np.ones(4), requires_grad=True)

    def f():
        return Tensor(2.5)

    assert ad.grad_check(f, [theta]) == 0.0


def test_double_backward_accumulates_twice():
    x = Tensor([1.5, -2.0], requires_grad=True)

    def build():
        return ad.sum_(ad.mul(x, ad.mul(x, x)))

    ad.backward(build())
    once = x.grad.copy()
    x.zero_grad()
    loss = build()
    ad.backward(loss)
    ad.backward(loss)
    np.testing.assert_array_equal(x.grad, 2 * once)


def test_backward_rejects_nonscalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ad.ShapeError):
        ad.backward(ad.mul(x, x))


def test_shape_mismatch_names_op():
    with pytest.raises(ad.ShapeError, match="matmul"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_nonfinite_raises():
    with pytest.raises(ad.NumericError):
        ad.softmax(Tensor([np.nan, 0.0]))


def test_forward_primitive_dispatch():
    out = ad.forward_primitive("softmax", [Tensor([0.0, 0.0])], {"temperature": 1.0})
    np.testing.assert_allclose(out.data, [0.5, 0.5])
    with pytest.raises(ad.ShapeError):
        ad.forward_primitive("no_such_op", [])
