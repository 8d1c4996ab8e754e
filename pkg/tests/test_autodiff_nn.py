import numpy as np
import pytest

from liesvf import autodiff_nn as ad
from liesvf.errors import GraphNotScalar, ShapeMismatch


def fd_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def check(fn, *shapes, seed=0, rtol=1e-4, low=-1.0, high=1.0):
    """Compare the taped gradient of ``sum(w * fn(x...))`` against central differences."""
    rng = np.random.default_rng(seed)
    xs = [rng.uniform(low, high, s) for s in shapes]
    out_shape = np.shape(ad.value(fn(*xs)))
    w = rng.standard_normal(out_shape)
    for k in range(len(xs)):
        def scalar(xk, k=k):
            args = list(xs)
            args[k] = xk
            return float(np.sum(w * ad.value(fn(*args))))
        vs = [ad.Var(x) for x in xs]
        y = ad.sum_(fn(*vs) * w)
        g = ad.grad(y, [vs[k]])[0]
        num = fd_grad(scalar, xs[k])
        scale = max(np.abs(num).max(), 1e-8)
        assert np.abs(g - num).max() / scale < rtol


def test_elementwise_primitives():
    check(lambda a, b: a + b, (3, 4), (4,))
    check(lambda a, b: a - b, (3, 4), (3, 1))
    check(lambda a, b: a * b, (3, 4), (3, 4))
    check(lambda a, b: a / b, (3, 4), (3, 4), low=0.5, high=2.0)
    check(lambda a: -a, (5,))
    check(lambda a: a ** 3, (5,))
    check(ad.tanh, (5,))
    check(ad.sin, (5,))
    check(ad.cos, (5,))
    check(ad.exp, (5,))
    check(ad.sqrt, (5,), low=0.5, high=2.0)
    check(ad.abs_, (5,), low=0.1, high=1.0)
    check(lambda a: ad.clip(a, -0.5, 0.5), (50,), seed=3)


def test_where_and_norms():
    cond = np.array([True, False, True])
    check(lambda a, b: ad.where(cond, a, b), (3,), (3,))
    check(ad.norm, (4, 3))
    check(ad.unit, (4, 3))


def test_norm_and_unit_at_origin_have_zero_gradient():
    v = ad.Var(np.zeros((2, 3)))
    assert np.all(ad.grad(ad.sum_(ad.norm(v)), [v])[0] == 0)
    assert np.all(ad.grad(ad.sum_(ad.unit(v)), [v])[0] == 0)


def test_shape_primitives():
    check(lambda a: ad.sum_(a, axis=1), (3, 4))
    check(lambda a: ad.mean(a, axis=0), (3, 4))
    check(lambda a: ad.reshape(a, (4, 3)), (3, 4))
    check(lambda a: ad.swapaxes(a, 0, 1), (3, 4))
    check(lambda a: a[1:, ::2], (3, 4))
    check(lambda a: ad.getitem(a, np.array([0, 2, 2])), (3, 4))
    check(lambda a, b: ad.stack([a, b], axis=1), (3,), (3,))
    check(lambda a, b: ad.concatenate([a, b], axis=0), (2, 3), (4, 3))


def test_matmul_and_solve():
    check(lambda a, b: a @ b, (2, 3, 4), (4, 5))
    check(lambda a, b: ad.solve(a + 3 * np.eye(3), b), (5, 3, 3), (5, 3))


def test_matmul_rejects_vectors():
    with pytest.raises(ShapeMismatch):
        ad.matmul(ad.Var(np.ones(3)), np.ones((3, 3)))


def test_nonscalar_loss_needs_seed():
    v = ad.Var(np.ones(3))
    with pytest.raises(GraphNotScalar):
        ad.grad(v * 2, [v])
    assert np.allclose(ad.grad(v * 2, [v], seed=np.ones(3))[0], 2.0)


def test_shared_subexpression_accumulates():
    v = ad.Var(np.array(1.5))
    a = v * v
    y = a + a * v
    assert np.isclose(ad.grad(y, [v])[0], 2 * 1.5 + 3 * 1.5**2)


def test_unrelated_input_gets_zero_gradient():
    a, b = ad.Var(np.ones(2)), ad.Var(np.ones(2))
    ga, gb = ad.grad(ad.sum_(a * 3), [a, b])
    assert np.allclose(ga, 3) and np.allclose(gb, 0)


def test_untaped_ops_return_plain_arrays():
    out = ad.tanh(np.ones(3)) @ np.ones((3, 2))
    assert isinstance(out, np.ndarray)


def test_deep_chain_does_not_recurse():
    v = ad.Var(np.array(1.0))
    y = v
    for _ in range(5000):
        y = y * 1.0001
    assert np.isclose(ad.grad(y, [v])[0], 1.0001**5000)


def test_jacobian_of_linear_map():
    A = np.random.default_rng(0).standard_normal((3, 4))
    J = ad.jacobian(lambda x: ad.reshape(A @ ad.reshape(x, (4, 1)), (3,)), np.ones(4))
    assert np.allclose(J, A)


def test_mlp_input_jacobian_matches_autodiff():
    sizes = (3, 8, 8, 3)
    rng = np.random.default_rng(1)
    theta = ad.init_params(sizes, rng, output_scale=1.0)
    x = rng.standard_normal(3)
    _, J = ad.mlp_forward_jac(theta, x[None], sizes)
    Jad = ad.jacobian(lambda z: ad.reshape(ad.mlp_forward(theta, ad.reshape(z, (1, 3)), sizes), (3,)), x)
    assert np.abs(J[0] - Jad).max() < 1e-12


def test_mlp_parameter_gradient():
    sizes = (2, 8, 2)
    rng = np.random.default_rng(2)
    theta = ad.init_params(sizes, rng, output_scale=1.0)
    x = rng.standard_normal((5, 2))

    def f(t):
        out, J = ad.mlp_forward_jac(t, x, sizes)
        return ad.sum_(out * out) + ad.sum_(J * J)

    P = ad.Var(theta)
    g = ad.grad(f(P), [P])[0]
    num = fd_grad(lambda t: float(f(t)), theta)
    assert np.abs(g - num).max() / np.abs(num).max() < 1e-6


def test_unpack_layout():
    sizes = (2, 3, 1)
    theta = np.arange(ad.n_params(sizes), dtype=float)
    (W1, b1), (W2, b2) = ad.unpack(theta, sizes)
    assert W1.shape == (2, 3) and b1.shape == (3,) and W2.shape == (3, 1) and b2.shape == (1,)
    assert ad.n_params(sizes) == 13


def test_lipschitz_bound_dominates_finite_ratio():
    sizes = (2, 16, 2)
    rng = np.random.default_rng(4)
    theta = ad.init_params(sizes, rng, output_scale=1.0)
    L = ad.lipschitz_bound(theta, sizes)
    a, b = rng.standard_normal((100, 2)), rng.standard_normal((100, 2))
    fa, fb = ad.mlp_forward(theta, a, sizes), ad.mlp_forward(theta, b, sizes)
    ratio = np.linalg.norm(fa - fb, axis=1) / np.linalg.norm(a - b, axis=1)
    assert ratio.max() <= L + 1e-12
