import numpy as np
import pytest
from scipy.integrate import solve_ivp

from liesvf import autodiff_nn as ad
from liesvf import bounded_flow as bf
from liesvf.errors import NoConvergence, OutsideChart, ShapeMismatch, SingularJacobian

from conftest import KIND_TAGS, make_kind


def interior(kind, rng, n, frac=0.95):
    """Random chart coordinates with rotation norm below ``frac * pi``."""
    z = rng.standard_normal((n, kind.dim))
    rot = list(kind.rot_idx)
    z[:, rot] *= (frac * np.pi * rng.uniform(0, 1, (n, 1)) ** (1 / len(rot))
                  / np.linalg.norm(z[:, rot], axis=-1, keepdims=True))
    if kind.pos_idx:
        z[:, list(kind.pos_idx)] = rng.uniform(-frac, frac, (n, len(kind.pos_idx))) * kind.box
    return z


def constant_psi(kind, c, hidden=(4,), steps=4):
    m = bf.FlowModel.zero(kind, hidden, steps)
    p = m.params.copy()
    p[-kind.dim:] = c
    return m.with_params(p)


def test_alpha_examples():
    so2, so3 = make_kind("SO2"), make_kind("SO3")
    assert bf.alpha(so2, [[0.0]])[0] == 1.0
    assert bf.alpha(so2, [[np.pi], [-np.pi]]).tolist() == [0.0, 0.0]
    assert np.isclose(bf.alpha(so3, [[0.0, np.pi / 2, 0.0]])[0], 0.5)
    # axis-aligned SO3 input agrees with the SO2 formula
    for t in [0.3, -1.2, 2.9]:
        assert np.isclose(bf.alpha(so3, [[0, 0, t]])[0], bf.alpha(so2, [[t]])[0])
    se3 = make_kind("SE3", 2.0)
    assert bf.alpha(se3, [[0, 2.0, 0, 0, 0, 0]])[0] == 0.0


@pytest.mark.parametrize("tag", KIND_TAGS)
def test_alpha_range_and_outside(tag, rng):
    k = make_kind(tag)
    a = bf.alpha(k, interior(k, rng, 500, 1.0))
    assert np.all((a >= 0) & (a <= 1))
    bad = np.zeros((1, k.dim))
    bad[0, k.rot_idx[0]] = np.pi + 1e-6
    with pytest.raises(OutsideChart):
        bf.alpha(k, bad)


@pytest.mark.parametrize("tag", ["S2", "SE2", "SE3"])
def test_alpha_gradient_fast_path_matches_tape(tag, rng):
    k = make_kind(tag)
    z = interior(k, rng, 50)
    a1, g1 = bf.alpha_and_grad(k, z)
    a2, g2 = bf._alpha_and_grad_np(k, z)
    assert np.allclose(a1, a2, atol=0) and np.allclose(g1, g2, atol=1e-15)


def test_so2_constant_psi_hand_unrolled():
    c = 0.7
    m = constant_psi(make_kind("SO2"), [c], steps=4)
    z = 0.4
    for _ in range(4):
        z = z + 0.25 * (np.pi - abs(z)) / np.pi * c
    assert abs(bf.flow_forward(m, np.array([0.4]))[0] - z) < 1e-15


@pytest.mark.parametrize("tag", KIND_TAGS)
def test_zero_psi_is_exact_identity(tag, rng):
    k = make_kind(tag)
    m = bf.FlowModel.zero(k, (8,), 4)
    x = interior(k, rng, 100)
    y, J = bf.flow_forward_jacobian(m, x)
    assert np.array_equal(y, x)
    assert np.array_equal(J, np.broadcast_to(np.eye(k.dim), J.shape))
    assert np.array_equal(bf.flow_inverse(m, x), x)


@pytest.mark.parametrize("tag", KIND_TAGS)
def test_identity_near_boundary(tag, rng):
    k = make_kind(tag)
    m = bf.FlowModel.init(k, rng, (16, 16), 16, output_scale=1.0)
    x = interior(k, rng, 200)
    rot = list(k.rot_idx)
    x[:, rot] *= (np.pi - 1e-9) / np.linalg.norm(x[:, rot], axis=-1, keepdims=True)
    y = bf.flow_forward(m, x)
    assert np.abs(y - x).max() < 1e-5


@pytest.mark.parametrize("tag", KIND_TAGS)
def test_newton_inverse_roundtrip(tag, rng):
    k = make_kind(tag)
    m = bf.FlowModel.init(k, rng, (32, 32), 16, output_scale=1.0)
    x = interior(k, rng, 1000)
    y = bf.flow_forward(m, x)
    assert np.abs(bf.flow_inverse(m, y) - x).max() < 1e-8


@pytest.mark.parametrize("tag", KIND_TAGS)
def test_jacobian_matches_finite_differences(tag, rng):
    k = make_kind(tag)
    m = bf.FlowModel.init(k, rng, (16, 16), 8, output_scale=1.0)
    x = interior(k, rng, 20, 0.9)
    _, J = bf.flow_forward_jacobian(m, x)
    h = 1e-6
    for i in range(k.dim):
        e = np.zeros(k.dim)
        e[i] = h
        col = (bf.flow_forward(m, x + e) - bf.flow_forward(m, x - e)) / (2 * h)
        assert np.abs(J[:, :, i] - col).max() < 1e-6


@pytest.mark.parametrize("tag", KIND_TAGS)
def test_containment_with_large_field(tag, rng):
    k = make_kind(tag)
    m = bf.FlowModel.init(k, rng, (16,), 2, output_scale=50.0)
    y = bf.flow_forward(m, interior(k, rng, 500, 0.99))
    assert np.all(m.chart.contains(y))


def ode_oracle_slope():
    """Observed order of the discrete Jacobian against a tight ODE solve, K in {8, 16, 32, 64}."""
    k = make_kind("SO3")
    rng = np.random.default_rng(3)
    base = bf.FlowModel.init(k, rng, (16, 16), 8, output_scale=1.0)
    x0 = np.array([0.6, -0.4, 0.9])
    d = k.dim

    def rhs(_, s):
        z, J = s[:d], s[d:].reshape(d, d)
        psi, Jpsi = ad.mlp_forward_jac(base.params, z[None], base.sizes)
        a, ga = bf._alpha_and_grad_np(k, z[None])
        Dh = a[0] * Jpsi[0] + np.outer(psi[0], ga[0])
        return np.concatenate([a[0] * psi[0], (Dh @ J).ravel()])

    sol = solve_ivp(rhs, (0, 1), np.concatenate([x0, np.eye(d).ravel()]),
                    method="DOP853", rtol=1e-12, atol=1e-12)
    J_ref = sol.y[d:, -1].reshape(d, d)
    Ks = np.array([8, 16, 32, 64])
    errs = []
    for K in Ks:
        m = bf.FlowModel(k, base.params, base.hidden, int(K))
        errs.append(np.abs(bf.flow_jacobian(m, x0) - J_ref).max())
    return -np.polyfit(np.log(Ks), np.log(errs), 1)[0]


def test_ode_oracle_first_order_convergence():
    assert 0.8 <= ode_oracle_slope() <= 1.2


def test_forward_rejects_outside_and_bad_shape():
    k = make_kind("SO3")
    m = bf.FlowModel.zero(k, (4,), 2)
    with pytest.raises(OutsideChart):
        bf.flow_forward(m, np.array([np.pi, 0, 0]))
    with pytest.raises(ShapeMismatch):
        bf.flow_forward(m, np.zeros(2))


def test_singular_jacobian_detected():
    # SO2, one hidden unit, K = 1: at z = 0 the Jacobian is 1 + W2 * W1
    k = make_kind("SO2")
    m = bf.FlowModel.zero(k, (1,), 1)
    p = m.params.copy()
    p[0], p[2] = 1.0, -1.0  # W1, W2
    with pytest.raises(SingularJacobian):
        bf.flow_forward_jacobian(m.with_params(p), np.array([0.0]))


def test_newton_reports_no_convergence(rng):
    k = make_kind("SO2")
    m = bf.FlowModel.init(k, rng, (8,), 4, output_scale=1.0)
    with pytest.raises(NoConvergence):
        bf.flow_inverse(m, np.array([0.5]), max_iter=0)


def test_model_validation():
    k = make_kind("SO2")
    with pytest.raises(ValueError):
        bf.FlowModel.zero(k, (4,), 0)
    with pytest.raises(ShapeMismatch):
        bf.FlowModel(k, np.zeros(3), (4,), 2)


def test_flow_is_differentiable_in_parameters(rng):
    k = make_kind("S2")
    m = bf.FlowModel.init(k, rng, (8,), 4, output_scale=1.0)
    x = interior(k, rng, 6, 0.8)

    def loss(p):
        y, J = bf.flow_map(k, p, m.sizes, m.steps, x)
        return ad.sum_(y * y) + ad.sum_(J * J)

    P = ad.Var(m.params)
    g = ad.grad(loss(P), [P])[0]
    h = 1e-6
    idx = rng.choice(len(m.params), 20, replace=False)
    for i in idx:
        e = np.zeros_like(m.params)
        e[i] = h
        num = (float(loss(m.params + e)) - float(loss(m.params - e))) / (2 * h)
        assert abs(g[i] - num) < 1e-4 * max(1.0, abs(num))
