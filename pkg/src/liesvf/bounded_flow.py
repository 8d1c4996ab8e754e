"""Bounded flow diffeomorphism between first covers of the tangent space.

The map is the time-1 flow of ``h(z) = alpha(z) * psi(z)`` integrated with
``steps`` forward-Euler steps, where ``psi`` is a tanh MLP and ``alpha``
vanishes on the chart boundary (rotation norm ``pi`` and, for SE kinds, the
translational workspace box).  Everything here is the *discrete* map: the
Jacobian is the exact chain rule through the Euler steps and the inverse is
Newton's method on that same map, so forward, Jacobian and inverse agree to
solver precision.

The functions accept either plain arrays or autodiff ``Var`` parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff_nn as ad
from .errors import NoConvergence, OutsideChart, ShapeMismatch, SingularJacobian
from .lie_core import Manifold

CHART_SLACK = 1e-9
GUARD_HALVINGS = 20
DET_TOL = 1e-12
NEWTON_TOL = 1e-9
NEWTON_ITERS = 50


@dataclass(frozen=True)
class Chart:
    """First cover: ``|x_rot| < pi`` and ``|x_pos,i| < box_i``."""

    kind: Manifold

    @property
    def radius(self):
        return np.pi

    @property
    def box(self):
        return self.kind.box

    def rot(self, z):
        return z[..., list(self.kind.rot_idx)]

    def pos(self, z):
        return z[..., list(self.kind.pos_idx)]

    def contains(self, z, closed=False, slack=0.0):
        z = np.asarray(z, dtype=float)
        r = np.linalg.norm(self.rot(z), axis=-1)
        ok = r <= np.pi + slack if closed else r < np.pi
        if self.kind.pos_idx:
            p = np.abs(self.pos(z))
            ok &= np.all(p <= self.box + slack if closed else p < self.box, axis=-1)
        return ok


@dataclass(frozen=True, eq=False)
class FlowModel:
    kind: Manifold
    params: np.ndarray
    hidden: tuple = (64, 64)
    steps: int = 16
    horizon: float = field(default=1.0, init=False)

    def __post_init__(self):
        object.__setattr__(self, "params", np.asarray(self.params, dtype=float))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.params.shape != (ad.n_params(self.sizes),):
            raise ShapeMismatch(f"expected {ad.n_params(self.sizes)} parameters, got {self.params.shape}")

    @property
    def sizes(self):
        return (self.kind.dim, *self.hidden, self.kind.dim)

    @property
    def chart(self):
        return Chart(self.kind)

    @classmethod
    def init(cls, kind, rng, hidden=(64, 64), steps=16, output_scale=0.1):
        sizes = (kind.dim, *hidden, kind.dim)
        return cls(kind, ad.init_params(sizes, rng, output_scale), tuple(hidden), steps)

    @classmethod
    def zero(cls, kind, hidden=(64, 64), steps=16):
        """Flow with psi identically zero, i.e. the identity map."""
        sizes = (kind.dim, *hidden, kind.dim)
        return cls(kind, np.zeros(ad.n_params(sizes)), tuple(hidden), steps)

    def with_params(self, params):
        return replace(self, params=np.asarray(params, dtype=float))


# ---------------------------------------------------------------------------
# scaling function


def alpha_and_grad(kind, z):
    """``alpha(z)`` of shape (B,) and its gradient (B, d); tape-compatible.

    Rotational part ``(pi - |z_rot|)/pi``; translational part
    ``prod_i clamp(1 - |p_i|/box_i, 0, 1)``; the product of both for SE
    kinds.  At ``z_rot = 0`` the gradient uses the subgradient 0.
    """
    rot = z[:, kind.rot_idx[0]:kind.rot_idx[-1] + 1] if len(kind.rot_idx) < kind.dim else z
    r = ad.norm(rot)
    a_rot = (np.pi - r) / np.pi
    g_rot = -ad.unit(rot) / np.pi
    if not kind.pos_idx:
        return a_rot, g_rot

    box = kind.box
    n = len(kind.pos_idx)
    factors, dfactors = [], []
    for i in range(n):
        p = z[:, kind.pos_idx[i]]
        pv = ad.value(p)
        lin = 1.0 - np.abs(pv) / box[i]
        active = (lin > 0) & (lin < 1)
        factors.append(ad.clip(1.0 - ad.abs_(p) / box[i], 0.0, 1.0))
        # d/dp clamp(1 - |p|/b); piecewise constant, no second derivative
        dfactors.append(-np.sign(pv) / box[i] * active)
    a_pos = factors[0]
    for f in factors[1:]:
        a_pos = a_pos * f
    g_pos = []
    for i in range(n):
        others = 1.0
        for j in range(n):
            if j != i:
                others = others * factors[j]
        g_pos.append(dfactors[i] * others)
    g_pos = ad.stack(g_pos, axis=-1)
    a = a_pos * a_rot
    g = ad.concatenate([g_pos * ad.reshape(a_rot, (-1, 1)), ad.reshape(a_pos, (-1, 1)) * g_rot], axis=-1)
    return a, g


def _alpha_and_grad_np(kind, z):
    """Plain-array version of :func:`alpha_and_grad` (same values, no tape)."""
    rot = z[:, list(kind.rot_idx)]
    r = np.linalg.norm(rot, axis=-1)
    a_rot = (np.pi - r) / np.pi
    safe = np.where(r > 0, r, 1.0)
    g_rot = -np.where(r[:, None] > 0, rot / safe[:, None], 0.0) / np.pi
    if not kind.pos_idx:
        return a_rot, g_rot
    p = z[:, list(kind.pos_idx)]
    lin = 1.0 - np.abs(p) / kind.box
    f = np.clip(lin, 0.0, 1.0)
    df = -np.sign(p) / kind.box * ((lin > 0) & (lin < 1))
    n = p.shape[1]
    a_pos = np.prod(f, axis=1)
    g_pos = np.stack([df[:, i] * np.prod(np.delete(f, i, axis=1), axis=1) for i in range(n)], -1)
    g = np.empty_like(z)
    g[:, list(kind.pos_idx)] = g_pos * a_rot[:, None]
    g[:, list(kind.rot_idx)] = a_pos[:, None] * g_rot
    return a_pos * a_rot, g


def alpha(kind, xhat):
    """Scaling function on chart coordinates; raises :class:`OutsideChart`."""
    xhat = np.atleast_2d(np.asarray(xhat, dtype=float))
    chart = Chart(kind)
    if not np.all(chart.contains(xhat, closed=True, slack=CHART_SLACK)):
        raise OutsideChart("point outside the closed chart")
    a, _ = alpha_and_grad(kind, xhat)
    return np.clip(a, 0.0, 1.0)


# ---------------------------------------------------------------------------
# discrete flow


def _inside_after(kind, z_new, a_pos_zero):
    r = np.linalg.norm(z_new[:, list(kind.rot_idx)], axis=-1)
    ok = r < np.pi
    if kind.pos_idx:
        p = np.abs(z_new[:, list(kind.pos_idx)])
        ok &= np.all(p < kind.box, axis=-1) | a_pos_zero
    return ok


def _guarded_step(kind, z, h, dt):
    """Per-sample Euler step size, halved until the step stays in the chart."""
    s = np.full(z.shape[0], dt)
    if kind.pos_idx:
        outside = ~np.all(np.abs(z[:, list(kind.pos_idx)]) < kind.box, axis=-1)
    else:
        outside = np.zeros(z.shape[0], dtype=bool)
    ok = _inside_after(kind, z + s[:, None] * h, outside)
    for _ in range(GUARD_HALVINGS):
        if ok.all():
            return s
        s = np.where(ok, s, 0.5 * s)
        ok = _inside_after(kind, z + s[:, None] * h, outside)
    return np.where(ok, s, 0.0)


def flow_map(kind, params, sizes, steps, xhat, jac=True):
    """Run the Euler flow on a batch ``xhat`` (B, d).

    Returns ``(y, J)`` with ``J`` of shape (B, d, d) (``None`` when
    ``jac=False``).  ``params`` and ``xhat`` may be autodiff Vars; the guard's
    step sizes are treated as constants.  No chart check is made here.
    """
    z = xhat
    d = sizes[0]
    B = ad.value(xhat).shape[0]
    J = np.broadcast_to(np.eye(d), (B, d, d)) if jac else None
    dt = 1.0 / steps
    for _ in range(steps):
        if jac:
            psi, Jpsi = ad.mlp_forward_jac(params, z, sizes)
        else:
            psi = ad.mlp_forward(params, z, sizes)
        a, ga = alpha_and_grad(kind, z) if ad.is_var(z) else _alpha_and_grad_np(kind, z)
        h = ad.reshape(a, (-1, 1)) * psi
        s = _guarded_step(kind, ad.value(z), ad.value(h), dt)
        if jac:
            Dh = ad.reshape(a, (-1, 1, 1)) * Jpsi + ad.reshape(psi, (B, d, 1)) * ad.reshape(ga, (B, 1, d))
            J = J + s[:, None, None] * (Dh @ J)
        z = z + s[:, None] * h
    return z, J


def _as_batch(model, xhat, strict=True):
    x = np.asarray(xhat, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[-1] != model.kind.dim:
        raise ShapeMismatch(f"{model.kind.tag} chart coordinates have dimension {model.kind.dim}")
    if strict and not np.all(model.chart.contains(x)):
        raise OutsideChart("flow input must lie strictly inside the chart")
    return x, single


def flow_forward(model, xhat):
    x, single = _as_batch(model, xhat)
    y, _ = flow_map(model.kind, model.params, model.sizes, model.steps, x, jac=False)
    return y[0] if single else y


def _check_det(J):
    det = np.linalg.det(J)
    if np.any(np.abs(det) < DET_TOL):
        raise SingularJacobian(f"flow Jacobian determinant below {DET_TOL}; increase steps")


def flow_forward_jacobian(model, xhat, strict=True):
    x, single = _as_batch(model, xhat, strict)
    y, J = flow_map(model.kind, model.params, model.sizes, model.steps, x)
    _check_det(J)
    return (y[0], J[0]) if single else (y, J)


def flow_jacobian(model, xhat):
    return flow_forward_jacobian(model, xhat)[1]


def flow_inverse(model, yhat, tol=NEWTON_TOL, max_iter=NEWTON_ITERS):
    """Invert the discrete map by damped Newton iterations started at ``yhat``."""
    y, single = _as_batch(model, yhat)
    x = y.copy()
    chart = model.chart
    for _ in range(max_iter):
        f, J = flow_map(model.kind, model.params, model.sizes, model.steps, x)
        res = f - y
        err = np.linalg.norm(res, axis=-1)
        if np.all(err < tol):
            return x[0] if single else x
        step = np.linalg.solve(J, res[..., None])[..., 0]
        step[err < tol] = 0.0
        t = np.ones(len(x))
        cand = x - step
        for _ in range(30):
            bad = ~chart.contains(cand)
            if not bad.any():
                break
            t = np.where(bad, 0.5 * t, t)
            cand = x - t[:, None] * step
        x = cand
    f = flow_map(model.kind, model.params, model.sizes, model.steps, x, jac=False)[0]
    if np.all(np.linalg.norm(f - y, axis=-1) < tol):
        return x[0] if single else x
    raise NoConvergence(f"flow inverse did not reach {tol} in {max_iter} Newton iterations")
