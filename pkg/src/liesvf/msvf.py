"""Stable vector field on a manifold: chart log, bounded flow, contracting latent
dynamics and pullback.

For a point ``x`` the field is computed as

1. ``xhat = log_target(x)`` (left-trivialized chart at the target; zero
   velocity on the cut locus),
2. ``yhat = f(xhat) - f(0)``, the latent point relative to the latent sink
   ``f(0)`` (the image of the target),
3. ``vhat = -gain * yhat``,
4. ``v0 = J_f(xhat)^-1 vhat``, a chart velocity at ``xhat``,
5. ``xi = A(xhat) v0``, the body velocity at ``x``.

``A`` is the exact differential of the chart map (``mode="jacobian"``, the
default) or the frame change ``Ad(exp(xhat)^-1)`` / parallel transport
(``mode="adjoint"``).  With ``mode="jacobian"`` the latent point obeys
``d/dt yhat = -gain * yhat`` exactly, so ``V = |yhat|^2 / 2`` is a Lyapunov
function.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff_nn as ad
from .bounded_flow import FlowModel, flow_map, _check_det
from .errors import KindMismatch
from .lie_core import S2, sphere_log, tangent_basis, so3_exp

PULLBACK_MODES = ("jacobian", "adjoint")


@dataclass(frozen=True, eq=False)
class MsvfModel:
    flow: FlowModel
    target: np.ndarray
    gain: float = 1.0
    basis: np.ndarray | None = None
    pullback: str = "jacobian"

    def __post_init__(self):
        kind = self.flow.kind
        target = np.array(self.target, dtype=float)
        if target.shape != kind.elem_shape:
            raise KindMismatch(f"target shape {target.shape} is not a {kind.tag} element")
        kind.validate(target)
        object.__setattr__(self, "target", target)
        if self.pullback not in PULLBACK_MODES:
            raise ValueError(f"pullback must be one of {PULLBACK_MODES}")
        if not self.gain > 0:
            raise ValueError("gain must be positive")
        if isinstance(kind, S2):
            basis = tangent_basis(target) if self.basis is None else np.array(self.basis, dtype=float)
            if basis.shape != (3, 2) or np.abs(basis.T @ basis - np.eye(2)).max() > 1e-9 \
                    or np.abs(target @ basis).max() > 1e-9:
                raise ValueError("S2 basis must be an orthonormal 3x2 frame tangent at the target")
            object.__setattr__(self, "basis", basis)
        elif self.basis is not None:
            raise ValueError("basis is only used on S2")

    @property
    def kind(self):
        return self.flow.kind

    @property
    def chart(self):
        return self.flow.chart

    @classmethod
    def init(cls, kind, target=None, rng=None, hidden=(64, 64), steps=16, gain=1.0,
             output_scale=0.1, pullback="jacobian"):
        """Fresh model; ``rng=None`` gives the zero flow (identity diffeomorphism)."""
        if target is None:
            target = kind.identity()
        if rng is None:
            flow = FlowModel.zero(kind, hidden, steps)
        else:
            flow = FlowModel.init(kind, rng, hidden, steps, output_scale)
        return cls(flow, target, gain, pullback=pullback)

    def with_params(self, params):
        return replace(self, flow=self.flow.with_params(params))


def _flatten(model, x):
    x = np.asarray(x, dtype=float)
    n = len(model.kind.elem_shape)
    batch = x.shape[: x.ndim - n]
    return x.reshape((-1,) + model.kind.elem_shape), batch


def chart_coords(model, x):
    """Chart coordinates at the target and the cut-locus mask, for a flat batch."""
    xhat, cut = model.kind.chart_log(model.target, x, model.basis)
    xhat = np.where(cut[:, None], 0.0, xhat)
    return xhat, cut


def pullback_matrices(model, xhat):
    return model.kind.chart_pullback(model.target, xhat, model.pullback, model.basis)


def latent_terms(model, xhat, params=None):
    """Latent point ``f(xhat) - f(0)`` and flow Jacobian for a batch; tape-compatible."""
    params = model.flow.params if params is None else params
    d = model.kind.dim
    Z = np.concatenate([ad.value(xhat), np.zeros((1, d))]) if not ad.is_var(xhat) else \
        ad.concatenate([xhat, np.zeros((1, d))], axis=0)
    y, J = flow_map(model.kind, params, model.flow.sizes, model.flow.steps, Z)
    y_rel = y[:-1] - y[-1:]
    return y_rel, J[:-1]


def latent_dynamics(model, yhat):
    """Contracting latent field ``-gain * yhat``."""
    return -model.gain * np.asarray(yhat, dtype=float) if not ad.is_var(yhat) else -model.gain * yhat


def body_velocity(model, xhat, A, params=None):
    """Steps 2-5 of the pipeline for precomputed chart points and pullbacks."""
    y_rel, J = latent_terms(model, xhat, params)
    if not ad.is_var(J):
        _check_det(J)
    vhat = latent_dynamics(model, y_rel)
    v0 = ad.solve(J, vhat)
    B, d = ad.value(v0).shape
    return ad.reshape(A @ ad.reshape(v0, (B, d, 1)), (B, d))


def eval_field(model, x):
    """Body velocity of the field at ``x`` (any batch shape)."""
    xf, batch = _flatten(model, x)
    xhat, cut = chart_coords(model, xf)
    xi = body_velocity(model, xhat, pullback_matrices(model, xhat))
    xi[cut] = 0.0
    return xi.reshape(batch + (model.kind.dim,))


def latent_point(model, x):
    """``f(log_target(x)) - f(0)``; NaN rows on the cut locus."""
    xf, batch = _flatten(model, x)
    xhat, cut = chart_coords(model, xf)
    y = latent_terms(model, xhat)[0]
    y[cut] = np.nan
    return y.reshape(batch + (model.kind.dim,))


def phi(model, x):
    """The diffeomorphism: exp . f . log inside the chart, identity on the cut locus."""
    xf, batch = _flatten(model, x)
    xhat, cut = chart_coords(model, xf)
    y = flow_map(model.kind, model.flow.params, model.flow.sizes, model.flow.steps, xhat, jac=False)[0]
    out = model.kind.chart_exp(model.target, y, model.basis)
    out[cut] = xf[cut]
    return out.reshape(batch + model.kind.elem_shape)


def potential_cap(model):
    """Value of the potential on the cut locus: an upper bound of V on the chart."""
    radius = np.sqrt(np.pi**2 + np.sum(model.kind.box**2))
    sink = latent_terms(model, np.zeros((1, model.kind.dim)))[0]  # zero by construction
    c = flow_map(model.kind, model.flow.params, model.flow.sizes, model.flow.steps,
                 np.zeros((1, model.kind.dim)), jac=False)[0][0]
    return 0.5 * (radius + np.linalg.norm(c) + np.linalg.norm(sink)) ** 2


def potential(model, x):
    """Lyapunov potential ``|f(xhat) - f(0)|^2 / 2``; capped value on the cut locus."""
    xf, batch = _flatten(model, x)
    xhat, cut = chart_coords(model, xf)
    y = flow_map(model.kind, model.flow.params, model.flow.sizes, model.flow.steps,
                 np.concatenate([xhat, np.zeros((1, model.kind.dim))]), jac=False)[0]
    V = 0.5 * np.sum((y[:-1] - y[-1:]) ** 2, axis=-1)
    if cut.any():
        V[cut] = potential_cap(model)
    return V.reshape(batch)


def _min_rotation(a, b, fallback_axis):
    """Rotation taking unit vector ``a`` to ``b`` about ``a x b``."""
    axis = np.cross(a, b)
    s = np.linalg.norm(axis)
    angle = np.arctan2(s, a @ b)
    if s < 1e-12:
        axis = fallback_axis if angle > np.pi / 2 else np.zeros(3)
        return so3_exp(axis * angle)
    return so3_exp(axis / s * angle)


def set_target(model, new_target):
    """Move the sink (and the chart origin) to ``new_target``.

    On Lie groups the field is left-equivariant: the new field at
    ``new_target @ d`` equals the old field at ``target @ d``.  On S2 the
    chart basis is carried along by the minimal rotation between targets.
    """
    kind = model.kind
    new_target = np.array(new_target, dtype=float)
    if new_target.shape != kind.elem_shape:
        raise KindMismatch(f"new target is not a {kind.tag} element")
    if isinstance(kind, S2):
        R = _min_rotation(model.target, new_target, model.basis[:, 0])
        return replace(model, target=new_target, basis=R @ model.basis)
    return replace(model, target=new_target)


def target_rotation(model, new_target):
    """S2 only: the rotation used by :func:`set_target`."""
    return _min_rotation(model.target, np.asarray(new_target, dtype=float), model.basis[:, 0])


def distance_to_cut_locus(model, x):
    """Angular distance from ``x`` to the cut locus of the target chart."""
    xf, batch = _flatten(model, x)
    if isinstance(model.kind, S2):
        ang = sphere_log(np.broadcast_to(model.target, xf.shape), xf)[1]
    else:
        ang = model.kind.rotation_angle(model.kind.compose(model.kind.inverse(model.target), xf))
    return (np.pi - ang).reshape(batch)
