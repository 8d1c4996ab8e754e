"""Closed-form geometry of SO(2), S^2, SO(3), SE(2) and SE(3).

Elements are plain numpy arrays with any number of leading batch axes:

====  ================================  =====================================
kind  element                           algebra coordinates
====  ================================  =====================================
SO2   angle wrapped to (-pi, pi], ``()``  ``(1,)``
S2    unit vector ``(3,)``              ``(2,)`` in :func:`tangent_basis`
SO3   rotation matrix ``(3, 3)``        rotation vector ``(3,)``
SE2   homogeneous matrix ``(3, 3)``     ``(rho_x, rho_y, theta)``
SE3   homogeneous matrix ``(4, 4)``     ``(rho_x, rho_y, rho_z, phi_x, phi_y, phi_z)``
====  ================================  =====================================

Translation coordinates come first in the SE layouts.  Body velocities are
left-trivialized: a curve ``x(t)`` has body velocity ``log(x^-1 dx)``, and a
step of size ``dt`` is ``x @ exp(dt * xi)``.

The 2-sphere is not a group; it exposes the same chart interface
(``log_at``/``exp_at``/``chart_pullback``) but raises :class:`NotAGroup` for
``compose``, ``inverse`` and ``adjoint``.
"""

from __future__ import annotations

import numpy as np

from .errors import AtCutLocus, InvalidElement, KindMismatch, NonFiniteInput, NotAGroup

EPS_CUT = 1e-6
SMALL_ANGLE = 1e-4
# coefficients with heavy cancellation switch to series earlier
SERIES_ANGLE = 1e-2
ORTHO_TOL = 1e-9
UNIT_TOL = 1e-12
BASIS_SWITCH = 0.99


# ---------------------------------------------------------------------------
# scalar coefficient functions with series branches


def _series(t, exact, c0, c1, c2, thresh):
    t = np.asarray(t, dtype=float)
    small = np.abs(t) < thresh
    ts = np.where(small, 1.0, t)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = exact(ts)
    t2 = t * t
    return np.where(small, c0 + t2 * (c1 + t2 * c2), out)


def sinc(t):
    """sin(t) / t."""
    return _series(t, lambda s: np.sin(s) / s, 1.0, -1 / 6, 1 / 120, SMALL_ANGLE)


def versc(t):
    """(1 - cos t) / t^2, evaluated as 2 sin^2(t/2) / t^2."""
    return _series(t, lambda s: 2 * np.sin(s / 2) ** 2 / s**2, 0.5, -1 / 24, 1 / 720, SMALL_ANGLE)


def _c3(t):
    # (t - sin t) / t^3
    return _series(t, lambda s: (s - np.sin(s)) / s**3, 1 / 6, -1 / 120, 1 / 5040, SERIES_ANGLE)


def _dinv(t):
    # (1 - (t/2) cot(t/2)) / t^2, the [phi]^2 coefficient of the inverse left Jacobian
    return _series(
        t,
        lambda s: (1 - 0.5 * s * np.cos(s / 2) / np.sin(s / 2)) / s**2,
        1 / 12, 1 / 720, 1 / 30240, SERIES_ANGLE,
    )


def _q2(t):
    return _series(t, lambda s: (s**2 - 4 * np.sin(s / 2) ** 2) / (2 * s**4),
                   1 / 24, -1 / 720, 1 / 40320, SERIES_ANGLE)


def _q3(t):
    return _series(t, lambda s: (2 * s - 3 * np.sin(s) + s * np.cos(s)) / (2 * s**5),
                   1 / 120, -1 / 2520, 1 / 120960, SERIES_ANGLE)


def wrap_angle(a):
    """Wrap angles to (-pi, pi]; angles already in range are returned unchanged."""
    a = np.asarray(a, dtype=float)
    turns = np.ceil((a - np.pi) / (2 * np.pi))
    return np.where(turns == 0, a, a - 2 * np.pi * turns)


def skew(v):
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def vee(S):
    S = np.asarray(S, dtype=float)
    return np.stack([S[..., 2, 1], S[..., 0, 2], S[..., 1, 0]], axis=-1)


def _eye(n, batch_shape):
    return np.broadcast_to(np.eye(n), tuple(batch_shape) + (n, n)).copy()


def _check_finite(v):
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)):
        raise NonFiniteInput("non-finite algebra coordinates")
    return v


def _transpose(m):
    return np.swapaxes(m, -1, -2)


def rot2(theta):
    theta = np.asarray(theta, dtype=float)
    c, s = np.cos(theta), np.sin(theta)
    return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)


# ---------------------------------------------------------------------------
# SO(3) primitives


def so3_exp(phi):
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    K = skew(phi)
    a = sinc(theta)[..., None, None]
    b = versc(theta)[..., None, None]
    return _eye(3, phi.shape[:-1]) + a * K + b * (K @ K)


def so3_log(R):
    """Rotation vector of ``R`` and its angle, valid up to (excluding) angle pi.

    Uses the skew part for angles below pi/2 and the symmetric part above, so
    both the identity and near-antipodal rotations keep full precision.
    """
    R = np.asarray(R, dtype=float)
    c = np.clip((np.trace(R, axis1=-2, axis2=-1) - 1.0) / 2.0, -1.0, 1.0)
    w = 0.5 * vee(R - _transpose(R))
    s = np.linalg.norm(w, axis=-1)
    theta = np.arctan2(s, c)
    phi_small = w / sinc(theta)[..., None]

    B = 0.5 * (R + _transpose(R)) - c[..., None, None] * np.eye(3)
    diag = np.diagonal(B, axis1=-2, axis2=-1)
    k = np.argmax(diag, axis=-1)
    idx = np.broadcast_to(k[..., None, None], B.shape[:-1] + (1,))
    col = np.take_along_axis(B, idx, axis=-1)[..., 0]
    norm = np.linalg.norm(col, axis=-1, keepdims=True)
    axis = col / np.where(norm > 0, norm, 1.0)
    sign = np.where(np.sum(axis * w, axis=-1) < 0, -1.0, 1.0)
    phi_large = axis * (sign * theta)[..., None]

    phi = np.where((c > 0)[..., None], phi_small, phi_large)
    return phi, theta


def so3_left_jacobian(phi):
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    K = skew(phi)
    return (_eye(3, phi.shape[:-1]) + versc(theta)[..., None, None] * K
            + _c3(theta)[..., None, None] * (K @ K))


def so3_right_jacobian(phi):
    return so3_left_jacobian(-np.asarray(phi, dtype=float))


def so3_left_jacobian_inv(phi):
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    K = skew(phi)
    return _eye(3, phi.shape[:-1]) - 0.5 * K + _dinv(theta)[..., None, None] * (K @ K)


def se3_q_matrix(rho, phi):
    """Off-diagonal block of the SE(3) left Jacobian."""
    rho = np.asarray(rho, dtype=float)
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    P, Rh = skew(phi), skew(rho)
    PR, RP = P @ Rh, Rh @ P
    PRP = PR @ P
    c1 = _c3(theta)[..., None, None]
    c2 = _q2(theta)[..., None, None]
    c3 = _q3(theta)[..., None, None]
    return (0.5 * Rh + c1 * (PR + RP + PRP) + c2 * (P @ PR + RP @ P - 3 * PRP)
            + c3 * (PRP @ P + P @ PRP))


def quat_to_matrix(q):
    """Unit quaternion (w, x, y, z) to rotation matrix."""
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], -2)


def orthonormalize(R):
    """Closest rotation matrix (SVD projection)."""
    U, _, Vt = np.linalg.svd(np.asarray(R, dtype=float))
    d = np.sign(np.linalg.det(U @ Vt))
    U = U.copy()
    U[..., :, -1] *= d[..., None]
    return U @ Vt


def _check_rotation(R):
    R = np.asarray(R, dtype=float)
    if not np.all(np.isfinite(R)):
        raise InvalidElement("non-finite rotation")
    n = R.shape[-1]
    err = np.abs(_transpose(R) @ R - np.eye(n)).max(initial=0.0)
    if err > ORTHO_TOL:
        raise InvalidElement(f"rotation block not orthonormal (error {err:.3e})")
    if np.any(np.linalg.det(R) <= 0):
        raise InvalidElement("rotation block has determinant -1")


# ---------------------------------------------------------------------------
# S^2 primitives

NORTH = np.array([0.0, 0.0, 1.0])


def tangent_basis(p):
    """Orthonormal tangent basis at ``p``, shape (..., 3, 2).

    Gram-Schmidt of the z axis against ``p``; the x axis is used instead when
    ``|p_z| > 0.99``.  The second column is ``p x b1``.
    """
    p = np.asarray(p, dtype=float)
    near_z = np.abs(p[..., 2]) > BASIS_SWITCH
    ref = np.where(near_z[..., None], np.array([1.0, 0.0, 0.0]), NORTH)
    b1 = ref - np.sum(ref * p, axis=-1, keepdims=True) * p
    b1 = b1 / np.linalg.norm(b1, axis=-1, keepdims=True)
    b2 = np.cross(p, b1)
    return np.stack([b1, b2], axis=-1)


def sphere_exp(p, u):
    """Riemannian exponential at ``p`` of the embedded tangent vector ``u``."""
    p = np.asarray(p, dtype=float)
    u = np.asarray(u, dtype=float)
    theta = np.linalg.norm(u, axis=-1, keepdims=True)
    x = np.cos(theta) * p + sinc(theta) * u
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def sphere_log(p, x):
    """Embedded tangent vector at ``p`` and arc length to ``x``."""
    p = np.asarray(p, dtype=float)
    x = np.asarray(x, dtype=float)
    cos = np.sum(p * x, axis=-1)
    sin = np.linalg.norm(np.cross(p, x), axis=-1)
    theta = np.arctan2(sin, cos)
    w = x - cos[..., None] * p
    wn = np.linalg.norm(w, axis=-1, keepdims=True)
    u = w * (theta[..., None] / np.where(wn > 0, wn, 1.0))
    return u, theta


def sphere_transport(a, b, v):
    """Parallel transport of embedded ``v`` from ``a`` to ``b`` along the geodesic."""
    a, b, v = (np.asarray(z, dtype=float) for z in (a, b, v))
    coef = np.sum(b * v, axis=-1, keepdims=True) / (1.0 + np.sum(a * b, axis=-1, keepdims=True))
    return v - coef * (a + b)


def sphere_exp_differential(p, u):
    """Differential of ``u -> sphere_exp(p, u)``, embedded, shape (..., 3, 3).

    Radial directions map to the geodesic tangent, transverse ones are scaled
    by ``sin(theta)/theta``; written in terms of ``u`` so it stays smooth at 0.
    """
    p = np.asarray(p, dtype=float)
    u = np.asarray(u, dtype=float)
    theta = np.linalg.norm(u, axis=-1)
    a = sinc(theta)
    g = _series(theta, lambda s: (np.cos(s) - np.sin(s) / s) / s**2, -1 / 3, 1 / 30, -1 / 840, SERIES_ANGLE)
    I = _eye(3, u.shape[:-1])
    return (a[..., None, None] * I
            - a[..., None, None] * p[..., :, None] * u[..., None, :]
            + g[..., None, None] * u[..., :, None] * u[..., None, :])


# ---------------------------------------------------------------------------
# manifold kinds


class Manifold:
    """Common interface; concrete kinds below.

    ``dim`` is the algebra (tangent) dimension, ``rot_idx``/``pos_idx`` index
    the rotational and translational algebra coordinates.
    """

    tag = ""
    dim = 0
    elem_shape: tuple = ()
    is_group = True
    rot_idx: tuple = ()
    pos_idx: tuple = ()
    workspace_bound = None
    distance_weight = 1.0

    def __repr__(self):
        if self.workspace_bound is None:
            return f"{self.tag}()"
        return f"{self.tag}(workspace_bound={self.workspace_bound!r})"

    def __eq__(self, other):
        return (isinstance(other, Manifold) and self.tag == other.tag
                and self.workspace_bound == other.workspace_bound)

    def __hash__(self):
        return hash((self.tag, self.workspace_bound))

    @property
    def box(self):
        """Half-widths of the translational chart dimensions."""
        if self.workspace_bound is None:
            return np.zeros(0)
        return np.full(len(self.pos_idx), float(self.workspace_bound))

    def batch_shape(self, x):
        x = np.asarray(x)
        n = len(self.elem_shape)
        return x.shape[: x.ndim - n] if n else x.shape

    def _check_pair(self, a, b):
        a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
        n = len(self.elem_shape)
        if n and (a.shape[a.ndim - n:] != self.elem_shape or b.shape[b.ndim - n:] != self.elem_shape):
            raise KindMismatch(f"{self.tag} expects element shape {self.elem_shape}")
        return a, b

    def log(self, x):
        """Algebra coordinates of ``x``; raises :class:`AtCutLocus` near angle pi."""
        v, angle = self.log_unchecked(x)
        if np.any(angle > np.pi - EPS_CUT):
            raise AtCutLocus(f"{self.tag} element within {EPS_CUT} of the cut locus")
        return v

    def log_at(self, base, x, basis=None):
        """Left-trivialized log of ``x`` relative to ``base``."""
        base, x = self._check_pair(base, x)
        return self.log(self.compose(self.inverse(base), x))

    def exp_at(self, base, v, basis=None):
        return self.compose(base, self.exp(v))

    def retract(self, x, xi):
        """Body-frame step ``x @ exp(xi)``."""
        return self.exp_at(x, xi)

    def chart_log(self, center, x, basis=None):
        """Log relative to ``center`` plus a boolean cut-locus mask; never raises."""
        center, x = self._check_pair(center, x)
        return self.log_unchecked_mask(self.compose(self.inverse(center), x))

    def log_unchecked_mask(self, x):
        v, angle = self.log_unchecked(x)
        return v, angle > np.pi - EPS_CUT

    def chart_exp(self, center, xhat, basis=None):
        return self.exp_at(center, xhat)

    def chart_pullback(self, center, xhat, mode="jacobian", basis=None):
        """Linear map sending chart velocities at ``xhat`` to body velocities.

        ``mode="jacobian"`` is the exact differential of the chart (right
        Jacobian of exp); ``mode="adjoint"`` is the frame change
        ``Ad(exp(xhat)^-1)``, which agrees with it to first order in ``xhat``.
        """
        if mode == "jacobian":
            return self.right_jacobian(xhat)
        if mode == "adjoint":
            return self.adjoint(self.inverse(self.exp(xhat)))
        raise ValueError(f"unknown pullback mode {mode!r}")

    def rotation_angle(self, x):
        return self.log_unchecked(x)[1]

    def distance(self, a, b):
        a, b = self._check_pair(a, b)
        rel = self.compose(self.inverse(a), b)
        ang = self.rotation_angle(rel)
        if self.pos_idx:
            dt = self.translation(b) - self.translation(a)
            return np.sqrt(ang**2 + self.distance_weight * np.sum(dt**2, axis=-1))
        return ang

    def project(self, x):
        return np.asarray(x, dtype=float)


class SO2(Manifold):
    tag = "SO2"
    dim = 1
    elem_shape = ()
    rot_idx = (0,)

    def identity(self, batch_shape=()):
        return np.zeros(batch_shape)

    def exp(self, v):
        v = _check_finite(v)
        return wrap_angle(v[..., 0])

    def log_unchecked(self, x):
        a = wrap_angle(x)
        return a[..., None], np.abs(a)

    def compose(self, a, b):
        return wrap_angle(np.asarray(a, dtype=float) + np.asarray(b, dtype=float))

    def inverse(self, a):
        return wrap_angle(-np.asarray(a, dtype=float))

    def adjoint(self, g):
        return np.ones(np.shape(g) + (1, 1))

    def right_jacobian(self, v):
        return np.ones(np.shape(v)[:-1] + (1, 1))

    left_jacobian = right_jacobian

    def random(self, rng, size=()):
        return rng.uniform(-np.pi, np.pi, size=size)

    def validate(self, x):
        if not np.all(np.isfinite(x)):
            raise InvalidElement("non-finite angle")

    def project(self, x):
        return wrap_angle(x)

    def to_flat(self, x):
        return np.asarray(x, dtype=float)[..., None]

    def from_flat(self, f):
        return wrap_angle(np.asarray(f, dtype=float)[..., 0])

    flat_size = 1


class SO3(Manifold):
    tag = "SO3"
    dim = 3
    elem_shape = (3, 3)
    rot_idx = (0, 1, 2)

    def identity(self, batch_shape=()):
        return _eye(3, batch_shape)

    def exp(self, v):
        return so3_exp(_check_finite(v))

    def log_unchecked(self, x):
        return so3_log(x)

    def compose(self, a, b):
        a, b = self._check_pair(a, b)
        return a @ b

    def inverse(self, a):
        return _transpose(np.asarray(a, dtype=float))

    def adjoint(self, g):
        return np.array(g, dtype=float)

    def right_jacobian(self, v):
        return so3_right_jacobian(v)

    def left_jacobian(self, v):
        return so3_left_jacobian(v)

    def random(self, rng, size=()):
        size = (size,) if np.isscalar(size) else tuple(size)
        return quat_to_matrix(rng.standard_normal(size + (4,)))

    def validate(self, x):
        _check_rotation(x)

    def project(self, x):
        return orthonormalize(x)

    def to_flat(self, x):
        x = np.asarray(x, dtype=float)
        return x.reshape(x.shape[:-2] + (9,))

    def from_flat(self, f):
        f = np.asarray(f, dtype=float)
        return f.reshape(f.shape[:-1] + (3, 3))

    flat_size = 9


class _SE(Manifold):
    n = 2

    def __init__(self, workspace_bound=1.0):
        if workspace_bound is None or not workspace_bound > 0:
            raise ValueError(f"{self.tag} requires a positive workspace_bound")
        self.workspace_bound = float(workspace_bound)

    def identity(self, batch_shape=()):
        return _eye(self.n + 1, batch_shape)

    def rotation(self, x):
        return np.asarray(x, dtype=float)[..., : self.n, : self.n]

    def translation(self, x):
        return np.asarray(x, dtype=float)[..., : self.n, self.n]

    def make(self, R, t):
        R = np.asarray(R, dtype=float)
        t = np.asarray(t, dtype=float)
        batch = np.broadcast_shapes(R.shape[:-2], t.shape[:-1])
        out = _eye(self.n + 1, batch)
        out[..., : self.n, : self.n] = R
        out[..., : self.n, self.n] = t
        return out

    def compose(self, a, b):
        a, b = self._check_pair(a, b)
        return a @ b

    def inverse(self, a):
        R, t = self.rotation(a), self.translation(a)
        Rt = _transpose(R)
        return self.make(Rt, -np.einsum("...ij,...j->...i", Rt, t))

    def random(self, rng, size=()):
        size = (size,) if np.isscalar(size) else tuple(size)
        R = self._random_rotation(rng, size)
        t = rng.uniform(-self.workspace_bound, self.workspace_bound, size=size + (self.n,))
        return self.make(R, t)

    def validate(self, x):
        x = np.asarray(x, dtype=float)
        if not np.all(np.isfinite(x)):
            raise InvalidElement("non-finite pose")
        _check_rotation(self.rotation(x))
        bottom = x[..., self.n, :]
        expected = np.zeros(self.n + 1)
        expected[-1] = 1.0
        if np.abs(bottom - expected).max(initial=0.0) > 0:
            raise InvalidElement("homogeneous bottom row must be (0, ..., 0, 1)")

    def project(self, x):
        return self.make(orthonormalize(self.rotation(x)), self.translation(x))


class SE2(_SE):
    tag = "SE2"
    dim = 3
    n = 2
    elem_shape = (3, 3)
    pos_idx = (0, 1)
    rot_idx = (2,)
    flat_size = 3

    def _random_rotation(self, rng, size):
        return rot2(rng.uniform(-np.pi, np.pi, size=size))

    def _V(self, theta):
        a = sinc(theta)
        b = theta * versc(theta)
        return np.stack([np.stack([a, -b], -1), np.stack([b, a], -1)], -2)

    def exp(self, v):
        v = _check_finite(v)
        theta = v[..., 2]
        t = np.einsum("...ij,...j->...i", self._V(theta), v[..., :2])
        return self.make(rot2(theta), t)

    def log_unchecked(self, x):
        x = np.asarray(x, dtype=float)
        theta = np.arctan2(x[..., 1, 0], x[..., 0, 0])
        a = sinc(theta)
        b = theta * versc(theta)
        det = a * a + b * b
        t = self.translation(x)
        rho0 = (a * t[..., 0] + b * t[..., 1]) / det
        rho1 = (-b * t[..., 0] + a * t[..., 1]) / det
        return np.stack([rho0, rho1, theta], -1), np.abs(theta)

    def adjoint(self, g):
        g = np.asarray(g, dtype=float)
        out = _eye(3, g.shape[:-2])
        out[..., :2, :2] = self.rotation(g)
        t = self.translation(g)
        out[..., 0, 2] = t[..., 1]
        out[..., 1, 2] = -t[..., 0]
        return out

    def left_jacobian(self, v):
        v = np.asarray(v, dtype=float)
        r0, r1, th = v[..., 0], v[..., 1], v[..., 2]
        a = sinc(th)
        b = versc(th)
        c = _c3(th)
        out = _eye(3, v.shape[:-1])
        out[..., 0, 0] = a
        out[..., 0, 1] = -th * b
        out[..., 1, 0] = th * b
        out[..., 1, 1] = a
        out[..., 0, 2] = r0 * th * c + r1 * b
        out[..., 1, 2] = -r0 * b + r1 * th * c
        return out

    def right_jacobian(self, v):
        return self.left_jacobian(-np.asarray(v, dtype=float))

    def to_flat(self, x):
        x = np.asarray(x, dtype=float)
        theta = np.arctan2(x[..., 1, 0], x[..., 0, 0])
        return np.concatenate([theta[..., None], self.translation(x)], -1)

    def from_flat(self, f):
        f = np.asarray(f, dtype=float)
        return self.make(rot2(f[..., 0]), f[..., 1:3])


class SE3(_SE):
    tag = "SE3"
    dim = 6
    n = 3
    elem_shape = (4, 4)
    pos_idx = (0, 1, 2)
    rot_idx = (3, 4, 5)
    flat_size = 12

    def _random_rotation(self, rng, size):
        return quat_to_matrix(rng.standard_normal(size + (4,)))

    def exp(self, v):
        v = _check_finite(v)
        rho, phi = v[..., :3], v[..., 3:]
        t = np.einsum("...ij,...j->...i", so3_left_jacobian(phi), rho)
        return self.make(so3_exp(phi), t)

    def log_unchecked(self, x):
        phi, theta = so3_log(self.rotation(x))
        rho = np.einsum("...ij,...j->...i", so3_left_jacobian_inv(phi), self.translation(x))
        return np.concatenate([rho, phi], -1), theta

    def adjoint(self, g):
        R, t = self.rotation(g), self.translation(g)
        out = np.zeros(R.shape[:-2] + (6, 6))
        out[..., :3, :3] = R
        out[..., 3:, 3:] = R
        out[..., :3, 3:] = skew(t) @ R
        return out

    def left_jacobian(self, v):
        v = np.asarray(v, dtype=float)
        rho, phi = v[..., :3], v[..., 3:]
        J = so3_left_jacobian(phi)
        out = np.zeros(v.shape[:-1] + (6, 6))
        out[..., :3, :3] = J
        out[..., 3:, 3:] = J
        out[..., :3, 3:] = se3_q_matrix(rho, phi)
        return out

    def right_jacobian(self, v):
        return self.left_jacobian(-np.asarray(v, dtype=float))

    def to_flat(self, x):
        return np.concatenate([SO3().to_flat(self.rotation(x)), self.translation(x)], -1)

    def from_flat(self, f):
        f = np.asarray(f, dtype=float)
        return self.make(f[..., :9].reshape(f.shape[:-1] + (3, 3)), f[..., 9:12])


class S2(Manifold):
    """Unit sphere with Riemannian exp/log; origin is the north pole.

    Chart coordinates at a point ``p`` are 2-vectors in a 3x2 orthonormal
    basis, :func:`tangent_basis` unless a basis is passed explicitly.
    """

    tag = "S2"
    dim = 2
    elem_shape = (3,)
    is_group = False
    rot_idx = (0, 1)
    flat_size = 3

    def identity(self, batch_shape=()):
        return np.broadcast_to(NORTH, tuple(batch_shape) + (3,)).copy()

    def _basis(self, p, basis):
        return tangent_basis(p) if basis is None else np.asarray(basis, dtype=float)

    def embed(self, p, v, basis=None):
        """Embedded tangent vector from chart coordinates at ``p``."""
        return np.einsum("...ij,...j->...i", self._basis(p, basis), np.asarray(v, dtype=float))

    def coords(self, p, u, basis=None):
        """Chart coordinates of the embedded tangent ``u`` at ``p``."""
        return np.einsum("...ji,...j->...i", self._basis(p, basis), np.asarray(u, dtype=float))

    def exp(self, v):
        """Exp at the north pole; accepts chart 2-vectors or embedded 3-vectors."""
        v = _check_finite(v)
        if v.shape[-1] == 3:
            if np.any(np.abs(v[..., 2]) > 1e-10):
                raise ValueError("embedded S2 tangent at the north pole must have zero z")
            u = v
        else:
            u = self.embed(NORTH, v)
        return sphere_exp(np.broadcast_to(NORTH, u.shape), u)

    def log_unchecked(self, x):
        x = np.asarray(x, dtype=float)
        u, theta = sphere_log(np.broadcast_to(NORTH, x.shape), x)
        return self.coords(NORTH, u), theta

    def log_at(self, base, x, basis=None):
        base, x = self._check_pair(base, x)
        u, theta = sphere_log(base, x)
        if np.any(theta > np.pi - EPS_CUT):
            raise AtCutLocus("S2 point antipodal to the base")
        return self.coords(base, u, basis)

    def exp_at(self, base, v, basis=None):
        base = np.asarray(base, dtype=float)
        return sphere_exp(base, self.embed(base, v, basis))

    def chart_log(self, center, x, basis=None):
        center, x = self._check_pair(center, x)
        u, theta = sphere_log(center, x)
        return self.coords(center, u, basis), theta > np.pi - EPS_CUT

    def chart_exp(self, center, xhat, basis=None):
        return self.exp_at(center, xhat, basis)

    def chart_pullback(self, center, xhat, mode="jacobian", basis=None):
        center = np.asarray(center, dtype=float)
        xhat = np.asarray(xhat, dtype=float)
        Ec = self._basis(center, basis)
        u = np.einsum("...ij,...j->...i", Ec, xhat)
        x = sphere_exp(center, u)
        Ex = tangent_basis(x)
        if mode == "jacobian":
            D = sphere_exp_differential(np.broadcast_to(center, u.shape), u) @ Ec
        elif mode == "adjoint":
            cols = [sphere_transport(center, x, np.broadcast_to(Ec[..., :, j], u.shape)) for j in range(2)]
            D = np.stack(cols, axis=-1)
        else:
            raise ValueError(f"unknown pullback mode {mode!r}")
        return _transpose(Ex) @ D

    def retract(self, x, xi):
        return self.exp_at(x, xi)

    def transport(self, a, b, v, basis_a=None):
        """Parallel transport of chart coordinates at ``a`` to chart coordinates at ``b``."""
        u = self.embed(a, v, basis_a)
        return self.coords(b, sphere_transport(a, b, u))

    def distance(self, a, b):
        a, b = self._check_pair(a, b)
        return sphere_log(a, b)[1]

    def rotation_angle(self, x):
        return self.log_unchecked(x)[1]

    def compose(self, a, b):
        raise NotAGroup("S2 is not a Lie group")

    def inverse(self, a):
        raise NotAGroup("S2 is not a Lie group")

    def adjoint(self, g):
        raise NotAGroup("S2 is not a Lie group; use transport()")

    def random(self, rng, size=()):
        size = (size,) if np.isscalar(size) else tuple(size)
        v = rng.standard_normal(size + (3,))
        return v / np.linalg.norm(v, axis=-1, keepdims=True)

    def validate(self, x):
        x = np.asarray(x, dtype=float)
        if not np.all(np.isfinite(x)):
            raise InvalidElement("non-finite S2 point")
        err = np.abs(np.linalg.norm(x, axis=-1) - 1.0).max(initial=0.0)
        if err > UNIT_TOL:
            raise InvalidElement(f"S2 point not unit norm (error {err:.3e})")

    def project(self, x):
        x = np.asarray(x, dtype=float)
        return x / np.linalg.norm(x, axis=-1, keepdims=True)

    def to_flat(self, x):
        return np.asarray(x, dtype=float)

    def from_flat(self, f):
        return np.asarray(f, dtype=float)[..., :3]


_KINDS = {"SO2": SO2, "S2": S2, "SO3": SO3, "SE2": SE2, "SE3": SE3}
KIND_TAGS = tuple(_KINDS)


def manifold(tag, workspace_bound=None):
    """Build a manifold kind from its tag; SE kinds require ``workspace_bound``."""
    from .errors import KindUnknown

    try:
        cls = _KINDS[str(tag).upper()]
    except KeyError:
        raise KindUnknown(f"unknown manifold kind {tag!r}; expected one of {KIND_TAGS}") from None
    if issubclass(cls, _SE):
        return cls(workspace_bound)
    if workspace_bound is not None:
        raise ValueError(f"{cls.tag} takes no workspace_bound")
    return cls()


def numerical_conjugation_adjoint(kind, g, h=1e-6):
    """Ad_g by central differences of ``g exp(t e_i) g^-1``; a test oracle."""
    ginv = kind.inverse(g)
    cols = []
    for i in range(kind.dim):
        e = np.zeros(kind.dim)
        e[i] = h
        plus = kind.log(kind.compose(kind.compose(g, kind.exp(e)), ginv))
        minus = kind.log(kind.compose(kind.compose(g, kind.exp(-e)), ginv))
        cols.append((plus - minus) / (2 * h))
    return np.stack(cols, axis=-1)
