"""Planar serial arm driven by an SE2 field through a damped pseudoinverse."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import JointLimit, KindMismatch
from .lie_core import SE2, rot2
from .msvf import eval_field, potential

REACHED = "ReachedGoal"
TIMEOUT = "Timeout"
STALL = "JointLimitStall"
LIMIT_TOL = 1e-12
# default limits of one full turn each way; tighter limits make damped least
# squares prone to folded local minima far from the goal
JOINT_RANGE = 2 * np.pi


@dataclass(frozen=True)
class PlanarChain:
    lengths: tuple = (0.2, 0.2, 0.2, 0.2, 0.2)
    lower: tuple | None = None
    upper: tuple | None = None
    base: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        L = tuple(float(v) for v in self.lengths)
        if any(not v >= 0 for v in L) or not any(v > 0 for v in L):
            raise ValueError("link lengths must be nonnegative with at least one positive")
        n = len(L)
        lo = (-JOINT_RANGE,) * n if self.lower is None else tuple(float(v) for v in self.lower)
        hi = (JOINT_RANGE,) * n if self.upper is None else tuple(float(v) for v in self.upper)
        if len(lo) != n or len(hi) != n or any(a >= b for a, b in zip(lo, hi)):
            raise ValueError("joint limits must satisfy lower < upper for every joint")
        object.__setattr__(self, "lengths", L)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "base", np.asarray(self.base, dtype=float))

    @property
    def n_links(self):
        return len(self.lengths)

    @property
    def reach(self):
        return sum(self.lengths)

    def check(self, q):
        q = np.asarray(q, dtype=float)
        if q.shape != (self.n_links,):
            raise ValueError(f"expected {self.n_links} joint angles")
        if np.any(q < np.array(self.lower) - LIMIT_TOL) or np.any(q > np.array(self.upper) + LIMIT_TOL):
            raise JointLimit("joint configuration outside the limits")
        return q

    def clamp(self, q):
        return np.clip(q, self.lower, self.upper)


@dataclass(frozen=True)
class ControlConfig:
    control_rate: float = 100.0
    damping: float = 0.01
    eps_goal: float = 0.05
    max_steps: int = 2000
    stall_steps: int = 50      # consecutive steps without progress at a joint limit

    def __post_init__(self):
        if not self.control_rate > 0:
            raise ValueError("control_rate must be positive")
        if self.damping < 0:
            raise ValueError("damping must be >= 0")


def _frames(chain, q):
    """Cumulative joint angles and link-tip positions (in the base frame)."""
    ang = np.cumsum(q)
    steps = np.array(chain.lengths)[:, None] * np.column_stack([np.cos(ang), np.sin(ang)])
    return ang, np.cumsum(steps, axis=0)


def fk(chain, q):
    """End-effector pose in SE2."""
    q = chain.check(q)
    ang, tips = _frames(chain, q)
    local = SE2(1.0).make(rot2(ang[-1]), tips[-1])
    return chain.base @ local


def jacobian_fk(chain, q):
    """Body-frame Jacobian (3, n) mapping joint rates to the end-effector twist ``(v, w)``."""
    q = chain.check(q)
    ang, tips = _frames(chain, q)
    p_e = tips[-1]
    R_e = rot2(ang[-1])
    joints = np.vstack([np.zeros(2), tips[:-1]])
    J = np.zeros((3, chain.n_links))
    for i in range(chain.n_links):
        r = p_e - joints[i]
        v_space = np.array([-r[1], r[0]])       # z x r in the base frame
        J[:2, i] = R_e.T @ v_space
        J[2, i] = 1.0
    return J


def damped_pinv(J, mu):
    JJt = J @ J.T
    return J.T @ np.linalg.solve(JJt + mu**2 * np.eye(JJt.shape[0]), np.eye(JJt.shape[0]))


def joint_rates(chain, q, v, damping):
    """Damped least-squares joint rates for twist ``v``.

    Joints resting on a limit whose rate would push further out are frozen
    and the remaining joints are re-solved, so the clamp does not silently
    discard task-space motion.
    """
    J = jacobian_fk(chain, q)
    free = np.ones(chain.n_links, dtype=bool)
    lo, hi = np.array(chain.lower), np.array(chain.upper)
    for _ in range(chain.n_links):
        qdot = np.zeros(chain.n_links)
        if free.any():
            qdot[free] = damped_pinv(J[:, free], damping) @ v
        push = ((q <= lo + LIMIT_TOL) & (qdot < 0)) | ((q >= hi - LIMIT_TOL) & (qdot > 0))
        push &= free
        if not push.any():
            break
        free &= ~push
    return qdot


def osc_step(chain, q, model, config):
    """One control tick: field twist at fk(q), pulled back to joint rates."""
    if not isinstance(model.kind, SE2):
        raise KindMismatch("the arm controller needs an SE2 field")
    v = eval_field(model, fk(chain, q))
    qdot = joint_rates(chain, q, v, config.damping)
    return chain.clamp(q + qdot / config.control_rate)


@dataclass
class Episode:
    joints: np.ndarray
    poses: np.ndarray
    outcome: str


def run_episodes(chain, Q0, model, config=ControlConfig()):
    """Closed loops for several starts, advanced in lockstep (one field call per tick).

    An episode ends when the end effector is within ``eps_goal`` of the
    target.  A stall is declared when some joint sits on its limit and the
    potential has not decreased for ``stall_steps`` consecutive ticks.
    """
    if not isinstance(model.kind, SE2):
        raise KindMismatch("the arm controller needs an SE2 field")
    k = model.kind
    Q = np.array([chain.clamp(np.asarray(q, dtype=float)) for q in Q0]).reshape(-1, chain.n_links)
    N = len(Q)
    lo, hi = np.array(chain.lower), np.array(chain.upper)
    qs = [[q.copy()] for q in Q]
    xs = [[fk(chain, q)] for q in Q]
    outcome = [TIMEOUT] * N
    active = np.ones(N, dtype=bool)
    best, idle = np.full(N, np.inf), np.zeros(N, dtype=int)
    for step in range(config.max_steps + 1):
        X = np.array([x[-1] for x in xs])
        done = active & (k.distance(np.broadcast_to(model.target, X.shape), X) < config.eps_goal)
        for i in np.flatnonzero(done):
            outcome[i], active[i] = REACHED, False
        if step == config.max_steps or not active.any():
            break
        at_limit = active & (np.any(Q <= lo + LIMIT_TOL, axis=1) | np.any(Q >= hi - LIMIT_TOL, axis=1))
        if at_limit.any():
            V = potential(model, X[at_limit])
            for i, v in zip(np.flatnonzero(at_limit), V):
                if v < best[i] - 1e-12:
                    best[i], idle[i] = v, 0
                else:
                    idle[i] += 1
                if idle[i] >= config.stall_steps:
                    outcome[i], active[i] = STALL, False
        free = active & ~at_limit
        best[free], idle[free] = np.inf, 0
        idx = np.flatnonzero(active)
        if not idx.size:
            break
        V_field = eval_field(model, X[idx])
        for i, v in zip(idx, V_field):
            Q[i] = chain.clamp(Q[i] + joint_rates(chain, Q[i], v, config.damping) / config.control_rate)
            qs[i].append(Q[i].copy())
            xs[i].append(fk(chain, Q[i]))
    return [Episode(np.array(a), np.array(b), o) for a, b, o in zip(qs, xs, outcome)]


def run_episode(chain, q0, model, config=ControlConfig()):
    """Single closed-loop episode; see :func:`run_episodes`."""
    return run_episodes(chain, [q0], model, config)[0]


def random_reachable(chain, rng, n, spread=np.pi):
    """Joint configurations uniform in ``[-spread, spread]`` intersected with the limits."""
    lo = np.maximum(chain.lower, -spread)
    hi = np.minimum(chain.upper, spread)
    return rng.uniform(lo, hi, (n, chain.n_links))
