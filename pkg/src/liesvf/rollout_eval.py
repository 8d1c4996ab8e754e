"""Integration of a field on its manifold and the evaluation metrics."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import SingularJacobian, UnsupportedGridKind
from .lie_core import S2, SE2, SE3, SO2, SO3, rot2
from .msvf import MsvfModel, chart_coords, eval_field, potential

CUT_EXCLUSION = 1e-3
REPORT_SCHEMA = 1


@dataclass(frozen=True)
class RolloutConfig:
    dt: float = 0.01
    horizon: int = 2000
    eps_goal: float = 0.05
    n_starts: int = 100
    seed: int = 0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.horizon < 0:
            raise ValueError("horizon must be >= 0")
        if not self.eps_goal > 0:
            raise ValueError("eps_goal must be positive")
        if self.n_starts < 0:
            raise ValueError("n_starts must be >= 0")

    def check(self, model):
        if self.dt * model.gain >= 0.5:
            raise ValueError(f"dt * gain = {self.dt * model.gain} must be < 0.5")


@dataclass
class Rollout:
    points: np.ndarray      # (steps + 1, *elem_shape)
    reason: str             # goal | horizon | stalled

    @property
    def converged(self):
        return self.reason == "goal"


@dataclass
class EvalReport:
    velocity_mse: float
    area: float
    instability_pct: float
    outcomes: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_json(self):
        d = {"schema_version": REPORT_SCHEMA, **asdict(self)}
        return json.dumps(d, indent=2, sort_keys=True)


def distance_to_target(model, x):
    k = model.kind
    return k.distance(np.broadcast_to(model.target, np.shape(x)), x)


def integrate_batch(model: MsvfModel, x0, config: RolloutConfig, early_stop=True):
    """Roll out all starts in ``x0`` (N, *elem_shape) together.

    Each sample stops when it is within ``eps_goal`` of the target (if
    ``early_stop``) or when it sits on the cut locus, where the field is zero
    and the rollout is reported as stalled.
    """
    config.check(model)
    k = model.kind
    x = np.array(x0, dtype=float).reshape((-1,) + k.elem_shape)
    N = len(x)
    paths = [[xi.copy()] for xi in x]
    reasons = ["horizon"] * N
    active = np.ones(N, dtype=bool)

    def settle():
        idx = np.flatnonzero(active)
        if not idx.size:
            return
        if early_stop:
            done = distance_to_target(model, x[idx]) < config.eps_goal
            for i in idx[done]:
                reasons[i], active[i] = "goal", False
        idx = np.flatnonzero(active)
        cut = chart_coords(model, x[idx])[1]
        for i in idx[cut]:
            reasons[i], active[i] = "stalled", False

    settle()
    for step in range(config.horizon):
        idx = np.flatnonzero(active)
        if not idx.size:
            break
        try:
            xi = eval_field(model, x[idx])
        except SingularJacobian as e:
            raise SingularJacobian(str(e), step=step) from None
        x[idx] = k.retract(x[idx], config.dt * xi)
        for j, i in enumerate(idx):
            paths[i].append(x[i].copy())
        settle()
    if not early_stop:
        d = distance_to_target(model, x)
        for i in range(N):
            if reasons[i] == "horizon" and d[i] < config.eps_goal:
                reasons[i] = "goal"
    return [Rollout(np.array(p), r) for p, r in zip(paths, reasons)]


def integrate(model, x0, config, early_stop=True):
    """Single rollout from one element ``x0``."""
    return integrate_batch(model, np.asarray(x0)[None], config, early_stop)[0]


def velocity_mse(model, dataset):
    """Mean squared body-velocity error over every sample of the dataset."""
    from .trainer import bc_loss, SampleBatch
    pts, vel, frames = dataset.samples()
    return bc_loss(model, SampleBatch(pts, vel, frames))


def area_metric(model, dataset, config: RolloutConfig | None = None):
    """Mean time-aligned geodesic discrepancy between demonstrations and rollouts.

    Each demonstration is reproduced by rolling out from its first pose for
    the same number of steps at the dataset ``dt``.
    """
    config = config or RolloutConfig(dt=dataset.dt)
    dt = dataset.dt
    trajs = [t.poses for t in dataset.trajectories]
    if not trajs:
        return 0.0
    L = max(len(t) for t in trajs)
    cfg = RolloutConfig(dt=dt, horizon=L - 1, eps_goal=config.eps_goal, n_starts=0)
    outs = integrate_batch(model, np.stack([t[0] for t in trajs]), cfg, early_stop=False)
    k = model.kind
    vals = []
    for demo, out in zip(trajs, outs):
        n = len(demo)
        roll = out.points[np.minimum(np.arange(n), len(out.points) - 1)]
        vals.append(float(np.mean(k.distance(demo, roll))))
    return float(np.mean(vals))


def sample_starts(model, n, rng, exclusion=CUT_EXCLUSION):
    """Random starts relative to the target, away from the cut locus.

    Rotations are Haar-uniform; SE translations uniform in the workspace box
    around the target.
    """
    k = model.kind
    out = []
    need = n
    while need > 0:
        r = k.random(rng, need)
        if k.pos_idx:
            r = k.make(k.rotation(r), rng.uniform(-1, 1, (need, len(k.pos_idx))) * k.box)
            x = k.compose(model.target, r)
        elif isinstance(k, S2):
            x = r
        else:
            x = k.compose(model.target, r)
        ok = _cut_distance(model, x) > exclusion
        out.append(x[ok])
        need -= int(ok.sum())
    return np.concatenate(out)[:n]


def _cut_distance(model, x):
    from .msvf import distance_to_cut_locus
    return distance_to_cut_locus(model, x)


def rollout_outcomes(model, config: RolloutConfig, starts=None):
    if starts is None:
        starts = sample_starts(model, config.n_starts, np.random.default_rng(config.seed))
    return integrate_batch(model, starts, config)


def instability_pct(model, config: RolloutConfig, starts=None):
    """Percentage of rollouts that are not within ``eps_goal`` after ``horizon`` steps."""
    outs = rollout_outcomes(model, config, starts)
    if not outs:
        return 0.0
    return 100.0 * sum(not o.converged for o in outs) / len(outs)


def lyapunov_violations(model, rollouts, slack=1e-9):
    """Number of steps along the rollouts where the potential increases by more than ``slack``."""
    count = 0
    for r in rollouts:
        V = potential(model, r.points)
        count += int(np.sum(np.diff(V) > slack))
    return count


def evaluate(model, dataset, config: RolloutConfig):
    outs = rollout_outcomes(model, config)
    inst = 100.0 * sum(not o.converged for o in outs) / len(outs) if outs else 0.0
    return EvalReport(
        velocity_mse=velocity_mse(model, dataset),
        area=area_metric(model, dataset, config),
        instability_pct=inst,
        outcomes=[{"start": i, "reason": o.reason, "steps": len(o.points) - 1} for i, o in enumerate(outs)],
        config=asdict(config),
    )


# ---------------------------------------------------------------------------
# field grids


@dataclass(frozen=True)
class GridSpec:
    """Grid resolution; ``n`` points per axis (``n3`` for the third SE2/SO3 axis)."""

    n: int = 21
    n2: int | None = None
    n3: int | None = None

    @classmethod
    def parse(cls, text):
        """``"21"`` or ``"n=21,n2=11"``."""
        text = text.strip()
        if "=" not in text:
            return cls(n=int(text))
        kw = {}
        for part in text.split(","):
            key, val = part.split("=")
            key = key.strip()
            if key not in ("n", "n2", "n3"):
                raise ValueError(f"unknown grid key {key!r}")
            kw[key] = int(val)
        return cls(**kw)


def _centered(n, half):
    """``n`` cell-centred samples of (-half, half); contains 0 for odd ``n``."""
    return -half + (np.arange(n) + 0.5) * (2 * half / n)


def grid_points(model, spec: GridSpec):
    """Grid elements and their coordinate columns (header, rows)."""
    k = model.kind
    n2 = spec.n2 or spec.n
    n3 = spec.n3 or spec.n
    if isinstance(k, SO2):
        rel = _centered(spec.n, np.pi)
        x = k.compose(model.target, rel)
        return x, ["angle"], x[:, None]
    if isinstance(k, S2):
        # lat/long with the target at the north pole of the grid frame
        lat = np.linspace(-np.pi / 2, np.pi / 2, spec.n)
        lon = _centered(n2, np.pi)
        La, Lo = np.meshgrid(lat, lon, indexing="ij")
        local = np.stack([np.cos(La) * np.cos(Lo), np.cos(La) * np.sin(Lo), np.sin(La)], -1).reshape(-1, 3)
        R = np.column_stack([model.basis, model.target])
        x = local @ R.T
        x /= np.linalg.norm(x, axis=-1, keepdims=True)
        coords = np.column_stack([La.ravel(), Lo.ravel(), x])
        return x, ["lat", "lon", "x", "y", "z"], coords
    if isinstance(k, SE2):
        b = k.box
        th = _centered(n3, np.pi)
        px = _centered(spec.n, b[0])
        py = _centered(n2, b[1])
        T, X, Y = np.meshgrid(th, px, py, indexing="ij")
        rel = np.column_stack([X.ravel(), Y.ravel(), T.ravel()])
        x = k.compose(model.target, k.make(rot2(rel[:, 2]), rel[:, :2]))
        t = k.translation(x)
        ang = np.arctan2(x[:, 1, 0], x[:, 0, 0])
        return x, ["angle", "x", "y"], np.column_stack([ang, t])
    if isinstance(k, SO3):
        g = _centered(spec.n, np.pi)
        G = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3)
        G = G[np.linalg.norm(G, axis=-1) < np.pi]
        x = k.compose(model.target, k.exp(G))
        return x, ["r00", "r01", "r02", "r10", "r11", "r12", "r20", "r21", "r22"], x.reshape(-1, 9)
    raise UnsupportedGridKind(f"no grid for {k.tag}; use a slice (fix rotation or translation)")


def export_field_grid(model, spec: GridSpec = GridSpec()):
    """Table of grid coordinates and body velocities in deterministic row order."""
    if isinstance(model.kind, SE3):
        raise UnsupportedGridKind("SE3 grids are not supported; use a slice (fix rotation or translation)")
    x, header, coords = grid_points(model, spec)
    vel = eval_field(model, x)
    header = header + [f"v{i}" for i in range(model.kind.dim)]
    return header, np.column_stack([coords, vel])


def _fmt(v):
    return format(float(v), ".17g")


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def trajectory_table(kind, points):
    """Flat pose coordinates of a trajectory, one row per step."""
    flat = kind.to_flat(np.asarray(points))
    return [f"c{i}" for i in range(flat.shape[-1])], flat.reshape(len(points), -1)
