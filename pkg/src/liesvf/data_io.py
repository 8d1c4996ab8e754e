"""Demonstration datasets: schema, velocity estimation, S2 projection of planar
curves, synthetic oracle demonstrations and the built-in shape corpus."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .errors import (ConsecutiveAntipodal, CurveTooLarge, EmptyDataset, InvalidElement,
                     KindUnknown, SchemaError)
from .lie_core import S2, manifold, rot2

SCHEMA_VERSION = 1
S2_MARGIN = 0.1
TIMESTAMP_TOL = 0.01
KARCHER_ITERS = 100
KARCHER_WARN = 0.2
BODY = "body"


@dataclass(frozen=True, eq=False)
class Trajectory:
    poses: np.ndarray                 # (T, *elem_shape)
    velocities: np.ndarray | None = None   # (T, d), body frame

    def __len__(self):
        return len(self.poses)


@dataclass(frozen=True, eq=False)
class TrajectoryDataset:
    kind: object
    dt: float
    trajectories: tuple = ()
    source: str = ""
    frame: str = BODY

    def __post_init__(self):
        if not self.dt > 0:
            raise SchemaError("dt must be positive")
        trajs = []
        for i, t in enumerate(self.trajectories):
            if not isinstance(t, Trajectory):
                t = Trajectory(*t) if isinstance(t, tuple) else Trajectory(t)
            poses = np.asarray(t.poses, dtype=float)
            if poses.shape[1:] != self.kind.elem_shape:
                raise SchemaError(f"trajectory {i}: poses are not {self.kind.tag} elements")
            if len(poses) < 3:
                raise SchemaError(f"trajectory {i}: needs at least 3 poses, has {len(poses)}")
            try:
                self.kind.validate(poses)
            except InvalidElement as e:
                raise SchemaError(f"trajectory {i}: {e}") from None
            vel = None if t.velocities is None else np.asarray(t.velocities, dtype=float)
            if vel is not None and vel.shape != (len(poses), self.kind.dim):
                raise SchemaError(f"trajectory {i}: velocities must have shape ({len(poses)}, {self.kind.dim})")
            trajs.append(Trajectory(poses, vel))
        object.__setattr__(self, "trajectories", tuple(trajs))

    def __len__(self):
        return len(self.trajectories)

    def with_velocities(self):
        """Copy where missing velocities are filled by :func:`estimate_velocities`."""
        trajs = [t if t.velocities is not None
                 else Trajectory(t.poses, estimate_velocities(self.kind, t.poses, self.dt))
                 for t in self.trajectories]
        return TrajectoryDataset(self.kind, self.dt, tuple(trajs), self.source, self.frame)

    def samples(self):
        """All (pose, body velocity) pairs stacked, plus their frame tags."""
        ds = self.with_velocities()
        if not ds.trajectories:
            return (np.zeros((0,) + self.kind.elem_shape), np.zeros((0, self.kind.dim)), ())
        pts = np.concatenate([t.poses for t in ds.trajectories])
        vel = np.concatenate([t.velocities for t in ds.trajectories])
        return pts, vel, (self.frame,) * len(vel)

    def terminal_poses(self):
        return np.stack([t.poses[-1] for t in self.trajectories])

    def split(self, n_train):
        a = TrajectoryDataset(self.kind, self.dt, self.trajectories[:n_train], self.source, self.frame)
        b = TrajectoryDataset(self.kind, self.dt, self.trajectories[n_train:], self.source, self.frame)
        return a, b


# ---------------------------------------------------------------------------
# velocities


def estimate_velocities(kind, poses, dt):
    """Body-frame velocities by central differences on the manifold.

    Groups use ``log(x_{t-1}^-1 x_{t+1}) / (2 dt)``; on S2 the difference of
    the Riemannian logs at ``x_t`` toward both neighbours.  The endpoints use
    one-sided differences expressed at the endpoint itself.
    """
    x = np.asarray(poses, dtype=float)
    if len(x) < 3:
        raise SchemaError("velocity estimation needs at least 3 poses")
    _, cut = kind.chart_log(x[:-1], x[1:])
    if cut.any():
        i = int(np.flatnonzero(cut)[0])
        raise ConsecutiveAntipodal(f"poses {i} and {i + 1} are mutually on the cut locus")
    v = np.empty((len(x), kind.dim))
    if isinstance(kind, S2):
        fwd = kind.chart_log(x[1:-1], x[2:])[0]
        bwd = kind.chart_log(x[1:-1], x[:-2])[0]
        v[1:-1] = (fwd - bwd) / (2 * dt)
    else:
        w, c = kind.chart_log(x[:-2], x[2:])
        if c.any():
            raise ConsecutiveAntipodal("poses two steps apart are on the cut locus")
        v[1:-1] = w / (2 * dt)
    v[0] = kind.chart_log(x[0], x[1])[0] / dt
    v[-1] = -kind.chart_log(x[-1], x[-2])[0] / dt
    return v


# ---------------------------------------------------------------------------
# targets


def karcher_mean(kind, poses, iters=KARCHER_ITERS, tol=1e-12):
    """Fréchet mean by iterated log averaging at the current estimate.

    Returns ``(mean, max geodesic distance to the poses)``.
    """
    x = np.asarray(poses, dtype=float)
    if len(x) == 0:
        raise EmptyDataset("no poses to average")
    mu = x[0].copy()
    for _ in range(iters):
        v, cut = kind.chart_log(np.broadcast_to(mu, x.shape), x)
        step = v[~cut].mean(axis=0) if (~cut).any() else np.zeros(kind.dim)
        mu = kind.chart_exp(mu, step)
        if np.linalg.norm(step) < tol:
            break
    spread = float(np.max(kind.distance(np.broadcast_to(mu, x.shape), x)))
    return mu, spread


def extract_target(dataset):
    """Karcher mean of terminal poses; warns when they are spread beyond 0.2."""
    mu, spread = karcher_mean(dataset.kind, dataset.terminal_poses())
    if spread > KARCHER_WARN:
        warnings.warn(f"terminal poses spread {spread:.3f} exceeds {KARCHER_WARN}; target may be poor")
    return mu, spread


# ---------------------------------------------------------------------------
# planar curves on S2


def lasa_to_s2(curve2d, base, scale, basis=None, margin=S2_MARGIN):
    """Centre a planar curve on its endpoint, scale it and wrap it onto S2 at ``base``."""
    c = np.asarray(curve2d, dtype=float)
    if c.ndim != 2 or c.shape[1] != 2:
        raise ValueError("curve must have shape (T, 2)")
    rel = (c - c[-1]) * scale
    r = np.linalg.norm(rel, axis=-1).max(initial=0.0)
    if r >= np.pi - margin:
        raise CurveTooLarge(f"scaled curve radius {r:.4f} >= pi - {margin}")
    base = np.asarray(base, dtype=float)
    return S2().exp_at(np.broadcast_to(base, (len(rel), 3)), rel, basis)


def load_lasa_txt(path):
    """Planar curve from a whitespace/comma separated numeric text file (first two columns)."""
    rows = []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                vals = [float(v) for v in line.replace(",", " ").split()]
            except ValueError:
                raise SchemaError(f"{path}:{ln}: non-numeric entry") from None
            if len(vals) < 2:
                raise SchemaError(f"{path}:{ln}: need at least two columns")
            rows.append(vals[:2])
    return np.array(rows)


# ---------------------------------------------------------------------------
# shape corpus

SHAPES = ("spiral", "s_curve", "hook", "zigzag")


def _shape_path(name, n):
    s = np.linspace(0.0, 1.0, n)
    if name == "spiral":
        ang = 3 * np.pi * (1 - s)
        r = 1 - s
        return np.column_stack([r * np.cos(ang), r * np.sin(ang)])
    if name == "s_curve":
        return np.column_stack([np.sin(2 * np.pi * (1 - s)) * 0.5 * (1 - s), 1 - s])
    if name == "hook":
        ang = np.pi * (1 - s)
        return np.column_stack([0.5 * (1 - np.cos(ang)), np.sin(ang) * 0.6 + (1 - s) * 0.4])
    if name == "zigzag":
        tri = 2 * np.abs(((1 - s) * 3) % 1.0 - 0.5)
        return np.column_stack([1 - s, 0.4 * tri * (1 - s)])
    raise ValueError(f"unknown shape {name!r}; expected one of {SHAPES}")


def _arc_length(path):
    seg = np.linalg.norm(np.diff(path, axis=0), axis=-1)
    return np.concatenate([[0.0], np.cumsum(seg)])


def shape_curve(name, n=200, tau=0.25):
    """Planar curve ending at the origin, timed with exponentially decaying speed.

    Arc length follows ``L (1 - exp(-t / tau)) / (1 - exp(-1 / tau))`` over
    unit duration so demonstrations slow down into the goal.
    """
    path = _shape_path(name, 4000)
    s = _arc_length(path)
    u = np.linspace(0.0, 1.0, n)
    frac = (1 - np.exp(-u / tau)) / (1 - np.exp(-1 / tau))
    target = frac * s[-1]
    return np.column_stack([np.interp(target, s, path[:, 0]), np.interp(target, s, path[:, 1])])


def shape_demos(name, n_demos, rng, n=200, noise=0.05):
    """Several demonstrations of a shape, each randomly stretched and rotated slightly."""
    base = shape_curve(name, n)
    out = []
    for _ in range(n_demos):
        A = rot2(rng.normal(0, noise)) * (1 + rng.normal(0, noise))
        bend = rng.normal(0, noise, 2)
        w = np.linspace(1.0, 0.0, n)[:, None]
        out.append(base @ A.T + w * bend)
    return out


def shape_dataset(names=("spiral", "s_curve", "hook"), n_demos=3, n=200, scale=1.0,
                  seed=0, base=None, duration=4.0):
    """S2 dataset from planar shapes wrapped at ``base`` (north pole by default)."""
    rng = np.random.default_rng(seed)
    base = np.array([0.0, 0.0, 1.0]) if base is None else np.asarray(base, dtype=float)
    dt = duration / (n - 1)
    trajs = []
    for name in names:
        for c in shape_demos(name, n_demos, rng, n):
            poses = lasa_to_s2(c, base, scale)
            trajs.append(Trajectory(poses, estimate_velocities(S2(), poses, dt)))
    return TrajectoryDataset(S2(), dt, tuple(trajs), source=f"shapes:{','.join(names)}")


def se2_scripted_demos(kind, target, starts, n=200, duration=4.0, tau=0.25, bow=0.3):
    """Planar reaching demonstrations: curved paths into ``target`` with slowing speed.

    Position follows a quadratic Bezier with a sideways control point; the
    heading interpolates geodesically.  All paths end exactly at ``target``.
    """
    target = np.asarray(target, dtype=float)
    dt = duration / (n - 1)
    u = np.linspace(0.0, 1.0, n)
    s = (1 - np.exp(-u / tau)) / (1 - np.exp(-1 / tau))
    trajs = []
    for x0 in np.asarray(starts, dtype=float):
        p0, p1 = kind.translation(x0), kind.translation(target)
        d = p1 - p0
        ctrl = 0.5 * (p0 + p1) + bow * np.array([-d[1], d[0]])
        pos = ((1 - s) ** 2)[:, None] * p0 + (2 * s * (1 - s))[:, None] * ctrl + (s**2)[:, None] * p1
        a0 = np.arctan2(x0[1, 0], x0[0, 0])
        a1 = np.arctan2(target[1, 0], target[0, 0])
        da = np.angle(np.exp(1j * (a1 - a0)))
        poses = kind.make(rot2(a0 + s * da), pos)
        trajs.append(Trajectory(poses, estimate_velocities(kind, poses, dt)))
    return TrajectoryDataset(kind, dt, tuple(trajs), source="se2-scripted")


# ---------------------------------------------------------------------------
# synthetic oracle demonstrations


def default_start_sampler(model, rng, n, radius=0.85):
    """Uniform in the chart ball of radius ``radius * pi`` (and ``radius * box``) at the target."""
    k = model.kind
    nr = len(k.rot_idx)
    d = rng.standard_normal((n, nr))
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    r = radius * np.pi * rng.uniform(0, 1, n) ** (1.0 / nr)
    xhat = np.zeros((n, k.dim))
    xhat[:, list(k.rot_idx)] = d * r[:, None]
    if k.pos_idx:
        xhat[:, list(k.pos_idx)] = rng.uniform(-1, 1, (n, len(k.pos_idx))) * radius * k.box
    return k.chart_exp(np.broadcast_to(model.target, (n,) + k.elem_shape), xhat, model.basis)


def synth_demos(ground_truth, n_traj, horizon, dt, seed, start_sampler=None):
    """Roll out ``ground_truth`` from random starts and record its exact velocities."""
    from .msvf import eval_field
    from .rollout_eval import RolloutConfig, integrate_batch

    if not dt * ground_truth.gain < 0.5:
        raise ValueError("dt * gain must be < 0.5")
    rng = np.random.default_rng(seed)
    sampler = start_sampler or default_start_sampler
    starts = sampler(ground_truth, rng, n_traj)
    cfg = RolloutConfig(dt=dt, horizon=horizon, n_starts=n_traj, seed=seed)
    outs = integrate_batch(ground_truth, starts, cfg, early_stop=False)
    trajs = []
    for o in outs:
        pts = o.points
        if len(pts) < 3:
            continue
        trajs.append(Trajectory(pts, eval_field(ground_truth, pts)))
    return TrajectoryDataset(ground_truth.kind, dt, tuple(trajs), source=f"synth:seed={seed}")


# ---------------------------------------------------------------------------
# JSON files


def _pose_flat(kind, x):
    return [float(v) for v in np.ravel(kind.to_flat(x))]


def dataset_to_dict(ds):
    head = {"schema_version": SCHEMA_VERSION, "kind": ds.kind.tag, "dt": float(ds.dt),
            "source": ds.source, "frame": ds.frame}
    if ds.kind.workspace_bound is not None:
        head["workspace_bound"] = float(ds.kind.workspace_bound)
    trajs = []
    for t in ds.trajectories:
        recs = []
        for i, x in enumerate(t.poses):
            r = {"pose": _pose_flat(ds.kind, x)}
            if t.velocities is not None:
                r["vel"] = [float(v) for v in t.velocities[i]]
            recs.append(r)
        trajs.append(recs)
    head["trajectories"] = trajs
    return head


def save_dataset(ds, path, config=None):
    """Write ``ds`` as JSON; ``config`` is stored verbatim for provenance."""
    d = dataset_to_dict(ds)
    if config is not None:
        d["config"] = config
    # json writes floats with repr, the shortest string that round-trips exactly
    with open(path, "w") as fh:
        json.dump(d, fh, indent=1)
        fh.write("\n")


def _require(d, key, where, types):
    if key not in d:
        raise SchemaError(f"{where}: missing field {key!r}")
    if not isinstance(d[key], types) or isinstance(d[key], bool):
        raise SchemaError(f"{where}.{key}: wrong type {type(d[key]).__name__}")
    return d[key]


def _numbers(v, n, where):
    if not isinstance(v, list) or len(v) != n or not all(
            isinstance(a, (int, float)) and not isinstance(a, bool) for a in v):
        raise SchemaError(f"{where}: expected a list of {n} numbers")
    return v


def dataset_from_dict(d, where="<data>"):
    if not isinstance(d, dict):
        raise SchemaError(f"{where}: top level must be an object")
    ver = _require(d, "schema_version", where, int)
    if ver != SCHEMA_VERSION:
        raise SchemaError(f"{where}.schema_version: unsupported version {ver}")
    tag = _require(d, "kind", where, str)
    wb = d.get("workspace_bound")
    try:
        kind = manifold(tag, wb)
    except KindUnknown as e:
        raise KindUnknown(f"{where}.kind: {e}") from None
    except ValueError as e:
        raise SchemaError(f"{where}.workspace_bound: {e}") from None
    dt = float(_require(d, "dt", where, (int, float)))
    if not dt > 0:
        raise SchemaError(f"{where}.dt: must be positive")
    frame = d.get("frame", BODY)
    if frame != BODY:
        raise SchemaError(f"{where}.frame: only body-frame velocities are stored, got {frame!r}")
    raw = _require(d, "trajectories", where, list)
    trajs = []
    for i, recs in enumerate(raw):
        w = f"{where}.trajectories[{i}]"
        if not isinstance(recs, list):
            raise SchemaError(f"{w}: expected a list of records")
        poses, vels, stamps = [], [], []
        for j, r in enumerate(recs):
            wr = f"{w}[{j}]"
            if not isinstance(r, dict):
                raise SchemaError(f"{wr}: expected an object")
            unknown = set(r) - {"pose", "vel", "t"}
            if unknown:
                raise SchemaError(f"{wr}: unknown field {sorted(unknown)[0]!r}")
            p = _numbers(r.get("pose"), kind.flat_size, f"{wr}.pose")
            x = kind.from_flat(np.array(p, dtype=float))
            try:
                kind.validate(x)
            except InvalidElement as e:
                raise SchemaError(f"{wr}.pose: {e}") from None
            poses.append(x)
            if "vel" in r:
                vels.append(_numbers(r["vel"], kind.dim, f"{wr}.vel"))
            if "t" in r:
                stamps.append(float(_numbers([r["t"]], 1, f"{wr}.t")[0]))
        if vels and len(vels) != len(poses):
            raise SchemaError(f"{w}: velocities present on some records only")
        if stamps:
            if len(stamps) != len(poses):
                raise SchemaError(f"{w}: timestamps present on some records only")
            gaps = np.diff(stamps)
            if np.any(np.abs(gaps - dt) > TIMESTAMP_TOL * dt):
                k = int(np.argmax(np.abs(gaps - dt)))
                raise SchemaError(f"{w}[{k + 1}].t: timestamps uneven beyond 1% of dt; resample first")
        if len(poses) < 3:
            raise SchemaError(f"{w}: needs at least 3 records, has {len(poses)}")
        trajs.append(Trajectory(np.stack(poses), np.array(vels, dtype=float) if vels else None))
    return TrajectoryDataset(kind, dt, tuple(trajs), str(d.get("source", "")))


def load_dataset(path):
    try:
        with open(path) as fh:
            d = json.load(fh)
    except json.JSONDecodeError as e:
        raise SchemaError(f"{path}:{e.lineno}:{e.colno}: invalid JSON ({e.msg})") from None
    return dataset_from_dict(d, where=str(path))


def bundled_path(name="spiral_s2.json"):
    return resources.files("liesvf").joinpath("data", name)


def load_bundled(name="spiral_s2.json"):
    with resources.as_file(bundled_path(name)) as p:
        return load_dataset(p)
