"""Behavioural cloning of the flow parameters from demonstrated body velocities."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff_nn as ad
from .errors import EmptyDataset, FrameMismatch, KindMismatch, NonFiniteLoss
from .msvf import MsvfModel, body_velocity, chart_coords, pullback_matrices

BODY = "body"


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 5000
    batch_size: int = 128
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    loss_log_every: int = 100
    eval_size: int = 1024           # fixed subset used to pick the best parameters
    log_path: str | None = None

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")
        if self.loss_log_every < 1:
            raise ValueError("loss_log_every must be positive")


@dataclass
class TrainReport:
    losses: list = field(default_factory=list)        # batch loss per iteration
    grad_norms: list = field(default_factory=list)
    eval_iterations: list = field(default_factory=list)
    eval_losses: list = field(default_factory=list)   # loss on the fixed subset
    final_loss: float = float("nan")
    best_loss: float = float("nan")
    best_iteration: int = -1
    wall_time: float = field(default=0.0, compare=False)

    def to_dict(self):
        return {
            "losses": self.losses, "grad_norms": self.grad_norms,
            "eval_iterations": self.eval_iterations, "eval_losses": self.eval_losses,
            "final_loss": self.final_loss, "best_loss": self.best_loss,
            "best_iteration": self.best_iteration,
        }


@dataclass(frozen=True)
class SampleBatch:
    """Stacked points (N, *elem_shape), body velocities (N, d) and frame tags."""

    points: np.ndarray
    velocities: np.ndarray
    frames: tuple = ()

    def __len__(self):
        return len(self.velocities)


def as_batch(kind, batch):
    """Normalize a list of ``(x, v)`` / ``(x, v, frame)`` tuples or a SampleBatch."""
    if isinstance(batch, SampleBatch):
        pts, vel, frames = batch.points, batch.velocities, batch.frames
    else:
        batch = list(batch)
        if not batch:
            raise EmptyDataset("empty batch")
        pts = np.stack([np.asarray(b[0], dtype=float) for b in batch])
        vel = np.stack([np.asarray(b[1], dtype=float) for b in batch])
        frames = tuple(b[2] if len(b) > 2 else BODY for b in batch)
    if len(vel) == 0:
        raise EmptyDataset("empty batch")
    bad = [f for f in frames if f != BODY]
    if bad:
        raise FrameMismatch(f"velocities must be in the body frame, got {bad[0]!r}")
    pts = np.asarray(pts, dtype=float)
    if pts.shape[1:] != kind.elem_shape:
        raise KindMismatch(f"batch points are not {kind.tag} elements")
    vel = np.asarray(vel, dtype=float)
    if vel.shape != (len(pts), kind.dim):
        raise KindMismatch(f"velocities must have shape (N, {kind.dim})")
    return pts, vel


def bc_loss(model: MsvfModel, batch):
    """Mean squared body-velocity error of the field on the batch."""
    from .msvf import eval_field
    pts, vel = as_batch(model.kind, batch)
    err = vel - eval_field(model, pts)
    return float(np.mean(np.sum(err**2, axis=-1)))


class _Problem:
    """Per-sample constants (chart points, pullbacks) and the taped loss."""

    def __init__(self, model, pts, vel):
        self.model = model
        xhat, cut = chart_coords(model, pts)
        self.xhat = xhat
        self.A = pullback_matrices(model, xhat)
        self.keep = (~cut).astype(float)[:, None]
        self.vel = vel

    def loss(self, params, idx):
        pred = body_velocity(self.model, self.xhat[idx], self.A[idx], params)
        err = self.vel[idx] - pred * self.keep[idx]
        return ad.mean(ad.sum_(err * err, axis=-1))

    def loss_and_grad(self, theta, idx):
        P = ad.Var(theta)
        L = self.loss(P, idx)
        g = ad.grad(L, [P])[0]
        return float(L.value), g

    def value(self, theta, idx):
        return float(self.loss(theta, idx))


class _Adam:
    def __init__(self, cfg, n):
        self.cfg, self.m, self.v, self.t = cfg, np.zeros(n), np.zeros(n), 0

    def step(self, theta, g):
        c = self.cfg
        self.t += 1
        self.m = c.beta1 * self.m + (1 - c.beta1) * g
        self.v = c.beta2 * self.v + (1 - c.beta2) * g * g
        mh = self.m / (1 - c.beta1**self.t)
        vh = self.v / (1 - c.beta2**self.t)
        return theta - c.learning_rate * mh / (np.sqrt(vh) + c.eps)


class _Sgd:
    def __init__(self, cfg, n):
        self.cfg = cfg

    def step(self, theta, g):
        return theta - self.cfg.learning_rate * g


def bc_train(dataset, config: TrainConfig, init: MsvfModel, callback=None):
    """Gradient descent on the flow parameters; returns ``(best model, report)``.

    Batches are drawn uniformly with replacement from all samples of the
    dataset.  The best parameters are chosen by the loss on a fixed
    evaluation subset measured every ``loss_log_every`` iterations and at the
    end.  ``callback(iteration, model, loss)`` is called at those points.
    """
    if dataset.kind != init.kind:
        raise KindMismatch(f"dataset kind {dataset.kind.tag} does not match model kind {init.kind.tag}")
    pts, vel, frames = dataset.samples()
    if len(vel) == 0:
        raise EmptyDataset("dataset has no velocity samples")
    pts, vel = as_batch(init.kind, SampleBatch(pts, vel, frames))
    if config.batch_size > len(vel):
        raise ValueError(f"batch_size {config.batch_size} exceeds dataset size {len(vel)}")

    rng = np.random.default_rng(config.seed)
    prob = _Problem(init, pts, vel)
    n = len(vel)
    eval_idx = np.sort(rng.choice(n, size=min(config.eval_size, n), replace=False))
    theta = init.flow.params.copy()
    opt = (_Adam if config.optimizer == "adam" else _Sgd)(config, theta.size)
    report = TrainReport()
    log = open(config.log_path, "w") if config.log_path else None
    t0 = time.perf_counter()

    def checkpoint(it):
        L = prob.value(theta, eval_idx)
        if not np.isfinite(L):
            raise NonFiniteLoss(f"non-finite evaluation loss at iteration {it}", iteration=it)
        report.eval_iterations.append(it)
        report.eval_losses.append(L)
        if not report.best_loss <= L:
            report.best_loss, report.best_iteration = L, it
            checkpoint.best = theta.copy()
        if callback is not None:
            callback(it, init.with_params(theta), L)
        return L

    checkpoint.best = theta.copy()
    try:
        checkpoint(0)
        for it in range(1, config.iterations + 1):
            idx = rng.integers(0, n, size=config.batch_size)
            L, g = prob.loss_and_grad(theta, idx)
            gn = float(np.linalg.norm(g))
            if not (np.isfinite(L) and np.isfinite(gn)):
                raise NonFiniteLoss(f"non-finite loss at iteration {it}", iteration=it)
            report.losses.append(L)
            report.grad_norms.append(gn)
            # descent step (the update direction is -gradient)
            theta = opt.step(theta, g)
            if log is not None:
                log.write(json.dumps({"iteration": it, "loss": L, "grad_norm": gn}) + "\n")
            if it % config.loss_log_every == 0 or it == config.iterations:
                checkpoint(it)
    finally:
        if log is not None:
            log.close()
    report.final_loss = report.eval_losses[-1]
    report.wall_time = time.perf_counter() - t0
    return init.with_params(checkpoint.best), report
