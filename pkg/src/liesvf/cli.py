"""Command-line driver: ``liesvf {train,eval,gen-data,export-field,demo-arm}``.

Exit codes: 0 success, 1 usage or validation error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import os
import secrets
import sys

import numpy as np

from . import data_io, kinematics_demo as kd, rollout_eval as re_
from .errors import NoConvergence, NonFiniteLoss, SingularJacobian, SvfError
from .lie_core import manifold
from .bounded_flow import FlowModel
from .msvf import MsvfModel
from .trainer import TrainConfig, bc_train

CONFIG_ENV = "LIESVF_CONFIG"
CKPT_SCHEMA = 1

# section -> key -> (parser, default)
_LIST = lambda s: tuple(float(v) for v in str(s).replace(",", " ").split())
_INTS = lambda s: tuple(int(v) for v in str(s).replace(",", " ").split())
_OPT_FLOAT = lambda s: None if str(s).strip().lower() in ("", "none") else float(s)

SCHEMA = {
    "model": {
        "kind": (str, "S2"), "workspace_bound": (_OPT_FLOAT, None), "hidden": (_INTS, (64, 64)),
        "steps": (int, 16), "gain": (float, 1.0), "pullback": (str, "jacobian"),
        "output_scale": (float, 0.1),
    },
    "train": {
        "iterations": (int, 5000), "batch_size": (int, 128), "learning_rate": (float, 1e-3),
        "optimizer": (str, "adam"), "loss_log_every": (int, 100), "eval_size": (int, 1024),
    },
    "rollout": {
        "dt": (float, 0.01), "horizon": (int, 2000), "eps_goal": (float, 0.05), "n_starts": (int, 100),
    },
    "data": {
        "n_demos": (int, 3), "points": (int, 200), "scale": (float, 1.0), "duration": (float, 4.0),
        "horizon": (int, 300),
    },
    "arm": {
        "lengths": (_LIST, (0.2, 0.2, 0.2, 0.2, 0.2)), "lower": (_LIST, ()), "upper": (_LIST, ()),
        "control_rate": (float, 100.0), "damping": (float, 0.01), "eps_goal": (float, 0.05),
        "max_steps": (int, 2000), "q0": (_LIST, ()),
    },
}


class UsageError(Exception):
    pass


class _Help(argparse.ArgumentDefaultsHelpFormatter):
    def _get_help_string(self, action):
        if action.default is None or action.default is argparse.SUPPRESS:
            return action.help
        return super()._get_help_string(action)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def load_config(path):
    """Merged configuration: defaults overlaid with an INI file; unknown keys are errors."""
    cfg = {sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()}
    if path is None:
        return cfg
    if not os.path.isfile(path):
        raise UsageError(f"config file not found: {path}")
    cp = configparser.ConfigParser()
    try:
        cp.read(path)
    except configparser.Error as e:
        raise UsageError(f"{path}: {e}") from None
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise UsageError(f"{path}: unknown section [{sec}]")
        for key, raw in cp.items(sec):
            if key not in SCHEMA[sec]:
                raise UsageError(f"{path}: unknown key {key!r} in [{sec}]")
            try:
                cfg[sec][key] = SCHEMA[sec][key][0](raw)
            except ValueError:
                raise UsageError(f"{path}: bad value for {sec}.{key}: {raw!r}") from None
    return cfg


def _config_path(args):
    return getattr(args, "config", None) or os.environ.get(CONFIG_ENV)


def _override(cfg, sec, key, val):
    if val is not None:
        cfg[sec][key] = val


def _jsonable(cfg):
    return json.loads(json.dumps(cfg, default=list))


def _seed(args):
    if args.seed is not None:
        return args.seed
    s = secrets.randbelow(2**31)
    print(f"liesvf: no --seed given, using seed {s}", file=sys.stderr)
    return s


def _kind(cfg):
    return manifold(cfg["model"]["kind"], cfg["model"]["workspace_bound"])


def _require_file(path):
    if not os.path.isfile(path):
        raise UsageError(f"file not found: {path}")


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model, path, config=None, extra=None):
    k = model.kind
    d = {
        "schema_version": CKPT_SCHEMA, "kind": k.tag, "workspace_bound": k.workspace_bound,
        "hidden": list(model.flow.hidden), "steps": model.flow.steps, "gain": model.gain,
        "pullback": model.pullback,
        "target": [float(v) for v in np.ravel(k.to_flat(model.target))],
        "basis": None if model.basis is None else [[float(v) for v in r] for r in model.basis],
        "params": [float(v) for v in model.flow.params],
        "config": config or {}, **(extra or {}),
    }
    with open(path, "w") as fh:
        json.dump(d, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path):
    _require_file(path)
    try:
        with open(path) as fh:
            d = json.load(fh)
        if d.get("schema_version") != CKPT_SCHEMA:
            raise UsageError(f"{path}: unsupported checkpoint schema {d.get('schema_version')!r}")
        k = manifold(d["kind"], d.get("workspace_bound"))
        flow = FlowModel(k, np.array(d["params"], dtype=float), tuple(d["hidden"]), int(d["steps"]))
        basis = None if d.get("basis") is None else np.array(d["basis"], dtype=float)
        target = k.from_flat(np.array(d["target"], dtype=float))
        return MsvfModel(flow, target, float(d["gain"]), basis, d.get("pullback", "jacobian"))
    except (KeyError, TypeError, json.JSONDecodeError) as e:
        raise UsageError(f"{path}: malformed checkpoint ({e})") from None


# ---------------------------------------------------------------------------
# commands


def cmd_train(args):
    cfg = load_config(_config_path(args))
    _require_file(args.data)
    for key in ("iterations", "batch_size", "learning_rate"):
        _override(cfg, "train", key, getattr(args, key))
    seed = _seed(args)
    ds = data_io.load_dataset(args.data)
    cfg["model"]["kind"] = ds.kind.tag
    cfg["model"]["workspace_bound"] = ds.kind.workspace_bound
    target, spread = data_io.extract_target(ds)
    m = cfg["model"]
    rng = np.random.default_rng(seed)
    flow = FlowModel.init(ds.kind, rng, m["hidden"], m["steps"], m["output_scale"])
    init = MsvfModel(flow, target, m["gain"], pullback=m["pullback"])
    t = cfg["train"]
    log_path = args.log or args.out + ".log.jsonl"
    tc = TrainConfig(iterations=t["iterations"], batch_size=min(t["batch_size"], len(ds.samples()[1]) or 1),
                     learning_rate=t["learning_rate"], optimizer=t["optimizer"], seed=seed,
                     loss_log_every=t["loss_log_every"], eval_size=t["eval_size"], log_path=log_path)
    model, report = bc_train(ds, tc, init)
    effective = {**_jsonable(cfg), "seed": seed, "data": args.data}
    save_checkpoint(model, args.out, effective, {
        "train": {"best_loss": report.best_loss, "best_iteration": report.best_iteration,
                  "final_loss": report.final_loss, "target_spread": spread,
                  "update": "gradient descent"}})
    print(f"trained {t['iterations']} iterations, best loss {report.best_loss:.6g}", file=sys.stderr)
    return 0


def cmd_eval(args):
    cfg = load_config(_config_path(args))
    model = load_checkpoint(args.ckpt)
    _require_file(args.data)
    ds = data_io.load_dataset(args.data)
    if ds.kind != model.kind:
        raise UsageError(f"checkpoint kind {model.kind.tag} does not match data kind {ds.kind.tag}")
    _override(cfg, "rollout", "n_starts", args.starts)
    _override(cfg, "rollout", "dt", args.dt)
    _override(cfg, "rollout", "horizon", args.horizon)
    _override(cfg, "rollout", "eps_goal", args.eps)
    seed = _seed(args)
    rc = re_.RolloutConfig(seed=seed, **cfg["rollout"])
    report = re_.evaluate(model, ds, rc)
    report.config = {**_jsonable(cfg), "seed": seed, "ckpt": args.ckpt, "data": args.data}
    sys.stdout.write(report.to_json() + "\n")
    return 0


def cmd_gen_data(args):
    cfg = load_config(_config_path(args))
    if args.n < 1:
        raise UsageError("--n must be at least 1 (empty datasets are not written)")
    seed = _seed(args)
    d = cfg["data"]
    kind_tag = args.kind.upper()
    shape = args.shape
    if shape in data_io.SHAPES or shape == "corpus":
        if kind_tag != "S2":
            raise UsageError("shape corpus datasets are S2 only")
        names = data_io.SHAPES[:3] if shape == "corpus" else (shape,)
        ds = data_io.shape_dataset(names, n_demos=args.n, n=d["points"], scale=d["scale"],
                                   seed=seed, duration=d["duration"])
    elif shape == "synth":
        wb = args.workspace_bound if args.workspace_bound is not None else cfg["model"]["workspace_bound"]
        if kind_tag.startswith("SE") and wb is None:
            wb = 1.0
        k = manifold(kind_tag, wb)
        rng = np.random.default_rng(seed)
        gt = MsvfModel(FlowModel.init(k, rng, cfg["model"]["hidden"], cfg["model"]["steps"], 1.0),
                       k.identity(), cfg["model"]["gain"])
        ds = data_io.synth_demos(gt, args.n, d["horizon"], cfg["rollout"]["dt"], seed)
    elif shape == "reach":
        if kind_tag != "SE2":
            raise UsageError("reach demonstrations are SE2 only")
        k = manifold("SE2", args.workspace_bound or 4.0)
        ds = arm_reach_dataset(k, cfg, args.n, seed)
    else:
        raise UsageError(f"unknown shape {shape!r}")
    effective = {**_jsonable(cfg), "seed": seed, "kind": kind_tag, "shape": shape, "n": args.n}
    data_io.save_dataset(ds, args.out, effective)
    return 0


def _chain(cfg):
    a = cfg["arm"]
    return kd.PlanarChain(a["lengths"], a["lower"] or None, a["upper"] or None)


def arm_target(chain):
    """A fixed reachable end-effector pose for the arm demo."""
    return kd.fk(chain, np.array([0.3, 0.5, -0.4, 0.6, 0.2])[: chain.n_links])


def arm_reach_dataset(kind, cfg, n, seed):
    chain = _chain(cfg)
    rng = np.random.default_rng(seed)
    starts = [kd.fk(chain, q) for q in kd.random_reachable(chain, rng, n)]
    return data_io.se2_scripted_demos(kind, arm_target(chain), starts, n=cfg["data"]["points"],
                                      duration=cfg["data"]["duration"])


def _write_rows(fh, header, rows):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([re_._fmt(v) for v in r])


def cmd_export_field(args):
    model = load_checkpoint(args.ckpt)
    try:
        spec = re_.GridSpec.parse(args.grid)
    except ValueError as e:
        raise UsageError(f"bad --grid: {e}") from None
    header, rows = re_.export_field_grid(model, spec)
    with open(args.out, "w") as fh:
        fh.write("# config: " + json.dumps({"ckpt": args.ckpt, "grid": args.grid}, sort_keys=True) + "\n")
        _write_rows(fh, header, rows)
    return 0


def cmd_demo_arm(args):
    cfg = load_config(_config_path(args))
    model = load_checkpoint(args.ckpt)
    chain = _chain(cfg)
    a = cfg["arm"]
    cc = kd.ControlConfig(a["control_rate"], a["damping"], a["eps_goal"], a["max_steps"])
    q0 = np.array(a["q0"]) if a["q0"] else np.zeros(chain.n_links)
    if args.q0 is not None:
        q0 = np.array(args.q0, dtype=float)
    if q0.shape != (chain.n_links,):
        raise UsageError(f"q0 needs {chain.n_links} joint angles")
    ep = kd.run_episode(chain, q0, model, cc)
    k = model.kind
    header = ["step"] + [f"q{i}" for i in range(chain.n_links)] + ["angle", "x", "y"]
    flat = k.to_flat(ep.poses)
    rows = np.column_stack([np.arange(len(ep.joints)), ep.joints, flat])
    with open(args.out, "w", newline="") as fh:
        fh.write("# outcome: " + ep.outcome + "\n")
        fh.write("# config: " + json.dumps(_jsonable(cfg), sort_keys=True) + "\n")
        _write_rows(fh, header, rows)
    print(ep.outcome, file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------


def _ovr(sec, key):
    return f"override {sec}.{key} (config default {SCHEMA[sec][key][1]})"


def build_parser():
    fmt = _Help
    p = _Parser(prog="liesvf", description="Stable vector fields on Lie groups and S2.", formatter_class=fmt)
    p.add_argument("--jobs", type=int, default=1, help="worker cap (computation is single-threaded)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config=True, seed=True):
        if config:
            sp.add_argument("--config", default=None, help=f"INI config file (default: ${CONFIG_ENV})")
        if seed:
            sp.add_argument("--seed", type=int, default=None, help="random seed (random and logged if omitted)")

    t = sub.add_parser("train", help="behavioural cloning from a dataset", formatter_class=fmt)
    t.add_argument("--data", required=True, help="dataset JSON")
    t.add_argument("--out", required=True, help="checkpoint JSON to write")
    t.add_argument("--log", default=None, help="training log (default: OUT.log.jsonl)")
    t.add_argument("--iterations", type=int, default=None, help=_ovr("train", "iterations"))
    t.add_argument("--batch-size", dest="batch_size", type=int, default=None, help=_ovr("train", "batch_size"))
    t.add_argument("--learning-rate", dest="learning_rate", type=float, default=None,
                   help=_ovr("train", "learning_rate"))
    common(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="metrics report as JSON on stdout", formatter_class=fmt)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--starts", type=int, default=None, help=_ovr("rollout", "n_starts"))
    e.add_argument("--dt", type=float, default=None, help=_ovr("rollout", "dt"))
    e.add_argument("--horizon", type=int, default=None, help=_ovr("rollout", "horizon"))
    e.add_argument("--eps", type=float, default=None, help=_ovr("rollout", "eps_goal"))
    common(e)
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gen-data", help="write a demonstration dataset", formatter_class=fmt)
    g.add_argument("--kind", default="S2", help="manifold kind")
    g.add_argument("--shape", default="spiral",
                   help="spiral|s_curve|hook|zigzag|corpus (S2), synth (any kind), reach (SE2)")
    g.add_argument("--n", type=int, default=3, help="demonstrations per shape / trajectories")
    g.add_argument("--workspace-bound", dest="workspace_bound", type=float, default=None)
    g.add_argument("--out", required=True)
    common(g)
    g.set_defaults(func=cmd_gen_data)

    x = sub.add_parser("export-field", help="field on a grid as CSV", formatter_class=fmt)
    x.add_argument("--ckpt", required=True)
    x.add_argument("--grid", default="21", help="points per axis, e.g. '21' or 'n=21,n2=11'")
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export_field)

    a = sub.add_parser("demo-arm", help="planar arm episode as CSV", formatter_class=fmt)
    a.add_argument("--ckpt", required=True, help="SE2 checkpoint")
    a.add_argument("--out", required=True)
    a.add_argument("--q0", type=float, nargs="+", default=None, help="start joint angles (default straight arm)")
    common(a, seed=False)
    a.set_defaults(func=cmd_demo_arm)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        return args.func(args)
    except UsageError as e:
        print(f"liesvf: error: {e}", file=sys.stderr)
        return 1
    except (NonFiniteLoss, SingularJacobian, NoConvergence) as e:
        print(f"liesvf: numerical failure: {e}", file=sys.stderr)
        return 2
    except (SvfError, ValueError, OSError) as e:
        print(f"liesvf: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
