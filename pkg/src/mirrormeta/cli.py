"""Command-line front end: ``mirrormeta train|eval|diagnose``.

Configuration comes from a flat TOML file, overridden by ``MIRRORMETA_<KEY>``
environment variables, overridden in turn by command-line flags.  Every
output is CSV so any plotting tool can redraw the curves.

Exit codes: 0 success, 1 usage or config error, 2 numerical failure.
"""

import argparse
import csv
import logging
import math
import os
import re
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import meta, model, tasks
from .inner import InnerConfig
from .mirror_map import Identity
from .mirror_map import evaluate as evaluate_map

logger = logging.getLogger("mirrormeta")

ENV_PREFIX = "MIRRORMETA_"

DEFAULTS = {
    "method": "mirror",
    "family": "sinusoid",
    "M": 5,
    "N": 10,
    "input_dim": 1,
    "amplitude_min": 0.1,
    "amplitude_max": 5.0,
    "phase_min": 0.0,
    "phase_max": math.pi,
    "spread": 1.0,
    "center_scale": 3.0,
    "hidden": [40, 40],
    "K": 5,
    "alpha": 1e-2,
    "beta": 1e-3,
    "batch": 4,
    "R": 2000,
    "T": 4,
    "eval_tasks": 1000,
    "timing_tasks": 50,
    "seed": 0,
    "workers": 1,
    "out_dir": "runs",
}

# keys that must agree between a checkpoint and the config used to evaluate it
_MODEL_KEYS = ("method", "family", "M", "input_dim", "hidden")


class ConfigError(Exception):
    pass


class NumericalFailure(Exception):
    pass


# ------------------------------------------------------------------ config

def _key_line(text, key):
    pattern = re.compile(rf"^[ \t]*(?:{re.escape(key)}|\"{re.escape(key)}\")[ \t]*=", re.M)
    m = pattern.search(text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def _coerce(key, value, where):
    default = DEFAULTS[key]
    if isinstance(default, bool) or default is None:
        return value
    if isinstance(default, list):
        if isinstance(value, int) and not isinstance(value, bool):
            value = [value]
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{where}: {key} must be a list of integers")
        return list(value)
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: {key} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: {key} must be a number")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{where}: {key} must be a string")
    return value


def read_config_file(path):
    """Parsed and type-checked keys of a TOML config file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    out = {}
    for key, value in data.items():
        line = _key_line(text, key)
        where = f"{path}:{line}" if line else str(path)
        if key not in DEFAULTS:
            raise ConfigError(f"{where}: unknown key {key!r}")
        out[key] = _coerce(key, value, where)
    return out


def _parse_env_value(key, raw):
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    if isinstance(DEFAULTS[key], str) and not isinstance(value, str):
        value = raw
    return _coerce(key, value, f"environment {ENV_PREFIX}{key.upper()}")


def env_overrides(environ=None):
    environ = os.environ if environ is None else environ
    by_upper = {k.upper(): k for k in DEFAULTS}
    out = {}
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX) or name == "MIRRORMETA_DISABLE_NUMBA":
            continue
        key = by_upper.get(name[len(ENV_PREFIX):].upper())
        if key is None:
            raise ConfigError(f"environment {name}: unknown key")
        out[key] = _parse_env_value(key, raw)
    return out


@dataclass
class RunConfig:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    def family(self):
        v = self.values
        return tasks.TaskFamilyConfig(
            family=v["family"], M=v["M"], N=v["N"], input_dim=v["input_dim"],
            amplitude=(v["amplitude_min"], v["amplitude_max"]), phase=(v["phase_min"], v["phase_max"]),
            spread=v["spread"], center_scale=v["center_scale"], seed=v["seed"])

    def spec(self):
        return model.spec_for(self.family(), hidden=tuple(self.values["hidden"]))

    def inner(self):
        return InnerConfig(self.values["K"], self.values["alpha"])

    def meta(self):
        v = self.values
        return meta.MetaConfig(R=v["R"], beta=v["beta"], batch_size=v["batch"], T=v["T"],
                               inner=self.inner(), eval_tasks=v["eval_tasks"], seed=v["seed"],
                               workers=v["workers"])

    def validate(self):
        v = self.values
        if v["method"] not in meta.METHODS:
            raise ConfigError(f"method must be one of {', '.join(meta.METHODS)}, not {v['method']!r}")
        if v["workers"] < 1 or v["timing_tasks"] < 1:
            raise ConfigError("workers and timing_tasks must be positive")
        if v["seed"] < 0:
            raise ConfigError("seed must be non-negative")
        try:
            self.family()
            self.spec()
            self.meta()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self


def build_config(config_path=None, base=None, flags=None, environ=None):
    """Merge defaults, ``base`` (e.g. from a checkpoint), file, env and flags."""
    values = dict(DEFAULTS)
    explicit = {}
    if base:
        values.update({k: v for k, v in base.items() if k in DEFAULTS})
    if config_path is not None:
        explicit.update(read_config_file(config_path))
    explicit.update(env_overrides(environ))
    explicit.update({k: v for k, v in (flags or {}).items() if v is not None})
    values.update(explicit)
    return RunConfig(values).validate(), explicit


# ------------------------------------------------------------------ outputs

def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])


def _load(path, flags, config_path, environ):
    try:
        params, spec, manifest = meta.load_checkpoint(path)
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot load checkpoint {path}: {exc}") from None
    base = dict(manifest.get("run_config", {}))
    base["method"] = params.method_tag
    base["hidden"] = list(spec.layer_sizes[1:-1])
    cfg, explicit = build_config(config_path, base, flags, environ)
    clash = [k for k in _MODEL_KEYS if k in explicit and explicit[k] != base.get(k, explicit[k])]
    if clash or cfg.spec().layer_sizes != spec.layer_sizes or cfg.spec().head != spec.head:
        detail = ", ".join(f"{k}={explicit[k]!r} vs {base.get(k)!r}" for k in clash) or \
            f"layer sizes {cfg.spec().layer_sizes} vs {spec.layer_sizes}"
        raise ConfigError(f"checkpoint {path} does not match the config: {detail}")
    return params, spec, cfg


def _eval_tasks(cfg, count):
    family = cfg.family()
    return [tasks.pool_task(family, "test", i) for i in range(count)]


# ------------------------------------------------------------------ commands

def cmd_train(args, environ=None):
    if args.config is None:
        raise ConfigError("train needs --config PATH")
    cfg, _ = build_config(args.config, flags=_flag_values(args), environ=environ)
    family, spec, mcfg = cfg.family(), cfg.spec(), cfg.meta()
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    params = meta.MetaParams.init(cfg["method"], spec, cfg["seed"])
    history = []

    def sink(r, loss):
        history.append((r, loss))
        if r % 100 == 0 or r == mcfg.R:
            logger.info("iteration %d/%d  mean val loss %.6f", r, mcfg.R, loss)

    start = time.perf_counter()
    try:
        params = meta.meta_train(params, lambda i: tasks.pool_task(family, "train", i), mcfg, spec, sink)
    except meta.AllDivergedError as exc:
        write_csv(out / "train_loss.csv", ["r", "mean_val_loss"], history)
        raise NumericalFailure(str(exc)) from None
    logger.info("trained %s for %d iterations in %.1f s", cfg["method"], mcfg.R, time.perf_counter() - start)
    write_csv(out / "train_loss.csv", ["r", "mean_val_loss"], history)
    ckpt = out / "checkpoint.npz"
    meta.save_checkpoint(ckpt, params, spec, mcfg, extra={"run_config": cfg.values})
    print(f"wrote {ckpt}")
    return 0


def cmd_eval(args, environ=None):
    if len(args.checkpoint) != 1:
        raise ConfigError("eval takes exactly one --checkpoint")
    params, spec, cfg = _load(args.checkpoint[0], _flag_values(args), args.config, environ)
    inner = cfg.inner()
    report = meta.evaluate(params, _eval_tasks(cfg, cfg["eval_tasks"]), inner, spec)
    if not len(report.values):
        raise NumericalFailure("every evaluation task diverged")
    out = Path(cfg["out_dir"])
    rows = []
    ok = iter(zip(report.values, report.val_losses))
    failed = dict(report.diverged)
    for i in range(cfg["eval_tasks"]):
        if i in failed:
            rows.append((i, "nan", "nan"))
        else:
            value, vloss = next(ok)
            rows.append((i, float(value), float(vloss)))
    write_csv(out / "eval.csv", ["task", report.metric, "val_loss"], rows)
    print(f"{params.method_tag}: {report.summary()} over {len(report.values)} tasks "
          f"(meta-test step size alpha={inner.alpha:g}, same as training; K={inner.K})")
    if report.diverged:
        print(f"{len(report.diverged)} tasks diverged and were left out")
    return 0


def step_times(params, spec, task_list, inner, differentiable):
    """Median per-inner-step wall time of ``params``'s solver and of plain GD.

    Both solvers start from the same primal point and are timed alternately
    on every task so background load affects them alike.
    """
    cfg = InnerConfig(inner.K, inner.alpha, record_trace=False, differentiable=differentiable)
    start_point = evaluate_map(params.map_kind, params.partition, params.dual_init)
    primal = meta.MetaParams(start_point, Identity(), "maml")
    solver, gd = [], []
    for task in task_list:
        for target, bucket in ((primal, gd), (params, solver)):
            start = time.perf_counter()
            if differentiable:
                meta.task_hypergradient(target, task, spec, cfg)
            else:
                meta.adapt(target, task, spec, cfg)
            bucket.append((time.perf_counter() - start) / cfg.K)
    return float(np.median(solver)), float(np.median(gd))


def cmd_diagnose(args, environ=None):
    if not args.checkpoint:
        raise ConfigError("diagnose needs at least one --checkpoint")
    loaded = [_load(path, _flag_values(args), args.config, environ) for path in args.checkpoint]
    out = None
    timing_rows = []
    seen = {}
    for params, spec, cfg in loaded:
        out = Path(cfg["out_dir"])
        label = params.method_tag
        seen[label] = seen.get(label, 0) + 1
        if seen[label] > 1:
            label = f"{label}_{seen[label]}"
        inner = cfg.inner()
        report = meta.evaluate(params, _eval_tasks(cfg, cfg["eval_tasks"]), inner, spec)
        if not len(report.values):
            raise NumericalFailure(f"{label}: every task diverged")
        ks = range(inner.K + 1)
        write_csv(out / f"{label}_loss.csv", ["k", "mean_loss"], zip(ks, report.loss_trace))
        write_csv(out / f"{label}_grad_norm.csv", ["k", "mean_grad_norm"], zip(ks, report.grad_norm_trace))
        timing = _eval_tasks(cfg, cfg["timing_tasks"])
        for mode, differentiable in (("adapt", False), ("hypergradient", True)):
            t_solver, t_gd = step_times(params, spec, timing, inner, differentiable)
            timing_rows.append((label, mode, t_solver, t_gd, t_solver / t_gd))
        print(f"{label}: {report.summary()}; per-step time vs GD "
              f"{timing_rows[-2][4]:.3f}x (adapt), {timing_rows[-1][4]:.3f}x (with hypergradient)")
    write_csv(out / "timing.csv", ["method", "mode", "step_seconds", "gd_step_seconds", "ratio"], timing_rows)
    return 0


# ------------------------------------------------------------------ entry point

def _flag_values(args):
    return {"seed": args.seed, "workers": args.workers, "out_dir": args.out}


def build_parser():
    parser = argparse.ArgumentParser(prog="mirrormeta", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (("train", "meta-train and write a checkpoint"),
                           ("eval", "score a checkpoint on new tasks"),
                           ("diagnose", "convergence traces and timing for checkpoints")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", type=Path, help="TOML config file")
        if name != "train":
            p.add_argument("--checkpoint", type=Path, action="append", default=[],
                           help="checkpoint file (repeatable for diagnose)")
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int)
        p.add_argument("--out", help="output directory")
    return parser


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "diagnose": cmd_diagnose}


def main(argv=None, environ=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args, environ)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
