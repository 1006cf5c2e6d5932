"""Outer meta-learning loop, evaluation and checkpoints.

The prior ``theta`` is a dict of named arrays: ``dual_init`` (the dual
initial point, read as the primal initial point for ``maml`` and
``metasgd``) plus ``map.<name>`` for every parameter of the map.  One outer
step adapts every task of a mini-batch with the solver matching the method,
differentiates the validation loss through the whole unrolled solve, and
takes a plain SGD step scaled by ``T / |batch|``.
"""

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import model
from .inner import DivergenceError, InnerConfig, gd_adapt, md_adapt, pgd_adapt, train_objective
from .mirror_map import BlockIaf, DiagonalLinear, Identity, from_name, map_inverse

logger = logging.getLogger(__name__)

METHODS = ("maml", "metasgd", "mirror")
_MAP_FOR_METHOD = {"maml": Identity, "metasgd": DiagonalLinear, "mirror": BlockIaf}
# smallest MetaSGD preconditioner entry allowed after an outer step
PRECOND_FLOOR = 1e-6

CHECKPOINT_FORMAT = "mirrormeta-checkpoint/1"


class AllDivergedError(FloatingPointError):
    def __init__(self, iteration=None):
        self.iteration = iteration
        where = "" if iteration is None else f" at outer iteration {iteration}"
        super().__init__(f"every task in the batch diverged{where}")


@dataclass
class MetaParams:
    dual_init: np.ndarray
    map_kind: object
    method_tag: str

    def __post_init__(self):
        if self.method_tag not in METHODS:
            raise ValueError(f"unknown method {self.method_tag!r}; expected one of {METHODS}")
        if not isinstance(self.map_kind, _MAP_FOR_METHOD[self.method_tag]):
            raise ValueError(f"method {self.method_tag} needs a {_MAP_FOR_METHOD[self.method_tag].__name__} map")
        self.dual_init = np.array(self.dual_init, dtype=np.float64)
        if isinstance(self.map_kind, BlockIaf) and self.map_kind.partition.d != self.dual_init.size:
            raise ValueError("dual_init length does not match the map partition")
        if isinstance(self.map_kind, DiagonalLinear) and self.map_kind.p.size != self.dual_init.size:
            raise ValueError("dual_init length does not match the preconditioner")

    @classmethod
    def init(cls, method, spec, rng):
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        phi0 = model.init_params(spec, rng)
        if method == "maml":
            return cls(phi0, Identity(), method)
        if method == "metasgd":
            return cls(phi0, DiagonalLinear(np.ones_like(phi0)), method)
        if method == "mirror":
            partition = model.partition_by_layer(spec)
            kind = BlockIaf.init(partition, rng)
            # start from the same primal point as the other methods
            return cls(map_inverse(kind, partition, phi0), kind, method)
        raise ValueError(f"unknown method {method!r}")

    def theta(self):
        out = {"dual_init": self.dual_init}
        for k, v in self.map_kind.params.items():
            out["map." + k] = v
        return out

    def with_theta(self, theta):
        map_params = {k[4:]: v for k, v in theta.items() if k.startswith("map.")}
        kind = self.map_kind.with_params(map_params) if map_params else self.map_kind
        return MetaParams(theta["dual_init"], kind, self.method_tag)

    @property
    def partition(self):
        return getattr(self.map_kind, "partition", None)


@dataclass
class MetaConfig:
    R: int = 2000
    beta: float = 1e-3
    batch_size: int = 4
    T: int = 4
    inner: InnerConfig = field(default_factory=InnerConfig)
    eval_tasks: int = 1000
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if isinstance(self.inner, dict):
            self.inner = InnerConfig(**self.inner)
        if self.R < 0 or self.beta < 0 or self.batch_size < 1 or self.T < 1 or self.eval_tasks < 1:
            raise ValueError("R, beta must be >= 0; batch_size, T, eval_tasks must be positive")
        if self.batch_size > self.T:
            raise ValueError("batch_size cannot exceed the task pool size T")


# ------------------------------------------------------------------ adaptation

def adapt(params, task, spec, inner, graph=None, leaves=None):
    """Run the method's inner solver on ``task``'s training split.

    ``leaves`` maps theta names to Vars of ``graph``; when omitted they are
    created as constants.  Returns ``(AdaptResult, leaves)``.
    """
    graph = ad.Graph() if graph is None else graph
    if leaves is None:
        leaves = {k: graph.constant(v) for k, v in params.theta().items()}
    init = leaves["dual_init"]
    bound = {k[4:]: v for k, v in leaves.items() if k.startswith("map.")}
    objective = train_objective(spec, task)
    tag = params.method_tag
    if tag == "maml":
        res = gd_adapt(init, objective, inner)
    elif tag == "metasgd":
        res = pgd_adapt(init, bound["p"], objective, inner)
    else:
        res = md_adapt(init, params.map_kind, params.partition, objective, inner, bound=bound)
    return res, leaves


def task_hypergradient(params, task, spec, inner):
    """Validation loss after adaptation and its gradient for every theta entry."""
    graph = ad.Graph()
    inner = InnerConfig(inner.K, inner.alpha, record_trace=False, differentiable=True)
    res, leaves = adapt(params, task, spec, inner, graph)
    val_x, val_y = task.split("val")
    val_loss = model.loss(spec, res.adapted, val_x, val_y)
    if not np.isfinite(val_loss.value):
        raise DivergenceError(inner.K, "validation loss")
    names = list(leaves)
    grads = graph.grad(val_loss, [leaves[n] for n in names])
    out = {n: g.value for n, g in zip(names, grads)}
    if not all(np.isfinite(g).all() for g in out.values()):
        raise DivergenceError(inner.K, "hypergradient")
    return val_loss.item(), out


def validation_loss(params, task, spec, inner):
    """Validation loss after adaptation, without the hypergradient."""
    inner = InnerConfig(inner.K, inner.alpha, record_trace=False, differentiable=False)
    res, _ = adapt(params, task, spec, inner)
    return model.loss(spec, res.adapted, *task.split("val")).item()


def meta_step(params, batch, cfg, spec):
    """One outer SGD step; returns ``(new_params, mean validation loss)``."""
    if not batch:
        raise ValueError("meta_step needs a nonempty batch")

    def one(task):
        try:
            return task_hypergradient(params, task, spec, cfg.inner)
        except (DivergenceError, ad.NonFiniteError) as exc:
            logger.warning("skipping diverged task: %s", exc)
            return None

    if cfg.workers > 1 and len(batch) > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(one, batch))
    else:
        results = [one(t) for t in batch]
    ok = [r for r in results if r is not None]
    if not ok:
        raise AllDivergedError()
    theta = params.theta()
    total = {k: np.zeros_like(v) for k, v in theta.items()}
    for _, grads in ok:
        for k, g in grads.items():
            total[k] += g
    scale = cfg.beta * cfg.T / len(ok)
    new_theta = {k: theta[k] - scale * total[k] for k in theta}
    if params.method_tag == "metasgd":
        new_theta["map.p"] = np.maximum(new_theta["map.p"], PRECOND_FLOOR)
    mean_loss = sum(v for v, _ in ok) / len(ok)
    return params.with_theta(new_theta), mean_loss


def meta_train(init, sampler, cfg, spec, sink=None):
    """Run ``cfg.R`` outer steps.

    ``sampler(index)`` returns meta-training task number ``index``.  The pool
    is virtual: every batch takes ``batch_size`` fresh indices, and ``cfg.T``
    only enters through the ``T / |batch|`` gradient scale.  ``sink(r,
    mean_val_loss)`` is called after every step.
    """
    params = init
    for r in range(1, cfg.R + 1):
        first = (r - 1) * cfg.batch_size
        batch = [sampler(first + b) for b in range(cfg.batch_size)]
        try:
            params, loss = meta_step(params, batch, cfg, spec)
        except AllDivergedError:
            raise AllDivergedError(r) from None
        if sink is not None:
            sink(r, loss)
    return params


# ------------------------------------------------------------------ evaluation

@dataclass
class EvalReport:
    metric: str                 # "mse" or "accuracy"
    values: np.ndarray          # per-task metric on the validation split
    val_losses: np.ndarray
    loss_trace: np.ndarray      # mean L(phi^(k); D^trn), k = 0..K
    grad_norm_trace: np.ndarray
    diverged: list

    @property
    def mean(self):
        return float(np.mean(self.values)) if len(self.values) else math.nan

    @property
    def half_width(self):
        n = len(self.values)
        if n < 2:
            return 0.0
        return float(1.96 * np.std(self.values, ddof=1) / math.sqrt(n))

    def summary(self):
        if self.metric == "accuracy":
            return f"accuracy {100 * self.mean:.2f} ± {100 * self.half_width:.2f}%"
        return f"mse {self.mean:.6f} ± {self.half_width:.6f}"


def evaluate(params, tasks, inner, spec):
    """Adapt to each task's training split and score its validation split."""
    if not tasks:
        raise ValueError("evaluate needs at least one task")
    inner = InnerConfig(inner.K, inner.alpha, record_trace=True, differentiable=False)
    metric = "accuracy" if spec.head == "softmax" else "mse"
    values, val_losses, losses, norms, diverged = [], [], [], [], []
    for i, task in enumerate(tasks):
        try:
            res, _ = adapt(params, task, spec, inner)
            val_x, val_y = task.split("val")
            pred = model.forward(spec, res.adapted, val_x)
            vloss = model.loss(spec, res.adapted, val_x, val_y).item()
        except (DivergenceError, ad.NonFiniteError) as exc:
            diverged.append((i, str(exc)))
            continue
        if not math.isfinite(vloss):
            diverged.append((i, "non-finite validation loss"))
            continue
        if metric == "accuracy":
            values.append(float(np.mean(np.argmax(pred.value, axis=1) == val_y)))
        else:
            values.append(vloss)
        val_losses.append(vloss)
        losses.append(res.losses)
        norms.append(res.grad_norms)
    K1 = inner.K + 1
    return EvalReport(
        metric=metric,
        values=np.array(values),
        val_losses=np.array(val_losses),
        loss_trace=np.mean(losses, axis=0) if losses else np.full(K1, math.nan),
        grad_norm_trace=np.mean(norms, axis=0) if norms else np.full(K1, math.nan),
        diverged=diverged,
    )


# ------------------------------------------------------------------ checkpoints

def _manifest_path(path):
    return Path(path).with_suffix(".json")


def save_checkpoint(path, params, spec, cfg, extra=None):
    """Write ``path`` (npz arrays) and a JSON manifest next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    theta = params.theta()
    partition = params.partition or model.partition_by_layer(spec)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "method_tag": params.method_tag,
        "map_kind": params.map_kind.name,
        "seed_dim": getattr(params.map_kind, "seed_dim", None),
        "mlp": {"layer_sizes": list(spec.layer_sizes), "head": spec.head},
        "partition_sizes": partition.sizes,
        "meta_config": asdict(cfg),
        "arrays": sorted(theta),
    }
    if extra:
        manifest.update(extra)
    with open(path, "wb") as fh:
        np.savez(fh, **theta)
    _manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_checkpoint(path):
    """Returns ``(MetaParams, MlpSpec, manifest)``."""
    path = Path(path)
    manifest = json.loads(_manifest_path(path).read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
    with np.load(path, allow_pickle=False) as data:
        theta = {k: data[k] for k in data.files}
    if sorted(theta) != manifest["arrays"]:
        raise ValueError(f"{path}: arrays do not match the manifest")
    spec = model.MlpSpec(tuple(manifest["mlp"]["layer_sizes"]), manifest["mlp"]["head"])
    partition = model.partition_by_layer(spec)
    if partition.sizes != manifest["partition_sizes"]:
        raise ValueError(f"{path}: partition sizes do not match the MLP")
    map_params = {k[4:]: v for k, v in theta.items() if k.startswith("map.")}
    kwargs = {"seed_dim": manifest["seed_dim"]} if manifest.get("seed_dim") else {}
    kind = from_name(manifest["map_kind"], partition, map_params, **kwargs)
    params = MetaParams(theta["dual_init"], kind, manifest["method_tag"])
    return params, spec, manifest
