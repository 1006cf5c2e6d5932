"""Differentiable K-step inner solvers: GD, diagonal PGD and dual-space mirror descent.

All three share one loop.  Gradients are taken with ``create_graph`` so the
adapted parameters stay differentiable with respect to the initialisation
and any map / preconditioner parameters bound into the graph.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import model
from . import mirror_map as mm


class DivergenceError(FloatingPointError):
    """Inner adaptation hit a non-finite loss or gradient."""

    def __init__(self, step, what="loss"):
        self.step = step
        super().__init__(f"non-finite {what} at inner step {step}")


@dataclass
class InnerConfig:
    K: int = 5
    alpha: float = 1e-2
    record_trace: bool = True
    # keep gradient nodes so the result can be differentiated again
    differentiable: bool = True

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")


@dataclass
class AdaptResult:
    adapted: ad.Var
    trace: list = field(default_factory=list)       # (loss, grad_norm) at phi^(k), k = 0..K
    trajectory: list = field(default_factory=list)  # phi^(k) values, k = 0..K

    @property
    def losses(self):
        return np.array([t[0] for t in self.trace])

    @property
    def grad_norms(self):
        return np.array([t[1] for t in self.trace])


def train_objective(spec, task, split="train"):
    """``phi -> L(phi; D^split)`` for a task."""
    inputs, labels = task.split(split)
    return lambda phi: model.loss(spec, phi, inputs, labels)


def _finite(var):
    return bool(np.isfinite(var.value).all())


def _run(x0, to_primal, step, objective, cfg):
    graph = x0.graph
    result = AdaptResult(adapted=None)
    x = x0
    for k in range(cfg.K):
        phi = to_primal(x)
        loss = objective(phi)
        if not _finite(loss):
            raise DivergenceError(k)
        (g,) = graph.grad(loss, [phi], create_graph=cfg.differentiable)
        if not _finite(g):
            raise DivergenceError(k, "gradient")
        result.trajectory.append(phi.value)
        result.trace.append((loss.item(), ad.norm(g)))
        x = step(x, g)
    phi = to_primal(x)
    if not _finite(phi):
        raise DivergenceError(cfg.K, "parameters")
    result.adapted = phi
    result.trajectory.append(phi.value)
    if cfg.record_trace:
        loss = objective(phi)
        if not _finite(loss):
            raise DivergenceError(cfg.K)
        (g,) = graph.grad(loss, [phi])
        result.trace.append((loss.item(), ad.norm(g)))
    return result


def gd_adapt(init, objective, cfg):
    """``phi <- phi - alpha * grad L(phi)``, K times, starting at ``init``."""
    alpha = cfg.alpha
    return _run(init, lambda x: x, lambda x, g: ad.sub(x, g * alpha), objective, cfg)


def pgd_adapt(init, precond, objective, cfg):
    """``phi <- phi - alpha * p * grad L(phi)`` with a positive diagonal ``p``.

    ``precond`` may be a Var (to differentiate through it) or an array.
    """
    p = precond if isinstance(precond, ad.Var) else init.graph.constant(precond)
    if p.shape != init.shape:
        raise ad.ShapeError("pgd_adapt", [init.shape, p.shape], "preconditioner length")
    if not np.all(p.value > 0):
        raise ValueError("preconditioner entries must be strictly positive")
    alpha = cfg.alpha
    return _run(init, lambda x: x, lambda x, g: ad.sub(x, ad.mul(p, g) * alpha), objective, cfg)


def md_adapt(dual_init, kind, partition, objective, cfg, bound=None):
    """Mirror descent run in the dual: ``z <- z - alpha * grad L(g(z))``, then ``phi = g(z^K)``.

    ``bound`` optionally maps the map's parameter names to Vars of the same
    graph so the result is differentiable with respect to them.
    """
    alpha = cfg.alpha
    if partition is not None and dual_init.shape != (partition.d,):
        raise ad.ShapeError("md_adapt", [dual_init.shape, (partition.d,)], "dual_init length vs partition")
    graph = dual_init.graph
    if not cfg.differentiable and isinstance(kind, mm.BlockIaf):
        # nothing will be differentiated through the map, so skip recording it
        numeric = kind if not bound else kind.with_params({k: v.value for k, v in bound.items()})
        to_primal = lambda z: graph.constant(numeric.evaluate(z.value, partition))
    else:
        to_primal = kind.bind(graph, bound)
    return _run(dual_init, to_primal, lambda z, g: ad.sub(z, g * alpha), objective, cfg)
