"""Synthetic few-shot task families.

Two families stand in for an image benchmark:

* ``sinusoid`` -- regression, ``y = a * sin(x + b)`` with a per-task
  amplitude ``a`` and phase ``b``; inputs uniform on [-5, 5].
* ``gaussian-blobs`` -- M-way classification; each task draws M cluster
  centres and places N training and 15 validation points around each.

Samplers are pure functions of ``(config, rng)``.  Use :func:`task_rng` to get
the generator for task ``index`` of a given pool; meta-train, meta-validation
and meta-test pools never share a seed.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

VAL_SHOTS = 15

POOLS = {"train": 0, "val": 1, "test": 2}


@dataclass
class TaskFamilyConfig:
    family: str = "sinusoid"
    M: int = 5
    N: int = 10
    input_dim: int = 1
    amplitude: tuple = (0.1, 5.0)
    phase: tuple = (0.0, math.pi)
    spread: float = 1.0
    center_scale: float = 3.0
    seed: int = 0

    def __post_init__(self):
        self.amplitude = tuple(float(a) for a in self.amplitude)
        self.phase = tuple(float(p) for p in self.phase)
        self.validate()

    def validate(self):
        if self.family not in ("sinusoid", "gaussian-blobs"):
            raise ValueError(f"unknown task family {self.family!r}")
        if self.N < 1:
            raise ValueError("N (shots) must be >= 1")
        if self.family == "sinusoid":
            if self.input_dim != 1:
                raise ValueError("sinusoid tasks have input_dim = 1")
            for name, (lo, hi) in (("amplitude", self.amplitude), ("phase", self.phase)):
                if hi < lo:
                    raise ValueError(f"{name} range ({lo}, {hi}) is reversed")
        else:
            if self.M < 2:
                raise ValueError("classification needs M >= 2 classes")
            if self.input_dim < 1:
                raise ValueError("input_dim must be positive")
            if self.spread < 0 or self.center_scale <= 0:
                raise ValueError("spread must be >= 0 and center_scale > 0")

    @property
    def task_kind(self):
        return "regression" if self.family == "sinusoid" else "classification"

    @property
    def output_dim(self):
        return 1 if self.family == "sinusoid" else self.M


@dataclass
class FewShotTask:
    """One task: disjoint training and validation splits.

    Regression labels have shape ``(n, 1)``; classification labels are
    integer class indices of shape ``(n,)``.  ``train_ids``/``val_ids`` are
    the record numbers each split was drawn from.
    """

    train_inputs: np.ndarray
    train_labels: np.ndarray
    val_inputs: np.ndarray
    val_labels: np.ndarray
    task_kind: str
    train_ids: np.ndarray = field(default=None, repr=False)
    val_ids: np.ndarray = field(default=None, repr=False)
    info: dict = field(default_factory=dict)

    def split(self, name):
        if name == "train":
            return self.train_inputs, self.train_labels
        if name == "val":
            return self.val_inputs, self.val_labels
        raise ValueError(f"unknown split {name!r}")


def task_rng(seed, pool, index):
    """Generator for task ``index`` of ``pool`` ('train', 'val' or 'test')."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), POOLS[pool], int(index)]))


def _as_rng(rng):
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def sinusoid_labels(x, amplitude, phase):
    return amplitude * np.sin(x + phase)


def sample_sinusoid_task(config, rng):
    if config.family != "sinusoid":
        raise ValueError(f"expected a sinusoid config, got {config.family!r}")
    rng = _as_rng(rng)
    a = rng.uniform(*config.amplitude)
    b = rng.uniform(*config.phase)
    n_trn, n_val = config.N, VAL_SHOTS
    x = rng.uniform(-5.0, 5.0, size=(n_trn + n_val, 1))
    y = sinusoid_labels(x, a, b)
    ids = np.arange(n_trn + n_val)
    return FewShotTask(
        train_inputs=x[:n_trn], train_labels=y[:n_trn],
        val_inputs=x[n_trn:], val_labels=y[n_trn:],
        task_kind="regression", train_ids=ids[:n_trn], val_ids=ids[n_trn:],
        info={"amplitude": a, "phase": b},
    )


def sample_classification_task(config, rng):
    if config.family != "gaussian-blobs":
        raise ValueError(f"expected a gaussian-blobs config, got {config.family!r}")
    rng = _as_rng(rng)
    M, N, dim = config.M, config.N, config.input_dim
    centers = rng.normal(0.0, config.center_scale, size=(M, dim))
    per_class = N + VAL_SHOTS
    noise = rng.normal(0.0, 1.0, size=(M, per_class, dim)) * config.spread
    points = centers[:, None, :] + noise
    labels = np.repeat(np.arange(M), per_class).reshape(M, per_class)
    ids = np.arange(M * per_class).reshape(M, per_class)
    return FewShotTask(
        train_inputs=points[:, :N].reshape(M * N, dim),
        train_labels=labels[:, :N].reshape(-1),
        val_inputs=points[:, N:].reshape(M * VAL_SHOTS, dim),
        val_labels=labels[:, N:].reshape(-1),
        task_kind="classification",
        train_ids=ids[:, :N].reshape(-1), val_ids=ids[:, N:].reshape(-1),
        info={"centers": centers},
    )


def sample_task(config, rng):
    if config.family == "sinusoid":
        return sample_sinusoid_task(config, rng)
    return sample_classification_task(config, rng)


def pool_task(config, pool, index):
    """Task ``index`` of a named pool, fully determined by ``config.seed``."""
    return sample_task(config, task_rng(config.seed, pool, index))


def dump_task_csv(task, path):
    """Write one row per record: split, x0..x{D-1}, label."""
    dim = task.train_inputs.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["split"] + [f"x{j}" for j in range(dim)] + ["label"])
        for name in ("train", "val"):
            xs, ys = task.split(name)
            for x, y in zip(xs, ys):
                label = repr(float(np.ravel(y)[0])) if task.task_kind == "regression" else str(int(y))
                writer.writerow([name] + [repr(float(v)) for v in x] + [label])
