"""Task-specific MLP over a flat parameter vector, and its layer partition.

Layer ``l`` with ``n_in`` inputs and ``n_out`` outputs owns a contiguous slice
of the flat vector holding an ``(n_out, n_in + 1)`` row-major matrix whose last
column is the bias.  That matrix is also the block tensor the mirror map sees.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


class EmptySplitError(ValueError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: tuple
    head: str = "linear"  # "linear" (regression) or "softmax" (classification)

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        if any(s <= 0 for s in sizes):
            raise ValueError(f"layer sizes must be positive, got {sizes}")
        if self.head not in ("linear", "softmax"):
            raise ValueError(f"unknown head {self.head!r}")

    @property
    def n_layers(self):
        return len(self.layer_sizes) - 1

    @property
    def block_shapes(self):
        return [(o, i + 1) for i, o in zip(self.layer_sizes[:-1], self.layer_sizes[1:])]

    @property
    def n_params(self):
        return sum(r * c for r, c in self.block_shapes)

    def layer_slices(self):
        out, off = [], 0
        for r, c in self.block_shapes:
            out.append(slice(off, off + r * c))
            off += r * c
        return out


@dataclass(frozen=True)
class Partition:
    """Ordered disjoint index blocks covering ``0..d-1``.

    ``shapes[i]`` is the tensor shape block ``i`` is viewed as (defaults to a
    flat vector).
    """

    blocks: tuple
    shapes: tuple = None

    def __post_init__(self):
        blocks = tuple(np.asarray(b, dtype=np.int64).ravel() for b in self.blocks)
        object.__setattr__(self, "blocks", blocks)
        shapes = self.shapes
        if shapes is None:
            shapes = tuple((len(b),) for b in blocks)
        shapes = tuple(tuple(int(s) for s in sh) for sh in shapes)
        object.__setattr__(self, "shapes", shapes)
        if not blocks or any(b.size == 0 for b in blocks):
            raise ValueError("partition blocks must be nonempty")
        if len(shapes) != len(blocks) or any(int(np.prod(sh)) != b.size for sh, b in zip(shapes, blocks)):
            raise ValueError("block shapes do not match block sizes")
        allidx = np.concatenate(blocks)
        if not np.array_equal(np.sort(allidx), np.arange(allidx.size)):
            raise ValueError("blocks must be disjoint and cover 0..d-1")

    @property
    def d(self):
        return int(sum(b.size for b in self.blocks))

    @property
    def sizes(self):
        return [int(b.size) for b in self.blocks]

    def __len__(self):
        return len(self.blocks)


def partition_by_layer(spec):
    """One block per layer (weights and bias together), shallow to deep."""
    blocks = [np.arange(sl.start, sl.stop) for sl in spec.layer_slices()]
    return Partition(tuple(blocks), tuple(spec.block_shapes))


def init_params(spec, rng):
    """Fan-in uniform weights in ``±1/sqrt(n_in)``, zero biases."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    params = np.zeros(spec.n_params)
    for sl, (n_out, cols) in zip(spec.layer_slices(), spec.block_shapes):
        n_in = cols - 1
        bound = 1.0 / np.sqrt(n_in)
        block = np.zeros((n_out, cols))
        block[:, :n_in] = rng.uniform(-bound, bound, size=(n_out, n_in))
        params[sl] = block.ravel()
    return params


def _layer_indices(spec):
    out = []
    for sl, (n_out, cols) in zip(spec.layer_slices(), spec.block_shapes):
        idx = np.arange(sl.start, sl.stop).reshape(n_out, cols)
        # gathered directly in (n_in, n_out) layout so no transpose node is needed
        out.append((np.ascontiguousarray(idx[:, :-1].T), idx[:, -1].copy()))
    return out


_INDEX_CACHE = {}


def forward(spec, params, inputs):
    """Predictions ``(n, layer_sizes[-1])`` for ``inputs`` under flat ``params`` (a Var)."""
    graph = params.graph
    if params.shape != (spec.n_params,):
        raise ad.ShapeError("forward", [params.shape, (spec.n_params,)], "parameter vector length")
    x = inputs if isinstance(inputs, ad.Var) else graph.constant(inputs)
    if x.ndim != 2 or x.shape[1] != spec.layer_sizes[0]:
        raise ad.ShapeError("forward", [x.shape], f"expected (n, {spec.layer_sizes[0]}) inputs")
    idx = _INDEX_CACHE.get(spec)
    if idx is None:
        idx = _INDEX_CACHE[spec] = _layer_indices(spec)
    n = x.shape[0]
    last = len(idx) - 1
    for layer, (w_idx, b_idx) in enumerate(idx):
        w = ad.gather(params, w_idx)
        b = ad.gather(params, b_idx)
        x = ad.matmul(x, w) + ad.broadcast(b, (n, b_idx.size), axis=0)
        if layer < last:
            x = ad.relu(x)
    return x


def loss(spec, params, inputs, labels):
    """Mean loss over a split: MSE for the linear head, cross-entropy for softmax."""
    if len(inputs) == 0:
        raise EmptySplitError("cannot evaluate the loss on an empty split")
    pred = forward(spec, params, inputs)
    if spec.head == "softmax":
        return ad.softmax_xent(pred, labels)
    return ad.squared_error(pred, params.graph.constant(labels))


def spec_for(family_config, hidden=(40, 40)):
    head = "linear" if family_config.task_kind == "regression" else "softmax"
    return MlpSpec((family_config.input_dim, *hidden, family_config.output_dim), head)
