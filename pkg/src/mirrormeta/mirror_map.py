"""Inverse mirror maps ``g = (grad h)^{-1}`` taking dual vectors ``z`` to parameters.

``Identity``, ``DiagonalLinear`` and ``SpdLinear`` are the quadratic
distance-generating functions (plain and preconditioned GD).  ``BlockIaf``
is the learned nonlinear map: block ``i`` of the output is

    phi_i = z_i * logistic(alpha_i) + mu_i,
    (alpha_i, mu_i) = decoder_i(encoder_1(z_1), ..., encoder_{i-1}(z_{i-1}))

so the Jacobian is block lower triangular with a positive diagonal, which
makes ``g`` strictly monotone and exactly invertible block by block.

Encoders and decoders are small ReLU MLPs whose linear layers act on the
block tensor through one factor matrix per mode (a Kronecker-factored
weight), so their cost scales with the block size rather than its square.
"""

import functools
import math

import numpy as np

from . import autodiff as ad
from ._kernels import logistic as _sigmoid

SEED_DIM = 8


class IdenticalPointsError(ValueError):
    pass


def halved(shape, level):
    """Shape after ``level`` halvings per mode, floored and clamped at 1."""
    return tuple(max(1, s // 2 ** level) for s in shape)


class Identity:
    name = "identity"
    params = {}

    def forward(self, z, partition=None, bound=None):
        return z

    def bind(self, graph, bound=None):
        return lambda z: z

    def inverse(self, phi, partition=None):
        return np.array(phi, dtype=np.float64)

    def with_params(self, params):
        return self


class DiagonalLinear:
    """``phi = p * z`` with every ``p > 0``."""

    name = "diagonal"

    def __init__(self, p):
        p = np.array(p, dtype=np.float64).ravel()
        if not np.all(p > 0):
            raise ValueError("DiagonalLinear entries must be strictly positive")
        self.params = {"p": p}

    @property
    def p(self):
        return self.params["p"]

    def forward(self, z, partition=None, bound=None):
        return self.bind(z.graph, bound)(z)

    def bind(self, graph, bound=None):
        p = bound["p"] if bound else graph.constant(self.p)
        return lambda z: ad.mul(p, z)

    def inverse(self, phi, partition=None):
        return np.asarray(phi, dtype=np.float64) / self.p

    def with_params(self, params):
        return DiagonalLinear(params["p"])


class SpdLinear:
    """``phi = P z`` for a symmetric positive definite ``P``."""

    name = "spd"

    def __init__(self, P):
        P = np.array(P, dtype=np.float64)
        if P.ndim != 2 or P.shape[0] != P.shape[1] or not np.allclose(P, P.T, rtol=0, atol=1e-12):
            raise ValueError("SpdLinear needs a symmetric square matrix")
        try:
            self._chol = np.linalg.cholesky(P)
        except np.linalg.LinAlgError:
            raise ValueError("SpdLinear matrix is not positive definite") from None
        self.params = {"P": P}

    @property
    def P(self):
        return self.params["P"]

    def forward(self, z, partition=None, bound=None):
        return self.bind(z.graph, bound)(z)

    def bind(self, graph, bound=None):
        P = bound["P"] if bound else graph.constant(self.P)
        return lambda z: ad.mode_product(z, [P], [0])

    def inverse(self, phi, partition=None):
        y = np.linalg.solve(self._chol, np.asarray(phi, dtype=np.float64))
        return np.linalg.solve(self._chol.T, y)

    def with_params(self, params):
        return SpdLinear(params["P"])


@functools.lru_cache(maxsize=64)
def _param_shapes(block_shapes, seed_dim):
    shapes = {"seed": (seed_dim,)}
    n_blocks = len(block_shapes)
    emb_sizes = []
    for i, s in enumerate(block_shapes):
        levels = [tuple(s)] + [halved(s, l) for l in (1, 2, 3)]
        if i < n_blocks - 1:
            for l in (1, 2, 3):
                for m, (new, old) in enumerate(zip(levels[l], levels[l - 1])):
                    shapes[f"enc{i}.{l}.F{m}"] = (new, old)
                shapes[f"enc{i}.{l}.b"] = levels[l]
        emb_sizes.append(int(np.prod(levels[3])))
        in_dim = seed_dim if i == 0 else sum(emb_sizes[:i])
        shapes[f"dec{i}.in.W"] = (int(np.prod(levels[3])), in_dim)
        shapes[f"dec{i}.in.b"] = (int(np.prod(levels[3])),)
        out_shape = (2 * s[0],) + tuple(s[1:])
        targets = [levels[2], levels[1], out_shape]
        src = levels[3]
        for l, dst in zip((1, 2, 3), targets):
            for m, (new, old) in enumerate(zip(dst, src)):
                shapes[f"dec{i}.{l}.F{m}"] = (new, old)
            shapes[f"dec{i}.{l}.b"] = dst
            src = dst
    return shapes


class _Layout:
    """Index bookkeeping for a partition, cached per BlockIaf."""

    def __init__(self, partition):
        self.partition = partition
        self.blocks = partition.blocks
        self.shapes = partition.shapes
        self.tensor_index = [b.reshape(s) for b, s in zip(self.blocks, self.shapes)]
        order = np.concatenate(self.blocks)
        self.contiguous = np.array_equal(order, np.arange(order.size))
        self.inv_perm = np.argsort(order)
        self.sizes = [b.size for b in self.blocks]


class BlockIaf:
    """Block-wise inverse autoregressive flow with mode-product MLPs.

    ``params`` maps names to arrays:

    * ``enc{i}.{l}.F{m}`` / ``enc{i}.{l}.b`` -- encoder ``i`` layer ``l``
      (1..3), factor for mode ``m`` and bias tensor;
    * ``dec{i}.in.W`` / ``dec{i}.in.b`` -- dense map from the concatenated
      embeddings to the smallest tensor;
    * ``dec{i}.{l}.F{m}`` / ``dec{i}.{l}.b`` -- decoder layers growing the
      tensor back; the last one doubles mode 0 to emit ``(alpha, mu)``;
    * ``seed`` -- constant input of decoder 0.
    """

    name = "blockiaf"

    def __init__(self, partition, params, seed_dim=SEED_DIM):
        self.partition = partition
        self.seed_dim = seed_dim
        self.params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        for v in self.params.values():
            v.flags.writeable = False
        self._layout = _Layout(partition)
        self._first = None
        expected = self.param_shapes(partition, seed_dim)
        if set(expected) != set(self.params):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise ValueError(f"BlockIaf params do not match partition (missing {missing}, extra {extra})")
        for k, shp in expected.items():
            if self.params[k].shape != shp:
                raise ValueError(f"BlockIaf param {k} has shape {self.params[k].shape}, expected {shp}")

    # ------------------------------------------------------------ structure

    @staticmethod
    def param_shapes(partition, seed_dim=SEED_DIM):
        return dict(_param_shapes(partition.shapes, seed_dim))

    @classmethod
    def init(cls, partition, rng, seed_dim=SEED_DIM, init_scale=0.1, zero_last=True):
        """Near-identity factors plus noise.

        With ``zero_last`` (the training default) the mode-0 factor of every
        final decoder layer is zeroed, so the map starts as ``phi = z / 2`` yet
        every factor still receives gradient after the first update.  With
        ``zero_last=False`` the map is a generic random member of the family.
        """
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        params = {}
        n_blocks = len(partition.blocks)
        for name, shp in cls.param_shapes(partition, seed_dim).items():
            if name == "seed":
                params[name] = rng.normal(0.0, 1.0, size=shp)
            elif name.endswith(".b"):
                params[name] = np.zeros(shp)
            elif name.endswith(".in.W"):
                params[name] = rng.normal(0.0, 1.0 / np.sqrt(shp[1]), size=shp)
            else:
                params[name] = np.eye(*shp) + rng.normal(0.0, init_scale / np.sqrt(shp[1]), size=shp)
        for i in range(n_blocks if zero_last else 0):
            params[f"dec{i}.3.F0"] = np.zeros_like(params[f"dec{i}.3.F0"])
        return cls(partition, params, seed_dim)

    @classmethod
    def random(cls, partition, rng, seed_dim=SEED_DIM, scale=0.5):
        """A generic member of the family: noisy near-identity factors, random biases, no zeroed layer."""
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        shapes = _param_shapes(partition.shapes, seed_dim)
        noise = rng.normal(size=sum(math.prod(shp) for shp in shapes.values()))
        params, off = {}, 0
        for name, shp in shapes.items():
            n = math.prod(shp)
            e = noise[off:off + n].reshape(shp)
            off += n
            if name == "seed":
                params[name] = e
            elif name.endswith(".b"):
                params[name] = scale * e
            elif name.endswith(".in.W"):
                params[name] = e / np.sqrt(shp[1])
            else:
                params[name] = np.eye(*shp) + (scale / np.sqrt(shp[1])) * e
        return cls(partition, params, seed_dim)

    @classmethod
    def zero_decoder(cls, partition, rng=0, seed_dim=SEED_DIM):
        """Every decoder weight and the seed at zero, so ``alpha = mu = 0``."""
        iaf = cls.init(partition, rng, seed_dim)
        params = {k: (np.zeros_like(v) if k.startswith("dec") or k == "seed" else v)
                  for k, v in iaf.params.items()}
        return cls(partition, params, seed_dim)

    def with_params(self, params):
        return BlockIaf(self.partition, params, self.seed_dim)

    # ------------------------------------------------------------ evaluation

    def _bind(self, graph, bound):
        if bound:
            return bound
        return {k: graph.constant(v) for k, v in self.params.items()}

    def _mode_layer(self, ops, x, p, prefix, relu):
        factors = [p[f"{prefix}.F{m}"] for m in range(x.ndim)]
        return ops.mode_product(x, factors, range(x.ndim), bias=p[f"{prefix}.b"], relu=relu)

    def _encode(self, ops, zt, p, i):
        h = zt
        for l in (1, 2, 3):
            h = self._mode_layer(ops, h, p, f"enc{i}.{l}", relu=l < 3)
        return ops.reshape(h, (h.size,))

    def _decode(self, ops, v, p, i):
        """Decoder ``i`` output tensor; its first half (row-major) is alpha, the rest mu."""
        h = ops.mode_product(v, [p[f"dec{i}.in.W"]], [0], bias=p[f"dec{i}.in.b"], relu=True)
        h = ops.reshape(h, halved(self._layout.shapes[i], 3))
        for l in (1, 2, 3):
            h = self._mode_layer(ops, h, p, f"dec{i}.{l}", relu=l < 3)
        return h

    def _coefficients(self, ops, z_blocks, p, i, embeddings):
        """Decoder ``i`` output given tensor-shaped z blocks; fills ``embeddings`` lazily."""
        if i == 0:
            if ops is not _numeric:
                return self._decode(ops, p["seed"], p, 0)
            # params are read-only, so block 0's coefficients never change
            if self._first is None:
                self._first = self._decode(ops, p["seed"], p, 0)
            return self._first
        while len(embeddings) < i:
            j = len(embeddings)
            embeddings.append(self._encode(ops, z_blocks[j], p, j))
        v = embeddings[0] if i == 1 else ops.concat(embeddings[:i])
        return self._decode(ops, v, p, i)

    def _alpha_mu(self, coeffs, i):
        n = self._layout.sizes[i]
        flat = coeffs.reshape(-1)
        return flat[:n], flat[n:]

    def _check(self, n, partition):
        if partition is not None and partition is not self.partition and \
                partition.sizes != self.partition.sizes:
            raise ValueError("partition does not match the one this BlockIaf was built for")
        if n != self.partition.d:
            raise ad.ShapeError("map_forward", [(n,), (self.partition.d,)], "z length vs partition")

    def bind(self, graph, bound=None):
        """Return ``z -> phi`` for ``graph``, evaluating the z-independent first block once."""
        lay = self._layout
        p = self._bind(graph, bound)
        first = self._coefficients(ad, None, p, 0, None)

        def forward(z):
            self._check(z.shape[0] if z.ndim == 1 else -1, None)
            z_tensors = [ad.gather(z, idx) for idx in lay.tensor_index]
            embeddings = []
            pieces = [ad.coupling(z_tensors[0], first)]
            for i in range(1, len(lay.blocks)):
                pieces.append(ad.coupling(z_tensors[i], self._coefficients(ad, z_tensors, p, i, embeddings)))
            phi = ad.concat(pieces) if len(pieces) > 1 else pieces[0]
            if not lay.contiguous:
                phi = ad.gather(phi, lay.inv_perm)
            return phi

        return forward

    def forward(self, z, partition=None, bound=None):
        self._check(z.shape[0] if z.ndim == 1 else -1, partition)
        return self.bind(z.graph, bound)(z)

    def evaluate(self, z, partition=None):
        """``g(z)`` as an array without building a graph; equal bit for bit to :meth:`forward`."""
        z = np.asarray(z, dtype=np.float64)
        self._check(z.shape[0] if z.ndim == 1 else -1, partition)
        lay = self._layout
        z_tensors = [z[idx] for idx in lay.tensor_index]
        phi = np.empty_like(z)
        embeddings = []
        for i, block in enumerate(lay.blocks):
            coeffs = self._coefficients(_numeric, z_tensors, self.params, i, embeddings)
            phi[block] = _numeric.coupling(z_tensors[i], coeffs)
        return phi

    def inverse(self, phi, partition=None):
        phi = np.asarray(phi, dtype=np.float64)
        self._check(phi.shape[0], partition)
        lay = self._layout
        z = np.empty_like(phi)
        z_tensors = []
        embeddings = []
        for i, block in enumerate(lay.blocks):
            alpha, mu = self._alpha_mu(self._coefficients(_numeric, z_tensors, self.params, i, embeddings), i)
            zi = (phi[block] - mu) / _sigmoid(alpha)
            z[block] = zi
            z_tensors.append(zi.reshape(lay.shapes[i]))
        return z

    def diag_scale(self, z, partition=None):
        z = np.asarray(z, dtype=np.float64)
        self._check(z.shape[0], partition)
        lay = self._layout
        z_tensors = [z[idx] for idx in lay.tensor_index]
        out = np.empty_like(z)
        embeddings = []
        for i, block in enumerate(lay.blocks):
            alpha, _ = self._alpha_mu(self._coefficients(_numeric, z_tensors, self.params, i, embeddings), i)
            out[block] = _sigmoid(alpha)
        return out


class _numeric:
    """Array counterparts of the autodiff functions the map uses (same forward rules).

    Shapes were validated when the BlockIaf was built, so mode products skip
    the per-call check.
    """

    @staticmethod
    def mode_product(x, factors, modes, bias=None, relu=False):
        modes = tuple(int(m) for m in modes)
        values = [x, *factors] + ([bias] if bias is not None else [])
        return ad.eager("mode_product", values, check=False, modes=modes, trans=(False,) * len(modes),
                        bias=bias is not None, relu=relu)

    @staticmethod
    def coupling(z, coeffs):
        return ad.eager("coupling", [z, coeffs], check=False)

    @staticmethod
    def reshape(x, shape):
        return ad.eager("reshape", [x], shape=tuple(int(s) for s in shape))

    @staticmethod
    def gather(x, index):
        return ad.eager("gather", [x], index=np.asarray(index, dtype=np.int64))

    @staticmethod
    def concat(xs):
        return ad.eager("concat", list(xs))


# ---------------------------------------------------------------- functional API

def map_forward(kind, partition, z, graph=None, bound=None):
    """``phi = g(z)`` as a Var.  ``z`` may be a Var or an array (then ``graph`` is used or made)."""
    if not isinstance(z, ad.Var):
        graph = ad.Graph() if graph is None else graph
        z = graph.constant(z)
    if z.ndim != 1:
        raise ad.ShapeError("map_forward", [z.shape], "z must be a vector")
    if partition is not None and z.shape[0] != partition.d:
        raise ad.ShapeError("map_forward", [z.shape, (partition.d,)], "z length vs partition")
    if isinstance(kind, (DiagonalLinear,)) and kind.p.shape != z.shape:
        raise ad.ShapeError("map_forward", [z.shape, kind.p.shape], "diagonal length")
    return kind.forward(z, partition, bound)


def map_inverse(kind, partition, phi):
    """``z = g^{-1}(phi)`` as an array, by exact sequential inversion for BlockIaf."""
    phi = np.asarray(phi, dtype=np.float64)
    if partition is not None and phi.shape != (partition.d,):
        raise ad.ShapeError("map_inverse", [phi.shape, (partition.d,)], "phi length vs partition")
    return kind.inverse(phi, partition)


def evaluate(kind, partition, z):
    """``g(z)`` as a plain array."""
    z = np.asarray(z, dtype=np.float64)
    if isinstance(kind, BlockIaf) and z.ndim == 1:
        if partition is not None and z.shape[0] != partition.d:
            raise ad.ShapeError("map_forward", [z.shape, (partition.d,)], "z length vs partition")
        return kind.evaluate(z, partition)
    return np.array(map_forward(kind, partition, z).value)


def monotonicity_witness(kind, partition, z, z_other):
    """``(z - z')^T (g(z) - g(z'))``; strictly positive for a monotone map."""
    z = np.asarray(z, dtype=np.float64)
    z_other = np.asarray(z_other, dtype=np.float64)
    if np.array_equal(z, z_other):
        raise IdenticalPointsError("monotonicity witness needs two distinct points")
    diff = evaluate(kind, partition, z) - evaluate(kind, partition, z_other)
    return float(np.dot(z - z_other, diff))


def diag_scale(kind, partition, z):
    """Jacobian diagonal of a BlockIaf at ``z`` (the concatenated ``logistic(alpha_i)``)."""
    if not isinstance(kind, BlockIaf):
        raise TypeError(f"diag_scale is defined for BlockIaf maps, not {type(kind).__name__}")
    return kind.diag_scale(z, partition)


def from_name(name, partition, params, seed_dim=SEED_DIM):
    """Rebuild a map from its ``name`` and parameter arrays (checkpoint loading)."""
    if name == "identity":
        return Identity()
    if name == "diagonal":
        return DiagonalLinear(params["p"])
    if name == "spd":
        return SpdLinear(params["P"])
    if name == "blockiaf":
        return BlockIaf(partition, params, seed_dim)
    raise ValueError(f"unknown map kind {name!r}")
