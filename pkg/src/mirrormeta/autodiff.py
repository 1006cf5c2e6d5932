"""Reverse-mode automatic differentiation on an append-only graph.

A :class:`Graph` records every operation eagerly: applying an op computes its
value immediately and appends a node.  :meth:`Graph.grad` walks the graph
backwards and *emits the gradient computation as new nodes in the same
graph*, so gradients are ordinary differentiable values and a second
``grad`` call yields second derivatives.  This is what lets the meta-learner
differentiate through an inner loop that itself calls ``grad``.

Broadcasting is deliberately limited to scalar-with-tensor; anything else
must go through an explicit ``reshape``/``broadcast``.

Example::

    g = Graph()
    x = g.constant(3.0)
    (dx,) = g.grad(x * x, [x], create_graph=True)
    (ddx,) = g.grad(dx, [x])
    ddx.value  # 2.0
"""

import math
import weakref

import numpy as np

from . import _kernels


class ShapeError(ValueError):
    """An op received inputs whose shapes it cannot combine."""

    def __init__(self, op, shapes, detail=""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible input shapes {', '.join(str(s) for s in self.shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonScalarError(ValueError):
    """``grad`` was asked to differentiate a non-scalar output."""


class NonFiniteError(FloatingPointError):
    """A checked graph produced NaN or Inf."""

    def __init__(self, op):
        self.op = op
        super().__init__(f"{op}: produced a non-finite value")


class _Node:
    __slots__ = ("op", "inputs", "value", "attrs")

    def __init__(self, op, inputs, value, attrs):
        self.op = op
        self.inputs = inputs
        self.value = value
        self.attrs = attrs


class Var:
    """Handle to one node of a :class:`Graph`."""

    __slots__ = ("graph", "index")

    def __init__(self, graph, index):
        self.graph = graph
        self.index = index

    @property
    def value(self):
        return self.graph.nodes[self.index].value

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return transpose(self)

    def item(self):
        return float(self.value)

    def __repr__(self):
        node = self.graph.nodes[self.index]
        return f"Var(#{self.index} {node.op} shape={self.shape})"

    def _other(self, x):
        return x if isinstance(x, Var) else self.graph.constant(x)

    def __add__(self, other):
        if _is_number(other):
            return self.graph.apply("shift", [self], c=float(other))
        return add(self, self._other(other))

    __radd__ = __add__

    def __sub__(self, other):
        if _is_number(other):
            return self.graph.apply("shift", [self], c=-float(other))
        return sub(self, self._other(other))

    def __rsub__(self, other):
        if _is_number(other):
            return self.graph.apply("shift", [neg(self)], c=float(other))
        return sub(self._other(other), self)

    def __mul__(self, other):
        if _is_number(other):
            return self.graph.apply("scale", [self], c=float(other))
        return mul(self, self._other(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if _is_number(other):
            return self.graph.apply("scale", [self], c=1.0 / float(other))
        return div(self, self._other(other))

    def __rtruediv__(self, other):
        return div(self._other(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, self._other(other))

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = shape[0]
        return reshape(self, shape)


def _is_number(x):
    return isinstance(x, (int, float, np.integer, np.floating)) and not isinstance(x, bool)


class Graph:
    """Append-only computation graph; one per task adaptation.

    With ``check_finite=True`` every op validates its output and raises
    :class:`NonFiniteError` on NaN/Inf.
    """

    def __init__(self, check_finite=False):
        self.nodes = []
        self.check_finite = check_finite

    def __len__(self):
        return len(self.nodes)

    def constant(self, value):
        arr = np.array(value, dtype=np.float64)
        arr.flags.writeable = False
        self.nodes.append(_Node("const", (), arr, None))
        return Var(self, len(self.nodes) - 1)

    # leaves to differentiate with respect to are just constants
    variable = constant

    def apply(self, op, inputs, **attrs):
        spec = _OPS.get(op)
        if spec is None:
            raise ValueError(f"unknown op kind {op!r}")
        nodes = self.nodes
        try:
            values = [nodes[v.index].value for v in inputs if v.graph is self]
        except AttributeError:
            raise TypeError(f"{op}: inputs must be Vars") from None
        if len(values) != len(inputs):
            raise TypeError(f"{op}: inputs must belong to this graph")
        if spec.check is not None:
            spec.check(op, values, attrs)
        out = spec.forward(values, attrs)
        if type(out) is not np.ndarray or out.dtype != np.float64:
            out = np.asarray(out, dtype=np.float64)
        if self.check_finite and not np.isfinite(out).all():
            raise NonFiniteError(op)
        nodes.append(_Node(op, tuple([v.index for v in inputs]), out, attrs))
        return Var(self, len(nodes) - 1)

    def grad(self, output, wrt, create_graph=False):
        """Gradients of scalar ``output`` with respect to each Var in ``wrt``.

        With ``create_graph`` the returned Vars are live nodes that can be
        differentiated again.  Otherwise the intermediate backward nodes are
        discarded and the results come back as fresh constants.
        """
        if output.shape != ():
            raise NonScalarError(f"grad needs a scalar output, got shape {output.shape}")
        nodes = self.nodes
        top = output.index
        start = len(nodes)
        wrt_idx = [v.index for v in wrt]
        candidates = [i for i in wrt_idx if i <= top]
        grads = {}
        if candidates:
            lo = min(candidates)
            live = [False] * (top + 1)
            for i in candidates:
                live[i] = True
            for i in range(lo + 1, top + 1):
                if not live[i]:
                    for j in nodes[i].inputs:
                        if live[j]:
                            live[i] = True
                            break
            if live[top]:
                grads[top] = self.constant(1.0)
                for i in range(top, lo - 1, -1):
                    g = grads.get(i)
                    if g is None:
                        continue
                    node = nodes[i]
                    if not node.inputs:
                        continue
                    spec = _OPS[node.op]
                    if spec.vjp is None:
                        continue
                    need = tuple(live[j] for j in node.inputs)
                    if not any(need):
                        continue
                    ins = tuple(Var(self, j) for j in node.inputs)
                    parts = spec.vjp(Var(self, i), ins, g, node.attrs, need)
                    for j, n, gj in zip(node.inputs, need, parts):
                        if not n or gj is None:
                            continue
                        prev = grads.get(j)
                        grads[j] = gj if prev is None else add(prev, gj)
        results = []
        for v in wrt:
            g = grads.get(v.index)
            results.append(g)
        if create_graph:
            return [g if g is not None else self.constant(np.zeros(v.shape)) for g, v in zip(results, wrt)]
        values = [g.value if g is not None else np.zeros(v.shape) for g, v in zip(results, wrt)]
        del nodes[start:]
        return [self.constant(val) for val in values]


# ------------------------------------------------------------------ op table

class _OpSpec:
    __slots__ = ("forward", "vjp", "check")

    def __init__(self, forward, vjp, check=None):
        self.forward = forward
        self.vjp = vjp
        self.check = check


_OPS = {}


def _register(name, forward, vjp, check=None):
    _OPS[name] = _OpSpec(forward, vjp, check)


def eager(op, values, check=True, **attrs):
    """Value of ``op`` on plain arrays, with no graph node recorded.

    Uses the same forward rule as :meth:`Graph.apply`, so results are
    bit-identical to the recorded value.  ``check=False`` skips shape
    validation for callers whose shapes are fixed in advance.
    """
    spec = _OPS[op]
    if check and spec.check is not None:
        spec.check(op, values, attrs)
    return np.asarray(spec.forward(values, attrs), dtype=np.float64)


#: User-facing op kinds.  Internal helper kinds used by gradient rules are
#: also accepted by :meth:`Graph.apply`.
OP_KINDS = frozenset({
    "add", "subtract", "multiply", "divide", "matmul", "mode_product", "concat",
    "gather", "reshape", "sum", "mean", "relu", "logistic", "tanh", "sin",
    "square", "softmax_xent", "squared_error", "coupling",
})


def _check_elementwise(op, values, attrs):
    a, b = values
    if a.shape != b.shape and a.ndim and b.ndim:
        raise ShapeError(op, [a.shape, b.shape], "only scalar-with-tensor broadcasting is supported")


def _unbroadcast(g, shape):
    if shape == () and g.shape != ():
        return sum_(g)
    return g


def _vjp_add(out, ins, g, attrs, need):
    a, b = ins
    return (_unbroadcast(g, a.shape) if need[0] else None,
            _unbroadcast(g, b.shape) if need[1] else None)


def _vjp_sub(out, ins, g, attrs, need):
    a, b = ins
    return (_unbroadcast(g, a.shape) if need[0] else None,
            _unbroadcast(neg(g), b.shape) if need[1] else None)


def _vjp_mul(out, ins, g, attrs, need):
    a, b = ins
    return (_unbroadcast(mul(g, b), a.shape) if need[0] else None,
            _unbroadcast(mul(g, a), b.shape) if need[1] else None)


def _vjp_div(out, ins, g, attrs, need):
    a, b = ins
    return (_unbroadcast(div(g, b), a.shape) if need[0] else None,
            _unbroadcast(neg(div(mul(g, out), b)), b.shape) if need[1] else None)


_register("add", lambda v, at: v[0] + v[1], _vjp_add, _check_elementwise)
_register("subtract", lambda v, at: v[0] - v[1], _vjp_sub, _check_elementwise)
_register("multiply", lambda v, at: v[0] * v[1], _vjp_mul, _check_elementwise)
_register("divide", lambda v, at: v[0] / v[1], _vjp_div, _check_elementwise)
_register("neg", lambda v, at: -v[0], lambda out, ins, g, at, need: (neg(g),))
_register("scale", lambda v, at: v[0] * at["c"],
          lambda out, ins, g, at, need: (g.graph.apply("scale", [g], c=at["c"]),))
_register("shift", lambda v, at: v[0] + at["c"], lambda out, ins, g, at, need: (g,))


def _check_matmul(op, values, attrs):
    a, b = values
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(op, [a.shape, b.shape])


def _vjp_matmul(out, ins, g, attrs, need):
    a, b = ins
    return (matmul(g, transpose(b)) if need[0] else None,
            matmul(transpose(a), g) if need[1] else None)


_register("matmul", lambda v, at: v[0] @ v[1], _vjp_matmul, _check_matmul)


def _fwd_transpose(values, attrs):
    return np.ascontiguousarray(np.transpose(values[0], attrs.get("axes")))


def _vjp_transpose(out, ins, g, attrs, need):
    axes = attrs.get("axes")
    inv = None if axes is None else tuple(int(i) for i in np.argsort(axes))
    return (transpose(g, inv),)


_register("transpose", _fwd_transpose, _vjp_transpose)


def _split_mode_inputs(values, attrs):
    # [x, *factors] or [x, *factors, bias]
    n = len(attrs["modes"])
    return values[0], values[1:1 + n], (values[1 + n] if attrs.get("bias") else None)


def _check_mode_product(op, values, attrs):
    modes = attrs["modes"]
    trans = attrs["trans"]
    shapes = [v.shape for v in values]
    extra = 1 if attrs.get("bias") else 0
    if len(values) != 1 + len(modes) + extra or len(trans) != len(modes) or len(set(modes)) != len(modes):
        raise ShapeError(op, shapes, f"modes {modes} do not match the factor inputs")
    x, factors, bias = _split_mode_inputs(values, attrs)
    out_shape = list(x.shape)
    for f, m, t in zip(factors, modes, trans):
        cols = f.shape[0] if t else (f.shape[1] if f.ndim == 2 else -1)
        if not 0 <= m < x.ndim or f.ndim != 2 or cols != x.shape[m]:
            raise ShapeError(op, shapes, f"factor {f.shape} cannot contract mode {m}")
        out_shape[m] = f.shape[1] if t else f.shape[0]
    if bias is not None and bias.shape != tuple(out_shape):
        raise ShapeError(op, shapes, f"bias must have the output shape {tuple(out_shape)}")


def _fwd_mode_product(values, attrs):
    x, factors, bias = _split_mode_inputs(values, attrs)
    modes = attrs["modes"]
    factors = [f.T if t else f for f, t in zip(factors, attrs["trans"])]
    if x.ndim == 2 and modes == (0, 1):
        y = factors[0] @ x @ factors[1].T
    elif x.ndim == 2 and modes == (0,):
        y = factors[0] @ x
    elif x.ndim == 2 and modes == (1,):
        y = x @ factors[0].T
    elif x.ndim == 1 and modes == (0,):
        y = factors[0] @ x
    else:
        y = x
        for f, m in zip(factors, modes):
            y = np.moveaxis(np.tensordot(f, y, axes=(1, m)), 0, m)
        y = np.ascontiguousarray(y)
    if bias is not None:
        y = y + bias
    if attrs.get("relu"):
        y = np.maximum(y, 0.0)
    return y


def _vjp_mode_product(out, ins, g, attrs, need):
    modes, trans = attrs["modes"], attrs["trans"]
    if attrs.get("relu"):
        # out > 0 exactly where the pre-activation is > 0
        g = mul(g, out.graph.apply("relu_mask", [out]))
    n = len(modes)
    x, factors = ins[0], ins[1:1 + n]
    res = [None] * len(ins)
    if need[0]:
        res[0] = mode_product(g, factors, modes, [not t for t in trans])
    for k, (m, t) in enumerate(zip(modes, trans)):
        if not need[k + 1]:
            continue
        others = [j for j in range(n) if j != k]
        partial = x
        if others:
            partial = mode_product(x, [factors[j] for j in others], [modes[j] for j in others],
                                   [trans[j] for j in others])
        res[k + 1] = mode_gram(partial, g, m) if t else mode_gram(g, partial, m)
    if attrs.get("bias") and need[-1]:
        res[-1] = g
    return res


_register("mode_product", _fwd_mode_product, _vjp_mode_product, _check_mode_product)


def _check_mode_gram(op, values, attrs):
    a, b = values
    m = attrs["mode"]
    ok = a.ndim == b.ndim and 0 <= m < a.ndim
    ok = ok and all(a.shape[i] == b.shape[i] for i in range(a.ndim) if i != m)
    if not ok:
        raise ShapeError(op, [a.shape, b.shape], f"mode {m}")


def _fwd_mode_gram(values, attrs):
    a, b = values
    m = attrs["mode"]
    if a.ndim == 1:
        return np.outer(a, b)
    if a.ndim == 2:
        return a @ b.T if m == 0 else a.T @ b
    rest = [i for i in range(a.ndim) if i != m]
    return np.tensordot(a, b, axes=(rest, rest))


def _vjp_mode_gram(out, ins, g, attrs, need):
    # H = unfold_m(a) unfold_m(b)^T
    a, b = ins
    m = attrs["mode"]
    return (mode_product(b, [g], [m]) if need[0] else None,
            mode_product(a, [g], [m], [True]) if need[1] else None)


_register("mode_gram", _fwd_mode_gram, _vjp_mode_gram, _check_mode_gram)


def _check_concat(op, values, attrs):
    if not values or any(v.ndim != 1 for v in values):
        raise ShapeError(op, [v.shape for v in values], "concat takes one or more 1-D inputs")


def _vjp_concat(out, ins, g, attrs, need):
    res = []
    off = 0
    for v, n in zip(ins, need):
        size = v.shape[0]
        res.append(gather(g, np.arange(off, off + size)) if n else None)
        off += size
    return res


_register("concat", lambda v, at: np.concatenate(v), _vjp_concat, _check_concat)


def _check_coupling(op, values, attrs):
    z, c = values
    if c.size != 2 * z.size:
        raise ShapeError(op, [z.shape, c.shape], "coefficients must hold twice as many entries as z")


def _fwd_coupling(values, attrs):
    z, c = values
    n = z.size
    c = c.reshape(-1)
    return z.reshape(-1) * _kernels.logistic(c[:n]) + c[n:]


def _vjp_coupling(out, ins, g, attrs, need):
    z, c = ins
    n = z.size
    s = logistic(gather(c, np.arange(n)))
    res = [None, None]
    if need[0]:
        res[0] = reshape(mul(g, s), z.shape)
    if need[1]:
        ds = mul(g, reshape(z, (n,)))
        dalpha = mul(ds, g.graph.apply("logistic_deriv", [s]))
        res[1] = reshape(concat([dalpha, g]), c.shape)
    return res


_register("coupling", _fwd_coupling, _vjp_coupling, _check_coupling)


# id -> (lo, hi) for read-only index arrays, dropped when the array dies
_INDEX_BOUNDS = {}


def _index_bounds(idx):
    if idx.flags.writeable:
        return int(idx.min()), int(idx.max())
    key = id(idx)
    bounds = _INDEX_BOUNDS.get(key)
    if bounds is None:
        bounds = _INDEX_BOUNDS[key] = (int(idx.min()), int(idx.max()))
        weakref.finalize(idx, _INDEX_BOUNDS.pop, key, None)
    return bounds


def _check_gather(op, values, attrs):
    idx = attrs["index"]
    if idx.size:
        lo, hi = _index_bounds(idx)
        if lo < 0 or hi >= values[0].size:
            raise ShapeError(op, [values[0].shape, idx.shape], "index out of range")


def _vjp_gather(out, ins, g, attrs, need):
    x = ins[0]
    return (g.graph.apply("scatter", [g], index=attrs["index"], shape=x.shape),)


_register("gather", lambda v, at: v[0].reshape(-1)[at["index"]], _vjp_gather, _check_gather)


def _check_scatter(op, values, attrs):
    if values[0].shape != attrs["index"].shape:
        raise ShapeError(op, [values[0].shape, attrs["index"].shape], "values and index must match")


def _fwd_scatter(values, attrs):
    shape = attrs["shape"]
    return _kernels.scatter_add(values[0], attrs["index"], math.prod(shape)).reshape(shape)


def _vjp_scatter(out, ins, g, attrs, need):
    return (gather(g, attrs["index"]),)


_register("scatter", _fwd_scatter, _vjp_scatter, _check_scatter)


def _check_reshape(op, values, attrs):
    if math.prod(attrs["shape"]) != values[0].size:
        raise ShapeError(op, [values[0].shape, attrs["shape"]], "element count changes")


_register("reshape", lambda v, at: v[0].reshape(at["shape"]),
          lambda out, ins, g, at, need: (reshape(g, ins[0].shape),), _check_reshape)


def _vjp_sum(out, ins, g, attrs, need):
    return (broadcast(g, ins[0].shape, attrs.get("axis")),)


_register("sum", lambda v, at: np.sum(v[0], axis=at.get("axis")), _vjp_sum)


def _check_broadcast(op, values, attrs):
    x = values[0]
    shape, axis = attrs["shape"], attrs.get("axis")
    if axis is None:
        ok = x.shape == ()
    else:
        ok = 0 <= axis < len(shape) and x.shape == tuple(s for i, s in enumerate(shape) if i != axis)
    if not ok:
        raise ShapeError(op, [x.shape, shape], f"axis {axis}")


def _fwd_broadcast(values, attrs):
    x, axis = values[0], attrs.get("axis")
    if axis is not None:
        x = np.expand_dims(x, axis)
    return np.array(np.broadcast_to(x, attrs["shape"]))


_register("broadcast", _fwd_broadcast,
          lambda out, ins, g, at, need: (sum_(g, at.get("axis")),), _check_broadcast)


def _vjp_mean(out, ins, g, attrs, need):
    x = ins[0]
    return (broadcast(g, x.shape) * (1.0 / max(x.size, 1)),)


_register("mean", lambda v, at: np.mean(v[0]), _vjp_mean)


# elementwise nonlinearities
_register("relu_mask", lambda v, at: (v[0] > 0).astype(np.float64), None)
_register("relu", lambda v, at: np.maximum(v[0], 0.0),
          lambda out, ins, g, at, need: (mul(g, ins[0].graph.apply("relu_mask", [ins[0]])),))


def _vjp_logistic(out, ins, g, attrs, need):
    return (mul(g, out.graph.apply("logistic_deriv", [out])),)


def _vjp_logistic_deriv(out, ins, g, attrs, need):
    # d/ds [s(1-s)] = 1 - 2s
    s = ins[0]
    return (mul(g, 1.0 - s * 2.0),)


_register("logistic", lambda v, at: _kernels.logistic(v[0]), _vjp_logistic)
_register("logistic_deriv", lambda v, at: v[0] * (1.0 - v[0]), _vjp_logistic_deriv)


def _vjp_tanh(out, ins, g, attrs, need):
    return (mul(g, out.graph.apply("tanh_deriv", [out])),)


_register("tanh", lambda v, at: np.tanh(v[0]), _vjp_tanh)
_register("tanh_deriv", lambda v, at: 1.0 - v[0] * v[0],
          lambda out, ins, g, at, need: (mul(g, ins[0] * -2.0),))
_register("sin", lambda v, at: np.sin(v[0]),
          lambda out, ins, g, at, need: (mul(g, ins[0].graph.apply("cos", [ins[0]])),))
_register("cos", lambda v, at: np.cos(v[0]),
          lambda out, ins, g, at, need: (neg(mul(g, ins[0].graph.apply("sin", [ins[0]]))),))
_register("square", lambda v, at: v[0] * v[0],
          lambda out, ins, g, at, need: (mul(g, ins[0] * 2.0),))


# losses

def _check_xent(op, values, attrs):
    logits = values[0]
    labels = attrs["labels"]
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(op, [logits.shape, labels.shape], "need (N, M) logits and N labels")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ShapeError(op, [logits.shape, labels.shape], "label out of range")


def _softmax_rows(x):
    return np.exp(_kernels.log_softmax_rows(x))


def _softmax_vjp(s, h):
    # s * (h - rowsum(h * s))
    r = broadcast(sum_(mul(h, s), axis=1), s.shape, axis=1)
    return mul(s, sub(h, r))


def _vjp_xent(out, ins, g, attrs, need):
    logits = ins[0]
    dl = logits.graph.apply("xent_grad", [logits], labels=attrs["labels"])
    return (mul(broadcast(g, logits.shape), dl),)


def _fwd_xent_grad(values, attrs):
    logits = values[0]
    labels = attrs["labels"]
    n = logits.shape[0]
    grad = _softmax_rows(logits)
    grad[np.arange(n), labels] -= 1.0
    return grad / n


def _vjp_xent_grad(out, ins, g, attrs, need):
    logits = ins[0]
    s = logits.graph.apply("softmax", [logits])
    return (_softmax_vjp(s, g) * (1.0 / logits.shape[0]),)


_register("softmax_xent", lambda v, at: _kernels.softmax_xent(v[0], at["labels"]), _vjp_xent, _check_xent)
_register("xent_grad", _fwd_xent_grad, _vjp_xent_grad)
_register("softmax", lambda v, at: _softmax_rows(v[0]),
          lambda out, ins, g, at, need: (_softmax_vjp(out, g),))


def _check_same_shape(op, values, attrs):
    a, b = values
    if a.shape != b.shape:
        raise ShapeError(op, [a.shape, b.shape])


def _fwd_squared_error(values, attrs):
    diff = values[0] - values[1]
    return np.mean(diff * diff)


def _vjp_squared_error(out, ins, g, attrs, need):
    p, t = ins
    n = max(p.size, 1)
    gp = mul(broadcast(g, p.shape), sub(p, t) * (2.0 / n))
    return (gp if need[0] else None, neg(gp) if need[1] else None)


_register("squared_error", _fwd_squared_error, _vjp_squared_error, _check_same_shape)


# ---------------------------------------------------------- functional API

def _graph_of(*xs):
    for x in xs:
        if isinstance(x, Var):
            return x.graph
    raise TypeError("at least one argument must be a Var")


def _lift(graph, x):
    return x if isinstance(x, Var) else graph.constant(x)


def _binary(op, a, b):
    graph = _graph_of(a, b)
    return graph.apply(op, [_lift(graph, a), _lift(graph, b)])


def add(a, b):
    return _binary("add", a, b)


def sub(a, b):
    return _binary("subtract", a, b)


def mul(a, b):
    return _binary("multiply", a, b)


def div(a, b):
    return _binary("divide", a, b)


def neg(x):
    return x.graph.apply("neg", [x])


def matmul(a, b):
    return _binary("matmul", a, b)


def transpose(x, axes=None):
    return x.graph.apply("transpose", [x], axes=None if axes is None else tuple(axes))


def mode_product(x, factors, modes, trans=None, bias=None, relu=False):
    """Contract mode ``modes[k]`` of ``x`` with the columns of ``factors[k]`` for every k.

    ``trans[k]`` uses the transpose of ``factors[k]`` instead; ``bias``, if
    given, is added to the result (shape of the output).  ``relu`` applies a
    ReLU to the result.
    """
    graph = _graph_of(x, *factors)
    modes = tuple(int(m) for m in modes)
    trans = tuple(bool(t) for t in trans) if trans is not None else (False,) * len(modes)
    ins = [_lift(graph, x)] + [_lift(graph, f) for f in factors]
    if bias is not None:
        ins.append(_lift(graph, bias))
    if relu:
        return graph.apply("mode_product", ins, modes=modes, trans=trans, bias=bias is not None, relu=True)
    return graph.apply("mode_product", ins, modes=modes, trans=trans, bias=bias is not None)


def mode_gram(a, b, mode):
    return _binary_attr("mode_gram", a, b, mode=int(mode))


def _binary_attr(op, a, b, **attrs):
    graph = _graph_of(a, b)
    return graph.apply(op, [_lift(graph, a), _lift(graph, b)], **attrs)


def concat(xs):
    graph = _graph_of(*xs)
    return graph.apply("concat", [_lift(graph, x) for x in xs])


def coupling(z, coeffs):
    """Flat ``z * logistic(a) + m`` where ``coeffs`` holds ``a`` then ``m`` (row-major)."""
    graph = _graph_of(z, coeffs)
    return graph.apply("coupling", [_lift(graph, z), _lift(graph, coeffs)])


def gather(x, index):
    """Pick entries of flattened ``x``; the result has ``index``'s shape.

    Read-only index arrays have their bounds checked once and cached.
    """
    if type(index) is not np.ndarray or index.dtype != np.int64:
        index = np.asarray(index, dtype=np.int64)
    return x.graph.apply("gather", [x], index=index)


def reshape(x, shape):
    return x.graph.apply("reshape", [x], shape=tuple(int(s) for s in shape))


def sum_(x, axis=None):
    return x.graph.apply("sum", [x], axis=axis)


def broadcast(x, shape, axis=None):
    """Expand a scalar to ``shape`` or repeat ``x`` along a new ``axis``."""
    return x.graph.apply("broadcast", [x], shape=tuple(shape), axis=axis)


def mean(x):
    return x.graph.apply("mean", [x])


def relu(x):
    return x.graph.apply("relu", [x])


def logistic(x):
    return x.graph.apply("logistic", [x])


def tanh(x):
    return x.graph.apply("tanh", [x])


def sin(x):
    return x.graph.apply("sin", [x])


def square(x):
    return x.graph.apply("square", [x])


def softmax_xent(logits, labels):
    """Mean softmax cross-entropy of integer ``labels`` under row ``logits``."""
    return logits.graph.apply("softmax_xent", [logits], labels=np.asarray(labels, dtype=np.int64))


def squared_error(pred, target):
    """Mean of the squared entrywise difference."""
    return _binary("squared_error", pred, target)


def norm(x):
    """Euclidean norm of a numpy array or a Var's value (not differentiable)."""
    v = x.value if isinstance(x, Var) else np.asarray(x)
    return math.sqrt(float(np.dot(v.ravel(), v.ravel())))


def apply(graph, op, inputs, **attrs):
    """Module-level spelling of :meth:`Graph.apply`."""
    return graph.apply(op, list(inputs), **attrs)


def grad(output, wrt, create_graph=False):
    return output.graph.grad(output, wrt, create_graph=create_graph)
