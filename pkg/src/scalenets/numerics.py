"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation on :class:`Tensor` values creates a node that remembers
its parents and a closure mapping the output cotangent to parent
cotangents.  Node ids increase monotonically, so sorting reachable nodes
by id gives a valid topological order; :class:`Graph` records the same
nodes as an explicit tape while it is being evaluated.
"""
import itertools

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "Node",
    "ShapeError",
    "make_node",
    "forward_eval",
    "backward",
    "grad_check",
    "as_tensor",
]

_ids = itertools.count()
_tapes = []


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Node:
    __slots__ = ("id", "op", "inputs", "output")

    def __init__(self, id, op, inputs, output):
        self.id = id
        self.op = op
        self.inputs = inputs
        self.output = output

    def __repr__(self):
        return f"Node({self.id}, {self.op!r}, inputs={self.inputs}, shape={self.output.shape})"


class Tensor:
    """A float64 array that participates in reverse-mode differentiation."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.grad = None
        self.op = "leaf"
        self._parents = ()
        self._backward = None
        self.id = next(_ids)
        if _tapes:
            _tapes[-1]._record(self)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op!r}{label})"

    # arithmetic -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return make_node("neg", -self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def backward(self, cotangent=1.0):
        return _backprop(self, cotangent)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(op, data, parents, backward_fn):
    """Create the output tensor of an operation.

    ``backward_fn`` maps the output cotangent to a tuple with one entry per
    parent (``None`` for parents that receive no gradient).
    """
    parents = tuple(parents)
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.requires_grad = any(p.requires_grad for p in parents)
    out.name = None
    out.grad = None
    out.op = op
    out._parents = parents if out.requires_grad else ()
    out._backward = backward_fn if out.requires_grad else None
    out.id = next(_ids)
    if _tapes:
        _tapes[-1]._record(out, parents)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return make_node("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return make_node("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return make_node(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    return make_node(
        "div",
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def power(a, exponent):
    exponent = float(exponent)
    return make_node(
        "pow",
        a.data ** exponent,
        (a,),
        lambda g: (g * exponent * a.data ** (exponent - 1.0),),
    )


def exp(a):
    out = np.exp(a.data)
    return make_node("exp", out, (a,), lambda g: (g * out,))


def log(a):
    return make_node("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a):
    mask = a.data > 0
    return make_node("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def tsum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_node("sum", out, (a,), grad)


def tmean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def tmax(a, axis, keepdims=False):
    """Maximum along one axis; ties send the gradient to the first maximiser."""
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis)

    def grad(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        full = np.zeros(a.shape)
        np.put_along_axis(full, np.expand_dims(idx, axis), g, axis)
        return (full,)

    return make_node("max", out if keepdims else np.squeeze(out, axis), (a,), grad)


def reshape(a, shape):
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return make_node("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes):
    inv = np.argsort(axes)
    return make_node("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),))


def _backprop(output, cotangent=1.0):
    if not output.requires_grad:
        return {}
    seed = np.asarray(cotangent, dtype=np.float64)
    seed = np.broadcast_to(seed, output.shape).copy()
    order = []
    seen = set()
    stack = [output]
    while stack:
        t = stack.pop()
        if t.id in seen:
            continue
        seen.add(t.id)
        order.append(t)
        stack.extend(p for p in t._parents if p.requires_grad)
    order.sort(key=lambda t: t.id, reverse=True)
    grads = {output.id: seed}
    leaves = {}
    for t in order:
        g = grads.pop(t.id, None)
        if g is None:
            continue
        if t._backward is None:
            leaves[t.id] = (t, g)
            continue
        for p, pg in zip(t._parents, t._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if p.id in grads:
                grads[p.id] = grads[p.id] + pg
            else:
                grads[p.id] = pg
    for t, g in leaves.values():
        t.grad = g
    return {t.id: g for t, g in leaves.values()}


class Graph:
    """A define-by-run program over named inputs and trainable parameters.

    ``fn`` receives one keyword argument per input and per parameter (as
    :class:`Tensor` values) and returns a Tensor or a dict of Tensors.  The
    graph is rebuilt on every :func:`forward_eval`; ``nodes`` is the tape
    of the latest evaluation in topological order.
    """

    def __init__(self, fn, inputs, parameters=None):
        self.fn = fn
        self.input_shapes = {k: tuple(v) for k, v in inputs.items()}
        self.parameters = {k: np.asarray(v, dtype=np.float64) for k, v in (parameters or {}).items()}
        self.nodes = []
        self._index = {}
        self._param_tensors = {}
        self._outputs = {}
        self._last_inputs = None

    def _record(self, tensor, parents=()):
        ids = tuple(self._index[p.id] for p in parents if p.id in self._index)
        self._index[tensor.id] = len(self.nodes)
        self.nodes.append(Node(len(self.nodes), tensor.op, ids, tensor))

    def __enter__(self):
        self.nodes = []
        self._index = {}
        _tapes.append(self)
        return self

    def __exit__(self, *exc):
        _tapes.remove(self)
        return False


def forward_eval(graph, inputs):
    """Evaluate ``graph`` on named input arrays; returns named output arrays."""
    missing = set(graph.input_shapes) - set(inputs)
    extra = set(inputs) - set(graph.input_shapes)
    if missing or extra:
        raise ShapeError(f"input names do not match graph: missing {sorted(missing)}, unexpected {sorted(extra)}")
    arrays = {}
    for name, shape in graph.input_shapes.items():
        arr = np.asarray(inputs[name], dtype=np.float64)
        if arr.shape != shape:
            raise ShapeError(f"input node {name!r}: expected shape {shape}, got {arr.shape}")
        arrays[name] = arr
    with graph:
        feed = {k: Tensor(v, name=k) for k, v in arrays.items()}
        params = {k: Tensor(v, requires_grad=True, name=k) for k, v in graph.parameters.items()}
        try:
            result = graph.fn(**feed, **params)
        except ShapeError as err:
            node = len(graph.nodes)
            raise ShapeError(f"node {node}: {err}") from None
    if isinstance(result, Tensor):
        result = {"out": result}
    graph._outputs = dict(result)
    graph._param_tensors = params
    graph._last_inputs = arrays
    return {k: v.data.copy() for k, v in result.items()}


def backward(graph, output="out", cotangent=1.0):
    """Gradients of a scalar graph output with respect to every parameter."""
    if not graph._outputs:
        raise RuntimeError("forward_eval must run before backward")
    out = graph._outputs[output] if isinstance(output, str) else output
    if out.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {out.shape}")
    _backprop(out, cotangent)
    grads = {}
    for name, t in graph._param_tensors.items():
        grads[name] = t.grad if t.grad is not None else np.zeros(t.shape)
        t.grad = None
    return grads


def grad_check(graph, parameter, step=1e-5, inputs=None, output="out"):
    """Max relative error between the analytic gradient and central differences."""
    if step <= 0:
        raise ValueError("step must be positive")
    inputs = graph._last_inputs if inputs is None else inputs
    if inputs is None:
        raise RuntimeError("no inputs given and graph has not been evaluated")
    forward_eval(graph, inputs)
    analytic = backward(graph, output)[parameter]
    theta = graph.parameters[parameter]
    original = theta.copy()
    numeric = np.empty_like(theta)
    flat = theta.reshape(-1)
    try:
        for i in range(flat.size):
            flat[i] = original.flat[i] + step
            hi = float(forward_eval(graph, inputs)[output])
            flat[i] = original.flat[i] - step
            lo = float(forward_eval(graph, inputs)[output])
            flat[i] = original.flat[i]
            numeric.flat[i] = (hi - lo) / (2.0 * step)
    finally:
        theta[...] = original
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric) / denom))
