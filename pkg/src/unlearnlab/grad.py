"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable quantity in the package flows through this engine.
The op set is deliberately small: elementwise arithmetic on equal shapes,
scalar-tensor arithmetic, 2-D matmul, a handful of nonlinearities, axis
reductions, softmax over the last axis, concat, reshape and clip. There is
no general broadcasting; shapes must be made explicit with reshape/concat.

Gradient conventions:
  * max-reduce routes the gradient to the first argmax of each reduced
    slice (deterministic tie-break),
  * clip passes the gradient through strictly inside the bounds and zeros
    it outside,
  * backward() accumulates in a fixed topological order, so replaying the
    same graph is bit-identical.
"""

from __future__ import annotations

import numpy as np

from unlearnlab import kernels as K
from unlearnlab.errors import ContractError, DomainError, ShapeError


class Tensor:
    """A dense float64 array plus its position in the computation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # Operator sugar (tensor-tensor needs equal shapes; scalars are floats).
    def __add__(self, other):
        return add_scalar(self, other) if np.isscalar(other) else add(self, other)

    def __radd__(self, other):
        return add_scalar(self, other)

    def __sub__(self, other):
        return add_scalar(self, -other) if np.isscalar(other) else sub(self, other)

    def __rsub__(self, other):
        return add_scalar(scalar_mul(self, -1.0), other)

    def __mul__(self, other):
        return scalar_mul(self, other) if np.isscalar(other) else mul(self, other)

    def __rmul__(self, other):
        return scalar_mul(self, other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        return backward(self)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def constant(data):
    return Tensor(data, requires_grad=False)


def _track(*operands):
    return any(t.requires_grad for t in operands)


def _make(data, operands, backward_fn, op):
    if _track(*operands):
        return Tensor(data, requires_grad=True, _parents=tuple(operands),
                      _backward=backward_fn, op=op)
    return Tensor(data, op=op)


def _check_same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


# ---------------------------------------------------------------------------
# Primitives


def add(a, b):
    _check_same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    _check_same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b):
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def add_scalar(a, c):
    c = float(c)
    return _make(a.data + c, (a,), lambda g: (g,), "add_scalar")


def scalar_mul(a, c):
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scalar_mul")


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: expects 2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dims {a.data.shape} @ {b.data.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def relu(a):
    ad = a.data
    return _make(K.relu_fwd(ad), (a,), lambda g: (K.relu_bwd(ad, g),), "relu")


def tanh(a):
    y = K.tanh_fwd(a.data)
    return _make(y, (a,), lambda g: (K.tanh_bwd(y, g),), "tanh")


def sigmoid(a):
    y = K.sigmoid_fwd(a.data)
    return _make(y, (a,), lambda g: (K.sigmoid_bwd(y, g),), "sigmoid")


def exp(a):
    y = np.exp(a.data)
    if not np.all(np.isfinite(y)):
        raise DomainError("exp overflow")
    return _make(y, (a,), lambda g: (g * y,), "exp")


def log(a):
    if np.any(a.data <= 0.0):
        raise DomainError("log of non-positive input")
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def clip(a, lo, hi):
    lo, hi = float(lo), float(hi)
    ad = a.data
    return _make(K.clip_fwd(ad, lo, hi), (a,),
                 lambda g: (K.clip_bwd(ad, g, lo, hi),), "clip")


def _reduce_grad(g, in_shape, axis):
    if axis is None:
        return np.full(in_shape, g)
    return np.broadcast_to(np.expand_dims(g, axis), in_shape).copy()


def sum(a, axis=None):  # noqa: A001 - mirrors the primitive name
    in_shape = a.data.shape
    y = a.data.sum(axis=axis)
    return _make(y, (a,), lambda g: (_reduce_grad(g, in_shape, axis),), "sum")


def mean(a, axis=None):
    in_shape = a.data.shape
    n = a.data.size if axis is None else in_shape[axis]
    y = a.data.mean(axis=axis)
    return _make(y, (a,), lambda g: (_reduce_grad(g, in_shape, axis) / n,), "mean")


def max_reduce(a, axis=None):
    """Max over an axis (or all entries). Gradient goes to the first argmax
    of each reduced slice; ties break toward the lowest index."""
    ad = a.data
    if axis is None:
        flat = ad.reshape(-1)
        idx = int(flat.argmax())
        y = flat[idx]

        def back(g):
            gx = np.zeros_like(ad)
            gx.reshape(-1)[idx] = g
            return (gx,)

        return _make(y, (a,), back, "max_reduce")

    y = ad.max(axis=axis)
    arg = np.expand_dims(ad.argmax(axis=axis), axis)

    def back_axis(g):
        gx = np.zeros_like(ad)
        np.put_along_axis(gx, arg, np.expand_dims(g, axis), axis)
        return (gx,)

    return _make(y, (a,), back_axis, "max_reduce")


def softmax(a):
    """Softmax over the last axis."""
    if a.data.ndim == 0:
        raise ShapeError("softmax needs at least one axis")
    shp = a.data.shape
    x2 = a.data.reshape(-1, shp[-1])
    y2 = K.softmax_fwd(x2)

    def back(g):
        return (K.softmax_bwd(y2, g.reshape(-1, shp[-1])).reshape(shp),)

    return _make(y2.reshape(shp), (a,), back, "softmax")


def reshape(a, shape):
    shape = tuple(shape)
    in_shape = a.data.shape
    if int(np.prod(shape, dtype=np.int64)) != a.data.size:
        raise ShapeError(f"reshape: {in_shape} -> {shape}")
    return _make(a.data.reshape(shape), (a,),
                 lambda g: (g.reshape(in_shape),), "reshape")


def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of zero tensors")
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    y = np.concatenate([t.data for t in tensors], axis=axis)

    def back(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _make(y, tuple(tensors), back, "concat")


def permute_cols(a, idx):
    """Select columns of a 2-D tensor by a constant index array.

    Structural op (constant index, no data-dependent control flow); the
    backward pass scatter-adds into the source columns, so repeated
    indices are valid. Used for patch extraction and vocabulary-subset
    selection, where a one-hot matmul would waste almost all its work.
    """
    if a.data.ndim != 2:
        raise ShapeError(f"permute_cols: expects 2-D, got {a.data.shape}")
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1 or (idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[1])):
        raise ShapeError("permute_cols: bad index array")
    in_shape = a.data.shape

    def back(g):
        gx = np.zeros(in_shape)
        np.add.at(gx, (slice(None), idx), g)
        return (gx,)

    return _make(np.ascontiguousarray(a.data[:, idx]), (a,), back, "permute_cols")


_PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scalar-mul": scalar_mul,
    "matmul": matmul,
    "relu": relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "exp": exp,
    "log": log,
    "sum": sum,
    "mean": mean,
    "max-reduce": max_reduce,
    "softmax": softmax,
    "concat": concat,
    "reshape": reshape,
    "clip": clip,
}


def primitive_forward(kind, *operands, **kwargs):
    """Dispatch a primitive by name. Mostly useful for generic testing."""
    if kind not in _PRIMITIVES:
        raise ContractError(f"unknown primitive {kind!r}")
    if kind == "concat":
        return concat(operands, **kwargs)
    return _PRIMITIVES[kind](*operands, **kwargs)


# ---------------------------------------------------------------------------
# Reverse pass


def _topo_order(root):
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        # Reversed so parents are visited in recorded order, keeping the
        # accumulation order deterministic.
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def backward(root):
    """Reverse pass from a scalar root.

    Populates ``.grad`` on every requires_grad tensor reachable from the
    root and returns a map {leaf tensor: gradient array} over the
    requires_grad leaves. Leaves not reachable from the root keep a zero
    gradient (absent from the map means identically zero).
    """
    if root.data.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.data.shape}")
    if not root.requires_grad:
        return {}

    grads = {id(root): np.ones_like(root.data)}
    leaf_map = {}
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g
        if node._backward is None:
            if not node._parents:
                leaf_map[node] = g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if not parent.requires_grad or pg is None:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg
    return leaf_map


def grad_check(fn, points, step=1e-5):
    """Compare analytic gradients of a scalar-valued fn against central
    finite differences.

    ``points`` is a list of float64 arrays (one per argument). Returns the
    max over all coordinates of |analytic - numeric| / max(1, |numeric|).
    """
    points = [np.asarray(p, dtype=np.float64) for p in points]
    leaves = [Tensor(p, requires_grad=True) for p in points]
    out = fn(*leaves)
    gmap = backward(out)
    analytic = [gmap.get(leaf, np.zeros_like(leaf.data)) for leaf in leaves]

    worst = 0.0
    for k, p in enumerate(points):
        flat = p.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = fn(*[Tensor(q) for q in points]).item()
            flat[i] = orig - step
            lo = fn(*[Tensor(q) for q in points]).item()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * step)
            err = abs(analytic[k].reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
