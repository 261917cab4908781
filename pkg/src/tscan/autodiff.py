"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is a dynamic tape: every operation returns a node holding the
result tensor, references to the input nodes, and the local gradient rule.
``backward`` walks the tape once in reverse topological order and
accumulates gradients on every reachable node, summing contributions when
a node feeds several consumers. Tensors are immutable; optimizers rebind a
parameter node to a fresh tensor between passes.

Broadcasting is deliberately restricted to scalar-tensor (plus the named
row-vector ops); anything else must be reshaped explicitly so that shape
bugs fail loudly instead of silently broadcasting.
"""

from __future__ import annotations

import json
from typing import Callable, Sequence

import numpy as np

LAYER_NORM_EPS = 1e-5


class ShapeError(ValueError):
    """Operand shapes do not conform to an operation's contract."""


class Tensor:
    """Immutable dense float64 array in row-major order."""

    __slots__ = ("data",)

    def __init__(self, data) -> None:
        arr = np.array(data, dtype=np.float64, order="C", copy=True)
        arr.flags.writeable = False
        self.data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Fast path for freshly computed op results: no defensive copy.
        # (np.ascontiguousarray would promote 0-d scalars to 1-d.)
        out = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        if arr.flags.writeable:
            arr.flags.writeable = False
        out.data = arr
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        """Read-only view of the underlying array."""
        return self.data

    def tolist(self):
        return self.data.tolist()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


class Node:
    """A tensor plus its position in the recorded computation graph.

    ``grad`` is populated by :func:`backward` and always matches the
    value's shape. Leaf nodes (constants, parameters) have no parents.
    """

    __slots__ = ("value", "parents", "grad", "op", "_rule")

    def __init__(self, value, parents: tuple = (), rule: Callable | None = None,
                 op: str = "leaf") -> None:
        self.value = value if isinstance(value, Tensor) else Tensor(value)
        self.parents = tuple(parents)
        self._rule = rule
        self.op = op
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    def __repr__(self) -> str:
        return f"Node(op={self.op!r}, shape={self.shape})"


def constant(data, op: str = "const") -> Node:
    """Leaf node that is not registered anywhere; gradients still reach it."""
    return Node(data if isinstance(data, Tensor) else Tensor(data), op=op)


def _node(arr: np.ndarray, parents: tuple, rule: Callable, op: str) -> Node:
    return Node(Tensor._wrap(arr), parents, rule, op)


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------

def matmul(a: Node, b: Node) -> Node:
    """Matrix product over the last two axes; equal leading batch dims."""
    ad, bd = a.data, b.data
    if (ad.ndim < 2 or bd.ndim < 2 or ad.ndim != bd.ndim
            or ad.shape[:-2] != bd.shape[:-2] or ad.shape[-1] != bd.shape[-2]):
        raise ShapeError(f"matmul: incompatible shapes {ad.shape} and {bd.shape}")

    def rule(g):
        return g @ bd.swapaxes(-1, -2), ad.swapaxes(-1, -2) @ g

    return _node(ad @ bd, (a, b), rule, "matmul")


def add(a: Node, b) -> Node:
    """Elementwise sum; second operand may be a same-shape node or a scalar."""
    if isinstance(b, Node):
        if a.shape != b.shape:
            raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
        return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")
    return _node(a.data + float(b), (a,), lambda g: (g,), "add_scalar")


def sub(a: Node, b) -> Node:
    if isinstance(b, Node):
        if a.shape != b.shape:
            raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")
        return _node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")
    return add(a, -float(b))


def mul(a: Node, b) -> Node:
    """Elementwise product; second operand may be a same-shape node or a scalar."""
    if isinstance(b, Node):
        if a.shape != b.shape:
            raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
        ad, bd = a.data, b.data
        return _node(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")
    c = float(b)
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def scale(a: Node, c: float) -> Node:
    return mul(a, float(c))


def neg(a: Node) -> Node:
    return mul(a, -1.0)


def div(a: Node, b) -> Node:
    """Elementwise quotient; denominator may be same-shape, a size-1 node, or a scalar."""
    if not isinstance(b, Node):
        return mul(a, 1.0 / float(b))
    ad, bd = a.data, b.data
    if bd.shape == ad.shape:
        def rule(g):
            return g / bd, -g * ad / (bd * bd)
        return _node(ad / bd, (a, b), rule, "div")
    if bd.size == 1:
        s = float(bd.reshape(()))

        def rule(g):
            gb = -(g * ad).sum() / (s * s)
            return g / s, np.full(bd.shape, gb)

        return _node(ad / s, (a, b), rule, "div_scalar")
    raise ShapeError(f"div: shapes {ad.shape} and {bd.shape} differ")


def maximum(a: Node, b: Node) -> Node:
    """Elementwise max; ties route their gradient to the first operand."""
    if a.shape != b.shape:
        raise ShapeError(f"maximum: shapes {a.shape} and {b.shape} differ")
    pick = a.data >= b.data
    out = np.where(pick, a.data, b.data)
    return _node(out, (a, b), lambda g: (g * pick, g * ~pick), "maximum")


def relu(a: Node) -> Node:
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def clamp_min(a: Node, c: float) -> Node:
    c = float(c)
    mask = a.data > c
    return _node(np.maximum(a.data, c), (a,), lambda g: (g * mask,), "clamp_min")


def log(a: Node) -> Node:
    ad = a.data
    return _node(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sigmoid(a: Node) -> Node:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def transpose(a: Node) -> Node:
    """Swap the last two axes."""
    if a.data.ndim < 2:
        raise ShapeError(f"transpose: needs rank >= 2, got shape {a.shape}")
    return _node(a.data.swapaxes(-1, -2), (a,),
                 lambda g: (g.swapaxes(-1, -2),), "transpose")


def permute(a: Node, axes: Sequence[int]) -> Node:
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError(f"permute: axes {axes} invalid for shape {a.shape}")
    inv = tuple(int(i) for i in np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,),
                 lambda g: (np.transpose(g, inv),), "permute")


def reshape(a: Node, shape: Sequence[int]) -> Node:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.data.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    src = a.shape
    return _node(a.data.reshape(shape), (a,),
                 lambda g: (g.reshape(src),), "reshape")


def concat(nodes: Sequence[Node], axis: int) -> Node:
    nodes = list(nodes)
    if not nodes:
        raise ShapeError("concat: needs at least one input")
    rank = nodes[0].data.ndim
    ax = axis if axis >= 0 else rank + axis
    if not 0 <= ax < rank:
        raise ShapeError(f"concat: axis {axis} out of bounds for rank {rank}")
    ref = list(nodes[0].shape)
    for n in nodes[1:]:
        other = list(n.shape)
        if len(other) != rank or other[:ax] != ref[:ax] or other[ax + 1:] != ref[ax + 1:]:
            raise ShapeError(f"concat: shapes {nodes[0].shape} and {n.shape} "
                             f"differ off axis {axis}")
    datas = [n.data for n in nodes]
    splits = np.cumsum([d.shape[ax] for d in datas])[:-1]

    def rule(g):
        return tuple(np.split(g, splits, axis=ax))

    return _node(np.concatenate(datas, axis=ax), tuple(nodes), rule, "concat")


def _norm_axis(axis: int, ndim: int, op: str) -> int:
    ax = axis if axis >= 0 else ndim + axis
    if not 0 <= ax < ndim:
        raise ShapeError(f"{op}: axis {axis} out of bounds for rank {ndim}")
    return ax


def sum(a: Node, axis: int | None = None) -> Node:  # noqa: A001 - op name
    src = a.shape
    if axis is None:
        return _node(np.asarray(a.data.sum()), (a,),
                     lambda g: (np.broadcast_to(g, src),), "sum")
    ax = _norm_axis(axis, a.data.ndim, "sum")

    def rule(g):
        return (np.broadcast_to(np.expand_dims(g, ax), src),)

    return _node(a.data.sum(axis=ax), (a,), rule, "sum")


def mean(a: Node, axis: int | None = None) -> Node:
    src = a.shape
    if axis is None:
        k = a.data.size
        return _node(np.asarray(a.data.mean()), (a,),
                     lambda g: (np.broadcast_to(g / k, src),), "mean")
    ax = _norm_axis(axis, a.data.ndim, "mean")
    k = src[ax]

    def rule(g):
        return (np.broadcast_to(np.expand_dims(g / k, ax), src),)

    return _node(a.data.mean(axis=ax), (a,), rule, "mean")


def softmax(a: Node, axis: int = -1) -> Node:
    """Exp-normalize along ``axis``, stabilized by max subtraction."""
    x = a.data
    ax = _norm_axis(axis, x.ndim, "softmax")
    e = np.exp(x - x.max(axis=ax, keepdims=True))
    s = e / e.sum(axis=ax, keepdims=True)

    def rule(g):
        dot = (g * s).sum(axis=ax, keepdims=True)
        return (s * (g - dot),)

    return _node(s, (a,), rule, "softmax")


def layer_norm(a: Node, eps: float = LAYER_NORM_EPS) -> Node:
    """Normalize the last axis to zero mean, unit variance (no affine)."""
    x = a.data
    if x.ndim < 1:
        raise ShapeError("layer_norm: needs at least one axis")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def rule(g):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gym),)

    return _node(y, (a,), rule, "layer_norm")


def add_rowvec(x: Node, v: Node) -> Node:
    """Add a length-d vector to every row of x (explicit, named broadcast)."""
    xd, vd = x.data, v.data
    if vd.ndim != 1 or xd.ndim < 1 or xd.shape[-1] != vd.shape[0]:
        raise ShapeError(f"add_rowvec: shapes {xd.shape} and {vd.shape}")
    lead = tuple(range(xd.ndim - 1))
    return _node(xd + vd, (x, v), lambda g: (g, g.sum(axis=lead)), "add_rowvec")


def mul_rowvec(x: Node, v: Node) -> Node:
    """Scale every row of x elementwise by a length-d vector."""
    xd, vd = x.data, v.data
    if vd.ndim != 1 or xd.ndim < 1 or xd.shape[-1] != vd.shape[0]:
        raise ShapeError(f"mul_rowvec: shapes {xd.shape} and {vd.shape}")
    lead = tuple(range(xd.ndim - 1))
    return _node(xd * vd, (x, v),
                 lambda g: (g * vd, (g * xd).sum(axis=lead)), "mul_rowvec")


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))
    return order


def backward(loss: Node, retain_graph: bool = False) -> None:
    """Populate ``grad`` on every node reachable from a scalar loss.

    Gradients accumulate additively when a node feeds several consumers
    and across repeated calls on the same leaves (mini-batch accumulation);
    call ``ParamStore.zero_grads`` between optimizer steps. Unless
    ``retain_graph`` is set, the tape is freed as it is consumed.
    """
    if loss.value.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    order = _topo_order(loss)
    seed = np.ones_like(loss.data)
    loss.grad = seed if loss.grad is None else loss.grad + seed
    for node in reversed(order):
        if node._rule is None:
            continue
        g = node.grad
        if g is None:
            continue
        for parent, pg in zip(node.parents, node._rule(g)):
            if pg is None:
                continue
            parent.grad = pg if parent.grad is None else parent.grad + pg
        if not retain_graph:
            node.parents = ()
            node._rule = None
            node.grad = None


def depends_on(node: Node, ancestor: Node) -> bool:
    """True when ``ancestor`` is reachable from ``node`` through the tape."""
    stack, seen = [node], set()
    while stack:
        cur = stack.pop()
        if cur is ancestor:
            return True
        if id(cur) in seen:
            continue
        seen.add(id(cur))
        stack.extend(cur.parents)
    return False


# ---------------------------------------------------------------------------
# parameter registry and checkpoint format
# ---------------------------------------------------------------------------

class ParamStore:
    """Registry of trainable nodes under unique hierarchical names.

    The on-disk format is a single flat file: one JSON header line mapping
    each name to its shape and byte offset, followed by the concatenated
    little-endian float64 payloads in name-sorted order.
    """

    def __init__(self) -> None:
        self._nodes: dict[str, Node] = {}

    def register(self, name: str, init) -> Node:
        if name in self._nodes:
            raise ValueError(f"parameter {name!r} already registered")
        node = Node(init if isinstance(init, Tensor) else Tensor(init),
                    op=f"param:{name}")
        self._nodes[name] = node
        return node

    def __getitem__(self, name: str) -> Node:
        return self._nodes[name]

    def __contains__(self, name: str) -> bool:
        return name in self._nodes

    def __len__(self) -> int:
        return len(self._nodes)

    def names(self) -> list[str]:
        return sorted(self._nodes)

    def items(self) -> list[tuple[str, Node]]:
        return [(name, self._nodes[name]) for name in self.names()]

    def zero_grads(self) -> None:
        for node in self._nodes.values():
            node.grad = None

    def assign(self, name: str, array) -> None:
        """Rebind a parameter to a new tensor (used by optimizers)."""
        node = self._nodes[name]
        new = array if isinstance(array, Tensor) else Tensor(array)
        if new.shape != node.shape:
            raise ShapeError(f"assign {name!r}: shape {new.shape} != {node.shape}")
        node.value = new

    def copy_values(self) -> dict[str, np.ndarray]:
        return {name: np.array(node.data) for name, node in self.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        missing = set(self._nodes) - set(values)
        extra = set(values) - set(self._nodes)
        if missing or extra:
            raise ValueError(f"parameter names mismatch: missing={sorted(missing)} "
                             f"unexpected={sorted(extra)}")
        for name, arr in values.items():
            self.assign(name, arr)

    def save(self, path) -> None:
        header: dict[str, dict] = {}
        blobs: list[bytes] = []
        offset = 0
        for name in self.names():
            arr = np.ascontiguousarray(self._nodes[name].data, dtype="<f8")
            header[name] = {"shape": list(arr.shape), "offset": offset}
            blobs.append(arr.tobytes())
            offset += arr.nbytes
        with open(path, "wb") as fh:
            fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
            fh.write(b"\n")
            for blob in blobs:
                fh.write(blob)

    @staticmethod
    def read_arrays(path) -> dict[str, np.ndarray]:
        with open(path, "rb") as fh:
            header = json.loads(fh.readline().decode("utf-8"))
            payload = fh.read()
        out: dict[str, np.ndarray] = {}
        for name, meta in header.items():
            shape = tuple(int(s) for s in meta["shape"])
            count = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(payload, dtype="<f8", count=count,
                                offset=int(meta["offset"]))
            out[name] = arr.reshape(shape).astype(np.float64)
        return out

    @classmethod
    def load(cls, path) -> "ParamStore":
        store = cls()
        for name, arr in cls.read_arrays(path).items():
            store.register(name, arr)
        return store

    def load_file(self, path) -> None:
        """Read a checkpoint into an already-built store, validating names/shapes."""
        self.load_values(self.read_arrays(path))
