"""Minimal dense-array compute engine with reverse-mode differentiation.

Everything downstream (the denoiser, the deterministic sampler, every task
loss) is expressed in the closed primitive set below, so a single scalar
criterion can be back-propagated through an arbitrarily long chain of
sampler steps to the initial noise array.

Design notes:
  * A ``Graph`` is a flat tape. Node ids are creation order, so reverse
    iteration is already a reverse topological order.
  * Tensors are thin wrappers around numpy arrays. An un-recorded tensor is
    just a value; a recorded one additionally knows its (graph, node_id).
  * Graphs are rebuilt every use and are confined to one thread. Plain
    forward evaluation never touches a graph and is freely shareable.
  * ``Graph.checkpoint`` trades compute for memory: the wrapped segment is
    run without recording during the forward pass and re-executed with
    recording when its backward turn comes.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64
FLOAT32 = np.float32


class ShapeError(ValueError):
    """Raised when primitive inputs do not conform to its shape rule."""


class GraphError(RuntimeError):
    """Raised on invalid recording or backward requests."""


class Tensor:
    __slots__ = ("data", "graph", "node_id")

    def __init__(self, data: np.ndarray, graph: "Graph | None" = None,
                 node_id: int | None = None):
        self.data = data
        self.graph = graph
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def recorded(self) -> bool:
        return self.graph is not None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        tag = f", node={self.node_id}" if self.recorded else ""
        return f"Tensor(shape={self.shape}{tag})"


def tensor(values, dtype=None) -> Tensor:
    """Wrap values as an un-recorded constant tensor."""
    arr = np.asarray(values, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
    return Tensor(arr)


class _Node:
    __slots__ = ("parent_ids", "backward_fn", "needs", "is_leaf", "ckpt",
                 "leaf_spec")

    def __init__(self, parent_ids, backward_fn, needs=(), is_leaf=False,
                 ckpt=None, leaf_spec=None):
        self.parent_ids = parent_ids
        self.backward_fn = backward_fn  # fn(grad, needs) -> per-parent grads
        self.needs = needs              # which parents are recorded
        self.is_leaf = is_leaf
        self.ckpt = ckpt  # (fn, input_datas) for checkpoint segments
        self.leaf_spec = leaf_spec  # (shape, dtype) for leaves


class GradientMap:
    """node-id -> gradient array, one entry per gradient-requiring leaf."""

    def __init__(self, grads: dict[int, np.ndarray]):
        self._grads = grads

    def wrt(self, t: Tensor) -> np.ndarray:
        if t.node_id is None or t.node_id not in self._grads:
            raise GraphError("tensor is not a gradient-requiring leaf of this graph")
        return self._grads[t.node_id]

    def __len__(self) -> int:
        return len(self._grads)

    def items(self):
        return self._grads.items()


class Graph:
    """Recording tape. Confine each instance to a single thread."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self.peak_retained = 0

    @property
    def node_count(self) -> int:
        return len(self._nodes)

    def _record(self, node: _Node) -> int:
        self._nodes.append(node)
        if len(self._nodes) > self.peak_retained:
            self.peak_retained = len(self._nodes)
        return len(self._nodes) - 1

    def leaf(self, values, dtype=None) -> Tensor:
        """Record a gradient-requiring input. Do not mutate it afterwards."""
        arr = np.asarray(values, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
        node_id = self._record(_Node((), None, is_leaf=True,
                                     leaf_spec=(arr.shape, arr.dtype)))
        return Tensor(arr, self, node_id)

    def checkpoint(self, fn: Callable[..., Tensor], *inputs: Tensor) -> Tensor:
        """Run ``fn`` as a re-executed segment.

        ``fn`` must be deterministic, must consume only its arguments plus
        un-recorded constants, and must return a single tensor.
        """
        detached = tuple(Tensor(t.data) for t in inputs)
        out = fn(*detached)
        if not isinstance(out, Tensor):
            raise GraphError("checkpoint function must return a Tensor")
        if out.recorded:
            raise GraphError("checkpoint function must not touch recorded tensors")
        parent_ids = tuple(t.node_id if t.graph is self else None for t in inputs)
        for t in inputs:
            if t.graph is not None and t.graph is not self:
                raise GraphError("checkpoint inputs recorded on a different graph")
        if all(p is None for p in parent_ids):
            return out
        node_id = self._record(_Node(parent_ids, None,
                                     ckpt=(fn, tuple(t.data for t in inputs))))
        return Tensor(out.data, self, node_id)

    def backward(self, root: Tensor) -> GradientMap:
        """Reverse-mode gradients of a recorded scalar w.r.t. all leaves."""
        if root.graph is not self or root.node_id is None:
            raise GraphError("backward root is not recorded on this graph")
        if root.data.size != 1:
            raise GraphError(f"backward root must be scalar, got shape {root.shape}")
        seed = np.ones(root.data.shape, dtype=root.data.dtype)
        grads = self._backward_from(root.node_id, seed)
        out: dict[int, np.ndarray] = {}
        for idx, node in enumerate(self._nodes):
            if node.is_leaf:
                g = grads[idx]
                if g is None:
                    shape, dtype = node.leaf_spec
                    g = np.zeros(shape, dtype=dtype)
                out[idx] = g
        return GradientMap(out)

    def _backward_from(self, root_id: int, seed: np.ndarray) -> list:
        grads: list[np.ndarray | None] = [None] * len(self._nodes)
        grads[root_id] = seed
        for idx in range(root_id, -1, -1):
            g = grads[idx]
            if g is None:
                continue
            node = self._nodes[idx]
            if node.is_leaf:
                continue
            if node.ckpt is not None:
                parts = self._replay_checkpoint(node, g)
            else:
                parts = node.backward_fn(g, node.needs)
            for pid, pg in zip(node.parent_ids, parts):
                if pid is None or pg is None:
                    continue
                if grads[pid] is None:
                    grads[pid] = pg
                else:
                    grads[pid] = grads[pid] + pg
            grads[idx] = None if idx != root_id else grads[idx]
        return grads

    def _replay_checkpoint(self, node: _Node, grad_out: np.ndarray):
        fn, input_datas = node.ckpt
        sub = Graph()
        sub_leaves = [sub.leaf(d) for d in input_datas]
        out = fn(*sub_leaves)
        if out.graph is not sub:
            raise GraphError("checkpoint function did not record onto the replay graph")
        retained = len(self._nodes) + sub.node_count
        if retained > self.peak_retained:
            self.peak_retained = retained
        sub_grads = sub._backward_from(out.node_id, grad_out)
        return tuple(sub_grads[leaf.node_id] for leaf in sub_leaves)


def _find_graph(inputs: Sequence[Tensor], op: str) -> Graph | None:
    graph = None
    for t in inputs:
        if t.graph is None:
            continue
        if graph is None:
            graph = t.graph
        elif graph is not t.graph:
            raise GraphError(f"{op}: inputs recorded on different graphs")
    return graph


def _emit(op: str, out_data: np.ndarray, inputs: Sequence[Tensor],
          backward_fn) -> Tensor:
    graph = _find_graph(inputs, op)
    if graph is None:
        return Tensor(out_data)
    parent_ids = tuple(t.node_id if t.graph is graph else None for t in inputs)
    needs = tuple(pid is not None for pid in parent_ids)
    node_id = graph._record(_Node(parent_ids, backward_fn, needs))
    return Tensor(out_data, graph, node_id)


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# --- primitives ------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g, needs: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("subtract", a, b)
    return _emit("subtract", a.data - b.data, (a, b),
                 lambda g, needs: (g, -g if needs[1] else None))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("elementwise-multiply", a, b)
    ad, bd = a.data, b.data
    return _emit("elementwise-multiply", ad * bd, (a, b),
                 lambda g, needs: (g * bd if needs[0] else None,
                                   g * ad if needs[1] else None))


def smul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scalar-multiply", a.data * c, (a,),
                 lambda g, needs: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[0]:
        raise ShapeError(f"matrix-multiply: incompatible shapes {ad.shape} and {bd.shape}")
    return _emit("matrix-multiply", ad @ bd, (a, b),
                 lambda g, needs: (g @ bd.T if needs[0] else None,
                                   ad.T @ g if needs[1] else None))


def silu(a: Tensor) -> Tensor:
    ad = a.data
    sig = 0.5 * (1.0 + np.tanh(0.5 * ad))
    return _emit("silu", ad * sig, (a,),
                 lambda g, needs: (g * (sig * (1.0 + ad * (1.0 - sig))),))


def concat_last(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim != bd.ndim or ad.shape[:-1] != bd.shape[:-1]:
        raise ShapeError(f"concat-last-axis: shape mismatch {ad.shape} vs {bd.shape}")
    split = ad.shape[-1]
    return _emit("concat-last-axis", np.concatenate((ad, bd), axis=-1), (a, b),
                 lambda g, needs: (g[..., :split], g[..., split:]))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.data.size:
        raise ShapeError(f"reshape: cannot view {a.data.shape} as {shape}")
    old = a.data.shape
    return _emit("reshape", a.data.reshape(shape), (a,),
                 lambda g, needs: (g.reshape(old),))


def tsum(a: Tensor) -> Tensor:
    shape, dtype = a.data.shape, a.data.dtype
    return _emit("sum", np.asarray(a.data.sum(), dtype=dtype), (a,),
                 lambda g, needs: (np.full(shape, g, dtype=dtype),))


def tmean(a: Tensor) -> Tensor:
    shape, dtype = a.data.shape, a.data.dtype
    n = a.data.size
    return _emit("mean", np.asarray(a.data.mean(), dtype=dtype), (a,),
                 lambda g, needs: (np.full(shape, g / n, dtype=dtype),))


def gather(a: Tensor, indices) -> Tensor:
    """Pick flat (row-major) positions out of ``a``; returns a 1-D tensor."""
    idx = np.asarray(indices, dtype=np.intp).reshape(-1)
    flat = a.data.reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= flat.size):
        raise ShapeError(f"index-gather: indices out of range for size {flat.size}")
    shape, dtype = a.data.shape, a.data.dtype

    def backward(g, needs):
        acc = np.zeros(flat.size, dtype=dtype)
        np.add.at(acc, idx, g)
        return (acc.reshape(shape),)

    return _emit("index-gather", flat[idx], (a,), backward)


def avg_pool_pairs(a: Tensor) -> Tensor:
    """Average adjacent pairs along the last axis (frame axis)."""
    ad = a.data
    m = ad.shape[-1]
    if m % 2 != 0:
        raise ShapeError(f"average-pool-2-frames: last axis {m} is odd")
    pooled = ad.reshape(ad.shape[:-1] + (m // 2, 2)).mean(axis=-1)
    return _emit("average-pool-2-frames", pooled, (a,),
                 lambda g, needs: (np.repeat(g * 0.5, 2, axis=-1),))


def absolute(a: Tensor) -> Tensor:
    ad = a.data
    return _emit("absolute-value", np.abs(ad), (a,),
                 lambda g, needs: (g * np.sign(ad),))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _emit("square", ad * ad, (a,),
                 lambda g, needs: (g * (2.0 * ad),))


def min_const(a: Tensor, c: float) -> Tensor:
    c = float(c)
    ad = a.data
    return _emit("minimum-with-constant", np.minimum(ad, c), (a,),
                 lambda g, needs: (g * (ad < c),))


def sqrt(a: Tensor) -> Tensor:
    """Elementwise square root; the derivative at 0 is taken to be 0."""
    ad = a.data
    if np.any(ad < 0):
        raise ShapeError("sqrt: negative input")
    root = np.sqrt(ad)

    def backward(g, needs):
        out = np.zeros_like(root)
        np.divide(g * 0.5, root, out=out, where=root > 0)
        return (out,)

    return _emit("sqrt", root, (a,), backward)


_PRIMITIVES: dict[str, Callable] = {
    "add": add,
    "subtract": sub,
    "elementwise-multiply": mul,
    "scalar-multiply": smul,
    "matrix-multiply": matmul,
    "silu": silu,
    "concat-last-axis": concat_last,
    "reshape": reshape,
    "sum": tsum,
    "mean": tmean,
    "index-gather": gather,
    "average-pool-2-frames": avg_pool_pairs,
    "absolute-value": absolute,
    "square": square,
    "minimum-with-constant": min_const,
    "sqrt": sqrt,
}


def primitive_names() -> tuple[str, ...]:
    return tuple(_PRIMITIVES)


def apply_primitive(op: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Name-based dispatch into the closed primitive set."""
    try:
        fn = _PRIMITIVES[op]
    except KeyError:
        raise ShapeError(f"unknown primitive {op!r}") from None
    return fn(*inputs, **attrs)


# --- gradient oracle --------------------------------------------------------


def grad_check(fn: Callable[[Tensor], Tensor], point: Tensor,
               step: float = 1e-5) -> float:
    """Max relative error between the tape gradient and central differences.

    ``fn`` must be a deterministic scalar-valued function of one tensor and
    has to work on both recorded and plain tensors.
    """
    if step <= 0:
        raise ValueError("grad_check: step must be positive")
    x0 = np.asarray(point.data if isinstance(point, Tensor) else point,
                    dtype=DEFAULT_DTYPE)

    g = Graph()
    x = g.leaf(x0.copy())
    out = fn(x)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise GraphError("grad_check: function must return a scalar tensor")
    analytic = g.backward(out).wrt(x).reshape(-1)

    flat = x0.reshape(-1)
    fd = np.empty_like(flat)
    for i in range(flat.size):
        bump = np.zeros_like(flat)
        bump[i] = step
        f_plus = fn(Tensor((flat + bump).reshape(x0.shape))).item()
        f_minus = fn(Tensor((flat - bump).reshape(x0.shape))).item()
        fd[i] = (f_plus - f_minus) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1e-6)
    return float(np.max(np.abs(analytic - fd) / denom))
