"""Minimal reverse-mode autodiff over dense float64 numpy arrays.

Covers exactly the operator set the diagnosis model and its losses need:
matmul, elementwise arithmetic, concat, gathers/scatters over node and edge
index arrays, segment softmax for neighbor attention, sigmoid/log/exp,
row-wise cosine machinery, and squared L2 norms. Every operator's backward
rule accumulates exact gradients; `grad_check` compares them against central
finite differences.

A computation graph is confined to one thread. Leaves are created with
`param` (trainable, receives grads) or `constant`.
"""

from __future__ import annotations

import numpy as np

EPS_GUARD = 1e-12


class DiffNode:
    """One node of the computation graph.

    `value` is a float64 ndarray (0-d for scalars), `grad` a same-shape
    accumulator filled in by `backward`. Non-leaf nodes carry their parents
    and a backward rule returning one gradient (or None) per parent.
    """

    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad")

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=True):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"DiffNode(shape={self.value.shape}, leaf={not self.parents})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def item(self) -> float:
        return float(self.value)

    def backward(self):
        """Backpropagate from this scalar node through the graph.

        Visits each reachable node exactly once, in reverse topological
        order, accumulating parent gradients additively.
        """
        if self.value.ndim != 0:
            raise ValueError("backward() requires a scalar root")
        order = _toposort(self)
        for node in order:
            if node.requires_grad and node.grad is None:
                node.grad = np.zeros_like(node.value)
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node.backward_fn is None or not node.requires_grad:
                continue
            gs = node.backward_fn(node.grad)
            for parent, g in zip(node.parents, gs):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = parent.grad + g


def _toposort(root: DiffNode) -> list[DiffNode]:
    # Iterative DFS; recursion depth would scale with graph depth otherwise.
    order: list[DiffNode] = []
    seen: set[int] = set()
    stack: list[tuple[DiffNode, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def param(value) -> DiffNode:
    """Trainable leaf; grads accumulate here."""
    return DiffNode(np.array(value, dtype=np.float64), requires_grad=True)


def constant(value) -> DiffNode:
    """Non-trainable leaf (data, masks, labels)."""
    return DiffNode(np.asarray(value, dtype=np.float64), requires_grad=False)


def _as_node(x) -> DiffNode:
    return x if isinstance(x, DiffNode) else constant(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> DiffNode:
    a, b = _as_node(a), _as_node(b)
    return DiffNode(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        a.requires_grad or b.requires_grad,
    )


def sub(a, b) -> DiffNode:
    a, b = _as_node(a), _as_node(b)
    return DiffNode(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        a.requires_grad or b.requires_grad,
    )


def mul(a, b) -> DiffNode:
    a, b = _as_node(a), _as_node(b)
    return DiffNode(
        a.value * b.value,
        (a, b),
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
        a.requires_grad or b.requires_grad,
    )


def scale(a: DiffNode, c: float) -> DiffNode:
    c = float(c)
    return DiffNode(a.value * c, (a,), lambda g: (g * c,), a.requires_grad)


def matmul(a: DiffNode, b: DiffNode) -> DiffNode:
    a, b = _as_node(a), _as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    return DiffNode(
        a.value @ b.value,
        (a, b),
        lambda g: (g @ b.value.T, a.value.T @ g),
        a.requires_grad or b.requires_grad,
    )


def transpose(a: DiffNode) -> DiffNode:
    return DiffNode(a.value.T, (a,), lambda g: (g.T,), a.requires_grad)


def reshape(a: DiffNode, shape) -> DiffNode:
    old = a.value.shape
    return DiffNode(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),), a.requires_grad)


def concat(nodes, axis: int = 1) -> DiffNode:
    nodes = [_as_node(n) for n in nodes]
    sizes = [n.value.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return DiffNode(
        np.concatenate([n.value for n in nodes], axis=axis),
        nodes,
        backward,
        any(n.requires_grad for n in nodes),
    )


def gather_rows(a: DiffNode, idx) -> DiffNode:
    """Select rows `a[idx]`; scatter-adds gradients back (repeats allowed)."""
    idx = np.asarray(idx, dtype=np.intp)

    def backward(g):
        out = np.zeros_like(a.value)
        np.add.at(out, idx, g)
        return (out,)

    return DiffNode(a.value[idx], (a,), backward, a.requires_grad)


def segment_sum(a: DiffNode, seg_ids, n_segments: int) -> DiffNode:
    """Sum rows of `a` into `n_segments` buckets given per-row segment ids."""
    seg_ids = np.asarray(seg_ids, dtype=np.intp)
    if a.value.ndim == 1:
        out = np.bincount(seg_ids, weights=a.value, minlength=n_segments)
    else:
        out = np.zeros((n_segments,) + a.value.shape[1:])
        np.add.at(out, seg_ids, a.value)
    return DiffNode(out, (a,), lambda g: (g[seg_ids],), a.requires_grad)


def rowsum(a: DiffNode) -> DiffNode:
    """Sum each row of a 2-d array, returning a vector."""
    return DiffNode(
        a.value.sum(axis=1),
        (a,),
        lambda g: (np.repeat(g[:, None], a.value.shape[1], axis=1),),
        a.requires_grad,
    )


def total_sum(a: DiffNode) -> DiffNode:
    return DiffNode(a.value.sum(), (a,), lambda g: (np.full_like(a.value, float(g)),), a.requires_grad)


def mean(a: DiffNode) -> DiffNode:
    size = a.value.size
    return DiffNode(
        a.value.mean(), (a,), lambda g: (np.full_like(a.value, float(g) / size),), a.requires_grad
    )


def sigmoid(a: DiffNode) -> DiffNode:
    x = a.value
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return DiffNode(out, (a,), lambda g: (g * out * (1.0 - out),), a.requires_grad)


def exp(a: DiffNode) -> DiffNode:
    out = np.exp(a.value)
    return DiffNode(out, (a,), lambda g: (g * out,), a.requires_grad)


def log(a: DiffNode) -> DiffNode:
    """Natural log; inputs must be positive (clip beforehand if unsure)."""
    return DiffNode(np.log(a.value), (a,), lambda g: (g / a.value,), a.requires_grad)


def clip(a: DiffNode, lo: float, hi: float) -> DiffNode:
    """Clamp values into [lo, hi]; gradient passes only where unclamped."""
    inside = (a.value >= lo) & (a.value <= hi)
    return DiffNode(
        np.clip(a.value, lo, hi), (a,), lambda g: (g * inside,), a.requires_grad
    )


def softmax_segments(x: DiffNode, seg_ids, n_segments: int) -> DiffNode:
    """Softmax of a score vector within each segment, max-subtracted.

    `seg_ids[i]` names the segment of score i; probabilities sum to 1 within
    every segment that has at least one entry.
    """
    seg_ids = np.asarray(seg_ids, dtype=np.intp)
    v = x.value
    seg_max = np.full(n_segments, -np.inf)
    np.maximum.at(seg_max, seg_ids, v)
    e = np.exp(v - seg_max[seg_ids])
    denom = np.bincount(seg_ids, weights=e, minlength=n_segments)
    p = e / denom[seg_ids]

    def backward(g):
        seg_dot = np.bincount(seg_ids, weights=g * p, minlength=n_segments)
        return (p * (g - seg_dot[seg_ids]),)

    return DiffNode(p, (x,), backward, x.requires_grad)


def normalize_rows(a: DiffNode) -> DiffNode:
    """Scale each row to unit L2 norm; near-zero rows divide by EPS_GUARD."""
    norms = np.sqrt((a.value**2).sum(axis=1))
    safe = np.maximum(norms, EPS_GUARD)
    out = a.value / safe[:, None]

    def backward(g):
        dot = (g * a.value).sum(axis=1)
        live = (norms > EPS_GUARD).astype(np.float64)
        return (g / safe[:, None] - a.value * (live * dot / safe**3)[:, None],)

    return DiffNode(out, (a,), backward, a.requires_grad)


def cosine_similarity(a: DiffNode, b: DiffNode) -> DiffNode:
    """Row-wise cosine similarity of two equal-shape 2-d arrays."""
    return rowsum(mul(normalize_rows(a), normalize_rows(b)))


def l2_norm_sq(a: DiffNode) -> DiffNode:
    return DiffNode(
        np.sum(a.value**2), (a,), lambda g: (2.0 * float(g) * a.value,), a.requires_grad
    )


def grad_check(f, x: dict[str, np.ndarray], eps: float = 1e-5) -> float:
    """Max relative error between analytic gradients of `f` and central differences.

    `f` maps a dict of leaf DiffNodes (same keys as `x`) to a scalar DiffNode.
    Error per coordinate is |analytic - numeric| / max(1, |numeric|).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps out of the supported [1e-7, 1e-3] range")
    leaves = {k: param(v) for k, v in x.items()}
    out = f(leaves)
    if not np.isfinite(out.value):
        raise ValueError("non-finite function value at x")
    out.backward()
    analytic = {k: np.array(leaves[k].grad, copy=True) for k in x}

    worst = 0.0
    for key, base in x.items():
        flat = base.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f({k: constant(v) for k, v in x.items()}).value)
            flat[i] = orig - eps
            f_minus = float(f({k: constant(v) for k, v in x.items()}).value)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise ValueError("non-finite function value during perturbation")
            a = analytic[key].reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(numeric)))
    return worst


def init_array(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    """Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)]."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)
