"""Small reverse-mode differentiation engine over dense float64 arrays.

Every op returns a new :class:`Tensor`. When at least one input requires a
gradient, the output remembers its parents and a closure that pushes the
upstream gradient back to them; otherwise the output is a plain constant and
no graph is kept. :func:`backward` walks the recorded graph from a scalar sink
in reverse topological order.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

STANDARDIZE_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when the operand shapes are incompatible with an op."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes " + " and ".join(str(s) for s in shapes))


class NumericDomainError(ArithmeticError):
    """Raised for division by zero or square roots of negative values."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if 0 in arr.shape:
            raise ShapeError("tensor", arr.shape)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape)
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # operator sugar; python scalars are the only broadcast allowed
    def __add__(self, other):
        if _is_scalar(other):
            return add_scalar(self, float(other))
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if _is_scalar(other):
            return add_scalar(self, -float(other))
        return sub(self, other)

    def __rsub__(self, other):
        return add_scalar(scalar_mul(self, -1.0), float(other))

    def __mul__(self, other):
        if _is_scalar(other):
            return scalar_mul(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if _is_scalar(other):
            if other == 0:
                raise NumericDomainError("div: division by scalar zero")
            return scalar_mul(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A trainable leaf. ``excluded`` marks biases and norm parameters, which
    optimizers keep out of weight decay and trust-ratio adaptation."""

    __slots__ = ("name", "excluded")

    def __init__(self, data, name: str = "", excluded: bool = False):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.excluded = excluded


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer)) and not isinstance(x, bool)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out.parents = ()
        out._backward = None
    return out


def _same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


# ---------------------------------------------------------------- ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    A, B = a.data, b.data

    def backward(g):
        return (g @ B.T if a.requires_grad else None,
                A.T @ g if b.requires_grad else None)

    return _make(A @ B, "matmul", (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _make(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _make(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    A, B = a.data, b.data
    return _make(A * B, "mul", (a, b), lambda g: (g * B, g * A))


def scalar_mul(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, "scalar_mul", (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _make(a.data + c, "add_scalar", (a,), lambda g: (g,))


def relu(a: Tensor) -> Tensor:
    # gradient at exactly zero is taken as 0
    mask = a.data > 0
    return _make(a.data * mask, "relu", (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, "tanh", (a,), lambda g: (g * (1.0 - y * y),))


def square(a: Tensor) -> Tensor:
    A = a.data
    return _make(A * A, "square", (a,), lambda g: (2.0 * A * g,))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise NumericDomainError("sqrt: negative input")
    y = np.sqrt(a.data)

    def backward(g):
        if np.any(y == 0):
            raise NumericDomainError("sqrt: gradient undefined at zero")
        return (g / (2.0 * y),)

    return _make(y, "sqrt", (a,), backward)


def div(a: Tensor, b: Tensor, eps: float | None = None) -> Tensor:
    """Elementwise ``a / b``; with ``eps`` the denominator is ``b + eps``."""
    _same_shape("div", a, b)
    den = b.data if eps is None else b.data + eps
    if np.any(den == 0):
        raise NumericDomainError("div: zero denominator")
    q = a.data / den
    return _make(q, "div", (a, b), lambda g: (g / den, -g * q / den))


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return _make(np.array([a.data.sum()]), "sum", (a,), lambda g: (np.full(shape, g[0]),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return _make(np.array([a.data.mean()]), "mean", (a,), lambda g: (np.full(shape, g[0] / n),))


def mean_axis(a: Tensor, axis: int) -> Tensor:
    """Mean over one axis of a 2-D tensor, keeping that axis with extent 1."""
    if a.data.ndim != 2 or axis not in (0, 1):
        raise ShapeError("mean_axis", a.shape)
    n = a.shape[axis]
    shape = a.shape
    return _make(a.data.mean(axis=axis, keepdims=True), "mean_axis", (a,),
                 lambda g: (np.broadcast_to(g / n, shape).copy(),))


def sum_axis(a: Tensor, axis: int) -> Tensor:
    if a.data.ndim != 2 or axis not in (0, 1):
        raise ShapeError("sum_axis", a.shape)
    shape = a.shape
    return _make(a.data.sum(axis=axis, keepdims=True), "sum_axis", (a,),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("transpose", a.shape)
    return _make(a.data.T.copy(), "transpose", (a,), lambda g: (g.T,))


def broadcast_rows(a: Tensor, n: int) -> Tensor:
    """Repeat a ``1 x D`` row ``n`` times; used for biases and BN affine terms."""
    if a.data.ndim != 2 or a.shape[0] != 1 or n < 1:
        raise ShapeError("broadcast_rows", a.shape, (n,))
    return _make(np.repeat(a.data, n, axis=0), "broadcast_rows", (a,),
                 lambda g: (g.sum(axis=0, keepdims=True),))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Fused ``x @ w.T + b`` with ``w`` of shape (out, in) and ``b`` of shape (1, out)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError("linear", x.shape, w.shape)
    if b is not None and b.shape != (1, w.shape[0]):
        raise ShapeError("linear (bias)", b.shape, (1, w.shape[0]))
    X, W = x.data, w.data
    y = X @ W.T
    if b is not None:
        y += b.data

    def backward(g):
        return (g @ W if x.requires_grad else None,
                g.T @ X if w.requires_grad else None,
                g.sum(axis=0, keepdims=True))

    parents = (x, w) if b is None else (x, w, b)
    return _make(y, "linear", parents, backward)


def affine_rows(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """``x * scale + shift`` with ``1 x D`` rows applied to every row of ``x``."""
    if x.data.ndim != 2 or scale.shape != (1, x.shape[1]) or shift.shape != (1, x.shape[1]):
        raise ShapeError("affine_rows", x.shape, scale.shape, shift.shape)
    X, S = x.data, scale.data

    def backward(g):
        return (g * S, (g * X).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True))

    return _make(X * S + shift.data, "affine_rows", (x, scale, shift), backward)


def slice(a: Tensor, rows=None, cols=None) -> Tensor:  # noqa: A001
    """Basic slicing of a 2-D tensor; ``rows``/``cols`` are python slices."""
    if a.data.ndim != 2:
        raise ShapeError("slice", a.shape)
    key = (rows if rows is not None else np.s_[:], cols if cols is not None else np.s_[:])
    out = a.data[key]
    if out.size == 0:
        raise ShapeError("slice", a.shape, key)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[key] = g
        return (full,)

    return _make(out.copy(), "slice", (a,), backward)


def diagonal(a: Tensor) -> Tensor:
    """Diagonal of a square matrix as a ``1 x K`` row."""
    if a.data.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError("diagonal", a.shape)
    k = a.shape[0]
    idx = np.arange(k)

    def backward(g):
        full = np.zeros((k, k))
        full[idx, idx] = g[0]
        return (full,)

    return _make(np.diagonal(a.data).reshape(1, k).copy(), "diagonal", (a,), backward)


def batch_moments(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-column mean and biased variance."""
    mu = X.mean(axis=0, keepdims=True)
    xc = X - mu
    var = np.einsum("ij,ij->j", xc, xc).reshape(1, -1) / X.shape[0]
    return mu, var


def batch_standardize(a: Tensor, eps: float = STANDARDIZE_EPS, moments=None) -> Tensor:
    """Per-column ``(x - mean) / sqrt(var + eps)`` over the batch axis.

    The variance uses denominator N, so with ``eps=0`` each column has unit
    biased variance and ``z.T @ z / N`` has an exact unit diagonal.
    ``moments`` lets a caller pass precomputed ``batch_moments(a.data)``.
    """
    if a.data.ndim != 2:
        raise ShapeError("batch_standardize", a.shape)
    mu, var = moments if moments is not None else batch_moments(a.data)
    den = np.sqrt(var + eps)
    if np.any(den == 0):
        raise NumericDomainError("batch_standardize: zero variance column with eps=0")
    y = (a.data - mu) / den

    def backward(g):
        gm = g.mean(axis=0, keepdims=True)
        gy = np.einsum("ij,ij->j", g, y).reshape(1, -1) / g.shape[0]
        return ((g - gm - y * gy) / den,)

    return _make(y, "batch_standardize", (a,), backward)


OPS = {
    "matmul": matmul, "add": add, "sub": sub, "mul": mul, "scalar_mul": scalar_mul,
    "relu": relu, "mean_axis": mean_axis, "sum": sum, "square": square, "sqrt": sqrt,
    "div": div, "batch_standardize": batch_standardize, "slice": slice,
}


def forward_op(kind: str, inputs: Sequence, **kwargs) -> Tensor:
    """Dispatch an op by name, e.g. ``forward_op("matmul", [a, b])``."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*[as_tensor(x) if not _is_scalar(x) else x for x in inputs], **kwargs)


# ------------------------------------------------------------ graph

@dataclass
class ExprGraph:
    """Nodes reachable from a sink, inputs ordered before their consumers."""

    nodes: list[Tensor] = field(default_factory=list)
    sinks: list[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, sink: Tensor) -> "ExprGraph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(sink, False)]
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
        return cls(nodes=order, sinks=[sink])

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf and n.requires_grad]

    def of_kind(self, op: str) -> list[Tensor]:
        return [n for n in self.nodes if n.op == op]


def backward(sink: Tensor, leaves: Iterable[Tensor] = ()) -> dict[Tensor, np.ndarray]:
    """Fill ``.grad`` of every leaf that feeds ``sink`` with d(sink)/d(leaf).

    Grads are overwritten, not accumulated. Leaves passed in ``leaves`` that do
    not take part in the graph get a zero gradient. Returns ``{leaf: grad}``.
    """
    if sink.size != 1:
        raise ShapeError("backward (sink must be scalar)", sink.shape)
    graph = ExprGraph.trace(sink)
    grads: dict[int, np.ndarray] = {id(sink): np.ones_like(sink.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None) if not node.is_leaf else grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    result: dict[Tensor, np.ndarray] = {}
    for leaf in graph.leaves():
        leaf.grad = grads.get(id(leaf), np.zeros_like(leaf.data))
        result[leaf] = leaf.grad
    for leaf in leaves:
        if leaf not in result:
            leaf.grad = np.zeros_like(leaf.data)
            result[leaf] = leaf.grad
    return result


# ------------------------------------------------------- grad check

@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    passed: bool
    status: str = "ok"  # ok | failed | non-finite | skipped
    skipped_coords: int = 0
    checked_coords: int = 0
    message: str = ""
    global_error: float = 0.0  # max|a - n| / max(|a|, |n|) over all checked coords of all leaves

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def _relu_pattern(out: Tensor) -> list[np.ndarray]:
    return [node.parents[0].data > 0 for node in ExprGraph.trace(out).of_kind("relu")]


def _relu_at_kink(out: Tensor) -> bool:
    return any(np.any(node.parents[0].data == 0) for node in ExprGraph.trace(out).of_kind("relu"))


def grad_check(build: Callable[[], Tensor], leaves: Sequence[Tensor], step: float = 1e-5,
               tol: float = 1e-4, max_coords: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    ``build`` re-evaluates the scalar expression from the current leaf values.
    Per leaf the error is ``max|a - n| / max(max|a|, max|n|)`` over the checked
    coordinates; ``global_error`` uses one scale across all leaves, which stays
    meaningful for a leaf whose true gradient is zero (a bias feeding batch
    normalization). Coordinates whose perturbation flips a ReLU activation are
    retried with a 100x smaller step and skipped if the flip persists; an
    expression sitting exactly on a ReLU kink is reported as ``skipped``.
    ``max_coords`` limits the coordinates probed per leaf (random subset).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    out = build()
    if out.size != 1:
        raise ShapeError("grad_check (expression must be scalar)", out.shape)
    names = [getattr(leaf, "name", "") or f"leaf{i}" for i, leaf in enumerate(leaves)]
    if _relu_at_kink(out):
        return GradCheckReport({}, passed=False, status="skipped",
                               message="relu input exactly 0: nondifferentiable point")
    base_pattern = _relu_pattern(out)
    analytic = backward(out, leaves)
    analytic = [analytic[leaf].copy() for leaf in leaves]
    rng = rng or np.random.default_rng(0)

    def probe(leaf, flat_idx, h):
        flat = leaf.data.reshape(-1)
        orig = flat[flat_idx]
        flat[flat_idx] = orig + h
        up = build()
        up_ok = _same_pattern(_relu_pattern(up), base_pattern)
        flat[flat_idx] = orig - h
        down = build()
        down_ok = _same_pattern(_relu_pattern(down), base_pattern)
        flat[flat_idx] = orig
        return (up.item() - down.item()) / (2 * h), up_ok and down_ok

    errors: dict[str, float] = {}
    skipped = checked = 0
    diff_max = scale_max = 0.0
    for name, leaf, a in zip(names, leaves, analytic):
        idx = np.arange(leaf.size)
        if max_coords is not None and leaf.size > max_coords:
            idx = np.sort(rng.choice(leaf.size, size=max_coords, replace=False))
        a_flat = a.reshape(-1)
        num, ana = [], []
        for i in idx:
            n, smooth = probe(leaf, i, step)
            if not smooth:
                n, smooth = probe(leaf, i, step / 100)
            if not smooth:
                skipped += 1
                continue
            num.append(n)
            ana.append(a_flat[i])
            checked += 1
        num_arr, ana_arr = np.array(num), np.array(ana)
        if not (np.all(np.isfinite(num_arr)) and np.all(np.isfinite(ana_arr))):
            return GradCheckReport(errors, passed=False, status="non-finite",
                                   skipped_coords=skipped, checked_coords=checked,
                                   message=f"non-finite gradient in {name}")
        if num_arr.size == 0:
            errors[name] = 0.0
            continue
        scale = max(np.abs(ana_arr).max(), np.abs(num_arr).max())
        diff = float(np.abs(ana_arr - num_arr).max())
        errors[name] = 0.0 if scale == 0 else diff / scale
        diff_max, scale_max = max(diff_max, diff), max(scale_max, scale)
    worst = max(errors.values(), default=0.0)
    passed = worst < tol
    return GradCheckReport(errors, passed=passed, status="ok" if passed else "failed",
                           skipped_coords=skipped, checked_coords=checked,
                           global_error=0.0 if scale_max == 0 else diff_max / scale_max)


def _same_pattern(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))
