"""Dense 2-D tensors with tape-based reverse-mode differentiation.

Every tensor is a double-precision ``rows x cols`` array. Operations executed
while a :class:`Tape` is active are recorded when at least one input is
tracked (a leaf with ``requires_grad`` or the output of a recorded op), and
:func:`backward` replays the tape in reverse.

    >>> x = Tensor([[1.0, 2.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_all(mul(x, x))
    >>> backward(loss, tape)
    >>> x.grad.tolist()
    [[2.0, 4.0]]
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "Node", "ShapeError", "TapeError", "GradCheckReport",
    "matmul", "transpose", "add", "sub", "mul", "scale", "relu", "sigmoid_map",
    "softmax_rows", "mean_pool_rows", "sum_all", "broadcast_row", "broadcast_col",
    "concat_features", "embedding", "layer_norm", "cross_entropy",
    "elementwise_and_reduce", "backward", "check_gradients", "zero_grad",
    "BACKWARD_RULES", "corrupted_rule", "no_grad",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Raised on misuse of a tape (non-scalar loss, replay of a consumed tape)."""


_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "clinsum_active_tape", default=None
)


class Tensor:
    """Immutable-by-convention 2-D float64 array with an optional gradient.

    Leaf parameters are created with ``requires_grad=True``; their ``grad``
    field accumulates across :func:`backward` calls until :func:`zero_grad`.
    """

    __slots__ = ("values", "grad", "requires_grad", "node", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got array of rank {arr.ndim}")
        self.values = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape  # type: ignore[return-value]

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self.node is not None

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.values[0, 0])

    def numpy(self) -> np.ndarray:
        return self.values.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    @classmethod
    def zeros(cls, rows: int, cols: int, requires_grad: bool = False) -> "Tensor":
        return cls(np.zeros((rows, cols)), requires_grad=requires_grad)

    @classmethod
    def ones(cls, rows: int, cols: int) -> "Tensor":
        return cls(np.ones((rows, cols)))

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor({self.rows}x{self.cols}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; all routes go through the recorded primitives
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass(eq=False)
class Node:
    kind: str
    inputs: tuple[Tensor, ...]
    out: Tensor
    saved: dict = field(default_factory=dict)


@contextlib.contextmanager
def no_grad():
    """Run ops without recording, even inside an active tape."""
    token = _ACTIVE_TAPE.set(None)
    try:
        yield
    finally:
        _ACTIVE_TAPE.reset(token)


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; nested tapes shadow the outer one.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.consumed = False
        self._token: contextvars.Token | None = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def _record(kind: str, values: np.ndarray, inputs: Sequence[Tensor], **saved) -> Tensor:
    out = Tensor(values)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.tracked for t in inputs):
        node = Node(kind, tuple(inputs), out, saved)
        out.node = node
        tape.nodes.append(node)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape[0] == 1 and grad.shape[0] != 1:
        grad = grad.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        grad = grad.sum(axis=1, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    (ra, ca), (rb, cb) = a.shape, b.shape
    rows_ok = ra == rb or ra == 1 or rb == 1
    cols_ok = ca == cb or ca == 1 or cb == 1
    if not (rows_ok and cols_ok):
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------- primitives

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
    return _record("matmul", a.values @ b.values, (a, b))


def transpose(a: Tensor) -> Tensor:
    return _record("transpose", a.values.T.copy(), (a,))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; a 1-row or 1-column operand broadcasts."""
    _broadcast_shape(a, b, "add")
    return _record("add", a.values + b.values, (a, b))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "sub")
    return _record("sub", a.values - b.values, (a, b))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product with the same broadcasting rule as :func:`add`."""
    _broadcast_shape(a, b, "mul_hadamard")
    return _record("mul", a.values * b.values, (a, b))


def scale(a: Tensor, c: float) -> Tensor:
    return _record("scale", a.values * c, (a,), c=float(c))


def relu(a: Tensor) -> Tensor:
    return _record("relu", np.maximum(a.values, 0.0), (a,))


def sigmoid_map(a: Tensor) -> Tensor:
    x = a.values
    # two-branch form avoids exp overflow for large |x|
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record("sigmoid", out, (a,))


def softmax_rows(a: Tensor) -> Tensor:
    z = a.values - a.values.max(axis=1, keepdims=True)
    e = np.exp(z)
    return _record("softmax", e / e.sum(axis=1, keepdims=True), (a,))


def mean_pool_rows(a: Tensor) -> Tensor:
    if a.rows == 0:
        raise ShapeError("mean_pool_rows: tensor has no rows")
    return _record("mean_pool_rows", a.values.mean(axis=0, keepdims=True), (a,))


def sum_all(a: Tensor) -> Tensor:
    return _record("sum_all", np.array([[a.values.sum()]]), (a,))


def broadcast_row(a: Tensor, rows: int) -> Tensor:
    if a.rows != 1:
        raise ShapeError(f"broadcast_row expects a 1xc tensor, got {a.shape}")
    return _record("broadcast_row", np.repeat(a.values, rows, axis=0), (a,))


def broadcast_col(a: Tensor, cols: int) -> Tensor:
    if a.cols != 1:
        raise ShapeError(f"broadcast_col expects an rx1 tensor, got {a.shape}")
    return _record("broadcast_col", np.repeat(a.values, cols, axis=1), (a,))


def concat_features(a: Tensor, b: Tensor) -> Tensor:
    if a.rows != b.rows:
        raise ShapeError(f"concat_features: row counts differ, {a.shape} and {b.shape}")
    return _record("concat", np.concatenate([a.values, b.values], axis=1), (a, b), split=a.cols)


def embedding(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows of ``table``; backward scatter-adds into the gathered rows."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.rows):
        raise IndexError(f"embedding: id out of range [0, {table.rows})")
    return _record("embedding", table.values[idx], (table,), ids=idx)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalisation followed by a learned 1xd affine map."""
    if gamma.shape != (1, x.cols) or beta.shape != (1, x.cols):
        raise ShapeError(f"layer_norm: affine params must be 1x{x.cols}")
    mu = x.values.mean(axis=1, keepdims=True)
    xc = x.values - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv
    return _record("layer_norm", xhat * gamma.values + beta.values, (x, gamma, beta),
                   xhat=xhat, inv=inv)


def cross_entropy(logits: Tensor, targets: Sequence[int], ignore_index: int | None = None) -> Tensor:
    """Mean negative log-likelihood over non-ignored rows.

    Returns a 1x1 zero when every position is ignored.
    """
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.size != logits.rows:
        raise ShapeError(f"cross_entropy: {t.size} targets for {logits.rows} logit rows")
    keep = np.ones(t.size, dtype=bool) if ignore_index is None else t != ignore_index
    bad = keep & ((t < 0) | (t >= logits.cols))
    if bad.any():
        raise IndexError(f"cross_entropy: target {int(t[bad][0])} outside [0, {logits.cols})")
    z = logits.values - logits.values.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logz
    n = int(keep.sum())
    rows = np.nonzero(keep)[0]
    loss = -logp[rows, t[rows]].sum() / n if n else 0.0
    return _record("cross_entropy", np.array([[loss]]), (logits,),
                   logp=logp, rows=rows, targets=t[rows], n=n)


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul_hadamard": mul,
    "relu": relu,
    "mean_pool_rows": mean_pool_rows,
    "scale": scale,
    "broadcast_row": broadcast_row,
    "broadcast_col": broadcast_col,
}


def elementwise_and_reduce(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch one of the elementwise/reduction kinds by name."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}; expected one of {sorted(_ELEMENTWISE)}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------- adjoints

def _bw_matmul(g, node):
    a, b = node.inputs
    return g @ b.values.T, a.values.T @ g


def _bw_add(g, node):
    a, b = node.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _bw_sub(g, node):
    a, b = node.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def _bw_mul(g, node):
    a, b = node.inputs
    return _unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)


def _bw_softmax(g, node):
    y = node.out.values
    return (y * (g - (g * y).sum(axis=1, keepdims=True)),)


def _bw_sigmoid(g, node):
    y = node.out.values
    return (g * y * (1.0 - y),)


def _bw_layer_norm(g, node):
    _, gamma, _ = node.inputs
    xhat, inv = node.saved["xhat"], node.saved["inv"]
    gx = g * gamma.values
    dx = inv * (gx - gx.mean(axis=1, keepdims=True)
                - xhat * (gx * xhat).mean(axis=1, keepdims=True))
    return dx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)


def _bw_embedding(g, node):
    (table,) = node.inputs
    dt = np.zeros_like(table.values)
    np.add.at(dt, node.saved["ids"], g)
    return (dt,)


def _bw_cross_entropy(g, node):
    s = node.saved
    d = np.zeros_like(s["logp"])
    if s["n"]:
        p = np.exp(s["logp"][s["rows"]])
        p[np.arange(len(s["rows"])), s["targets"]] -= 1.0
        d[s["rows"]] = p * (g[0, 0] / s["n"])
    return (d,)


BACKWARD_RULES: dict[str, Callable] = {
    "matmul": _bw_matmul,
    "transpose": lambda g, node: (g.T,),
    "add": _bw_add,
    "sub": _bw_sub,
    "mul": _bw_mul,
    "scale": lambda g, node: (g * node.saved["c"],),
    "relu": lambda g, node: (g * (node.inputs[0].values > 0),),
    "sigmoid": _bw_sigmoid,
    "softmax": _bw_softmax,
    "mean_pool_rows": lambda g, node: (np.repeat(g, node.inputs[0].rows, axis=0) / node.inputs[0].rows,),
    "sum_all": lambda g, node: (np.full(node.inputs[0].shape, g[0, 0]),),
    "broadcast_row": lambda g, node: (g.sum(axis=0, keepdims=True),),
    "broadcast_col": lambda g, node: (g.sum(axis=1, keepdims=True),),
    "concat": lambda g, node: (g[:, :node.saved["split"]], g[:, node.saved["split"]:]),
    "embedding": _bw_embedding,
    "layer_norm": _bw_layer_norm,
    "cross_entropy": _bw_cross_entropy,
}


@contextlib.contextmanager
def corrupted_rule(kind: str, factor: float = 1.5):
    """Test hook: temporarily scale one primitive's adjoint by ``factor``."""
    original = BACKWARD_RULES[kind]
    BACKWARD_RULES[kind] = lambda g, node: tuple(x * factor for x in original(g, node))
    try:
        yield
    finally:
        BACKWARD_RULES[kind] = original


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every tracked leaf."""
    tape = tape if tape is not None else _ACTIVE_TAPE.get()
    if tape is None:
        raise TapeError("backward needs a tape")
    if loss.shape != (1, 1):
        raise TapeError(f"backward needs a scalar (1x1) loss, got {loss.shape}")
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward call")
    tape.consumed = True
    if loss.node is None:
        if loss.requires_grad:
            loss.grad = (loss.grad if loss.grad is not None else 0.0) + np.ones((1, 1))
        return
    if not any(n is loss.node for n in reversed(tape.nodes)):
        raise TapeError("loss was not produced on this tape")
    adj: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    for node in reversed(tape.nodes):
        g = adj.pop(id(node.out), None)
        if g is None:
            continue
        grads = BACKWARD_RULES[node.kind](g, node)
        for inp, gi in zip(node.inputs, grads):
            if inp.node is not None:
                key = id(inp)
                prev = adj.get(key)
                adj[key] = gi if prev is None else prev + gi
            elif inp.requires_grad:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------- verification

@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    n_checked: int
    worst: tuple[str, int] | None = None

    @property
    def pass_(self) -> bool:
        return self.passed


def check_gradients(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
    sample_fraction: float | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare tape gradients of ``f()`` with central finite differences.

    ``f`` must rebuild its graph from ``params`` on every call. With
    ``sample_fraction`` only that share of entries (at least one per call)
    is probed, chosen by ``rng``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    saved_grads = [p.grad for p in params]
    zero_grad(params)
    with Tape() as tape:
        loss = f()
    backward(loss, tape)
    analytic = [np.zeros_like(p.values) if p.grad is None else p.grad.copy() for p in params]
    for p, g in zip(params, saved_grads):
        p.grad = g

    probes: list[tuple[int, int]] = [(i, j) for i, p in enumerate(params) for j in range(p.values.size)]
    if sample_fraction is not None:
        rng = rng if rng is not None else np.random.default_rng(0)
        k = max(1, int(round(sample_fraction * len(probes))))
        pick = rng.choice(len(probes), size=k, replace=False)
        probes = [probes[i] for i in sorted(pick)]

    worst, max_err = None, 0.0
    for i, j in probes:
        flat = params[i].values.reshape(-1)
        orig = flat[j]
        flat[j] = orig + eps
        f_plus = f().item()
        flat[j] = orig - eps
        f_minus = f().item()
        flat[j] = orig
        num = (f_plus - f_minus) / (2.0 * eps)
        ana = analytic[i].reshape(-1)[j]
        if not (math.isfinite(num) and math.isfinite(ana)):
            err = math.inf
        else:
            err = abs(ana - num) / max(1e-8, abs(ana) + abs(num))
        if worst is None or err > max_err:
            max_err, worst = err, (params[i].name or f"param{i}", j)
    return GradCheckReport(max_err, max_err < tol, len(probes), worst)
