"""Minimal define-by-run reverse-mode automatic differentiation.

Values are float64 numpy arrays. Operations executed while a :class:`Tape`
is active are appended to it; :func:`backward` walks the tape in reverse
append order and accumulates gradients into leaf tensors (parameters).
Outside a tape, operations just compute values, which is what evaluation
code uses.

Broadcasting is never implicit. The only mixed-shape forms are
tensor-with-python-scalar (``scale``, ``add_scalar``) and the explicit
``add_row`` used for bias vectors.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "DomainError",
    "NumericError",
    "ContractError",
    "Tensor",
    "Tape",
    "active_tape",
    "backward",
    "parameter",
    "constant",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "add_scalar",
    "add_row",
    "matmul",
    "tanh",
    "sigmoid",
    "relu",
    "exp",
    "log",
    "softplus",
    "elementwise",
    "log_softmax",
    "concat",
    "columns",
    "take_rows",
    "segment_mean",
    "segment_sum",
    "reshape",
    "lstm_step",
    "pick",
    "tsum",
    "mean",
    "row_dot",
    "normalize_rows",
    "custom_op",
    "numerical_grad",
]


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class ContractError(RuntimeError):
    pass


_tape_ids = itertools.count(1)
_active: list["Tape"] = []


class Tensor:
    """Dense float64 array with a gradient slot.

    Leaf tensors (parameters, constants) have no backward rule; gradients
    reaching a leaf that ``requires_grad`` are summed into ``grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "tape_id", "_parents", "_backward", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.tape_id = 0
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, data={np.array2string(self.data, threshold=6)})"

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(neg(self), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Append-only record of operations for one forward pass."""

    def __init__(self, seed: int | None = None):
        self.id = next(_tape_ids)
        self.nodes: list[Tensor] = []
        self.rng_seed = seed
        self.rng = np.random.default_rng(seed) if seed is not None else None

    def __enter__(self) -> "Tape":
        _active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


def active_tape() -> Tape | None:
    return _active[-1] if _active else None


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def constant(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value: np.ndarray, parents: Sequence[Tensor], rule: Callable) -> Tensor:
    """Wrap ``value``; record it on the active tape when any parent needs grad."""
    out = Tensor(value)
    tape = active_tape()
    if tape is None or not any(p.requires_grad for p in parents):
        return out
    for p in parents:
        if not p.is_leaf and p.tape_id != tape.id:
            raise ContractError("tensor from another tape used in this forward pass")
    out.requires_grad = True
    out.tape_id = tape.id
    out._parents = tuple(parents)
    out._backward = rule
    tape.nodes.append(out)
    return out


def custom_op(value: np.ndarray, parents: Sequence[Tensor], rule: Callable) -> Tensor:
    """Register an op defined elsewhere.

    ``rule(g)`` must return one gradient (or ``None``) per parent.
    """
    return _make(np.asarray(value, dtype=np.float64), parents, rule)


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    seed = np.ones_like(loss.data)
    if loss.is_leaf:
        if loss.requires_grad:
            loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    if loss.tape_id != tape.id:
        raise ContractError("loss was not recorded on this tape")
    pending: dict[int, np.ndarray] = {id(loss): seed}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.is_leaf:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            else:
                key = id(parent)
                prev = pending.get(key)
                pending[key] = pg if prev is None else prev + pg


# ---------------------------------------------------------------------------
# elementwise and linear algebra


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "mul")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _make(a.data + c, (a,), lambda g: (g,))


def add_row(x: Tensor, b: Tensor) -> Tensor:
    """``x[i, :] + b`` for every row i (explicit bias broadcast)."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise DimensionError(f"add_row: shapes {x.shape} and {b.shape} incompatible")
    return _make(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} incompatible")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise DomainError("log of non-positive input")
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def softplus(x: Tensor) -> Tensor:
    v = x.data
    y = np.logaddexp(0.0, v)
    return _make(y, (x,), lambda g: (g * _sigmoid(v),))


_UNARY = {"tanh": tanh, "sigmoid": sigmoid, "relu": relu, "exp": exp, "log": log, "neg": neg}
_BINARY = {"add": add, "mul": mul}


def elementwise(kind: str, *args: Tensor) -> Tensor:
    """Dispatch by name: add, mul, tanh, sigmoid, relu, exp, log, neg."""
    if kind in _BINARY:
        if len(args) != 2:
            raise ContractError(f"{kind} takes two arguments")
        return _BINARY[kind](*args)
    if kind in _UNARY:
        if len(args) != 1:
            raise ContractError(f"{kind} takes one argument")
        return _UNARY[kind](args[0])
    raise ContractError(f"unknown elementwise op {kind!r}")


def log_softmax(x: Tensor) -> Tensor:
    """Log-softmax over the last axis, stabilised by max subtraction."""
    v = x.data
    if v.shape[-1] < 1:
        raise DimensionError("log_softmax over an empty axis")
    if np.isnan(v).any():
        raise NumericError("log_softmax input contains NaN")
    shifted = v - v.max(axis=-1, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def rule(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _make(y, (x,), rule)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    ndim = tensors[0].data.ndim
    if not -ndim <= axis < ndim:
        raise DimensionError(f"concat: axis {axis} out of range for rank {ndim}")
    ax = axis % ndim
    for t in tensors[1:]:
        if t.data.ndim != ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax
        ):
            raise DimensionError(f"concat: shapes {tensors[0].shape} and {t.shape} incompatible")
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    value = np.concatenate([t.data for t in tensors], axis=ax)
    return _make(value, tensors, lambda g: tuple(np.split(g, cuts, axis=ax)))


def columns(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``x[..., start:stop]``."""
    width = x.shape[-1]

    def rule(g):
        full = np.zeros(x.shape)
        full[..., start:stop] = g
        return (full,)

    if not 0 <= start < stop <= width:
        raise DimensionError(f"columns [{start}:{stop}] out of range for width {width}")
    return _make(x.data[..., start:stop], (x,), rule)


def take_rows(table: Tensor, idx) -> Tensor:
    """Gather ``table[idx]``; duplicate indices accumulate in backward."""
    idx = np.asarray(idx, dtype=np.int64)

    def rule(g):
        full = np.zeros(table.shape)
        np.add.at(full, idx, g)
        return (full,)

    return _make(table.data[idx], (table,), rule)


def segment_mean(x: Tensor, segments, n_segments: int) -> Tensor:
    """Average rows of ``x`` grouped by ``segments`` (rows must be non-empty per segment)."""
    segments = np.asarray(segments, dtype=np.int64)
    counts = np.bincount(segments, minlength=n_segments).astype(np.float64)
    if np.any(counts == 0):
        raise DomainError("segment_mean: empty segment")
    total = np.zeros((n_segments,) + x.shape[1:])
    np.add.at(total, segments, x.data)
    inv = (1.0 / counts).reshape((-1,) + (1,) * (x.data.ndim - 1))
    return _make(total * inv, (x,), lambda g: ((g * inv)[segments],))


def segment_sum(x: Tensor, segments, n_segments: int) -> Tensor:
    """Sum entries (or rows) of ``x`` grouped by ``segments``; empty segments give 0."""
    segments = np.asarray(segments, dtype=np.int64)
    total = np.zeros((n_segments,) + x.shape[1:])
    np.add.at(total, segments, x.data)
    return _make(total, (x,), lambda g: (g[segments],))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def pick(x: Tensor, rows, cols) -> Tensor:
    """Gather scalars ``x[rows[k], cols[k]]`` into a vector."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)

    def rule(g):
        full = np.zeros(x.shape)
        np.add.at(full, (rows, cols), g)
        return (full,)

    return _make(x.data[rows, cols], (x,), rule)


def tsum(x: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))
    ax = axis % x.data.ndim

    def rule(g):
        return (np.broadcast_to(np.expand_dims(g, ax), x.shape).copy(),)

    return _make(x.data.sum(axis=ax), (x,), rule)


def mean(x: Tensor) -> Tensor:
    return scale(tsum(x), 1.0 / x.size)


def row_dot(a: Tensor, b: Tensor) -> Tensor:
    """Per-row inner product of two ``[n, c]`` tensors."""
    _same_shape(a, b, "row_dot")
    return _make(
        np.einsum("ij,ij->i", a.data, b.data),
        (a, b),
        lambda g: (g[:, None] * b.data, g[:, None] * a.data),
    )


def normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale every row to unit L2 norm."""
    norms = np.sqrt(np.einsum("ij,ij->i", x.data, x.data))[:, None]
    norms = np.maximum(norms, eps)
    y = x.data / norms

    def rule(g):
        return ((g - y * np.einsum("ij,ij->i", g, y)[:, None]) / norms,)

    return _make(y, (x,), rule)


def lstm_step(xproj: Tensor, hc: Tensor, w_hh: Tensor, bias: Tensor, mask=None) -> Tensor:
    """One LSTM step on packed state ``hc = [h | c]`` (shape ``[B, 2H]``).

    ``xproj`` is the input already projected to the four gate blocks
    (``[B, 4H]``, order input, forget, output, candidate). Rows whose ``mask``
    entry is 0 carry their state through unchanged, so padded positions of a
    ragged batch have no effect.
    """
    hidden = w_hh.shape[0]
    if hc.shape[1] != 2 * hidden or xproj.shape[1] != 4 * hidden or xproj.shape[0] != hc.shape[0]:
        raise DimensionError(f"lstm_step: xproj {xproj.shape}, state {hc.shape}, w_hh {w_hh.shape}")
    h, c = hc.data[:, :hidden], hc.data[:, hidden:]
    z = xproj.data + h @ w_hh.data + bias.data
    i = _sigmoid(z[:, :hidden])
    f = _sigmoid(z[:, hidden : 2 * hidden])
    o = _sigmoid(z[:, 2 * hidden : 3 * hidden])
    cand = np.tanh(z[:, 3 * hidden :])
    c_raw = f * c + i * cand
    tc = np.tanh(c_raw)
    h_raw = o * tc
    m = np.ones((hc.shape[0], 1)) if mask is None else np.asarray(mask, dtype=np.float64).reshape(-1, 1)
    keep = 1.0 - m
    out = np.concatenate([m * h_raw + keep * h, m * c_raw + keep * c], axis=1)

    def rule(g):
        gh, gc = g[:, :hidden], g[:, hidden:]
        gh_raw = m * gh
        gc_raw = m * gc + gh_raw * o * (1.0 - tc * tc)
        dz = np.concatenate(
            [
                gc_raw * cand * i * (1.0 - i),
                gc_raw * c * f * (1.0 - f),
                gh_raw * tc * o * (1.0 - o),
                gc_raw * i * (1.0 - cand * cand),
            ],
            axis=1,
        )
        d_hc = np.concatenate([dz @ w_hh.data.T + keep * gh, gc_raw * f + keep * gc], axis=1)
        return dz, d_hc, h.T @ dz, dz.sum(axis=0)

    return _make(out, (xproj, hc, w_hh, bias), rule)


def numerical_grad(f: Callable[[], float], param: Tensor, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar ``f`` w.r.t. ``param.data`` (in place)."""
    grad = np.zeros(param.shape)
    flat = param.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        out[i] = (up - down) / (2 * h)
    return grad
