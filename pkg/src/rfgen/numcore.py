"""Dense float64 tensors, a tape-based reverse-mode autodiff, and Adam.

Deliberately small: only the operations an unrolled GRU policy and its
training losses need. Everything is 64-bit and deterministic so analytic
gradients can be checked against central finite differences exactly.
"""

from __future__ import annotations

from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "backward",
    "constant",
    "parameter",
    "add",
    "sub",
    "neg",
    "mul",
    "matmul",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "log_softmax",
    "gather_rows",
    "take_per_row",
    "slice_cols",
    "clip_min",
    "reciprocal",
    "sum",
    "mean",
    "AdamState",
    "adam_step",
    "finite_difference_check",
]

_builtin_sum = sum


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class Tensor:
    """Dense float64 array plus an autodiff flag.

    Values are treated as immutable once produced by an op within a tape;
    parameter updates rewrite ``.data`` in place *between* tapes only.
    """

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar Tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), self.requires_grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


# ---------------------------------------------------------------------------
# Tape

_TAPES: List["Tape"] = []

# A record is (output, inputs, backward_fn) where backward_fn maps the
# output gradient to one gradient per input (None for non-differentiable
# inputs such as index arrays).
_Record = Tuple[Tensor, Tuple[Tensor, ...], Callable[[np.ndarray], Tuple]]


class Tape:
    """Ordered record of primitive ops.

    Ops executed while a Tape is active (``with Tape() as tape``) are
    recorded whenever their output requires grad; replaying the records in
    reverse order is a valid topological traversal because every output
    tensor is written exactly once.
    """

    def __init__(self):
        self._records: List[_Record] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        assert _TAPES and _TAPES[-1] is self, "tape stack corrupted"
        _TAPES.pop()
        return False

    def __len__(self) -> int:
        return len(self._records)

    def clear(self) -> None:
        self._records.clear()


def _record(out: Tensor, inputs: Tuple[Tensor, ...], backward_fn) -> None:
    if _TAPES and out.requires_grad:
        _TAPES[-1]._records.append((out, inputs, backward_fn))


def backward(loss: Tensor, tape: Tape) -> Dict[Tensor, np.ndarray]:
    """Reverse-accumulate d(loss)/d(t) for every requires_grad tensor on `tape`.

    `loss` must be scalar. Returns gradients keyed by Tensor identity;
    tensors the loss does not depend on are simply absent (gradient zero).
    The tape is cleared afterwards.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: Dict[Tensor, np.ndarray] = {loss: np.ones_like(loss.data)}
    for out, inputs, backward_fn in reversed(tape._records):
        gout = grads.pop(out, None)
        if gout is None:
            continue
        gins = backward_fn(gout)
        for t, g in zip(inputs, gins):
            if g is None or not t.requires_grad:
                continue
            acc = grads.get(t)
            if acc is None:
                # always copy: backward fns may hand out views of / aliases
                # to gout (e.g. add passes it through for both operands)
                grads[t] = np.array(g, dtype=np.float64)
            else:
                acc += g
    tape.clear()
    return grads


# ---------------------------------------------------------------------------
# Primitives

def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None
    out = Tensor(data, a.requires_grad or b.requires_grad)
    _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))
    return out


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast") from None
    out = Tensor(data, a.requires_grad or b.requires_grad)
    _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))
    return out


def neg(a) -> Tensor:
    a = _lift(a)
    out = Tensor(-a.data, a.requires_grad)
    _record(out, (a,), lambda g: (-g,))
    return out


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None
    out = Tensor(data, a.requires_grad or b.requires_grad)
    _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )
    return out


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not (n,k)x(k,m)")
    out = Tensor(a.data @ b.data, a.requires_grad or b.requires_grad)
    _record(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))
    return out


def sigmoid(a) -> Tensor:
    a = _lift(a)
    x = a.data
    # branch on sign to avoid exp overflow warnings
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = Tensor(y, a.requires_grad)
    _record(out, (a,), lambda g: (g * y * (1.0 - y),))
    return out


def tanh(a) -> Tensor:
    a = _lift(a)
    y = np.tanh(a.data)
    out = Tensor(y, a.requires_grad)
    _record(out, (a,), lambda g: (g * (1.0 - y * y),))
    return out


def exp(a) -> Tensor:
    a = _lift(a)
    y = np.exp(a.data)
    out = Tensor(y, a.requires_grad)
    _record(out, (a,), lambda g: (g * y,))
    return out


def log(a) -> Tensor:
    """Natural log; inputs must be strictly positive."""
    a = _lift(a)
    out = Tensor(np.log(a.data), a.requires_grad)
    _record(out, (a,), lambda g: (g / a.data,))
    return out


def log_softmax(a) -> Tensor:
    """Row-wise log softmax over the last axis, numerically stabilized."""
    a = _lift(a)
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    s = x - m
    y = s - np.log(np.exp(s).sum(axis=-1, keepdims=True))

    def back(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    out = Tensor(y, a.requires_grad)
    _record(out, (a,), back)
    return out


def gather_rows(a, idx) -> Tensor:
    """Select whole rows ``a[idx]`` of a 2-D tensor (embedding lookup)."""
    a = _lift(a)
    if a.ndim != 2:
        raise ShapeError(f"gather_rows: need a 2-D tensor, got shape {a.shape}")
    idx = np.asarray(idx, dtype=np.intp)
    data = a.data[idx]

    def back(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    out = Tensor(data, a.requires_grad)
    _record(out, (a,), back)
    return out


def take_per_row(a, idx) -> Tensor:
    """Pick one element per row: ``out[i] = a[i, idx[i]]``."""
    a = _lift(a)
    if a.ndim != 2:
        raise ShapeError(f"take_per_row: need a 2-D tensor, got shape {a.shape}")
    idx = np.asarray(idx, dtype=np.intp)
    if idx.shape != (a.shape[0],):
        raise ShapeError(f"take_per_row: index shape {idx.shape} != ({a.shape[0]},)")
    rows = np.arange(a.shape[0])
    data = a.data[rows, idx]

    def back(g):
        ga = np.zeros_like(a.data)
        ga[rows, idx] = g
        return (ga,)

    out = Tensor(data, a.requires_grad)
    _record(out, (a,), back)
    return out


def slice_cols(a, start: int, stop: int) -> Tensor:
    """Contiguous column slice ``a[:, start:stop]`` of a 2-D tensor."""
    a = _lift(a)
    if a.ndim != 2 or not (0 <= start <= stop <= a.shape[1]):
        raise ShapeError(f"slice_cols: bad slice [{start}:{stop}] for shape {a.shape}")
    data = a.data[:, start:stop].copy()

    def back(g):
        ga = np.zeros_like(a.data)
        ga[:, start:stop] = g
        return (ga,)

    out = Tensor(data, a.requires_grad)
    _record(out, (a,), back)
    return out


def clip_min(a, lo: float) -> Tensor:
    """Elementwise ``max(a, lo)``; gradient is zero where clipped."""
    a = _lift(a)
    data = np.maximum(a.data, lo)
    mask = a.data > lo
    out = Tensor(data, a.requires_grad)
    _record(out, (a,), lambda g: (g * mask,))
    return out


def reciprocal(a) -> Tensor:
    a = _lift(a)
    y = 1.0 / a.data
    out = Tensor(y, a.requires_grad)
    _record(out, (a,), lambda g: (-g * y * y,))
    return out


def sum(a) -> Tensor:  # noqa: A001 - mirrors the op set name
    a = _lift(a)
    out = Tensor(a.data.sum(), a.requires_grad)
    _record(out, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))
    return out


def mean(a) -> Tensor:
    a = _lift(a)
    n = a.size
    if n == 0:
        raise ShapeError("mean: empty tensor")
    out = Tensor(a.data.mean(), a.requires_grad)
    _record(out, (a,), lambda g: (np.broadcast_to(g / n, a.shape).copy(),))
    return out


# ---------------------------------------------------------------------------
# Adam

class AdamState:
    """Bias-corrected Adam moments for an ordered list of parameter tensors."""

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.step_count = 0


def adam_step(
    params: Sequence[Tensor],
    grads: Dict[Tensor, np.ndarray],
    state: AdamState,
) -> None:
    """One in-place Adam update. Missing entries in `grads` count as zero."""
    if len(params) != len(state.params):
        raise ShapeError(
            f"adam_step: {len(params)} params but state tracks {len(state.params)}"
        )
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, m, v in zip(params, state.m, state.v):
        if m.shape != p.data.shape:
            raise ShapeError(
                f"adam_step: moment shape {m.shape} != param shape {p.data.shape}"
            )
        g = grads.get(p)
        if g is None:
            m *= b1
            v *= b2
        else:
            g = np.asarray(g, dtype=np.float64)
            if g.shape != p.data.shape:
                raise ShapeError(
                    f"adam_step: grad shape {g.shape} != param shape {p.data.shape}"
                )
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# Gradient checking

def finite_difference_check(
    f: Callable[[Sequence[Tensor]], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
) -> float:
    """Max over parameter entries of |analytic - central difference| / max(1, |analytic|).

    `f(params)` must return a scalar Tensor and be deterministic. Analytic
    gradients come from one taped evaluation; the differences re-evaluate f
    without a tape.
    """
    params = list(params)
    with Tape() as tape:
        loss = f(params)
    grads = backward(loss, tape)
    worst = 0.0
    for p in params:
        analytic = grads.get(p)
        if analytic is None:
            analytic = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        aflat = np.asarray(analytic).reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = f(params).item()
            flat[j] = orig - h
            fm = f(params).item()
            flat[j] = orig
            numeric = (fp - fm) / (2.0 * h)
            err = abs(aflat[j] - numeric) / max(1.0, abs(aflat[j]))
            if err > worst:
                worst = err
    return worst
