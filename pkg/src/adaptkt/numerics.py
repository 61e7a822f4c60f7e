"""Dense float64 tensors with reverse-mode gradients.

Everything upstream (text autoencoder, knowledge tracer, MMD regularizer)
expresses its math through the closed primitive set in this module.  The
engine is deliberately small: tensors wrap numpy arrays, every primitive
records a vector-Jacobian closure, and ``backward`` walks the implicit
graph in reverse topological order.  No broadcasting beyond what the
``linear`` primitive does internally with its bias row.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericError, ShapeError

Array = np.ndarray


def _as_f64(data) -> Array:
    arr = np.asarray(data, dtype=np.float64)
    return arr


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse mode.

    Tensors are immutable values from the caller's point of view: primitives
    allocate fresh outputs and never write through their inputs.  ``data`` of
    a parameter is mutated only by the optimizer, between graph builds.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_inputs", "_vjp")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_f64(data)
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._inputs: tuple[Tensor, ...] = ()
        self._vjp: Callable[[Array], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    # Operator sugar for same-shape elementwise math; model code reads better
    # with it and every overload routes through a recorded primitive.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale_add(self, float(other), 0.0)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale_add(self, -1.0, 0.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def constant(data, name: str | None = None) -> Tensor:
    """Wrap data as a non-differentiable graph input."""
    return Tensor(data, requires_grad=False, name=name)


def parameter(data, name: str | None = None) -> Tensor:
    """Wrap data as a trainable leaf."""
    return Tensor(data, requires_grad=True, name=name)


def _out(data: Array, inputs: tuple[Tensor, ...], vjp: Callable[[Array], None]) -> Tensor:
    t = Tensor(data)
    if any(p.requires_grad for p in inputs):
        t.requires_grad = True
        t._inputs = inputs
        t._vjp = vjp
    return t


def _acc(t: Tensor, g: Array) -> None:
    if t.requires_grad:
        t.grad += g


def _shape_err(op: str, *shapes) -> ShapeError:
    return ShapeError(f"{op}: incompatible shapes {' and '.join(str(s) for s in shapes)}")


# ---------------------------------------------------------------------------
# primitive set
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise _shape_err("add", a.shape, b.shape)

    def vjp(g: Array) -> None:
        _acc(a, g)
        _acc(b, g)

    return _out(a.data + b.data, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise _shape_err("sub", a.shape, b.shape)

    def vjp(g: Array) -> None:
        _acc(a, g)
        _acc(b, -g)

    return _out(a.data - b.data, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    if a.shape != b.shape:
        raise _shape_err("mul", a.shape, b.shape)

    def vjp(g: Array) -> None:
        _acc(a, g * b.data)
        _acc(b, g * a.data)

    return _out(a.data * b.data, (a, b), vjp)


def scale_add(x: Tensor, mul_by: float, add_to: float) -> Tensor:
    """Elementwise affine by Python scalars: mul_by * x + add_to."""

    def vjp(g: Array) -> None:
        _acc(x, mul_by * g)

    return _out(mul_by * x.data + add_to, (x,), vjp)


def negate(x: Tensor) -> Tensor:
    return scale_add(x, -1.0, 0.0)


def one_minus(x: Tensor) -> Tensor:
    return scale_add(x, -1.0, 1.0)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix/vector product: 2D@2D, 2D@1D or 1D@2D."""
    ans, bns = a.data.ndim, b.data.ndim
    if not (
        (ans == 2 and bns == 2 and a.shape[1] == b.shape[0])
        or (ans == 2 and bns == 1 and a.shape[1] == b.shape[0])
        or (ans == 1 and bns == 2 and a.shape[0] == b.shape[0])
    ):
        raise _shape_err("matmul", a.shape, b.shape)

    def vjp(g: Array) -> None:
        if ans == 2 and bns == 2:
            _acc(a, g @ b.data.T)
            _acc(b, a.data.T @ g)
        elif ans == 2 and bns == 1:
            _acc(a, np.outer(g, b.data))
            _acc(b, a.data.T @ g)
        else:  # 1D @ 2D
            _acc(a, b.data @ g)
            _acc(b, np.outer(a.data, g))

    return _out(a.data @ b.data, (a, b), vjp)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map x @ w.T + b for x a (batch, n) matrix or an (n,) vector.

    w has shape (m, n); the optional bias row b (m,) is added to every batch
    row.  This is the only primitive that repeats a value across rows, which
    keeps broadcasting out of the rest of the engine.
    """
    if w.data.ndim != 2:
        raise _shape_err("linear(weight)", w.shape)
    if x.data.ndim not in (1, 2) or x.shape[-1] != w.shape[1]:
        raise _shape_err("linear", x.shape, w.shape)
    if b is not None and b.shape != (w.shape[0],):
        raise _shape_err("linear(bias)", b.shape, w.shape)

    y = x.data @ w.data.T
    if b is not None:
        y = y + b.data
    batched = x.data.ndim == 2

    def vjp(g: Array) -> None:
        _acc(x, g @ w.data)
        if batched:
            _acc(w, g.T @ x.data)
            if b is not None:
                _acc(b, g.sum(axis=0))
        else:
            _acc(w, np.outer(g, x.data))
            if b is not None:
                _acc(b, g)

    inputs = (x, w) if b is None else (x, w, b)
    return _out(y, inputs, vjp)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ShapeError("concat: no operands")
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g: Array) -> None:
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _acc(p, g[tuple(idx)])

    return _out(np.concatenate([p.data for p in parts], axis=axis), parts, vjp)


def stack(parts: Sequence[Tensor]) -> Tensor:
    """Stack same-shape tensors along a new leading axis."""
    parts = tuple(parts)
    if not parts:
        raise ShapeError("stack: no operands")
    if any(p.shape != parts[0].shape for p in parts):
        raise _shape_err("stack", *[p.shape for p in parts])

    def vjp(g: Array) -> None:
        for i, p in enumerate(parts):
            _acc(p, g[i])

    return _out(np.stack([p.data for p in parts]), parts, vjp)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def vjp(g: Array) -> None:
        if x.requires_grad:
            buf = np.zeros_like(x.data)
            buf[idx] = g
            x.grad += buf

    return _out(x.data[idx].copy(), (x,), vjp)


def gather_rows(table: Tensor, rows) -> Tensor:
    """Pick rows of a 2D table by integer index; repeats allowed.

    The backward pass scatter-adds, so a row picked k times accumulates k
    gradient contributions.
    """
    rows = np.asarray(rows, dtype=np.intp)
    if table.data.ndim != 2:
        raise _shape_err("gather_rows", table.shape)
    if rows.size and (rows.min() < 0 or rows.max() >= table.shape[0]):
        raise ShapeError(
            f"gather_rows: index out of range for table with {table.shape[0]} rows"
        )

    def vjp(g: Array) -> None:
        if table.requires_grad:
            np.add.at(table.grad, rows, g)

    return _out(table.data[rows], (table,), vjp)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    if int(np.prod(shape)) != x.data.size:
        raise _shape_err("reshape", x.shape, shape)

    def vjp(g: Array) -> None:
        _acc(x, g.reshape(x.data.shape))

    return _out(x.data.reshape(shape), (x,), vjp)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out[~pos] = ex / (1.0 + ex)

    def vjp(g: Array) -> None:
        _acc(x, g * out * (1.0 - out))

    return _out(out, (x,), vjp)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def vjp(g: Array) -> None:
        _acc(x, g * (1.0 - out * out))

    return _out(out, (x,), vjp)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def vjp(g: Array) -> None:
        _acc(x, g * out)

    return _out(out, (x,), vjp)


def reduce_sum(x: Tensor, axis: int | None = None) -> Tensor:
    def vjp(g: Array) -> None:
        if not x.requires_grad:
            return
        if axis is None:
            x.grad += g  # scalar broadcast
        else:
            x.grad += np.expand_dims(g, axis)

    return _out(np.sum(x.data, axis=axis), (x,), vjp)


def reduce_mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.data.size if axis is None else x.data.shape[axis]

    def vjp(g: Array) -> None:
        if not x.requires_grad:
            return
        if axis is None:
            x.grad += g / n
        else:
            x.grad += np.expand_dims(g, axis) / n

    return _out(np.mean(x.data, axis=axis), (x,), vjp)


def reduce_max(x: Tensor, axis: int) -> Tensor:
    """Max over one axis; ties route their gradient to the first argmax."""
    arg = np.argmax(x.data, axis=axis)

    def vjp(g: Array) -> None:
        if not x.requires_grad:
            return
        buf = np.zeros_like(x.data)
        np.put_along_axis(buf, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis)
        x.grad += buf

    return _out(np.max(x.data, axis=axis), (x,), vjp)


def squared_diff(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise _shape_err("squared_diff", a.shape, b.shape)
    d = a.data - b.data

    def vjp(g: Array) -> None:
        _acc(a, 2.0 * d * g)
        _acc(b, -2.0 * d * g)

    return _out(d * d, (a, b), vjp)


_BCE_EPS = 1e-12


def binary_cross_entropy(p: Tensor, target: Tensor) -> Tensor:
    """Elementwise -[t*log(p) + (1-t)*log(1-p)] with p clipped away from {0,1}."""
    if p.shape != target.shape:
        raise _shape_err("binary_cross_entropy", p.shape, target.shape)
    pc = np.clip(p.data, _BCE_EPS, 1.0 - _BCE_EPS)
    t = target.data
    out = -(t * np.log(pc) + (1.0 - t) * np.log1p(-pc))

    def vjp(g: Array) -> None:
        _acc(p, g * (pc - t) / (pc * (1.0 - pc)))
        _acc(target, g * (np.log1p(-pc) - np.log(pc)))

    return _out(out, (p, target), vjp)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._inputs:
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    return order  # inputs before outputs


def backward(loss: Tensor) -> set[int]:
    """Populate .grad on every differentiable tensor reachable from loss.

    Returns the ids of the tensors visited, so callers can tell a genuine
    zero gradient from a leaf that never entered the graph.
    """
    if loss.data.shape != ():
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    order = _toposort(loss)
    for node in order:
        node.grad = np.zeros_like(node.data)
    loss.grad = np.ones(())
    for node in reversed(order):
        if node._vjp is not None:
            node._vjp(node.grad)
    return {id(node) for node in order}


def gradients(loss: Tensor, params: Sequence[Tensor]) -> list[Array]:
    """d(loss)/d(p) for each leaf p; detached leaves get exact zeros."""
    visited = backward(loss)
    return [
        p.grad.copy() if id(p) in visited else np.zeros_like(p.data)
        for p in params
    ]


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def glorot_uniform(
    n_in: int,
    n_out: int,
    seed: int | None = None,
    *,
    rng: np.random.Generator | None = None,
    shape: tuple[int, ...] | None = None,
    name: str | None = None,
) -> Tensor:
    """Uniform init on [-sqrt(6/(n_in+n_out)), +sqrt(6/(n_in+n_out))].

    Pass either a seed (self-contained, reproducible) or an existing
    Generator (for initializing many parameters off one stream).  Default
    shape is (n_out, n_in), the convention of every weight in this package.
    """
    if n_in < 1 or n_out < 1:
        raise ShapeError(f"glorot_uniform: fan sizes must be >= 1, got ({n_in}, {n_out})")
    if rng is None:
        rng = np.random.default_rng(seed)
    bound = np.sqrt(6.0 / (n_in + n_out))
    if shape is None:
        shape = (n_out, n_in)
    return parameter(rng.uniform(-bound, bound, size=shape), name=name)


def zeros(shape: tuple[int, ...] | int, name: str | None = None) -> Tensor:
    return parameter(np.zeros(shape), name=name)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """First/second-moment accumulators, aligned with a parameter list."""

    m: list[Array]
    v: list[Array]
    step: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
        )


ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[Array],
    state: AdamState,
    lr: float,
) -> tuple[Sequence[Tensor], AdamState]:
    """One Adam update with bias correction; params are updated in place."""
    if lr <= 0:
        raise NumericError(f"adam_step: lr must be positive, got {lr}")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("adam_step: params/grads/state lengths differ")
    for p, g in zip(params, grads):
        if g.shape != p.data.shape:
            raise _shape_err("adam_step", p.data.shape, g.shape)
        if not np.all(np.isfinite(g)):
            raise NumericError(
                f"adam_step: non-finite gradient for {p.name or 'parameter'}"
            )
    state.step += 1
    t = state.step
    c1 = 1.0 - ADAM_BETA1**t
    c2 = 1.0 - ADAM_BETA2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    return params, state


class Adam:
    """Convenience wrapper owning the state for a fixed parameter list."""

    def __init__(self, params: Sequence[Tensor], lr: float):
        self.params = list(params)
        self.lr = lr
        self.state = AdamState.for_params(self.params)

    def step(self, grads: Sequence[Array]) -> None:
        adam_step(self.params, grads, self.state, self.lr)


def sgd_step(params: Sequence[Tensor], grads: Sequence[Array], lr: float) -> None:
    """Plain full-batch gradient-descent update (used by the MMD step)."""
    for p, g in zip(params, grads):
        if not np.all(np.isfinite(g)):
            raise NumericError(f"sgd_step: non-finite gradient for {p.name or 'parameter'}")
        p.data = p.data - lr * g


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-4,
) -> float:
    """Max relative error between reverse-mode and central-difference grads.

    loss_fn must rebuild its graph from the live param data on every call.
    Relative error is |analytic - numeric| / max(|analytic|, |numeric|, 1e-8),
    maximized over every entry of every parameter.
    """
    if eps <= 0:
        raise NumericError(f"finite_diff_check: eps must be positive, got {eps}")
    loss = loss_fn()
    if not np.isfinite(loss.data):
        raise NumericError("finite_diff_check: loss is not finite")
    analytic = gradients(loss, params)
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        aflat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn().item()
            flat[i] = orig - eps
            down = loss_fn().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            denom = max(abs(aflat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(aflat[i] - numeric) / denom)
    return worst
