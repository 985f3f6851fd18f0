"""Dense float64 tensors with a dynamic reverse-mode differentiation tape.

Operations run eagerly on numpy storage. While a ``Tape`` is active, each
primitive appends its backward rule to the tape in execution order;
``backward`` replays the rules in reverse, accumulating gradients exactly
once per tensor, then clears the tape. With no active tape the same
functions are plain numpy evaluation, which keeps inference cheap.

Tapes are tracked per thread; a single forward/backward pass must stay on
one thread.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ConfigError, ContractError, DegenerateRowError, ShapeError

NEG_INF = float("-inf")
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """A dense float64 array plus an optional same-shape gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Execution-ordered record of primitives for one forward pass."""

    def __init__(self):
        # entries: (output, inputs, backward_fn); backward_fn maps the
        # upstream gradient to one gradient (or None) per input.
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        _stack().pop()
        return False

    def __len__(self) -> int:
        return len(self._entries)


_LOCAL = threading.local()


def _stack() -> list[Tape]:
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = []
        _LOCAL.stack = stack
    return stack


def _active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    tape = _active_tape()
    tracked = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=tracked)
    if tracked:
        tape._entries.append((out, inputs, backward_fn))
    return out


def backward(loss: Tensor, tape: Tape, params: Sequence[Tensor] = ()) -> None:
    """Accumulate d(loss)/d(tensor) into .grad for every tracked tensor.

    Replays the tape in reverse and clears it. Parameters listed in
    ``params`` that the loss never touched receive zero gradients.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for out, inputs, backward_fn in reversed(tape._entries):
        upstream = pending.pop(id(out), None)
        holders.pop(id(out), None)
        if upstream is None:
            continue  # not on the path from loss
        for tensor, grad in zip(inputs, backward_fn(upstream)):
            if grad is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            if key in pending:
                pending[key] = pending[key] + grad
            else:
                pending[key] = grad
                holders[key] = tensor
    for key, tensor in holders.items():
        if tensor.requires_grad:
            grad = pending[key]
            tensor.grad = grad if tensor.grad is None else tensor.grad + grad
    for p in params:
        if p.requires_grad and p.grad is None:
            p.grad = np.zeros_like(p.data)
    tape._entries.clear()


def _unbroadcast(grad: np.ndarray | None, shape: tuple[int, ...]) -> np.ndarray | None:
    """Sum a gradient over axes that numpy broadcasting expanded."""
    if grad is None:
        return None
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., m, k) @ (..., k, n) -> (..., m, n); operands need ndim >= 2."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    try:
        data = a.data @ b.data
    except ValueError as exc:
        raise ShapeError(f"matmul mismatch: {a.shape} @ {b.shape}") from exc

    def backward_fn(g):
        ga = _unbroadcast(g @ _swap(b.data), a.shape) if a.requires_grad else None
        gb = _unbroadcast(_swap(a.data) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(data, (a, b), backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add mismatch: {a.shape} + {b.shape}") from exc

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(data, (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul mismatch: {a.shape} * {b.shape}") from exc

    def backward_fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(data, (a, b), backward_fn)


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply by a python scalar constant."""
    factor = float(factor)

    def backward_fn(g):
        return (g * factor,)

    return _result(a.data * factor, (a,), backward_fn)


def log(a: Tensor) -> Tensor:
    def backward_fn(g):
        return (g / a.data,)

    return _result(np.log(a.data), (a,), backward_fn)


def sum_all(a: Tensor) -> Tensor:
    def backward_fn(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(a.data.sum()), (a,), backward_fn)


def mean_all(a: Tensor) -> Tensor:
    n = a.size

    def backward_fn(g):
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _result(np.asarray(a.data.mean()), (a,), backward_fn)


def transpose_last2(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise ShapeError(f"transpose_last2 needs ndim >= 2, got {a.shape}")

    def backward_fn(g):
        return (_swap(g),)

    return _result(_swap(a.data), (a,), backward_fn)


def concat_last(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis."""
    if not tensors:
        raise ContractError("concat_last needs at least one tensor")
    widths = [t.shape[-1] for t in tensors]
    offsets = np.cumsum(widths)[:-1]
    data = np.concatenate([t.data for t in tensors], axis=-1)

    def backward_fn(g):
        return tuple(np.split(g, offsets, axis=-1))

    return _result(data, tuple(tensors), backward_fn)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    """Select rows [start, stop) along the first axis."""
    if not (0 <= start <= stop <= a.shape[0]):
        raise ContractError(f"slice_rows [{start}, {stop}) out of range for {a.shape}")
    data = a.data[start:stop]

    def backward_fn(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return (full,)

    return _result(data, (a,), backward_fn)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of a (rows, d) table; output shape ids.shape + (d,)."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding table must be 2-d, got {table.shape}")
    rows = table.shape[0]
    if ids.size:
        low, high = int(ids.min()), int(ids.max())
        if low < 0 or high >= rows:
            bad = low if low < 0 else high
            raise IndexError(f"embedding id {bad} outside table with {rows} rows")
    data = table.data[ids]

    def backward_fn(g):
        if not table.requires_grad:
            return (None,)
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _result(data, (table,), backward_fn)


def select_positions(a: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Pick (row, col) entries from the leading two axes of a 3-d tensor."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if a.ndim != 3:
        raise ShapeError(f"select_positions needs a 3-d tensor, got {a.shape}")
    data = a.data[rows, cols]

    def backward_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (rows, cols), g)
        return (full,)

    return _result(data, (a,), backward_fn)


def softmax_masked(logits: Tensor, additive_mask) -> Tensor:
    """Row softmax over the last axis of (logits + mask).

    Mask entries are 0.0 for allowed positions and -inf for blocked ones;
    blocked positions come out exactly zero. A row with every entry blocked
    raises DegenerateRowError.
    """
    mask = additive_mask.data if isinstance(additive_mask, Tensor) else np.asarray(
        additive_mask, dtype=np.float64
    )
    try:
        z = logits.data + mask
    except ValueError as exc:
        raise ShapeError(
            f"mask shape {mask.shape} does not broadcast to logits {logits.shape}"
        ) from exc
    row_max = z.max(axis=-1, keepdims=True)
    if np.isneginf(row_max).any():
        raise DegenerateRowError("softmax row with every position blocked")
    exp = np.exp(z - row_max)
    probs = exp / exp.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        if not logits.requires_grad:
            return (None, None) if isinstance(additive_mask, Tensor) else (None,)
        inner = (g * probs).sum(axis=-1, keepdims=True)
        grad = probs * (g - inner)
        return (grad, None) if isinstance(additive_mask, Tensor) else (grad,)

    inputs = (logits, additive_mask) if isinstance(additive_mask, Tensor) else (logits,)
    return _result(probs, inputs, backward_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then affine."""
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be positive, got {eps}")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}"
        )
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    normalized = centered * inv_std
    data = normalized * gain.data + bias.data

    def backward_fn(g):
        g_gain = None
        g_bias = None
        if gain.requires_grad:
            g_gain = (g * normalized).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            g_bias = g.reshape(-1, d).sum(axis=0)
        g_x = None
        if x.requires_grad:
            gn = g * gain.data
            # d/dx of (x - mean) * inv_std, folding the mean and variance paths
            g_x = inv_std * (
                gn
                - gn.mean(axis=-1, keepdims=True)
                - normalized * (gn * normalized).mean(axis=-1, keepdims=True)
            )
        return g_x, g_gain, g_bias

    return _result(data, (x, gain, bias), backward_fn)


def gelu(x: Tensor) -> Tensor:
    """x * Phi(x) with the exact Gaussian CDF (erf form, no tanh shortcut)."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))

    def backward_fn(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        return (g * (cdf + x.data * pdf),)

    return _result(x.data * cdf, (x,), backward_fn)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: zero with probability p and rescale by 1/(1-p).

    The eval path (training=False or p=0) returns the input unchanged.
    """
    if not (0.0 <= p < 1.0):
        raise ConfigError(f"dropout rate must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs a generator")
    keep = rng.random(x.shape) >= p
    factor = 1.0 / (1.0 - p)
    scaled = keep * factor

    def backward_fn(g):
        return (g * scaled,)

    return _result(x.data * scaled, (x,), backward_fn)


def cross_entropy_mean(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log softmax probability of the target column per row."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy_mean needs (rows, classes), got {logits.shape}")
    n, classes = logits.shape
    if targets.shape != (n,):
        raise ShapeError(f"targets shape {targets.shape} does not match {n} rows")
    if n == 0:
        raise ContractError("cross_entropy_mean needs at least one row")
    if targets.size and (targets.min() < 0 or targets.max() >= classes):
        raise IndexError("cross-entropy target column out of range")
    z = logits.data
    row_max = z.max(axis=-1, keepdims=True)
    log_sum = row_max + np.log(np.exp(z - row_max).sum(axis=-1, keepdims=True))
    nll = log_sum[:, 0] - z[np.arange(n), targets]
    data = np.asarray(nll.mean())

    def backward_fn(g):
        probs = np.exp(z - log_sum)
        probs[np.arange(n), targets] -= 1.0
        return (probs * (g / n),)

    return _result(data, (logits,), backward_fn)


def grad_check(f, inputs: Sequence[Tensor], step: float = 1e-5) -> float:
    """Worst relative error between tape gradients and central differences.

    ``f(*inputs)`` must return a scalar Tensor and be deterministic across
    calls (fix any internal randomness). Relative error per coordinate is
    |g_tape - g_fd| / max(1, |g_tape|, |g_fd|).
    """
    for t in inputs:
        t.zero_grad()
    with Tape() as tape:
        out = f(*inputs)
        backward(out, tape, params=inputs)
    worst = 0.0
    for t in inputs:
        auto = t.grad.reshape(-1)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            f_plus = f(*inputs).item()
            flat[i] = original - step
            f_minus = f(*inputs).item()
            flat[i] = original
            fd = (f_plus - f_minus) / (2.0 * step)
            err = abs(auto[i] - fd) / max(1.0, abs(auto[i]), abs(fd))
            worst = max(worst, err)
    return worst
