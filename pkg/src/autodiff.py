#!/usr/bin/env python3
"""
Reverse-Mode Autodiff Module
============================
A small dense-tensor library with a recording tape, reverse-mode gradients
and an Adam optimizer. It is just big enough for the MLPs and attention
blocks used by the agent networks.

Key Concepts:
- Tensor: a float64 array of rank 0, 1 or 2 plus gradient bookkeeping
- Tape: records primitive operations while it is active (``with Tape() as tape``)
- backward(): walks the tape in reverse and accumulates gradients
- Adam: first/second moment optimizer with bias correction

Operations run eagerly. When no tape is active nothing is recorded, which is
how rollouts and evaluation run without paying for gradient bookkeeping.
Each thread has its own stack of active tapes.
"""

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import InvalidArgumentError

DTYPE = np.float64

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]

_local = threading.local()


class Tensor:
    """
    Dense float64 array with optional gradient tracking

    Attributes:
        data (np.ndarray): values in row-major order
        requires_grad (bool): True for trainable leaves
        grad (np.ndarray): gradient written by backward(), None before
        name (str): optional name, used by checkpoints
    """

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=DTYPE)
        if self.data.ndim > 2:
            raise InvalidArgumentError(
                f"Tensors are limited to rank 2, got shape {self.data.shape}")
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        # True when gradients can flow into this tensor from a recorded node
        self._tracked = requires_grad

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise InvalidArgumentError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Node:
    """One recorded primitive: its output, its inputs and the local chain rule"""
    output: Tensor
    parents: Tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tape:
    """
    Records primitive operations in execution order

    Execution order is a topological order: a node's parents were either
    recorded earlier or are leaves.

    Usage:
        with Tape() as tape:
            loss = reduce_mean(square(model(x)))
        grads = backward(tape, loss)
    """

    def __init__(self):
        self.nodes: List[Node] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)


def _tape_stack() -> List[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def active_tape() -> Optional[Tape]:
    """Innermost active tape of the calling thread, or None"""
    stack = _tape_stack()
    return stack[-1] if stack else None


def as_tensor(value: ArrayLike) -> Tensor:
    """Wrap a constant as a Tensor, passing Tensors through"""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _record(output: Tensor, parents: Sequence[Tensor], backward_fn) -> Tensor:
    tape = active_tape()
    if tape is not None and any(p._tracked for p in parents):
        output._tracked = True
        tape.nodes.append(Node(output, tuple(parents), backward_fn))
    return output


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ============================================================================
# PRIMITIVES
# ============================================================================

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise product with rank-2 broadcasting"""
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape),
                                           _unbroadcast(g * a.data, b.shape)))


def scale(a: ArrayLike, factor: float) -> Tensor:
    a = as_tensor(a)
    factor = float(factor)
    out = Tensor(a.data * factor)
    return _record(out, (a,), lambda g: (g * factor,))


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product of two rank-2 tensors"""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise InvalidArgumentError(f"matmul needs rank-2 inputs, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise InvalidArgumentError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    return _record(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def tanh(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _record(Tensor(y), (a,), lambda g: (g * (1.0 - y * y),))


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return _record(Tensor(y), (a,), lambda g: (g * y,))


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise InvalidArgumentError("log is only defined for positive inputs")
    x = a.data
    return _record(Tensor(np.log(x)), (a,), lambda g: (g / x,))


def square(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _record(Tensor(x * x), (a,), lambda g: (2.0 * g * x,))


def minimum(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise minimum; ties send the gradient to ``a``"""
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data <= b.data
    out = Tensor(np.where(take_a, a.data, b.data))
    return _record(out, (a, b), lambda g: (_unbroadcast(np.where(take_a, g, 0.0), a.shape),
                                           _unbroadcast(np.where(take_a, 0.0, g), b.shape)))


def reduce_sum(a: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(out, (a,), backward_fn)


def reduce_mean(a: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    if count == 0:
        raise InvalidArgumentError("mean of an empty tensor")
    return scale(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def softmax_array(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the last axis (plain numpy, no recording)"""
    logits = np.asarray(logits, dtype=DTYPE)
    if logits.size == 0 or logits.shape[-1] == 0:
        raise InvalidArgumentError("softmax of an empty vector")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    weights = np.exp(shifted)
    return weights / weights.sum(axis=-1, keepdims=True)


def log_softmax_array(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=DTYPE)
    if logits.size == 0 or logits.shape[-1] == 0:
        raise InvalidArgumentError("log-softmax of an empty vector")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(a: ArrayLike) -> Tensor:
    """Softmax over the last axis of a rank-1 or rank-2 tensor"""
    a = as_tensor(a)
    y = softmax_array(a.data)
    return _record(Tensor(y), (a,),
                   lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def log_softmax(a: ArrayLike) -> Tensor:
    """Fused log(softmax(a)); stays finite where the composed form underflows"""
    a = as_tensor(a)
    y = log_softmax_array(a.data)
    probs = np.exp(y)
    return _record(Tensor(y), (a,),
                   lambda g: (g - probs * g.sum(axis=-1, keepdims=True),))


def concat(tensors: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise InvalidArgumentError("concat needs at least one tensor")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tensors, backward_fn)


def reshape(a: ArrayLike, shape: Tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def take_rows(a: ArrayLike, indices) -> Tensor:
    """Gather rows of a rank-2 tensor; repeated indices accumulate gradient"""
    a = as_tensor(a)
    if a.ndim != 2:
        raise InvalidArgumentError(f"take_rows needs a rank-2 tensor, got {a.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise InvalidArgumentError(f"row index out of range for {a.shape[0]} rows")
    out = Tensor(a.data[idx])

    def backward_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _record(out, (a,), backward_fn)


def take_columns(a: ArrayLike, indices) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise InvalidArgumentError(f"take_columns needs a rank-2 tensor, got {a.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[1]):
        raise InvalidArgumentError(f"column index out of range for {a.shape[1]} columns")
    out = Tensor(a.data[:, idx])

    def backward_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (slice(None), idx), g)
        return (full,)

    return _record(out, (a,), backward_fn)


def gather(a: ArrayLike, indices) -> Tensor:
    """Pick one entry per row: out[b] = a[b, indices[b]]"""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if a.ndim != 2 or idx.shape != (a.shape[0],):
        raise InvalidArgumentError(f"gather needs (B, K) values and B indices, got {a.shape} / {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[1]):
        raise InvalidArgumentError(f"gather index out of range for width {a.shape[1]}")
    rows = np.arange(a.shape[0])
    out = Tensor(a.data[rows, idx])

    def backward_fn(g):
        full = np.zeros_like(a.data)
        full[rows, idx] = g
        return (full,)

    return _record(out, (a,), backward_fn)


def one_hot(indices, depth: int) -> Tensor:
    """Constant one-hot rows; index -1 yields an all-zero row"""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.max() >= depth or idx.min() < -1):
        raise InvalidArgumentError(f"action index out of range for {depth} actions")
    return Tensor(one_hot_array(idx, depth))


def one_hot_array(indices, depth: int) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64)
    out = np.zeros(idx.shape + (depth,), dtype=DTYPE)
    mask = idx >= 0
    out[mask, idx[mask]] = 1.0
    return out


# ============================================================================
# REVERSE PASS
# ============================================================================

def backward(tape: Tape, loss: Tensor, params: Optional[Sequence[Tensor]] = None) -> Dict[Tensor, np.ndarray]:
    """
    Reverse-mode gradient of a scalar loss

    Every node of the tape is visited once, newest first. Gradients are
    written to ``tensor.grad`` and returned keyed by tensor.

    Args:
        tape (Tape): tape that recorded the computation of ``loss``
        loss (Tensor): scalar output
        params (list): tensors to report; defaults to every trainable
            leaf the tape touched. Tensors off the loss path get zeros.

    Returns:
        dict: Tensor -> gradient array of the tensor's shape

    Raises:
        InvalidArgumentError: If loss is not a scalar
    """
    if loss.data.size != 1:
        raise InvalidArgumentError(f"backward needs a scalar loss, got shape {loss.shape}")

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        upstream = grads.get(id(node.output))
        if upstream is None:
            continue
        for parent, parent_grad in zip(node.parents, node.backward(upstream)):
            if parent_grad is None or not parent._tracked:
                continue
            key = id(parent)
            grads[key] = parent_grad if key not in grads else grads[key] + parent_grad

    if params is None:
        seen = set()
        params = []
        for node in tape.nodes:
            for parent in node.parents:
                if parent.requires_grad and id(parent) not in seen:
                    seen.add(id(parent))
                    params.append(parent)

    result = {}
    for param in params:
        grad = grads.get(id(param))
        grad = np.zeros_like(param.data) if grad is None else np.array(grad).reshape(param.shape)
        param.grad = grad
        result[param] = grad
    return result


# ============================================================================
# OPTIMIZER
# ============================================================================

@dataclass
class OptimizerState:
    """Adam moments, step counter and step size"""
    lr: float
    first_moments: List[np.ndarray]
    second_moments: List[np.ndarray]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0


def init_optimizer(params: Sequence[Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8) -> OptimizerState:
    return OptimizerState(
        lr=float(lr),
        first_moments=[np.zeros_like(p.data) for p in params],
        second_moments=[np.zeros_like(p.data) for p in params],
        beta1=beta1, beta2=beta2, eps=eps)


def optimizer_step(state: OptimizerState, params: Sequence[Tensor],
                   grads: Sequence[np.ndarray]) -> List[Tensor]:
    """
    Apply one bias-corrected Adam update in place

    A parameter whose gradient is identically zero is left untouched
    (moments included), so tensors off the loss path never drift.

    Args:
        state (OptimizerState): moments, updated in place
        params (list): tensors to update
        grads (list): gradients aligned with params

    Returns:
        list: the updated tensors

    Raises:
        InvalidArgumentError: If counts or shapes disagree
    """
    if len(params) != len(grads) or len(params) != len(state.first_moments):
        raise InvalidArgumentError(
            f"optimizer got {len(params)} params, {len(grads)} grads, "
            f"{len(state.first_moments)} moment slots")
    for param, grad, moment in zip(params, grads, state.first_moments):
        if np.shape(grad) != param.shape or moment.shape != param.shape:
            raise InvalidArgumentError(
                f"gradient shape {np.shape(grad)} does not match parameter {param.shape}")

    state.step += 1
    t = state.step
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    for i, (param, grad) in enumerate(zip(params, grads)):
        grad = np.asarray(grad, dtype=DTYPE)
        if not np.any(grad):
            continue
        m = state.beta1 * state.first_moments[i] + (1.0 - state.beta1) * grad
        v = state.beta2 * state.second_moments[i] + (1.0 - state.beta2) * grad * grad
        state.first_moments[i] = m
        state.second_moments[i] = v
        param.data = param.data - state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
    return list(params)


def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: Optional[float]) -> Tuple[List[np.ndarray], float]:
    """Scale gradients so their global L2 norm is at most ``max_norm``"""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if max_norm is None or max_norm <= 0 or total <= max_norm:
        return list(grads), total
    factor = max_norm / (total + 1e-12)
    return [g * factor for g in grads], total


class Adam:
    """
    Adam optimizer over a fixed parameter list

    Usage:
        opt = Adam(params, lr=1e-3, max_grad_norm=0.5)
        with Tape() as tape:
            loss = ...
        opt.minimize(tape, loss)
    """

    def __init__(self, params: Sequence[Tensor], lr: float, max_grad_norm: Optional[float] = None):
        self.params = list(params)
        self.state = init_optimizer(self.params, lr)
        self.max_grad_norm = max_grad_norm
        self.last_grad_norm = 0.0

    def minimize(self, tape: Tape, loss: Tensor) -> float:
        grads = backward(tape, loss, self.params)
        ordered, self.last_grad_norm = clip_grad_norm([grads[p] for p in self.params], self.max_grad_norm)
        optimizer_step(self.state, self.params, ordered)
        return loss.item()


# ============================================================================
# GRADIENT CHECKING
# ============================================================================

def numerical_gradient(fn: Callable[[], Tensor], param: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function w.r.t. one tensor"""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + eps
        upper = fn().item()
        flat[i] = original - eps
        lower = fn().item()
        flat[i] = original
        grad.reshape(-1)[i] = (upper - lower) / (2.0 * eps)
    return grad


def gradient_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale_ = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    if scale_ == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale_)


def check_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """
    Compare backward() against central finite differences

    Args:
        fn: builds the scalar loss from the current parameter values
        params (list): tensors to check
        eps (float): finite-difference step

    Returns:
        float: worst per-tensor relative error
    """
    with Tape() as tape:
        loss = fn()
    analytic = backward(tape, loss, params)
    worst = 0.0
    for param in params:
        numeric = numerical_gradient(fn, param, eps)
        worst = max(worst, gradient_relative_error(analytic[param], numeric))
    return worst
