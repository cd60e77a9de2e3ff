"""Dense float64 tensors with reverse-mode autodiff, plus the optimizer pieces
used for micro-transformer training.

The computation graph is recorded dynamically through parent links on each
tensor, so independent graphs are naturally thread-confined: a graph built on
one thread must be backpropagated on that thread, but separate graphs never
share state.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that disables graph recording on the current thread."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class Tensor:
    """A row-major float64 array plus the bookkeeping for reverse-mode autodiff.

    Data is immutable once created except for gradient accumulation into
    ``grad``. ``parents``/``backward_fn`` are only populated when the tensor
    was produced by a recorded op.
    """

    __slots__ = ("data", "requires_grad", "grad", "parents", "backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        backward(self)

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __pow__(self, exponent: float):
        return pow_scalar(self, exponent)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad or p.backward_fn is not None for p in parents):
        out.requires_grad = any(p.requires_grad for p in parents)
        out.parents = parents
        out.backward_fn = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise arithmetic ---------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        a.accumulate_grad(_unbroadcast(g, a.shape))
        b.accumulate_grad(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        a.accumulate_grad(_unbroadcast(g, a.shape))
        b.accumulate_grad(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        a.accumulate_grad(_unbroadcast(g / b.data, a.shape))
        b.accumulate_grad(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(a.data / b.data, (a, b), bwd)


def pow_scalar(a: Tensor, exponent: float) -> Tensor:
    def bwd(g):
        a.accumulate_grad(g * exponent * np.power(a.data, exponent - 1.0))

    return _make(np.power(a.data, exponent), (a,), bwd)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bwd(g):
        a.accumulate_grad(g * out_data)

    return _make(out_data, (a,), bwd)


def log(a: Tensor) -> Tensor:
    def bwd(g):
        a.accumulate_grad(g / a.data)

    return _make(np.log(a.data), (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def bwd(g):
        a.accumulate_grad(g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0.0)

    def bwd(g):
        a.accumulate_grad(g * (a.data > 0.0))

    return _make(out_data, (a,), bwd)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    # tanh approximation; smooth everywhere, which keeps finite-difference
    # gradient checks clean (no ReLU kinks).
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + t)

    def bwd(g):
        sech2 = 1.0 - t * t
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        a.accumulate_grad(g * (0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner))

    return _make(out_data, (a,), bwd)


# -- shape ops ------------------------------------------------------------

def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def bwd(g):
        a.accumulate_grad(g.reshape(a.shape))

    return _make(np.ascontiguousarray(a.data.reshape(shape)), (a,), bwd)


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))

    def bwd(g):
        a.accumulate_grad(g.transpose(inverse))

    return _make(a.data.transpose(axes), (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            t.accumulate_grad(g[tuple(idx)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bwd)


def getitem(a: Tensor, idx) -> Tensor:
    def bwd(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a.accumulate_grad(full)

    return _make(a.data[idx], (a,), bwd)


# -- reductions -----------------------------------------------------------

def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bwd(g):
        if axis is None:
            grad = np.broadcast_to(g, a.shape)
        else:
            g_exp = g if keepdims else np.expand_dims(g, axis)
            grad = np.broadcast_to(g_exp, a.shape)
        a.accumulate_grad(np.ascontiguousarray(grad))

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd)


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        count = a.shape[axis] if isinstance(axis, int) else int(np.prod([a.shape[i] for i in axis]))

    def bwd(g):
        if axis is None:
            grad = np.broadcast_to(g / count, a.shape)
        else:
            g_exp = g if keepdims else np.expand_dims(g, axis)
            grad = np.broadcast_to(g_exp / count, a.shape)
        a.accumulate_grad(np.ascontiguousarray(grad))

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), bwd)


# -- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        if a.ndim == 1 and b.ndim == 1:
            a.accumulate_grad(g * b.data)
            b.accumulate_grad(g * a.data)
            return
        a2 = a.data[None, :] if a.ndim == 1 else a.data
        b2 = b.data[:, None] if b.ndim == 1 else b.data
        g2 = g
        if a.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if b.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = g2 @ np.swapaxes(b2, -1, -2)
        gb = np.swapaxes(a2, -1, -2) @ g2
        if a.ndim == 1:
            ga = ga[..., 0, :].reshape(-1, a.shape[0]).sum(axis=0)
        else:
            ga = _unbroadcast(ga, a.shape)
        if b.ndim == 1:
            gb = gb[..., 0].reshape(-1, b.shape[0]).sum(axis=0)
        else:
            gb = _unbroadcast(gb, b.shape)
        a.accumulate_grad(ga)
        b.accumulate_grad(gb)

    return _make(a.data @ b.data, (a, b), bwd)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row-gather from ``table`` by integer ``ids``; backward scatter-adds."""
    ids = np.asarray(ids, dtype=np.int64)

    def bwd(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        table.accumulate_grad(full)

    return _make(table.data[ids], (table,), bwd)


# -- normalization & probability -------------------------------------------

def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data
    n = x.shape[-1]

    def bwd(g):
        g_xhat = g * gain.data
        # d/dx of (x - mu) / sqrt(var + eps)
        gx = inv * (g_xhat - g_xhat.mean(axis=-1, keepdims=True)
                    - xhat * (g_xhat * xhat).mean(axis=-1, keepdims=True))
        x.accumulate_grad(gx)
        reduce_axes = tuple(range(g.ndim - 1))
        gain.accumulate_grad((g * xhat).sum(axis=reduce_axes) if reduce_axes else g * xhat)
        bias.accumulate_grad(g.sum(axis=reduce_axes) if reduce_axes else g)
        _ = n

    return _make(out_data, (x, gain, bias), bwd)


def softmax(v: Tensor, temperature: float = 1.0, axis: int = -1) -> Tensor:
    """Temperature softmax along ``axis``. Shift-invariant and NaN-checked."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if np.isnan(v.data).any():
        raise ValueError("softmax input contains NaN")
    scaled = v.data / temperature
    shifted = scaled - scaled.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        v.accumulate_grad(out_data * (g - dot) / temperature)

    return _make(out_data, (v,), bwd)


def log_softmax(v: Tensor, axis: int = -1) -> Tensor:
    shifted = v.data - v.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse

    def bwd(g):
        p = np.exp(out_data)
        v.accumulate_grad(g - p * g.sum(axis=axis, keepdims=True))

    return _make(out_data, (v,), bwd)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; call only in training mode."""
    if p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)

    def bwd(g):
        x.accumulate_grad(g * keep)

    return _make(x.data * keep, (x,), bwd)


def label_smoothed_nll(logits: Tensor, targets: np.ndarray, eps: float) -> Tensor:
    """Mean label-smoothed negative log-likelihood over positions.

    The smoothed target distribution puts 1 - eps on the gold token and
    eps / (V - 1) on every other token, so eps = 0 is exactly plain NLL.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2:
        raise ValueError(f"logits must be (positions, vocab), got shape {logits.shape}")
    n_pos, vocab = logits.shape
    if targets.shape != (n_pos,):
        raise ValueError(f"targets must have length {n_pos}, got shape {targets.shape}")
    if not 0.0 <= eps < 1.0:
        raise ValueError(f"eps must be in [0, 1), got {eps}")
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise ValueError("target id out of vocabulary range")
    lp = log_softmax(logits, axis=-1)
    rows = np.arange(n_pos)
    nll = -tensor_mean(lp[rows, targets])
    if eps == 0.0:
        return nll
    eps_i = eps / (vocab - 1)
    smooth = -tensor_mean(tensor_sum(lp, axis=-1))
    return (1.0 - eps - eps_i) * nll + eps_i * smooth


# -- backward pass ----------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar loss through the recorded graph.

    Every tensor with ``requires_grad`` reachable from ``loss`` accumulates
    d(loss)/d(tensor) into ``.grad``, additively across uses and across calls.
    """
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in visited:
                stack.append((p, False))

    # Intermediate grads live only for the duration of this pass; leaves keep
    # theirs in .grad for the optimizer.
    prior_grads: dict[int, np.ndarray | None] = {}
    for node in topo:
        if node.backward_fn is not None:
            prior_grads[id(node)] = node.grad
            node.grad = None
    if loss.backward_fn is None:
        return
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node.backward_fn is None or node.grad is None:
            continue
        node.backward_fn(node.grad)
    for node in topo:
        if node.backward_fn is None:
            continue
        own = node.grad if node.requires_grad else None
        prior = prior_grads.get(id(node))
        if own is None:
            node.grad = prior
        elif prior is None:
            node.grad = own
        else:
            node.grad = prior + own


# -- optimizer ----------------------------------------------------------------

@dataclass
class AdamState:
    """Per-parameter Adam moments plus the shared step counter."""

    step: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls(
            step=0,
            first_moment=[np.zeros_like(p.data) for p in params],
            second_moment=[np.zeros_like(p.data) for p in params],
        )


def adam_update(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps_num: float = 1e-8,
    weight_decay: float = 0.0,
) -> AdamState:
    """One bias-corrected Adam step with decoupled (AdamW-style) weight decay.

    Parameters are updated in place; returns the advanced state.
    """
    if lr < 0:
        raise ValueError(f"lr must be nonnegative, got {lr}")
    if len(params) != len(grads):
        raise ValueError("params and grads must align")
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p.data) for p in params]
        state.second_moment = [np.zeros_like(p.data) for p in params]
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter shape {p.data.shape}")
        m = state.first_moment[i]
        v = state.second_moment[i]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if weight_decay:
            p.data -= lr * weight_decay * p.data
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps_num)
    return state


# -- gradient verification ----------------------------------------------------

def grad_check(
    model_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    rng: np.random.Generator | None = None,
    samples_per_param: int = 4,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``model_fn`` must be deterministic (same params, same scalar loss); that is
    the caller's responsibility. A random subset of coordinates per parameter
    is probed.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    rng = rng or np.random.default_rng(0)
    saved = [p.grad for p in params]
    for p in params:
        p.grad = None
    loss = model_fn()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for p, g in zip(params, saved):
        p.grad = g

    worst = 0.0
    for p, ana in zip(params, analytic):
        n = p.data.size
        k = min(samples_per_param, n)
        coords = rng.choice(n, size=k, replace=False)
        flat = p.data.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            with no_grad():
                f_plus = model_fn().item()
            flat[c] = orig - h
            with no_grad():
                f_minus = model_fn().item()
            flat[c] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = ana.reshape(-1)[c]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, err)
    return worst
