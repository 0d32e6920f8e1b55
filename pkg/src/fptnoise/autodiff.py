"""Tape-based reverse-mode automatic differentiation on float64 numpy arrays.

The computation graph is implicit: every Tensor records its parents and a
monotonically increasing creation id, and the backward pass walks reachable
nodes in exact reverse creation order (parents are always created before
their consumers, so this is a valid topological order). Forward values are
never mutated; backward functions allocate fresh gradient arrays.

Only the operations needed by the encoders, attacks and counterattack
optimization are provided. No control flow inside graphs, no convolutions.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from .errors import ConfigurationError, InputError, UsageError

_NODE_IDS = itertools.count()


class Tensor:
    """A node in the computation tape wrapping a float64 ndarray.

    Leaves created with requires_grad=True receive entries in the
    GradientResult produced by backward(). requires_grad propagates to any
    node computed from a gradient-requiring input.
    """

    __slots__ = ("data", "requires_grad", "node_id", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False, _parents=(), _backward_fn=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad) or any(
            p.requires_grad for p in _parents
        )
        self.node_id = next(_NODE_IDS)
        self._parents = _parents
        self._backward_fn = _backward_fn

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def item(self) -> float:
        return float(self.data.reshape(()))


class GradientResult:
    """Per-leaf gradients keyed by node id; indexable by Tensor or id."""

    def __init__(self, grads: dict[int, np.ndarray]):
        self._grads = grads

    def _key(self, key) -> int:
        return key.node_id if isinstance(key, Tensor) else int(key)

    def __getitem__(self, key) -> np.ndarray:
        return self._grads[self._key(key)]

    def __contains__(self, key) -> bool:
        return self._key(key) in self._grads

    def __len__(self) -> int:
        return len(self._grads)

    def items(self):
        return self._grads.items()


def _lift(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient over axes that broadcasting introduced or expanded."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(loss: Tensor) -> GradientResult:
    """Reverse-mode pass from a scalar loss to every gradient-requiring leaf.

    Visits reachable nodes in reverse creation order and returns the
    accumulated gradients; cached forward values are left untouched.
    """
    if not isinstance(loss, Tensor):
        raise UsageError("backward expects a Tensor")
    if loss.data.size != 1:
        raise UsageError(
            f"backward expects a scalar loss, got shape {loss.data.shape}"
        )
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if node.node_id in nodes:
            continue
        nodes[node.node_id] = node
        stack.extend(node._parents)

    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    result: dict[int, np.ndarray] = {}
    for node in sorted(nodes.values(), key=lambda n: n.node_id, reverse=True):
        grad = grads.pop(node.node_id, None)
        if grad is None:
            continue
        if node._backward_fn is not None:
            for parent, pgrad in zip(node._parents, node._backward_fn(grad)):
                if pgrad is None or not parent.requires_grad:
                    continue
                if parent.node_id in grads:
                    grads[parent.node_id] = grads[parent.node_id] + pgrad
                else:
                    grads[parent.node_id] = pgrad
        elif node.requires_grad:
            result[node.node_id] = np.array(grad)
    return GradientResult(result)


# ---------------------------------------------------------------------------
# elementwise and structural primitives


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data + b.data

    def backward_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return Tensor(out, _parents=(a, b), _backward_fn=backward_fn)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data - b.data

    def backward_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return Tensor(out, _parents=(a, b), _backward_fn=backward_fn)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data * b.data

    def backward_fn(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return Tensor(out, _parents=(a, b), _backward_fn=backward_fn)


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data / b.data

    def backward_fn(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return Tensor(out, _parents=(a, b), _backward_fn=backward_fn)


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ConfigurationError(
            f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}"
        ) from exc

    def backward_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return Tensor(out, _parents=(a, b), _backward_fn=backward_fn)


def relu(x) -> Tensor:
    x = _lift(x)
    out = np.maximum(x.data, 0.0)

    def backward_fn(g):
        return (g * (x.data > 0.0),)

    return Tensor(out, _parents=(x,), _backward_fn=backward_fn)


def sqrt(x) -> Tensor:
    x = _lift(x)
    out = np.sqrt(x.data)

    def backward_fn(g):
        return (g * 0.5 / out,)

    return Tensor(out, _parents=(x,), _backward_fn=backward_fn)


def reshape(x, shape) -> Tensor:
    x = _lift(x)
    out = x.data.reshape(shape)

    def backward_fn(g):
        return (g.reshape(x.data.shape),)

    return Tensor(out, _parents=(x,), _backward_fn=backward_fn)


def transpose(x, axes) -> Tensor:
    x = _lift(x)
    axes = tuple(axes)
    out = np.transpose(x.data, axes)
    inverse = tuple(np.argsort(axes))

    def backward_fn(g):
        return (np.transpose(g, inverse),)

    return Tensor(out, _parents=(x,), _backward_fn=backward_fn)


def reduce_sum(x, axis=None, keepdims=False) -> Tensor:
    x = _lift(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.data.shape),)

    return Tensor(out, _parents=(x,), _backward_fn=backward_fn)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = _lift(x)
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = 1
        for ax in axes:
            count *= x.data.shape[ax]
    return mul(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# neural-network primitives


def softmax(x, axis=-1) -> Tensor:
    x = _lift(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    out = exp / exp.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return Tensor(out, _parents=(x,), _backward_fn=backward_fn)


def layer_norm(x, gain, shift, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ConfigurationError("layer_norm eps must be positive")
    x, gain, shift = _lift(x), _lift(gain), _lift(shift)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    z = centered * inv
    out = z * gain.data + shift.data

    def backward_fn(g):
        gz = g * gain.data
        gx = inv * (
            gz
            - gz.mean(axis=-1, keepdims=True)
            - z * (gz * z).mean(axis=-1, keepdims=True)
        )
        ggain = _unbroadcast(g * z, gain.data.shape)
        gshift = _unbroadcast(g, shift.data.shape)
        return gx, ggain, gshift

    return Tensor(out, _parents=(x, gain, shift), _backward_fn=backward_fn)


def l2_norm(x) -> Tensor:
    """Euclidean norm of all entries; subgradient at the origin is zero."""
    x = _lift(x)
    if x.data.size == 0:
        raise InputError("l2_norm of an empty tensor is undefined")
    norm = math.sqrt(float((x.data * x.data).sum()))

    def backward_fn(g):
        if norm == 0.0:
            return (np.zeros_like(x.data),)
        return (g * (x.data / norm),)

    return Tensor(norm, _parents=(x,), _backward_fn=backward_fn)


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log softmax probability of the true class."""
    logits = _lift(logits)
    if logits.data.ndim != 2:
        raise ConfigurationError(
            f"cross_entropy expects N x K logits, got shape {logits.data.shape}"
        )
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, k = logits.data.shape
    if labels.shape[0] != n:
        raise InputError(f"{labels.shape[0]} labels for {n} logit rows")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise InputError(f"label out of range [0, {k})")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    true_logit = shifted[np.arange(n), labels]
    loss = float((logsumexp - true_logit).mean())
    probs = np.exp(shifted - logsumexp[:, None])

    def backward_fn(g):
        grad = probs.copy()
        grad[np.arange(n), labels] -= 1.0
        grad /= n
        return (grad * g,)

    return Tensor(loss, _parents=(logits,), _backward_fn=backward_fn)


# ---------------------------------------------------------------------------
# composite layers


def linear(x, weight, bias) -> Tensor:
    """y = x @ weight + bias for x of shape (..., Din)."""
    x, weight, bias = _lift(x), _lift(weight), _lift(bias)
    if weight.data.ndim != 2:
        raise ConfigurationError(f"linear weight must be 2-D, got {weight.data.shape}")
    if x.data.shape[-1] != weight.data.shape[0]:
        raise ConfigurationError(
            f"linear shape mismatch: input {x.data.shape} vs weight {weight.data.shape}"
        )
    if bias.data.shape != (weight.data.shape[1],):
        raise ConfigurationError(
            f"linear bias shape {bias.data.shape} does not match output dim "
            f"{weight.data.shape[1]}"
        )
    return add(matmul(x, weight), bias)


class AttentionParams:
    """Projection weights for one multi-head self-attention layer."""

    __slots__ = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")

    def __init__(self, wq, bq, wk, bk, wv, bv, wo, bo):
        self.wq, self.bq = _lift(wq), _lift(bq)
        self.wk, self.bk = _lift(wk), _lift(bk)
        self.wv, self.bv = _lift(wv), _lift(bv)
        self.wo, self.bo = _lift(wo), _lift(bo)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    # (..., T, D) -> (..., heads, T, D/heads)
    *lead, t, d = x.shape
    x = reshape(x, (*lead, t, heads, d // heads))
    n = x.ndim
    axes = tuple(range(n - 3)) + (n - 2, n - 3, n - 1)
    return transpose(x, axes)


def _merge_heads(x: Tensor) -> Tensor:
    # (..., heads, T, dh) -> (..., T, heads*dh)
    n = x.ndim
    axes = tuple(range(n - 3)) + (n - 2, n - 3, n - 1)
    x = transpose(x, axes)
    *lead, t, heads, dh = x.shape
    return reshape(x, (*lead, t, heads * dh))


def multi_head_attention(tokens, params: AttentionParams, heads: int) -> Tensor:
    """Scaled dot-product self-attention over the last two axes (..., T, D)."""
    tokens = _lift(tokens)
    d = tokens.shape[-1]
    if heads < 1 or d % heads != 0:
        raise ConfigurationError(
            f"token dim {d} is not divisible by head count {heads}"
        )
    q = _split_heads(linear(tokens, params.wq, params.bq), heads)
    k = _split_heads(linear(tokens, params.wk, params.bk), heads)
    v = _split_heads(linear(tokens, params.wv, params.bv), heads)

    n = k.ndim
    kt = transpose(k, tuple(range(n - 2)) + (n - 1, n - 2))
    scores = mul(matmul(q, kt), 1.0 / math.sqrt(d // heads))
    attn = softmax(scores, axis=-1)
    context = _merge_heads(matmul(attn, v))
    return linear(context, params.wo, params.bo)
