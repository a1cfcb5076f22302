"""Reverse-mode automatic differentiation over dense numpy arrays.

A global tape records every operation whose inputs require gradients.
``backward(loss)`` walks the tape in reverse, accumulates gradients into
``Tensor.grad`` buffers, and resets the tape. All math is float64;
checkpoint serialization downcasts to float32 (see ``checkpoint``).
"""

from __future__ import annotations

import contextlib

import numpy as np


class AutodiffError(Exception):
    """Raised on structural misuse: bad shapes, non-scalar losses, missing grads."""


class NonFiniteError(AutodiffError):
    """Raised when a value enters the error state of containing NaN or Inf."""


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

class Node:
    """One op record: inputs, output and the rule mapping d(out) to d(inputs)."""

    __slots__ = ("inputs", "output", "backward_fn", "op")

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Graph:
    """Append-only op tape. Insertion order is a valid topological order."""

    def __init__(self):
        self.nodes: list[Node] = []

    def record(self, op, inputs, output, backward_fn):
        self.nodes.append(Node(op, inputs, output, backward_fn))

    def clear(self):
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)


_GRAPH = Graph()
_GRAD_ENABLED = True
_STRICT_FINITE = False


def active_graph() -> Graph:
    return _GRAPH


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference paths)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def set_strict_finite(flag: bool):
    """When on, every forward op validates that its output is finite."""
    global _STRICT_FINITE
    _STRICT_FINITE = flag


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------

class Tensor:
    """Dense float64 array plus an optional gradient buffer of the same shape."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{tag})"

    # Operator sugar; the functions below do the real work.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finite_check(op: str, out: np.ndarray):
    if _STRICT_FINITE and not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{op}: produced non-finite values")


def _make(op, data, inputs, backward_fn) -> Tensor:
    """Build the output tensor and record the op when gradients are live."""
    _finite_check(op, data)
    needs = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        _GRAPH.record(op, inputs, out, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def backward_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make("add", data, (a, b), backward_fn)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def backward_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make("sub", data, (a, b), backward_fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def backward_fn(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _make("mul", data, (a, b), backward_fn)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data

    def backward_fn(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return _make("div", data, (a, b), backward_fn)


def exp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)

    def backward_fn(g):
        return (g * data,)

    return _make("exp", data, (a,), backward_fn)


def log(a) -> Tensor:
    a = as_tensor(a)
    data = np.log(a.data)

    def backward_fn(g):
        return (g / a.data,)

    return _make("log", data, (a,), backward_fn)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    data = np.tanh(a.data)

    def backward_fn(g):
        return (g * (1.0 - data * data),)

    return _make("tanh", data, (a,), backward_fn)


def relu(a) -> Tensor:
    a = as_tensor(a)
    data = np.maximum(a.data, 0.0)

    def backward_fn(g):
        return (g * (a.data > 0.0),)

    return _make("relu", data, (a,), backward_fn)


def silu(a) -> Tensor:
    a = as_tensor(a)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    data = a.data * sig

    def backward_fn(g):
        return (g * (sig * (1.0 + a.data * (1.0 - sig))),)

    return _make("silu", data, (a,), backward_fn)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """Tanh-approximation GELU; gradient at 0 is exactly 0.5."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    inner = _GELU_C * (x + 0.044715 * (x2 * x))
    t = np.tanh(inner)
    data = 0.5 * x * (1.0 + t)

    def backward_fn(g):
        dinner = _GELU_C * (1.0 + 0.134145 * x2)
        dt = (1.0 - t * t) * dinner
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _make("gelu", data, (a,), backward_fn)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return ((g - dot) * data,)

    return _make("softmax", data, (a,), backward_fn)


# ---------------------------------------------------------------------------
# Linear algebra & shape ops
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product. Supports (m,k)@(k,n) and batched (...,m,k)@(k,n)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim != 2:
        raise AutodiffError(
            f"matmul: unsupported ranks {a.data.shape} @ {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[0]:
        raise AutodiffError(
            f"matmul: inner dimensions differ, {a.data.shape} @ {b.data.shape}"
        )
    data = a.data @ b.data

    def backward_fn(g):
        ga = g @ b.data.T
        if a.ndim == 2:
            gb = a.data.T @ g
        else:
            gb = np.tensordot(a.data, g, axes=(tuple(range(a.ndim - 1)),) * 2)
        return ga, gb

    return _make("matmul", data, (a, b), backward_fn)


def bmm(a, b) -> Tensor:
    """Batched matrix product (B,m,k)@(B,k,n)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 3 or b.ndim != 3 or a.data.shape[0] != b.data.shape[0] \
            or a.data.shape[2] != b.data.shape[1]:
        raise AutodiffError(f"bmm: incompatible shapes {a.data.shape} @ {b.data.shape}")
    data = np.matmul(a.data, b.data)

    def backward_fn(g):
        return (
            np.matmul(g, b.data.transpose(0, 2, 1)),
            np.matmul(a.data.transpose(0, 2, 1), g),
        )

    return _make("bmm", data, (a, b), backward_fn)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.data.shape
    data = a.data.reshape(shape)

    def backward_fn(g):
        return (g.reshape(old),)

    return _make("reshape", data, (a,), backward_fn)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    data = np.transpose(a.data, axes)
    inverse = tuple(np.argsort(axes))

    def backward_fn(g):
        return (np.transpose(g, inverse),)

    return _make("transpose", data, (a,), backward_fn)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make("concat", data, tuple(tensors), backward_fn)


def slice_(a, key) -> Tensor:
    """Take a basic-indexing slice; the gradient scatters back into place."""
    a = as_tensor(a)
    data = a.data[key].copy()

    def backward_fn(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return _make("slice", data, (a,), backward_fn)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    data = np.broadcast_to(a.data, shape).copy()
    old = a.data.shape

    def backward_fn(g):
        return (_unbroadcast(g, old),)

    return _make("broadcast", data, (a,), backward_fn)


# ---------------------------------------------------------------------------
# Reductions & losses
# ---------------------------------------------------------------------------

def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _make("sum", data, (a,), backward_fn)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis] if isinstance(axis, int) else int(
            np.prod([a.data.shape[i] for i in axis])
        )

    def backward_fn(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / count, a.data.shape).copy(),)

    return _make("mean", data, (a,), backward_fn)


def mse(pred, target) -> Tensor:
    """Mean squared error over all elements, reduced to a scalar."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.data.shape != target.data.shape:
        raise AutodiffError(
            f"mse: shape mismatch {pred.data.shape} vs {target.data.shape}"
        )
    diff = pred.data - target.data
    n = diff.size
    data = np.float64((diff * diff).sum() / n)

    def backward_fn(g):
        base = g * 2.0 * diff / n
        return base, -base

    return _make("mse", np.asarray(data), (pred, target), backward_fn)


def layernorm(x, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis; affine params are optional."""
    x = as_tensor(x)
    d = x.data.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    if gamma is None and beta is None:
        def backward_plain(g):
            gsum = g.sum(axis=-1, keepdims=True)
            gdot = (g * xhat).sum(axis=-1, keepdims=True)
            return ((g - gsum / d - xhat * gdot / d) * inv,)

        return _make("layernorm", xhat, (x,), backward_plain)

    gamma, beta = as_tensor(gamma), as_tensor(beta)
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise AutodiffError(
            f"layernorm: affine shapes {gamma.data.shape}/{beta.data.shape} "
            f"do not match feature dim {d}"
        )
    data = xhat * gamma.data + beta.data

    def backward_fn(g):
        gxhat = g * gamma.data
        gsum = gxhat.sum(axis=-1, keepdims=True)
        gdot = (gxhat * xhat).sum(axis=-1, keepdims=True)
        gx = (gxhat - gsum / d - xhat * gdot / d) * inv
        axes = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _make("layernorm", data, (x, gamma, beta), backward_fn)


def scale_shift(x, scale, shift) -> Tensor:
    """Fused AdaLN modulation: ``x * (1 + scale) + shift`` with broadcasting."""
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    data = x.data * (1.0 + scale.data) + shift.data

    def backward_fn(g):
        return (
            _unbroadcast(g * (1.0 + scale.data), x.data.shape),
            _unbroadcast(g * x.data, scale.data.shape),
            _unbroadcast(g, shift.data.shape),
        )

    return _make("scale_shift", data, (x, scale, shift), backward_fn)


def add_scaled(base, update, gate) -> Tensor:
    """Fused gated residual: ``base + update * gate`` with broadcasting."""
    base, update, gate = as_tensor(base), as_tensor(update), as_tensor(gate)
    data = base.data + update.data * gate.data

    def backward_fn(g):
        return (
            _unbroadcast(g, base.data.shape),
            _unbroadcast(g * gate.data, update.data.shape),
            _unbroadcast(g * update.data, gate.data.shape),
        )

    return _make("add_scaled", data, (base, update, gate), backward_fn)


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def conv1d(x, w, bias=None, padding: int = 0, groups: int = 1) -> Tensor:
    """1-D cross-correlation, channels first.

    x: [B, C_in, T], w: [C_out, C_in/groups, K], explicit symmetric zero
    padding. groups must be 1 (dense) or C_in == C_out (depthwise).
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 3:
        raise AutodiffError(
            f"conv1d: expected 3-d input and weight, got {x.data.shape} and {w.data.shape}"
        )
    b_, c_in, t = x.data.shape
    c_out, c_in_g, k = w.data.shape
    if groups == 1:
        if c_in_g != c_in:
            raise AutodiffError(
                f"conv1d: weight expects {c_in_g} input channels, input has {c_in}"
            )
    elif groups == c_in and c_out == c_in and c_in_g == 1:
        pass  # depthwise
    else:
        raise AutodiffError(
            f"conv1d: unsupported groups={groups} for shapes {x.data.shape}, {w.data.shape}"
        )
    t_out = t + 2 * padding - k + 1
    if t_out < 1:
        raise AutodiffError(
            f"conv1d: kernel {k} with padding {padding} exceeds length {t}"
        )

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    out = np.zeros((b_, c_out, t_out))
    if groups == 1:
        for j in range(k):
            out += np.matmul(w.data[:, :, j], xp[:, :, j:j + t_out])
    else:
        for j in range(k):
            out += w.data[:, 0, j][None, :, None] * xp[:, :, j:j + t_out]

    inputs = [x, w]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.data.shape != (c_out,):
            raise AutodiffError(
                f"conv1d: bias shape {bias.data.shape} does not match {c_out} channels"
            )
        out += bias.data[None, :, None]
        inputs.append(bias)

    def backward_fn(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        if groups == 1:
            for j in range(k):
                gw[:, :, j] = np.einsum("bot,bit->oi", g, xp[:, :, j:j + t_out])
                gxp[:, :, j:j + t_out] += np.matmul(w.data[:, :, j].T, g)
        else:
            for j in range(k):
                gw[:, 0, j] = (g * xp[:, :, j:j + t_out]).sum(axis=(0, 2))
                gxp[:, :, j:j + t_out] += w.data[:, 0, j][None, :, None] * g
        gx = gxp[:, :, padding:padding + t] if padding else gxp
        if bias is not None:
            return gx, gw, g.sum(axis=(0, 2))
        return gx, gw

    return _make("conv1d", out, tuple(inputs), backward_fn)


def dropout(x, p: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    x = as_tensor(x)
    if not training or p <= 0.0:
        return x
    keep = (rng.random(x.data.shape) >= p) / (1.0 - p)
    data = x.data * keep

    def backward_fn(g):
        return (g * keep,)

    return _make("dropout", data, (x,), backward_fn)


# ---------------------------------------------------------------------------
# Dispatcher & backward
# ---------------------------------------------------------------------------

OP_TABLE = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "conv1d": conv1d,
    "layernorm": layernorm,
    "gelu": gelu,
    "silu": silu,
    "relu": relu,
    "softmax": softmax,
    "mean": mean,
    "sum": sum_,
    "mse": mse,
    "concat": concat,
    "slice": slice_,
    "broadcast": broadcast_to,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch one forward op by kind name (test and harness surface)."""
    try:
        fn = OP_TABLE[kind]
    except KeyError:
        raise AutodiffError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)


def backward(loss: Tensor):
    """Populate gradients of all participating leaves, then reset the tape.

    ``loss`` must be scalar. Intermediate tensors also receive gradients;
    leaves that took part in the graph but do not influence the loss get
    zeros.
    """
    if not isinstance(loss, Tensor):
        raise AutodiffError("backward: loss must be a Tensor")
    if loss.data.size != 1:
        raise AutodiffError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("backward: loss is not finite")

    loss.grad = np.ones_like(loss.data)
    for node in reversed(_GRAPH.nodes):
        g = node.output.grad
        if g is None:
            continue
        grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, grads):
            if not t.requires_grad or gi is None:
                continue
            if t.grad is None:
                t.grad = np.array(gi, dtype=np.float64, copy=True)
            else:
                t.grad += gi

    # Leaves that entered the graph but have no path to the loss get zeros.
    for node in _GRAPH.nodes:
        for t in node.inputs:
            if t.requires_grad and t.grad is None:
                t.grad = np.zeros_like(t.data)
    _GRAPH.clear()


def zero_grads(params) -> None:
    values = params.values() if isinstance(params, dict) else params
    for p in values:
        p.grad = None
