"""Dense tensors with tape-based reverse-mode differentiation.

Every op records its parents and a closure mapping the output gradient to
input gradients. ``Tensor.backward`` walks the recorded graph in reverse
topological order. Data is float32 unless :func:`default_dtype` says
otherwise (the gradient checker evaluates its finite-difference oracle in
float64).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "ShapeError",
    "no_grad",
    "default_dtype",
    "get_default_dtype",
    "matmul",
    "concat",
    "gelu",
    "sigmoid",
    "softplus",
    "softmax",
    "log_softmax",
    "layer_norm",
    "batch_norm",
    "conv2d",
]

_dtype = np.float32
_grad_enabled = True

GELU_C = float(np.sqrt(2.0 / np.pi))
# Test hook for the gradient checker's negative control. 1.0 in normal use.
_gelu_grad_scale = 1.0


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf from finite inputs."""


class ShapeError(ValueError):
    pass


def get_default_dtype():
    return _dtype


@contextlib.contextmanager
def default_dtype(dtype):
    global _dtype
    prev, _dtype = _dtype, np.dtype(dtype).type
    try:
        yield
    finally:
        _dtype = prev


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _as_tensor(x) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(x)


class Tensor:
    """An n-dimensional array that can take part in the gradient tape."""

    __array_priority__ = 100  # keep ndarray <op> Tensor dispatching to Tensor

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=_dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"

    # -- construction -----------------------------------------------------
    @classmethod
    def _from_op(cls, data, parents, backward, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.ascontiguousarray(data, dtype=_dtype)
        if not np.isfinite(out.data).all():
            named = [p.name for p in parents if p.name]
            where = f" (inputs: {', '.join(named)})" if named else ""
            raise NonFiniteError(f"non-finite values produced by {op}{where}")
        out.grad = None
        out.name = None
        out._op = op
        needs = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{tag}, requires_grad={self.requires_grad})"

    # -- autodiff ---------------------------------------------------------
    def _topo(self) -> list["Tensor"]:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        return order

    def backward(self) -> None:
        """Populate ``.grad`` on every reachable leaf with requires_grad.

        Leaf gradients accumulate across calls; the graph is kept, so calling
        twice doubles them.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("loss is not on the gradient tape")
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(self._topo()):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- elementwise arithmetic -------------------------------------------
    def __add__(self, other):
        other = _as_tensor(other)
        a, b = self, other

        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return Tensor._from_op(a.data + b.data, (a, b), bw, "add")

    __radd__ = __add__

    def __sub__(self, other):
        other = _as_tensor(other)
        a, b = self, other

        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return Tensor._from_op(a.data - b.data, (a, b), bw, "sub")

    def __rsub__(self, other):
        return _as_tensor(other) - self

    def __mul__(self, other):
        other = _as_tensor(other)
        a, b = self, other

        def bw(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

        return Tensor._from_op(a.data * b.data, (a, b), bw, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other)
        a, b = self, other

        def bw(g):
            return (
                _unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
            )

        return Tensor._from_op(a.data / b.data, (a, b), bw, "div")

    def __rtruediv__(self, other):
        return _as_tensor(other) / self

    def __neg__(self):
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, p: float):
        a = self

        def bw(g):
            return (g * p * a.data ** (p - 1),)

        return Tensor._from_op(a.data**p, (a,), bw, "pow")

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def exp(self):
        out = np.exp(self.data)
        return Tensor._from_op(out, (self,), lambda g: (g * out,), "exp")

    def log(self):
        a = self
        return Tensor._from_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")

    def sqrt(self):
        out = np.sqrt(self.data)
        return Tensor._from_op(out, (self,), lambda g: (g * 0.5 / out,), "sqrt")

    # -- reductions and shape ops -----------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._from_op(self.data.sum(axis=axis, keepdims=keepdims), (self,), bw, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else int(np.prod([self.shape[i] for i in np.atleast_1d(axis)]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        orig = self.shape
        return Tensor._from_op(self.data.reshape(shape), (self,), lambda g: (g.reshape(orig),), "reshape")

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        return Tensor._from_op(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),), "transpose")

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(axes)

    def __getitem__(self, idx):
        shape = self.shape
        dtype = self.data.dtype

        def bw(g):
            full = np.zeros(shape, dtype=dtype)
            np.add.at(full, idx, g)
            return (full,)

        return Tensor._from_op(self.data[idx], (self,), bw, "getitem")


# -- free functions -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._from_op(np.matmul(a.data, b.data), (a, b), bw, "matmul")


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bw(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=ax) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, "concat")


def gelu(x: Tensor) -> Tensor:
    """GeLU, tanh approximation."""
    v = x.data
    inner = GELU_C * (v + 0.044715 * v**3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def bw(g):
        d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3 * 0.044715 * v * v)
        return (g * d * _gelu_grad_scale,)

    return Tensor._from_op(out, (x,), bw, "gelu")


def sigmoid(x: Tensor) -> Tensor:
    v = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(v))
    out = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return Tensor._from_op(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), overflow-safe."""
    v = x.data
    out = np.maximum(v, 0) + np.log1p(np.exp(-np.abs(v)))
    e = np.exp(-np.abs(v))
    sig = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return Tensor._from_op(out, (x,), lambda g: (g * sig,), "softplus")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(out, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(out, (x,), bw, "log_softmax")


def _normalize_backward(g_hat: np.ndarray, xhat: np.ndarray, inv: np.ndarray, axes, n: int):
    """Gradient through (x - mean) / sqrt(var + eps) with batch statistics."""
    s1 = g_hat.sum(axis=axes, keepdims=True)
    s2 = (g_hat * xhat).sum(axis=axes, keepdims=True)
    return inv / n * (n * g_hat - s1 - xhat * s2)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then scale by ``gain`` and shift by ``bias``."""
    n = x.shape[-1]
    if n < 2:
        raise ShapeError("layer_norm needs a normalized axis of extent >= 2")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        g_hat = g * gain.data
        gx = _normalize_backward(g_hat, xhat, inv, -1, n)
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return Tensor._from_op(out, (x, gain, bias), bw, "layer_norm")


def batch_norm(
    x: Tensor,
    gain: Tensor,
    bias: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Channels-last batch normalization over every axis but the last.

    In training mode ``running_mean``/``running_var`` are updated in place.
    """
    axes = tuple(range(x.ndim - 1))
    if not training:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean) * inv
        out = xhat * gain.data + bias.data

        def bw_eval(g):
            return g * gain.data * inv, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

        return Tensor._from_op(out, (x, gain, bias), bw_eval, "batch_norm")

    if x.shape[0] < 2:
        raise ValueError("batch_norm in training mode needs a batch of at least 2")
    n = int(np.prod([x.shape[a] for a in axes]))
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data
    running_mean *= 1.0 - momentum
    running_mean += momentum * mu.reshape(-1)
    running_var *= 1.0 - momentum
    running_var += momentum * var.reshape(-1) * n / max(n - 1, 1)

    def bw(g):
        gx = _normalize_backward(g * gain.data, xhat, inv, axes, n)
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return Tensor._from_op(out, (x, gain, bias), bw, "batch_norm")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-padded cross-correlation on channels-last input.

    ``x`` is ``(H, W, Cin)`` or ``(B, H, W, Cin)``; ``kernel`` is
    ``(kh, kw, Cin, Cout)`` with kh, kw in {1, 3}.
    """
    kh, kw, cin, cout = kernel.shape
    if kh not in (1, 3) or kw not in (1, 3):
        raise ValueError(f"unsupported kernel size {kh}x{kw}; expected 1 or 3")
    if x.shape[-1] != cin:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernel {kernel.shape}")
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    b, h, w, _ = xd.shape
    ph, pw = kh // 2, kw // 2
    padded = np.pad(xd, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    cols = np.empty((b, h, w, kh, kw, cin), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = padded[:, i : i + h, j : j + w, :]
    cols = cols.reshape(b, h, w, kh * kw * cin)
    kmat = kernel.data.reshape(kh * kw * cin, cout)
    out = cols @ kmat
    if bias is not None:
        out = out + bias.data
    if squeeze:
        out = out[0]

    def bw(g):
        g4 = g[None] if squeeze else g
        gk = (cols.reshape(-1, kh * kw * cin).T @ g4.reshape(-1, cout)).reshape(kernel.shape)
        gcols = (g4 @ kmat.T).reshape(b, h, w, kh, kw, cin)
        gpad = np.zeros_like(padded)
        for i in range(kh):
            for j in range(kw):
                gpad[:, i : i + h, j : j + w, :] += gcols[:, :, :, i, j, :]
        gx = gpad[:, ph : ph + h, pw : pw + w, :]
        if squeeze:
            gx = gx[0]
        grads = [gx, gk]
        if bias is not None:
            grads.append(_unbroadcast(g, bias.shape))
        return grads

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor._from_op(out, parents, bw, "conv2d")
