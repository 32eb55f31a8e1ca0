"""Minimal module system and the layers shared by the backbone and heads."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Tensor, batch_norm, conv2d, gelu, layer_norm, softmax

LN_EPS = 1e-6
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal samples truncated at two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(np.float32)


def param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class Module:
    """Holds parameters (Tensors with requires_grad), buffers and submodules.

    Names follow attribute order, dotted for nesting, with list indices for
    lists of submodules (``layers.0.msa.qkv.weight``).
    """

    training: bool = True

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, value in vars(self).items():
            if key.startswith("_") or key == "training":
                continue
            if isinstance(value, list) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{key}.{i}", v
            else:
                yield key, value

    def named_tensors(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        """Parameters and buffers, depth first."""
        for key, value in self._children():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_tensors(name + ".")

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, t in self.named_tensors(prefix):
            if t.requires_grad:
                yield name, t

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_tensors(prefix)}

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "", strict: bool = True) -> None:
        own = dict(self.named_tensors(prefix))
        if strict:
            missing = sorted(set(own) - set(state))
            if missing:
                raise KeyError(f"missing tensors in state: {missing[:5]}")
        for name, t in own.items():
            if name not in state:
                continue
            value = np.asarray(state[name])
            if value.shape != t.shape:
                raise ValueError(f"shape mismatch for {name}: expected {t.shape}, got {value.shape}")
            t.data = np.ascontiguousarray(value, dtype=t.data.dtype)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = param(trunc_normal(rng, (d_in, d_out)))
        self.bias = param(np.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = x @ self.weight
        return out + self.bias if self.bias is not None else out


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gain = param(np.ones(dim))
        self.bias = param(np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, LN_EPS)


class BatchNorm(Module):
    """Channels-last batch norm; running statistics are buffers."""

    def __init__(self, dim: int):
        self.gain = param(np.ones(dim))
        self.bias = param(np.zeros(dim))
        self.running_mean = Tensor(np.zeros(dim))
        self.running_var = Tensor(np.ones(dim))

    def forward(self, x: Tensor) -> Tensor:
        return batch_norm(
            x, self.gain, self.bias, self.running_mean.data, self.running_var.data,
            training=self.training, momentum=BN_MOMENTUM, eps=BN_EPS,
        )


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator):
        if k not in (1, 3):
            raise ValueError(f"unsupported kernel size {k}")
        self.weight = param(trunc_normal(rng, (k, k, c_in, c_out)))
        self.bias = param(np.zeros(c_out))

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias)


class MultiHeadSelfAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        h, dh = self.heads, d // self.heads
        qkv = self.qkv(x).reshape(b, n, 3, h, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = softmax((q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh)), axis=-1)
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
        return self.proj(out)


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class TransformerLayer(Module):
    """Pre-norm block: x + MSA(LN(x)), then + FFN(LN(.))."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.msa = MultiHeadSelfAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.ffn = FeedForward(dim, int(dim * mlp_ratio), rng)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.msa(self.norm1(x))
        return x + self.ffn(self.norm2(x))
