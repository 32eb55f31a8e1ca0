"""Global aggregation, patch-token fusion, global-guided gating and part layers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbone import ConfigError, TokenBundle
from .nn import BatchNorm, Conv2d, Linear, Module, TransformerLayer, param, trunc_normal
from .tensor import Tensor, concat, gelu, sigmoid

GAE_STRATEGIES = ("one_fc", "two_fc", "add", "concat")
PTL_MODES = ("shared", "unshared", "avgpool")


def last_layers(k: int, depth: int) -> tuple[int, ...]:
    """The last ``k`` block indices, or ``(0,)`` for an empty encoder."""
    if depth == 0:
        return (0,)
    return tuple(range(max(1, depth - k + 1), depth + 1))


@dataclass(frozen=True)
class HeadConfig:
    aggregated_layers: tuple[int, ...] | None = None  # None: last three layers
    r1: int = 4
    r2: int = 1
    gma_heads: int = 4
    parts: int = 2
    ptl_depth: int = 2
    ptl_mode: str = "shared"
    gae_on: bool = True
    ptl_on: bool = True
    ptf_on: bool = True
    gma_on: bool = True
    gae_strategy: str = "one_fc"

    def layers_for(self, depth: int) -> tuple[int, ...]:
        """Resolve aggregated layer indices against a backbone depth.

        Index l >= 1 is the output of block l; 0 is the embedded input and
        only used when the backbone has no blocks.
        """
        layers = self.aggregated_layers
        if layers is None:
            layers = last_layers(3, depth)
        layers = tuple(int(l) for l in layers)
        if not layers:
            raise ConfigError("aggregated_layers must be non-empty")
        if any(l < 0 or l > depth for l in layers):
            raise ConfigError(f"aggregated layers {layers} outside backbone depth 0..{depth}")
        if list(layers) != sorted(set(layers)):
            raise ConfigError(f"aggregated layers must be strictly increasing: {layers}")
        return layers


@dataclass
class FusedPatchMap:
    """Patch tokens on their ``(B, Hg, Wg, D)`` grid plus the gates that shaped them."""

    grid: Tensor
    masks: list[Tensor] = field(default_factory=list)
    attention: Tensor | None = None


class GlobalAggregationEncoder(Module):
    def __init__(self, num_layers: int, dim: int, strategy: str, rng: np.random.Generator):
        if strategy not in GAE_STRATEGIES:
            raise ConfigError(f"unknown gae_strategy {strategy!r}; expected one of {GAE_STRATEGIES}")
        self.strategy = strategy
        self.out_dim = num_layers * dim if strategy == "concat" else dim
        if strategy in ("one_fc", "two_fc"):
            self.fc = Linear(num_layers * dim, dim, rng)
        if strategy == "two_fc":
            self.fc2 = Linear(dim, dim, rng)

    def forward(self, bundle: TokenBundle, layers: tuple[int, ...]) -> Tensor:
        if max(layers) > bundle.depth:
            raise ConfigError(f"layer {max(layers)} missing from a bundle of depth {bundle.depth}")
        tokens = [bundle.cls(l) for l in layers]
        if self.strategy == "add":
            out = tokens[0]
            for t in tokens[1:]:
                out = out + t
            return out
        stacked = concat(tokens, axis=-1)
        if self.strategy == "concat":
            return stacked
        out = gelu(self.fc(stacked))
        if self.strategy == "two_fc":
            out = gelu(self.fc2(out))
        return out


class TokenMask(Module):
    """Sigmoid(GeLU(X W1) W2): a per-token, per-channel gate in (0, 1)."""

    def __init__(self, dim: int, r1: int, rng: np.random.Generator):
        hidden = max(1, dim // r1)
        self.w1 = param(trunc_normal(rng, (dim, hidden)))
        self.w2 = param(trunc_normal(rng, (hidden, dim)))

    def forward(self, x: Tensor) -> Tensor:
        return sigmoid(gelu(x @ self.w1) @ self.w2)


class PatchTokenFusion(Module):
    def __init__(self, num_layers: int, dim: int, r1: int, rng: np.random.Generator):
        self.masks = [TokenMask(dim, r1, rng) for _ in range(num_layers)]
        self.conv1 = Conv2d(num_layers * dim, dim, 1, rng)
        self.bn1 = BatchNorm(dim)
        self.conv2 = Conv2d(dim, dim, 3, rng)
        self.bn2 = BatchNorm(dim)

    def forward(self, bundle: TokenBundle, layers: tuple[int, ...]) -> FusedPatchMap:
        gh, gw = bundle.grid
        masks, grids = [], []
        for mask, l in zip(self.masks, layers):
            x = bundle.patches(l)
            b, n, d = x.shape
            if gh * gw != n:
                raise ConfigError(f"grid {gh}x{gw} does not hold {n} patch tokens")
            s = mask(x)
            masks.append(s)
            grids.append((s * x + x).reshape(b, gh, gw, d))
        x = concat(grids, axis=-1)
        x = gelu(self.bn1(self.conv1(x)))
        x = gelu(self.bn2(self.conv2(x)))
        return FusedPatchMap(grid=x, masks=masks)


class GlobalGuidedAttention(Module):
    """Head-wise sigmoid gate of every patch token by the global feature.

    The global feature and each token are split into ``heads`` chunks along
    the channel axis. Per head, both are projected to width ``D'/r2`` and
    multiplied elementwise; for ``r2 > 1`` a learned expansion restores
    width ``D'`` before the sigmoid. Output is ``R + R * A``.
    """

    def __init__(self, global_dim: int, dim: int, heads: int, r2: int, rng: np.random.Generator):
        if dim % heads or global_dim % heads:
            raise ConfigError(f"GMA heads {heads} must divide dims {dim} and {global_dim}")
        head_dim = dim // heads
        if head_dim % r2:
            raise ConfigError(f"r2={r2} must divide the head width {head_dim}")
        self.heads = heads
        red = head_dim // r2
        self.wq = param(trunc_normal(rng, (heads, global_dim // heads, red)))
        self.wk = param(trunc_normal(rng, (heads, head_dim, red)))
        self.expand = param(trunc_normal(rng, (heads, red, head_dim))) if r2 > 1 else None

    def forward(self, fused: FusedPatchMap, global_feature: Tensor) -> FusedPatchMap:
        r = fused.grid
        b, gh, gw, d = r.shape
        o = self.heads
        keys = r.reshape(b, gh * gw, o, d // o).transpose(0, 2, 1, 3)  # (B, O, N, D')
        query = global_feature.reshape(b, o, 1, -1) @ self.wq  # (B, O, 1, D'/r2)
        score = query * (keys @ self.wk)  # (B, O, N, D'/r2)
        if self.expand is not None:
            score = score @ self.expand
        attn = sigmoid(score).transpose(0, 2, 1, 3).reshape(b, gh, gw, d)
        return FusedPatchMap(grid=r + r * attn, masks=fused.masks, attention=attn)


class PartTransformer(Module):
    """Stripe the token grid and summarize each stripe with a learnable part token."""

    def __init__(self, cfg: HeadConfig, dim: int, heads: int, mlp_ratio: float, rng: np.random.Generator):
        if cfg.ptl_mode not in PTL_MODES:
            raise ConfigError(f"unknown ptl_mode {cfg.ptl_mode!r}; expected one of {PTL_MODES}")
        self.parts = cfg.parts
        self.depth = cfg.ptl_depth
        self.mode = cfg.ptl_mode
        # avgpool pools stripes directly and has no part tokens
        self.part_tokens = param(np.zeros((cfg.parts, dim))) if self.mode != "avgpool" else None
        if self.mode == "avgpool":
            count = 0
        elif self.mode == "shared":
            count = cfg.ptl_depth
        else:
            count = cfg.ptl_depth * cfg.parts
        self.layers = [TransformerLayer(dim, heads, mlp_ratio, rng) for _ in range(count)]

    def stripes(self, grid: Tensor) -> Tensor:
        """``(B, Hg, Wg, D)`` -> ``(B, T, (Hg/T) * Wg, D)``, top stripe first."""
        b, gh, gw, d = grid.shape
        t = self.parts
        if gh % t:
            raise ConfigError(f"grid height {gh} not divisible into {t} stripes")
        return grid.reshape(b, t, (gh // t) * gw, d)

    def sequences(self, grid: Tensor, cls_tokens: list[Tensor]) -> Tensor:
        """Per-part inputs ``(B, T, 1 + k + N/T, D)``: part token, class tokens, stripe."""
        stripes = self.stripes(grid)
        b, t, _, d = stripes.shape
        zeros = Tensor(np.zeros((b, t, 1, 1)))
        seeds = self.part_tokens.reshape(1, t, 1, d) + zeros
        prefix = concat([c.reshape(b, 1, 1, d) for c in cls_tokens], axis=2) + zeros
        return concat([seeds, prefix, stripes], axis=2)

    def forward(self, fused: FusedPatchMap, cls_tokens: list[Tensor]) -> Tensor:
        if self.mode == "avgpool":
            stripes = self.stripes(fused.grid)
            b, t, _, d = stripes.shape
            return stripes.mean(axis=2).reshape(b, t * d)
        seq = self.sequences(fused.grid, cls_tokens)
        b, t, length, d = seq.shape
        if self.mode == "shared":
            x = seq.reshape(b * t, length, d)
            for layer in self.layers:
                x = layer(x)
            return x[:, 0, :].reshape(b, t * d)
        outs = []
        for p in range(t):
            x = seq[:, p]
            for layer in self.layers[p * self.depth : (p + 1) * self.depth]:
                x = layer(x)
            outs.append(x[:, 0, :])
        return concat(outs, axis=-1)
