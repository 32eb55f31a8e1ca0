"""Overlapping-patch ViT encoder that keeps the tokens of every layer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Linear, Module, TransformerLayer, param, trunc_normal
from .tensor import Tensor, concat


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    image_h: int = 52
    image_w: int = 28
    channels: int = 3
    stride: int = 12
    patch: int = 16
    dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    num_cameras: int = 4

    def __post_init__(self):
        if not self.patch >= self.stride >= 1:
            raise ConfigError(f"need patch >= stride >= 1, got P={self.patch}, S={self.stride}")
        for extent in (self.image_h, self.image_w):
            if extent + self.stride - self.patch < self.stride:
                raise ConfigError(f"image extent {extent} smaller than patch {self.patch}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by {self.heads} heads")
        if self.depth < 0 or self.num_cameras < 1:
            raise ConfigError("depth must be >= 0 and num_cameras >= 1")

    @property
    def grid(self) -> tuple[int, int]:
        s, p = self.stride, self.patch
        return (self.image_h + s - p) // s, (self.image_w + s - p) // s

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw


@dataclass
class TokenBundle:
    """Token sequences of shape ``(B, N+1, D)``.

    ``layers[0]`` is the embedded input, ``layers[l]`` the output of block l.
    """

    layers: list[Tensor]
    grid: tuple[int, int]

    @property
    def depth(self) -> int:
        return len(self.layers) - 1

    def cls(self, layer: int) -> Tensor:
        return self.layers[layer][:, 0, :]

    def patches(self, layer: int) -> Tensor:
        return self.layers[layer][:, 1:, :]


def window_origins(extent: int, stride: int, patch: int) -> np.ndarray:
    return np.arange((extent + stride - patch) // stride) * stride


def patchify(images: np.ndarray, cfg: BackboneConfig) -> np.ndarray:
    """Slice images into overlapping ``P x P`` windows at step ``S``.

    Accepts ``(H, W, C)`` or ``(B, H, W, C)``; returns ``(B, N, P*P*C)``
    with windows in row-major grid order. The window count per axis is
    ``(extent + S - P) // S``, so every window lies inside the image.
    """
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 3:
        images = images[None]
    expected = (cfg.image_h, cfg.image_w, cfg.channels)
    if images.ndim != 4 or images.shape[1:] != expected:
        raise ConfigError(f"image shape {images.shape[1:]} does not match config {expected}")
    p = cfg.patch
    rows = window_origins(cfg.image_h, cfg.stride, p)
    cols = window_origins(cfg.image_w, cfg.stride, p)
    offs = np.arange(p)
    ri = (rows[:, None] + offs)[:, None, :, None]  # (gh, 1, P, 1)
    ci = (cols[:, None] + offs)[None, :, None, :]  # (1, gw, 1, P)
    win = images[:, ri, ci, :]  # (B, gh, gw, P, P, C)
    b = images.shape[0]
    return win.reshape(b, len(rows) * len(cols), p * p * cfg.channels)


class ViTBackbone(Module):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        self.cfg = cfg
        n, d = cfg.num_patches, cfg.dim
        self.patch_embed = Linear(cfg.patch * cfg.patch * cfg.channels, d, rng)
        self.cls_token = param(np.zeros((1, d)))
        self.pos_embed = param(np.zeros((n + 1, d)))
        # one vector per camera, broadcast over all tokens
        self.side_embed = param(np.zeros((cfg.num_cameras, d)))
        self.layers = [TransformerLayer(d, cfg.heads, cfg.mlp_ratio, rng) for _ in range(cfg.depth)]

    def embed(self, images: np.ndarray, cameras) -> Tensor:
        """Project patches, prepend the class token, add position and side info."""
        patches = patchify(images, self.cfg)
        b = patches.shape[0]
        cameras = np.broadcast_to(np.asarray(cameras, dtype=np.int64), (b,))
        if cameras.min() < 0 or cameras.max() >= self.cfg.num_cameras:
            raise ConfigError(f"camera id out of range [0, {self.cfg.num_cameras}): {cameras}")
        tokens = self.patch_embed(Tensor(patches))
        cls = self.cls_token.reshape(1, 1, -1) + Tensor(np.zeros((b, 1, 1)))
        seq = concat([cls, tokens], axis=1) + self.pos_embed
        side = self.side_embed[cameras].reshape(b, 1, -1)
        return seq + side

    def encode(self, seq: Tensor) -> TokenBundle:
        layers = [seq]
        x = seq
        for block in self.layers:
            x = block(x)
            layers.append(x)
        return TokenBundle(layers=layers, grid=self.cfg.grid)

    def forward(self, images: np.ndarray, cameras) -> TokenBundle:
        return self.encode(self.embed(images, cameras))


__all__ = [
    "BackboneConfig",
    "ConfigError",
    "TokenBundle",
    "ViTBackbone",
    "patchify",
    "trunc_normal",
    "window_origins",
]
