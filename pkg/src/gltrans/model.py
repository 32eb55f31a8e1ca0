"""The assembled network: backbone, global branch and local branch."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import BackboneConfig, ConfigError, TokenBundle, ViTBackbone
from .heads import (
    FusedPatchMap,
    GlobalAggregationEncoder,
    GlobalGuidedAttention,
    HeadConfig,
    PartTransformer,
    PatchTokenFusion,
)
from .nn import Module
from .tensor import Tensor, concat


@dataclass
class ForwardOutput:
    feature: Tensor  # [F_g, F_l, F_cls], disabled parts omitted
    taps: dict[str, Tensor]
    bundle: TokenBundle
    fused: FusedPatchMap | None = None  # R, after PTF (or the raw last-layer grid)
    enhanced: FusedPatchMap | None = None  # R-hat, after GMA


class Heads(Module):
    def __init__(self, bcfg: BackboneConfig, hcfg: HeadConfig, rng: np.random.Generator):
        self.layers_used = hcfg.layers_for(bcfg.depth)
        k, d = len(self.layers_used), bcfg.dim
        gh, _ = bcfg.grid
        if hcfg.gma_on and not hcfg.gae_on:
            raise ConfigError("gma_on requires gae_on: the global feature is the attention query")
        if hcfg.ptl_on and gh % hcfg.parts:
            raise ConfigError(f"grid height {gh} is not divisible by parts={hcfg.parts}")
        if hcfg.parts < 1 or hcfg.ptl_depth < 0:
            raise ConfigError("parts must be >= 1 and ptl_depth >= 0")
        self.gae = GlobalAggregationEncoder(k, d, hcfg.gae_strategy, rng) if hcfg.gae_on else None
        local = hcfg.ptl_on
        self.ptf = PatchTokenFusion(k, d, hcfg.r1, rng) if local and hcfg.ptf_on else None
        self.gma = (
            GlobalGuidedAttention(self.gae.out_dim, d, hcfg.gma_heads, hcfg.r2, rng)
            if local and hcfg.gma_on
            else None
        )
        self.ptl = PartTransformer(hcfg, d, bcfg.heads, bcfg.mlp_ratio, rng) if local else None


class GLTransNet(Module):
    def __init__(self, bcfg: BackboneConfig, hcfg: HeadConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.backbone = ViTBackbone(bcfg, rng)
        self.heads = Heads(bcfg, hcfg, rng)
        self.bcfg = bcfg
        self.hcfg = hcfg

    @property
    def layers_used(self) -> tuple[int, ...]:
        return self.heads.layers_used

    @property
    def feature_dim(self) -> int:
        d = self.bcfg.dim
        dim = d
        if self.heads.gae is not None:
            dim += self.heads.gae.out_dim
        if self.heads.ptl is not None:
            dim += self.hcfg.parts * d
        return dim

    def tap_names(self) -> list[str]:
        names = []
        if self.heads.gae is not None:
            names.append("F_g")
        if self.heads.ptl is not None:
            names.append("F_l")
        names.append("F_cls")
        if self.heads.gae is not None:
            names += [f"v{l}" for l in self.layers_used[:-1]]
        return names

    def tap_dims(self) -> dict[str, int]:
        d = self.bcfg.dim
        dims = {"F_cls": d}
        if self.heads.gae is not None:
            dims["F_g"] = self.heads.gae.out_dim
        if self.heads.ptl is not None:
            dims["F_l"] = self.hcfg.parts * d
        for l in self.layers_used[:-1]:
            dims[f"v{l}"] = d
        return {k: dims[k] for k in self.tap_names()}

    def local_branch(self, bundle: TokenBundle, global_feature: Tensor | None) -> tuple[FusedPatchMap, FusedPatchMap]:
        h = self.heads
        layers = self.layers_used
        if h.ptf is not None:
            fused = h.ptf(bundle, layers)
        else:
            last = bundle.patches(bundle.depth)
            b, _, d = last.shape
            fused = FusedPatchMap(grid=last.reshape(b, *bundle.grid, d))
        enhanced = h.gma(fused, global_feature) if h.gma is not None else fused
        return fused, enhanced

    def forward(self, images: np.ndarray, cameras) -> ForwardOutput:
        bundle = self.backbone(images, cameras)
        h = self.heads
        layers = self.layers_used
        taps: dict[str, Tensor] = {}
        parts = []
        f_g = None
        if h.gae is not None:
            f_g = h.gae(bundle, layers)
            taps["F_g"] = f_g
            parts.append(f_g)
        fused = enhanced = None
        if h.ptl is not None:
            fused, enhanced = self.local_branch(bundle, f_g)
            f_l = h.ptl(enhanced, [bundle.cls(l) for l in layers])
            taps["F_l"] = f_l
            parts.append(f_l)
        f_cls = bundle.cls(bundle.depth)
        taps["F_cls"] = f_cls
        parts.append(f_cls)
        if h.gae is not None:
            for l in layers[:-1]:
                taps[f"v{l}"] = bundle.cls(l)
        feature = concat(parts, axis=-1) if len(parts) > 1 else f_cls
        return ForwardOutput(feature=feature, taps=taps, bundle=bundle, fused=fused, enhanced=enhanced)
