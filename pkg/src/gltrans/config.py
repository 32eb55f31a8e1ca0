"""Run configuration: ``key = value`` files plus command-line overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .backbone import ConfigError
from .data import SynthSpec


@dataclass
class RunConfig:
    # geometry / backbone
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
    # heads
    aggregated_layers: str = "3"  # k (last k layers) or a list like "2,3,4"
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
    # optimization
    P: int = 8
    K: int = 4
    epochs: int = 30
    lr: float = 8e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0  # model init and batch order
    # data
    data: str = ""  # directory of PPM files; empty means synthesize in memory
    data_seed: int = 7
    num_ids: int = 8
    imgs_per_id: int = 16
    nuisance: float = 0.3

    def estimator_params(self) -> dict:
        layers = self.aggregated_layers.strip()
        agg = tuple(int(v) for v in layers.split(",") if v.strip()) if "," in layers else int(layers)
        keys = (
            "image_h image_w channels stride patch dim depth heads mlp_ratio num_cameras r1 r2 "
            "gma_heads parts ptl_depth ptl_mode gae_on ptl_on ptf_on gma_on gae_strategy P K "
            "epochs lr momentum weight_decay seed"
        ).split()
        params = {k: getattr(self, k) for k in keys}
        params["aggregated_layers"] = agg
        return params

    def synth_spec(self) -> SynthSpec:
        return SynthSpec(
            num_ids=self.num_ids, imgs_per_id=self.imgs_per_id, num_cameras=self.num_cameras,
            image_h=self.image_h, image_w=self.image_w, seed=self.data_seed, nuisance=self.nuisance,
        )

    def lines(self) -> list[str]:
        return [f"{f.name} = {_render(getattr(self, f.name))}" for f in fields(self)]

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **{k: coerce(k, v) for k, v in changes.items()})


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def coerce(key: str, value):
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _TYPES[key]
    if not isinstance(value, str):
        if kind == "str" and isinstance(value, (tuple, list)):
            return ",".join(str(v) for v in value)
        return str(value) if kind == "str" else value
    text = value.strip()
    try:
        if kind == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}") from None
    return text


def parse_lines(lines) -> dict[str, object]:
    out = {}
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = coerce(key, value)
    return out


def load_config(path: str | Path | None = None, overrides: list[str] = ()) -> RunConfig:
    values: dict[str, object] = {}
    if path:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        values.update(parse_lines(text.splitlines()))
    values.update(parse_lines(overrides))
    return RunConfig(**values)
