"""PanFormer assembly: dual-path encoder, cross-modality fusion, restoration head."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import (
    AttnConfig,
    CrossAttentionBlock,
    PatchEmbed,
    PatchMerge,
    SelfAttentionBlock,
)
from .nn import Conv3x3, Module
from .tensor import DimensionError, Tensor

FUSION_VARIANTS = ("concat", "pan_x_ms", "ms_x_pan", "bidirectional")
SCALE = 4


class ConfigError(ValueError):
    """Invalid or unknown configuration values."""


@dataclass(frozen=True)
class PanFormerConfig:
    C: int = 64
    heads: int = 8
    window: int = 4
    sab_per_path: int = 4
    cab_count: int = 6
    mlp_ratio: int = 4
    bands: int = 4
    scale: int = SCALE
    fusion_variant: str = "bidirectional"
    scale_mode: str = "per_head"

    def __post_init__(self):
        if self.C < 1 or self.heads < 1 or self.C % self.heads:
            raise ConfigError(f"C={self.C} must be a positive multiple of heads={self.heads}")
        if self.sab_per_path < 2 or self.sab_per_path % 2:
            raise ConfigError(f"sab_per_path must be even and >= 2, got {self.sab_per_path}")
        if self.cab_count < 1:
            raise ConfigError(f"cab_count must be >= 1, got {self.cab_count}")
        if self.scale != SCALE:
            raise ConfigError(f"scale is fixed at {SCALE}, got {self.scale}")
        if self.fusion_variant not in FUSION_VARIANTS:
            raise ConfigError(f"fusion_variant must be one of {FUSION_VARIANTS}, got {self.fusion_variant!r}")
        if self.bands < 1 or self.window < 1 or self.mlp_ratio < 1:
            raise ConfigError("bands, window and mlp_ratio must be positive")
        # surfaces bad scale_mode as a config error
        try:
            self.attn(0)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def attn(self, index: int) -> AttnConfig:
        """Block config for position ``index`` in a stack; odd positions are shifted."""
        return AttnConfig(self.C, self.heads, self.window, self.window // 2 if index % 2 else 0,
                          self.mlp_ratio, self.scale_mode)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PanFormerConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {unknown}")
        return cls(**data)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PanFormerConfig":
        return cls.from_dict(json.loads(text))


class SelfChain(Module):
    def __init__(self, cfg: PanFormerConfig, depth: int, rng: np.random.Generator):
        self.blocks = [SelfAttentionBlock(cfg.attn(i), rng) for i in range(depth)]

    def forward(self, x: Tensor) -> Tensor:
        for blk in self.blocks:
            x = blk(x)
        return x


class CrossChain(Module):
    """Cross-attention stack; the K/V source stays fixed, the Q stream is refined."""

    def __init__(self, cfg: PanFormerConfig, depth: int, rng: np.random.Generator):
        self.blocks = [CrossAttentionBlock(cfg.attn(i), rng) for i in range(depth)]

    def forward(self, kv_stream: Tensor, q_stream: Tensor) -> Tensor:
        x = q_stream
        for blk in self.blocks:
            x = blk(kv_stream, x)
        return x


class Fusion(Module):
    """Two parallel chains whose outputs are concatenated on channels.

    ``first`` produces the half that sits in channels [0, C), ``second`` the
    half in [C, 2C).  A half without cross-attention gets an equally deep
    self-attention chain.
    """

    def __init__(self, cfg: PanFormerConfig, rng: np.random.Generator):
        v, depth = cfg.fusion_variant, cfg.cab_count
        self.variant = v
        self.first = CrossChain(cfg, depth, rng) if v in ("pan_x_ms", "bidirectional") else SelfChain(cfg, depth, rng)
        self.second = CrossChain(cfg, depth, rng) if v in ("ms_x_pan", "bidirectional") else SelfChain(cfg, depth, rng)

    def forward(self, f_pan: Tensor, f_ms: Tensor) -> Tensor:
        if f_pan.shape != f_ms.shape:
            raise DimensionError(f"fusion inputs differ: PAN {f_pan.shape} vs MS {f_ms.shape}")
        v = self.variant
        a = self.first(f_pan, f_ms) if v in ("pan_x_ms", "bidirectional") else self.first(f_pan)
        b = self.second(f_ms, f_pan) if v in ("ms_x_pan", "bidirectional") else self.second(f_ms)
        return T.concat([a, b], axis=-1)


class RestorationHead(Module):
    def __init__(self, cfg: PanFormerConfig, rng: np.random.Generator):
        c = cfg.C
        self.conv1 = Conv3x3(2 * c, 4 * c, rng)
        self.conv2 = Conv3x3(c, 4 * c, rng)
        self.conv3 = Conv3x3(c, c, rng)
        self.conv4 = Conv3x3(c, cfg.bands, rng)

    def forward(self, x: Tensor) -> Tensor:
        x = T.pixel_shuffle(self.conv1(x), 2)
        x = T.pixel_shuffle(self.conv2(T.relu(x)), 2)
        x = self.conv3(T.relu(x))
        return self.conv4(T.relu(x))


class PanFormerModel(Module):
    def __init__(self, cfg: PanFormerConfig, rng: np.random.Generator | int = 0):
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        self.cfg = cfg
        half = cfg.sab_per_path // 2
        self.pan_embed = PatchEmbed(1, cfg.C, 2, rng)
        self.pan_sabs_hi = SelfChain(cfg, half, rng)
        self.pan_merge = PatchMerge(cfg.C, rng)
        self.pan_sabs_lo = SelfChain(cfg, half, rng)
        self.ms_embed = PatchEmbed(cfg.bands, cfg.C, 1, rng)
        self.ms_sabs = SelfChain(cfg, cfg.sab_per_path, rng)
        self.fusion = Fusion(cfg, rng)
        self.head = RestorationHead(cfg, rng)
        self.name_parameters()

    def encode_pan(self, pan: Tensor) -> Tensor:
        if pan.ndim != 4 or pan.shape[3] != 1 or pan.shape[1] % SCALE or pan.shape[2] % SCALE:
            raise DimensionError(f"PAN input must be [N,4H,4W,1], got {pan.shape}")
        x = self.pan_embed(pan)
        x = self.pan_sabs_hi(x)
        x = self.pan_merge(x)
        return self.pan_sabs_lo(x)

    def encode_ms(self, ms: Tensor) -> Tensor:
        if ms.ndim != 4 or ms.shape[3] != self.cfg.bands:
            raise DimensionError(f"MS input must be [N,H,W,{self.cfg.bands}], got {ms.shape}")
        return self.ms_sabs(self.ms_embed(ms))

    def fuse(self, f_pan: Tensor, f_ms: Tensor) -> Tensor:
        return self.fusion(f_pan, f_ms)

    def restore(self, feat: Tensor) -> Tensor:
        return self.head(feat)

    def forward(self, pan: Tensor, ms: Tensor) -> Tensor:
        if (pan.ndim != 4 or ms.ndim != 4 or pan.shape[0] != ms.shape[0]
                or pan.shape[1] != SCALE * ms.shape[1] or pan.shape[2] != SCALE * ms.shape[2]):
            raise DimensionError(
                f"PAN {pan.shape} must be exactly {SCALE}x MS {ms.shape} spatially with equal batch")
        return self.restore(self.fuse(self.encode_pan(pan), self.encode_ms(ms)))


def param_count(model: Module) -> int:
    return int(sum(p.size for p in model.parameters()))


PARAM_BAND = (1_380_000, 1_680_000)
REPORTED_PARAMS = 1_530_000
