"""Windowed self- and cross-attention blocks, patch embedding and patch merging.

Feature maps are [N, H, W, C].  Attention runs inside non-overlapping
``window x window`` tiles; blocks with a nonzero shift roll the map by
``-shift`` first and mask out pairs that wrapped around the seam.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Module
from .tensor import DimensionError, Tensor

MASK_VALUE = -1e4
SCALE_MODES = ("per_head", "full_dim")


@dataclass(frozen=True)
class AttnConfig:
    dim: int
    heads: int
    window: int
    shift: int = 0
    mlp_ratio: int = 4
    scale_mode: str = "per_head"

    def __post_init__(self):
        if self.dim < 1 or self.heads < 1 or self.dim % self.heads:
            raise ValueError(f"dim {self.dim} must be a positive multiple of heads {self.heads}")
        if self.window < 1:
            raise ValueError(f"window must be positive, got {self.window}")
        if not 0 <= self.shift < self.window:
            raise ValueError(f"shift {self.shift} must lie in [0, window={self.window})")
        if self.mlp_ratio < 1:
            raise ValueError(f"mlp_ratio must be >= 1, got {self.mlp_ratio}")
        if self.scale_mode not in SCALE_MODES:
            raise ValueError(f"scale_mode must be one of {SCALE_MODES}, got {self.scale_mode!r}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def scale(self) -> float:
        d = self.head_dim if self.scale_mode == "per_head" else self.dim
        return 1.0 / np.sqrt(d)


@dataclass(frozen=True)
class AttentionMask:
    """Additive score mask per window, shape [nWin, T, T]."""

    values: np.ndarray

    @classmethod
    def for_grid(cls, height: int, width: int, window: int, shift: int) -> "AttentionMask":
        return cls(_shift_mask(height, width, window, shift))

    def tiled(self, batch: int) -> np.ndarray:
        """Mask laid out for [batch*nWin, heads, T, T] scores."""
        return np.tile(self.values[:, None], (batch, 1, 1, 1))


@lru_cache(maxsize=64)
def _shift_mask(height: int, width: int, window: int, shift: int) -> np.ndarray:
    n_win = (height // window) * (width // window)
    t = window * window
    if shift == 0:
        out = np.zeros((n_win, t, t))
    else:
        labels = np.zeros((1, height, width, 1))
        cuts = (slice(0, -window), slice(-window, -shift), slice(-shift, None))
        label = 0
        for hs in cuts:
            for ws in cuts:
                labels[:, hs, ws, :] = label
                label += 1
        win = T._partition_np(labels, window)[..., 0]
        out = np.where(win[:, :, None] != win[:, None, :], MASK_VALUE, 0.0)
    out.setflags(write=False)
    return out


class Attention(Module):
    """K, V, Q and output projections (C -> C, with bias)."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.q = Linear(dim, dim, rng)
        self.proj = Linear(dim, dim, rng)


def multi_head_attention(k_src: Tensor, v_src: Tensor, q_src: Tensor, attn: Attention,
                         cfg: AttnConfig, mask: AttentionMask | np.ndarray | None = None) -> Tensor:
    """softmax(Q K^T * scale + mask) V per head, heads concatenated and projected.

    Sources are token sets [T, C] or batches of windows [B, T, C].  ``mask``
    may be an :class:`AttentionMask` (per window, tiled over the batch) or an
    array that broadcasts against the [B, heads, T, T] scores.
    """
    if not (k_src.shape == v_src.shape == q_src.shape):
        raise DimensionError(f"attention streams disagree: K {k_src.shape}, V {v_src.shape}, Q {q_src.shape}")
    single = q_src.ndim == 2
    if single:
        k_src, v_src, q_src = (x.reshape(1, *x.shape) for x in (k_src, v_src, q_src))
    b, t, c = q_src.shape
    if c != cfg.dim:
        raise DimensionError(f"token width {c} does not match attention dim {cfg.dim}")
    h, d = cfg.heads, cfg.head_dim

    def heads(x: Tensor) -> Tensor:
        return x.reshape(b, t, h, d).transpose(0, 2, 1, 3)

    q = heads(attn.q(q_src) * cfg.scale)
    k = heads(attn.k(k_src))
    v = heads(attn.v(v_src))
    scores = q @ k.transpose(0, 1, 3, 2)
    if mask is not None:
        if isinstance(mask, AttentionMask):
            n_win = mask.values.shape[0]
            if b % n_win:
                raise DimensionError(f"{b} windows are not a multiple of the mask's {n_win}")
            mask = mask.tiled(b // n_win)
        scores = scores + mask
    weights = T.softmax(scores, axis=-1)
    out = (weights @ v).transpose(0, 2, 1, 3).reshape(b, t, c)
    out = attn.proj(out)
    return out.reshape(t, c) if single else out


class _Block(Module):
    cfg: AttnConfig

    def _windowed(self, kv_in: Tensor, q_in: Tensor) -> Tensor:
        cfg = self.cfg
        _, height, width, _ = q_in.shape
        w, s = cfg.window, cfg.shift
        ph, pw = -height % w, -width % w
        same = kv_in is q_in
        kv = T.pad_spatial(kv_in, ph, pw)
        q = kv if same else T.pad_spatial(q_in, ph, pw)
        hp, wp = height + ph, width + pw
        if s:
            kv = T.cyclic_shift(kv, -s, -s)
            q = kv if same else T.cyclic_shift(q, -s, -s)
        kv_win = T.window_partition(kv, w)
        q_win = kv_win if same else T.window_partition(q, w)
        mask = AttentionMask.for_grid(hp, wp, w, s) if s else None
        out = multi_head_attention(kv_win, kv_win, q_win, self.attn, cfg, mask)
        out = T.window_reverse(out, w, hp, wp)
        if s:
            out = T.cyclic_shift(out, s, s)
        if ph or pw:
            out = out[:, :height, :width, :]
        return out

    def _mlp(self, x: Tensor) -> Tensor:
        return x + self.mlp2(T.gelu(self.mlp1(self.norm2(x))))


class SelfAttentionBlock(_Block):
    """Pre-norm windowed self-attention followed by a GELU MLP, both residual."""

    def __init__(self, cfg: AttnConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.norm1 = LayerNorm(cfg.dim)
        self.attn = Attention(cfg.dim, rng)
        self.norm2 = LayerNorm(cfg.dim)
        self.mlp1 = Linear(cfg.dim, cfg.mlp_ratio * cfg.dim, rng)
        self.mlp2 = Linear(cfg.mlp_ratio * cfg.dim, cfg.dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        normed = self.norm1(x)
        x = x + self._windowed(normed, normed)
        return self._mlp(x)


class CrossAttentionBlock(_Block):
    """K and V come from ``kv_stream``; Q and the residual path from ``q_stream``."""

    def __init__(self, cfg: AttnConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.norm1_kv = LayerNorm(cfg.dim)
        self.norm1_q = LayerNorm(cfg.dim)
        self.attn = Attention(cfg.dim, rng)
        self.norm2 = LayerNorm(cfg.dim)
        self.mlp1 = Linear(cfg.dim, cfg.mlp_ratio * cfg.dim, rng)
        self.mlp2 = Linear(cfg.mlp_ratio * cfg.dim, cfg.dim, rng)

    def forward(self, kv_stream: Tensor, q_stream: Tensor) -> Tensor:
        if kv_stream.shape != q_stream.shape:
            raise DimensionError(f"cross-attention streams differ: {kv_stream.shape} vs {q_stream.shape}")
        x = q_stream + self._windowed(self.norm1_kv(kv_stream), self.norm1_q(q_stream))
        return self._mlp(x)


def _batched(fn, *maps: Tensor) -> Tensor:
    if maps[0].ndim == 3:
        out = fn(*(m.reshape(1, *m.shape) for m in maps))
        return out.reshape(out.shape[1:])
    return fn(*maps)


def sab_forward(feat: Tensor, block: SelfAttentionBlock) -> Tensor:
    return _batched(block, feat)


def cab_forward(feat_a: Tensor, feat_b: Tensor, block: CrossAttentionBlock) -> Tensor:
    """Cross-attention with K, V from ``feat_a`` and Q from ``feat_b``."""
    if feat_a.shape != feat_b.shape:
        raise DimensionError(f"cross-attention streams differ: {feat_a.shape} vs {feat_b.shape}")
    return _batched(block, feat_a, feat_b)


class PatchEmbed(Module):
    """Non-overlapping p x p patches, flattened row-major, through one shared linear map."""

    def __init__(self, in_bands: int, dim: int, patch: int, rng: np.random.Generator):
        self.patch = patch
        self.proj = Linear(patch * patch * in_bands, dim, rng)

    def forward(self, img: Tensor) -> Tensor:
        return _batched(lambda x: patch_embed(x, self.patch, self.proj), img)


def patch_embed(img: Tensor, patch: int, proj: Linear) -> Tensor:
    n, h, w, bands = img.shape
    if h % patch or w % patch:
        raise DimensionError(f"patch size {patch} does not divide image extents {h}x{w}")
    tokens = T.window_partition(img, patch)
    tokens = tokens.reshape(n, h // patch, w // patch, patch * patch * bands)
    return proj(tokens)


class PatchMerge(Module):
    """Concatenate each 2x2 neighbourhood (row-major) to 4C and project back to C."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.proj = Linear(4 * dim, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return _batched(lambda f: patch_merge(f, self.proj), x)


def patch_merge(x: Tensor, proj: Linear) -> Tensor:
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"patch merging needs even extents, got {h}x{w}")
    tokens = T.window_partition(x, 2).reshape(n, h // 2, w // 2, 4 * c)
    return proj(tokens)
