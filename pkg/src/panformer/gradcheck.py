"""Finite-difference verification of every differentiable operation and block.

All checks run in 64-bit.  Each case builds a scalar ``sum(out * r)`` with a
fixed random ``r``, back-propagates once, then compares sampled gradient
elements against central differences.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .attention import (
    AttnConfig,
    CrossAttentionBlock,
    PatchEmbed,
    PatchMerge,
    SelfAttentionBlock,
    multi_head_attention,
    Attention,
    AttentionMask,
)
from .model import FUSION_VARIANTS, PanFormerConfig, PanFormerModel, RestorationHead
from .nn import Module
from .tensor import Parameter, Tensor

STEP = 1e-5
TOLERANCE = 1e-4
# smallest denominator for the relative error, see resolvable_floor()
REL_FLOOR = 1e-8
MIN_SAMPLES = 200
# one-sided slopes further apart than this (relative, x TOLERANCE) mark a kink
KINK_RATIO = 100


@dataclass
class GradCheckResult:
    name: str
    samples: int
    max_rel_error: float
    worst: str
    floor: float
    seconds: float
    kinks: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}  {self.name:<34} samples={self.samples:<5d} "
                f"max_rel_err={self.max_rel_error:.2e} floor={self.floor:.1e}  worst={self.worst}  "
                f"kinks_skipped={self.kinks}  ({self.seconds:.2f}s)")


def resolvable_floor(term_magnitude: float) -> float:
    """Gradient size below which central differences cannot reach TOLERANCE.

    A loss summing terms of total magnitude S carries rounding error about
    eps*S per evaluation, so the difference quotient is uncertain by eps*S/h.
    Smaller gradients are compared against this floor instead of themselves.
    """
    eps = np.finfo(np.float64).eps
    return max(REL_FLOOR, eps * term_magnitude / (STEP * TOLERANCE))


def relative_error(analytic: float, numeric: float, floor: float = REL_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check(name: str, fn: Callable[[], Tensor], leaves: dict[str, Tensor],
          rng: np.random.Generator, samples: int = MIN_SAMPLES) -> GradCheckResult:
    """Compare reverse-mode gradients of ``fn`` w.r.t. ``leaves`` with central differences.

    Elements are drawn without replacement from the pooled leaves; when the
    pool is smaller than ``samples`` every element is checked.  A failing
    element whose +h and -h slopes disagree sits on a ReLU switch; it is
    counted in ``kinks`` and replaced by the next draw.
    """
    start = time.perf_counter()
    with T.oracle_mode():
        out = fn()
        weights = rng.standard_normal(out.shape)

        def loss() -> Tensor:
            return (fn() * weights).sum()

        floor = resolvable_floor(float(np.abs(out.data * weights).sum()))

        for leaf in leaves.values():
            leaf.requires_grad = True
            leaf.grad = np.zeros_like(leaf.data)
        T.backward(loss())

        pool = [(key, i) for key, leaf in leaves.items() for i in range(leaf.size)]
        checked, kinks = 0, 0
        worst, worst_at = 0.0, ""
        for j in rng.permutation(len(pool)):
            if checked == samples:
                break
            key, flat = pool[j]
            leaf = leaves[key]
            idx = np.unravel_index(flat, leaf.shape)
            orig = leaf.data[idx]
            leaf.data[idx] = orig + STEP
            up = float(loss().data)
            leaf.data[idx] = orig - STEP
            down = float(loss().data)
            leaf.data[idx] = orig
            numeric = (up - down) / (2 * STEP)
            err = relative_error(float(leaf.grad[idx]), numeric, floor)
            if err >= TOLERANCE and _straddles_kink(up, float(loss().data), down, floor):
                kinks += 1
                continue
            checked += 1
            if err > worst or not worst_at:
                worst, worst_at = err, f"{key}{list(map(int, idx))}"
    return GradCheckResult(name, checked, worst, worst_at, floor, time.perf_counter() - start, kinks)


def _straddles_kink(up: float, centre: float, down: float, floor: float) -> bool:
    """True when the +h and -h one-sided slopes disagree, i.e. a ReLU switches inside [x-h, x+h].

    On a smooth loss the two slopes differ only by O(h * curvature); a
    central difference across a switch measures neither side's derivative.
    """
    fwd, bwd = (up - centre) / STEP, (centre - down) / STEP
    return relative_error(fwd, bwd, floor) > KINK_RATIO * TOLERANCE


def randomize(module: Module, rng: np.random.Generator, scale: float = 0.5) -> Module:
    """Overwrite parameters with O(1) values so activations sit away from ReLU kinks."""
    for _, p in module.named_parameters():
        fan_in = p.shape[0] if p.ndim == 2 else (int(np.prod(p.shape[:-1])) if p.ndim == 4 else 1)
        p.assign(rng.standard_normal(p.shape) * scale / np.sqrt(max(fan_in, 1)) * (3 if p.ndim == 1 else 1))
    return module


def _param_leaves(module: Module, inputs: dict[str, Tensor] | None = None) -> dict[str, Tensor]:
    leaves: dict[str, Tensor] = dict(module.named_parameters())
    leaves.update(inputs or {})
    return leaves


def _rand(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, dtype=np.float64)


def op_cases(rng: np.random.Generator) -> list[tuple[str, Callable[[], Tensor], dict[str, Tensor]]]:
    a, b = _rand(rng, 7, 5), _rand(rng, 5, 3)
    s = _rand(rng, 4, 9)
    x, g, bt = _rand(rng, 3, 4, 6), _rand(rng, 6), _rand(rng, 6)
    e = _rand(rng, 40)
    lx, lw, lb = _rand(rng, 2, 3, 5), _rand(rng, 5, 4), _rand(rng, 4)
    cx, cw, cb = _rand(rng, 1, 5, 5, 2), _rand(rng, 3, 3, 2, 3), _rand(rng, 3)
    ps = _rand(rng, 1, 2, 2, 8)
    wx = _rand(rng, 2, 8, 8, 3)
    ww = _rand(rng, 8, 4, 3)
    px = _rand(rng, 2, 3, 5, 2)
    return [
        ("matmul", lambda: T.matmul(a, b), {"A": a, "B": b}),
        ("softmax", lambda: T.softmax(s, -1), {"x": s}),
        ("layer_norm", lambda: T.layer_norm(x, g, bt), {"x": x, "gamma": g, "beta": bt}),
        ("gelu", lambda: T.gelu(e), {"x": e}),
        ("relu", lambda: T.relu(e), {"x": e}),
        ("linear", lambda: T.linear(lx, lw, lb), {"x": lx, "W": lw, "b": lb}),
        ("conv2d_3x3", lambda: T.conv2d_3x3(cx, cw, cb), {"x": cx, "W": cw, "b": cb}),
        ("pixel_shuffle", lambda: T.pixel_shuffle(ps, 2), {"x": ps}),
        ("window_partition", lambda: T.window_partition(wx, 4), {"x": wx}),
        ("window_reverse", lambda: T.window_reverse(ww, 2, 4, 4), {"x": ww}),
        ("cyclic_shift", lambda: T.cyclic_shift(wx, -2, 3), {"x": wx}),
        ("pad_spatial+crop", lambda: T.pad_spatial(px, 1, 3)[:, 1:, :4, :], {"x": px}),
        ("elementwise+reductions", lambda: (a * a / (T.tabs(a) + 1.0) - a).mean(axis=0), {"A": a}),
        ("concat", lambda: T.concat([a, a * 2.0], axis=0), {"A": a}),
        ("reshape+transpose+sum", lambda: (a.reshape(5, 7).transpose(1, 0) * b.sum()), {"A": a, "B": b}),
    ]


def block_cases(rng: np.random.Generator) -> list[tuple[str, Callable[[], Tensor], dict[str, Tensor]]]:
    dim, heads, w = 8, 2, 4
    cases = []

    attn = randomize(Attention(dim, rng), rng)
    tok = _rand(rng, 2, w * w, dim)
    q_tok = _rand(rng, 2, w * w, dim)
    mask = AttentionMask.for_grid(w, 2 * w, w, w // 2)
    cfg = AttnConfig(dim, heads, w, w // 2)
    cases.append(("multi_head_attention (masked)",
                  lambda: multi_head_attention(tok, tok, q_tok, attn, cfg, mask),
                  _param_leaves(attn, {"kv_src": tok, "q_src": q_tok})))

    # two windows side by side
    for shift in (0, w // 2):
        blk = randomize(SelfAttentionBlock(AttnConfig(dim, heads, w, shift), rng), rng)
        feat = _rand(rng, 1, w, 2 * w, dim)
        cases.append((f"SAB shift={shift}", lambda blk=blk, feat=feat: blk(feat),
                      _param_leaves(blk, {"input": feat})))
        cab = randomize(CrossAttentionBlock(AttnConfig(dim, heads, w, shift), rng), rng)
        fa, fb = _rand(rng, 1, w, 2 * w, dim), _rand(rng, 1, w, 2 * w, dim)
        cases.append((f"CAB shift={shift}", lambda cab=cab, fa=fa, fb=fb: cab(fa, fb),
                      _param_leaves(cab, {"kv_stream": fa, "q_stream": fb})))

    emb = randomize(PatchEmbed(1, dim, 2, rng), rng)
    img = _rand(rng, 1, 16, 16, 1)
    cases.append(("patch_embed p=2", lambda: emb(img), _param_leaves(emb, {"img": img})))
    merge = randomize(PatchMerge(dim, rng), rng)
    fm = _rand(rng, 1, 4, 8, dim)
    cases.append(("patch_merge", lambda: merge(fm), _param_leaves(merge, {"input": fm})))

    head = randomize(RestorationHead(PanFormerConfig(C=dim, heads=heads), rng), rng)
    fh = _rand(rng, 1, 2, 3, 2 * dim)
    cases.append(("restoration head", lambda: head(fh), _param_leaves(head, {"input": fh})))

    for variant in FUSION_VARIANTS:
        model = PanFormerModel(PanFormerConfig(C=dim, heads=heads, cab_count=2, fusion_variant=variant), rng)
        randomize(model, rng)
        pan = Tensor(rng.random((1, 16, 16, 1)), dtype=np.float64)
        ms = Tensor(rng.random((1, 4, 4, 4)), dtype=np.float64)
        cases.append((f"forward PAN16/MS4 {variant}",
                      lambda model=model, pan=pan, ms=ms: model(pan, ms),
                      _param_leaves(model, {"pan": pan, "ms": ms})))
    return cases


def run_suite(seed: int = 0, samples: int = MIN_SAMPLES, report: Callable[[str], None] | None = None
              ) -> list[GradCheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    with T.oracle_mode():
        cases = op_cases(rng) + block_cases(rng)
    for name, fn, leaves in cases:
        res = check(name, fn, leaves, rng, samples)
        results.append(res)
        if report is not None:
            report(res.line())
    return results
