"""Full-reference quality metrics: PSNR, SSIM, ERGAS, SCC, plus residual maps."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate, correlate1d

from .data import DatasetManifest, ParameterError, RasterImage, read_pfr, round_half_away
from .tensor import DimensionError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
LAPLACIAN = np.array([[-1, -1, -1], [-1, 8, -1], [-1, -1, -1]], dtype=np.float64)
METRICS = ("psnr", "ssim", "ergas", "scc")


class UndefinedMetricError(ArithmeticError):
    """The metric has no finite value for these inputs."""


def _pair(pred: RasterImage, gt: RasterImage) -> tuple[np.ndarray, np.ndarray, float]:
    if pred.samples.shape != gt.samples.shape:
        raise DimensionError(f"prediction {pred.samples.shape} and reference {gt.samples.shape} differ")
    if pred.bit_depth != gt.bit_depth:
        raise DimensionError(f"bit depths differ: {pred.bit_depth} vs {gt.bit_depth}")
    return pred.samples.astype(np.float64), gt.samples.astype(np.float64), float(gt.max_value)


def psnr(pred: RasterImage, gt: RasterImage) -> float:
    x, y, peak = _pair(pred, gt)
    mse = np.mean((x - y) ** 2)
    if mse == 0:
        return math.inf
    return float(10 * np.log10(peak * peak / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-0.5 * (r / sigma) ** 2)
    return g / g.sum()


def _filter_valid(a: np.ndarray, taps: np.ndarray) -> np.ndarray:
    half = len(taps) // 2
    out = correlate1d(correlate1d(a, taps, axis=0, mode="constant"), taps, axis=1, mode="constant")
    return out[half:a.shape[0] - half, half:a.shape[1] - half]


def ssim(pred: RasterImage, gt: RasterImage) -> float:
    """Mean SSIM over valid window positions, then over bands."""
    x, y, peak = _pair(pred, gt)
    if x.shape[0] < SSIM_WINDOW or x.shape[1] < SSIM_WINDOW:
        raise ParameterError(f"SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {x.shape[:2]}")
    taps = gaussian_window()
    c1, c2 = (SSIM_K1 * peak) ** 2, (SSIM_K2 * peak) ** 2
    scores = []
    for b in range(x.shape[2]):
        xb, yb = x[:, :, b], y[:, :, b]
        mx, my = _filter_valid(xb, taps), _filter_valid(yb, taps)
        sxx = _filter_valid(xb * xb, taps) - mx * mx
        syy = _filter_valid(yb * yb, taps) - my * my
        sxy = _filter_valid(xb * yb, taps) - mx * my
        smap = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
        scores.append(smap.mean())
    return float(np.mean(scores))


def ergas(pred: RasterImage, gt: RasterImage, h_over_l: float = 0.25) -> float:
    x, y, _ = _pair(pred, gt)
    means = y.mean(axis=(0, 1))
    for b, mu in enumerate(means):
        if mu == 0:
            raise UndefinedMetricError(f"ERGAS undefined: reference band {b} has zero mean")
    rmse = np.sqrt(((x - y) ** 2).mean(axis=(0, 1)))
    return float(100 * h_over_l * np.sqrt(np.mean((rmse / means) ** 2)))


def scc(pred: RasterImage, gt: RasterImage, kernel: np.ndarray = LAPLACIAN) -> float:
    """Band-averaged Pearson correlation of high-pass filtered images.

    The filter is zero-padded, but only interior pixels (footprint fully
    inside the image) enter the correlation, so padding never fakes detail
    and the score is invariant under positive affine maps of either input.
    """
    x, y, _ = _pair(pred, gt)
    if x.shape[0] < 3 or x.shape[1] < 3:
        raise ParameterError(f"SCC needs at least 3x3 pixels, got {x.shape[:2]}")
    values = []
    for b in range(x.shape[2]):
        hx = correlate(x[:, :, b], kernel, mode="constant")[1:-1, 1:-1].ravel()
        hy = correlate(y[:, :, b], kernel, mode="constant")[1:-1, 1:-1].ravel()
        hx = hx - hx.mean()
        hy = hy - hy.mean()
        nx, ny = np.sqrt((hx * hx).sum()), np.sqrt((hy * hy).sum())
        if nx == 0 or ny == 0:
            raise UndefinedMetricError(f"SCC undefined: filtered band {b} has zero variance")
        values.append((hx * hy).sum() / (nx * ny))
    return float(np.mean(values))


def residual_image(pred: RasterImage, gt: RasterImage, gain: float = 1.0) -> RasterImage:
    x, y, peak = _pair(pred, gt)
    res = np.minimum(peak, gain * np.abs(x - y))
    return RasterImage(round_half_away(res).astype(np.uint16), gt.bit_depth)


# --------------------------------------------------------------------------
# reports


def _fmt(v) -> object:
    if v is None:
        return None
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


@dataclass
class MetricsReport:
    images: list[dict] = field(default_factory=list)
    undefined_cases: list[dict] = field(default_factory=list)
    scc_kernel: str = "laplacian8, zero padding, interior pixels"

    @property
    def count(self) -> int:
        return len(self.images)

    @property
    def means(self) -> dict:
        out = {}
        for m in METRICS:
            vals = [r[m] for r in self.images if r[m] is not None]
            finite = [v for v in vals if math.isfinite(v)]
            if finite:
                out[m] = float(np.mean(finite))
            elif vals:
                # every value was the distinguished infinity
                out[m] = vals[0]
            else:
                out[m] = None
        return out

    @property
    def excluded_infinite(self) -> int:
        return sum(1 for r in self.images if r["psnr"] is not None and math.isinf(r["psnr"]))

    def add(self, name: str, pred: RasterImage, gt: RasterImage) -> dict:
        record = {"name": name}
        for m, fn in (("psnr", psnr), ("ssim", ssim), ("ergas", ergas), ("scc", scc)):
            try:
                record[m] = fn(pred, gt)
            except UndefinedMetricError as exc:
                record[m] = None
                self.undefined_cases.append({"name": name, "metric": m, "reason": str(exc)})
        self.images.append(record)
        return record

    def to_dict(self) -> dict:
        return {
            "images": [{k: _fmt(v) if k != "name" else v for k, v in r.items()} for r in self.images],
            "means": {k: _fmt(v) for k, v in self.means.items()},
            "count": self.count,
            "psnr_infinite_excluded": self.excluded_infinite,
            "scc_kernel": self.scc_kernel,
            "undefined_cases": self.undefined_cases,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_table(self, title: str = "") -> str:
        return format_table([(r["name"], r) for r in self.images] + [("mean", self.means)],
                            title=title, footnote=self._footnote())

    def _footnote(self) -> str:
        n = self.excluded_infinite
        if n and n < self.count:
            return f"* {n} image(s) with infinite PSNR excluded from the PSNR mean"
        return ""


def format_table(rows: list[tuple[str, dict]], title: str = "", footnote: str = "") -> str:
    """Aligned text table with columns PSNR, SSIM, ERGAS, SCC."""
    name_w = max([len("name")] + [len(n) for n, _ in rows])
    head = f"{'name':<{name_w}}  {'PSNR':>9}  {'SSIM':>7}  {'ERGAS':>8}  {'SCC':>7}"
    lines = [title] if title else []
    lines += [head, "-" * len(head)]
    for name, r in rows:
        cells = []
        for m, width, prec in (("psnr", 9, 4), ("ssim", 7, 4), ("ergas", 8, 4), ("scc", 7, 4)):
            v = r.get(m)
            if v is None:
                cells.append(f"{'n/a':>{width}}")
            elif math.isinf(v):
                cells.append(f"{'inf':>{width}}")
            else:
                cells.append(f"{v:>{width}.{prec}f}")
        lines.append(f"{name:<{name_w}}  " + "  ".join(cells))
    if footnote:
        lines.append(footnote)
    return "\n".join(lines)


def prediction_path(pred_dir, entry: dict) -> Path:
    return Path(pred_dir) / Path(entry["gt"]).name


def evaluate(manifest: DatasetManifest, predictions_dir) -> MetricsReport:
    missing = [e["gt"] for e in manifest.entries if not prediction_path(predictions_dir, e).exists()]
    if missing:
        raise LookupError(f"missing predictions for {len(missing)} entries: {missing}")
    report = MetricsReport()
    for entry in manifest.entries:
        gt = read_pfr(manifest.resolve(entry["gt"]))
        pred = read_pfr(prediction_path(predictions_dir, entry))
        report.add(Path(entry["gt"]).stem, pred, gt)
    return report
