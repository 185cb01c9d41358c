"""Raster containers, PFR file I/O, reduced-resolution degradation and patch cropping."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

from .tensor import Tensor

PFR_MAGIC = b"PFR1"
_HEADER = struct.Struct("<4sIIHH")
SUPPORTED_DEPTHS = (10, 11, 16)
RATIO = 4
MANIFEST_VERSION = 1

PROFILES = {
    "gaofen2": {"bit_depth": 10, "bands": 4},
    "worldview3": {"bit_depth": 11, "bands": 4},
}


class ParameterError(ValueError):
    """Invalid argument to a data operation."""


class PFRError(ValueError):
    """Base class for PFR parse failures."""


class PFRMagicError(PFRError):
    pass


class PFRTruncatedError(PFRError):
    pass


class PFRRangeError(PFRError):
    pass


@dataclass
class RasterImage:
    """Unsigned integer raster, samples shaped (height, width, bands)."""

    samples: np.ndarray
    bit_depth: int

    def __post_init__(self):
        s = np.asarray(self.samples)
        if s.ndim == 2:
            s = s[:, :, None]
        if s.ndim != 3:
            raise ParameterError(f"raster samples must be (H, W, B), got shape {s.shape}")
        if self.bit_depth not in SUPPORTED_DEPTHS:
            raise ParameterError(f"bit depth must be one of {SUPPORTED_DEPTHS}, got {self.bit_depth}")
        if s.size and (s.min() < 0 or s.max() > self.max_value):
            raise ParameterError(f"samples outside [0, {self.max_value}] for bit depth {self.bit_depth}")
        self.samples = s.astype(np.uint16, copy=False)

    @property
    def height(self) -> int:
        return self.samples.shape[0]

    @property
    def width(self) -> int:
        return self.samples.shape[1]

    @property
    def bands(self) -> int:
        return self.samples.shape[2]

    @property
    def max_value(self) -> int:
        return (1 << self.bit_depth) - 1

    def __eq__(self, other) -> bool:
        return (isinstance(other, RasterImage) and self.bit_depth == other.bit_depth
                and self.samples.shape == other.samples.shape
                and bool(np.array_equal(self.samples, other.samples)))

    def crop(self, y: int, x: int, size: int) -> "RasterImage":
        return RasterImage(self.samples[y:y + size, x:x + size].copy(), self.bit_depth)


@dataclass
class PatchPair:
    pan: RasterImage
    lrms: RasterImage
    gt: RasterImage

    def __post_init__(self):
        if not (self.pan.bit_depth == self.lrms.bit_depth == self.gt.bit_depth):
            raise ParameterError("patch rasters must share one bit depth")
        if self.pan.bands != 1:
            raise ParameterError(f"PAN patch must have one band, got {self.pan.bands}")
        if self.gt.bands != self.lrms.bands:
            raise ParameterError("GT and LR MS band counts differ")
        s = self.pan.height
        if (self.pan.width != s or self.gt.height != s or self.gt.width != s
                or self.lrms.height * RATIO != s or self.lrms.width * RATIO != s):
            raise ParameterError(
                f"patch shapes violate the {RATIO}:1 law: pan {self.pan.samples.shape}, "
                f"lrms {self.lrms.samples.shape}, gt {self.gt.samples.shape}")


# --------------------------------------------------------------------------
# PFR container


def write_pfr(img: RasterImage, path) -> None:
    header = _HEADER.pack(PFR_MAGIC, img.width, img.height, img.bands, img.bit_depth)
    Path(path).write_bytes(header + img.samples.astype("<u2").tobytes())


def read_pfr(path) -> RasterImage:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != PFR_MAGIC:
        raise PFRMagicError(f"{path}: bad magic {raw[:4]!r}, expected {PFR_MAGIC!r}")
    if len(raw) < _HEADER.size:
        raise PFRTruncatedError(f"{path}: header truncated ({len(raw)} bytes)")
    _, width, height, bands, depth = _HEADER.unpack_from(raw)
    count = width * height * bands
    payload = raw[_HEADER.size:]
    if len(payload) != 2 * count:
        raise PFRTruncatedError(f"{path}: expected {2 * count} payload bytes, found {len(payload)}")
    if depth not in SUPPORTED_DEPTHS:
        raise PFRRangeError(f"{path}: unsupported bit depth {depth}")
    samples = np.frombuffer(payload, dtype="<u2").reshape(height, width, bands)
    if count and samples.max() >= (1 << depth):
        raise PFRRangeError(f"{path}: sample {int(samples.max())} does not fit in {depth} bits")
    return RasterImage(samples.astype(np.uint16), depth)


# --------------------------------------------------------------------------
# conversions


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _quantize(values: np.ndarray, bit_depth: int) -> np.ndarray:
    top = (1 << bit_depth) - 1
    return np.clip(round_half_away(values), 0, top).astype(np.uint16)


def normalize(img: RasterImage) -> Tensor:
    """Scale samples into [0, 1]; result shaped [H, W, B]."""
    return Tensor(img.samples.astype(np.float64) / img.max_value)


def denormalize(t: Tensor | np.ndarray, bit_depth: int) -> RasterImage:
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    top = (1 << bit_depth) - 1
    return RasterImage(_quantize(data.astype(np.float64) * top, bit_depth), bit_depth)


# --------------------------------------------------------------------------
# Wald-protocol degradation


def gaussian_taps(sigma: float) -> np.ndarray:
    radius = math.ceil(3 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    taps = np.exp(-0.5 * (x / sigma) ** 2)
    return taps / taps.sum()


def gaussian_blur(img: RasterImage, sigma: float) -> RasterImage:
    """Separable Gaussian with mirror (edge-not-repeated) borders, per band."""
    if not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    taps = gaussian_taps(sigma)
    data = img.samples.astype(np.float64)
    data = correlate1d(data, taps, axis=0, mode="mirror")
    data = correlate1d(data, taps, axis=1, mode="mirror")
    return RasterImage(_quantize(data, img.bit_depth), img.bit_depth)


def decimate(img: RasterImage, factor: int, offset: int = 0) -> RasterImage:
    if factor < 1 or img.height % factor or img.width % factor:
        raise ParameterError(f"factor {factor} does not divide {img.height}x{img.width}")
    if not 0 <= offset < factor:
        raise ParameterError(f"offset {offset} outside [0, {factor})")
    return RasterImage(img.samples[offset::factor, offset::factor].copy(), img.bit_depth)


def degrade_wald(pan: RasterImage, ms: RasterImage, sigma: float = 1.0
                 ) -> tuple[RasterImage, RasterImage, RasterImage]:
    """Blur and decimate both inputs by 4; the untouched MS becomes the target."""
    if pan.height != RATIO * ms.height or pan.width != RATIO * ms.width:
        raise ParameterError(
            f"PAN {pan.height}x{pan.width} must be {RATIO}x MS {ms.height}x{ms.width}")
    if pan.bands != 1:
        raise ParameterError(f"PAN must have one band, got {pan.bands}")
    lr_pan = decimate(gaussian_blur(pan, sigma), RATIO)
    lr_ms = decimate(gaussian_blur(ms, sigma), RATIO)
    return lr_pan, lr_ms, ms


# --------------------------------------------------------------------------
# patches


def tile_offsets(extent: int, size: int, stride: int) -> list[int]:
    """Ordered tile starts; a last tile is snapped to the edge if the stride misses it."""
    if size > extent:
        raise ParameterError(f"patch size {size} exceeds extent {extent}")
    if stride < 1:
        raise ParameterError(f"stride must be positive, got {stride}")
    starts = list(range(0, extent - size + 1, stride))
    if starts[-1] != extent - size:
        starts.append(extent - size)
    return starts


def crop_patches(lr_pan: RasterImage, lr_ms: RasterImage, gt: RasterImage, size: int,
                 mode: str = "ordered", *, stride: int | None = None, count: int = 1,
                 seed: int = 0) -> list[PatchPair]:
    """Aligned crops: ``size`` on the PAN/GT grid, ``size // 4`` on the LR MS grid.

    ``stride`` is in PAN-grid pixels and must be a multiple of 4.  Random
    mode draws offsets on the LR MS grid from ``seed``.
    """
    if size < RATIO or size % RATIO:
        raise ParameterError(f"patch size must be a positive multiple of {RATIO}, got {size}")
    if (lr_pan.height, lr_pan.width) != (gt.height, gt.width) or \
            lr_pan.height != RATIO * lr_ms.height or lr_pan.width != RATIO * lr_ms.width:
        raise ParameterError("lr_pan, lr_ms and gt violate the 4:1:4 ratio law")
    if size > lr_pan.height or size > lr_pan.width:
        raise ParameterError(f"patch size {size} exceeds raster {lr_pan.height}x{lr_pan.width}")
    small = size // RATIO
    if mode == "ordered":
        stride = size if stride is None else stride
        if stride % RATIO:
            raise ParameterError(f"stride must be a multiple of {RATIO}, got {stride}")
        ys = tile_offsets(lr_ms.height, small, stride // RATIO)
        xs = tile_offsets(lr_ms.width, small, stride // RATIO)
        origins = [(y, x) for y in ys for x in xs]
    elif mode == "random":
        if count < 1:
            raise ParameterError(f"count must be positive, got {count}")
        rng = np.random.default_rng(seed)
        ys = rng.integers(0, lr_ms.height - small + 1, size=count)
        xs = rng.integers(0, lr_ms.width - small + 1, size=count)
        origins = list(zip(ys.tolist(), xs.tolist()))
    else:
        raise ParameterError(f"mode must be 'ordered' or 'random', got {mode!r}")
    return [PatchPair(lr_pan.crop(RATIO * y, RATIO * x, size), lr_ms.crop(y, x, small),
                      gt.crop(RATIO * y, RATIO * x, size))
            for y, x in origins]


# --------------------------------------------------------------------------
# manifests


@dataclass
class DatasetManifest:
    split: str
    satellite: str
    bit_depth: int
    bands: int
    sigma: float = 1.0
    decimate_offset: int = 0
    entries: list[dict] = field(default_factory=list)
    root: Path | None = None
    version: int = MANIFEST_VERSION

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise ParameterError(f"split must be 'train' or 'test', got {self.split!r}")

    def to_dict(self) -> dict:
        return {"version": self.version, "split": self.split, "satellite": self.satellite,
                "bit_depth": self.bit_depth, "bands": self.bands, "sigma": self.sigma,
                "decimate_offset": self.decimate_offset, "entries": self.entries}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        data = json.loads(path.read_text())
        known = {"version", "split", "satellite", "bit_depth", "bands", "sigma", "decimate_offset", "entries"}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ParameterError(f"unknown manifest keys: {unknown}")
        if data.get("version") != MANIFEST_VERSION:
            raise ParameterError(f"unsupported manifest version {data.get('version')}")
        for entry in data["entries"]:
            if set(entry) != {"pan", "lrms", "gt"}:
                raise ParameterError(f"manifest entry must have pan/lrms/gt, got {sorted(entry)}")
        return cls(root=path.parent, **data)

    def resolve(self, rel: str) -> Path:
        return (self.root or Path(".")) / rel

    def load_pair(self, index: int) -> PatchPair:
        e = self.entries[index]
        return PatchPair(read_pfr(self.resolve(e["pan"])), read_pfr(self.resolve(e["lrms"])),
                         read_pfr(self.resolve(e["gt"])))

    def __len__(self) -> int:
        return len(self.entries)


def write_patches(pairs: list[PatchPair], out_dir, manifest: DatasetManifest, prefix: str = "patch") -> DatasetManifest:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    width = max(4, len(str(len(pairs))))
    for i, pair in enumerate(pairs):
        names = {}
        for kind in ("pan", "lrms", "gt"):
            rel = f"{prefix}_{i:0{width}d}_{kind}.pfr"
            write_pfr(getattr(pair, kind), out / rel)
            names[kind] = rel
        entries.append(names)
    manifest.entries = entries
    manifest.root = out
    manifest.save(out / "manifest.json")
    return manifest


# --------------------------------------------------------------------------
# synthetic scenes


def synthetic_scene(ms_size: int, bands: int = 4, bit_depth: int = 10, seed: int = 0,
                    blobs: int = 12) -> tuple[RasterImage, RasterImage]:
    """Band-correlated Gaussian blobs plus sharp-edged rectangles.

    Returns (pan, ms) with pan at 4x the MS resolution.  The MS image is the
    area average of a high-resolution scene, the PAN a band mean of it.
    """
    rng = np.random.default_rng(seed)
    size = RATIO * ms_size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    base = np.full((size, size), 0.3)
    for _ in range(blobs):
        cy, cx = rng.random(2)
        s = rng.uniform(0.03, 0.2)
        base += rng.uniform(-0.25, 0.4) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    for _ in range(max(1, blobs // 3)):
        y0, x0 = rng.integers(0, size, 2)
        h, w = rng.integers(size // 16 + 1, size // 4 + 2, 2)
        base[y0:y0 + h, x0:x0 + w] += rng.uniform(-0.2, 0.3)
    gains = rng.uniform(0.7, 1.2, bands)
    offsets = rng.uniform(-0.05, 0.1, bands)
    texture = rng.normal(0, 0.01, (size, size, bands))
    hr = np.clip(base[:, :, None] * gains + offsets + texture, 0.02, 0.98)
    top = (1 << bit_depth) - 1
    ms = hr.reshape(ms_size, RATIO, ms_size, RATIO, bands).mean(axis=(1, 3))
    pan = hr.mean(axis=2, keepdims=True)
    return (RasterImage(_quantize(pan * top, bit_depth), bit_depth),
            RasterImage(_quantize(ms * top, bit_depth), bit_depth))


def synthetic_pairs(count: int, pan_size: int = 64, bands: int = 4, bit_depth: int = 10,
                    seed: int = 0) -> list[PatchPair]:
    """Ready-made training triples from synthetic scenes run through degrade_wald."""
    pairs = []
    for i in range(count):
        pan, ms = synthetic_scene(pan_size, bands, bit_depth, seed=seed * 100_003 + i)
        lr_pan, lr_ms, gt = degrade_wald(pan, ms)
        pairs.append(PatchPair(lr_pan, lr_ms, gt))
    return pairs
