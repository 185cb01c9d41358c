import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from panformer.data import (
    PROFILES,
    DatasetManifest,
    ParameterError,
    PatchPair,
    PFRMagicError,
    PFRRangeError,
    PFRTruncatedError,
    RasterImage,
    crop_patches,
    decimate,
    degrade_wald,
    denormalize,
    gaussian_blur,
    gaussian_taps,
    normalize,
    read_pfr,
    round_half_away,
    synthetic_pairs,
    synthetic_scene,
    tile_offsets,
    write_patches,
    write_pfr,
)


def raster(rng, h, w, b, depth=10):
    return RasterImage(rng.integers(0, 1 << depth, (h, w, b)).astype(np.uint16), depth)


def const(h, w, b, v, depth=10):
    return RasterImage(np.full((h, w, b), v, dtype=np.uint16), depth)


# -- RasterImage / PatchPair --------------------------------------------------


def test_raster_rejects_out_of_range_and_depth():
    with pytest.raises(ParameterError):
        RasterImage(np.full((2, 2, 1), 1024, dtype=np.uint16), 10)
    with pytest.raises(ParameterError):
        RasterImage(np.zeros((2, 2, 1), dtype=np.uint16), 12)


def test_patch_pair_ratio_law():
    with pytest.raises(ParameterError):
        PatchPair(const(8, 8, 1, 0), const(4, 4, 4, 0), const(8, 8, 4, 0))
    with pytest.raises(ParameterError):
        PatchPair(const(8, 8, 1, 0), const(2, 2, 4, 0), const(8, 8, 4, 0, depth=11))


def test_profiles():
    assert PROFILES["gaofen2"]["bit_depth"] == 10 and PROFILES["worldview3"]["bit_depth"] == 11


# -- PFR ----------------------------------------------------------------------


def test_pfr_single_pixel(tmp_path):
    img = RasterImage(np.array([[[512]]], dtype=np.uint16), 10)
    write_pfr(img, tmp_path / "a.pfr")
    raw = (tmp_path / "a.pfr").read_bytes()
    # magic(4) + u32 width + u32 height + u16 bands + u16 depth = 16 header bytes
    assert raw[:4] == b"PFR1" and len(raw) == 16 + 2
    assert raw[16:] == (512).to_bytes(2, "little")
    assert read_pfr(tmp_path / "a.pfr") == img


def test_pfr_random_roundtrip_bitwise(tmp_path):
    img = raster(np.random.default_rng(0), 3, 5, 4, depth=11)
    write_pfr(img, tmp_path / "r.pfr")
    back = read_pfr(tmp_path / "r.pfr")
    assert back == img and back.width == 5 and back.height == 3
    write_pfr(back, tmp_path / "r2.pfr")
    assert (tmp_path / "r.pfr").read_bytes() == (tmp_path / "r2.pfr").read_bytes()


def test_pfr_errors_are_distinct(tmp_path):
    img = raster(np.random.default_rng(1), 2, 2, 1)
    write_pfr(img, tmp_path / "ok.pfr")
    raw = (tmp_path / "ok.pfr").read_bytes()
    (tmp_path / "magic.pfr").write_bytes(b"PFRX" + raw[4:])
    (tmp_path / "short.pfr").write_bytes(raw[:-1])
    bad = bytearray(raw)
    bad[16:18] = (1024).to_bytes(2, "little")
    (tmp_path / "range.pfr").write_bytes(bytes(bad))
    with pytest.raises(PFRMagicError):
        read_pfr(tmp_path / "magic.pfr")
    with pytest.raises(PFRTruncatedError):
        read_pfr(tmp_path / "short.pfr")
    with pytest.raises(PFRRangeError):
        read_pfr(tmp_path / "range.pfr")


# -- normalize ----------------------------------------------------------------


def test_normalize_endpoints():
    img = RasterImage(np.array([[[1023, 0]]], dtype=np.uint16), 10)
    t = normalize(img)
    assert t.data.tolist() == [[[1.0, 0.0]]]
    assert denormalize(t, 10) == img


def test_normalize_roundtrip_all_values():
    values = np.arange(2048, dtype=np.uint16).reshape(32, 64, 1)
    img = RasterImage(values, 11)
    assert denormalize(normalize(img), 11) == img


def test_round_half_away():
    assert round_half_away(np.array([0.5, 1.5, 2.5, -0.5, 2.4999])).tolist() == [1, 2, 3, -1, 2]


def test_denormalize_clamps():
    out = denormalize(np.array([[[-0.2, 1.7]]]), 10)
    assert out.samples.tolist() == [[[0, 1023]]]


# -- blur / decimate ----------------------------------------------------------


def test_taps_normalized_radius():
    t = gaussian_taps(1.0)
    assert len(t) == 7 and math.isclose(t.sum(), 1.0, abs_tol=1e-15)
    assert len(gaussian_taps(1.2)) == 2 * 4 + 1


def test_blur_constant_unchanged():
    img = const(9, 7, 3, 777)
    assert gaussian_blur(img, 1.5) == img


def test_blur_impulse_reproduces_kernel():
    s = np.zeros((21, 21, 1), dtype=np.uint16)
    s[10, 10, 0] = 60000
    out = gaussian_blur(RasterImage(s, 16), 1.0).samples[:, :, 0].astype(float)
    taps = np.array([math.exp(-0.5 * x * x) for x in range(-3, 4)])
    taps /= taps.sum()
    np.testing.assert_allclose(out[10, 7:14], 60000 * taps * taps[3], atol=0.5)
    np.testing.assert_allclose(out[7:14, 10], 60000 * taps * taps[3], atol=0.5)


def test_blur_flux_preserved():
    rng = np.random.default_rng(2)
    s = np.zeros((24, 24, 2), dtype=np.uint16)
    s[6:18, 6:18] = rng.integers(0, 1024, (12, 12, 2))
    img = RasterImage(s, 10)
    out = gaussian_blur(img, 1.0)
    diff = abs(int(out.samples.astype(np.int64).sum()) - int(s.astype(np.int64).sum()))
    assert diff <= 24 * 24 * 2 * 0.5


def test_blur_stays_in_range_and_rejects_bad_sigma():
    img = raster(np.random.default_rng(3), 10, 10, 2)
    out = gaussian_blur(img, 2.0)
    assert out.samples.max() <= 1023
    with pytest.raises(ParameterError):
        gaussian_blur(img, 0.0)


def test_decimate_examples():
    img = RasterImage(np.arange(16, dtype=np.uint16).reshape(4, 4, 1), 10)
    assert decimate(img, 1) == img
    assert decimate(img, 4).samples.tolist() == [[[0]]]
    with pytest.raises(ParameterError):
        decimate(const(6, 4, 1, 0), 4)


def _mirror(i, n):
    while i < 0 or i >= n:
        i = -i if i < 0 else 2 * (n - 1) - i
    return i


def test_blur_decimate_ramp_scalar_pipeline():
    n, sigma = 16, 1.0
    ramp = np.array([[[(3 * y + 5 * x) * 4] for x in range(n)] for y in range(n)], dtype=np.uint16)
    got = decimate(gaussian_blur(RasterImage(ramp, 10), sigma), 4).samples[:, :, 0]
    r = math.ceil(3 * sigma)
    k = [math.exp(-0.5 * (d / sigma) ** 2) for d in range(-r, r + 1)]
    k = [v / sum(k) for v in k]
    tmp = [[sum(k[d + r] * float(ramp[_mirror(y + d, n), x, 0]) for d in range(-r, r + 1)) for x in range(n)]
           for y in range(n)]
    full = [[sum(k[d + r] * tmp[y][_mirror(x + d, n)] for d in range(-r, r + 1)) for x in range(n)]
            for y in range(n)]
    expected = [[min(1023, max(0, math.floor(full[y][x] + 0.5))) for x in range(0, n, 4)] for y in range(0, n, 4)]
    assert got.tolist() == expected


# -- degrade_wald -------------------------------------------------------------


def test_degrade_wald_shapes_and_gt_identity():
    rng = np.random.default_rng(4)
    pan, ms = raster(rng, 64, 48, 1), raster(rng, 16, 12, 4)
    lr_pan, lr_ms, gt = degrade_wald(pan, ms)
    assert lr_pan.samples.shape == (16, 12, 1) and lr_ms.samples.shape == (4, 3, 4)
    assert gt is ms or np.array_equal(gt.samples, ms.samples)


def test_degrade_wald_full_size_arithmetic():
    lr_pan, lr_ms, gt = degrade_wald(const(1024, 1024, 1, 3), const(256, 256, 4, 9))
    assert (lr_pan.height, lr_ms.height, gt.height) == (256, 64, 256)
    assert np.all(lr_pan.samples == 3) and np.all(lr_ms.samples == 9)


def test_degrade_wald_ratio_violation():
    with pytest.raises(ParameterError):
        degrade_wald(const(32, 32, 1, 0), const(16, 16, 4, 0))


# -- patches ------------------------------------------------------------------


def test_tile_offsets_snap():
    assert tile_offsets(400, 400, 400) == [0]
    assert tile_offsets(520, 100, 70) == [0, 70, 140, 210, 280, 350, 420]
    assert tile_offsets(10, 4, 4) == [0, 4, 6]


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 60), st.integers(1, 60), st.integers(1, 30))
def test_tile_offsets_cover(extent, size, stride):
    if size > extent:
        return
    starts = tile_offsets(extent, size, stride)
    assert starts == sorted(set(starts)) and starts[0] == 0 and starts[-1] + size == extent
    if stride > size:
        return  # tiles are deliberately sparse; coverage only holds for stride <= size
    covered = set()
    for s in starts:
        covered.update(range(s, s + size))
    assert covered == set(range(extent))


def test_crop_ordered_single_patch():
    scene = degrade_wald(const(64, 64, 1, 1), const(16, 16, 4, 2))
    assert len(crop_patches(*scene, 16, "ordered", stride=16)) == 1


def test_crop_tiling_49_patches():
    # MS grid 520 with MS patch 100 / stride 70 -> PAN patch 400, stride 280
    lr_pan, lr_ms, gt = const(2080, 2080, 1, 0), const(520, 520, 4, 0), const(2080, 2080, 4, 0)
    assert len(crop_patches(lr_pan, lr_ms, gt, 400, "ordered", stride=280)) == 49


def test_crop_alignment():
    rng = np.random.default_rng(5)
    lr_pan, lr_ms, gt = raster(rng, 32, 32, 1), raster(rng, 8, 8, 4), raster(rng, 32, 32, 4)
    for p in crop_patches(lr_pan, lr_ms, gt, 16, "random", count=5, seed=3):
        # random samples make the MS crop origin unique
        y, x = next((y, x) for y in range(5) for x in range(5)
                    if np.array_equal(lr_ms.samples[y:y + 4, x:x + 4], p.lrms.samples))
        assert np.array_equal(p.pan.samples, lr_pan.samples[4 * y:4 * y + 16, 4 * x:4 * x + 16])
        assert np.array_equal(p.gt.samples, gt.samples[4 * y:4 * y + 16, 4 * x:4 * x + 16])


def test_crop_random_reproducible():
    rng = np.random.default_rng(6)
    scene = raster(rng, 32, 32, 1), raster(rng, 8, 8, 4), raster(rng, 32, 32, 4)
    a = crop_patches(*scene, 8, "random", count=6, seed=11)
    b = crop_patches(*scene, 8, "random", count=6, seed=11)
    assert all(x.gt == y.gt and x.pan == y.pan and x.lrms == y.lrms for x, y in zip(a, b))


def test_crop_errors():
    scene = const(16, 16, 1, 0), const(4, 4, 4, 0), const(16, 16, 4, 0)
    with pytest.raises(ParameterError):
        crop_patches(*scene, 20)
    with pytest.raises(ParameterError):
        crop_patches(*scene, 6)
    with pytest.raises(ParameterError):
        crop_patches(*scene, 8, "ordered", stride=6)


# -- manifests ----------------------------------------------------------------


def test_manifest_roundtrip(tmp_path):
    pairs = synthetic_pairs(2, pan_size=16)
    m = write_patches(pairs, tmp_path, DatasetManifest("train", "synthetic", 10, 4), prefix="t")
    back = DatasetManifest.load(tmp_path / "manifest.json")
    assert back.to_dict() == m.to_dict() and len(back) == 2
    pair = back.load_pair(1)
    assert pair.gt == pairs[1].gt and pair.lrms == pairs[1].lrms


def test_manifest_rejects_unknown_keys(tmp_path):
    (tmp_path / "m.json").write_text(json.dumps({"version": 1, "split": "train", "satellite": "x", "bit_depth": 10,
                                                 "bands": 4, "entries": [], "extra": 1}))
    with pytest.raises(ParameterError, match="extra"):
        DatasetManifest.load(tmp_path / "m.json")
    with pytest.raises(ParameterError):
        DatasetManifest("val", "x", 10, 4)


def test_disjoint_regions_share_no_patch():
    pan, ms = synthetic_scene(32, seed=7)
    scene = degrade_wald(pan, ms)
    left = [RasterImage(r.samples[:, : r.width // 2].copy(), r.bit_depth) for r in scene]
    right = [RasterImage(r.samples[:, r.width // 2:].copy(), r.bit_depth) for r in scene]
    train = crop_patches(*left, 16, "random", count=20, seed=1)
    test = crop_patches(*right, 16, "ordered")
    assert not any(a.gt == b.gt for a in train for b in test)


# -- synthetic scenes ---------------------------------------------------------


def test_synthetic_scene_deterministic_and_correlated():
    pan, ms = synthetic_scene(16, bands=4, bit_depth=11, seed=3)
    pan2, ms2 = synthetic_scene(16, bands=4, bit_depth=11, seed=3)
    assert pan == pan2 and ms == ms2
    assert pan.samples.shape == (64, 64, 1) and ms.samples.shape == (16, 16, 4) and ms.bit_depth == 11
    corr = np.corrcoef(ms.samples.reshape(-1, 4).T.astype(float))
    assert corr.min() > 0.8
