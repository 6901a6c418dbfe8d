import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import naive_dsift
from texfv import dsift
from texfv.dsift import DsiftParams
from texfv.errors import AllScalesSkipped, BadMagic, DegenerateOutput, RasterTooSmall


def test_default_params():
    p = DsiftParams()
    assert p.dim == 128
    assert len(p.scales) == 10
    assert p.scales[0] == pytest.approx(0.125)
    assert p.scales[-1] == pytest.approx(3.0)
    assert all(b > a for a, b in zip(p.scales, p.scales[1:]))


def test_params_reject_unsorted_scales():
    with pytest.raises(ValueError):
        DsiftParams(scales=(1.0, 0.5))


# --- resize ------------------------------------------------------------------


@pytest.mark.parametrize("factor", [0.3, 0.5, 1.0, 1.7, 3.0])
def test_resize_preserves_constant(factor):
    out = dsift.resize_bilinear(np.full((20, 30), 0.5), factor)
    np.testing.assert_allclose(out, 0.5, atol=1e-15)


def test_resize_identity(rng):
    r = rng.random((17, 23))
    out = dsift.resize_bilinear(r, 1.0)
    assert np.array_equal(out, r)


def test_resize_checkerboard_midpoint():
    board = np.array([[0.0, 1.0], [1.0, 0.0]])
    # hand evaluation: (1-.5)(1-.5)*0 + .5*.5*1 + .5*.5*1 + .5*.5*0 = 0.5
    assert dsift.bilinear_sample(board, 0.5, 0.5) == pytest.approx(0.5)
    up = dsift.resize_bilinear(board, 2.0)
    assert up.shape == (4, 4)
    # pixel (1, 1) maps to source (0.25, 0.25): .75*.25 + .25*.75 = 0.375
    assert up[1, 1] == pytest.approx(0.375)
    assert up[1:3, 1:3].mean() == pytest.approx(0.5)


def test_resize_degenerate():
    with pytest.raises(DegenerateOutput):
        dsift.resize_bilinear(np.zeros((8, 8)), 0.125, min_size=24)


# --- single scale --------------------------------------------------------------


def test_constant_raster_gives_zero_descriptors():
    dm = dsift.extract_dsift_single(np.full((40, 40), 0.3))
    assert dm.count == 25
    assert not dm.descriptors.any()


def test_raster_too_small():
    with pytest.raises(RasterTooSmall):
        dsift.extract_dsift_single(np.zeros((23, 100)))


def test_vertical_stripes_match_naive_reference():
    x = np.arange(32)
    raster = np.tile(((x // 3) % 2).astype(float), (32, 1))
    dm = dsift.extract_dsift_single(raster)
    ref = naive_dsift(raster)
    assert dm.descriptors.shape == ref.shape
    np.testing.assert_allclose(dm.descriptors, ref, atol=1e-5, rtol=0)


@settings(max_examples=5, deadline=None)
@given(
    st.integers(24, 40),
    st.integers(24, 40),
    st.integers(0, 2**32 - 1),
    st.sampled_from([(8, 4, 6, 4), (4, 2, 5, 3), (8, 3, 4, 7)]),
)
def test_matches_naive_reference_random(h, w, seed, cfg):
    n, nb, b, s = cfg
    raster = np.random.default_rng(seed).random((h, w))
    p = DsiftParams(num_orientations=n, spatial_bins=nb, bin_size_px=b, step_px=s, scales=(1.0,))
    if min(h, w) < p.support_px:
        return
    dm = dsift.extract_dsift_single(raster, p)
    ref = naive_dsift(raster, n, nb, b, s)
    np.testing.assert_allclose(dm.descriptors, ref, atol=1e-5, rtol=0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-5, 5))
def test_additive_intensity_invariance(seed, offset):
    raster = np.random.default_rng(seed).random((30, 34))
    a = dsift.extract_dsift_single(raster).descriptors
    b = dsift.extract_dsift_single(raster + offset).descriptors
    np.testing.assert_allclose(a, b, atol=1e-12, rtol=0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_descriptor_norms(seed):
    raster = np.random.default_rng(seed).random((36, 36)) ** 3
    dm = dsift.extract_dsift_single(raster)
    norms = np.linalg.norm(dm.descriptors, axis=1)
    assert np.all(norms <= 1 + 1e-6)
    assert np.all(dm.descriptors >= 0)
    nz = norms > 0
    np.testing.assert_allclose(norms[nz], 1.0, atol=1e-6)


def test_unit_norm_before_clamp(rng):
    raster = rng.random((30, 30))
    p = DsiftParams(clamp_threshold=1.0)
    norms = np.linalg.norm(dsift.extract_dsift_single(raster, p).descriptors, axis=1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-6)


def test_deterministic(rng):
    raster = rng.random((50, 60))
    a = dsift.extract_dsift_multiscale(raster)
    b = dsift.extract_dsift_multiscale(raster)
    assert a.descriptors.tobytes() == b.descriptors.tobytes()


# --- multi-scale ---------------------------------------------------------------


def test_singleton_pyramid_reduces_to_single(rng):
    raster = rng.random((40, 44))
    p = DsiftParams(scales=(1.0,))
    a = dsift.extract_dsift_multiscale(raster, p)
    b = dsift.extract_dsift_single(raster, p)
    assert np.array_equal(a.descriptors, b.descriptors)
    assert a.skipped_scales == ()


def test_multiscale_count_matches_grid_formula():
    raster = np.random.default_rng(7).random((640, 640))
    p = DsiftParams()
    dm = dsift.extract_dsift_multiscale(raster, p)
    expected = 0
    for s in p.scales:
        side = int(round(640 * s))
        g = (side - 24) // 4 + 1 if side >= 24 else 0
        expected += g * g
    assert dm.count == expected == dsift.expected_count((640, 640), p)
    # ascending scale order
    assert np.all(np.diff(dm.scale_of.astype(int)) >= 0)


def test_tiny_raster_skips_low_scales():
    dm = dsift.extract_dsift_multiscale(np.random.default_rng(0).random((8, 8)))
    p = DsiftParams()
    assert dm.skipped_scales == tuple(s for s in p.scales if round(8 * s) < 24)
    assert len(dm.skipped_scales) == 9
    assert dm.count == 1


def test_all_scales_skipped():
    with pytest.raises(AllScalesSkipped):
        dsift.extract_dsift_multiscale(np.zeros((4, 4)))


# --- serialization -------------------------------------------------------------


def test_dsf_round_trip(tmp_path, rng):
    dm = dsift.extract_dsift_multiscale(rng.random((64, 64)))
    path = tmp_path / "a.dsf"
    dsift.save_descriptors(dm, path)
    raw = path.read_bytes()
    assert raw[:4] == b"DSF1"
    assert len(raw) == 4 + 4 + 8 + dm.count * 128 * 4 + dm.count
    back = dsift.load_descriptors(path)
    np.testing.assert_array_equal(back.descriptors, dm.descriptors.astype(np.float32))
    np.testing.assert_array_equal(back.scale_of, dm.scale_of)


def test_dsf_bad_magic(tmp_path):
    p = tmp_path / "bad.dsf"
    p.write_bytes(b"XXXX" + bytes(12))
    with pytest.raises(BadMagic):
        dsift.load_descriptors(p)


def test_subsample_is_seeded_per_image():
    a = dsift.subsample_indices(1000, 100, 5, 3)
    b = dsift.subsample_indices(1000, 100, 5, 3)
    c = dsift.subsample_indices(1000, 100, 5, 4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert dsift.subsample_indices(50, 100, 5, 3) is None
