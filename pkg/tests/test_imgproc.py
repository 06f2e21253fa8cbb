import colorsys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cropseg import imgproc
from oracles import bilinear_scalar

unit_floats = st.floats(0.0, 1.0, allow_nan=False, width=64)


def rgb_arrays(max_side=9):
    shapes = st.tuples(st.integers(1, max_side), st.integers(1, max_side), st.just(3))
    return arrays(np.float64, shapes, elements=unit_floats)


def test_channel_order_fixture():
    assert imgproc.CHANNEL_NAMES == (
        "R", "G", "B", "ExG", "ExR", "CIVE", "NDI", "HUE", "SAT", "VAL",
        "dx_ExG", "dy_ExG", "lap_ExG", "EDGES")
    assert imgproc.channel_count("all") == 14
    assert imgproc.channel_count("rgb") == 3


def test_resize_two_pixels_to_four():
    img = np.zeros((1, 2, 3))
    img[0, 1] = 1.0
    out = imgproc.resize_bilinear(img, 4, 1)
    assert np.allclose(out[0, :, 0], [0.0, 0.25, 0.75, 1.0])


@settings(max_examples=40, deadline=None)
@given(rgb_arrays(6), st.integers(1, 10), st.integers(1, 10))
def test_resize_matches_scalar_oracle(img, tw, th):
    fast = imgproc.resize_bilinear(img, tw, th)
    assert np.allclose(fast, bilinear_scalar(img, tw, th), atol=1e-12)


@given(unit_floats, unit_floats, unit_floats, st.integers(1, 12), st.integers(1, 12))
def test_resize_keeps_constant_images_exact(r, g, b, tw, th):
    img = np.broadcast_to(np.array([r, g, b]), (5, 7, 3))
    out = imgproc.resize_bilinear(img, tw, th)
    assert np.array_equal(out, np.broadcast_to(np.array([r, g, b]), out.shape))


def test_vegetation_indices_hand_values():
    img = np.array([[[0.2, 0.5, 0.1]]])
    exg, exr, cive, ndi = (v[0, 0] for v in imgproc.compute_vegetation_indices(img))
    assert exg == pytest.approx(0.7)
    assert exr == pytest.approx(1.4 * 0.2 - 0.5)
    assert cive == pytest.approx(0.881 * 0.5 - 0.441 * 0.2 - 0.385 * 0.1 - 18.78745)
    assert ndi == pytest.approx(0.3 / 0.7)


def test_ndi_is_zero_on_black_pixels():
    ndi = imgproc.compute_vegetation_indices(np.zeros((2, 2, 3)))[3]
    assert np.all(ndi == 0)


@settings(max_examples=60)
@given(unit_floats, unit_floats, unit_floats)
def test_hsv_agrees_with_colorsys(r, g, b):
    hue, sat, val = (v[0, 0] for v in imgproc.rgb_to_hsv(np.array([[[r, g, b]]])))
    h2, s2, v2 = colorsys.rgb_to_hsv(r, g, b)
    assert val == pytest.approx(v2, abs=1e-12)
    assert sat == pytest.approx(s2, abs=1e-12)
    if s2 > 1e-9:
        # hue is circular
        d = abs(hue - h2)
        assert min(d, 1 - d) < 1e-9
    assert 0.0 <= hue < 1.0


def test_pure_green_hue_is_one_third():
    hue = imgproc.rgb_to_hsv(np.array([[[0.0, 1.0, 0.0]]]))[0]
    assert hue[0, 0] == pytest.approx(1 / 3)


def test_sobel_on_horizontal_ramp():
    exg = np.tile(np.arange(6, dtype=float), (5, 1))
    dx, dy, lap, _ = imgproc.exg_texture_channels(exg)
    assert np.allclose(dx[:, 1:-1], 8.0)
    assert np.allclose(dy, 0.0)
    assert np.allclose(lap[1:-1, 1:-1], 0.0)


def test_texture_rejects_tiny_channels():
    with pytest.raises(ValueError):
        imgproc.exg_texture_channels(np.zeros((2, 5)))


def test_canny_finds_square_border_only():
    ch = np.zeros((32, 32))
    ch[8:24, 8:24] = 1.0
    edges = imgproc.canny_edges(ch)
    assert set(np.unique(edges)) <= {0.0, 1.0}
    assert edges[16, 16] == 0 and edges[2, 2] == 0
    assert edges[8:24, 6:11].any()


def test_canny_on_constant_channel_is_empty():
    assert not imgproc.canny_edges(np.full((10, 10), 0.3)).any()


def test_volume_shape_and_standardization(rng):
    img = rng.uniform(0, 1, (50, 70, 3))
    vol = imgproc.assemble_input_volume(img, (32, 16))
    assert vol.data.shape == (14, 16, 32)
    assert vol.data.dtype == np.float32
    assert vol.names == imgproc.CHANNEL_NAMES
    for k in range(14):
        if vol.std[k] > 0:
            assert abs(vol.data[k].mean()) < 1e-5
            assert vol.data[k].std() == pytest.approx(1.0, abs=1e-4)


def test_default_volume_is_network_sized(rng):
    vol = imgproc.assemble_input_volume(rng.uniform(0, 1, (20, 30, 3)))
    assert vol.data.shape == (14, 384, 512)


def test_gray_image_gives_zero_chroma_channels():
    vol = imgproc.assemble_input_volume(np.full((16, 16, 3), 0.5), (16, 16))
    assert np.all(np.isfinite(vol.data))
    assert np.all(vol.data == 0)
    assert np.all(vol.std == 0)


def test_rgb_volume_has_three_channels(rng):
    vol = imgproc.assemble_input_volume(rng.uniform(0, 1, (16, 16, 3)), (16, 16), "rgb")
    assert vol.data.shape == (3, 16, 16)
    assert vol.names == ("R", "G", "B")


@settings(max_examples=25, deadline=None)
@given(rgb_arrays(12))
def test_volume_always_finite(img):
    if min(img.shape[:2]) < 1:
        return
    vol = imgproc.assemble_input_volume(img, (16, 16))
    assert np.all(np.isfinite(vol.data))


@pytest.mark.parametrize("bad", [np.zeros((4, 4)), np.zeros((4, 4, 4)), np.full((3, 3, 3), 1.5),
                                 np.full((3, 3, 3), np.nan)])
def test_invalid_images_rejected(bad):
    with pytest.raises(ValueError):
        imgproc.assemble_input_volume(bad, (16, 16))


def test_unknown_channel_set_rejected():
    with pytest.raises(ValueError):
        imgproc.assemble_input_volume(np.zeros((8, 8, 3)), (16, 16), "nir")
