"""BEV projection: lattice indexing, height bins, saturation, heading."""

import math

import numpy as np
import pytest

from coopsim.bev import (
    GridSpec,
    PixelExtent,
    Pose,
    bin_points,
    cloud_to_global,
    global_extent,
    make_bev,
    write_pgm,
)

SPEC = GridSpec(resolution_px=416, half_range_m=40.0, saturation=16)


def test_default_scale():
    assert SPEC.meters_per_px == pytest.approx(80.0 / 416.0)


def test_extent_centered_on_vehicle_pixel():
    ext = global_extent(Pose(0.0, 0.0, 0.0), SPEC)
    assert (ext.x0, ext.y0, ext.x1, ext.y1) == (-208, -208, 208, 208)
    assert ext.width == ext.height == 416
    # a vehicle 10 m east shifts the window by 52 pixels
    ext2 = global_extent(Pose(10.0, 0.0, 0.0), SPEC)
    assert ext2.x0 == -208 + 52


def test_point_ten_meters_east_lands_at_col_260():
    cloud = np.array([[10.0, 0.0, 0.0]])
    bev = make_bev(cloud, Pose(0.0, 0.0, 0.0), SPEC)
    nz = np.argwhere(bev.data > 0)
    assert nz.tolist() == [[208, 260, 1]]
    assert bev.data[208, 260, 1] == pytest.approx(1.0 / 16.0)


def test_heading_rotates_cloud_before_binning():
    # same forward point, vehicle facing north: lands north of center
    cloud = np.array([[10.0, 0.0, 0.0]])
    bev = make_bev(cloud, Pose(0.0, 0.0, math.pi / 2), SPEC)
    nz = np.argwhere(bev.data > 0)
    assert nz.tolist() == [[260, 208, 1]]


def test_height_bin_boundaries():
    ext = PixelExtent(0, 0, 8, 8)
    spec = GridSpec(resolution_px=8, half_range_m=4.0, saturation=16)
    zs = [-3.5, -3.0, -1.0, 0.0, 1.0, 3.0, 3.0001]
    chans = [None, 0, 1, 1, 2, 2, None]
    for z, ch in zip(zs, chans):
        pts = np.array([[0.5, 0.5, z]])
        img = bin_points(pts, ext, spec)
        if ch is None:
            assert img.sum() == 0.0
        else:
            assert img[0, 0, ch] > 0.0
            assert img.sum() == img[0, 0, ch]


def test_saturation_caps_density():
    ext = PixelExtent(0, 0, 4, 4)
    spec = GridSpec(resolution_px=4, half_range_m=2.0, saturation=16)
    pts8 = np.tile([[0.1, 0.1, 0.0]], (8, 1))
    assert bin_points(pts8, ext, spec)[0, 0, 1] == pytest.approx(0.5)
    pts17 = np.tile([[0.1, 0.1, 0.0]], (17, 1))
    assert bin_points(pts17, ext, spec)[0, 0, 1] == pytest.approx(1.0)


def test_points_outside_window_dropped():
    ext = PixelExtent(0, 0, 4, 4)
    spec = GridSpec(resolution_px=4, half_range_m=2.0, saturation=16)
    pts = np.array([[-0.1, 0.5, 0.0], [4.5, 0.5, 0.0], [0.5, 0.5, 0.0]])
    img = bin_points(pts, ext, spec)
    assert img.sum() == pytest.approx(1.0 / 16.0)


def test_negative_coordinates_floor_correctly():
    # floor, not trunc: x = -0.1 m is pixel -1
    ext = PixelExtent(-2, -2, 2, 2)
    spec = GridSpec(resolution_px=4, half_range_m=2.0, saturation=16)
    img = bin_points(np.array([[-0.1, -0.1, 0.0]]), ext, spec)
    assert img[1, 1, 1] > 0  # pixel (-1, -1) -> row 1, col 1


def test_cloud_to_global_keeps_z():
    cloud = np.array([[1.0, 2.0, 0.7]])
    out = cloud_to_global(cloud, Pose(10.0, 20.0, math.pi / 2))
    np.testing.assert_allclose(out, [[10.0 - 2.0, 20.0 + 1.0, 0.7]], atol=1e-12)


def test_empty_cloud():
    bev = make_bev(np.zeros((0, 3)), Pose(0, 0, 0), SPEC)
    assert bev.data.shape == (416, 416, 3)
    assert bev.data.sum() == 0.0


def test_write_pgm(tmp_path):
    img = np.zeros((4, 6))
    img[0, 0] = 1.0
    path = tmp_path / "x.pgm"
    write_pgm(img, path)
    raw = path.read_bytes()
    assert raw.startswith(b"P5\n6 4\n255\n")
    body = raw.split(b"255\n", 1)[1]
    assert len(body) == 24
    assert body[18] == 255  # row 0 is printed last (north up)
