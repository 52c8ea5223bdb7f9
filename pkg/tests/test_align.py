"""Lattice padding congruences, canvas placement, shift equivariance."""

import numpy as np
import pytest

from coopsim.align import (
    FeatureGrid,
    Padding,
    crop_cells,
    lattice_padding,
    pad_bev,
    place_on_canvas,
    receptive_margin,
)
from coopsim.bev import BevImage, PixelExtent
from coopsim.nn import build_network, run_layers
from coopsim.rng import substream


def test_padding_congruence_worked_example():
    ext = PixelExtent(3, 5, 419, 421)
    pad = lattice_padding(ext, 8)
    assert pad == Padding(left=3, right=5, top=5, bottom=3)
    # padded corners land on the 8-lattice
    assert (ext.x0 - pad.left) % 8 == 0
    assert (ext.x1 + pad.right) % 8 == 0
    assert (ext.y0 - pad.top) % 8 == 0
    assert (ext.y1 + pad.bottom) % 8 == 0


def test_padding_zero_when_already_aligned():
    assert lattice_padding(PixelExtent(0, -16, 64, 48), 8) == Padding(0, 0, 0, 0)


def test_padding_negative_extents():
    # python % gives least non-negative residues for negative corners too
    rng = np.random.default_rng(0)
    for _ in range(200):
        k = int(rng.integers(1, 9))
        x0, y0 = rng.integers(-500, 500, size=2)
        w, h = rng.integers(1, 300, size=2)
        ext = PixelExtent(int(x0), int(y0), int(x0 + w), int(y0 + h))
        p = lattice_padding(ext, k)
        for v in (p.left, p.right, p.top, p.bottom):
            assert 0 <= v < k
        assert (ext.x0 - p.left) % k == 0 and (ext.x1 + p.right) % k == 0
        assert (ext.y0 - p.top) % k == 0 and (ext.y1 + p.bottom) % k == 0


def test_pad_bev_grows_extent_and_zero_fills():
    img = BevImage(np.ones((4, 4, 3)), PixelExtent(1, 2, 5, 6))
    out = pad_bev(img, Padding(left=1, right=3, top=2, bottom=0))
    assert out.extent == PixelExtent(0, 0, 8, 6)
    assert out.data.shape == (6, 8, 3)
    assert out.data.sum() == pytest.approx(48.0)  # original ones preserved
    assert out.data[0, 0, 0] == 0.0


def test_place_on_canvas_two_aligned_windows():
    a = FeatureGrid(np.zeros((52, 52, 4)), PixelExtent(0, 0, 208, 208), 4, source=0)
    b = FeatureGrid(np.zeros((52, 52, 4)), PixelExtent(104, 104, 312, 312), 4, source=1)
    canvas, offsets = place_on_canvas([a, b])
    assert canvas == PixelExtent(0, 0, 78, 78)
    assert offsets == [(0, 0), (26, 26)]


def test_place_on_canvas_rounds_unaligned_origin():
    g = FeatureGrid(np.zeros((4, 4, 1)), PixelExtent(3, -3, 19, 13), 4, source=0)
    canvas, offsets = place_on_canvas([g])
    # origins 3/4 and -3/4 snap to cells 1 and -1
    assert canvas == PixelExtent(1, -1, 5, 3)
    assert offsets == [(0, 0)]


def test_crop_cells_window():
    vals = np.arange(5 * 6).reshape(5, 6, 1).astype(float)
    canvas = PixelExtent(10, 20, 16, 25)
    out = crop_cells(vals, canvas, PixelExtent(12, 21, 14, 23))
    np.testing.assert_array_equal(out[:, :, 0], [[8, 9], [14, 15]])
    with pytest.raises(ValueError, match="not contained"):
        crop_cells(vals, canvas, PixelExtent(9, 20, 11, 22))


def _encoder():
    net = build_network(
        in_channels=3,
        encoder_widths=[6, 8],
        encoder_pools=2,
        head_widths=[8],
        out_channels=14,
        rng=substream(21, "align-test"),
    )
    return net


def test_receptive_margin():
    net = _encoder()
    # conv3 at scale 1 then conv3 at scale 2: 1 + 2 = 3 input pixels
    assert receptive_margin(net.encoder) == 3


def test_lattice_padding_makes_encoder_shift_equivariant():
    """Two windows into the same world image, offsets not multiples of the
    downsample: padded encodings agree on interior cells, unpadded do not."""
    net = _encoder()
    down = net.downsample
    rng = substream(22, "align-world")
    world = rng.uniform(0.0, 1.0, size=(96, 96, 3))

    def window(x0, y0, size=64):
        return BevImage(world[y0 : y0 + size, x0 : x0 + size].copy(),
                        PixelExtent(x0, y0, x0 + size, y0 + size))

    a, b = window(0, 0), window(5, 7)

    def encode(img, aligned):
        if aligned:
            img = pad_bev(img, lattice_padding(img.extent, down))
        feats, _ = run_layers(net.encoder, img.data, train=False)
        return FeatureGrid(feats, img.extent, down, source=0)

    def interior_diff(ga, gb, ea, eb):
        margin = receptive_margin(net.encoder)
        x0 = max(ea.x0, eb.x0) + margin
        y0 = max(ea.y0, eb.y0) + margin
        x1 = min(ea.x1, eb.x1) - margin
        y1 = min(ea.y1, eb.y1) - margin
        cells = PixelExtent(
            -(-x0 // down), -(-y0 // down), x1 // down, y1 // down
        )
        canvas_a, _ = place_on_canvas([ga])
        canvas_b, _ = place_on_canvas([gb])
        va = crop_cells(ga.values, canvas_a, cells)
        vb = crop_cells(gb.values, canvas_b, cells)
        return float(np.abs(va - vb).max())

    ga, gb = encode(a, True), encode(b, True)
    aligned_diff = interior_diff(ga, gb, a.extent, b.extent)
    assert aligned_diff < 1e-5

    ua, ub = encode(a, False), encode(b, False)
    unaligned_diff = interior_diff(ua, ub, a.extent, b.extent)
    assert unaligned_diff >= 10.0 * max(aligned_diff, 1e-7)
