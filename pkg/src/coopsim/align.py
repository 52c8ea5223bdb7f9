"""Alignment of feature grids from different vehicles onto one canvas.

A convolutional encoder with total downsample factor D maps input pixels to
feature cells. If every vehicle pads its BEV window out to multiples of D
*on the global lattice* (congruence padding below), then each output cell
covers a global-lattice-aligned DxD block and grids from different vehicles
can be composited by integer cell offsets with no resampling. Without the
padding, placement falls back to nearest-cell rounding and the cell
contents themselves disagree (the conv phase differs), which is the whole
point of the comparison.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from coopsim.bev import BevImage, PixelExtent
from coopsim.nn.layers import Conv2D, Layer, MaxPool2

__all__ = [
    "Padding",
    "lattice_padding",
    "pad_bev",
    "FeatureGrid",
    "place_on_canvas",
    "crop_cells",
    "receptive_margin",
]


@dataclass(frozen=True)
class Padding:
    """Zero padding in pixels; top is the min-y side (row 0)."""

    left: int
    right: int
    top: int
    bottom: int


def lattice_padding(extent: PixelExtent, step: int) -> Padding:
    """Smallest padding that puts both extent corners on the step-lattice.

    Least non-negative residues: left = x0 mod step, right = -x1 mod step,
    and likewise for y. The padded window is then [x0-left, x1+right) with
    both ends divisible by step.
    """
    if step < 1:
        raise ValueError(f"step must be positive, got {step}")
    return Padding(
        left=extent.x0 % step,
        right=(-extent.x1) % step,
        top=extent.y0 % step,
        bottom=(-extent.y1) % step,
    )


def pad_bev(bev: BevImage, padding: Padding) -> BevImage:
    """Zero-pad an image and grow its extent to match."""
    p = padding
    data = np.pad(bev.data, ((p.top, p.bottom), (p.left, p.right), (0, 0)))
    e = bev.extent
    return BevImage(
        data, PixelExtent(e.x0 - p.left, e.y0 - p.top, e.x1 + p.right, e.y1 + p.bottom)
    )


@dataclass
class FeatureGrid:
    """Encoder output tied to the input window it came from.

    values: (rows, cols, channels); extent is in *input* pixels; each cell
    covers downsample x downsample input pixels. `channels` names the kept
    channel subset after channel selection (None = all).
    """

    values: np.ndarray
    extent: PixelExtent
    downsample: int
    source: int = 0
    channels: tuple[int, ...] | None = field(default=None)

    @property
    def cell_origin(self) -> tuple[float, float]:
        """(x, y) of the first cell in cell units; integral iff aligned."""
        return self.extent.x0 / self.downsample, self.extent.y0 / self.downsample


def place_on_canvas(
    grids: list[FeatureGrid],
) -> tuple[PixelExtent, list[tuple[int, int]]]:
    """Joint cell-unit canvas extent and per-grid (row, col) offsets.

    Aligned grids have integral cell origins and land exactly; unaligned
    ones are snapped to the nearest cell.
    """
    if not grids:
        raise ValueError("no grids to place")
    origins = []
    for g in grids:
        ox, oy = g.cell_origin
        origins.append((int(round(oy)), int(round(ox))))
    rows = [g.values.shape[0] for g in grids]
    cols = [g.values.shape[1] for g in grids]
    y0 = min(o[0] for o in origins)
    x0 = min(o[1] for o in origins)
    y1 = max(o[0] + r for o, r in zip(origins, rows))
    x1 = max(o[1] + c for o, c in zip(origins, cols))
    canvas = PixelExtent(x0, y0, x1, y1)
    offsets = [(oy - y0, ox - x0) for oy, ox in origins]
    return canvas, offsets


def crop_cells(
    values: np.ndarray, canvas: PixelExtent, target: PixelExtent
) -> np.ndarray:
    """Slice the target cell window out of a canvas-sized array."""
    r0 = target.y0 - canvas.y0
    c0 = target.x0 - canvas.x0
    if r0 < 0 or c0 < 0 or target.y1 > canvas.y1 or target.x1 > canvas.x1:
        raise ValueError(f"target {target} not contained in canvas {canvas}")
    return values[r0 : r0 + target.height, c0 : c0 + target.width]


def receptive_margin(layers: list[Layer]) -> int:
    """Input pixels of border influence: interior outputs further than this
    from any edge are unaffected by zero padding at the borders."""
    margin = 0
    scale = 1
    for layer in layers:
        if isinstance(layer, Conv2D):
            margin += (layer.kernel // 2) * scale
        elif isinstance(layer, MaxPool2):
            scale *= 2
    return margin
