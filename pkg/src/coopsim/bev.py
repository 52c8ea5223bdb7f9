"""Bird's-eye-view projection onto a shared global pixel lattice.

Pixels are indexed on one world-wide integer lattice: a point at x meters
falls in pixel floor(x / meters_per_px). Every vehicle's image is a window
into that lattice, so two vehicles' windows relate by pure integer offsets.
Rows grow with global y, columns with global x.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Pose",
    "GridSpec",
    "PixelExtent",
    "BevImage",
    "HEIGHT_BINS",
    "global_extent",
    "cloud_to_global",
    "bin_points",
    "project_cloud",
    "make_bev",
    "write_pgm",
]

# z intervals (sensor-relative, meters) for the three density channels;
# the last bin is closed above
HEIGHT_BINS = ((-3.0, -1.0), (-1.0, 1.0), (1.0, 3.0))


@dataclass(frozen=True)
class Pose:
    """Planar pose plus sensor mount height."""

    x: float
    y: float
    heading: float  # radians CCW from +x
    altitude: float = 1.7


@dataclass(frozen=True)
class GridSpec:
    """Square BEV raster: resolution pixels spanning 2*half_range meters."""

    resolution_px: int = 416
    half_range_m: float = 40.0
    saturation: int = 16

    @property
    def meters_per_px(self) -> float:
        return 2.0 * self.half_range_m / self.resolution_px


@dataclass(frozen=True)
class PixelExtent:
    """Half-open lattice window [x0, x1) x [y0, y1)."""

    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0


@dataclass
class BevImage:
    """(height, width, 3) density raster over an extent window."""

    data: np.ndarray
    extent: PixelExtent


def global_extent(pose: Pose, spec: GridSpec) -> PixelExtent:
    """The vehicle's window: its pixel, centered, resolution wide."""
    mpp = spec.meters_per_px
    cx = math.floor(pose.x / mpp)
    cy = math.floor(pose.y / mpp)
    half = spec.resolution_px // 2
    return PixelExtent(
        cx - half, cy - half, cx - half + spec.resolution_px, cy - half + spec.resolution_px
    )


def cloud_to_global(cloud: np.ndarray, pose: Pose) -> np.ndarray:
    """Sensor-frame points (n, 3) to global x/y; z stays sensor-relative."""
    ca, sa = math.cos(pose.heading), math.sin(pose.heading)
    out = np.empty_like(cloud, dtype=np.float64)
    out[:, 0] = ca * cloud[:, 0] - sa * cloud[:, 1] + pose.x
    out[:, 1] = sa * cloud[:, 0] + ca * cloud[:, 1] + pose.y
    out[:, 2] = cloud[:, 2]
    return out


def bin_points(points: np.ndarray, extent: PixelExtent, spec: GridSpec) -> np.ndarray:
    """Count points per (row, col, height bin), saturate and normalize.

    points: (n, 3) global x/y with sensor-relative z. density =
    min(count, saturation) / saturation.
    """
    data = np.zeros((extent.height, extent.width, len(HEIGHT_BINS)))
    if len(points) == 0:
        return data
    mpp = spec.meters_per_px
    xpix = np.floor(points[:, 0] / mpp).astype(np.int64)
    ypix = np.floor(points[:, 1] / mpp).astype(np.int64)
    z = points[:, 2]
    chan = np.full(len(points), -1, dtype=np.int64)
    for i, (lo, hi) in enumerate(HEIGHT_BINS):
        if i == len(HEIGHT_BINS) - 1:
            mask = (z >= lo) & (z <= hi)
        else:
            mask = (z >= lo) & (z < hi)
        chan[mask] = i
    keep = (
        (chan >= 0)
        & (xpix >= extent.x0)
        & (xpix < extent.x1)
        & (ypix >= extent.y0)
        & (ypix < extent.y1)
    )
    counts = np.zeros_like(data)
    np.add.at(counts, (ypix[keep] - extent.y0, xpix[keep] - extent.x0, chan[keep]), 1.0)
    np.minimum(counts, spec.saturation, out=counts)
    return counts / spec.saturation


def project_cloud(
    cloud: np.ndarray, pose: Pose, extent: PixelExtent, spec: GridSpec
) -> BevImage:
    """Transform a sensor-frame cloud to global and bin it into `extent`."""
    return BevImage(bin_points(cloud_to_global(cloud, pose), extent, spec), extent)


def make_bev(cloud: np.ndarray, pose: Pose, spec: GridSpec) -> BevImage:
    """The vehicle's own view: its cloud binned into its own window."""
    return project_cloud(cloud, pose, global_extent(pose, spec), spec)


def write_pgm(channel: np.ndarray, path) -> None:
    """Binary PGM of one channel, values clipped to [0, 1]; row 0 printed
    last so north (greater y) is up in the file."""
    img = np.clip(channel, 0.0, 1.0)
    img8 = np.round(img * 255.0).astype(np.uint8)[::-1, :]
    header = f"P5\n{img8.shape[1]} {img8.shape[0]}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header + img8.tobytes())
