"""Aggregation of placed feature grids into one canvas tensor.

Three operators over the vehicles covering each cell: elementwise sum,
per-channel max, and whole-vector selection by largest l2 norm. Cells no
grid covers stay zero; covered cells see only the grids actually present.
All selections break ties toward the lowest source id, and each operator
has an exact backward that routes gradients to the inputs that produced
the output (needed for cooperative training).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from coopsim.align import FeatureGrid, place_on_canvas
from coopsim.bev import PixelExtent

__all__ = [
    "AGGREGATION_MODES",
    "AggregateCache",
    "aggregate",
    "aggregate_backward",
    "select_channels",
    "expand_channels",
]

AGGREGATION_MODES = ("sum", "maxout", "maxnorm")


@dataclass
class AggregateCache:
    mode: str
    canvas: PixelExtent
    offsets: list[tuple[int, int]]
    shapes: list[tuple[int, int]]
    winner: np.ndarray | None  # per-cell input index; (h,w,c) maxout, (h,w) maxnorm
    order: list[int]  # position in sorted processing -> caller's input index


def aggregate(
    grids: list[FeatureGrid],
    mode: str,
    canvas: PixelExtent | None = None,
    offsets: list[tuple[int, int]] | None = None,
):
    """Composite grids onto their joint canvas; returns (grid, cache).

    Inputs are processed in ascending source-id order so every tie lands on
    the lowest id. All grids must share downsample and channel count (expand
    reduced grids first).
    """
    if mode not in AGGREGATION_MODES:
        raise ValueError(f"unknown aggregation mode {mode!r}")
    if not grids:
        raise ValueError("nothing to aggregate")
    order = sorted(range(len(grids)), key=lambda i: (grids[i].source, i))
    grids = [grids[i] for i in order]
    down = grids[0].downsample
    nchan = grids[0].values.shape[2]
    for g in grids:
        if g.downsample != down:
            raise ValueError("mixed downsample factors")
        if g.values.shape[2] != nchan:
            raise ValueError("mixed channel counts; expand reduced grids first")
    if canvas is None or offsets is None:
        canvas, offsets = place_on_canvas(grids)
    else:
        offsets = [offsets[i] for i in order]
    h, w = canvas.height, canvas.width
    out = np.zeros((h, w, nchan))
    winner = None
    if mode == "sum":
        for g, (r0, c0) in zip(grids, offsets):
            gh, gw, _ = g.values.shape
            out[r0 : r0 + gh, c0 : c0 + gw] += g.values
    elif mode == "maxout":
        winner = np.full((h, w, nchan), -1, dtype=np.int16)
        for i, (g, (r0, c0)) in enumerate(zip(grids, offsets)):
            gh, gw, _ = g.values.shape
            region = (slice(r0, r0 + gh), slice(c0, c0 + gw))
            take = (winner[region] < 0) | (g.values > out[region])
            out[region] = np.where(take, g.values, out[region])
            winner[region] = np.where(take, np.int16(i), winner[region])
    else:  # maxnorm: whole feature vector from the largest-l2 contributor
        winner = np.full((h, w), -1, dtype=np.int16)
        best = np.zeros((h, w))
        for i, (g, (r0, c0)) in enumerate(zip(grids, offsets)):
            gh, gw, _ = g.values.shape
            region = (slice(r0, r0 + gh), slice(c0, c0 + gw))
            norm_sq = (g.values * g.values).sum(axis=2)
            take = (winner[region] < 0) | (norm_sq > best[region])
            out[region] = np.where(take[:, :, None], g.values, out[region])
            best[region] = np.where(take, norm_sq, best[region])
            winner[region] = np.where(take, np.int16(i), winner[region])
    grid = FeatureGrid(
        values=out,
        extent=PixelExtent(
            canvas.x0 * down, canvas.y0 * down, canvas.x1 * down, canvas.y1 * down
        ),
        downsample=down,
        source=grids[0].source,
    )
    cache = AggregateCache(
        mode=mode,
        canvas=canvas,
        offsets=list(offsets),
        shapes=[g.values.shape[:2] for g in grids],
        winner=winner,
        order=order,
    )
    return grid, cache


def aggregate_backward(cache: AggregateCache, dout: np.ndarray) -> list[np.ndarray]:
    """Per-input-grid gradients, in the order grids were passed in."""
    grads_sorted: list[np.ndarray] = []
    for i, ((r0, c0), (gh, gw)) in enumerate(zip(cache.offsets, cache.shapes)):
        region = dout[r0 : r0 + gh, c0 : c0 + gw]
        if cache.mode == "sum":
            g = region.copy()
        elif cache.mode == "maxout":
            sel = cache.winner[r0 : r0 + gh, c0 : c0 + gw] == i
            g = np.where(sel, region, 0.0)
        else:
            sel = cache.winner[r0 : r0 + gh, c0 : c0 + gw] == i
            g = np.where(sel[:, :, None], region, 0.0)
        grads_sorted.append(g)
    grads: list[np.ndarray] = [np.empty(0)] * len(grads_sorted)
    for pos, orig in enumerate(cache.order):
        grads[orig] = grads_sorted[pos]
    return grads


def select_channels(grid: FeatureGrid, keep) -> FeatureGrid:
    """Reduced copy carrying only the kept channel indices (sorted)."""
    keep = tuple(sorted(int(k) for k in keep))
    nchan = grid.values.shape[2]
    if not keep:
        raise ValueError("must keep at least one channel")
    if keep[0] < 0 or keep[-1] >= nchan or len(set(keep)) != len(keep):
        raise ValueError(f"bad channel subset {keep} for {nchan} channels")
    return FeatureGrid(
        values=grid.values[:, :, list(keep)].copy(),
        extent=grid.extent,
        downsample=grid.downsample,
        source=grid.source,
        channels=keep,
    )


def expand_channels(grid: FeatureGrid, total: int) -> FeatureGrid:
    """Zero-fill a reduced grid back to the full channel count."""
    if grid.channels is None:
        if grid.values.shape[2] != total:
            raise ValueError("grid has no channel subset and wrong width")
        return grid
    values = np.zeros(grid.values.shape[:2] + (total,))
    values[:, :, list(grid.channels)] = grid.values
    return FeatureGrid(
        values=values,
        extent=grid.extent,
        downsample=grid.downsample,
        source=grid.source,
        channels=None,
    )
