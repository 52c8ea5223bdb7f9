"""Single-shot oriented-box detection head.

The head emits, per feature cell and anchor, seven values
[dx, dy, dw, dl, yaw, objectness logit, class logit]. Cell-relative center
offsets go through a sigmoid; size offsets add onto the anchor dims in
meters; yaw adds onto the anchor's orientation prior. Confidence is
objectness times the probability of the predicted class.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from coopsim.bev import PixelExtent
from coopsim.geometry import Box, box_iou, wrap_angle

__all__ = [
    "CLASS_NAMES",
    "VEHICLE",
    "PEDESTRIAN",
    "VALUES_PER_ANCHOR",
    "MIN_DIM_M",
    "Anchor",
    "Detection",
    "LossWeights",
    "default_anchors",
    "sigmoid",
    "decode",
    "encode_boxes",
    "loss",
    "nms",
    "format_detections",
    "parse_detections",
]

log = logging.getLogger(__name__)

CLASS_NAMES = ("vehicle", "pedestrian")
VEHICLE, PEDESTRIAN = 0, 1
VALUES_PER_ANCHOR = 7
MIN_DIM_M = 0.1  # decoded sizes clamp here to stay positive


@dataclass(frozen=True)
class Anchor:
    width: float
    length: float
    yaw: float


def default_anchors() -> tuple[Anchor, ...]:
    """Two vehicle-sized and two pedestrian-sized anchors, axis priors 0 and 90 deg."""
    return (
        Anchor(2.0, 4.5, 0.0),
        Anchor(2.0, 4.5, math.pi / 2),
        Anchor(0.6, 0.6, 0.0),
        Anchor(0.6, 0.6, math.pi / 2),
    )


@dataclass
class Detection:
    box: Box
    cls: int
    conf: float
    source: int = 0
    class_prob: float = 1.0


@dataclass(frozen=True)
class LossWeights:
    loc: float = 1.0
    shape: float = 1.0
    yaw: float = 0.5
    objectness: float = 1.0
    background: float = 0.5
    classify: float = 1.0


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _bce_with_logits(x, target):
    """Elementwise stable binary cross-entropy on logits."""
    return np.maximum(x, 0.0) - x * target + np.log1p(np.exp(-np.abs(x)))


def _cell_grid(output_shape, anchors):
    h, w = output_shape[:2]
    a = len(anchors)
    jj, ii = np.meshgrid(np.arange(w), np.arange(h))
    return h, w, a, ii[:, :, None], jj[:, :, None]


def decode(
    output: np.ndarray,
    anchors: tuple[Anchor, ...],
    extent: PixelExtent,
    downsample: int,
    meters_per_px: float,
    conf_threshold: float,
    source: int = 0,
) -> list[Detection]:
    """Detections above conf_threshold, in row-major cell/anchor order."""
    if output.shape[2] != len(anchors) * VALUES_PER_ANCHOR:
        raise ValueError(
            f"expected {len(anchors) * VALUES_PER_ANCHOR} output channels, "
            f"got {output.shape[2]}"
        )
    h, w, a, ii, jj = _cell_grid(output.shape, anchors)
    t = output.reshape(h, w, a, VALUES_PER_ANCHOR)
    cell_m = downsample * meters_per_px
    fx0 = extent.x0 / downsample
    fy0 = extent.y0 / downsample
    cx = (fx0 + jj + sigmoid(t[..., 0])) * cell_m
    cy = (fy0 + ii + sigmoid(t[..., 1])) * cell_m
    aw = np.array([an.width for an in anchors])
    al = np.array([an.length for an in anchors])
    ayaw = np.array([an.yaw for an in anchors])
    bw = np.maximum(aw + t[..., 2], MIN_DIM_M)
    bl = np.maximum(al + t[..., 3], MIN_DIM_M)
    byaw = ayaw + t[..., 4]
    obj = sigmoid(t[..., 5])
    p_ped = sigmoid(t[..., 6])
    class_prob = np.maximum(p_ped, 1.0 - p_ped)
    conf = obj * class_prob
    cls = (p_ped > 0.5).astype(np.int64)
    dets = []
    for i, j, k in np.argwhere(conf > conf_threshold):
        dets.append(
            Detection(
                box=Box(
                    float(cx[i, j, k]),
                    float(cy[i, j, k]),
                    float(bw[i, j, k]),
                    float(bl[i, j, k]),
                    wrap_angle(float(byaw[i, j, k])),
                ),
                cls=int(cls[i, j, k]),
                conf=float(conf[i, j, k]),
                source=source,
                class_prob=float(class_prob[i, j, k]),
            )
        )
    return dets


def _logit(p: float) -> float:
    p = min(max(p, 1e-12), 1.0 - 1e-12)
    return math.log(p / (1.0 - p))


def _fold_half(angle: float) -> float:
    """Fold an angle into [-pi/2, pi/2).

    A box outline is unchanged by a half-turn, so yaw residuals live on a
    half circle; folding keeps equivalent orientations from producing
    contradictory regression targets.
    """
    return (angle + math.pi / 2.0) % math.pi - math.pi / 2.0


def _assign(
    truth_box: Box, anchors: tuple[Anchor, ...]
) -> int:
    """Best-IoU anchor for a truth, comparing shapes at a common center."""
    best_k, best_iou = 0, -1.0
    for k, an in enumerate(anchors):
        cand = Box(truth_box.cx, truth_box.cy, an.width, an.length, an.yaw)
        iou = box_iou(truth_box, cand)
        if iou > best_iou:
            best_iou, best_k = iou, k
    return best_k


def encode_boxes(
    truths: list[tuple[int, Box]],
    anchors: tuple[Anchor, ...],
    extent: PixelExtent,
    downsample: int,
    meters_per_px: float,
    shape,
    obj_logit: float = 10.0,
) -> np.ndarray:
    """Output tensor whose decode reproduces the given (class, box) truths.

    Inverse of decode for boxes whose centers lie inside the extent (yaw up
    to the box's half-turn symmetry); used by tests and golden-file
    generation.
    """
    h, w = shape[:2]
    out = np.zeros((h, w, len(anchors) * VALUES_PER_ANCHOR))
    out[:, :, 5::VALUES_PER_ANCHOR] = -obj_logit  # background everywhere
    t = out.reshape(h, w, len(anchors), VALUES_PER_ANCHOR)
    cell_m = downsample * meters_per_px
    fx0 = extent.x0 / downsample
    fy0 = extent.y0 / downsample
    for cls, box in truths:
        fx = box.cx / cell_m - fx0
        fy = box.cy / cell_m - fy0
        j, i = math.floor(fx), math.floor(fy)
        if not (0 <= i < h and 0 <= j < w):
            raise ValueError(f"truth center {box.cx, box.cy} outside extent")
        k = _assign(box, anchors)
        an = anchors[k]
        t[i, j, k, 0] = _logit(fx - j)
        t[i, j, k, 1] = _logit(fy - i)
        t[i, j, k, 2] = box.width - an.width
        t[i, j, k, 3] = box.length - an.length
        t[i, j, k, 4] = _fold_half(box.yaw - an.yaw)
        t[i, j, k, 5] = obj_logit
        t[i, j, k, 6] = obj_logit if cls == PEDESTRIAN else -obj_logit
    return out


def loss(
    output: np.ndarray,
    truths: list[tuple[int, Box]],
    anchors: tuple[Anchor, ...],
    extent: PixelExtent,
    downsample: int,
    meters_per_px: float,
    weights: LossWeights = LossWeights(),
) -> tuple[float, np.ndarray]:
    """Weighted detector loss and its exact gradient w.r.t. the output.

    l2 on the five regression values for responsible anchors (yaw by the
    difference folded modulo pi, since a box outline is half-turn
    symmetric), binary cross-entropy on objectness everywhere and on class
    for responsible anchors. Truths centered outside the extent are
    skipped with a counted warning.
    """
    if output.shape[2] != len(anchors) * VALUES_PER_ANCHOR:
        raise ValueError(
            f"expected {len(anchors) * VALUES_PER_ANCHOR} output channels, "
            f"got {output.shape[2]}"
        )
    h, w = output.shape[:2]
    a = len(anchors)
    t = output.reshape(h, w, a, VALUES_PER_ANCHOR)
    cell_m = downsample * meters_per_px
    fx0 = extent.x0 / downsample
    fy0 = extent.y0 / downsample

    resp = np.zeros((h, w, a), dtype=bool)
    tgt = np.zeros((h, w, a, 6))  # fx frac, fy frac, dw, dl, dyaw, class
    skipped = 0
    for cls, box in truths:
        fx = box.cx / cell_m - fx0
        fy = box.cy / cell_m - fy0
        j, i = math.floor(fx), math.floor(fy)
        if not (0 <= i < h and 0 <= j < w):
            skipped += 1
            continue
        k = _assign(box, anchors)
        an = anchors[k]
        resp[i, j, k] = True
        tgt[i, j, k] = (
            fx - j,
            fy - i,
            box.width - an.width,
            box.length - an.length,
            _fold_half(box.yaw - an.yaw),
            1.0 if cls == PEDESTRIAN else 0.0,
        )
    if skipped:
        log.warning("loss: skipped %d truths with centers outside the grid", skipped)

    grad = np.zeros_like(t)
    wts = weights

    # location: sigmoid offsets against fractional cell position
    sx, sy = sigmoid(t[..., 0]), sigmoid(t[..., 1])
    ex = np.where(resp, sx - tgt[..., 0], 0.0)
    ey = np.where(resp, sy - tgt[..., 1], 0.0)
    loc = float((ex * ex + ey * ey).sum())
    grad[..., 0] = wts.loc * 2.0 * ex * sx * (1.0 - sx)
    grad[..., 1] = wts.loc * 2.0 * ey * sy * (1.0 - sy)

    # shape: linear meter offsets
    ew = np.where(resp, t[..., 2] - tgt[..., 2], 0.0)
    el = np.where(resp, t[..., 3] - tgt[..., 3], 0.0)
    shape_term = float((ew * ew + el * el).sum())
    grad[..., 2] = wts.shape * 2.0 * ew
    grad[..., 3] = wts.shape * 2.0 * el

    # yaw: l2 on the residual folded into [-pi/2, pi/2) (half-turn symmetry)
    dyaw = t[..., 4] - tgt[..., 4]
    dyaw = np.where(resp, (dyaw + np.pi / 2.0) % np.pi - np.pi / 2.0, 0.0)
    yaw_term = float((dyaw * dyaw).sum())
    grad[..., 4] = wts.yaw * 2.0 * dyaw

    # objectness: BCE everywhere, downweighted on background
    obj_target = resp.astype(np.float64)
    obj_w = np.where(resp, wts.objectness, wts.background)
    obj_term = float((obj_w * _bce_with_logits(t[..., 5], obj_target)).sum())
    grad[..., 5] = obj_w * (sigmoid(t[..., 5]) - obj_target)

    # class: BCE on responsible anchors (target 1 = pedestrian)
    cls_bce = np.where(resp, _bce_with_logits(t[..., 6], tgt[..., 5]), 0.0)
    cls_term = float(cls_bce.sum())
    grad[..., 6] = np.where(
        resp, wts.classify * (sigmoid(t[..., 6]) - tgt[..., 5]), 0.0
    )

    total = (
        wts.loc * loc
        + wts.shape * shape_term
        + wts.yaw * yaw_term
        + obj_term
        + wts.classify * cls_term
    )
    return total, grad.reshape(output.shape)


def nms(dets: list[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy same-class suppression; returns survivors in selection order.

    Selection sorts by confidence descending with ties broken by
    (source id, insertion order); a kept detection suppresses same-class
    detections overlapping it with IoU strictly above the threshold.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError(f"iou_threshold must be in (0,1), got {iou_threshold}")
    order = sorted(
        range(len(dets)), key=lambda i: (-dets[i].conf, dets[i].source, i)
    )
    kept: list[Detection] = []
    suppressed = [False] * len(dets)
    for i in order:
        if suppressed[i]:
            continue
        kept.append(dets[i])
        for j in order:
            if suppressed[j] or j == i or dets[j].cls != dets[i].cls:
                continue
            if box_iou(dets[i].box, dets[j].box) > iou_threshold:
                suppressed[j] = True
        suppressed[i] = True
    return kept


def format_detections(dets: list[Detection]) -> str:
    """Text form `class cx cy w l yaw conf`, 6-decimal fixed point."""
    lines = []
    for d in dets:
        b = d.box
        lines.append(
            f"{CLASS_NAMES[d.cls]} {b.cx:.6f} {b.cy:.6f} {b.width:.6f} "
            f"{b.length:.6f} {b.yaw:.6f} {d.conf:.6f}"
        )
    return "\n".join(lines) + ("\n" if lines else "")


def parse_detections(text: str, source: int = 0) -> list[Detection]:
    dets = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 7 or parts[0] not in CLASS_NAMES:
            raise ValueError(f"bad detection line {lineno}: {line!r}")
        cx, cy, bw, bl, yaw, conf = map(float, parts[1:])
        dets.append(
            Detection(
                box=Box(cx, cy, bw, bl, yaw),
                cls=CLASS_NAMES.index(parts[0]),
                conf=conf,
                source=source,
            )
        )
    return dets
