"""Slow reference implementations used to check the fast library code.

Everything here is written straight from first principles (rasterization,
exhaustive search, direct Monte-Carlo) and must stay independent of the
library internals: only plain data types cross the boundary.
"""

from __future__ import annotations

import math

import numpy as np


def raster_iou(box_a, box_b, resolution: int = 1000) -> float:
    """IoU of two oriented rectangles by point sampling on a dense grid.

    Samples cell centers of a resolution^2 grid over the joint bounding box.
    Error is O(perimeter * cell / area), well under 2e-3 at 1000^2 for the
    box sizes used in tests.
    """

    def corners(box):
        cx, cy, w, l, yaw = box
        ca, sa = math.cos(yaw), math.sin(yaw)
        pts = []
        for su in (-1, 1):
            for sv in (-1, 1):
                ux, uy = ca * l / 2 * su, sa * l / 2 * su
                vx, vy = -sa * w / 2 * sv, ca * w / 2 * sv
                pts.append((cx + ux + vx, cy + uy + vy))
        return pts

    pts = corners(box_a) + corners(box_b)
    xs = [p[0] for p in pts]
    ys = [p[1] for p in pts]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    # cell centers
    gx = x0 + (np.arange(resolution) + 0.5) * (x1 - x0) / resolution
    gy = y0 + (np.arange(resolution) + 0.5) * (y1 - y0) / resolution
    gxx, gyy = np.meshgrid(gx, gy)

    def inside(box):
        cx, cy, w, l, yaw = box
        ca, sa = math.cos(yaw), math.sin(yaw)
        dx, dy = gxx - cx, gyy - cy
        u = dx * ca + dy * sa  # along heading
        v = -dx * sa + dy * ca  # across
        return (np.abs(u) <= l / 2) & (np.abs(v) <= w / 2)

    in_a = inside(box_a)
    in_b = inside(box_b)
    inter = np.count_nonzero(in_a & in_b)
    union = np.count_nonzero(in_a | in_b)
    if union == 0:
        return 0.0
    return inter / union


def naive_conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Direct-definition same-padding stride-1 convolution (slow loops).

    x: (h, w, cin); weight: (k, k, cin, cout); bias: (cout,).
    """
    h, w, cin = x.shape
    k = weight.shape[0]
    pad = (k - 1) // 2
    cout = weight.shape[3]
    xp = np.zeros((h + 2 * pad, w + 2 * pad, cin))
    xp[pad : pad + h, pad : pad + w] = x
    y = np.zeros((h, w, cout))
    for i in range(h):
        for j in range(w):
            for ki in range(k):
                for kj in range(k):
                    for c in range(cin):
                        y[i, j, :] += xp[i + ki, j + kj, c] * weight[ki, kj, c, :]
    return y + bias


def brute_force_nms(entries, iou_fn, iou_threshold: float):
    """Reference non-maximum suppression by literal rule application.

    entries: list of dicts with keys box, cls, conf, source, order (insertion
    index). Returns the kept subset in selection order. Selection order:
    confidence descending, ties by (source, order) ascending.
    """
    remaining = sorted(
        entries, key=lambda e: (-e["conf"], e["source"], e["order"])
    )
    kept = []
    while remaining:
        best = remaining.pop(0)
        kept.append(best)
        survivors = []
        for e in remaining:
            if e["cls"] == best["cls"] and iou_fn(e["box"], best["box"]) > iou_threshold:
                continue
            survivors.append(e)
        remaining = survivors
    return kept


def brute_force_ap(detections, truths, iou_fn, iou_threshold: float) -> float:
    """All-point interpolated average precision, single class, from scratch.

    detections: list of (box, conf); truths: list of box. Greedy matching in
    confidence order, each truth matched at most once, all-point interpolation
    (precision envelope integrated over recall).
    """
    if not truths:
        return float("nan")
    if not detections:
        return 0.0
    order = sorted(range(len(detections)), key=lambda i: -detections[i][1])
    matched = [False] * len(truths)
    tp_flags = []
    for i in order:
        box, _conf = detections[i]
        best_j, best_iou = -1, -1.0
        for j, t in enumerate(truths):
            if matched[j]:
                continue
            iou = iou_fn(box, t)
            if iou > best_iou:  # ties keep the lowest truth index
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou >= iou_threshold:
            matched[best_j] = True
            tp_flags.append(True)
        else:
            tp_flags.append(False)
    # precision/recall points after each detection
    precisions, recalls = [], []
    tp = fp = 0
    for flag in tp_flags:
        if flag:
            tp += 1
        else:
            fp += 1
        precisions.append(tp / (tp + fp))
        recalls.append(tp / len(truths))
    # all-point interpolation: integrate the running max of precision
    ap = 0.0
    prev_recall = 0.0
    for k in range(len(precisions)):
        if k > 0 and recalls[k] == recalls[k - 1]:
            continue
        p_max = max(precisions[k:])
        ap += (recalls[k] - prev_recall) * p_max
        prev_recall = recalls[k]
    return ap


def mc_merge_precision(
    n_coop: int,
    fp_per_vehicle: float,
    merge_fail_prob: float,
    tp_count: int,
    trials: int,
    rng: np.random.Generator,
) -> float:
    """Monte-Carlo the hypothesis-sharing merge and micro-average precision.

    Each of tp_count true objects is detected by the ego and by each of the
    n_coop cooperators; a coop copy merges into the ego detection with
    probability (1 - merge_fail_prob), otherwise it survives as a duplicate
    (counted as a false positive). Every vehicle also contributes a Poisson
    number of never-merging false detections with mean fp_per_vehicle.
    Precision is pooled over all trials: total TP / total detections.
    """
    total_tp = 0
    total_det = 0
    for _ in range(trials):
        dup = rng.binomial(tp_count * n_coop, merge_fail_prob) if n_coop else 0
        fp = rng.poisson(fp_per_vehicle * (n_coop + 1))
        total_tp += tp_count
        total_det += tp_count + dup + fp
    if total_det == 0:
        return 0.0
    return total_tp / total_det
