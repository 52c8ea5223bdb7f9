"""Detection scoring and the standard experiment sweeps.

Scoring is classic greedy AP: detections pooled over the test set, matched
per frame per class in descending confidence against at-most-once truths,
precision envelope integrated over recall (all-point interpolation).
The sweeps vary one axis each: coop self-localization error magnitude, or
the number of participating coops. Every cell is one row of a flat results
table that goes to CSV and small SVG charts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from coopsim.bev import GridSpec, PixelExtent
from coopsim.dataio import ObservationFrame
from coopsim.detector import CLASS_NAMES, Box, Detection
from coopsim.geometry import box_iou
from coopsim.nn.network import Network
from coopsim.pipelines import (
    Participant,
    PipelineResult,
    frame_participants,
    run_feature,
    run_hypothesis,
    run_raw,
    truths_for_ego,
)
from coopsim.rng import substream

__all__ = [
    "AP_IOU",
    "PRCurve",
    "Method",
    "SweepRow",
    "SweepResult",
    "average_precision",
    "evaluate_frames",
    "hsm_fp_model",
    "run_method",
    "evaluate_methods",
    "sweep_noise",
    "sweep_scale",
    "write_sweep_csv",
    "write_svg_lines",
    "NOISE_MAGNITUDES",
    "SCALE_COUNTS",
]

AP_IOU = 0.75  # a detection must overlap a truth this much to count
NOISE_MAGNITUDES = (0.0, 0.4, 0.8, 1.2, 1.6, 2.0, 2.4)
SCALE_COUNTS = (0, 1, 2, 3, 4, 5, 6)


@dataclass
class PRCurve:
    """Confidence-ordered operating points plus the area under the curve."""

    points: list[tuple[float, float, float]]  # (confidence, precision, recall)
    ap: float
    truths: int
    detections: int

    @property
    def precision(self) -> float:
        """Precision at the deployed threshold (all detections counted)."""
        return self.points[-1][1] if self.points else 1.0

    @property
    def recall(self) -> float:
        return self.points[-1][2] if self.points else 0.0


def _match_class(
    dets: list[Detection], truths: list[Box], iou_thr: float
) -> list[tuple[float, bool]]:
    """Greedy matching for one class in one frame -> (confidence, hit)."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].conf, dets[i].source, i))
    taken = [False] * len(truths)
    flags = []
    for i in order:
        best_j, best_iou = -1, -1.0
        for j, t in enumerate(truths):
            if taken[j]:
                continue
            iou = box_iou(dets[i].box, t)
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou >= iou_thr:
            taken[best_j] = True
            flags.append((dets[i].conf, True))
        else:
            flags.append((dets[i].conf, False))
    return flags


def _curve_from_flags(flags: list[tuple[float, bool]], n_truths: int) -> PRCurve:
    ordered = sorted(flags, key=lambda f: -f[0])  # stable: ties keep pool order
    points = []
    tp = fp = 0
    for conf, hit in ordered:
        tp += hit
        fp += not hit
        points.append((conf, tp / (tp + fp), tp / n_truths if n_truths else 0.0))
    # all-point interpolation: integrate the precision envelope
    ap = 0.0
    if n_truths:
        prev_recall = 0.0
        precisions = [p for _c, p, _r in points]
        for k, (_conf, _p, recall) in enumerate(points):
            if k > 0 and recall == points[k - 1][2]:
                continue
            ap += (recall - prev_recall) * max(precisions[k:])
            prev_recall = recall
    return PRCurve(points=points, ap=ap, truths=n_truths, detections=len(ordered))


def evaluate_frames(
    per_frame: list[tuple[list[Detection], list[tuple[int, Box]]]],
    iou_thr: float = AP_IOU,
) -> dict[int, PRCurve]:
    """Pooled per-class curves over many (detections, truths) frames.

    Matching is frame-local; the matched flags pool into one curve per
    class. Classes with neither truths nor detections anywhere are skipped.
    """
    flags: dict[int, list[tuple[float, bool]]] = {}
    totals: dict[int, int] = {}
    for dets, truths in per_frame:
        for cls in range(len(CLASS_NAMES)):
            cls_dets = [d for d in dets if d.cls == cls]
            cls_truths = [b for c, b in truths if c == cls]
            if not cls_dets and not cls_truths:
                continue
            flags.setdefault(cls, []).extend(
                _match_class(cls_dets, cls_truths, iou_thr)
            )
            totals[cls] = totals.get(cls, 0) + len(cls_truths)
    return {cls: _curve_from_flags(flags[cls], totals[cls]) for cls in sorted(flags)}


def average_precision(
    dets: list[Detection],
    truths: list[tuple[int, Box]],
    iou_thr: float = AP_IOU,
) -> dict[int, PRCurve]:
    """Single-frame per-class curves (classes absent from both are skipped)."""
    return evaluate_frames([(dets, truths)], iou_thr)


def hsm_fp_model(
    n_coop: int, fp_per_vehicle: float, merge_fail_prob: float, tp_count: float
) -> float:
    """Expected precision when detection lists from n_coop+1 vehicles merge.

    Every true object yields one merged detection plus, for each of the
    n_coop duplicate hypotheses, a surviving false positive with probability
    merge_fail_prob; every vehicle also contributes fp_per_vehicle false
    detections that never merge. Micro-averaged precision is therefore

        tp / (tp + tp*n*q + (n+1)*fp)

    with q = merge_fail_prob. Monotone decreasing in n whenever fp > 0 or
    q > 0; n = 0 reduces to the single-vehicle tp/(tp+fp).
    """
    if not 0.0 <= merge_fail_prob <= 1.0:
        raise ValueError("merge_fail_prob must be a probability")
    if fp_per_vehicle < 0 or tp_count < 0 or n_coop < 0:
        raise ValueError("counts must be non-negative")
    denom = (
        tp_count
        + tp_count * n_coop * merge_fail_prob
        + (n_coop + 1) * fp_per_vehicle
    )
    if denom == 0:
        return 0.0
    return tp_count / denom


@dataclass(frozen=True, eq=False)
class Method:
    """A named pipeline + trained weights to evaluate."""

    name: str  # row label, e.g. "feature-sum-cvt"
    pipeline: str  # raw | feature | hypothesis
    net: Network
    strategy: str = "svt"
    aggregation: str = "sum"  # feature pipeline only
    tma: bool = True
    conf_threshold: float = 0.5


@dataclass(frozen=True)
class SweepRow:
    method: str
    aggregation: str
    tma: bool
    strategy: str
    noise_m: float
    n_coop: int
    cls: str
    ap: float
    precision: float
    recall: float


@dataclass
class SweepResult:
    rows: list[SweepRow] = field(default_factory=list)
    skipped_frames: int = 0

    def select(self, **want) -> list[SweepRow]:
        return [
            r for r in self.rows
            if all(getattr(r, k) == v for k, v in want.items())
        ]

    def ap_of(self, **want) -> float:
        rows = self.select(**want)
        if len(rows) != 1:
            raise KeyError(f"{want} matches {len(rows)} rows")
        return rows[0].ap


def run_method(
    method: Method,
    ego: Participant,
    coops: list[Participant],
    spec: GridSpec,
    noise_mag: float,
    rng: np.random.Generator | None,
) -> PipelineResult:
    if method.pipeline == "raw":
        return run_raw(
            ego, coops, method.net, spec, noise_mag, rng, method.conf_threshold
        )
    if method.pipeline == "feature":
        return run_feature(
            ego, coops, method.net, spec,
            mode=method.aggregation, tma=method.tma,
            noise_mag=noise_mag, rng=rng, conf_threshold=method.conf_threshold,
        )
    if method.pipeline == "hypothesis":
        return run_hypothesis(
            ego, coops, method.net, spec, noise_mag, rng, method.conf_threshold
        )
    raise ValueError(f"unknown pipeline {method.pipeline!r}")


def _truths_in_window(
    truths: list[tuple[int, Box]], extent: PixelExtent, spec: GridSpec
) -> list[tuple[int, Box]]:
    """Only truths whose center the ego window covers are scoreable."""
    mpp = spec.meters_per_px
    out = []
    for cls, box in truths:
        px, py = math.floor(box.cx / mpp), math.floor(box.cy / mpp)
        if extent.x0 <= px < extent.x1 and extent.y0 <= py < extent.y1:
            out.append((cls, box))
    return out


def _ego_and_coops(
    frame: ObservationFrame, n_coop: int, radius_m: float
) -> tuple[Participant, list[Participant]] | None:
    """Lowest-id vehicle as ego plus its n nearest coops within radius."""
    parts = frame_participants(frame)
    if not parts:
        return None
    ego = parts[0]
    near = [
        (math.hypot(p.pose.x - ego.pose.x, p.pose.y - ego.pose.y), p.vehicle_id, p)
        for p in parts[1:]
    ]
    near = [(d, vid, p) for d, vid, p in near if d <= radius_m]
    if len(near) < n_coop:
        return None
    near.sort()
    return ego, [p for _d, _vid, p in near[:n_coop]]


def _evaluate_cell(
    method: Method,
    frames: list[ObservationFrame],
    spec: GridSpec,
    noise_mag: float,
    n_coop: int,
    radius_m: float,
    seed: int,
    noise_tag: int,
) -> tuple[list[SweepRow], int]:
    per_frame = []
    skipped = 0
    for fi, frame in enumerate(frames):
        picked = _ego_and_coops(frame, n_coop, radius_m)
        if picked is None:
            skipped += 1
            continue
        ego, coops = picked
        rng = substream(seed, "eval.noise", noise_tag, fi)
        result = run_method(method, ego, coops, spec, noise_mag, rng)
        truths = _truths_in_window(
            truths_for_ego(frame.truths, ego), result.extent, spec
        )
        per_frame.append((result.detections, truths))
    curves = evaluate_frames(per_frame)
    rows = [
        SweepRow(
            method=method.name,
            aggregation=method.aggregation,
            tma=method.tma,
            strategy=method.strategy,
            noise_m=noise_mag,
            n_coop=n_coop,
            cls=CLASS_NAMES[cls],
            ap=curve.ap,
            precision=curve.precision,
            recall=curve.recall,
        )
        for cls, curve in curves.items()
    ]
    return rows, skipped


def evaluate_methods(
    methods: list[Method],
    frames: list[ObservationFrame],
    spec: GridSpec,
    n_coop: int = 1,
    noise_mag: float = 0.0,
    radius_m: float = 40.0,
    seed: int = 0,
) -> SweepResult:
    """One cell per method at a fixed noise magnitude and coop count."""
    result = SweepResult()
    for method in methods:
        rows, skipped = _evaluate_cell(
            method, frames, spec, noise_mag, n_coop, radius_m, seed, noise_tag=0
        )
        result.rows.extend(rows)
        result.skipped_frames += skipped
    return result


def sweep_noise(
    methods: list[Method],
    frames: list[ObservationFrame],
    spec: GridSpec,
    magnitudes: tuple[float, ...] = NOISE_MAGNITUDES,
    n_coop: int = 1,
    radius_m: float = 40.0,
    seed: int = 0,
) -> SweepResult:
    """AP vs coop localization error, everything else held fixed."""
    result = SweepResult()
    for method in methods:
        for mi, mag in enumerate(magnitudes):
            rows, skipped = _evaluate_cell(
                method, frames, spec, mag, n_coop, radius_m, seed, noise_tag=mi
            )
            result.rows.extend(rows)
            result.skipped_frames += skipped
    return result


def sweep_scale(
    methods: list[Method],
    frames: list[ObservationFrame],
    spec: GridSpec,
    counts: tuple[int, ...] = SCALE_COUNTS,
    noise_mag: float = 0.0,
    radius_m: float = 40.0,
    seed: int = 0,
) -> SweepResult:
    """AP vs number of participating coops (the n nearest within radius).

    Frames that cannot field max(counts) coops are skipped for every n so
    all cells score the same scenes.
    """
    need = max(counts)
    usable = [
        f for f in frames if _ego_and_coops(f, need, radius_m) is not None
    ]
    result = SweepResult(skipped_frames=len(frames) - len(usable))
    for method in methods:
        for ni, n in enumerate(counts):
            rows, _ = _evaluate_cell(
                method, usable, spec, noise_mag, n, radius_m, seed, noise_tag=ni
            )
            result.rows.extend(rows)
    return result


def write_sweep_csv(path, result: SweepResult) -> None:
    lines = ["method,aggregation,tma,strategy,noise_m,n_coop,class,ap,precision,recall"]
    for r in result.rows:
        lines.append(
            f"{r.method},{r.aggregation},{int(r.tma)},{r.strategy},"
            f"{r.noise_m:g},{r.n_coop},{r.cls},"
            f"{r.ap:.6f},{r.precision:.6f},{r.recall:.6f}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


_SVG_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def write_svg_lines(
    path,
    series: dict[str, list[tuple[float, float]]],
    title: str,
    x_label: str,
    y_label: str,
) -> None:
    """Minimal self-contained SVG line chart (one polyline per series)."""
    width, height = 640, 420
    ml, mr, mt, mb = 70, 160, 40, 50
    pw, ph = width - ml - mr, height - mt - mb
    xs = [x for pts in series.values() for x, _ in pts]
    ys = [y for pts in series.values() for _, y in pts]
    if not xs:
        xs, ys = [0.0, 1.0], [0.0, 1.0]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(0.0, min(ys)), max(1.0, max(ys))
    if x1 == x0:
        x1 = x0 + 1.0

    def sx(x):
        return ml + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return mt + ph - (y - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.0f}" y="24" text-anchor="middle" '
        f'font-family="sans-serif" font-size="16">{title}</text>',
        f'<line x1="{ml}" y1="{mt + ph}" x2="{ml + pw}" y2="{mt + ph}" '
        'stroke="black"/>',
        f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + ph}" stroke="black"/>',
        f'<text x="{ml + pw / 2:.0f}" y="{height - 12}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="12">{x_label}</text>',
        f'<text x="18" y="{mt + ph / 2:.0f}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="12" '
        f'transform="rotate(-90 18 {mt + ph / 2:.0f})">{y_label}</text>',
    ]
    for i in range(5):
        fx = x0 + (x1 - x0) * i / 4
        fy = y0 + (y1 - y0) * i / 4
        out.append(
            f'<text x="{sx(fx):.1f}" y="{mt + ph + 16}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="10">{fx:.2g}</text>'
        )
        out.append(
            f'<text x="{ml - 6}" y="{sy(fy) + 3:.1f}" text-anchor="end" '
            f'font-family="sans-serif" font-size="10">{fy:.2g}</text>'
        )
        out.append(
            f'<line x1="{ml}" y1="{sy(fy):.1f}" x2="{ml + pw}" y2="{sy(fy):.1f}" '
            'stroke="#dddddd"/>'
        )
    for k, (name, pts) in enumerate(sorted(series.items())):
        color = _SVG_COLORS[k % len(_SVG_COLORS)]
        coords = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in sorted(pts))
        if coords:
            out.append(
                f'<polyline points="{coords}" fill="none" stroke="{color}" '
                'stroke-width="2"/>'
            )
        for x, y in pts:
            out.append(
                f'<circle cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="3" fill="{color}"/>'
            )
        ly = mt + 14 + 16 * k
        out.append(
            f'<line x1="{ml + pw + 10}" y1="{ly - 4}" x2="{ml + pw + 30}" '
            f'y2="{ly - 4}" stroke="{color}" stroke-width="2"/>'
        )
        out.append(
            f'<text x="{ml + pw + 34}" y="{ly}" font-family="sans-serif" '
            f'font-size="11">{name}</text>'
        )
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8", newline="\n")
