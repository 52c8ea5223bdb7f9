"""Built-in property checks behind `coopsim selftest`.

Each check is a small, self-contained version of the package's core
invariants: geometry against closed forms, gradients against finite
differences, NMS against its defining predicate, lattice alignment,
aggregation algebra, wire-format robustness, scoring, the false-positive
model against simulation, bandwidth ordering, and determinism. They run
in well under a minute and touch no files.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass

import numpy as np

from coopsim.aggregate import aggregate
from coopsim.align import FeatureGrid, lattice_padding, place_on_canvas
from coopsim.bev import GridSpec, PixelExtent, Pose, global_extent
from coopsim.dataio import build_frame
from coopsim.detector import (
    Box,
    Detection,
    LossWeights,
    default_anchors,
    encode_boxes,
    loss,
    nms,
)
from coopsim.evaluation import average_precision, hsm_fp_model
from coopsim.geometry import box_iou
from coopsim.messages import (
    MessageError,
    V2VMessage,
    decode_message,
    encode_message,
)
from coopsim.nn.network import build_network, network_bytes
from coopsim.pipelines import bandwidth_report, frame_participants, padded_bev
from coopsim.rng import substream
from coopsim.training import TrainConfig, train
from coopsim.worldgen import WorldConfig, gen_scene

__all__ = ["SelfCheck", "run_selftest"]


@dataclass
class SelfCheck:
    name: str
    ok: bool
    detail: str
    seconds: float


def _check_iou_closed_forms():
    square = Box(0.0, 0.0, 1.0, 1.0, 0.0)
    rotated = Box(0.0, 0.0, 1.0, 1.0, math.pi / 4)
    got = box_iou(square, rotated)
    want = 1.0 / math.sqrt(2.0)
    assert abs(got - want) < 1e-6, f"45 deg square iou {got} != {want}"
    assert box_iou(square, square) == 1.0
    assert box_iou(square, Box(5.0, 0.0, 1.0, 1.0, 0.0)) == 0.0
    rng = substream(0, "selftest.iou")
    for _ in range(200):
        a = Box(*rng.uniform(-2, 2, 2), *rng.uniform(0.3, 3, 2), rng.uniform(-4, 4))
        b = Box(*rng.uniform(-2, 2, 2), *rng.uniform(0.3, 3, 2), rng.uniform(-4, 4))
        ab, ba = box_iou(a, b), box_iou(b, a)
        assert abs(ab - ba) < 1e-9 and 0.0 <= ab <= 1.0 + 1e-12
    return "closed forms and symmetry on 200 random pairs"


def _check_gradients():
    rng = substream(0, "selftest.grad")
    net = build_network(3, [2, 4], 1, [4], 28, substream(0, "selftest.init"))
    bev = rng.uniform(0.0, 1.0, (8, 8, 3))
    spec = GridSpec(resolution_px=8, half_range_m=4.0)
    extent = global_extent(Pose(0.0, 0.0, 0.0), spec)
    truths = [(0, Box(1.0, -0.5, 2.0, 4.5, 0.2))]
    weights = LossWeights()

    def loss_value():
        out, _caches = net.forward(bev, train=True)
        return loss(
            out, truths, default_anchors(), extent, net.downsample,
            spec.meters_per_px, weights,
        )[0]

    base, caches = net.forward(bev, train=True)
    _value, grad = loss(
        base, truths, default_anchors(), extent, net.downsample,
        spec.meters_per_px, weights,
    )
    net.zero_grads()
    net.backward(grad, caches)
    params = [
        (layer, name, value, g)
        for layer in (*net.encoder, *net.head)
        for name, value, g in layer.params()
    ]
    checked = 0
    for _ in range(15):
        layer, name, value, g = params[int(rng.integers(0, len(params)))]
        flat = value.reshape(-1)
        idx = int(rng.integers(0, flat.size))
        eps = 1e-5
        keep = flat[idx]
        flat[idx] = keep + eps
        hi = loss_value()
        flat[idx] = keep - eps
        lo = loss_value()
        flat[idx] = keep
        fd = (hi - lo) / (2 * eps)
        an = g.reshape(-1)[idx]
        denom = max(abs(fd), abs(an), 1e-6)
        assert abs(fd - an) / denom < 1e-3, (
            f"{name}[{idx}] fd {fd} vs analytic {an}"
        )
        checked += 1
    return f"{checked} finite-difference probes within 1e-3"


def _check_nms_predicate():
    rng = substream(0, "selftest.nms")
    thr = 0.3
    for _ in range(300):
        dets = []
        for i in range(int(rng.integers(0, 8))):
            dets.append(Detection(
                box=Box(*rng.uniform(-4, 4, 2), *rng.uniform(0.5, 3, 2),
                        rng.uniform(-3, 3)),
                cls=int(rng.integers(0, 2)),
                conf=round(float(rng.uniform(0.1, 1.0)), 1),
                source=int(rng.integers(0, 3)),
                class_prob=0.5,
            ))
        kept = nms(dets, thr)
        assert nms(kept, thr) == kept, "not idempotent"
        for i, a in enumerate(kept):
            for b in kept[i + 1:]:
                if a.cls == b.cls:
                    assert box_iou(a.box, b.box) < thr, "kept pair conflicts"
        for d in dets:
            if d in kept:
                continue
            rank = (-d.conf, d.source, dets.index(d))
            witness = any(
                k.cls == d.cls
                and box_iou(k.box, d.box) >= thr
                and (-k.conf, k.source, dets.index(k)) < rank
                for k in kept
            )
            assert witness, "suppressed without a higher-priority witness"
    return "idempotent and conflict-free on 300 random sets"


def _check_alignment():
    spec = GridSpec(resolution_px=32, half_range_m=10.0)
    net = build_network(3, [4, 8], 2, [8], 28, substream(1, "selftest.init"))
    rng = substream(0, "selftest.align")
    points = rng.uniform(-6, 6, (400, 3))
    points[:, 2] = rng.uniform(-1.0, 1.0, 400)

    def features(pose, tma):
        bev = padded_bev(points, pose, spec, net.downsample, tma)
        values, _caches = net.encode(bev.data, train=False)
        return FeatureGrid(
            values=values, extent=bev.extent,
            downsample=net.downsample, source=0,
        )

    px = spec.meters_per_px
    a = features(Pose(0.0, 0.0, 0.0), tma=True)
    b = features(Pose(3.0 * px, 5.0 * px, 0.0), tma=True)
    _canvas, offsets = place_on_canvas([a, b])
    (ay, ax), (by, bx) = offsets
    oy0 = max(ay, by)
    ox0 = max(ax, bx)
    oy1 = min(ay + a.values.shape[0], by + b.values.shape[0])
    ox1 = min(ax + a.values.shape[1], bx + b.values.shape[1])
    inner_a = a.values[oy0 - ay + 2:oy1 - ay - 2, ox0 - ax + 2:ox1 - ax - 2]
    inner_b = b.values[oy0 - by + 2:oy1 - by - 2, ox0 - bx + 2:ox1 - bx - 2]
    aligned_err = float(np.max(np.abs(inner_a - inner_b)))
    assert aligned_err <= 1e-5, f"aligned disagreement {aligned_err}"

    c = features(Pose(3.0 * px, 5.0 * px, 0.0), tma=False)
    d = features(Pose(0.0, 0.0, 0.0), tma=False)
    h = min(c.values.shape[0], d.values.shape[0]) - 4
    w = min(c.values.shape[1], d.values.shape[1]) - 4
    off_err = float(np.mean(np.abs(
        c.values[2:2 + h, 2:2 + w] - d.values[2:2 + h, 2:2 + w]
    )))
    assert off_err > 10 * max(aligned_err, 1e-9), (
        f"misaligned features too similar: {off_err}"
    )
    return f"overlap max err {aligned_err:.2e}; unaligned mean {off_err:.2e}"


def _check_aggregation_algebra():
    rng = substream(0, "selftest.agg")
    for _ in range(500):
        n = int(rng.integers(1, 5))
        h, w, c = (int(v) for v in rng.integers(1, 5, 3))
        grids = [
            FeatureGrid(
                values=rng.normal(size=(h, w, c)),
                extent=PixelExtent(0, 0, w, h),
                downsample=1, source=i,
            )
            for i in range(n)
        ]
        stack = np.stack([g.values for g in grids])
        total, _cache = aggregate(grids, "sum")
        assert np.allclose(total.values, stack.sum(axis=0), atol=1e-12)
        mo, _ = aggregate(grids, "maxout")
        assert np.allclose(mo.values, stack.max(axis=0), atol=1e-12)
        mn, _ = aggregate(grids, "maxnorm")
        norms = np.linalg.norm(stack, axis=3)
        pick = norms.argmax(axis=0)
        ii, jj = np.meshgrid(range(h), range(w), indexing="ij")
        assert np.allclose(mn.values, stack[pick, ii, jj], atol=1e-12)
        perm = [grids[i] for i in rng.permutation(n)]
        for mode in ("sum", "maxout"):
            p, _ = aggregate(perm, mode)
            base, _ = aggregate(grids, mode)
            assert np.allclose(p.values, base.values, atol=1e-12)
        twice, _ = aggregate([grids[0], grids[0]], "maxout")
        assert np.allclose(twice.values, grids[0].values, atol=1e-12)
    return "sum/maxout/maxnorm identities on 500 random cases"


def _check_wire_format():
    rng = substream(0, "selftest.wire")
    for _ in range(1000):
        payload = rng.integers(0, 256, int(rng.integers(0, 64)), dtype=np.uint8)
        msg = V2VMessage(
            sender=int(rng.integers(0, 2**32)),
            frame=int(rng.integers(0, 2**32)),
            kind=int(rng.integers(0, 3)),
            pose=Pose(*(float(v) for v in rng.uniform(-100, 100, 3))),
            payload=payload.tobytes(),
        )
        buf = encode_message(msg)
        assert decode_message(buf) == msg
    buf = encode_message(V2VMessage(1, 2, 0, Pose(0.0, 0.0, 0.0), b"\x01" * 24))
    rejected = 0
    for _ in range(200):
        corrupt = bytearray(buf)
        corrupt[int(rng.integers(0, len(buf)))] ^= 1 << int(rng.integers(0, 8))
        try:
            decode_message(bytes(corrupt))
        except MessageError:
            rejected += 1
    assert rejected == 200, f"only {rejected}/200 corruptions rejected"
    return "1000 round-trips; 200/200 bit flips rejected"


def _brute_ap(dets, truths, thr):
    order = sorted(range(len(dets)), key=lambda i: -dets[i].conf)
    matched = [False] * len(truths)
    flags = []
    for i in order:
        best_j, best = -1, -1.0
        for j, t in enumerate(truths):
            if not matched[j] and box_iou(dets[i].box, t) > best:
                best, best_j = box_iou(dets[i].box, t), j
        if best_j >= 0 and best >= thr:
            matched[best_j] = True
            flags.append(True)
        else:
            flags.append(False)
    ap, prev, tp = 0.0, 0.0, 0
    precisions, recalls = [], []
    for k, f in enumerate(flags, start=1):
        tp += f
        precisions.append(tp / k)
        recalls.append(tp / len(truths))
    for k in range(len(flags)):
        if k and recalls[k] == recalls[k - 1]:
            continue
        ap += (recalls[k] - prev) * max(precisions[k:])
        prev = recalls[k]
    return ap


def _check_scoring():
    truths = [Box(0, 0, 2, 4.5, 0), Box(10, 0, 2, 4.5, 0), Box(20, 0, 2, 4.5, 0)]
    dets = [Detection(Box(0, 30, 2, 4.5, 0), 0, 0.95, 0, 1.0)]
    dets += [Detection(t, 0, 0.9 - 0.1 * i, 0, 1.0) for i, t in enumerate(truths)]
    curve = average_precision(dets, [(0, t) for t in truths])[0]
    assert abs(curve.ap - 0.75) < 1e-12, f"hand case ap {curve.ap}"
    rng = substream(0, "selftest.ap")
    for _ in range(50):
        truths = [
            Box(*rng.uniform(-5, 5, 2), *rng.uniform(0.5, 3, 2), rng.uniform(-3, 3))
            for _ in range(int(rng.integers(1, 6)))
        ]
        dets = [
            Detection(
                Box(t.cx + rng.uniform(0, 2), t.cy, t.width, t.length, t.yaw),
                0, round(float(rng.uniform(0, 1)), 1), 0, 1.0,
            )
            for t in truths for _ in range(int(rng.integers(0, 3)))
        ]
        got = average_precision(dets, [(0, t) for t in truths], iou_thr=0.5)
        want = _brute_ap(dets, truths, 0.5)
        got_ap = got[0].ap if 0 in got else 0.0
        assert abs(got_ap - want) < 1e-12
    return "hand case 0.75 exact; 50 random cases match brute force"


def _check_fp_model():
    rng = substream(0, "selftest.fp")
    for n, fp, q in [(1, 2.0, 0.3), (4, 0.5, 0.1), (2, 3.0, 0.6)]:
        tp = 12
        trials = 200_000
        dup = rng.binomial(tp * n, q, size=trials) if n else np.zeros(trials, int)
        fps = rng.poisson(fp * (n + 1), size=trials)
        mc = trials * tp / float(np.sum(tp + dup + fps))
        closed = hsm_fp_model(n, fp, q, tp)
        assert abs(closed - mc) < 0.01, f"n={n}: {closed} vs mc {mc}"
    return "closed form within 0.01 of simulation at 3 operating points"


def _tiny_frame():
    cfg = WorldConfig(
        width_m=40.0, length_m=40.0, vehicles=4, pedestrians=2,
        occluders=2, lidar_vehicles=4,
    )
    return build_frame(gen_scene(cfg, 5), frame_id=0)


def _check_bandwidth():
    spec = GridSpec(resolution_px=32, half_range_m=10.0)
    net = build_network(3, [4, 8], 2, [8], 28, substream(2, "selftest.init"))
    parts = frame_participants(_tiny_frame())
    ego, coops = parts[0], parts[1:3]
    report = bandwidth_report(ego, coops, net, spec, conf_threshold=0.9)
    raw = report.payload_total["raw"]
    feat = report.payload_total["feature"]
    hyp = report.payload_total["hypothesis"]
    assert raw == sum(12 * len(c.cloud) for c in coops), "raw formula"
    assert raw > feat > hyp, f"ordering violated: {raw}, {feat}, {hyp}"
    half = bandwidth_report(
        ego, coops, net, spec,
        keep_channels=tuple(range(net.feature_channels // 2)),
        conf_threshold=0.9,
    )
    c = net.feature_channels
    for vid, full_bytes in report.per_sender["feature"].items():
        cells = (full_bytes - 7 - 2 * c) // (4 * c)
        kept = c // 2
        assert half.per_sender["feature"][vid] == 7 + 2 * kept + cells * 4 * kept
    return f"raw {raw} > feature {feat} > hypothesis {hyp}; half-C exact"


def _check_determinism():
    frame_a, frame_b = _tiny_frame(), _tiny_frame()
    assert frame_a.poses == frame_b.poses
    for vid in frame_a.clouds:
        assert np.array_equal(frame_a.clouds[vid], frame_b.clouds[vid])
    spec = GridSpec(resolution_px=32, half_range_m=10.0)
    cfg = TrainConfig(epochs=1, batch_size=4, seed=3)
    blobs = []
    for _ in range(2):
        net = build_network(3, [2, 4], 1, [4], 28, substream(3, "selftest.init"))
        result = train([frame_a], net, spec, cfg)
        blobs.append((network_bytes(net), tuple(result.curve)))
    assert blobs[0] == blobs[1], "training is not reproducible"
    return "regeneration and retraining are bit-identical"


_CHECKS = [
    ("geometry.iou", _check_iou_closed_forms),
    ("detector.gradients", _check_gradients),
    ("detector.nms", _check_nms_predicate),
    ("align.lattice", _check_alignment),
    ("aggregate.algebra", _check_aggregation_algebra),
    ("messages.wire", _check_wire_format),
    ("evaluation.scoring", _check_scoring),
    ("evaluation.fp-model", _check_fp_model),
    ("pipelines.bandwidth", _check_bandwidth),
    ("determinism", _check_determinism),
]


def run_selftest() -> list[SelfCheck]:
    log = logging.getLogger("coopsim")
    level = log.level
    log.setLevel(logging.ERROR)  # expected-truth-skip warnings are noise here
    results = []
    try:
        for name, fn in _CHECKS:
            start = time.perf_counter()
            try:
                detail = fn()
                ok = True
            except Exception as exc:  # a failing property, not a crash
                detail = f"{type(exc).__name__}: {exc}"
                ok = False
            results.append(SelfCheck(name, ok, detail, time.perf_counter() - start))
    finally:
        log.setLevel(level)
    return results
