import math

import numpy as np
import pytest

from coopsim.bev import GridSpec, PixelExtent, Pose
from coopsim.dataio import ObservationFrame, build_frame
from coopsim.detector import Box, Detection
from coopsim.evaluation import (
    Method,
    NOISE_MAGNITUDES,
    SweepRow,
    _ego_and_coops,
    _truths_in_window,
    average_precision,
    evaluate_frames,
    evaluate_methods,
    hsm_fp_model,
    sweep_noise,
    sweep_scale,
    write_sweep_csv,
    write_svg_lines,
)
from coopsim.geometry import box_iou
from coopsim.nn.network import build_network
from coopsim.rng import substream
from coopsim.worldgen import WorldConfig, gen_scene

from oracles import brute_force_ap, mc_merge_precision

SPEC = GridSpec(resolution_px=32, half_range_m=10.0)
NET = build_network(3, [4, 8], 2, [8], 28, substream(0, "init"))


def _det(box, conf, cls=0, source=0):
    return Detection(box=box, cls=cls, conf=conf, source=source, class_prob=1.0)


def _frames(n=3, seed0=300):
    cfg = WorldConfig(
        width_m=40.0, length_m=40.0, vehicles=4, pedestrians=2,
        occluders=2, lidar_vehicles=4,
    )
    return [
        build_frame(gen_scene(cfg, seed0 + i), frame_id=i) for i in range(n)
    ]


def _methods():
    return [
        Method(name="raw", pipeline="raw", net=NET),
        Method(name="feature-sum", pipeline="feature", net=NET, aggregation="sum"),
        Method(name="hypothesis", pipeline="hypothesis", net=NET),
    ]


def test_ap_matches_brute_force_on_random_instances():
    rng = substream(0, "ap.cases")
    for _ in range(200):
        n_truth = int(rng.integers(1, 7))
        n_det = int(rng.integers(0, 7))
        truths = []
        for _ in range(n_truth):
            truths.append(Box(
                cx=float(rng.uniform(-4, 4)), cy=float(rng.uniform(-4, 4)),
                width=float(rng.uniform(0.5, 3.0)),
                length=float(rng.uniform(0.5, 3.0)),
                yaw=float(rng.uniform(-math.pi, math.pi)),
            ))
        dets = []
        for _ in range(n_det):
            base = truths[int(rng.integers(0, n_truth))]
            jitter = float(rng.uniform(0.0, 2.0))
            dets.append(_det(
                Box(base.cx + jitter, base.cy, base.width, base.length, base.yaw),
                conf=round(float(rng.uniform(0.1, 1.0)), 1),  # force ties
            ))
        thr = float(rng.choice([0.3, 0.5, 0.75]))
        curves = average_precision(dets, [(0, t) for t in truths], iou_thr=thr)
        expected = brute_force_ap(
            [(d.box, d.conf) for d in dets], truths, box_iou, thr
        )
        assert curves[0].ap == pytest.approx(expected, abs=1e-12)


def test_ap_hand_case_three_truths_top_confidence_fp():
    truths = [Box(0.0, 0.0, 2.0, 4.5, 0.0), Box(10.0, 0.0, 2.0, 4.5, 0.0),
              Box(20.0, 0.0, 2.0, 4.5, 0.0)]
    dets = [
        _det(Box(0.0, 30.0, 2.0, 4.5, 0.0), conf=0.95),  # false positive
        _det(truths[0], conf=0.9),
        _det(truths[1], conf=0.8),
        _det(truths[2], conf=0.7),
    ]
    curve = average_precision(dets, [(0, t) for t in truths], iou_thr=0.75)[0]
    assert curve.ap == pytest.approx(0.75, abs=1e-12)
    assert [p for _c, p, _r in curve.points] == [0.0, 0.5, 2 / 3, 0.75]
    assert [r for _c, _p, r in curve.points] == [0.0, 1 / 3, 2 / 3, 1.0]
    assert curve.precision == 0.75 and curve.recall == 1.0


def test_perfect_detector_scores_one():
    truths = [(0, Box(1.0, 2.0, 2.0, 4.0, 0.4)), (1, Box(-3.0, 0.0, 0.6, 0.6, 0.0))]
    dets = [_det(truths[0][1], 0.9, cls=0), _det(truths[1][1], 0.8, cls=1)]
    curves = average_precision(dets, truths)
    assert curves[0].ap == 1.0 and curves[1].ap == 1.0
    assert curves[0].recall == 1.0 and curves[1].precision == 1.0


def test_missing_side_conventions():
    truth = [(0, Box(0.0, 0.0, 2.0, 4.0, 0.0))]
    only_truths = average_precision([], truth)
    assert only_truths[0].ap == 0.0
    assert only_truths[0].precision == 1.0 and only_truths[0].recall == 0.0
    assert average_precision([], []) == {}
    only_dets = average_precision([_det(truth[0][1], 0.9)], [])
    assert only_dets[0].ap == 0.0 and only_dets[0].precision == 0.0


def test_class_absent_from_both_is_skipped():
    truths = [(0, Box(0.0, 0.0, 2.0, 4.0, 0.0))]
    curves = average_precision([_det(truths[0][1], 0.9)], truths)
    assert sorted(curves) == [0]  # no pedestrian row anywhere


def test_matching_is_frame_local():
    truth_box = Box(0.0, 0.0, 2.0, 4.0, 0.0)
    frame_a = ([_det(truth_box, 0.9)], [(0, truth_box)])
    frame_b = ([_det(truth_box, 0.95)], [])  # confident FP, no truth here
    curve = evaluate_frames([frame_a, frame_b])[0]
    # the cross-frame detection must not steal the only truth
    assert curve.points == [(0.95, 0.0, 0.0), (0.9, 0.5, 1.0)]
    assert curve.ap == pytest.approx(0.5, abs=1e-12)


def test_hsm_fp_model_closed_form():
    assert hsm_fp_model(0, 2.0, 0.3, 10.0) == pytest.approx(10.0 / 12.0)
    assert hsm_fp_model(3, 0.0, 0.0, 10.0) == 1.0
    assert hsm_fp_model(2, 0.0, 1.0, 5.0) == pytest.approx(5.0 / 15.0)
    assert hsm_fp_model(0, 0.0, 0.0, 0.0) == 0.0
    prev = 1.1
    for n in range(7):
        cur = hsm_fp_model(n, 1.5, 0.2, 8.0)
        assert cur < prev
        prev = cur
    with pytest.raises(ValueError):
        hsm_fp_model(1, 1.0, 1.5, 5.0)
    with pytest.raises(ValueError):
        hsm_fp_model(-1, 1.0, 0.5, 5.0)


def test_hsm_fp_model_matches_monte_carlo():
    rng = substream(0, "mc.check")
    for n, fp, q in [(1, 2.0, 0.3), (4, 0.5, 0.1), (3, 3.0, 0.6)]:
        mc = mc_merge_precision(n, fp, q, tp_count=12, trials=20000, rng=rng)
        assert hsm_fp_model(n, fp, q, 12.0) == pytest.approx(mc, abs=0.01)


def test_truths_in_window():
    extent = PixelExtent(-16, -16, 16, 16)
    inside = (0, Box(9.99, 0.0, 1.0, 1.0, 0.0))
    edge_out = (0, Box(10.0, 0.0, 1.0, 1.0, 0.0))
    low_edge_in = (0, Box(-10.0, -10.0, 1.0, 1.0, 0.0))
    kept = _truths_in_window([inside, edge_out, low_edge_in], extent, SPEC)
    assert kept == [inside, low_edge_in]


def test_ego_and_coop_selection_prefers_nearest():
    cloud = np.zeros((1, 3), np.float32)
    frame = ObservationFrame(
        frame_id=0,
        poses={
            0: Pose(0.0, 0.0, 0.0),
            1: Pose(15.0, 0.0, 0.0),
            2: Pose(50.0, 0.0, 0.0),
            3: Pose(0.0, 5.0, 0.0),
        },
        clouds={vid: cloud for vid in range(4)},
    )
    ego, coops = _ego_and_coops(frame, 2, radius_m=40.0)
    assert ego.vehicle_id == 0
    assert [c.vehicle_id for c in coops] == [3, 1]
    assert _ego_and_coops(frame, 3, radius_m=40.0) is None
    ego, coops = _ego_and_coops(frame, 0, radius_m=40.0)
    assert coops == []


def test_sweep_noise_rows_and_zero_noise_cell():
    frames = _frames(2)
    methods = _methods()
    result = sweep_noise(methods, frames, SPEC, magnitudes=(0.0, 0.8), seed=7)
    assert result.skipped_frames == 0
    cells = {}
    for row in result.rows:
        cells.setdefault((row.method, row.noise_m), []).append(row.cls)
    assert sorted(cells) == sorted(
        (m.name, mag) for m in methods for mag in (0.0, 0.8)
    )
    class_sets = {tuple(sorted(v)) for v in cells.values()}
    assert len(class_sets) == 1  # every cell reports the same classes
    classes = class_sets.pop()
    assert len(result.rows) == len(methods) * 2 * len(classes)
    for row in result.rows:
        assert 0.0 <= row.ap <= 1.0
        assert row.strategy == "svt" and row.tma
    # the zero-noise column is exactly the plain evaluation
    plain = evaluate_methods(methods, frames, SPEC, n_coop=1, seed=7)
    assert [r for r in result.rows if r.noise_m == 0.0] == plain.rows


def test_sweep_noise_is_deterministic():
    frames = _frames(2)
    methods = _methods()[:1]
    a = sweep_noise(methods, frames, SPEC, magnitudes=(1.2,), seed=9)
    b = sweep_noise(methods, frames, SPEC, magnitudes=(1.2,), seed=9)
    assert a.rows == b.rows

    c = sweep_noise(methods, frames, SPEC, magnitudes=(1.2,), seed=10)
    assert [r.noise_m for r in c.rows] == [r.noise_m for r in a.rows]


def test_sweep_scale_counts_and_skipping():
    frames = _frames(2)
    methods = _methods()[1:2]
    result = sweep_scale(methods, frames, SPEC, counts=(0, 1, 2), seed=3)
    assert result.skipped_frames == 0
    assert sorted({r.n_coop for r in result.rows}) == [0, 1, 2]

    # frames only hold 4 LIDAR vehicles, so 6 coops can never be fielded
    starved = sweep_scale(methods, frames, SPEC, counts=(0, 6), seed=3)
    assert starved.rows == []
    assert starved.skipped_frames == len(frames)


def test_sweep_result_selectors():
    from coopsim.evaluation import SweepResult

    rows = [
        SweepRow("a", "sum", True, "svt", 0.0, 1, "vehicle", 0.5, 0.6, 0.7),
        SweepRow("a", "sum", True, "svt", 0.4, 1, "vehicle", 0.4, 0.6, 0.7),
        SweepRow("b", "sum", True, "svt", 0.0, 1, "vehicle", 0.9, 0.6, 0.7),
    ]
    result = SweepResult(rows=rows)
    assert result.ap_of(method="a", noise_m=0.4) == 0.4
    assert len(result.select(method="a")) == 2
    with pytest.raises(KeyError):
        result.ap_of(cls="vehicle")


def test_csv_round_trip(tmp_path):
    rows = [
        SweepRow("feature-sum", "sum", True, "cvt", 0.4, 2, "vehicle",
                 0.812345, 0.9, 0.75),
        SweepRow("raw", "sum", True, "svt", 0.0, 1, "pedestrian", 0.25, 1.0, 0.25),
    ]
    from coopsim.evaluation import SweepResult

    path = tmp_path / "sweep.csv"
    write_sweep_csv(path, SweepResult(rows=rows))
    data = path.read_bytes()
    assert b"\r" not in data
    lines = data.decode("utf-8").splitlines()
    assert lines[0] == (
        "method,aggregation,tma,strategy,noise_m,n_coop,class,ap,precision,recall"
    )
    assert len(lines) == 3
    fields = lines[1].split(",")
    assert fields[0] == "feature-sum" and fields[2] == "1"
    assert float(fields[7]) == pytest.approx(0.812345)


def test_svg_chart(tmp_path):
    path = tmp_path / "chart.svg"
    write_svg_lines(
        path,
        {"raw": [(0.0, 0.9), (0.8, 0.5)], "feature": [(0.0, 0.85), (0.8, 0.8)]},
        title="ap vs noise", x_label="noise (m)", y_label="ap",
    )
    text = path.read_text(encoding="utf-8")
    assert text.startswith("<svg")
    assert text.count("<polyline") == 2
    assert "ap vs noise" in text
    write_svg_lines(tmp_path / "empty.svg", {}, "t", "x", "y")
    assert (tmp_path / "empty.svg").exists()
