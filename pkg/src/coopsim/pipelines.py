"""The three V2V sharing pipelines: raw points, features, hypotheses.

All three move a coop vehicle's observation to the ego through the same
message envelope and fuse at a different stage: raw sharing merges point
clouds before the BEV, feature sharing exchanges encoder grids and fuses
them on the cell canvas, hypothesis sharing exchanges finished detection
lists and fuses them with NMS. Coop vehicles self-localize, so a GPS error
displaces everything they send; the ego's own pose is taken as exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from coopsim.aggregate import aggregate, expand_channels, select_channels
from coopsim.align import (
    FeatureGrid,
    Padding,
    lattice_padding,
    pad_bev,
    place_on_canvas,
)
from coopsim.bev import (
    BevImage,
    GridSpec,
    PixelExtent,
    Pose,
    bin_points,
    cloud_to_global,
    global_extent,
)
from coopsim.dataio import ObservationFrame
from coopsim.detector import Box, Detection, decode, default_anchors, nms
from coopsim.geometry import wrap_angle
from coopsim.messages import (
    ENVELOPE_BYTES,
    KIND_DETECTION_LIST,
    KIND_FEATURE_GRID,
    KIND_RAW_CLOUD,
    MessageError,
    V2VMessage,
    decode_cloud_payload,
    decode_detections_payload,
    decode_grid_payload,
    decode_message,
    encode_cloud_payload,
    encode_detections_payload,
    encode_grid_payload,
    encode_message,
)
from coopsim.nn.network import Network
from coopsim.worldgen import VEHICLE_FOOTPRINT, perturb_pose

__all__ = [
    "FUSION_IOU",
    "Participant",
    "PipelineResult",
    "frame_participants",
    "wire_quantize",
    "believed_poses",
    "padded_bev",
    "truths_for_ego",
    "box_to_local",
    "box_to_global",
    "run_raw",
    "run_feature",
    "run_hypothesis",
    "BandwidthReport",
    "bandwidth_report",
]

FUSION_IOU = 0.4  # same-class overlap above this merges into one hypothesis

_NO_PADDING = Padding(0, 0, 0, 0)


@dataclass(frozen=True)
class Participant:
    """One LIDAR vehicle's contribution to a frame."""

    vehicle_id: int
    pose: Pose  # true pose
    cloud: np.ndarray  # sensor-frame points


@dataclass
class PipelineResult:
    detections: list[Detection]
    extent: PixelExtent  # window the ego evaluated, input pixels
    pre_nms: int  # hypothesis count entering the final NMS
    payload_bytes: dict[int, int] = field(default_factory=dict)  # per sender


def frame_participants(frame: ObservationFrame) -> list[Participant]:
    return [
        Participant(vid, frame.poses[vid], frame.clouds[vid])
        for vid in sorted(frame.clouds)
    ]


def wire_quantize(pose: Pose) -> Pose:
    """Pose as the receiver will see it after the 32-bit wire round-trip.

    Senders derive their BEV window from this quantized pose so that the
    receiver, recomputing the window from the envelope pose, lands on
    exactly the same lattice cells.
    """
    x, y, heading, altitude = np.array(
        [pose.x, pose.y, pose.heading, pose.altitude], dtype="<f4"
    )
    return Pose(float(x), float(y), float(heading), float(altitude))


def believed_poses(
    ego: Participant,
    coops: list[Participant],
    noise_mag: float,
    rng: np.random.Generator | None,
) -> dict[int, Pose]:
    """Self-localization per participant: coops get a GPS error of exactly
    `noise_mag` meters in a random direction; the ego stays exact.

    Draws happen in ascending vehicle id so results do not depend on the
    caller's coop ordering.
    """
    if noise_mag > 0.0 and rng is None:
        raise ValueError("noise requires an rng")
    believed = {ego.vehicle_id: ego.pose}
    for coop in sorted(coops, key=lambda p: p.vehicle_id):
        pose = coop.pose
        if rng is not None:
            pose = perturb_pose(pose, noise_mag, rng)
        believed[coop.vehicle_id] = wire_quantize(pose)
    return believed


def truths_for_ego(
    truths: list[tuple[int, Box]], ego: Participant
) -> list[tuple[int, Box]]:
    """Ground truth as scored at the ego: everything except its own body."""
    out = []
    for cls, box in truths:
        if math.hypot(box.cx - ego.pose.x, box.cy - ego.pose.y) < 1e-6:
            continue
        out.append((cls, box))
    return out


def box_to_local(box: Box, pose: Pose) -> Box:
    ca, sa = math.cos(pose.heading), math.sin(pose.heading)
    dx, dy = box.cx - pose.x, box.cy - pose.y
    return Box(
        ca * dx + sa * dy,
        -sa * dx + ca * dy,
        box.width,
        box.length,
        wrap_angle(box.yaw - pose.heading),
    )


def box_to_global(box: Box, pose: Pose) -> Box:
    ca, sa = math.cos(pose.heading), math.sin(pose.heading)
    return Box(
        ca * box.cx - sa * box.cy + pose.x,
        sa * box.cx + ca * box.cy + pose.y,
        box.width,
        box.length,
        wrap_angle(box.yaw + pose.heading),
    )


def _inside_footprint(det: Detection, pose: Pose) -> bool:
    w, l = VEHICLE_FOOTPRINT
    ca, sa = math.cos(pose.heading), math.sin(pose.heading)
    dx, dy = det.box.cx - pose.x, det.box.cy - pose.y
    along = ca * dx + sa * dy
    across = -sa * dx + ca * dy
    return abs(along) <= l / 2.0 and abs(across) <= w / 2.0


def _finish(
    dets: list[Detection],
    ego: Participant,
    extent: PixelExtent,
    payload_bytes: dict[int, int],
) -> PipelineResult:
    """Final NMS, then drop hypotheses sitting on the ego's own body (the
    ego knows where it is; coop views of it would otherwise score as FPs)."""
    fused = nms(dets, FUSION_IOU)
    kept = [d for d in fused if not _inside_footprint(d, ego.pose)]
    return PipelineResult(
        detections=kept,
        extent=extent,
        pre_nms=len(dets),
        payload_bytes=payload_bytes,
    )


def padded_bev(
    points: np.ndarray, pose: Pose, spec: GridSpec, downsample: int, tma: bool
) -> BevImage:
    """Global points binned into the pose's window, lattice-padded if tma."""
    extent = global_extent(pose, spec)
    bev = BevImage(bin_points(points, extent, spec), extent)
    padding = lattice_padding(extent, downsample) if tma else _NO_PADDING
    return pad_bev(bev, padding)


def _detect(
    net: Network, bev: BevImage, spec: GridSpec, conf_threshold: float, source: int
) -> list[Detection]:
    out, _ = net.forward(bev.data, train=False)
    return decode(
        out,
        default_anchors(),
        bev.extent,
        net.downsample,
        spec.meters_per_px,
        conf_threshold,
        source=source,
    )


def run_raw(
    ego: Participant,
    coops: list[Participant],
    net: Network,
    spec: GridSpec,
    noise_mag: float = 0.0,
    rng: np.random.Generator | None = None,
    conf_threshold: float = 0.5,
) -> PipelineResult:
    """Point-cloud sharing: coop clouds arrive in their sensor frames and
    are dropped into the ego's BEV using the senders' reported poses."""
    believed = believed_poses(ego, coops, noise_mag, rng)
    merged = [cloud_to_global(ego.cloud, ego.pose)]
    payload_bytes: dict[int, int] = {}
    for coop in coops:
        msg = V2VMessage(
            sender=coop.vehicle_id,
            frame=0,
            kind=KIND_RAW_CLOUD,
            pose=believed[coop.vehicle_id],
            payload=encode_cloud_payload(coop.cloud),
        )
        received = decode_message(encode_message(msg))
        payload_bytes[coop.vehicle_id] = len(received.payload)
        merged.append(
            cloud_to_global(decode_cloud_payload(received.payload), received.pose)
        )
    bev = padded_bev(
        np.concatenate(merged, axis=0), ego.pose, spec, net.downsample, tma=True
    )
    dets = _detect(net, bev, spec, conf_threshold, ego.vehicle_id)
    return _finish(dets, ego, bev.extent, payload_bytes)


def _own_grid(
    part: Participant, pose: Pose, net: Network, spec: GridSpec, tma: bool
) -> FeatureGrid:
    """The participant's encoder output over its own (believed) window."""
    bev = padded_bev(
        cloud_to_global(part.cloud, pose), pose, spec, net.downsample, tma
    )
    feats, _ = net.encode(bev.data, train=False)
    return FeatureGrid(
        values=feats,
        extent=bev.extent,
        downsample=net.downsample,
        source=part.vehicle_id,
    )


def _receive_grid(
    buf: bytes, net: Network, spec: GridSpec, tma: bool
) -> tuple[FeatureGrid, int]:
    """Validate and re-anchor a received feature grid; returns payload size.

    The sender's window is recomputed from the envelope pose; a grid whose
    shape disagrees with that window (or whose cell size / channel ids do
    not match the ego network) is rejected.
    """
    msg = decode_message(buf)
    rows, cols, down, channels, values = decode_grid_payload(msg.payload)
    if down != net.downsample:
        raise MessageError(
            f"grid cell size {down} does not match network downsample {net.downsample}"
        )
    nchan = net.feature_channels
    if any(c >= nchan for c in channels):
        raise MessageError(f"channel ids {channels} exceed network width {nchan}")
    extent = global_extent(msg.pose, spec)
    padding = lattice_padding(extent, down) if tma else _NO_PADDING
    height = extent.height + padding.top + padding.bottom
    width = extent.width + padding.left + padding.right
    if (rows * down, cols * down) != (height, width):
        raise MessageError(
            f"grid shape {rows}x{cols} does not cover the sender's window "
            f"{height // down}x{width // down}"
        )
    grid = FeatureGrid(
        values=values,
        extent=PixelExtent(
            extent.x0 - padding.left,
            extent.y0 - padding.top,
            extent.x1 + padding.right,
            extent.y1 + padding.bottom,
        ),
        downsample=down,
        source=msg.sender,
        channels=channels,
    )
    return expand_channels(grid, nchan), len(msg.payload)


def run_feature(
    ego: Participant,
    coops: list[Participant],
    net: Network,
    spec: GridSpec,
    mode: str = "sum",
    tma: bool = True,
    noise_mag: float = 0.0,
    rng: np.random.Generator | None = None,
    keep_channels: tuple[int, ...] | None = None,
    conf_threshold: float = 0.5,
) -> PipelineResult:
    """Deep-feature sharing: every participant runs the shared encoder on
    its own window, coop grids travel as messages, the ego composites all
    grids on the cell canvas, aggregates, crops back to its own window and
    runs the detection head once."""
    believed = believed_poses(ego, coops, noise_mag, rng)
    ego_grid = _own_grid(ego, ego.pose, net, spec, tma)
    grids = [ego_grid]
    payload_bytes: dict[int, int] = {}
    for coop in coops:
        grid = _own_grid(coop, believed[coop.vehicle_id], net, spec, tma)
        if keep_channels is not None:
            grid = select_channels(grid, keep_channels)
        msg = V2VMessage(
            sender=coop.vehicle_id,
            frame=0,
            kind=KIND_FEATURE_GRID,
            pose=believed[coop.vehicle_id],
            payload=encode_grid_payload(grid),
        )
        received, nbytes = _receive_grid(encode_message(msg), net, spec, tma)
        payload_bytes[coop.vehicle_id] = nbytes
        grids.append(received)
    canvas, offsets = place_on_canvas(grids)
    fused, _cache = aggregate(grids, mode, canvas, offsets)
    r0, c0 = offsets[0]
    h, w = ego_grid.values.shape[:2]
    window = fused.values[r0 : r0 + h, c0 : c0 + w]
    out, _ = net.head_forward(window, train=False)
    dets = decode(
        out,
        default_anchors(),
        ego_grid.extent,
        net.downsample,
        spec.meters_per_px,
        conf_threshold,
        source=ego.vehicle_id,
    )
    return _finish(dets, ego, ego_grid.extent, payload_bytes)


def run_hypothesis(
    ego: Participant,
    coops: list[Participant],
    net: Network,
    spec: GridSpec,
    noise_mag: float = 0.0,
    rng: np.random.Generator | None = None,
    conf_threshold: float = 0.5,
) -> PipelineResult:
    """Detection-list sharing: every participant detects independently;
    lists travel in sender-local coordinates and the ego re-anchors them
    with the envelope pose, then one NMS merges duplicates."""
    believed = believed_poses(ego, coops, noise_mag, rng)
    ego_bev = padded_bev(
        cloud_to_global(ego.cloud, ego.pose), ego.pose, spec, net.downsample, tma=True
    )
    dets = _detect(net, ego_bev, spec, conf_threshold, ego.vehicle_id)
    payload_bytes: dict[int, int] = {}
    for coop in coops:
        pose = believed[coop.vehicle_id]
        bev = padded_bev(
            cloud_to_global(coop.cloud, pose), pose, spec, net.downsample, tma=True
        )
        local = [
            Detection(
                box=box_to_local(d.box, pose),
                cls=d.cls,
                conf=d.conf,
                source=coop.vehicle_id,
                class_prob=d.class_prob,
            )
            for d in _detect(net, bev, spec, conf_threshold, coop.vehicle_id)
        ]
        msg = V2VMessage(
            sender=coop.vehicle_id,
            frame=0,
            kind=KIND_DETECTION_LIST,
            pose=pose,
            payload=encode_detections_payload(local),
        )
        received = decode_message(encode_message(msg))
        payload_bytes[coop.vehicle_id] = len(received.payload)
        for d in decode_detections_payload(received.payload, source=received.sender):
            dets.append(
                Detection(
                    box=box_to_global(d.box, received.pose),
                    cls=d.cls,
                    conf=d.conf,
                    source=d.source,
                    class_prob=d.class_prob,
                )
            )
    return _finish(dets, ego, ego_bev.extent, payload_bytes)


@dataclass
class BandwidthReport:
    """Measured per-frame payload bytes for each sharing method."""

    per_sender: dict[str, dict[int, int]]  # method -> sender -> payload bytes
    payload_total: dict[str, int]
    message_total: dict[str, int]  # payload + envelope overhead

    def row(self, method: str) -> tuple[str, int, int]:
        return (method, self.payload_total[method], self.message_total[method])


def bandwidth_report(
    ego: Participant,
    coops: list[Participant],
    net: Network,
    spec: GridSpec,
    keep_channels: tuple[int, ...] | None = None,
    conf_threshold: float = 0.5,
) -> BandwidthReport:
    """Run all three pipelines noise-free and account their traffic."""
    per_sender = {
        "raw": run_raw(ego, coops, net, spec, conf_threshold=conf_threshold).payload_bytes,
        "feature": run_feature(
            ego, coops, net, spec, keep_channels=keep_channels,
            conf_threshold=conf_threshold,
        ).payload_bytes,
        "hypothesis": run_hypothesis(
            ego, coops, net, spec, conf_threshold=conf_threshold
        ).payload_bytes,
    }
    payload_total = {m: sum(v.values()) for m, v in per_sender.items()}
    message_total = {
        m: total + ENVELOPE_BYTES * len(per_sender[m])
        for m, total in payload_total.items()
    }
    return BandwidthReport(per_sender, payload_total, message_total)
