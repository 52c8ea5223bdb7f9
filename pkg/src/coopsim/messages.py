"""V2V message envelope and payload codecs.

Little-endian throughout. Envelope: magic "V2VM", version byte, payload
kind byte, sender id u32, frame id u32, pose as four f32 (x, y, heading,
altitude), payload length u32, payload bytes, then CRC32 of everything
preceding. Payloads carry sender-local or sender-frame data; the receiver
reconstructs geometry from the pose stamped in the envelope.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from coopsim.align import FeatureGrid
from coopsim.bev import PixelExtent, Pose
from coopsim.detector import Detection
from coopsim.geometry import Box

__all__ = [
    "KIND_RAW_CLOUD",
    "KIND_FEATURE_GRID",
    "KIND_DETECTION_LIST",
    "V2VMessage",
    "MessageError",
    "encode_message",
    "decode_message",
    "encode_cloud_payload",
    "decode_cloud_payload",
    "encode_grid_payload",
    "decode_grid_payload",
    "encode_detections_payload",
    "decode_detections_payload",
    "ENVELOPE_BYTES",
    "DETECTION_BYTES",
    "grid_header_bytes",
]

MAGIC = b"V2VM"
VERSION = 1
KIND_RAW_CLOUD = 0
KIND_FEATURE_GRID = 1
KIND_DETECTION_LIST = 2
_KINDS = (KIND_RAW_CLOUD, KIND_FEATURE_GRID, KIND_DETECTION_LIST)

_HEADER = struct.Struct("<4sBBIIffffI")  # through payload length
ENVELOPE_BYTES = _HEADER.size + 4  # + trailing CRC32
DETECTION_BYTES = 29  # 6 f32 + class u8 + conf f32


class MessageError(ValueError):
    """Malformed or corrupted V2V message."""


@dataclass
class V2VMessage:
    sender: int
    frame: int
    kind: int
    pose: Pose
    payload: bytes

    def __eq__(self, other):
        if not isinstance(other, V2VMessage):
            return NotImplemented
        return (
            self.sender == other.sender
            and self.frame == other.frame
            and self.kind == other.kind
            and self.payload == other.payload
            and _pose_f32(self.pose) == _pose_f32(other.pose)
        )


def _pose_f32(pose: Pose) -> tuple[float, float, float, float]:
    """Pose after the f32 wire round-trip."""
    return tuple(np.array([pose.x, pose.y, pose.heading, pose.altitude], "<f4"))


def encode_message(msg: V2VMessage) -> bytes:
    if msg.kind not in _KINDS:
        raise MessageError(f"unknown payload kind {msg.kind}")
    if len(msg.payload) >= 2**32:
        raise MessageError("payload too large")
    head = _HEADER.pack(
        MAGIC,
        VERSION,
        msg.kind,
        msg.sender & 0xFFFFFFFF,
        msg.frame & 0xFFFFFFFF,
        msg.pose.x,
        msg.pose.y,
        msg.pose.heading,
        msg.pose.altitude,
        len(msg.payload),
    )
    body = head + msg.payload
    return body + struct.pack("<I", zlib.crc32(body))


def decode_message(buf: bytes) -> V2VMessage:
    if len(buf) < ENVELOPE_BYTES:
        raise MessageError("truncated message")
    magic, version, kind, sender, frame, x, y, heading, alt, plen = _HEADER.unpack(
        buf[: _HEADER.size]
    )
    if magic != MAGIC:
        raise MessageError(f"bad magic {magic!r}")
    if version != VERSION:
        raise MessageError(f"unsupported version {version}")
    if kind not in _KINDS:
        raise MessageError(f"unknown payload kind {kind}")
    if len(buf) != _HEADER.size + plen + 4:
        raise MessageError(
            f"length mismatch: header says {plen} payload bytes, "
            f"buffer has {len(buf) - _HEADER.size - 4}"
        )
    body = buf[: _HEADER.size + plen]
    (crc,) = struct.unpack("<I", buf[_HEADER.size + plen :])
    if crc != zlib.crc32(body):
        raise MessageError("checksum mismatch")
    return V2VMessage(
        sender=sender,
        frame=frame,
        kind=kind,
        pose=Pose(float(x), float(y), float(heading), float(alt)),
        payload=buf[_HEADER.size : _HEADER.size + plen],
    )


def encode_cloud_payload(points: np.ndarray) -> bytes:
    """(n, 3) points as packed f32 triples; 12 bytes per point, no header."""
    return np.ascontiguousarray(points, dtype="<f4").tobytes()


def decode_cloud_payload(payload: bytes) -> np.ndarray:
    if len(payload) % 12:
        raise MessageError(f"cloud payload length {len(payload)} not divisible by 12")
    return np.frombuffer(payload, dtype="<f4").reshape(-1, 3).astype(np.float64)


def grid_header_bytes(kept_channels: int) -> int:
    return 7 + 2 * kept_channels


def encode_grid_payload(grid: FeatureGrid) -> bytes:
    """rows u16, cols u16, kept count u16, downsample u8, channel ids u16
    each, then row-major f32 values."""
    rows, cols, nchan = grid.values.shape
    channels = grid.channels if grid.channels is not None else tuple(range(nchan))
    if len(channels) != nchan:
        raise MessageError("channel list does not match value width")
    head = struct.pack("<HHHB", rows, cols, nchan, grid.downsample)
    head += struct.pack(f"<{nchan}H", *channels)
    return head + np.ascontiguousarray(grid.values, dtype="<f4").tobytes()


def decode_grid_payload(payload: bytes) -> tuple[int, int, int, tuple[int, ...], np.ndarray]:
    """Returns (rows, cols, downsample, channel ids, values f64)."""
    if len(payload) < 7:
        raise MessageError("grid payload shorter than header")
    rows, cols, nchan, down = struct.unpack("<HHHB", payload[:7])
    need = grid_header_bytes(nchan) + rows * cols * nchan * 4
    if len(payload) != need:
        raise MessageError(f"grid payload length {len(payload)}, expected {need}")
    channels = struct.unpack(f"<{nchan}H", payload[7 : 7 + 2 * nchan])
    values = (
        np.frombuffer(payload[7 + 2 * nchan :], dtype="<f4")
        .reshape(rows, cols, nchan)
        .astype(np.float64)
    )
    return rows, cols, down, channels, values


def encode_detections_payload(dets: list[Detection]) -> bytes:
    """29 bytes per detection: cx cy w l yaw class_prob (f32 each), class
    u8, confidence f32. Coordinates are in the sender's local frame."""
    out = bytearray()
    for d in dets:
        b = d.box
        out += struct.pack(
            "<6fBf",
            b.cx,
            b.cy,
            b.width,
            b.length,
            b.yaw,
            d.class_prob,
            d.cls,
            d.conf,
        )
    return bytes(out)


def decode_detections_payload(payload: bytes, source: int = 0) -> list[Detection]:
    if len(payload) % DETECTION_BYTES:
        raise MessageError(
            f"detection payload length {len(payload)} not divisible by {DETECTION_BYTES}"
        )
    dets = []
    for off in range(0, len(payload), DETECTION_BYTES):
        cx, cy, w, l, yaw, cprob, cls, conf = struct.unpack(
            "<6fBf", payload[off : off + DETECTION_BYTES]
        )
        if cls > 1:
            raise MessageError(f"bad class byte {cls}")
        dets.append(
            Detection(
                box=Box(cx, cy, w, l, yaw),
                cls=cls,
                conf=conf,
                source=source,
                class_prob=cprob,
            )
        )
    return dets
