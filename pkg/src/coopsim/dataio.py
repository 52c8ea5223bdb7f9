"""Dataset files: per-frame directories with clouds, truths and poses.

Layout: <root>/frame_00000/ containing cloud_<vid>.pcl per LIDAR vehicle,
truth.txt (`class cx cy w l yaw`, global meters/radians, 6 decimals) and
poses.txt (`vehicle_id x y heading altitude`). Cloud files: magic "PCL1",
point count as u32 little-endian, then n x 3 little-endian f32.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from coopsim.bev import Pose
from coopsim.detector import CLASS_NAMES
from coopsim.geometry import Box
from coopsim.worldgen import LidarSpec, Scene, raycast_lidar

__all__ = [
    "ObservationFrame",
    "build_frame",
    "write_cloud",
    "read_cloud",
    "write_frame",
    "read_frame",
    "write_dataset",
    "load_dataset",
    "frame_dirs",
]

CLOUD_MAGIC = b"PCL1"


@dataclass
class ObservationFrame:
    """Everything recorded for one time frame."""

    frame_id: int
    poses: dict[int, Pose] = field(default_factory=dict)  # true poses
    clouds: dict[int, np.ndarray] = field(default_factory=dict)  # sensor frame
    truths: list[tuple[int, Box]] = field(default_factory=list)


def build_frame(scene: Scene, frame_id: int, lidar: LidarSpec = LidarSpec()) -> ObservationFrame:
    """Raycast every LIDAR vehicle in the scene."""
    frame = ObservationFrame(frame_id=frame_id, truths=scene.truths())
    for actor in scene.lidar_vehicles():
        frame.poses[actor.vehicle_id] = actor.pose
        frame.clouds[actor.vehicle_id] = raycast_lidar(scene, actor, lidar)
    return frame


def write_cloud(path, points: np.ndarray) -> None:
    data = np.ascontiguousarray(points, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(CLOUD_MAGIC + struct.pack("<I", len(data)))
        fh.write(data.tobytes())


def read_cloud(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != CLOUD_MAGIC:
        raise ValueError(f"{path}: bad cloud magic {buf[:4]!r}")
    (count,) = struct.unpack("<I", buf[4:8])
    if len(buf) != 8 + count * 12:
        raise ValueError(f"{path}: expected {count} points, file has {(len(buf) - 8) // 12}")
    return np.frombuffer(buf[8:], dtype="<f4").reshape(count, 3).astype(np.float64)


def write_frame(dirpath, frame: ObservationFrame) -> None:
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    for vid in sorted(frame.clouds):
        write_cloud(d / f"cloud_{vid:02d}.pcl", frame.clouds[vid])
    with open(d / "truth.txt", "w", newline="\n") as fh:
        for cls, box in frame.truths:
            fh.write(
                f"{CLASS_NAMES[cls]} {box.cx:.6f} {box.cy:.6f} "
                f"{box.width:.6f} {box.length:.6f} {box.yaw:.6f}\n"
            )
    with open(d / "poses.txt", "w", newline="\n") as fh:
        for vid in sorted(frame.poses):
            p = frame.poses[vid]
            fh.write(f"{vid} {p.x:.6f} {p.y:.6f} {p.heading:.6f} {p.altitude:.6f}\n")


def read_frame(dirpath) -> ObservationFrame:
    d = Path(dirpath)
    frame_id = int(d.name.split("_")[-1]) if "_" in d.name else 0
    frame = ObservationFrame(frame_id=frame_id)
    for line in (d / "truth.txt").read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 6 or parts[0] not in CLASS_NAMES:
            raise ValueError(f"{d}/truth.txt: bad line {line!r}")
        cx, cy, w, l, yaw = map(float, parts[1:])
        frame.truths.append((CLASS_NAMES.index(parts[0]), Box(cx, cy, w, l, yaw)))
    for line in (d / "poses.txt").read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        vid = int(parts[0])
        x, y, heading, altitude = map(float, parts[1:])
        frame.poses[vid] = Pose(x, y, heading, altitude)
    for cloud_path in sorted(d.glob("cloud_*.pcl")):
        vid = int(cloud_path.stem.split("_")[1])
        frame.clouds[vid] = read_cloud(cloud_path)
    return frame


def frame_dirs(root) -> list[Path]:
    return sorted(Path(root).glob("frame_*"))


def write_dataset(root, frames: list[ObservationFrame]) -> None:
    for frame in frames:
        write_frame(Path(root) / f"frame_{frame.frame_id:05d}", frame)


def load_dataset(root) -> list[ObservationFrame]:
    dirs = frame_dirs(root)
    if not dirs:
        raise FileNotFoundError(f"no frame directories under {root}")
    return [read_frame(d) for d in dirs]
