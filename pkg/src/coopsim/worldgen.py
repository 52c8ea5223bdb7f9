"""Synthetic urban scenes and simulated LIDAR.

Scenes are static: vehicles and pedestrians (extruded rectangles) plus
axis-aligned building occluders on a flat plane. A scene is a pure function
of (config, seed); every placement draws from its own named substream so
actors can be regenerated independently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from coopsim.bev import Pose
from coopsim.geometry import Box, box_corners, intersection_area, wrap_angle
from coopsim.rng import substream

__all__ = [
    "VEHICLE",
    "PEDESTRIAN",
    "WorldConfig",
    "LidarSpec",
    "Actor",
    "Occluder",
    "Scene",
    "PlacementError",
    "gen_scene",
    "raycast_lidar",
    "perturb_pose",
]

VEHICLE, PEDESTRIAN = 0, 1

VEHICLE_FOOTPRINT = (2.0, 4.5)  # width across heading, length along
VEHICLE_HEIGHT = 1.6
PEDESTRIAN_FOOTPRINT = (0.6, 0.6)
PEDESTRIAN_HEIGHT = 1.8
LIDAR_ALTITUDE = 1.7


class PlacementError(RuntimeError):
    """Could not place an actor without overlap within the retry budget."""


@dataclass(frozen=True)
class WorldConfig:
    width_m: float = 100.0
    length_m: float = 100.0
    vehicles: int = 8
    pedestrians: int = 4
    occluders: int = 6
    lidar_vehicles: int = 8
    occluder_min_m: float = 4.0
    occluder_max_m: float = 12.0
    occluder_height_m: float = 3.0
    ground_plane: bool = False
    placement_retries: int = 1000


@dataclass(frozen=True)
class LidarSpec:
    azimuth_step_deg: float = 0.15
    beams: int = 16
    elevation_min_deg: float = -15.0
    elevation_max_deg: float = 5.0
    range_m: float = 40.0
    ground_plane: bool = False  # emit returns from the z=0 plane


@dataclass
class Actor:
    cls: int
    center: tuple[float, float]
    footprint: tuple[float, float]  # (width, length)
    height: float
    yaw: float
    has_lidar: bool = False
    vehicle_id: int = -1

    @property
    def box(self) -> Box:
        return Box(self.center[0], self.center[1], *self.footprint, self.yaw)

    @property
    def pose(self) -> Pose:
        return Pose(self.center[0], self.center[1], self.yaw, LIDAR_ALTITUDE)


@dataclass
class Occluder:
    x0: float
    y0: float
    x1: float
    y1: float
    height: float

    def corners(self) -> list[tuple[float, float]]:
        return [(self.x0, self.y0), (self.x1, self.y0), (self.x1, self.y1), (self.x0, self.y1)]


@dataclass
class Scene:
    bounds: tuple[float, float, float, float]  # x0, y0, x1, y1 meters
    actors: list[Actor] = field(default_factory=list)
    occluders: list[Occluder] = field(default_factory=list)
    seed: int = 0

    def truths(self) -> list[tuple[int, Box]]:
        return [(a.cls, a.box) for a in self.actors]

    def lidar_vehicles(self) -> list[Actor]:
        return [a for a in self.actors if a.has_lidar]


def _overlaps_any(box: Box, others: list[Box], occluders: list[Occluder]) -> bool:
    for other in others:
        if intersection_area(box, other) > 1e-12:
            return True
    for occ in occluders:
        occ_box = Box(
            (occ.x0 + occ.x1) / 2.0,
            (occ.y0 + occ.y1) / 2.0,
            occ.y1 - occ.y0,
            occ.x1 - occ.x0,
            0.0,
        )
        if intersection_area(box, occ_box) > 1e-12:
            return True
    return False


def gen_scene(config: WorldConfig, seed: int) -> Scene:
    """Deterministic scene: occluders first, then vehicles, then pedestrians.

    Actors are rejection-sampled to avoid overlapping each other or any
    occluder (vehicles inside buildings would be unobservable anyway).
    """
    half_w, half_l = config.width_m / 2.0, config.length_m / 2.0
    bounds = (-half_w, -half_l, half_w, half_l)
    scene = Scene(bounds=bounds, seed=seed)
    for i in range(config.occluders):
        rng = substream(seed, "worldgen.occluder", i)
        w = rng.uniform(config.occluder_min_m, config.occluder_max_m)
        l = rng.uniform(config.occluder_min_m, config.occluder_max_m)
        cx = rng.uniform(-half_w + w / 2, half_w - w / 2)
        cy = rng.uniform(-half_l + l / 2, half_l - l / 2)
        scene.occluders.append(
            Occluder(cx - w / 2, cy - l / 2, cx + w / 2, cy + l / 2, config.occluder_height_m)
        )
    placed: list[Box] = []

    def place(idx: int, cls: int, footprint, height, has_lidar, vid) -> Actor:
        rng = substream(seed, "worldgen.actor", idx)
        w, l = footprint
        margin = math.hypot(w, l) / 2.0
        for _ in range(config.placement_retries):
            cx = rng.uniform(bounds[0] + margin, bounds[2] - margin)
            cy = rng.uniform(bounds[1] + margin, bounds[3] - margin)
            yaw = wrap_angle(rng.uniform(-math.pi, math.pi))
            box = Box(cx, cy, w, l, yaw)
            if not _overlaps_any(box, placed, scene.occluders):
                placed.append(box)
                return Actor(cls, (cx, cy), footprint, height, yaw, has_lidar, vid)
        raise PlacementError(f"could not place actor {idx} after {config.placement_retries} tries")

    idx = 0
    for v in range(config.vehicles):
        scene.actors.append(
            place(idx, VEHICLE, VEHICLE_FOOTPRINT, VEHICLE_HEIGHT,
                  v < config.lidar_vehicles, v)
        )
        idx += 1
    for _p in range(config.pedestrians):
        scene.actors.append(
            place(idx, PEDESTRIAN, PEDESTRIAN_FOOTPRINT, PEDESTRIAN_HEIGHT, False, -1)
        )
        idx += 1
    return scene


def _wall_segments(scene: Scene, observer: Actor) -> tuple[np.ndarray, np.ndarray]:
    """All wall segments except the observer's own body.

    Returns (segments (m, 4): x0,y0,x1,y1; heights (m,)).
    """
    segs: list[tuple[float, float, float, float]] = []
    heights: list[float] = []

    def add_poly(corners, height):
        n = len(corners)
        for i in range(n):
            x0, y0 = corners[i]
            x1, y1 = corners[(i + 1) % n]
            segs.append((x0, y0, x1, y1))
            heights.append(height)

    for actor in scene.actors:
        if actor is observer:
            continue
        add_poly(box_corners(actor.box), actor.height)
    for occ in scene.occluders:
        add_poly(occ.corners(), occ.height)
    if not segs:
        return np.zeros((0, 4)), np.zeros(0)
    return np.array(segs), np.array(heights)


def raycast_lidar(scene: Scene, observer: Actor, lidar: LidarSpec = LidarSpec()) -> np.ndarray:
    """First-hit LIDAR sweep; returns (n, 3) points in the sensor frame.

    A full horizontal fan of azimuths crossed with a vertical fan of beams.
    For each azimuth the horizontal ray/segment intersections are solved
    once; each beam then takes the nearest wall tall (or low) enough to
    intersect at its elevation. z is relative to the sensor mount.
    """
    if not observer.has_lidar:
        raise ValueError("observer has no lidar")
    pose = observer.pose
    segs, seg_h = _wall_segments(scene, observer)
    n_az = int(round(360.0 / lidar.azimuth_step_deg))
    az_local = np.arange(n_az) * math.radians(lidar.azimuth_step_deg)
    elevations = np.radians(
        np.linspace(lidar.elevation_min_deg, lidar.elevation_max_deg, lidar.beams)
    )
    tan_e = np.tan(elevations)
    cos_e = np.cos(elevations)
    if len(segs):
        az_global = az_local + pose.heading
        ux, uy = np.cos(az_global), np.sin(az_global)  # (A,)
        px = segs[:, 0] - pose.x  # (M,) segment start relative to sensor
        py = segs[:, 1] - pose.y
        ex = segs[:, 2] - segs[:, 0]
        ey = segs[:, 3] - segs[:, 1]
        # solve o + s*u = p + r*e for each (azimuth, segment) pair
        denom = ux[:, None] * ey[None, :] - uy[:, None] * ex[None, :]  # (A, M)
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (px[None, :] * ey[None, :] - py[None, :] * ex[None, :]) / denom
            r = (px[None, :] * uy[:, None] - py[None, :] * ux[:, None]) / denom
        valid = np.isfinite(s) & (s > 1e-9) & (r >= 0.0) & (r <= 1.0)
        s = np.where(valid, s, np.inf)  # horizontal distance per wall
    else:
        s = np.full((n_az, 1), np.inf)
        seg_h = np.zeros(1)
    points = []
    for b in range(lidar.beams):
        z = pose.altitude + s * tan_e[b]  # height where each wall is met
        ok = np.isfinite(s) & (z >= 0.0) & (z <= seg_h[None, :])
        nearest = np.where(ok, s, np.inf).min(axis=1)
        if lidar.ground_plane and tan_e[b] < 0.0:
            # sh * tan_e lands exactly at z = -altitude for ground hits
            nearest = np.minimum(nearest, pose.altitude / -tan_e[b])
        hit = np.isfinite(nearest) & (nearest <= lidar.range_m * cos_e[b])
        if not hit.any():
            continue
        sh = nearest[hit]
        points.append(
            np.column_stack(
                (sh * np.cos(az_local[hit]), sh * np.sin(az_local[hit]), sh * tan_e[b])
            )
        )
    if not points:
        return np.zeros((0, 3))
    return np.concatenate(points, axis=0)


def perturb_pose(pose: Pose, magnitude: float, rng: np.random.Generator) -> Pose:
    """Displace position by `magnitude` in a uniformly random direction."""
    if magnitude < 0:
        raise ValueError("magnitude must be non-negative")
    theta = rng.uniform(0.0, 2.0 * math.pi)
    return Pose(
        pose.x + magnitude * math.cos(theta),
        pose.y + magnitude * math.sin(theta),
        pose.heading,
        pose.altitude,
    )
