"""Scene generation and the LIDAR raycaster."""

import math

import numpy as np
import pytest

from coopsim.geometry import Box, box_corners, intersection_area
from coopsim.rng import substream
from coopsim.worldgen import (
    LIDAR_ALTITUDE,
    PEDESTRIAN,
    VEHICLE,
    VEHICLE_FOOTPRINT,
    Actor,
    LidarSpec,
    Occluder,
    PlacementError,
    Scene,
    WorldConfig,
    gen_scene,
    perturb_pose,
    raycast_lidar,
)


def _observer(x=0.0, y=0.0, yaw=0.0):
    return Actor(VEHICLE, (x, y), VEHICLE_FOOTPRINT, 1.6, yaw, has_lidar=True,
                 vehicle_id=0)


def _vehicle(x, y, yaw=0.0):
    return Actor(VEHICLE, (x, y), VEHICLE_FOOTPRINT, 1.6, yaw, vehicle_id=1)


def test_gen_scene_deterministic():
    cfg = WorldConfig(vehicles=6, pedestrians=3, occluders=4)
    assert gen_scene(cfg, 42) == gen_scene(cfg, 42)
    assert gen_scene(cfg, 42) != gen_scene(cfg, 43)


def test_gen_scene_counts_and_ids():
    cfg = WorldConfig(vehicles=5, pedestrians=3, occluders=2, lidar_vehicles=2)
    scene = gen_scene(cfg, 1)
    assert len(scene.actors) == 8
    assert len(scene.occluders) == 2
    vehicles = [a for a in scene.actors if a.cls == VEHICLE]
    assert [v.vehicle_id for v in vehicles] == list(range(5))
    assert [v.has_lidar for v in vehicles] == [True, True, False, False, False]
    assert all(a.cls == PEDESTRIAN and not a.has_lidar for a in scene.actors[5:])
    assert len(scene.truths()) == 8
    assert len(scene.lidar_vehicles()) == 2


def test_gen_scene_actors_never_overlap():
    for seed in (0, 7, 1234):
        scene = gen_scene(WorldConfig(vehicles=10, pedestrians=6, occluders=6), seed)
        boxes = [a.box for a in scene.actors]
        occ_boxes = [
            Box((o.x0 + o.x1) / 2, (o.y0 + o.y1) / 2, o.y1 - o.y0, o.x1 - o.x0, 0.0)
            for o in scene.occluders
        ]
        for i, a in enumerate(boxes):
            for b in boxes[i + 1 :]:
                assert intersection_area(a, b) < 1e-12
            for o in occ_boxes:
                assert intersection_area(a, o) < 1e-12


def test_gen_scene_actors_inside_bounds():
    scene = gen_scene(WorldConfig(width_m=60, length_m=40, vehicles=8), 5)
    x0, y0, x1, y1 = scene.bounds
    for a in scene.actors:
        for cx, cy in box_corners(a.box):
            assert x0 - 1e-9 <= cx <= x1 + 1e-9
            assert y0 - 1e-9 <= cy <= y1 + 1e-9


def test_gen_scene_raises_when_world_too_small():
    cfg = WorldConfig(width_m=10, length_m=10, vehicles=30, pedestrians=0,
                      occluders=0, placement_retries=50)
    with pytest.raises(PlacementError, match="actor"):
        gen_scene(cfg, 0)


def test_raycast_requires_lidar():
    scene = Scene(bounds=(-50, -50, 50, 50))
    with pytest.raises(ValueError, match="lidar"):
        raycast_lidar(scene, _vehicle(0, 0))


def test_raycast_empty_scene_returns_nothing():
    obs = _observer()
    scene = Scene(bounds=(-50, -50, 50, 50), actors=[obs])
    assert raycast_lidar(scene, obs).shape == (0, 3)


def test_raycast_vehicle_due_east():
    obs = _observer()
    scene = Scene(bounds=(-50, -50, 50, 50), actors=[obs, _vehicle(10.0, 0.0)])
    pts = raycast_lidar(scene, obs)
    assert len(pts) > 50
    # the target body spans x in [7.75, 12.25], y in [-1, 1]
    assert pts[:, 0].min() >= 7.75 - 1e-6
    assert pts[:, 0].max() <= 12.25 + 1e-6
    assert np.abs(pts[:, 1]).max() <= 1.0 + 1e-6
    # sensor sits above the body: only downward beams connect
    assert pts[:, 2].max() < 0.0
    assert pts[:, 2].min() >= -LIDAR_ALTITUDE - 1e-9
    assert np.linalg.norm(pts, axis=1).max() <= 40.0 + 1e-6


def test_raycast_output_is_sensor_frame():
    # observer faces north; a vehicle due north lands on the +x axis
    obs = _observer(yaw=math.pi / 2)
    north = _vehicle(0.0, 10.0, yaw=math.pi / 2)
    scene = Scene(bounds=(-50, -50, 50, 50), actors=[obs, north])
    pts = raycast_lidar(scene, obs)
    assert len(pts) > 50
    assert pts[:, 0].min() >= 7.75 - 1e-6
    assert pts[:, 0].max() <= 12.25 + 1e-6
    assert np.abs(pts[:, 1]).max() <= 1.0 + 1e-6


def test_raycast_first_hit_wins():
    obs = _observer()
    walls = [Occluder(4.0, -6.0, 4.5, 6.0, 5.0), Occluder(8.0, -6.0, 8.5, 6.0, 5.0)]
    scene = Scene(bounds=(-50, -50, 50, 50), actors=[obs], occluders=walls)
    pts = raycast_lidar(scene, obs)
    assert len(pts) > 0
    assert pts[:, 0].max() <= 4.5 + 1e-6  # the far wall is fully shadowed
    assert pts[:, 0].min() >= 4.0 - 1e-6


def test_raycast_occluder_hides_vehicle():
    obs = _observer()
    wall = Occluder(4.0, -6.0, 5.0, 6.0, 5.0)
    scene = Scene(
        bounds=(-50, -50, 50, 50),
        actors=[obs, _vehicle(10.0, 0.0)],
        occluders=[wall],
    )
    pts = raycast_lidar(scene, obs)
    assert len(pts) > 0
    assert pts[:, 0].max() <= 5.0 + 1e-6


def test_raycast_range_limit():
    obs = _observer()
    scene = Scene(bounds=(-200, -200, 200, 200), actors=[obs, _vehicle(100.0, 0.0)])
    assert raycast_lidar(scene, obs).shape == (0, 3)


def test_raycast_ground_plane_ring():
    obs = _observer()
    scene = Scene(bounds=(-50, -50, 50, 50), actors=[obs])
    spec = LidarSpec(ground_plane=True)
    pts = raycast_lidar(scene, obs, spec)
    assert len(pts) > 0
    np.testing.assert_allclose(pts[:, 2], -LIDAR_ALTITUDE, atol=1e-9)
    radii = np.hypot(pts[:, 0], pts[:, 1])
    elevations = np.radians(np.linspace(spec.elevation_min_deg,
                                        spec.elevation_max_deg, spec.beams))
    expected = {
        LIDAR_ALTITUDE / -math.tan(e)
        for e in elevations
        if e < 0 and LIDAR_ALTITUDE / -math.tan(e) <= spec.range_m * math.cos(e)
    }
    got = sorted(set(np.round(radii, 9)))
    assert got == sorted(round(r, 9) for r in expected)


def _segment_blocks(sensor, hit_xy, hit_z_world, seg, seg_h):
    """Does wall segment `seg` cut the sensor-to-hit ray before the hit?"""
    sx, sy = sensor
    dx, dy = hit_xy[0] - sx, hit_xy[1] - sy
    x0, y0, x1, y1 = seg
    ex, ey = x1 - x0, y1 - y0
    denom = dx * ey - dy * ex
    if abs(denom) < 1e-15:
        return False
    t = ((x0 - sx) * ey - (y0 - sy) * ex) / denom  # fraction along the ray
    u = ((x0 - sx) * dy - (y0 - sy) * dx) / denom  # fraction along the wall
    if not (1e-6 < t < 1.0 - 1e-5 and -1e-9 <= u <= 1.0 + 1e-9):
        return False
    z = LIDAR_ALTITUDE + t * (hit_z_world - LIDAR_ALTITUDE)
    return 0.0 <= z <= seg_h


def test_raycast_hits_lie_on_unoccluded_walls():
    scene = gen_scene(WorldConfig(vehicles=6, pedestrians=3, occluders=4), 11)
    obs = scene.lidar_vehicles()[2]
    pts = raycast_lidar(scene, obs)
    assert len(pts) > 100

    segs, heights = [], []
    for actor in scene.actors:
        if actor is obs:
            continue
        corners = box_corners(actor.box)
        for i in range(4):
            segs.append((*corners[i], *corners[(i + 1) % 4]))
            heights.append(actor.height)
    for occ in scene.occluders:
        corners = occ.corners()
        for i in range(4):
            segs.append((*corners[i], *corners[(i + 1) % 4]))
            heights.append(occ.height)

    c, s = math.cos(obs.yaw), math.sin(obs.yaw)
    sensor = obs.center
    rng = np.random.default_rng(0)
    for idx in rng.choice(len(pts), size=min(200, len(pts)), replace=False):
        x, y, z = pts[idx]
        gx = sensor[0] + c * x - s * y
        gy = sensor[1] + s * x + c * y
        z_world = LIDAR_ALTITUDE + z
        # the hit sits on some wall at a legal height
        on_wall = False
        for seg, h in zip(segs, heights):
            x0, y0, x1, y1 = seg
            ex, ey = x1 - x0, y1 - y0
            L2 = ex * ex + ey * ey
            u = ((gx - x0) * ex + (gy - y0) * ey) / L2
            u = min(max(u, 0.0), 1.0)
            d = math.hypot(gx - (x0 + u * ex), gy - (y0 + u * ey))
            if d < 1e-6 and -1e-9 <= z_world <= h + 1e-9:
                on_wall = True
                break
        assert on_wall
        # and nothing taller stands in the way
        for seg, h in zip(segs, heights):
            assert not _segment_blocks(sensor, (gx, gy), z_world, seg, h)


def test_perturb_pose_zero_magnitude_is_identity():
    from coopsim.bev import Pose

    pose = Pose(3.0, -4.0, 0.5, 1.7)
    out = perturb_pose(pose, 0.0, substream(0, "noise"))
    assert (out.x, out.y, out.heading, out.altitude) == (3.0, -4.0, 0.5, 1.7)


def test_perturb_pose_exact_magnitude_heading_kept():
    from coopsim.bev import Pose

    pose = Pose(3.0, -4.0, 0.5, 1.7)
    rng = substream(9, "noise")
    for mag in (0.4, 1.2, 2.4):
        out = perturb_pose(pose, mag, rng)
        assert math.hypot(out.x - pose.x, out.y - pose.y) == pytest.approx(mag, abs=1e-12)
        assert out.heading == pose.heading
        assert out.altitude == pose.altitude
    with pytest.raises(ValueError):
        perturb_pose(pose, -0.1, rng)


def test_perturb_pose_direction_unbiased():
    from coopsim.bev import Pose

    pose = Pose(0.0, 0.0, 0.0, 0.0)
    rng = substream(10, "noise")
    deltas = np.array(
        [(p.x, p.y) for p in (perturb_pose(pose, 1.0, rng) for _ in range(20000))]
    )
    assert np.abs(deltas.mean(axis=0)).max() < 0.05
