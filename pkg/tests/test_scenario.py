import math

import numpy as np
import pytest

from v2ifuse import kernels
from v2ifuse.errors import ConfigurationError, GenerationError
from v2ifuse.scenario import (Box, Pose, Scene, SceneSpec, add_noise, default_infrastructure_rig,
                              default_vehicle_rig, degrade_beams, generate_scene, load_scene, project_to_camera,
                              save_scene, sense, simulate_camera, simulate_lidar)

WALL = Box(3.0, 0.0, 0.2, 4.0, 20.0, "occluder")


def test_generation_is_deterministic():
    spec = SceneSpec(n_occluders=(1, 3))
    assert generate_scene(5, spec) == generate_scene(5, spec)
    assert generate_scene(5, spec) != generate_scene(6, spec)


def test_objects_do_not_overlap_and_stay_inside():
    spec = SceneSpec(n_occluders=(1, 3))
    for seed in range(30):
        sc = generate_scene(seed, spec)
        boxes = [b.corners2d() for b in sc.objects + sc.occluders]
        for c in boxes:
            assert c[0] >= spec.x_range[0] and c[2] <= spec.x_range[1]
            assert c[1] >= spec.y_range[0] and c[3] <= spec.y_range[1]
        iou = kernels.iou_matrix(np.array(boxes), np.array(boxes))
        np.fill_diagonal(iou, 0.0)
        assert np.all(iou == 0.0)


def test_occluded_scenes_hide_objects_from_the_vehicle():
    spec = SceneSpec(n_occluders=(1, 1))
    rig = default_vehicle_rig()
    hidden = 0
    for seed in range(20):
        sc = generate_scene(seed, spec)
        _, labels = simulate_lidar(sc, rig)
        seen = set(labels.tolist())
        hidden += sum(k not in seen for k in range(len(sc.objects)))
    assert hidden >= 15  # most seeds have at least one object fully in shadow


def test_impossible_spec_raises():
    spec = SceneSpec(n_objects=(60, 60), max_attempts=50)
    with pytest.raises(GenerationError):
        generate_scene(0, spec)


def test_invalid_range_rejected():
    with pytest.raises(ConfigurationError):
        generate_scene(0, SceneSpec(n_objects=(5, 2)))


def test_lidar_points_lie_on_boxes():
    sc = generate_scene(3, SceneSpec(n_occluders=(1, 2)))
    rig = default_vehicle_rig()
    pts, labels = simulate_lidar(sc, rig)
    world = pts[:, :3] + [0.0, 0.0, rig.mount_height]  # vehicle pose is the origin with zero yaw
    b = sc.boxes3d()[labels]
    tol = 1e-9
    inside = np.all((world >= b[:, :3] - tol) & (world <= b[:, 3:] + tol), axis=1)
    assert inside.all()
    on_face = np.any(np.isclose(world, b[:, :3]) | np.isclose(world, b[:, 3:]), axis=1)
    assert on_face.all()


def test_beam_halving_halves_points_on_a_wall():
    sc = Scene(0, (), (WALL,))
    rig = default_vehicle_rig()
    full, _ = simulate_lidar(sc, rig)
    half, _ = simulate_lidar(sc, degrade_beams(rig, 2))
    assert len(full) > 0 and len(full) == 2 * len(half)


def test_degrade_composes():
    rig = default_vehicle_rig()
    assert degrade_beams(degrade_beams(rig, 2), 2) == degrade_beams(rig, 4)
    assert degrade_beams(rig, 1) == rig
    with pytest.raises(ConfigurationError):
        degrade_beams(rig, 3)


def test_noise_statistics():
    sigma = 0.3
    x = add_noise(np.zeros(100_000), sigma, seed=1)
    assert abs(x.std() / sigma - 1.0) < 0.02
    assert abs(x.mean()) < 0.01


def test_noise_on_pose_and_zero_sigma():
    p = Pose(1.0, 2.0, 0.5)
    assert add_noise(p, 0.0, 3) is p
    q = add_noise(p, 0.1, 3)
    assert q != p and add_noise(p, 0.1, 3) == q
    with pytest.raises(ConfigurationError):
        add_noise(p, -1.0, 0)


def test_camera_renders_inverse_depth_of_a_wall():
    sc = Scene(0, (), (Box(10.0, 0.0, 0.2, 60.0, 20.0, "occluder"),))
    rig = default_vehicle_rig()
    img = simulate_camera(sc, rig)
    cam = rig.camera
    # the pixel on the optical axis sees the wall's near face at x = 9.9
    r, c = int(cam.cy), int(cam.cx)
    depth = 1.0 / img[r, c]
    assert depth == pytest.approx(9.9 / math.cos(cam.pitch) if cam.pitch else 9.9, rel=1e-2)


def test_projection_hits_pixel_of_rendered_point():
    rig = default_infrastructure_rig()
    sc = generate_scene(4, SceneSpec())
    frame = sense(sc, rig)
    cam = rig.camera
    rows, cols = np.nonzero(frame.image)
    assert len(rows)
    # back-project a rendered pixel and project it again
    r, c = rows[len(rows) // 2], cols[len(cols) // 2]
    from v2ifuse.scenario import camera_to_world_rotation
    R = camera_to_world_rotation(rig.pose, cam.pitch)
    d = np.array([1.0, (cam.cx - (c + 0.5)) / cam.fx, (cam.cy - (r + 0.5)) / cam.fy])
    p = np.array([rig.pose.x, rig.pose.y, rig.mount_height]) + (1.0 / frame.image[r, c]) * (R @ d)
    uv, depth = project_to_camera(p[None], rig)
    np.testing.assert_allclose(uv[0], [c + 0.5, r + 0.5], atol=1e-6)
    assert depth[0] == pytest.approx(1.0 / frame.image[r, c])


def test_scene_file_roundtrip(tmp_path):
    sc = generate_scene(9, SceneSpec(n_occluders=(1, 2)))
    path = tmp_path / "scene.txt"
    save_scene(sc, path)
    assert load_scene(path) == sc


def test_scene_file_rejects_bad_records(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("seed 1\nobject car 1 2\n")
    with pytest.raises(ConfigurationError, match=":2:"):
        load_scene(path)


def test_numba_and_numpy_ray_casts_agree():
    sc = generate_scene(2, SceneSpec(n_occluders=(1, 3)))
    from v2ifuse.scenario import lidar_rays
    origin, dirs = lidar_rays(default_vehicle_rig())
    origin = np.broadcast_to(origin, dirs.shape)
    t1, i1 = kernels.cast_rays_numpy(origin, dirs, sc.boxes3d(), 40.0)
    t2, i2 = kernels.cast_rays_numba(origin, dirs, sc.boxes3d(), 40.0)
    np.testing.assert_array_equal(i1, i2)
    np.testing.assert_allclose(t1, t2, rtol=0, atol=1e-12)
