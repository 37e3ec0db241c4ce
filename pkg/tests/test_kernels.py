"""The numba kernels and their numpy fallbacks must agree exactly."""

import numpy as np
import pytest

from v2ifuse import _accel, kernels
from v2ifuse.scenario import SceneSpec, default_vehicle_rig, generate_scene, simulate_lidar


def _random_corners(rng, n):
    xy = rng.uniform(0, 20, (n, 2))
    wh = rng.uniform(0.5, 4, (n, 2))
    return np.column_stack([xy, xy + wh])


def test_env_flag_selects_path(monkeypatch):
    monkeypatch.setenv("V2IFUSE_DISABLE_NUMBA", "1")
    assert not _accel.numba_enabled()
    monkeypatch.setenv("V2IFUSE_DISABLE_NUMBA", "0")
    assert _accel.numba_enabled() == _accel.HAVE_NUMBA


def test_lidar_identical_under_both_paths(monkeypatch):
    sc = generate_scene(11, SceneSpec(n_occluders=(1, 3)))
    rig = default_vehicle_rig()
    monkeypatch.setenv("V2IFUSE_DISABLE_NUMBA", "0")
    a = simulate_lidar(sc, rig)
    monkeypatch.setenv("V2IFUSE_DISABLE_NUMBA", "1")
    b = simulate_lidar(sc, rig)
    np.testing.assert_array_equal(a[1], b[1])
    np.testing.assert_allclose(a[0], b[0], rtol=0, atol=1e-12)


def test_ray_cast_hand_case():
    box = np.array([[2.0, -1.0, 0.0, 4.0, 1.0, 2.0]])
    o = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 1.0], [3.0, 0.0, 1.0]])
    d = np.array([[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    for fn in (kernels.cast_rays_numpy, kernels.cast_rays_numba):
        t, i = fn(o, d, box, 40.0)
        assert t[0] == 2.0 and i[0] == 0
        assert np.isinf(t[1]) and i[1] == -1
        assert i[2] == -1  # starts inside the box
        t, i = fn(o[:1], d[:1], box, 1.5)
        assert i[0] == -1  # beyond max range


def brute_nms(corners, order, thr):
    keep = []
    for k in order:
        if all(kernels.iou_matrix(corners[k], corners[j])[0, 0] < thr for j in keep):
            keep.append(int(k))
    return keep


@pytest.mark.parametrize("seed", range(5))
def test_nms_paths_match_oracle(seed):
    rng = np.random.default_rng(seed)
    c = _random_corners(rng, 60)
    order = rng.permutation(60)
    expect = brute_nms(c, order, 0.3)
    assert kernels.nms_numpy(c, order, 0.3).tolist() == expect
    assert kernels.nms_numba(c, order.astype(np.int64), 0.3).tolist() == expect


def test_iou_hand_values():
    a = np.array([[0.0, 0.0, 2.0, 1.0]])
    b = np.array([[1.0, 0.0, 3.0, 1.0], [5.0, 5.0, 6.0, 6.0]])
    np.testing.assert_allclose(kernels.iou_matrix(a, b), [[1 / 3, 0.0]])


@pytest.mark.parametrize("shape", [(1, 1), (1, 5), (6, 1), (7, 9)])
def test_neighbor_difference_paths(shape):
    v = np.random.default_rng(0).random(shape)
    np.testing.assert_array_equal(kernels.neighbor_difference_numpy(v), kernels.neighbor_difference_numba(v))
