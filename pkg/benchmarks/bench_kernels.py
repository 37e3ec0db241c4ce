"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat N]

Each kernel runs once untimed (numba compiles or loads its cache), then
``repeat`` times per path; the best time is reported.
"""

import argparse
import time

import numpy as np

from v2ifuse import kernels
from v2ifuse.scenario import SceneSpec, default_vehicle_rig, generate_scene, lidar_rays


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases():
    rng = np.random.default_rng(0)
    scene = generate_scene(0, SceneSpec(n_occluders=(2, 3)))
    origin, dirs = lidar_rays(default_vehicle_rig())
    origins = np.ascontiguousarray(np.broadcast_to(origin, dirs.shape))
    boxes = scene.boxes3d()
    xy = rng.uniform(0, 30, (400, 2))
    corners = np.column_stack([xy, xy + rng.uniform(1, 4, (400, 2))])
    order = np.argsort(-rng.random(400)).astype(np.int64)
    v = rng.random((64, 64))
    return {
        f"ray cast ({len(dirs)} rays, {len(boxes)} boxes)": (
            lambda: kernels.cast_rays_numpy(origins, dirs, boxes, 40.0),
            lambda: kernels.cast_rays_numba(origins, dirs, boxes, 40.0)),
        "nms (400 boxes)": (
            lambda: kernels.nms_numpy(corners, order, 0.5),
            lambda: kernels.nms_numba(corners, order, 0.5)),
        "neighbor difference (64x64)": (
            lambda: kernels.neighbor_difference_numpy(v),
            lambda: kernels.neighbor_difference_numba(v)),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    print(f"{'kernel':42s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, (np_fn, nb_fn) in cases().items():
        a, b = best_of(np_fn, args.repeat), best_of(nb_fn, args.repeat)
        print(f"{name:42s} {1e3 * a:10.3f} {1e3 * b:10.3f} {a / b:8.1f}x")


if __name__ == "__main__":
    main()
