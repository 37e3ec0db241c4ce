"""Synthetic 2.5D world and sensor simulation.

The world is a flat plane holding axis-aligned boxes (objects to detect and
static occluders).  Sensors are a multi-ring LiDAR and a pinhole camera that
renders inverse depth; both are ray cast against the same boxes, so occlusion
is consistent between modalities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, GenerationError
from .kernels import cast_rays

# ------------------------------------------------------------------ types


@dataclass(frozen=True)
class Box:
    """Axis-aligned box standing on the ground. ``length`` is along x."""

    cx: float
    cy: float
    length: float
    width: float
    height: float
    cls: str = "car"

    def corners2d(self) -> np.ndarray:
        return np.array([self.cx - self.length / 2, self.cy - self.width / 2,
                         self.cx + self.length / 2, self.cy + self.width / 2])

    def bounds3d(self) -> np.ndarray:
        x0, y0, x1, y1 = self.corners2d()
        return np.array([x0, y0, 0.0, x1, y1, self.height])


@dataclass(frozen=True)
class Scene:
    seed: int
    objects: tuple[Box, ...]
    occluders: tuple[Box, ...] = ()
    x_range: tuple[float, float] = (0.0, 32.0)
    y_range: tuple[float, float] = (-16.0, 16.0)
    occluded: bool = False

    def boxes3d(self) -> np.ndarray:
        """(objects + occluders, 6) bounds; objects first."""
        all_boxes = list(self.objects) + list(self.occluders)
        if not all_boxes:
            return np.zeros((0, 6))
        return np.stack([b.bounds3d() for b in all_boxes])

    def without_occluders(self) -> "Scene":
        return replace(self, occluders=())


@dataclass(frozen=True)
class Pose:
    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0


@dataclass(frozen=True)
class CameraModel:
    width: int = 256
    height: int = 64
    fx: float = 128.0
    fy: float = 128.0
    cx: float = 128.0
    cy: float = 32.0
    pitch: float = 0.0  # downward tilt, radians
    max_depth: float = 60.0


@dataclass(frozen=True)
class SensorRig:
    name: str
    pose: Pose
    mount_height: float
    beam_elevations: tuple[float, ...]
    azimuth_resolution: float = math.radians(0.4)
    max_range: float = 40.0
    camera: CameraModel = field(default_factory=CameraModel)

    def __post_init__(self):
        if len(self.beam_elevations) < 1:
            raise ConfigurationError("a rig needs at least one beam")
        if self.mount_height <= 0:
            raise ConfigurationError(f"mount height must be positive, got {self.mount_height}")

    @property
    def beams(self) -> int:
        return len(self.beam_elevations)


@dataclass
class SensorFrame:
    """Raw sensor output of one agent.

    ``points`` are (x, y, z, intensity) in the sensor frame: planar
    coordinates rotated into the rig heading, z relative to the mount.
    ``labels`` give the hit box index per point (objects first, then occluders).
    """

    agent: str
    points: np.ndarray
    labels: np.ndarray
    image: np.ndarray
    pose: Pose
    mount_height: float
    camera: CameraModel


@dataclass(frozen=True)
class SceneSpec:
    n_objects: tuple[int, int] = (4, 8)
    length: tuple[float, float] = (2.5, 4.5)
    width: tuple[float, float] = (1.5, 2.0)
    height: tuple[float, float] = (1.0, 1.8)
    n_occluders: tuple[int, int] = (0, 0)
    occluder_length: tuple[float, float] = (1.0, 2.0)
    occluder_width: tuple[float, float] = (4.0, 8.0)
    occluder_height: tuple[float, float] = (2.5, 3.5)
    occluder_x: tuple[float, float] = (7.0, 12.0)
    occluder_y: tuple[float, float] = (-4.0, 10.0)
    hidden_per_occluder: int = 1
    object_x: tuple[float, float] = (3.0, 31.0)
    object_y: tuple[float, float] = (-15.0, 15.0)
    x_range: tuple[float, float] = (0.0, 32.0)
    y_range: tuple[float, float] = (-16.0, 16.0)
    margin: float = 0.5
    max_attempts: int = 1000


# -------------------------------------------------------------- default rigs

def default_vehicle_rig() -> SensorRig:
    return SensorRig(
        name="vehicle",
        pose=Pose(0.0, 0.0, 0.0),
        mount_height=1.8,
        beam_elevations=tuple(np.radians(np.linspace(-20.0, 10.0, 32))),
        azimuth_resolution=math.radians(0.4),
        max_range=40.0,
        camera=CameraModel(),
    )


def default_infrastructure_rig() -> SensorRig:
    return SensorRig(
        name="infrastructure",
        pose=Pose(26.0, 18.0, -math.pi / 2),
        mount_height=6.0,
        beam_elevations=tuple(np.radians(np.linspace(-45.0, -3.0, 32))),
        azimuth_resolution=math.radians(0.4),
        max_range=26.0,
        camera=CameraModel(pitch=math.radians(20.0)),
    )


# -------------------------------------------------------------- generation

def _overlaps(a: np.ndarray, b: np.ndarray, margin: float) -> bool:
    return not (a[2] + margin <= b[0] or b[2] + margin <= a[0] or a[3] + margin <= b[1] or b[3] + margin <= a[1])


def generate_scene(seed: int, spec: SceneSpec = SceneSpec(), occluded: bool | None = None,
                   keep_clear: Sequence[tuple[float, float]] = ((0.0, 0.0),)) -> Scene:
    """Deterministic random scene for ``seed``.

    With occluders, ``spec.hidden_per_occluder`` objects are first placed in
    each occluder's shadow as seen from the origin (the vehicle's default
    position).  Objects never overlap each other or occluders.
    """
    for lo, hi in (spec.n_objects, spec.n_occluders, spec.length, spec.width, spec.height):
        if lo > hi or lo < 0:
            raise ConfigurationError(f"invalid range ({lo}, {hi})")
    rng = np.random.default_rng(seed)
    n_occ = int(rng.integers(spec.n_occluders[0], spec.n_occluders[1] + 1))
    n_obj = int(rng.integers(spec.n_objects[0], spec.n_objects[1] + 1))
    attempts = 0
    placed: list[np.ndarray] = []
    clear = [np.array([x - 1.5, y - 1.5, x + 1.5, y + 1.5]) for x, y in keep_clear]

    def fits(c: np.ndarray) -> bool:
        if c[0] < spec.x_range[0] or c[2] > spec.x_range[1] or c[1] < spec.y_range[0] or c[3] > spec.y_range[1]:
            return False
        return not any(_overlaps(c, p, spec.margin) for p in placed + clear)

    occluders = []
    while len(occluders) < n_occ:
        attempts += 1
        if attempts > spec.max_attempts:
            raise GenerationError(f"seed {seed}: could not place {n_occ} occluders in {spec.max_attempts} attempts")
        b = Box(float(rng.uniform(*spec.occluder_x)), float(rng.uniform(*spec.occluder_y)),
                float(rng.uniform(*spec.occluder_length)), float(rng.uniform(*spec.occluder_width)),
                float(rng.uniform(*spec.occluder_height)), "occluder")
        if fits(b.corners2d()):
            occluders.append(b)
            placed.append(b.corners2d())

    def sample_object(x_lo=None, slope=None) -> Box:
        length = float(rng.uniform(*spec.length))
        width = float(rng.uniform(*spec.width))
        height = float(rng.uniform(*spec.height))
        if slope is None:
            cx = float(rng.uniform(*spec.object_x))
            cy = float(rng.uniform(*spec.object_y))
        else:
            cx = float(rng.uniform(x_lo, spec.object_x[1]))
            cy = float(cx * rng.uniform(*slope))
        return Box(cx, cy, length, width, height, "car")

    objects = []
    for occ in occluders:
        x0, y0, x1, y1 = occ.corners2d()
        # shadow wedge behind the occluder's near face, shrunk so the object fits inside
        slope = (y0 / x0 + 0.1, y1 / x0 - 0.1)
        for _ in range(spec.hidden_per_occluder):
            if len(objects) >= n_obj or slope[0] >= slope[1]:
                break
            while True:
                attempts += 1
                if attempts > spec.max_attempts:
                    raise GenerationError(f"seed {seed}: could not hide objects behind occluders")
                b = sample_object(x1 + 3.0, slope)
                if fits(b.corners2d()):
                    objects.append(b)
                    placed.append(b.corners2d())
                    break
    while len(objects) < n_obj:
        attempts += 1
        if attempts > spec.max_attempts:
            raise GenerationError(f"seed {seed}: could not place {n_obj} objects in {spec.max_attempts} attempts")
        b = sample_object()
        if fits(b.corners2d()):
            objects.append(b)
            placed.append(b.corners2d())
    return Scene(seed=seed, objects=tuple(objects), occluders=tuple(occluders),
                 x_range=spec.x_range, y_range=spec.y_range,
                 occluded=bool(n_occ) if occluded is None else occluded)


# ------------------------------------------------------------------ sensors

def _rotate(xy: np.ndarray, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.stack([c * xy[:, 0] - s * xy[:, 1], s * xy[:, 0] + c * xy[:, 1]], axis=1)


def lidar_rays(rig: SensorRig) -> tuple[np.ndarray, np.ndarray]:
    """Ray origin (3,) and unit directions (beams * azimuth steps, 3)."""
    n_az = int(round(2 * math.pi / rig.azimuth_resolution))
    az = rig.pose.yaw + np.arange(n_az) * rig.azimuth_resolution
    el = np.asarray(rig.beam_elevations)
    E, A = np.meshgrid(el, az, indexing="ij")
    dirs = np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=-1).reshape(-1, 3)
    origin = np.array([rig.pose.x, rig.pose.y, rig.mount_height])
    return origin, dirs


def simulate_lidar(scene: Scene, rig: SensorRig) -> tuple[np.ndarray, np.ndarray]:
    """Ray-cast point cloud in the sensor frame plus per-point box labels."""
    boxes = scene.boxes3d()
    if len(boxes) == 0:
        return np.zeros((0, 4)), np.zeros(0, dtype=np.int64)
    origin, dirs = lidar_rays(rig)
    t, idx = cast_rays(origin, dirs, boxes, rig.max_range)
    hit = np.isfinite(t)
    pts = origin + t[hit, None] * dirs[hit]
    local_xy = _rotate(pts[:, :2] - [rig.pose.x, rig.pose.y], -rig.pose.yaw)
    cloud = np.column_stack([local_xy, pts[:, 2] - rig.mount_height, 1.0 / t[hit]])
    return cloud, idx[hit]


def camera_to_world_rotation(pose: Pose, pitch: float) -> np.ndarray:
    """Columns are the camera's forward, left and up axes in world coordinates."""
    cy, sy = math.cos(pose.yaw), math.sin(pose.yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    forward = np.array([cp * cy, cp * sy, -sp])
    left = np.array([-sy, cy, 0.0])
    up = np.array([sp * cy, sp * sy, cp])
    return np.stack([forward, left, up], axis=1)


def simulate_camera(scene: Scene, rig: SensorRig) -> np.ndarray:
    """Inverse-depth render (height, width); background is 0.

    Each pixel center casts a ray whose camera-forward component is 1, so the
    hit parameter is the depth and the nearest box wins the pixel.
    """
    cam = rig.camera
    img = np.zeros((cam.height, cam.width))
    boxes = scene.boxes3d()
    if len(boxes) == 0:
        return img
    u = np.arange(cam.width) + 0.5
    v = np.arange(cam.height) + 0.5
    V, U = np.meshgrid(v, u, indexing="ij")
    d_cam = np.stack([np.ones_like(U), (cam.cx - U) / cam.fx, (cam.cy - V) / cam.fy], axis=-1).reshape(-1, 3)
    R = camera_to_world_rotation(rig.pose, cam.pitch)
    dirs = d_cam @ R.T
    origin = np.array([rig.pose.x, rig.pose.y, rig.mount_height])
    t, _ = cast_rays(origin, dirs, boxes, cam.max_depth)
    hit = np.isfinite(t)
    img.reshape(-1)[hit] = 1.0 / t[hit]
    return img


def project_to_camera(points_world: np.ndarray, rig: SensorRig) -> tuple[np.ndarray, np.ndarray]:
    """Pinhole projection of world points; returns (u, v) pixel coords and depth.

    Pixel coordinates are continuous with pixel k covering [k, k+1).
    """
    cam = rig.camera
    R = camera_to_world_rotation(rig.pose, cam.pitch)
    rel = np.asarray(points_world, dtype=np.float64) - [rig.pose.x, rig.pose.y, rig.mount_height]
    c = rel @ R  # forward, left, up
    depth = c[:, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.cx - cam.fx * c[:, 1] / depth
        v = cam.cy - cam.fy * c[:, 2] / depth
    return np.stack([u, v], axis=1), depth


def sense(scene: Scene, rig: SensorRig) -> SensorFrame:
    points, labels = simulate_lidar(scene, rig)
    return SensorFrame(rig.name, points, labels, simulate_camera(scene, rig), rig.pose, rig.mount_height, rig.camera)


# ------------------------------------------------------------ degradation

def degrade_beams(rig: SensorRig, factor: int) -> SensorRig:
    """Keep every ``factor``-th elevation ring, starting from ring 0."""
    if factor < 1 or rig.beams % factor != 0:
        raise ConfigurationError(f"cannot degrade {rig.beams} beams by factor {factor}")
    return replace(rig, beam_elevations=tuple(rig.beam_elevations[::factor]))


def add_noise(target, sigma: float, seed: int):
    """Zero-mean Gaussian perturbation of a :class:`Pose` or a feature array."""
    if sigma < 0:
        raise ConfigurationError(f"noise sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return target
    rng = np.random.default_rng(seed)
    if isinstance(target, Pose):
        dx, dy, dyaw = rng.normal(0.0, sigma, size=3)
        return Pose(target.x + dx, target.y + dy, target.yaw + dyaw)
    arr = np.asarray(target, dtype=np.float64)
    return arr + rng.normal(0.0, sigma, size=arr.shape)


# ------------------------------------------------------------------ files

SCENE_HEADER = "# v2ifuse scene v1"


def save_scene(scene: Scene, path) -> None:
    """Write a scene as text: one record per line.

    ``seed <int>``, ``extent <x0> <x1> <y0> <y1>``, ``occluded <0|1>``, then
    ``object <class> <x> <y> <l> <w> <h>`` and ``occluder <class> ...`` lines.
    """
    lines = [SCENE_HEADER, f"seed {scene.seed}",
             "extent " + " ".join(repr(float(v)) for v in (*scene.x_range, *scene.y_range)),
             f"occluded {int(scene.occluded)}"]
    for kind, boxes in (("object", scene.objects), ("occluder", scene.occluders)):
        for b in boxes:
            lines.append(f"{kind} {b.cls} " + " ".join(repr(float(v)) for v in (b.cx, b.cy, b.length, b.width, b.height)))
    Path(path).write_text("\n".join(lines) + "\n")


def load_scene(path) -> Scene:
    seed, extent, occluded = 0, (0.0, 32.0, -16.0, 16.0), False
    objects, occluders = [], []
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, *rest = line.split()
        try:
            if key == "seed":
                seed = int(rest[0])
            elif key == "extent":
                extent = tuple(float(v) for v in rest[:4])
            elif key == "occluded":
                occluded = bool(int(rest[0]))
            elif key in ("object", "occluder"):
                box = Box(*(float(v) for v in rest[1:6]), cls=rest[0])
                (objects if key == "object" else occluders).append(box)
            else:
                raise ValueError(f"unknown record {key!r}")
        except (IndexError, ValueError, TypeError) as exc:
            raise ConfigurationError(f"{path}:{n}: bad scene record: {exc}") from None
    return Scene(seed, tuple(objects), tuple(occluders), extent[:2], extent[2:], occluded)
