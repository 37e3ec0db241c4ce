"""Sensor encoders: voxelization, pillar embedding, image CNN, frame changes."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError
from .scenario import Pose
from .tensor import Parameter, Tensor, bilinear_sample, conv2d, init_weight, linear, relu, transpose

N_STATS = 5  # count, mean dx, mean dy, mean dz, mean intensity


@dataclass(frozen=True)
class GridSpec:
    x_range: tuple[float, float] = (0.0, 32.0)
    y_range: tuple[float, float] = (-16.0, 16.0)
    cell_size: float = 0.5
    height_bins: int = 1
    channels: int = 16
    z_range: tuple[float, float] = (0.0, 4.0)

    def __post_init__(self):
        if self.cell_size <= 0:
            raise ConfigurationError(f"cell_size must be positive, got {self.cell_size}")
        for name, (lo, hi) in (("x_range", self.x_range), ("y_range", self.y_range)):
            n = (hi - lo) / self.cell_size
            if hi <= lo or abs(n - round(n)) > 1e-9:
                raise ConfigurationError(f"{name} ({lo}, {hi}) is not a whole number of {self.cell_size} m cells")
        if self.height_bins < 1 or self.channels < 1:
            raise ConfigurationError("height_bins and channels must be >= 1")

    @property
    def h(self) -> int:
        return int(round((self.y_range[1] - self.y_range[0]) / self.cell_size))

    @property
    def w(self) -> int:
        return int(round((self.x_range[1] - self.x_range[0]) / self.cell_size))

    @property
    def z_size(self) -> float:
        return (self.z_range[1] - self.z_range[0]) / self.height_bins

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """(h, w) arrays of cell-center x and y coordinates."""
        xs = self.x_range[0] + (np.arange(self.w) + 0.5) * self.cell_size
        ys = self.y_range[0] + (np.arange(self.h) + 0.5) * self.cell_size
        return np.meshgrid(xs, ys)

    def voxel_centers(self, pillar_height: float | None = None) -> np.ndarray:
        """(z*h*w, 3) voxel centers in (z, row, col) order.

        With one height bin, ``pillar_height`` overrides the bin's mid height.
        """
        X, Y = self.cell_centers()
        zc = self.z_range[0] + (np.arange(self.height_bins) + 0.5) * self.z_size
        if self.height_bins == 1 and pillar_height is not None:
            zc = np.array([pillar_height])
        Z = np.broadcast_to(zc[:, None, None], (self.height_bins, self.h, self.w))
        return np.stack([np.broadcast_to(X, Z.shape), np.broadcast_to(Y, Z.shape), Z], axis=-1).reshape(-1, 3)


@dataclass
class VoxelGrid:
    """Per-voxel point statistics, shape (z, h, w, 5)."""

    stats: np.ndarray
    spec: GridSpec

    @property
    def counts(self) -> np.ndarray:
        return self.stats[..., 0]


def _lower_tie_index(u: np.ndarray) -> np.ndarray:
    """Cell index under (lo, hi] intervals; the grid's lower edge maps to 0."""
    idx = np.ceil(u).astype(np.int64) - 1
    return np.where(u == 0, 0, idx)


def voxelize(points: np.ndarray, spec: GridSpec) -> VoxelGrid:
    """Bin global-frame (x, y, z, intensity) points into voxels.

    A point on an interior cell boundary goes to the lower-index cell; points
    outside the closed grid extent are dropped.  Points are sorted before
    accumulation so the result does not depend on input order.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 4)
    zb, h, w = spec.height_bins, spec.h, spec.w
    stats = np.zeros((zb * h * w, N_STATS))
    if len(pts):
        u = (pts[:, 0] - spec.x_range[0]) / spec.cell_size
        v = (pts[:, 1] - spec.y_range[0]) / spec.cell_size
        s = (pts[:, 2] - spec.z_range[0]) / spec.z_size
        keep = (u >= 0) & (u <= w) & (v >= 0) & (v <= h) & (s >= 0) & (s <= zb)
        pts, u, v, s = pts[keep], u[keep], v[keep], s[keep]
        col, row, zi = _lower_tie_index(u), _lower_tie_index(v), _lower_tie_index(s)
        flat = (zi * h + row) * w + col
        order = np.lexsort((pts[:, 3], pts[:, 2], pts[:, 1], pts[:, 0], flat))
        pts, col, row, zi, flat = pts[order], col[order], row[order], zi[order], flat[order]
        dx = pts[:, 0] - (spec.x_range[0] + (col + 0.5) * spec.cell_size)
        dy = pts[:, 1] - (spec.y_range[0] + (row + 0.5) * spec.cell_size)
        dz = pts[:, 2] - (spec.z_range[0] + (zi + 0.5) * spec.z_size)
        n = zb * h * w
        counts = np.bincount(flat, minlength=n).astype(np.float64)
        occupied = counts > 0
        stats[:, 0] = counts
        for k, vals in enumerate((dx, dy, dz, pts[:, 3]), start=1):
            sums = np.bincount(flat, weights=vals, minlength=n)
            stats[occupied, k] = sums[occupied] / counts[occupied]
    return VoxelGrid(stats.reshape(zb, h, w, N_STATS), spec)


def voxel_inputs(grid: VoxelGrid) -> np.ndarray:
    """Normalized per-voxel statistics (z*h*w, 5); zero rows for empty voxels."""
    st = grid.stats.reshape(-1, N_STATS)
    spec = grid.spec
    return np.column_stack([
        np.log1p(st[:, 0]),
        st[:, 1] / spec.cell_size,
        st[:, 2] / spec.cell_size,
        st[:, 3] / spec.z_size,
        st[:, 4] * 10.0,
    ])


def init_pillar_params(rng: np.random.Generator, channels: int) -> dict[str, Parameter]:
    return {
        "pillar.W": init_weight(rng, N_STATS, (N_STATS, channels), "pillar.W"),
        "pillar.b": Parameter(np.zeros(channels), "pillar.b"),
    }


def pillar_encode(grid: VoxelGrid, params: dict) -> Tensor:
    """Per-voxel linear embedding plus ReLU; returns (c, z, h, w)."""
    W, b = params["pillar.W"], params["pillar.b"]
    spec = grid.spec
    if W.shape[1] != spec.channels:
        raise ConfigurationError(f"pillar encoder emits {W.shape[1]} channels, grid spec wants {spec.channels}")
    x = relu(linear(voxel_inputs(grid), W, b))
    x = x.reshape(spec.height_bins, spec.h, spec.w, spec.channels)
    return transpose(x, (3, 0, 1, 2))


def init_image_params(rng: np.random.Generator, channels: int, hidden: int = 8) -> dict[str, Parameter]:
    return {
        "image.conv1": init_weight(rng, 16, (hidden, 1, 4, 4), "image.conv1"),
        "image.conv2": init_weight(rng, hidden * 16, (channels, hidden, 4, 4), "image.conv2"),
        "image.b2": Parameter(np.zeros(channels), "image.b2"),
    }


def image_encode(image: np.ndarray, params: dict, resolution: tuple[int, int] | None = None) -> Tensor:
    """Two stride-2 convolutions; (H, W) image -> (c, H/4, W/4) features.

    The first convolution has no bias, so a blank image encodes to the
    second layer's bias everywhere.
    """
    image = np.asarray(image, dtype=np.float64)
    if resolution is not None and image.shape != tuple(resolution):
        raise ConfigurationError(f"image resolution {image.shape} != configured {tuple(resolution)}")
    if image.ndim != 2 or image.shape[0] % 4 or image.shape[1] % 4:
        raise ConfigurationError(f"image shape {image.shape} must be 2D with sides divisible by 4")
    x = relu(conv2d(image[None], params["image.conv1"], None, stride=2, padding=1))
    return conv2d(x, params["image.conv2"], params["image.b2"], stride=2, padding=1)


# ---------------------------------------------------------------- frames

def _rot(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s], [s, c]])


def invert_pose(pose: Pose) -> Pose:
    t = -_rot(-pose.yaw) @ np.array([pose.x, pose.y])
    return Pose(float(t[0]), float(t[1]), -pose.yaw)


def to_global_points(points: np.ndarray, pose: Pose, mount_height: float = 0.0) -> np.ndarray:
    """Sensor-frame (x, y, z, ...) rows to the global frame."""
    pts = np.array(points, dtype=np.float64, copy=True)
    if len(pts) == 0:
        return pts.reshape(0, max(pts.shape[-1] if pts.ndim == 2 else 4, 3))
    pts[:, :2] = pts[:, :2] @ _rot(pose.yaw).T + [pose.x, pose.y]
    pts[:, 2] += mount_height
    return pts


def to_local_points(points: np.ndarray, pose: Pose, mount_height: float = 0.0) -> np.ndarray:
    pts = np.array(points, dtype=np.float64, copy=True)
    if len(pts) == 0:
        return pts
    pts[:, :2] = (pts[:, :2] - [pose.x, pose.y]) @ _rot(pose.yaw)
    pts[:, 2] -= mount_height
    return pts


def to_global_features(feature, pose: Pose, spec: GridSpec) -> Tensor:
    """Resample a (c, h, w) BEV map from an agent frame into the global frame.

    Both maps share ``spec``; the agent map's cells are laid out in the
    agent's own coordinates.  Uses bilinear sampling, zero outside.
    """
    X, Y = spec.cell_centers()
    g = np.column_stack([X.ravel(), Y.ravel()])
    local = (g - [pose.x, pose.y]) @ _rot(pose.yaw)
    cols = (local[:, 0] - spec.x_range[0]) / spec.cell_size - 0.5
    rows = (local[:, 1] - spec.y_range[0]) / spec.cell_size - 0.5
    feature = feature if isinstance(feature, Tensor) else Tensor(feature)
    if feature.ndim != 3 or feature.shape[1:] != (spec.h, spec.w):
        raise DimensionError(f"feature shape {feature.shape} does not match grid ({spec.h}, {spec.w})")
    sampled = bilinear_sample(feature, np.column_stack([cols, rows]))
    return transpose(sampled, (1, 0)).reshape(feature.shape)


def to_local_features(feature, pose: Pose, spec: GridSpec) -> Tensor:
    return to_global_features(feature, invert_pose(pose), spec)
