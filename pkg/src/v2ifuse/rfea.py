"""Regional difference map from a corrected BEV feature map.

The map marks cells whose smoothed feature magnitude stands out from their
four neighbors.  It is non-differentiable and only steers communication.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .kernels import neighbor_difference
from .tensor import Tensor, gaussian_filter2d


@dataclass
class RegionalDifferenceMap:
    mask: np.ndarray  # (h, w) uint8 in {0, 1}
    threshold_used: float
    sigma_used: float


def _as_bev(F_oc) -> np.ndarray:
    data = F_oc.data if isinstance(F_oc, Tensor) else np.asarray(F_oc, dtype=np.float64)
    if data.ndim == 4:  # (c, z, h, w): fold height bins into channels
        data = data.reshape(-1, *data.shape[-2:])
    if data.ndim != 3:
        raise ValueError(f"expected a (c, h, w) or (c, z, h, w) map, got {data.shape}")
    return data


def channel_magnitude(F_oc) -> np.ndarray:
    """Per-cell mean of absolute channel values, (h, w)."""
    return np.abs(_as_bev(F_oc)).mean(axis=0)


def feature_difference_matrix(F_oc, sigma: float = 1.0, kernel: int = 3) -> np.ndarray:
    """Pre-threshold difference field: smooth the magnitude, then average the
    absolute differences to the 4-neighbors (zeros beyond the border)."""
    mag = channel_magnitude(F_oc)
    smoothed = gaussian_filter2d(mag[None], sigma, kernel).data[0]
    return neighbor_difference(smoothed)


def regional_difference_map(F_oc, sigma: float = 1.0, kernel: int = 3, threshold: float = 0.1) -> RegionalDifferenceMap:
    """Binary map: 1 where the difference field is strictly above ``threshold``."""
    if not threshold > 0:
        raise ConfigurationError(f"difference threshold must be positive, got {threshold}")
    diff = feature_difference_matrix(F_oc, sigma, kernel)
    return RegionalDifferenceMap((diff > threshold).astype(np.uint8), float(threshold), float(sigma))
