"""Voxel-wise camera fusion and feature offset correction.

Each voxel queries a pyramid of image features through deformable
cross-attention anchored at the voxel's projection into the camera; the
per-scale results are concatenated and mixed by a linear head.  The offset
correction module then gates voxel and fused features against each other.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError
from .scenario import CameraModel, SensorRig, project_to_camera
from .tensor import (Parameter, Tensor, bilinear_sample, concat, init_weight, linear, maxpool2d, mul,
                     reshape, sigmoid, softmax, transpose)


@dataclass
class MultiScaleImageFeatures:
    scales: list[Tensor]

    def __len__(self):
        return len(self.scales)


INV_DEPTH_SCALE = 10.0  # 1/depth of a voxel 10 m ahead maps to 1


@dataclass
class ReferencePoints:
    """Continuous image-plane projections of voxel centers.

    ``pixels`` are (u, v) in input-image pixels with pixel k covering
    [k, k+1).  Invalid rows (behind the camera or outside the image) keep
    their raw projection for inspection but are never sampled.
    """

    pixels: np.ndarray
    valid: np.ndarray
    downsample: int = 4
    depth: np.ndarray | None = None  # camera-forward distance of each voxel center

    def position_features(self) -> np.ndarray:
        """(n, 1) scaled inverse depth; zero for invalid rows or when depth is unknown."""
        if self.depth is None:
            return np.zeros((len(self.valid), 1))
        inv = np.where(self.valid, INV_DEPTH_SCALE / np.where(self.valid, self.depth, 1.0), 0.0)
        return inv[:, None]

    def at_scale(self, i: int) -> np.ndarray:
        """Sampling coordinates on scale ``i`` (1-based) feature maps; invalid rows are zeroed."""
        stride = self.downsample * 2 ** (i - 1)
        pts = self.pixels / stride - 0.5
        return np.where(self.valid[:, None], pts, 0.0)


def build_scales(F_img_ori, num_scales: int) -> MultiScaleImageFeatures:
    """Scale 1 is the input; scale i is 2x2/stride-2 max pooling applied i-1 times."""
    if num_scales < 1:
        raise ConfigurationError(f"num_scales must be >= 1, got {num_scales}")
    F = F_img_ori if isinstance(F_img_ori, Tensor) else Tensor(F_img_ori)
    scales = [F]
    for i in range(1, num_scales):
        if min(scales[-1].shape[1:]) < 2:
            raise ConfigurationError(f"cannot pool {F.shape} down to {num_scales} scales")
        scales.append(maxpool2d(scales[-1], 2, 2))
    return MultiScaleImageFeatures(scales)


def flatten_voxels(F_voxel) -> Tensor:
    """(c, z, h, w) -> (z*h*w, c), row-major over (z, h, w)."""
    F = F_voxel if isinstance(F_voxel, Tensor) else Tensor(F_voxel)
    c = F.shape[0]
    return reshape(transpose(F, (1, 2, 3, 0)), (-1, c))


def unflatten_voxels(rows, shape: tuple) -> Tensor:
    """Inverse of :func:`flatten_voxels` for a (c, z, h, w) ``shape``."""
    c, z, h, w = shape
    return transpose(reshape(rows, (z, h, w, c)), (3, 0, 1, 2))


def compute_reference_points(centers: np.ndarray, rig: SensorRig, downsample: int = 4,
                             min_depth: float = 0.1) -> ReferencePoints:
    """Project global voxel centers through the rig's pinhole camera."""
    pix, depth = project_to_camera(centers, rig)
    cam: CameraModel = rig.camera
    valid = ((depth > min_depth) & (pix[:, 0] >= 0) & (pix[:, 0] < cam.width)
             & (pix[:, 1] >= 0) & (pix[:, 1] < cam.height))
    pix = np.where(np.isfinite(pix), pix, 0.0)
    return ReferencePoints(pix, valid, downsample, np.where(np.isfinite(depth), depth, 0.0))


# ------------------------------------------------------------------ params

def init_attention_params(rng: np.random.Generator, channels: int, num_scales: int, J: int) -> dict[str, Parameter]:
    """Offsets start at zero so sampling begins on the reference point.

    The output head also starts at zero: the fused map is then zero and the
    camera branch joins only as training moves the head.
    """
    if J < 1:
        raise ConfigurationError(f"J must be >= 1, got {J}")
    p = {"vwf.pos.W": init_weight(rng, 1, (1, channels), "vwf.pos.W")}
    for i in range(1, num_scales + 1):
        p[f"vwf.s{i}.off.W"] = Parameter(np.zeros((channels, 2 * J)), f"vwf.s{i}.off.W")
        p[f"vwf.s{i}.off.b"] = Parameter(np.zeros(2 * J), f"vwf.s{i}.off.b")
        p[f"vwf.s{i}.att.W"] = init_weight(rng, channels, (channels, J), f"vwf.s{i}.att.W")
        p[f"vwf.s{i}.att.b"] = Parameter(np.zeros(J), f"vwf.s{i}.att.b")
        for k in range(J):
            p[f"vwf.s{i}.value{k}"] = init_weight(rng, channels, (channels, channels), f"vwf.s{i}.value{k}")
    p["vwf.out.W"] = Parameter(np.zeros((num_scales * channels, channels)), "vwf.out.W")
    p["vwf.out.b"] = Parameter(np.zeros(channels), "vwf.out.b")
    return p


def init_focm_params(rng: np.random.Generator, channels: int) -> dict[str, Parameter]:
    """The head starts as two stacked identities, so F_oc begins as the gated sum of both inputs."""
    eye = np.eye(channels)
    return {
        "focm.gen.W": init_weight(rng, channels, (channels, 1), "focm.gen.W"),
        "focm.gen.b": Parameter(np.zeros(1), "focm.gen.b"),
        "focm.out.W": Parameter(np.vstack([eye, eye]), "focm.out.W"),
        "focm.out.b": Parameter(np.zeros(channels), "focm.out.b"),
    }


def num_samples(params: dict, scale: int = 1) -> int:
    return params[f"vwf.s{scale}.att.b"].shape[0]


# ---------------------------------------------------------------- attention

def attention_weights(queries, params: dict, scale: int) -> Tensor:
    """Softmax over the J samples of the query-predicted logits, (n, J)."""
    return softmax(linear(queries, params[f"vwf.s{scale}.att.W"], params[f"vwf.s{scale}.att.b"]), axis=1)


def sampling_offsets(queries, params: dict, scale: int) -> Tensor:
    """Pixel offsets predicted from the query, (n, J, 2)."""
    J = num_samples(params, scale)
    off = linear(queries, params[f"vwf.s{scale}.off.W"], params[f"vwf.s{scale}.off.b"])
    return reshape(off, (-1, J, 2))


def deformable_cross_attention(queries, imgs: MultiScaleImageFeatures, refs: ReferencePoints,
                               params: dict) -> list[Tensor]:
    """Per-scale sum over k of A_k * W_k * F(P + dP_k); returns one (n, c) tensor per scale.

    Offsets and weights are predicted from the query plus a learned embedding
    of the voxel's inverse camera depth, so the module knows how far away the
    voxel is when it reads the image.  Rows with an invalid reference point
    pass the query through unchanged.
    """
    q = queries if isinstance(queries, Tensor) else Tensor(queries)
    n, c = q.shape
    if len(refs.valid) != n:
        raise DimensionError(f"{n} queries but {len(refs.valid)} reference points")
    J = num_samples(params)
    if J < 1:
        raise ConfigurationError("J must be >= 1")
    valid = refs.valid.astype(np.float64)[:, None]
    qp = q + linear(refs.position_features(), params["vwf.pos.W"]) if "vwf.pos.W" in params else q
    outputs = []
    for i, F in enumerate(imgs.scales, start=1):
        A = attention_weights(qp, params, i)
        off = sampling_offsets(qp, params, i)
        base = refs.at_scale(i)[:, None, :]
        pts = reshape(off + base, (n * J, 2))
        samples = reshape(bilinear_sample(F, pts), (n, J, c))
        out = None
        for k in range(J):
            term = mul(A[:, k:k + 1], linear(samples[:, k, :], params[f"vwf.s{i}.value{k}"]))
            out = term if out is None else out + term
        outputs.append(out * valid + q * (1.0 - valid))
    return outputs


def vwf_fuse(per_scale: list, params: dict, shape: tuple) -> Tensor:
    """Concatenate per-scale rows along channels, apply the output linear head,
    and restore the (c, z, h, w) voxel layout."""
    W = params["vwf.out.W"]
    c = shape[0]
    if W.shape[0] != len(per_scale) * c:
        raise ConfigurationError(f"fusion head expects {W.shape[0] // c} scales, got {len(per_scale)}")
    cat = concat(per_scale, axis=1)
    return unflatten_voxels(linear(cat, W, params["vwf.out.b"]), shape)


def voxel_wise_fusion(F_voxel: Tensor, F_img_ori: Tensor, refs: ReferencePoints, params: dict,
                      num_scales: int) -> Tensor:
    imgs = build_scales(F_img_ori, num_scales)
    per_scale = deformable_cross_attention(flatten_voxels(F_voxel), imgs, refs, params)
    return vwf_fuse(per_scale, params, F_voxel.shape)


# ------------------------------------------------------------ offset correction

def focm_gate(F, params: dict) -> Tensor:
    """Per-cell scalar weight in [0, 1] from the shared generator, (n, 1)."""
    return sigmoid(linear(F, params["focm.gen.W"], params["focm.gen.b"]))


def focm(F_voxel, F_fused, params: dict) -> Tensor:
    """W_oc [F_voxel * g(F_fused) , F_fused * g(F_voxel)] + B_oc with a shared gate g."""
    Fv = F_voxel if isinstance(F_voxel, Tensor) else Tensor(F_voxel)
    Ff = F_fused if isinstance(F_fused, Tensor) else Tensor(F_fused)
    if Fv.shape != Ff.shape:
        raise DimensionError(f"focm: voxel features {Fv.shape} vs fused features {Ff.shape}")
    rv, rf = flatten_voxels(Fv), flatten_voxels(Ff)
    w_voxel = focm_gate(rv, params)
    w_fused = focm_gate(rf, params)
    cat = concat([rv * w_fused, rf * w_voxel], axis=1)
    return unflatten_voxels(linear(cat, params["focm.out.W"], params["focm.out.b"]), Fv.shape)
