"""Collaboration protocol: masks, sparse messages, bandwidth, fusion, decoding.

Masks are ``uint8`` arrays of shape (h, w) holding 0/1.  The wire format of a
:class:`CollabMessage` is little-endian::

    offset  size          field
    0       4             magic b"CCM1"
    4       4             h            (uint32)
    8       4             w            (uint32)
    12      4             c            (uint32)
    16      4             n selected   (uint32)
    20      4             sender id    (uint32)
    24      8             frame id     (uint64)
    32      ceil(h*w/8)   selection mask bits, row-major, LSB first
    ...     4 * n         selected flat cell indices (uint32, increasing)
    ...     4 * n * c     feature values (float32, cell-major)
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .encoders import GridSpec
from .errors import ConfigurationError, DecodeError, DimensionError
from .kernels import nms
from .tensor import (Parameter, Tensor, bce_with_logits, concat, conv2d, init_weight, linear, relu,
                     reshape, smooth_l1, softmax, transpose, tsum)

HEADER = struct.Struct("<4sIIIIIQ")
MAGIC = b"CCM1"
BYTES_PER_VALUE = 4

# ------------------------------------------------------------------ masks


def _mask(m) -> np.ndarray:
    return (np.asarray(m) != 0).astype(np.uint8)


def _same_dims(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what}: mask shapes {a.shape} and {b.shape} differ")


def confidence_map(M_s, M_d, mode: str = "or") -> np.ndarray:
    """Combine score and difference maps; ``mode`` is ``"or"`` (default) or ``"and"``."""
    M_s, M_d = _mask(M_s), _mask(M_d)
    _same_dims(M_s, M_d, "confidence_map")
    if mode == "or":
        return M_s | M_d
    if mode == "and":
        return M_s & M_d
    raise ConfigurationError(f"unknown confidence combination {mode!r}")


def request_map(M_sd) -> np.ndarray:
    return (1 - _mask(M_sd)).astype(np.uint8)


def selection_mask(M_re_local, M_sd_remote, mode: str = "xnor") -> np.ndarray:
    """Cells the remote agent may send.  ``xnor``: bits equal; ``and``: both set."""
    a, b = _mask(M_re_local), _mask(M_sd_remote)
    _same_dims(a, b, "selection_mask")
    if mode == "xnor":
        return (1 - (a ^ b)).astype(np.uint8)
    if mode == "and":
        return a & b
    raise ConfigurationError(f"unknown selection rule {mode!r}")


# ---------------------------------------------------------------- messages

@dataclass
class CollabMessage:
    h: int
    w: int
    c: int
    mask: np.ndarray  # (h, w) uint8 selection mask
    indices: np.ndarray  # (n,) uint32 flat cell indices, strictly increasing
    values: np.ndarray  # (n, c) float32
    sender_id: int = 0
    frame_id: int = 0

    @property
    def count(self) -> int:
        return len(self.indices)

    @property
    def payload_bytes(self) -> int:
        return self.count * self.c * BYTES_PER_VALUE

    @property
    def wire_bytes(self) -> int:
        return HEADER.size + math.ceil(self.h * self.w / 8) + 4 * self.count + self.payload_bytes

    def densify(self) -> np.ndarray:
        """(c, h, w) float64 map with the received features and zeros elsewhere."""
        dense = np.zeros((self.h * self.w, self.c))
        dense[self.indices.astype(np.int64)] = self.values
        return dense.T.reshape(self.c, self.h, self.w)

    def __eq__(self, other):
        if not isinstance(other, CollabMessage):
            return NotImplemented
        return ((self.h, self.w, self.c, self.sender_id, self.frame_id)
                == (other.h, other.w, other.c, other.sender_id, other.frame_id)
                and np.array_equal(self.mask, other.mask) and np.array_equal(self.indices, other.indices)
                and self.values.tobytes() == other.values.tobytes())


def _bev(F) -> np.ndarray:
    data = F.data if isinstance(F, Tensor) else np.asarray(F, dtype=np.float64)
    return data.reshape(-1, *data.shape[-2:])


def select_features(F_oc_remote, M_re_local, M_sd_remote, mode: str = "xnor",
                    sender_id: int = 0, frame_id: int = 0) -> CollabMessage:
    """Sparse message holding remote features on the selected cells.

    Cells whose float32 feature vector is all zero are dropped even when
    selected; the selection mask itself travels in full.
    """
    F = _bev(F_oc_remote)
    c, h, w = F.shape
    S = selection_mask(M_re_local, M_sd_remote, mode)
    if S.shape != (h, w):
        raise DimensionError(f"select_features: masks {S.shape} vs features {(h, w)}")
    values = F.reshape(c, -1).T.astype(np.float32)
    keep = (S.reshape(-1) == 1) & np.any(values != 0, axis=1)
    idx = np.flatnonzero(keep).astype(np.uint32)
    return CollabMessage(h, w, c, S, idx, np.ascontiguousarray(values[idx]), sender_id, frame_id)


def serialize(msg: CollabMessage) -> bytes:
    if msg.count and (np.any(np.diff(msg.indices.astype(np.int64)) <= 0)):
        raise ValueError("message indices must be strictly increasing")
    head = HEADER.pack(MAGIC, msg.h, msg.w, msg.c, msg.count, msg.sender_id, msg.frame_id)
    bits = np.packbits(_mask(msg.mask).reshape(-1), bitorder="little").tobytes()
    idx = np.asarray(msg.indices, dtype="<u4").tobytes()
    vals = np.asarray(msg.values, dtype="<f4").reshape(-1).tobytes()
    return head + bits + idx + vals


def deserialize(data: bytes) -> CollabMessage:
    data = bytes(data)
    if len(data) < HEADER.size:
        raise DecodeError(f"truncated header: need {HEADER.size} bytes, have {len(data)}", len(data))
    magic, h, w, c, n, sender, frame = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise DecodeError(f"bad magic {magic!r}", 0)
    off = HEADER.size
    mb = math.ceil(h * w / 8)
    need = off + mb + 4 * n + 4 * n * c
    if len(data) < need:
        raise DecodeError(f"truncated message: expected {need} bytes, have {len(data)}", len(data))
    if len(data) > need:
        raise DecodeError(f"{len(data) - need} trailing bytes", need)
    bits = np.unpackbits(np.frombuffer(data, np.uint8, mb, off), bitorder="little")
    if np.any(bits[h * w:]):
        raise DecodeError("nonzero padding bits in mask", off + mb - 1)
    mask = bits[:h * w].reshape(h, w).astype(np.uint8)
    off += mb
    idx = np.frombuffer(data, "<u4", n, off).astype(np.uint32)
    if n:
        bad = np.flatnonzero(idx >= h * w)
        if len(bad):
            raise DecodeError(f"cell index {idx[bad[0]]} outside {h}x{w} grid", off + 4 * int(bad[0]))
        bad = np.flatnonzero(np.diff(idx.astype(np.int64)) <= 0)
        if len(bad):
            raise DecodeError("cell indices not strictly increasing", off + 4 * (int(bad[0]) + 1))
        bad = np.flatnonzero(mask.reshape(-1)[idx] == 0)
        if len(bad):
            raise DecodeError(f"cell {idx[bad[0]]} sent but not selected", off + 4 * int(bad[0]))
    off += 4 * n
    vals = np.frombuffer(data, "<f4", n * c, off).astype(np.float32).reshape(n, c)
    return CollabMessage(h, w, c, mask, idx, vals, sender, frame)


def save_message(msg: CollabMessage, path) -> Path:
    path = Path(path)
    if path.suffix != ".ccm":
        path = path.with_suffix(".ccm")
    path.write_bytes(serialize(msg))
    return path


def load_message(path) -> CollabMessage:
    return deserialize(Path(path).read_bytes())


# --------------------------------------------------------------- bandwidth

@dataclass(frozen=True)
class BandwidthLedger:
    """Cumulative feature-payload bytes (headline metric) and on-wire bytes."""

    per_message: tuple[int, ...] = ()
    total_bytes: int = 0
    wire_bytes: int = 0

    @property
    def log2_bytes(self) -> float:
        return math.log2(self.total_bytes) if self.total_bytes > 0 else 0.0


def comm_cost(ledger: BandwidthLedger, msg: CollabMessage) -> BandwidthLedger:
    return replace(ledger, per_message=ledger.per_message + (msg.payload_bytes,),
                   total_bytes=ledger.total_bytes + msg.payload_bytes,
                   wire_bytes=ledger.wire_bytes + msg.wire_bytes)


def full_map_bytes(h: int, w: int, c: int) -> int:
    return h * w * c * BYTES_PER_VALUE


def full_map_log2(h: int, w: int, c: int) -> float:
    return math.log2(full_map_bytes(h, w, c))


# ---------------------------------------------------------- message fusion

def init_message_fusion_params(rng: np.random.Generator, channels: int) -> dict[str, Parameter]:
    """Value projection starts at identity so received zeros leave local features intact."""
    return {
        "sa.Wq": init_weight(rng, channels, (channels, channels), "sa.Wq"),
        "sa.Wk": init_weight(rng, channels, (channels, channels), "sa.Wk"),
        "sa.Wv": Parameter(np.eye(channels), "sa.Wv"),
        "sa.local_bias": Parameter(np.zeros(1), "sa.local_bias"),
    }


def _rows(F) -> Tensor:
    F = F if isinstance(F, Tensor) else Tensor(F)
    F = reshape(F, (-1, F.shape[-2] * F.shape[-1]))
    return transpose(F, (1, 0))


def message_attention(F_comm_dense, F_oc_local, params: dict) -> Tensor:
    """Per-cell attention of the local token over (remote, local), (h*w, 2)."""
    remote, local = _rows(F_comm_dense), _rows(F_oc_local)
    c = local.shape[1]
    q = linear(local, params["sa.Wq"])
    scale = 1.0 / math.sqrt(c)
    s_r = tsum(q * linear(remote, params["sa.Wk"]), axis=1, keepdims=True) * scale
    s_l = tsum(q * linear(local, params["sa.Wk"]), axis=1, keepdims=True) * scale + params["sa.local_bias"]
    return softmax(concat([s_r, s_l], axis=1), axis=1)


def fuse_messages(F_comm_dense, F_oc_local, params: dict) -> Tensor:
    """Two-token self-attention per BEV cell; returns the local token's output."""
    Fr = F_comm_dense if isinstance(F_comm_dense, Tensor) else Tensor(F_comm_dense)
    Fl = F_oc_local if isinstance(F_oc_local, Tensor) else Tensor(F_oc_local)
    if Fr.shape != Fl.shape:
        raise DimensionError(f"fuse_messages: remote {Fr.shape} vs local {Fl.shape}")
    A = message_attention(Fr, Fl, params)
    v_r = linear(_rows(Fr), params["sa.Wv"])
    v_l = linear(_rows(Fl), params["sa.Wv"])
    out = A[:, 0:1] * v_r + A[:, 1:2] * v_l
    return reshape(transpose(out, (1, 0)), Fl.shape)


# ------------------------------------------------------------------ decoder

N_OUT = 5  # class logit, dx, dy, log length, log width
PRIOR_LOGIT = -3.5  # about the weighted positive rate of a toy scene; keeps early training from zeroing features
MEAN_LOG_SIZE = (1.25, 0.55)  # log of a typical 3.5 x 1.75 m car


@dataclass(frozen=True)
class Detection:
    score: float
    x: float
    y: float
    length: float
    width: float
    cell: int = -1

    def corners(self) -> np.ndarray:
        return np.array([self.x - self.length / 2, self.y - self.width / 2,
                         self.x + self.length / 2, self.y + self.width / 2])


def init_decoder_params(rng: np.random.Generator, in_channels: int, hidden: int = 16, kernel: int = 5) -> dict[str, Parameter]:
    head_b = np.array([PRIOR_LOGIT, 0.0, 0.0, *MEAN_LOG_SIZE])
    return {
        "dec.conv1.W": init_weight(rng, in_channels * kernel * kernel, (hidden, in_channels, kernel, kernel), "dec.conv1.W"),
        "dec.conv1.b": Parameter(np.zeros(hidden), "dec.conv1.b"),
        "dec.conv2.W": init_weight(rng, hidden * kernel * kernel, (hidden, hidden, kernel, kernel), "dec.conv2.W"),
        "dec.conv2.b": Parameter(np.zeros(hidden), "dec.conv2.b"),
        "dec.head.W": init_weight(rng, hidden, (hidden, N_OUT), "dec.head.W"),
        "dec.head.b": Parameter(head_b, "dec.head.b"),
    }


def decoder_forward(F, params: dict) -> Tensor:
    """Raw per-cell outputs (5, h, w): two context convolutions, then a per-cell linear head."""
    F = F if isinstance(F, Tensor) else Tensor(F)
    if F.ndim == 4:
        F = reshape(F, (-1, *F.shape[-2:]))
    k = params["dec.conv1.W"].shape[-1]
    x = relu(conv2d(F, params["dec.conv1.W"], params["dec.conv1.b"], padding=k // 2))
    x = relu(conv2d(x, params["dec.conv2.W"], params["dec.conv2.b"], padding=k // 2))
    h, w = x.shape[1:]
    y = linear(transpose(reshape(x, (x.shape[0], h * w)), (1, 0)), params["dec.head.W"], params["dec.head.b"])
    return reshape(transpose(y, (1, 0)), (N_OUT, h, w))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


def confidence(F, params: dict) -> np.ndarray:
    """Per-cell class probability from the shared decoder, (h, w)."""
    return _sigmoid(decoder_forward(F, params).data[0])


def score_map(F_oc, params: dict, score_threshold: float = 0.5) -> np.ndarray:
    """1 where decoder confidence >= threshold."""
    return (confidence(F_oc, params) >= score_threshold).astype(np.uint8)


def score_map_from_logits(logits: np.ndarray, score_threshold: float = 0.5) -> np.ndarray:
    return (_sigmoid(logits) >= score_threshold).astype(np.uint8)


def decode_raw(raw: np.ndarray, spec: GridSpec, det_threshold: float = 0.5, nms_iou: float = 0.5) -> list[Detection]:
    """Turn raw (5, h, w) outputs into NMS-filtered detections."""
    raw = np.asarray(raw, dtype=np.float64)
    prob = _sigmoid(raw[0]).reshape(-1)
    cand = np.flatnonzero(prob >= det_threshold)
    if len(cand) == 0:
        return []
    X, Y = spec.cell_centers()
    reg = raw[1:].reshape(4, -1)[:, cand]
    xs = X.reshape(-1)[cand] + reg[0] * spec.cell_size
    ys = Y.reshape(-1)[cand] + reg[1] * spec.cell_size
    ls = np.exp(np.clip(reg[2], -6.0, 6.0))
    ws = np.exp(np.clip(reg[3], -6.0, 6.0))
    corners = np.column_stack([xs - ls / 2, ys - ws / 2, xs + ls / 2, ys + ws / 2])
    scores = prob[cand]
    order = np.lexsort((cand, -scores))
    keep = nms(corners, order, nms_iou)
    return [Detection(float(scores[i]), float(xs[i]), float(ys[i]), float(ls[i]), float(ws[i]), int(cand[i]))
            for i in keep]


def decode(F, params: dict, spec: GridSpec, det_threshold: float = 0.5, nms_iou: float = 0.5) -> list[Detection]:
    return decode_raw(decoder_forward(F, params).data, spec, det_threshold, nms_iou)


# ------------------------------------------------------------------ targets

@dataclass
class Targets:
    positive: np.ndarray  # (h, w) float 0/1
    regression: np.ndarray  # (4, h, w): dx, dy (cells), log length, log width


def rasterize(boxes, spec: GridSpec) -> Targets:
    """A cell is positive iff a box center falls in it (first box wins a shared cell)."""
    pos = np.zeros((spec.h, spec.w))
    reg = np.zeros((4, spec.h, spec.w))
    X, Y = spec.cell_centers()
    for b in boxes:
        col = int(np.floor((b.cx - spec.x_range[0]) / spec.cell_size))
        row = int(np.floor((b.cy - spec.y_range[0]) / spec.cell_size))
        if not (0 <= col < spec.w and 0 <= row < spec.h) or pos[row, col]:
            continue
        pos[row, col] = 1.0
        reg[:, row, col] = [(b.cx - X[row, col]) / spec.cell_size, (b.cy - Y[row, col]) / spec.cell_size,
                            math.log(b.length), math.log(b.width)]
    return Targets(pos, reg)


def ideal_raw(targets: Targets, logit: float = 20.0) -> np.ndarray:
    """Raw decoder outputs that reproduce ``targets`` exactly."""
    raw = np.empty((N_OUT, *targets.positive.shape))
    raw[0] = np.where(targets.positive > 0, logit, -logit)
    raw[1:] = targets.regression
    return raw


def detection_loss(raw, targets: Targets, pos_weight: float = 20.0, reg_weight: float = 1.0) -> Tensor:
    """Weighted BCE averaged over cells plus smooth-L1 regression averaged over positive cells."""
    raw = raw if isinstance(raw, Tensor) else Tensor(raw)
    hw = targets.positive.size
    flat = reshape(raw, (N_OUT, hw))
    y = targets.positive.reshape(-1)
    cls = tsum(bce_with_logits(flat[0], y, pos_weight)) * (1.0 / hw)
    pos = np.flatnonzero(y > 0)
    if len(pos) == 0:
        return cls
    pred = flat[1:, pos]
    tgt = targets.regression.reshape(4, hw)[:, pos]
    reg = tsum(smooth_l1(pred - tgt)) * (1.0 / len(pos))
    return cls + reg * reg_weight
