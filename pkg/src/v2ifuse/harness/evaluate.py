"""Scene suite, AP metrics and the suite runner."""

from __future__ import annotations

import hashlib
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..comm import Detection
from ..errors import ConfigurationError, ContractError
from ..kernels import iou_matrix
from ..scenario import Box, Scene, SceneSpec, generate_scene
from ..tensor import no_grad
from .config import ExperimentConfig
from .pipeline import FramePair, FrameResult, encode_agents, run_states, sense_scene

# ------------------------------------------------------------------- scenes


def scene_spec(cfg: ExperimentConfig, occluded: bool = True) -> SceneSpec:
    n_occ = tuple(cfg.scene.n_occluders) if occluded else (0, 0)
    return SceneSpec(n_objects=tuple(cfg.scene.n_objects), n_occluders=n_occ,
                     hidden_per_occluder=cfg.scene.hidden_per_occluder)


def make_scene(seed: int, cfg: ExperimentConfig, occluded: bool) -> Scene:
    return generate_scene(seed, scene_spec(cfg, occluded), occluded=occluded)


def suite_scenes(cfg: ExperimentConfig) -> list[Scene]:
    """Fixed evaluation suite: occluded scenes first, then open ones."""
    s = cfg.suite
    out = [make_scene(s.seed_offset + k, cfg, True) for k in range(s.n_occluded)]
    out += [make_scene(s.seed_offset + s.n_occluded + k, cfg, False) for k in range(s.n_open)]
    return out


def suite_hash(scenes: Sequence[Scene]) -> str:
    """Digest of the scene contents, used to check that rows share a suite."""
    h = hashlib.sha256()
    for sc in scenes:
        h.update(repr((sc.seed, sc.occluded, sc.objects, sc.occluders)).encode())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------- AP

def box_iou(a, b) -> float:
    """IoU of two axis-aligned boxes given as Detection/Box objects or (x0, y0, x1, y1)."""
    ca, cb = _corners(a), _corners(b)
    if ca[2] <= ca[0] or ca[3] <= ca[1] or cb[2] <= cb[0] or cb[3] <= cb[1]:
        raise ContractError("box_iou needs boxes with positive dimensions")
    return float(iou_matrix(ca, cb)[0, 0])


def _corners(box) -> np.ndarray:
    if isinstance(box, Detection):
        return box.corners()
    if isinstance(box, Box):
        return np.asarray(box.corners2d(), dtype=np.float64)
    return np.asarray(box, dtype=np.float64).reshape(4)


def _corner_array(boxes) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, 4))
    return np.stack([_corners(b) for b in boxes])


def evaluate_ap(detections: Sequence[Sequence[Detection]], ground_truth: Sequence[Sequence], iou_thresh: float = 0.5) -> float:
    """All-point interpolated AP over a set of frames.

    Detections are ranked by score (ties: frame index, then cell index) and
    greedily matched to the unmatched ground-truth box of highest IoU at or
    above ``iou_thresh``.
    """
    if len(detections) != len(ground_truth):
        raise ContractError(f"{len(detections)} detection frames vs {len(ground_truth)} ground-truth frames")
    n_gt = sum(len(g) for g in ground_truth)
    if n_gt == 0:
        raise ContractError("AP is undefined without ground-truth boxes")
    entries = [(-d.score, f, d.cell, k) for f, dets in enumerate(detections) for k, d in enumerate(dets)]
    entries.sort()
    gts = [_corner_array(g) for g in ground_truth]
    used = [np.zeros(len(g), dtype=bool) for g in gts]
    dets_c = [_corner_array(d) for d in detections]
    tp = np.zeros(len(entries))
    for r, (_, f, _, k) in enumerate(entries):
        if len(gts[f]) == 0:
            continue
        ious = iou_matrix(dets_c[f][k], gts[f])[0]
        ious = np.where(used[f], -1.0, ious)
        j = int(np.argmax(ious))
        if ious[j] >= iou_thresh:
            used[f][j] = True
            tp[r] = 1.0
    return ap_from_matches(tp, n_gt)


def ap_from_matches(tp: np.ndarray, n_gt: int) -> float:
    """Area under the all-point interpolated PR curve for ranked TP flags."""
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    r = np.concatenate([[0.0], recall, [1.0]])
    p = np.concatenate([[0.0], precision, [0.0]])
    p = np.maximum.accumulate(p[::-1])[::-1]
    steps = np.flatnonzero(r[1:] != r[:-1])
    return float(np.sum((r[steps + 1] - r[steps]) * p[steps + 1]))


# ------------------------------------------------------------------- report

@dataclass
class MetricsReport:
    """Suite metrics: AP at 0.5/0.7 (overall and per split) plus bandwidth."""
    ap50: float
    ap70: float
    ap50_occluded: float
    ap50_open: float
    mean_payload_bytes: float
    mean_log2_bytes: float
    rows: list[dict] = field(default_factory=list)
    suite: str = ""
    label: str = ""

    def __post_init__(self):
        for name in ("ap50", "ap70", "ap50_occluded", "ap50_open"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0) and not math.isnan(v):
                raise ContractError(f"{name}={v} outside [0, 1]")

    def summary(self) -> dict:
        return {k: getattr(self, k) for k in ("label", "suite", "ap50", "ap70", "ap50_occluded", "ap50_open",
                                              "mean_payload_bytes", "mean_log2_bytes")}


def _split_ap(results: Sequence[FrameResult], scenes: Sequence[Scene], thresh: float, which=None) -> float:
    idx = [k for k, sc in enumerate(scenes) if which is None or sc.occluded == which]
    if not idx:
        return float("nan")
    return evaluate_ap([results[k].detections for k in idx], [scenes[k].objects for k in idx], thresh)


def report(results: Sequence[FrameResult], scenes: Sequence[Scene], label: str = "") -> MetricsReport:
    rows = []
    for k, (res, sc) in enumerate(zip(results, scenes)):
        row = res.row()
        row["frame"] = k
        row["gt"] = len(sc.objects)
        row["ap50"] = round(evaluate_ap([res.detections], [sc.objects], 0.5), 6) if sc.objects else float("nan")
        rows.append(row)
    payload = np.array([r.ledger.total_bytes for r in results], dtype=np.float64)
    log2 = np.array([r.ledger.log2_bytes for r in results])
    return MetricsReport(
        ap50=_split_ap(results, scenes, 0.5),
        ap70=_split_ap(results, scenes, 0.7),
        ap50_occluded=_split_ap(results, scenes, 0.5, True),
        ap50_open=_split_ap(results, scenes, 0.5, False),
        mean_payload_bytes=float(payload.mean()) if len(payload) else 0.0,
        mean_log2_bytes=float(log2.mean()) if len(log2) else 0.0,
        rows=rows,
        suite=suite_hash(scenes),
        label=label,
    )


# ------------------------------------------------------------------- runner

def _run_one(args) -> FrameResult:
    cfg, scene, params, frame_id = args
    with no_grad():
        return run_states(*encode_agents(sense_scene(scene, cfg), params, cfg), scene, params, cfg, frame_id)


def run_suite(cfg: ExperimentConfig, params: dict, scenes: Sequence[Scene] | None = None,
              pairs: Sequence[FramePair] | None = None, workers: int = 1, label: str = "") -> MetricsReport:
    """Evaluate ``params`` on every scene; results are ordered by scene index.

    ``pairs`` reuses already sensed frames (they must match the config's rigs).
    With ``workers > 1`` scenes are spread over a process pool; the reduction
    order is the scene order, so the report does not depend on scheduling.
    """
    scenes = list(scenes) if scenes is not None else suite_scenes(cfg)
    if pairs is not None:
        if len(pairs) != len(scenes):
            raise ConfigurationError(f"{len(pairs)} sensed frames for {len(scenes)} scenes")
        with no_grad():
            results = [run_states(*encode_agents(p, params, cfg), sc, params, cfg, k)
                       for k, (p, sc) in enumerate(zip(pairs, scenes))]
    elif workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_run_one, [(cfg, sc, params, k) for k, sc in enumerate(scenes)]))
    else:
        results = [_run_one((cfg, sc, params, k)) for k, sc in enumerate(scenes)]
    return report(results, scenes, label)

