"""Ablation matrix, degradation trend and bandwidth-utility experiments.

Rows are configs that differ only in mode flags (and the degradation factor
for the trend runs).  Every row is trained from the same seed on the same
training scenes and evaluated on the same suite; trained parameters are cached
per distinct config so rows that coincide are trained once.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..comm import full_map_bytes, request_map, select_features
from ..tensor import no_grad
from .config import ExperimentConfig
from .evaluate import MetricsReport, report, suite_hash, suite_scenes
from .pipeline import AgentState, encode_agents, grid_spec, remask, run_states, sense_scene
from .train import train_toy, training_factors, training_frames

OFF = {"modes.camera": False, "modes.vwf": False, "modes.focm": False, "modes.rfea": False}

# Table-2 style rows: LiDAR-only collaboration baseline, then modules added in order
ABLATION_ROWS: dict[str, dict] = {
    "baseline": dict(OFF),
    "+VWF": {**OFF, "modes.camera": True, "modes.vwf": True},
    "+VWF+FOCM": {**OFF, "modes.camera": True, "modes.vwf": True, "modes.focm": True},
    "+all": {},
}

NO_COLLAB = {"modes.collaboration": False, "modes.rfea": False}


def _key(cfg: ExperimentConfig) -> str:
    d = cfg.to_dict()
    d.pop("output")
    d.pop("protocol")  # thresholds only act at inference
    if d["training"]["degrade_factors"]:
        d["sensors"].pop("degrade_factor")  # the model is trained across factors
    return json.dumps(d, sort_keys=True)


@dataclass
class Lab:
    """Shared state for a batch of experiments: scenes, sensed frames, trained params."""
    base: ExperimentConfig
    log: Callable[[str], None] | None = None
    workers: int = 1
    _params: dict = field(default_factory=dict)
    _frames: dict = field(default_factory=dict)
    _suite: dict = field(default_factory=dict)

    def say(self, msg: str) -> None:
        if self.log is not None:
            self.log(msg)

    def _sensors_key(self, cfg: ExperimentConfig) -> tuple:
        return (cfg.sensors.vehicle_beams, cfg.sensors.degrade_factor)

    def train_frames(self, cfg: ExperimentConfig):
        k = (cfg.sensors.vehicle_beams, training_factors(cfg))
        if k not in self._frames:
            self._frames[k] = training_frames(cfg)
        return self._frames[k]

    def suite(self, cfg: ExperimentConfig):
        k = self._sensors_key(cfg)
        if k not in self._suite:
            scenes = suite_scenes(cfg)
            self._suite[k] = (scenes, [sense_scene(sc, cfg) for sc in scenes])
        return self._suite[k]

    def params(self, cfg: ExperimentConfig, label: str = "") -> dict:
        k = _key(cfg)
        if k not in self._params:
            self.say(f"training {label or 'row'} ({cfg.training.steps} steps)")
            self._params[k] = train_toy(cfg, self.train_frames(cfg)).params
        return self._params[k]

    def states(self, cfg: ExperimentConfig, params: dict) -> list[tuple[AgentState, AgentState | None]]:
        _, pairs = self.suite(cfg)
        with no_grad():
            return [encode_agents(p, params, cfg) for p in pairs]

    def evaluate(self, cfg: ExperimentConfig, label: str = "", params: dict | None = None,
                 states=None) -> MetricsReport:
        params = params if params is not None else self.params(cfg, label)
        scenes, _ = self.suite(cfg)
        states = states if states is not None else self.states(cfg, params)
        with no_grad():
            results = [run_states(v, i, sc, params, cfg, k) for k, ((v, i), sc) in enumerate(zip(states, scenes))]
        rep = report(results, scenes, label)
        self.say(f"{label:>14s}: AP@0.5 {rep.ap50:.4f} (occluded {rep.ap50_occluded:.4f}, open {rep.ap50_open:.4f})"
                 f"  AP@0.7 {rep.ap70:.4f}  payload {rep.mean_payload_bytes:.0f} B")
        return rep


# ---------------------------------------------------------------- experiments

def run_ablation(lab: Lab, rows: dict[str, dict] | None = None, factor: int | None = None) -> list[MetricsReport]:
    """Train and evaluate each row on the shared suite; rows keep their given order."""
    rows = ABLATION_ROWS if rows is None else rows
    out = []
    for label, changes in rows.items():
        cfg = lab.base.with_(**changes)
        if factor is not None:
            cfg = cfg.with_(**{"sensors.degrade_factor": factor})
        out.append(lab.evaluate(cfg, label))
    hashes = {r.suite for r in out}
    if len(hashes) > 1:
        raise RuntimeError(f"ablation rows saw different scene suites: {sorted(hashes)}")
    return out


def run_trend(lab: Lab, factors=(1, 2, 4), full_factors=None) -> dict[str, dict[int, MetricsReport]]:
    """LiDAR-only baseline across vehicle beam degradation, the full pipeline at
    ``full_factors`` (default: the smallest and largest factor), and the
    no-collaboration model at the largest factor."""
    full_factors = (min(factors), max(factors)) if full_factors is None else full_factors
    out: dict[str, dict[int, MetricsReport]] = {"lidar": {}, "full": {}, "no-collab": {}}
    for f in factors:
        out["lidar"][f] = lab.evaluate(lab.base.with_(**ABLATION_ROWS["baseline"], **{"sensors.degrade_factor": f}),
                                       f"lidar x{f}")
    for f in full_factors:
        out["full"][f] = lab.evaluate(lab.base.with_(**{"sensors.degrade_factor": f}), f"full x{f}")
    f = max(factors)
    out["no-collab"][f] = lab.evaluate(lab.base.with_(**NO_COLLAB, **{"sensors.degrade_factor": f}), f"no-collab x{f}")
    return out


@dataclass
class BandwidthStudy:
    score_diff: MetricsReport
    score_only: MetricsReport  # at the payload-matched score threshold
    score_only_default: MetricsReport
    full_map: MetricsReport
    matched_threshold: float
    sweep: list[tuple[float, float]]  # (score threshold, mean payload bytes)
    full_map_bytes: int


def run_bandwidth(lab: Lab, cfg: ExperimentConfig | None = None, thresholds=None) -> BandwidthStudy:
    """Score+difference vs score-only masking at matched payload, and masked vs full-map transmission.

    All variants share one trained model (the base config) and its cached
    agent features; only the masks and the transmitted cells change.
    """
    cfg = cfg or lab.base
    params = lab.params(cfg, "+all")
    states = lab.states(cfg, params)
    sd = lab.evaluate(cfg, "score+diff", params, states)
    only_cfg = cfg.with_(**{"modes.rfea": False})

    def masked(c):
        return [(remask(v, c), remask(i, c)) for v, i in states]

    only_default = lab.evaluate(only_cfg, "score-only", params, masked(only_cfg))
    if thresholds is None:  # low thresholds are spaced geometrically so large payloads can be matched too
        thresholds = np.unique(np.round(np.concatenate([np.geomspace(1e-4, 0.02, 24), np.linspace(0.02, 0.98, 49)]), 6))
    sweep = []
    best = None
    for t in thresholds:
        c = only_cfg.with_(**{"protocol.score_threshold": float(t)})
        st = masked(c)
        payload = float(np.mean([_payload(v, i, c) for v, i in st]))
        sweep.append((float(t), payload))
        gap = abs(payload - sd.mean_payload_bytes)
        if best is None or gap < best[0]:
            best = (gap, float(t), c, st)
    _, t_match, c_match, st_match = best
    only = lab.evaluate(c_match, f"score-only@{t_match:g}", params, st_match)
    full_cfg = cfg.with_(**{"modes.transmit": "full"})
    full = lab.evaluate(full_cfg, "full-map", params, states)
    spec = grid_spec(cfg)
    return BandwidthStudy(sd, only, only_default, full, t_match, sweep,
                          full_map_bytes(spec.h, spec.w, cfg.model.channels * spec.height_bins))


def _payload(v: AgentState, i: AgentState, cfg: ExperimentConfig) -> int:
    """Value bytes of the message the infrastructure would send."""
    return select_features(i.F_oc, request_map(v.M_sd), i.M_sd, cfg.modes.selection).payload_bytes


def suite_id(lab: Lab, cfg: ExperimentConfig | None = None) -> str:
    scenes, _ = lab.suite(cfg or lab.base)
    return suite_hash(scenes)
