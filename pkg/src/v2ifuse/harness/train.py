"""Toy end-to-end training on cached synthetic scenes."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .. import comm
from ..errors import TrainingError
from ..tensor import Parameter, backward, zero_grad
from .config import ExperimentConfig
from .evaluate import make_scene
from .pipeline import FramePair, encode_agents, final_features, grid_spec, init_params, sense_scene

ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def training_factors(cfg: ExperimentConfig) -> tuple[int, ...]:
    return cfg.training.degrade_factors or (cfg.sensors.degrade_factor,)


def training_frames(cfg: ExperimentConfig) -> list[FramePair]:
    """Sensed training scenes; half occluded, half open, seeded apart from the suite.

    Each scene is sensed once per training degradation factor, so one model
    sees every vehicle beam count it will be evaluated at.
    """
    base = cfg.suite.train_seed_offset
    out = []
    for k in range(cfg.suite.n_train_scenes):
        scene = make_scene(base + k, cfg, occluded=(k % 2 == 0))
        first = None
        for f in training_factors(cfg):
            pair = sense_scene(scene, cfg.with_(**{"sensors.degrade_factor": f}), infra=first)
            first = first or pair.infra
            out.append(pair)
    return out


def loss_on(pair: FramePair, params: dict, cfg: ExperimentConfig, targets: comm.Targets | None = None):
    v, i = encode_agents(pair, params, cfg)
    F_V, _, _ = final_features(v, i, params, cfg, differentiable=True)
    raw = comm.decoder_forward(F_V, params)
    if targets is None:
        targets = comm.rasterize(pair.scene.objects, grid_spec(cfg))
    t = cfg.training
    return comm.detection_loss(raw, targets, t.pos_weight, t.reg_weight)


@dataclass
class TrainResult:
    params: dict[str, Parameter]
    losses: list[float] = field(default_factory=list)


def train_toy(cfg: ExperimentConfig, frames: list[FramePair] | None = None,
              params: dict[str, Parameter] | None = None, log=None) -> TrainResult:
    """Adam (or SGD with momentum) with global-norm clipping, one scene per step.

    The scene order is a seeded permutation of the cached frames, so two runs
    with the same config give the same curve.
    """
    frames = frames if frames is not None else training_frames(cfg)
    params = params if params is not None else init_params(cfg)
    if not frames:
        raise TrainingError("no training scenes")
    t = cfg.training
    spec = grid_spec(cfg)
    targets = [comm.rasterize(f.scene.objects, spec) for f in frames]
    rng = np.random.default_rng(cfg.seed + 7919)
    order = np.concatenate([rng.permutation(len(frames)) for _ in range(t.steps // len(frames) + 1)])
    velocity = {k: np.zeros_like(p.data) for k, p in params.items()}
    second = {k: np.zeros_like(p.data) for k, p in params.items()}
    trainable = [k for k, p in params.items() if p.trainable]
    result = TrainResult(params)
    for step in range(t.steps):
        j = order[step]
        loss = loss_on(frames[j], params, cfg, targets[j])
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingError(f"non-finite loss {value} at step {step}")
        backward(loss)
        grads = {k: params[k].grad for k in trainable if params[k].grad is not None}
        norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if not np.isfinite(norm):
            bad = next(k for k, g in grads.items() if not np.all(np.isfinite(g)))
            raise TrainingError(f"non-finite gradient in {bad} at step {step}")
        scale = min(1.0, t.grad_clip / norm) if t.grad_clip > 0 and norm > 0 else 1.0
        lr = t.lr * (0.5 * (1.0 + math.cos(math.pi * step / t.steps)) if t.schedule == "cosine" else 1.0)
        for k, g in grads.items():
            g = scale * g
            if t.optimizer == "sgd":
                velocity[k] = t.momentum * velocity[k] + g
                params[k].data = params[k].data - lr * velocity[k]
            else:
                velocity[k] = t.momentum * velocity[k] + (1 - t.momentum) * g
                second[k] = ADAM_BETA2 * second[k] + (1 - ADAM_BETA2) * g * g
                m_hat = velocity[k] / (1 - t.momentum ** (step + 1))
                v_hat = second[k] / (1 - ADAM_BETA2 ** (step + 1))
                params[k].data = params[k].data - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        zero_grad(params.values())
        result.losses.append(value)
        if log is not None and (step % 50 == 0 or step == t.steps - 1):
            log(f"step {step:4d} loss {value:.4f}")
    return result
