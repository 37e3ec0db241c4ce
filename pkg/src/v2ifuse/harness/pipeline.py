"""Two-agent perception pipeline: encode, fuse, correct, exchange, decode."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, replace

import numpy as np

from .. import comm, fusion
from ..comm import BandwidthLedger, CollabMessage, Detection
from ..encoders import (GridSpec, image_encode, init_image_params, init_pillar_params, pillar_encode,
                        to_global_points, voxelize)
from ..rfea import regional_difference_map
from ..scenario import (Pose, Scene, SensorFrame, SensorRig, add_noise, default_infrastructure_rig,
                        default_vehicle_rig, degrade_beams, sense)
from ..tensor import Parameter, Tensor, no_grad, reshape
from .config import ExperimentConfig

VEHICLE_ID = 1
INFRA_ID = 2


def grid_spec(cfg: ExperimentConfig) -> GridSpec:
    return GridSpec(channels=cfg.model.channels)


def init_params(cfg: ExperimentConfig, seed: int | None = None) -> dict[str, Parameter]:
    """All learnable parameters; both agents share them."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    c = cfg.model.channels
    spec = grid_spec(cfg)
    p: dict[str, Parameter] = {}
    p.update(init_pillar_params(rng, c))
    p.update(init_image_params(rng, c))
    p.update(fusion.init_attention_params(rng, c, cfg.model.num_scales, cfg.model.samples))
    p.update(fusion.init_focm_params(rng, c))
    p.update(comm.init_decoder_params(rng, c * spec.height_bins, cfg.model.decoder_hidden))
    p.update(comm.init_message_fusion_params(rng, c * spec.height_bins))
    return p


def save_params(params: dict[str, Parameter], path) -> None:
    np.savez(path, **{k: v.data for k, v in params.items()})


def load_params(path) -> dict[str, Parameter]:
    with np.load(path) as z:
        return {k: Parameter(z[k], name=k) for k in z.files}


# ------------------------------------------------------------------ sensing

def rigs(cfg: ExperimentConfig) -> tuple[SensorRig, SensorRig]:
    vehicle = default_vehicle_rig()
    if cfg.sensors.vehicle_beams != vehicle.beams:
        el = np.linspace(vehicle.beam_elevations[0], vehicle.beam_elevations[-1], cfg.sensors.vehicle_beams)
        vehicle = replace(vehicle, beam_elevations=tuple(el))
    vehicle = degrade_beams(vehicle, cfg.sensors.degrade_factor)
    return vehicle, default_infrastructure_rig()


@dataclass
class FramePair:
    scene: Scene
    vehicle: SensorFrame
    infra: SensorFrame
    vehicle_rig: SensorRig
    infra_rig: SensorRig


def sense_scene(scene: Scene, cfg: ExperimentConfig, infra: SensorFrame | None = None) -> FramePair:
    """Sense both agents; ``infra`` reuses an infrastructure frame (it is never degraded)."""
    v_rig, i_rig = rigs(cfg)
    return FramePair(scene, sense(scene, v_rig), infra if infra is not None else sense(scene, i_rig), v_rig, i_rig)


def noise_seed(scene: Scene, cfg: ExperimentConfig) -> int:
    return zlib.crc32(f"{cfg.seed}:{scene.seed}:noise".encode())


# ------------------------------------------------------------------ agents

@dataclass
class AgentState:
    name: str
    F_oc: Tensor  # (c*z, h, w) BEV map
    logits: np.ndarray  # decoder class logits on F_oc, (h, w)
    M_s: np.ndarray
    M_d: np.ndarray
    M_sd: np.ndarray


def agent_features(frame: SensorFrame, rig: SensorRig, params: dict, cfg: ExperimentConfig,
                   believed_pose: Pose | None = None) -> Tensor:
    """Corrected BEV features of one agent in the global grid."""
    spec = grid_spec(cfg)
    pose = believed_pose or frame.pose
    pts = to_global_points(frame.points, pose, frame.mount_height)
    F_voxel = pillar_encode(voxelize(pts, spec), params)
    m = cfg.modes
    if m.camera and m.vwf:
        F_img = image_encode(frame.image, params, (rig.camera.height, rig.camera.width))
        refs = fusion.compute_reference_points(spec.voxel_centers(cfg.model.pillar_height), replace(rig, pose=pose))
        F_fused = fusion.voxel_wise_fusion(F_voxel, F_img, refs, params, cfg.model.num_scales)
        F_oc = fusion.focm(F_voxel, F_fused, params) if m.focm else F_voxel + F_fused
    else:
        F_oc = F_voxel
    return reshape(F_oc, (-1, spec.h, spec.w))


def agent_state(name: str, F_oc: Tensor, params: dict, cfg: ExperimentConfig) -> AgentState:
    p = cfg.protocol
    logits = comm.decoder_forward(Tensor(F_oc.data), params).data[0]
    M_s = comm.score_map_from_logits(logits, p.score_threshold)
    if cfg.modes.rfea:
        M_d = regional_difference_map(F_oc, p.rfea_sigma, p.rfea_kernel, p.rfea_threshold).mask
    else:
        M_d = np.zeros_like(M_s)
    return AgentState(name, F_oc, logits, M_s, M_d, comm.confidence_map(M_s, M_d, cfg.modes.confidence))


def remask(state: AgentState, cfg: ExperimentConfig) -> AgentState:
    """Recompute masks for new protocol settings without re-running the encoders."""
    p = cfg.protocol
    M_s = comm.score_map_from_logits(state.logits, p.score_threshold)
    if cfg.modes.rfea:
        M_d = regional_difference_map(state.F_oc, p.rfea_sigma, p.rfea_kernel, p.rfea_threshold).mask
    else:
        M_d = np.zeros_like(M_s)
    return replace(state, M_s=M_s, M_d=M_d, M_sd=comm.confidence_map(M_s, M_d, cfg.modes.confidence))


def encode_agents(pair: FramePair, params: dict, cfg: ExperimentConfig) -> tuple[AgentState, AgentState | None]:
    """Vehicle and infrastructure states; the latter is None without collaboration."""
    v_F = agent_features(pair.vehicle, pair.vehicle_rig, params, cfg)
    if not cfg.modes.collaboration:
        return agent_state("vehicle", v_F, params, cfg), None
    infra_pose = None
    if cfg.noise.target == "pose" and cfg.noise.sigma > 0:
        infra_pose = add_noise(pair.infra.pose, cfg.noise.sigma, noise_seed(pair.scene, cfg))
    i_F = agent_features(pair.infra, pair.infra_rig, params, cfg, infra_pose)
    return agent_state("vehicle", v_F, params, cfg), agent_state("infrastructure", i_F, params, cfg)


# ----------------------------------------------------------------- exchange

@dataclass
class Exchange:
    request: np.ndarray  # vehicle request map
    message: CollabMessage | None
    wire: bytes
    F_comm: Tensor  # densified received features


def exchange(v: AgentState, i: AgentState, cfg: ExperimentConfig, frame_id: int = 0,
             differentiable: bool = False, scene: Scene | None = None) -> Exchange:
    """One request/response round.

    The vehicle sends its request map; the infrastructure answers with the
    selected features.  With ``differentiable`` the received map is the dense
    masked product (gradients reach the sender); otherwise it is decoded from
    the serialized float32 message.
    """
    M_re = comm.request_map(v.M_sd)
    if cfg.modes.transmit == "full":
        M_re_eff, M_sd_eff, mode = np.ones_like(M_re), np.ones_like(M_re), "and"
    else:
        M_re_eff, M_sd_eff, mode = M_re, i.M_sd, cfg.modes.selection
    if differentiable:
        S = comm.selection_mask(M_re_eff, M_sd_eff, mode).astype(np.float64)
        return Exchange(M_re, None, b"", i.F_oc * S[None])
    msg = comm.select_features(i.F_oc, M_re_eff, M_sd_eff, mode, INFRA_ID, frame_id)
    wire = comm.serialize(msg)
    received = comm.deserialize(wire)
    dense = received.densify()
    if cfg.noise.target == "features" and cfg.noise.sigma > 0 and received.count:
        seed = noise_seed(scene, cfg) if scene is not None else frame_id
        noisy = add_noise(dense, cfg.noise.sigma, seed)
        sent = np.zeros(received.h * received.w, dtype=bool)
        sent[received.indices.astype(np.int64)] = True
        dense = np.where(sent.reshape(received.h, received.w)[None], noisy, 0.0)
    return Exchange(M_re, received, wire, Tensor(dense))


# -------------------------------------------------------------------- frame

@dataclass
class FrameResult:
    scene_seed: int
    occluded: bool
    detections: list[Detection]
    ledger: BandwidthLedger
    raw: np.ndarray
    vehicle: AgentState | None = None
    infra: AgentState | None = None
    request: np.ndarray | None = None

    def row(self) -> dict:
        return {
            "scene": self.scene_seed,
            "split": "occluded" if self.occluded else "open",
            "detections": len(self.detections),
            "payload_bytes": self.ledger.total_bytes,
            "wire_bytes": self.ledger.wire_bytes,
            "log2_bytes": round(self.ledger.log2_bytes, 6),
        }


def final_features(v: AgentState, i: AgentState, params: dict, cfg: ExperimentConfig, frame_id: int = 0,
                   differentiable: bool = False, scene: Scene | None = None):
    """Vehicle feature map after collaboration, plus the bandwidth ledger and request map."""
    ledger = BandwidthLedger()
    if not cfg.modes.collaboration:
        return v.F_oc, ledger, None
    ex = exchange(v, i, cfg, frame_id, differentiable, scene)
    if ex.message is not None:
        ledger = comm.comm_cost(ledger, ex.message)
    return comm.fuse_messages(ex.F_comm, v.F_oc, params), ledger, ex.request


def run_states(v: AgentState, i: AgentState, scene: Scene, params: dict, cfg: ExperimentConfig,
               frame_id: int = 0) -> FrameResult:
    F_V, ledger, request = final_features(v, i, params, cfg, frame_id, scene=scene)
    raw = comm.decoder_forward(F_V, params).data
    dets = comm.decode_raw(raw, grid_spec(cfg), cfg.protocol.det_threshold, cfg.protocol.nms_iou)
    return FrameResult(scene.seed, scene.occluded, dets, ledger, raw, v, i, request)


def run_frame(cfg: ExperimentConfig, scene: Scene, params: dict, pair: FramePair | None = None,
              frame_id: int = 0) -> FrameResult:
    """Run both agents on one scene and return the vehicle's detections."""
    pair = pair or sense_scene(scene, cfg)
    with no_grad():
        v, i = encode_agents(pair, params, cfg)
        return run_states(v, i, scene, params, cfg, frame_id)
