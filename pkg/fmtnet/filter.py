"""Temporal feature filter: geometric prediction of the last filtered features, gated update with
the current encoding, and a GRU that integrates motion features into camera motion estimates.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Optional, Union

import numpy as np

from fmtnet import networks as N
from fmtnet import tensor as T
from fmtnet.errors import InvalidArgument, PreconditionViolation
from fmtnet.geometry import DepthMap, RigidTransform, WarpResult, project_warp, rotation_from_sines_tensor
from fmtnet.losses import init_weights
from fmtnet.models import CameraIntrinsics, NetConfig
from fmtnet.networks import EVAL, Mode, ParameterStore
from fmtnet.tensor import Tensor

logger = logging.getLogger(__name__)

DEPTH_FLOOR = 1e-3
GateValue = Union[float, np.ndarray]


@dataclass
class FilterState:
    """Static part (r_hat_prev, r_tilde_prev), motion state h_motion and the cached inverse depth of r_hat_prev."""

    r_hat_prev: Tensor
    r_tilde_prev: Tensor
    h_motion: Tensor
    z_hat_prev: Optional[Tensor] = None
    initialized: bool = False

    @classmethod
    def initial(cls, config: NetConfig) -> "FilterState":
        shape = (config.feature_channels, config.feature_height, config.feature_width)
        return cls(
            r_hat_prev=Tensor(np.zeros(shape)),
            r_tilde_prev=Tensor(np.zeros(shape)),
            h_motion=Tensor(np.zeros(config.motion_state_width)),
        )


@dataclass
class MotionEstimate:
    raw: Tensor
    translation: Tensor
    rotation: Tensor
    transform: RigidTransform

    @classmethod
    def identity(cls) -> "MotionEstimate":
        return cls(
            raw=Tensor(np.zeros(6)),
            translation=Tensor(np.zeros(3)),
            rotation=Tensor(np.eye(3)),
            transform=RigidTransform.identity(),
        )


@dataclass
class StepOutput:
    r_hat: Tensor
    r_tilde: Tensor
    z_hat: Tensor
    logits: Tensor
    gate: Tensor
    motion: MotionEstimate
    warp: Optional[WarpResult] = None

    def segmentation(self) -> np.ndarray:
        return np.argmax(self.logits.data, axis=0)


# --- parameters ---

def init_filter(store: ParameterStore, rng: np.random.Generator) -> None:
    cfg = store.config
    c, f, s = cfg.feature_channels, cfg.motion_feature_width, cfg.motion_state_width
    store.add("gate/hidden/weight", N.he_normal(rng, (1, c, 3, 3), c * 9))
    store.add("gate/input/weight", N.he_normal(rng, (1, c, 3, 3), c * 9))
    store.add("gate/bias", np.zeros(1))
    for unit in ("o", "u", "c"):
        store.add(f"motion_filter/{unit}/input_weight", N.he_normal(rng, (s, f), f))
        store.add(f"motion_filter/{unit}/hidden_weight", N.he_normal(rng, (s, s), s))
        store.add(f"motion_filter/{unit}/bias", np.zeros(s))
    N.register_linear(store, rng, "motion_filter/head", cfg.motion_head_width, s, batchnorm=True)


def init_model(config: NetConfig, seed: int) -> ParameterStore:
    """Backbone, filter and multi-task weighting parameters drawn from one seed."""
    rng = np.random.default_rng(seed)
    store = ParameterStore(config)
    N.init_backbone(store, rng)
    init_filter(store, rng)
    init_weights(store)
    logger.debug("initialized %d parameter tensors from seed %d", len(store.params), seed)
    return store


# --- motion ---

def transform_from_output(raw: Tensor) -> MotionEstimate:
    """First three outputs are the translation; the last three are clipped rotation sines."""
    translation = raw[0:3]
    sines = T.clip(raw[3:6], -1.0, 1.0)
    rotation = rotation_from_sines_tensor(sines)
    return MotionEstimate(raw, translation, rotation, RigidTransform(rotation.data, translation.data))


def motion_step(
    h: Tensor,
    m: Tensor,
    store: ParameterStore,
    mode: Mode = EVAL,
    update_override: Optional[float] = None,
) -> tuple[Tensor, MotionEstimate]:
    """One GRU step on motion features m, then the output head. Returns (h', estimate)."""

    def gate_input(unit: str, hidden: Tensor) -> Tensor:
        return T.matmul(store[f"motion_filter/{unit}/input_weight"], m) + hidden + store[f"motion_filter/{unit}/bias"]

    def hidden_term(unit: str) -> Tensor:
        return T.matmul(store[f"motion_filter/{unit}/hidden_weight"], h)

    o = T.sigmoid(gate_input("o", hidden_term("o")))
    if update_override is None:
        u = T.sigmoid(gate_input("u", hidden_term("u")))
    else:
        u = Tensor(np.full(h.shape, float(update_override)))
    c = T.sigmoid(gate_input("c", o * hidden_term("c")))
    h_next = (1.0 - u) * h + u * c
    hidden = N.linear_layer(store, "motion_filter/head", h_next, mode, batchnorm=True, relu=True)
    return h_next, transform_from_output(N.motion_output(hidden, store, mode))


# --- predict / update ---

def predict(state: FilterState, tau: RigidTransform, store: ParameterStore, K: CameraIntrinsics, mode: Mode = EVAL) -> WarpResult:
    """Warp r_hat_prev into the current view. Reads only the state, never the current frame."""
    if not state.initialized:
        raise PreconditionViolation("predict needs a state that has seen at least one frame")
    z_hat = state.z_hat_prev if state.z_hat_prev is not None else N.decode_depth(state.r_hat_prev, store, mode)
    depth = DepthMap(N.depth_from_inverse(z_hat.data, DEPTH_FLOOR))
    return project_warp(state.r_hat_prev, depth, tau, K)


def update(
    warp: WarpResult,
    r_tilde: Tensor,
    store: ParameterStore,
    gate_override: Optional[GateValue] = None,
) -> tuple[Tensor, Tensor]:
    """r_hat = (1 - i) * r_bar + i * r_tilde with one gate value per pixel."""
    r_bar = warp.warped
    if r_bar.shape != r_tilde.shape:
        raise InvalidArgument(f"predicted {r_bar.shape} and observed {r_tilde.shape} features differ in shape")
    if gate_override is None:
        zero = Tensor(np.zeros(1))
        logits = T.conv2d(r_bar, store["gate/hidden/weight"], store["gate/bias"], padding=1)
        logits = logits + T.conv2d(r_tilde, store["gate/input/weight"], zero, padding=1)
        gate = T.sigmoid(logits)
    else:
        gate = Tensor(np.broadcast_to(np.asarray(gate_override, dtype=np.float64), (1,) + r_tilde.shape[1:]))
    return (1.0 - gate) * r_bar + gate * r_tilde, gate


def feature_intrinsics(K: CameraIntrinsics, config: NetConfig) -> CameraIntrinsics:
    if (K.height, K.width) == (config.feature_height, config.feature_width):
        return K
    return K.scaled(1.0 / config.downsample)


def step(
    state: FilterState,
    frame: Union[Tensor, np.ndarray],
    store: ParameterStore,
    K: CameraIntrinsics,
    mode: Mode = EVAL,
    acceleration: Optional[Tensor] = None,
    force_identity_motion: bool = False,
    gate_override: Optional[GateValue] = None,
    update_override: Optional[float] = None,
) -> tuple[FilterState, StepOutput]:
    """Filter one frame. K is the image-resolution camera; warping happens at feature resolution."""
    cfg = store.config
    x = T.as_tensor(frame)
    N.check_frame(x, cfg)
    r_tilde = N.encode(x, store, mode)

    if not state.initialized:
        r_hat = r_tilde
        gate = Tensor(np.ones((1, cfg.feature_height, cfg.feature_width)))
        motion = MotionEstimate.identity()
        h_motion = state.h_motion
        warp = None
    else:
        if force_identity_motion:
            motion = MotionEstimate.identity()
            h_motion = state.h_motion
        else:
            pair = T.concat([state.r_tilde_prev, r_tilde], axis=0)
            m = N.fuse_acceleration(N.decode_motion(pair, store, mode), acceleration, store, mode)
            h_motion, motion = motion_step(state.h_motion, m, store, mode, update_override)
        warp = predict(state, motion.transform, store, feature_intrinsics(K, cfg), mode)
        r_hat, gate = update(warp, r_tilde, store, gate_override)

    z_hat = N.decode_depth(r_hat, store, mode)
    logits = N.decode_semantic(r_hat, store, mode)
    next_state = replace(
        state, r_hat_prev=r_hat, r_tilde_prev=r_tilde, h_motion=h_motion, z_hat_prev=z_hat, initialized=True,
    )
    return next_state, StepOutput(r_hat, r_tilde, z_hat, logits, gate, motion, warp)


def run_sequence(
    frames: np.ndarray,
    store: ParameterStore,
    K: CameraIntrinsics,
    mode: Mode = EVAL,
    **options,
) -> list[StepOutput]:
    state = FilterState.initial(store.config)
    outputs = []
    for frame in frames:
        state, out = step(state, frame, store, K, mode, **options)
        outputs.append(out)
    return outputs


# --- unfiltered baseline ---

def baseline_step(
    prev_frame: Union[Tensor, np.ndarray],
    frame: Union[Tensor, np.ndarray],
    store: ParameterStore,
    mode: Mode = EVAL,
    prev_encoding: Optional[Tensor] = None,
) -> StepOutput:
    """Single-frame multi-task forward plus pairwise motion through the shared output layer."""
    cfg = store.config
    x = T.as_tensor(frame)
    N.check_frame(x, cfg)
    if prev_encoding is None:
        prev = T.as_tensor(prev_frame)
        N.check_frame(prev, cfg)
        prev_encoding = N.encode(prev, store, mode)
    r = N.encode(x, store, mode)
    m = N.decode_motion(T.concat([prev_encoding, r], axis=0), store, mode)
    motion = transform_from_output(N.motion_output(m, store, mode))
    gate = Tensor(np.ones((1, cfg.feature_height, cfg.feature_width)))
    return StepOutput(
        r_hat=r, r_tilde=r, z_hat=N.decode_depth(r, store, mode),
        logits=N.decode_semantic(r, store, mode), gate=gate, motion=motion,
    )


def run_baseline(frames: np.ndarray, store: ParameterStore, mode: Mode = EVAL) -> list[StepOutput]:
    outputs = []
    prev_encoding = None
    for t, frame in enumerate(frames):
        out = baseline_step(frames[max(t - 1, 0)], frame, store, mode, prev_encoding=prev_encoding)
        prev_encoding = out.r_tilde
        outputs.append(out)
    return outputs
