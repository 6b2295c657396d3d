"""Adam, the staged training protocol and a finite-difference gradient check."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from fmtnet import filter as F
from fmtnet import losses as L
from fmtnet import networks as N
from fmtnet import tensor as T
from fmtnet.errors import InvalidArgument
from fmtnet.models import MetricsLogLine, SequenceKind, Stage, TrainConfig
from fmtnet.networks import Mode, ParameterStore
from fmtnet.synthdata import SequenceDataset, SequenceSample
from fmtnet.tensor import Tensor

logger = logging.getLogger(__name__)

STAGE_GROUPS = {
    Stage.MOTION_PRETRAIN: (N.MOTION_DECODER, N.FUSION, N.MOTION_FILTER, N.MOTION_OUT),
    Stage.UPDATE_PRETRAIN: (N.GATE, N.ENCODER, N.WEIGHTS),
    Stage.FINETUNE: N.GROUPS,
    Stage.BASELINE: (N.ENCODER, N.SEMANTIC, N.DEPTH, N.MOTION_DECODER, N.MOTION_OUT, N.WEIGHTS),
}

STAGE_LOSSES = {
    Stage.MOTION_PRETRAIN: ("trans", "rot"),
    Stage.UPDATE_PRETRAIN: ("seg", "depth_l1", "depth_sig"),
    Stage.FINETUNE: L.COMPONENTS,
    Stage.BASELINE: L.COMPONENTS,
}


# --- optimizer ---

@dataclass
class OptimizerState:
    step: int = 0
    first: dict[str, np.ndarray] = field(default_factory=dict)
    second: dict[str, np.ndarray] = field(default_factory=dict)


def decays(name: str) -> bool:
    """Weight decay applies to weight matrices and kernels, not to biases or norm parameters."""
    return name.rsplit("/", 1)[-1].endswith("weight")


def adam_step(
    store: ParameterStore,
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    config: TrainConfig,
    names: Optional[Sequence[str]] = None,
) -> OptimizerState:
    """One Adam update with bias correction and decoupled weight decay. Missing gradients count as zero."""
    state.step += 1
    lr, b1, b2 = config.learning_rate, config.beta1, config.beta2
    correction1 = 1.0 - b1 ** state.step
    correction2 = 1.0 - b2 ** state.step
    for name in names if names is not None else store.names():
        param = store[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(param.data)
        m = b1 * state.first.get(name, np.zeros_like(param.data)) + (1.0 - b1) * g
        v = b2 * state.second.get(name, np.zeros_like(param.data)) + (1.0 - b2) * g * g
        state.first[name], state.second[name] = m, v
        value = param.data
        if decays(name):
            value = value * (1.0 - lr * config.weight_decay)
        param.data = value - lr * (m / correction1) / (np.sqrt(v / correction2) + config.epsilon)
    return state


# --- per-sequence objectives ---

def inverse_depth_target(depth: np.ndarray, factor: int) -> np.ndarray:
    """Ground-truth inverse depth [1,H,W] average pooled to feature resolution."""
    c, h, w = depth.shape
    inverse = 1.0 / depth
    return inverse.reshape(c, h // factor, factor, w // factor, factor).mean(axis=(2, 4))


def _mean(terms: list[Tensor]) -> Tensor:
    return T.mean(T.stack(terms)) if len(terms) > 1 else terms[0]


def frame_losses(out: F.StepOutput, sample: SequenceSample, t: int, factor: int) -> dict[str, Tensor]:
    z_gt = inverse_depth_target(sample.depths[t], factor)
    return {
        "seg": L.seg_ce(out.logits, sample.labels[t]),
        "depth_l1": L.depth_l1(z_gt, out.z_hat),
        "depth_sig": L.depth_sig(z_gt, out.z_hat),
    }


def pair_losses(motion: F.MotionEstimate, sample: SequenceSample, t: int) -> dict[str, Tensor]:
    gt = sample.motion(t)
    return {
        "trans": L.translation_loss(motion.translation, motion.rotation, gt),
        "rot": L.rotation_loss(motion.rotation, gt),
    }


def _average(per_step: list[dict[str, Tensor]], names: Sequence[str]) -> dict[str, Tensor]:
    return {name: _mean([d[name] for d in per_step if name in d]) for name in names if any(name in d for d in per_step)}


def motion_only_losses(sample: SequenceSample, store: ParameterStore, mode: Mode) -> dict[str, Tensor]:
    """Encode every frame and run only the motion path; supervises every consecutive pair."""
    state_h = Tensor(np.zeros(store.config.motion_state_width))
    encodings = [N.encode(Tensor(frame), store, mode) for frame in sample.frames]
    per_pair = []
    for t in range(1, sample.length):
        m = N.decode_motion(T.concat([encodings[t - 1], encodings[t]], axis=0), store, mode)
        state_h, motion = F.motion_step(state_h, m, store, mode)
        per_pair.append(pair_losses(motion, sample, t))
    return _average(per_pair, ("trans", "rot"))


def sequence_losses(stage: Stage, sample: SequenceSample, store: ParameterStore, mode: Mode) -> dict[str, Tensor]:
    factor = store.config.downsample
    if stage == Stage.MOTION_PRETRAIN:
        return motion_only_losses(sample, store, mode)
    if stage == Stage.BASELINE:
        outputs = F.run_baseline(sample.frames, store, mode)
    else:
        outputs = F.run_sequence(
            sample.frames, store, sample.intrinsics, mode,
            force_identity_motion=stage == Stage.UPDATE_PRETRAIN,
        )
    per_step = []
    for t, out in enumerate(outputs):
        terms = frame_losses(out, sample, t, factor)
        if t > 0 and stage in (Stage.FINETUNE, Stage.BASELINE):
            terms.update(pair_losses(out.motion, sample, t))
        per_step.append(terms)
    return _average(per_step, STAGE_LOSSES[stage])


def stage_objective(stage: Stage, components: dict[str, Tensor], store: ParameterStore) -> Tensor:
    if stage == Stage.MOTION_PRETRAIN:
        return components["trans"] + components["rot"]
    return L.multitask_total(components, L.weights_of(store))


# --- stages ---

@dataclass
class TrainResult:
    store: ParameterStore
    optimizer: OptimizerState
    log: list[MetricsLogLine]


def check_stage_data(stage: Stage, dataset: SequenceDataset) -> None:
    kinds = dataset.kinds()
    if stage == Stage.UPDATE_PRETRAIN and kinds != {SequenceKind.STATIC}:
        raise InvalidArgument("update-pretrain needs static (repeated-frame) sequences; generate them with --kind static")
    if stage == Stage.MOTION_PRETRAIN and kinds == {SequenceKind.STATIC}:
        raise InvalidArgument("motion-pretrain needs sequences with camera motion")


def train_stage(
    stage: Stage,
    dataset: SequenceDataset,
    store: ParameterStore,
    config: TrainConfig,
    log_path: Optional[str] = None,
) -> TrainResult:
    """Train the groups of `stage` and leave every other group bit-identical."""
    check_stage_data(stage, dataset)
    trainable = STAGE_GROUPS[stage]
    store.set_trainable(trainable)
    names = store.names(trainable)
    mode = Mode(training=True, rng=np.random.default_rng(config.seed), frozen=frozenset(set(N.GROUPS) - set(trainable)))
    optimizer = OptimizerState()
    count = min(len(dataset), config.max_sequences or len(dataset))
    log: list[MetricsLogLine] = []
    if log_path:
        os.makedirs(os.path.dirname(log_path) or ".", exist_ok=True)
        open(log_path, "w").close()

    for epoch in range(1, config.epochs + 1):
        totals: dict[str, float] = {}
        pending = 0
        grads: dict[str, np.ndarray] = {}
        for index in range(count):
            sample = dataset[index]
            if sample.length < 2:
                logger.warning("skipping %s: too short to train on", sample.seq_id)
                continue
            sample = _truncate(sample, config.sequence_length)
            store.zero_grad()
            components = sequence_losses(stage, sample, store, mode)
            T.backward(stage_objective(stage, components, store))
            for name in names:
                g = store[name].grad
                if g is not None:
                    grads[name] = grads.get(name, 0.0) + g
            pending += 1
            for key, value in components.items():
                totals[key] = totals.get(key, 0.0) + value.item()
            if pending == config.accumulation:
                adam_step(store, {k: v / pending for k, v in grads.items()}, optimizer, config, names)
                grads, pending = {}, 0
            logger.debug("epoch %d sequence %s done", epoch, sample.seq_id)
        if pending:
            adam_step(store, {k: v / pending for k, v in grads.items()}, optimizer, config, names)
        line = MetricsLogLine(
            epoch=epoch,
            stage=stage,
            sequences=count,
            losses={k: v / max(count, 1) for k, v in sorted(totals.items())},
            weights={k: float(w.item()) for k, w in L.weights_of(store).items()},
        )
        log.append(line)
        if log_path:
            with open(log_path, "a") as handle:
                handle.write(json.dumps(line.model_dump(mode="json"), sort_keys=True) + "\n")
        logger.info("%s epoch %d: %s", stage.value, epoch, ", ".join(f"{k}={v:.4f}" for k, v in line.losses.items()))

    store.zero_grad()
    store.set_trainable(N.GROUPS)
    return TrainResult(store, optimizer, log)


def _truncate(sample: SequenceSample, length: int) -> SequenceSample:
    if sample.length <= length:
        return sample
    return SequenceSample(
        frames=sample.frames[:length], depths=sample.depths[:length], labels=sample.labels[:length],
        poses=sample.poses[:length], intrinsics=sample.intrinsics, class_count=sample.class_count,
        seed=sample.seed, seq_id=sample.seq_id, kind=sample.kind,
    )


# --- gradient check ---

@dataclass
class GradCheckEntry:
    name: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    relative_error: float


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    tolerance: float

    @property
    def max_relative_error(self) -> float:
        return max((e.relative_error for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_relative_error <= self.tolerance


def sample_entries(
    params: dict[str, Tensor], count: int, rng: np.random.Generator,
) -> list[tuple[str, tuple[int, ...]]]:
    """`count` random (parameter name, element index) pairs, drawn proportionally to parameter size."""
    names = sorted(params)
    sizes = np.array([params[n].size for n in names], dtype=np.float64)
    picks = []
    for _ in range(count):
        name = names[int(rng.choice(len(names), p=sizes / sizes.sum()))]
        flat = int(rng.integers(0, params[name].size))
        picks.append((name, tuple(int(i) for i in np.unravel_index(flat, params[name].shape))))
    return picks


def grad_check(
    closure: Callable[[], Tensor],
    params: dict[str, Tensor],
    entries: Sequence[tuple[str, tuple[int, ...]]],
    tolerance: float = 1e-4,
    step: float = 1e-5,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients of closure() with central differences on the given elements."""
    for param in params.values():
        param.zero_grad()
    T.backward(closure())
    results = []
    for name, index in entries:
        param = params[name]
        analytic = 0.0 if param.grad is None else float(param.grad[index])
        original = param.data[index]
        with T.no_grad():
            param.data[index] = original + step
            plus = closure().item()
            param.data[index] = original - step
            minus = closure().item()
        param.data[index] = original
        numeric = (plus - minus) / (2.0 * step)
        error = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        results.append(GradCheckEntry(name, index, analytic, numeric, error))
        logger.debug("grad check %s%s: analytic %.6e numeric %.6e", name, index, analytic, numeric)
    return GradCheckReport(results, tolerance)
