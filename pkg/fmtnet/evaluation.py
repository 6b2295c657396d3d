"""Segmentation and motion metrics, the three filter experiments and report rendering."""
from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from jinja2 import Environment, FileSystemLoader

from fmtnet import filter as F
from fmtnet.errors import InvalidArgument, PreconditionViolation
from fmtnet.geometry import DepthMap, RigidTransform, compose, project_warp
from fmtnet.images import emit_image, image_name
from fmtnet.losses import motion_losses
from fmtnet.models import EvalConfig, ExperimentName, ExperimentReport, ImageMode, SequenceKind
from fmtnet.networks import EVAL, ParameterStore
from fmtnet.synthdata import SequenceDataset, SequenceSample
from fmtnet.tensor import Tensor

logger = logging.getLogger(__name__)

TEMPLATE_DIR = os.path.join(os.path.dirname(__file__), "templates")
templates = Environment(loader=FileSystemLoader(TEMPLATE_DIR), keep_trailing_newline=True, trim_blocks=True, lstrip_blocks=True)


# --- confusion / IoU ---

@dataclass
class ConfusionMatrix:
    """Counts with rows = ground truth, columns = prediction."""

    class_count: int
    counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.class_count, self.class_count), dtype=np.int64)
        if self.counts.shape != (self.class_count, self.class_count) or np.any(self.counts < 0):
            raise InvalidArgument("confusion counts must be a non-negative KxK matrix")

    def add(self, labels: np.ndarray, prediction: np.ndarray) -> None:
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        prediction = np.asarray(prediction, dtype=np.int64).reshape(-1)
        if labels.shape != prediction.shape:
            raise InvalidArgument("labels and prediction differ in size")
        k = self.class_count
        if labels.min(initial=0) < 0 or labels.max(initial=0) >= k or prediction.min(initial=0) < 0 or prediction.max(initial=0) >= k:
            raise InvalidArgument(f"class ids outside 0..{k - 1}")
        self.counts += np.bincount(labels * k + prediction, minlength=k * k).reshape(k, k)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def class_iou(self) -> np.ndarray:
        """Per-class IoU; NaN for classes absent from the ground truth."""
        diagonal = np.diag(self.counts).astype(np.float64)
        rows = self.counts.sum(axis=1)
        union = rows + self.counts.sum(axis=0) - diagonal
        iou = np.full(self.class_count, np.nan)
        present = rows > 0
        iou[present] = diagonal[present] / union[present]
        return iou

    def mean_iou(self) -> float:
        if self.total == 0:
            raise InvalidArgument("mean IoU of an empty confusion matrix")
        return float(np.nanmean(self.class_iou()))

    def pixel_accuracy(self) -> float:
        if self.total == 0:
            raise InvalidArgument("pixel accuracy of an empty confusion matrix")
        return float(np.trace(self.counts) / self.total)


def mean_iou(confusion: ConfusionMatrix) -> float:
    return confusion.mean_iou()


# --- helpers ---

def noise_like(rng: np.random.Generator, shape: tuple[int, ...], config: EvalConfig) -> np.ndarray:
    return np.clip(rng.normal(config.noise_mean, config.noise_std, size=shape), 0.0, 1.0)


def select_sequences(dataset: SequenceDataset, config: EvalConfig) -> list[SequenceSample]:
    count = min(len(dataset), config.max_sequences or len(dataset))
    return [dataset[i] for i in range(count)]


def frame_columns(count: int) -> list[str]:
    return [f"Frame {t}" for t in range(1, count + 1)]


def pair_columns(count: int) -> list[str]:
    return [f"Frame {t}-{t + 1}" for t in range(1, count + 1)]


def emit_steps(outputs: list[F.StepOutput], frames: np.ndarray, labels: np.ndarray, class_count: int, directory: str) -> None:
    """Input, prediction, ground truth, inverse depth and gate per frame of one sequence."""
    for t, out in enumerate(outputs):
        emit_image(frames[t], os.path.join(directory, image_name("input", t + 1, ImageMode.RGB)), ImageMode.RGB)
        emit_image(out.segmentation()[None], os.path.join(directory, image_name("prediction", t + 1, ImageMode.LABELS)), ImageMode.LABELS, class_count)
        emit_image(labels[t], os.path.join(directory, image_name("truth", t + 1, ImageMode.LABELS)), ImageMode.LABELS, class_count)
        emit_image(out.z_hat, os.path.join(directory, image_name("inverse_depth", t + 1, ImageMode.DEPTH)), ImageMode.DEPTH)
        emit_image(out.gate, os.path.join(directory, image_name("gate", t + 1, ImageMode.GRAY)), ImageMode.GRAY)


def _finish(report: ExperimentReport, started: float) -> ExperimentReport:
    report.wall_clock_s = time.perf_counter() - started
    for name, ok in sorted(report.trend.items()):
        if not ok:
            logger.warning("%s experiment: trend condition %s not met", report.experiment.value, name)
    logger.info("%s experiment over %d sequences took %.1fs", report.experiment.value, report.sequences, report.wall_clock_s)
    return report


# --- experiments ---

def experiment_static(
    dataset: SequenceDataset,
    store: ParameterStore,
    config: Optional[EvalConfig] = None,
    image_dir: Optional[str] = None,
) -> ExperimentReport:
    """Repeat the first frame with its left half replaced by fresh noise each frame; identity motion."""
    config = config or EvalConfig()
    started = time.perf_counter()
    samples = select_sequences(dataset, config)
    length = config.static_length
    confusions = [ConfusionMatrix(store.config.class_count) for _ in range(length)]
    for index, sample in enumerate(samples):
        rng = np.random.default_rng([config.seed, index])
        clean = sample.frames[0]
        half = clean.shape[2] // 2
        frames = np.stack([clean.copy() for _ in range(length)])
        for t in range(length):
            frames[t, :, :, :half] = noise_like(rng, (clean.shape[0], clean.shape[1], half), config)
        outputs = F.run_sequence(frames, store, sample.intrinsics, EVAL, force_identity_motion=True)
        for t, out in enumerate(outputs):
            confusions[t].add(sample.labels[0], out.segmentation())
        if index == 0 and image_dir and config.emit_images:
            emit_steps(outputs, frames, np.stack([sample.labels[0]] * length), store.config.class_count, image_dir)
        logger.debug("static experiment: %s done", sample.seq_id)

    iou = [c.mean_iou() for c in confusions]
    report = ExperimentReport(
        experiment=ExperimentName.STATIC,
        columns=frame_columns(length),
        metrics={"mean_iou": iou, "pixel_accuracy": [c.pixel_accuracy() for c in confusions]},
        trend={
            "final_gain": iou[-1] >= iou[0] + 0.03,
            "non_decreasing": all(b >= a - 0.01 for a, b in zip(iou, iou[1:])),
        },
        sequences=len(samples),
        seed=config.seed,
        config=config.model_dump(mode="json"),
    )
    return _finish(report, started)


def successive_projection(sample: SequenceSample, motions: list[RigidTransform], values: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Project `values` of frame 1 into every later frame using frame-1 depth and the chained motions.

    Returns (warped values, validity) per later frame.
    """
    depth = DepthMap(sample.depths[0])
    chained = RigidTransform.identity()
    projections = []
    for motion in motions:
        chained = compose(motion, chained)
        warp = project_warp(Tensor(values), depth, chained, sample.intrinsics)
        projections.append((warp.warped.data, warp.validity))
    return projections


def projection_agreement(sample: SequenceSample, motions: list[RigidTransform]) -> list[float]:
    """Fraction of valid projected pixels whose frame-1 label matches the label of the target frame."""
    agreement = []
    for t, (warped, validity) in enumerate(successive_projection(sample, motions, sample.labels[0].astype(np.float64)), start=1):
        valid = validity[0] > 0
        if not np.any(valid):
            agreement.append(0.0)
            continue
        agreement.append(float(np.mean(np.rint(warped[0][valid]) == sample.labels[t][0][valid])))
    return agreement


def experiment_motion(
    dataset: SequenceDataset,
    store: ParameterStore,
    config: Optional[EvalConfig] = None,
    image_dir: Optional[str] = None,
) -> ExperimentReport:
    """Motion errors per consecutive pair when the last frames are replaced by noise."""
    config = config or EvalConfig()
    started = time.perf_counter()
    length, blanked = config.motion_length, config.motion_blanked
    if blanked >= length:
        raise InvalidArgument("cannot blank every frame of the motion sequences")
    samples = []
    for sample in select_sequences(dataset, config):
        if sample.length < length or sample.kind != SequenceKind.DYNAMIC:
            logger.warning("motion experiment: skipping %s (length %d, %s)", sample.seq_id, sample.length, sample.kind.value)
            continue
        samples.append(sample)
    if not samples:
        raise PreconditionViolation(f"no dynamic test sequences with at least {length} frames")

    pairs = length - 1
    delta_t = np.zeros((len(samples), pairs))
    delta_r = np.zeros((len(samples), pairs))
    agreement = np.zeros((len(samples), pairs))
    for index, sample in enumerate(samples):
        rng = np.random.default_rng([config.seed, index])
        frames = sample.frames[:length].copy()
        for t in range(length - blanked, length):
            frames[t] = noise_like(rng, frames[t].shape, config)
        outputs = F.run_sequence(frames, store, sample.intrinsics, EVAL)
        truth = [sample.motion(t) for t in range(1, length)]
        for t in range(1, length):
            delta_t[index, t - 1], delta_r[index, t - 1] = motion_losses(outputs[t].motion.transform, truth[t - 1])
        agreement[index] = projection_agreement(sample, truth)
        if index == 0 and image_dir and config.emit_images:
            predicted = [out.motion.transform for out in outputs[1:]]
            for name, motions in (("projected_truth", truth), ("projected_estimate", predicted)):
                for t, (warped, _) in enumerate(successive_projection(sample, motions, sample.frames[0]), start=2):
                    emit_image(warped, os.path.join(image_dir, image_name(name, t, ImageMode.RGB)), ImageMode.RGB)
            emit_steps(outputs, frames, sample.labels[:length], store.config.class_count, image_dir)
        logger.debug("motion experiment: %s done", sample.seq_id)

    mean_t = delta_t.mean(axis=0).tolist()
    mean_r = delta_r.mean(axis=0).tolist()
    blank_t = delta_t[:, pairs - blanked:]
    blank_r = delta_r[:, pairs - blanked:]
    report = ExperimentReport(
        experiment=ExperimentName.MOTION,
        columns=pair_columns(pairs),
        metrics={"delta_t": mean_t, "delta_r": mean_r, "projection_agreement": agreement.mean(axis=0).tolist()},
        trend={
            "integration_gain": pairs >= 4 and mean_t[3] < mean_t[0],
            "outage_finite": bool(np.all(np.isfinite(blank_t)) and np.all(np.isfinite(blank_r))),
            "outage_rotation_bounded": bool(blank_r.size == 0 or np.mean(blank_r < np.pi / 2) >= 0.95),
        },
        sequences=len(samples),
        seed=config.seed,
        config=config.model_dump(mode="json"),
    )
    return _finish(report, started)


def experiment_compare(
    dataset: SequenceDataset,
    filtered: ParameterStore,
    baseline: ParameterStore,
    config: Optional[EvalConfig] = None,
    image_dir: Optional[str] = None,
) -> ExperimentReport:
    """Per-frame Mean IoU of the filter against the unfiltered multi-task model."""
    config = config or EvalConfig()
    started = time.perf_counter()
    samples = select_sequences(dataset, config)
    length = min([config.compare_length] + [s.length for s in samples])
    k = filtered.config.class_count
    filtered_cm = [ConfusionMatrix(k) for _ in range(length)]
    baseline_cm = [ConfusionMatrix(k) for _ in range(length)]
    for index, sample in enumerate(samples):
        frames = sample.frames[:length].copy()
        if config.blank_last:
            frames[-1] = noise_like(np.random.default_rng([config.seed, index]), frames[-1].shape, config)
        filtered_out = F.run_sequence(frames, filtered, sample.intrinsics, EVAL)
        baseline_out = F.run_baseline(frames, baseline, EVAL)
        for t in range(length):
            filtered_cm[t].add(sample.labels[t], filtered_out[t].segmentation())
            baseline_cm[t].add(sample.labels[t], baseline_out[t].segmentation())
        if index == 0 and image_dir and config.emit_images:
            emit_steps(filtered_out, frames, sample.labels[:length], k, image_dir)
        logger.debug("compare experiment: %s done", sample.seq_id)

    f_iou = [c.mean_iou() for c in filtered_cm]
    b_iou = [c.mean_iou() for c in baseline_cm]
    later = slice(1, length) if length > 1 else slice(0, 1)
    report = ExperimentReport(
        experiment=ExperimentName.COMPARE,
        columns=frame_columns(length),
        metrics={
            "baseline_iou": b_iou,
            "filtered_iou": f_iou,
            "baseline_pixel_accuracy": [c.pixel_accuracy() for c in baseline_cm],
            "filtered_pixel_accuracy": [c.pixel_accuracy() for c in filtered_cm],
        },
        trend={
            "filtered_gain": float(np.mean(f_iou[later])) >= float(np.mean(b_iou[later])) + 0.01,
            "first_frame_match": abs(f_iou[0] - b_iou[0]) <= 0.01,
        },
        sequences=len(samples),
        seed=config.seed,
        config=config.model_dump(mode="json"),
    )
    return _finish(report, started)


# --- reports ---

def render_report(report: ExperimentReport) -> str:
    width = max([len(c) for c in report.columns] + [8])
    label_width = max([len(m) for m in report.metrics] + [6])
    return templates.get_template("report.txt.j2").render(report=report, width=width, label_width=label_width)


def write_report(report: ExperimentReport, directory: str) -> tuple[str, str]:
    os.makedirs(directory, exist_ok=True)
    json_path = os.path.join(directory, f"{report.experiment.value}.json")
    text_path = os.path.join(directory, f"{report.experiment.value}.txt")
    with open(json_path, "w") as handle:
        handle.write(report.to_json())
    with open(text_path, "w") as handle:
        handle.write(render_report(report))
    logger.info("Wrote %s and %s", json_path, text_path)
    return json_path, text_path
