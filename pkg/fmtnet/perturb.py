"""Per-sequence corruptions: Gaussian pixel noise, Gaussian-kernel clutter and a decaying lighting jump."""
from __future__ import annotations

import json
import logging
import os
from typing import Optional

import numpy as np

from fmtnet.errors import InvalidArgument
from fmtnet.models import ClutterKernel, PerturbationConfig, PerturbationSpec
from fmtnet.synthdata import SequenceDataset, SequenceSample, save_sequence

logger = logging.getLogger(__name__)

LIGHTING_DECAY = 0.3
TRUNCATION = 3.0
SPEC_FILE = "perturbation.json"


def sample_spec(
    seed: int,
    height: int = 32,
    width: int = 32,
    length: int = 7,
    config: Optional[PerturbationConfig] = None,
) -> PerturbationSpec:
    """Draw every perturbation parameter uniformly from its configured interval."""
    config = config or PerturbationConfig()
    if seed < 0:
        raise InvalidArgument("perturbation seeds are unsigned")
    rng = np.random.default_rng(seed)
    variance = float(rng.uniform(0.0, config.noise_variance_max))
    count = int(rng.integers(0, config.max_kernels + 1))
    kernels = [
        ClutterKernel(
            center_x=float(rng.integers(0, width)),
            center_y=float(rng.integers(0, height)),
            std_x=float(rng.uniform(config.std_min, config.std_max)),
            std_y=float(rng.uniform(config.std_min, config.std_max)),
        )
        for _ in range(count)
    ]
    return PerturbationSpec(
        noise_variance=variance,
        clutter_kernel_count=count,
        clutter_kernels=kernels,
        lighting_frame_index=int(rng.integers(0, length)),
        lighting_scale=float(rng.uniform(config.scale_min, config.scale_max)),
        lighting_sign=1 if rng.random() < 0.5 else -1,
        seed=seed,
    )


def build_clutter_mask(spec: PerturbationSpec, height: int, width: int) -> np.ndarray:
    """Sum of unit-peak anisotropic Gaussians truncated at 3 sigma per axis, clipped to [0, 1]. Shape [1,H,W]."""
    if height <= 0 or width <= 0:
        raise InvalidArgument("mask size must be positive")
    rows = np.arange(height, dtype=np.float64)[:, None]
    cols = np.arange(width, dtype=np.float64)[None, :]
    mask = np.zeros((height, width))
    for kernel in spec.clutter_kernels:
        dy = (rows - kernel.center_y) / kernel.std_y
        dx = (cols - kernel.center_x) / kernel.std_x
        bump = np.exp(-0.5 * (dx * dx + dy * dy))
        bump *= (np.abs(dy) <= TRUNCATION) & (np.abs(dx) <= TRUNCATION)
        mask += bump
    return np.clip(mask, 0.0, 1.0)[None]


def apply_clutter(frames: np.ndarray, mask: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """Blend towards the per-channel mean: x (1 - m) + mu m. Works on [C,H,W] or [T,C,H,W]."""
    if np.any(mask < 0) or np.any(mask > 1):
        raise InvalidArgument("clutter mask must lie in [0, 1]")
    mu = np.asarray(mu, dtype=np.float64)[:, None, None]
    return frames * (1.0 - mask) + mu * mask


def apply_lighting(frames: np.ndarray, spec: PerturbationSpec) -> np.ndarray:
    start = spec.lighting_frame_index
    if start >= len(frames):
        raise InvalidArgument(f"lighting frame {start} outside a {len(frames)}-frame sequence")
    out = frames.copy()
    for j in range(start, len(frames)):
        out[j] = out[j] + spec.lighting_sign * LIGHTING_DECAY ** (j - start) * spec.lighting_scale
    return out


def add_noise(frames: np.ndarray, spec: PerturbationSpec) -> np.ndarray:
    if spec.noise_variance == 0:
        return frames.copy()
    std = np.sqrt(spec.noise_variance)
    out = np.empty_like(frames)
    for t, frame in enumerate(frames):
        rng = np.random.default_rng([spec.seed, t])
        out[t] = frame + rng.normal(0.0, std, size=frame.shape)
    return out


def sequence_mean(frames: np.ndarray) -> np.ndarray:
    """Per-channel mean over all pixels and frames of [T,C,H,W]."""
    return frames.mean(axis=(0, 2, 3))


def perturb_sequence(frames: np.ndarray, spec: PerturbationSpec) -> np.ndarray:
    """Clutter, then lighting, then noise, then clip to [0, 1]."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 4:
        raise InvalidArgument(f"expected frames [T,C,H,W], got {frames.shape}")
    mu = sequence_mean(frames)
    mask = build_clutter_mask(spec, frames.shape[2], frames.shape[3])
    out = apply_clutter(frames, mask, mu)
    out = apply_lighting(out, spec)
    out = add_noise(out, spec)
    return np.clip(out, 0.0, 1.0)


def sequence_spec_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1, dtype=np.uint64)[0] >> 1)


def perturb_dataset(
    source: str,
    target: str,
    seed: int,
    config: Optional[PerturbationConfig] = None,
) -> int:
    """Perturb every sequence under `source` into `target`, recording each spec beside it.

    A root holding train/test splits is perturbed split by split.
    """
    splits = [s for s in ("train", "test") if os.path.isdir(os.path.join(source, s))]
    if splits:
        return sum(
            perturb_dataset(os.path.join(source, s), os.path.join(target, s), sequence_spec_seed(seed, 1 << 20 | i), config)
            for i, s in enumerate(splits)
        )
    dataset = SequenceDataset(source)
    for index, sample in enumerate(dataset):
        spec = sample_spec(
            sequence_spec_seed(seed, index),
            height=sample.intrinsics.height,
            width=sample.intrinsics.width,
            length=sample.length,
            config=config,
        )
        perturbed: SequenceSample = sample.with_frames(perturb_sequence(sample.frames, spec))
        path = save_sequence(target, perturbed)
        with open(os.path.join(path, SPEC_FILE), "w") as handle:
            json.dump(spec.model_dump(mode="json"), handle, indent=2, sort_keys=True)
        logger.debug("perturbed %s with %d kernels", sample.seq_id, spec.clutter_kernel_count)
    logger.info("Perturbed %d sequences from %s into %s", len(dataset), source, target)
    return len(dataset)
