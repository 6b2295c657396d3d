import json
from typing import Optional
from enum import Enum

import numpy as np
from pydantic import ConfigDict, model_validator
from sqlmodel import SQLModel, Field


class Stage(str, Enum):
    MOTION_PRETRAIN = "motion-pretrain"
    UPDATE_PRETRAIN = "update-pretrain"
    FINETUNE = "finetune"
    BASELINE = "baseline"


class SequenceKind(str, Enum):
    DYNAMIC = "dynamic"
    STATIC = "static"


class ExperimentName(str, Enum):
    STATIC = "static"
    MOTION = "motion"
    COMPARE = "compare"


class ImageMode(str, Enum):
    RGB = "rgb"
    GRAY = "gray"
    DEPTH = "depth"
    LABELS = "labels"


# --- Camera ---

class CameraIntrinsics(SQLModel):
    fx: float = Field(gt=0)
    fy: float = Field(gt=0)
    cx: float = Field(ge=0)
    cy: float = Field(ge=0)
    width: int = Field(gt=0)
    height: int = Field(gt=0)

    @model_validator(mode="after")
    def principal_point_inside(self):
        if not (self.cx < self.width and self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        return self

    @classmethod
    def default_for(cls, width: int, height: int) -> "CameraIntrinsics":
        return cls(fx=width / 2, fy=width / 2, cx=(width - 1) / 2, cy=(height - 1) / 2, width=width, height=height)

    def scaled(self, factor: float) -> "CameraIntrinsics":
        """Intrinsics of the same camera sampled on a grid `factor` times as dense."""
        return CameraIntrinsics(
            fx=self.fx * factor,
            fy=self.fy * factor,
            cx=(self.cx + 0.5) * factor - 0.5,
            cy=(self.cy + 0.5) * factor - 0.5,
            width=int(round(self.width * factor)),
            height=int(round(self.height * factor)),
        )

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


# --- Perturbations ---

class ClutterKernel(SQLModel):
    center_x: float
    center_y: float
    std_x: float = Field(gt=0)
    std_y: float = Field(gt=0)


class PerturbationSpec(SQLModel):
    noise_variance: float = Field(ge=0)
    clutter_kernel_count: int = Field(ge=0)
    clutter_kernels: list[ClutterKernel] = []
    lighting_frame_index: int = Field(ge=0)
    lighting_scale: float = Field(ge=0)
    lighting_sign: int
    seed: int

    @model_validator(mode="after")
    def kernels_match_count(self):
        if len(self.clutter_kernels) != self.clutter_kernel_count:
            raise ValueError("clutter_kernel_count does not match the kernel list")
        if self.lighting_sign not in (-1, 1):
            raise ValueError("lighting_sign must be 1 or -1")
        return self


class PerturbationConfig(SQLModel):
    noise_variance_max: float = Field(default=0.001, ge=0)
    max_kernels: int = Field(default=8, ge=0)
    std_min: float = Field(default=10.0, gt=0)
    std_max: float = Field(default=36.0, gt=0)
    scale_min: float = Field(default=0.5, ge=0)
    scale_max: float = Field(default=1.0, ge=0)


# --- Synthetic data ---

class MotionProfile(SQLModel):
    translation_min: float = Field(default=0.05, ge=0)
    translation_max: float = Field(default=0.15, ge=0)
    rotation_min: float = Field(default=0.01, ge=0)
    rotation_max: float = Field(default=0.04, ge=0)
    smoothing: float = Field(default=0.7, ge=0, lt=1)

    @classmethod
    def still(cls) -> "MotionProfile":
        return cls(translation_min=0, translation_max=0, rotation_min=0, rotation_max=0)


class SequenceManifest(SQLModel):
    seq_id: str
    kind: SequenceKind = Field(default=SequenceKind.DYNAMIC)
    length: int = Field(gt=0)
    class_count: int = Field(ge=2)
    seed: int
    intrinsics: CameraIntrinsics
    # camera-to-world, 3x4 row-major per frame
    poses: list[list[float]]

    @model_validator(mode="after")
    def one_pose_per_frame(self):
        if len(self.poses) != self.length or any(len(p) != 12 for p in self.poses):
            raise ValueError("expected one 12-value pose per frame")
        return self


# --- Networks / training ---

class NetConfig(SQLModel):
    model_config = ConfigDict(extra="forbid")

    height: int = Field(default=32, gt=0)
    width: int = Field(default=32, gt=0)
    in_channels: int = Field(default=3, gt=0)
    class_count: int = Field(default=6, ge=2)
    stem_width: int = Field(default=16, gt=0)
    encoder_widths: list[int] = [32, 32]
    feature_channels: int = Field(default=32, gt=0)
    pyramid_divisors: list[int] = [1, 2, 4]
    pyramid_features: int = Field(default=32, gt=0)
    semantic_width: int = Field(default=32, gt=0)
    depth_width: int = Field(default=64, gt=0)
    motion_widths: list[int] = [64, 128, 128]
    motion_strides: list[int] = [2, 2, 1]
    motion_feature_width: int = Field(default=128, gt=0)
    motion_state_width: int = Field(default=128, gt=0)
    motion_head_width: int = Field(default=128, gt=0)
    dropout: float = Field(default=0.1, ge=0, lt=1)

    @model_validator(mode="after")
    def sizes_consistent(self):
        lists = (self.encoder_widths, self.pyramid_divisors, self.motion_widths, self.motion_strides)
        if any(v <= 0 for values in lists for v in values):
            raise ValueError("widths, divisors and strides must be positive")
        if len(self.motion_widths) != len(self.motion_strides):
            raise ValueError("motion_widths and motion_strides differ in length")
        if self.height % self.downsample or self.width % self.downsample:
            raise ValueError("image size must be divisible by the encoder downsampling factor")
        if self.feature_height < 4 or self.feature_width < 4:
            raise ValueError("encoder output must be at least 4x4")
        for divisor in self.pyramid_divisors:
            if self.feature_height % divisor or self.feature_width % (self.feature_height // divisor):
                raise ValueError(f"pyramid divisor {divisor} does not tile the encoder output")
        # the unfiltered baseline feeds motion features straight into the shared output layer
        if self.motion_head_width != self.motion_feature_width:
            raise ValueError("motion_head_width must equal motion_feature_width")
        return self

    def pyramid_kernels(self) -> list[int]:
        return [self.feature_height // divisor for divisor in self.pyramid_divisors]

    @property
    def downsample(self) -> int:
        return 2 ** len(self.encoder_widths)

    @property
    def feature_height(self) -> int:
        return self.height // self.downsample

    @property
    def feature_width(self) -> int:
        return self.width // self.downsample

    def motion_grid(self) -> tuple[int, int]:
        h, w = self.feature_height, self.feature_width
        for stride in self.motion_strides:
            h = (h - 1) // stride + 1
            w = (w - 1) // stride + 1
        return h, w


class TrainConfig(SQLModel):
    model_config = ConfigDict(extra="forbid")

    stage: Stage = Field(default=Stage.FINETUNE)
    learning_rate: float = Field(default=1e-3, ge=0)
    beta1: float = Field(default=0.9, gt=0, lt=1)
    beta2: float = Field(default=0.999, gt=0, lt=1)
    epsilon: float = Field(default=1e-8, gt=0)
    weight_decay: float = Field(default=1e-4, ge=0)
    sequence_length: int = Field(default=7, ge=2)
    epochs: int = Field(default=1, ge=1)
    accumulation: int = Field(default=4, ge=1)
    max_sequences: Optional[int] = Field(default=None, ge=1)
    seed: int = 0
    net: NetConfig = Field(default_factory=NetConfig)


class EvalConfig(SQLModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = 0
    max_sequences: Optional[int] = Field(default=None, ge=1)
    noise_mean: float = 0.5
    noise_std: float = Field(default=0.25, ge=0)
    static_length: int = Field(default=4, ge=2)
    motion_length: int = Field(default=10, ge=2)
    motion_blanked: int = Field(default=5, ge=0)
    compare_length: int = Field(default=7, ge=1)
    blank_last: bool = False
    emit_images: bool = True


# --- Persistence ---

class ParameterEntry(SQLModel):
    name: str
    shape: list[int]
    dtype: str = "float64"
    kind: str = "parameter"


class CheckpointManifest(SQLModel):
    net: NetConfig
    entries: list[ParameterEntry]


class MetricsLogLine(SQLModel):
    epoch: int
    stage: Stage
    sequences: int
    losses: dict[str, float]
    weights: dict[str, float]


class ExperimentReport(SQLModel):
    experiment: ExperimentName
    columns: list[str]
    metrics: dict[str, list[float]]
    trend: dict[str, bool] = {}
    sequences: int
    seed: int
    config: dict = {}
    wall_clock_s: float = 0.0

    def to_json(self) -> str:
        payload = self.model_dump(mode="json", exclude={"wall_clock_s"})
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"
