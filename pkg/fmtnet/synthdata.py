"""Synthetic static scenes seen from a moving pinhole camera.

Scenes are textured axis-aligned rectangles; every pixel is ray cast, so depth, labels and
camera motion are exact ground truth.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from fmtnet.errors import InvalidArgument
from fmtnet.geometry import RigidTransform, compose, relative_motion, rotation_from_angles
from fmtnet.models import CameraIntrinsics, MotionProfile, SequenceKind, SequenceManifest
from fmtnet.tensor_io import read_tensor, write_tensor

logger = logging.getLogger(__name__)

FAR_DEPTH = 10.0
BACKGROUND_CLASS = 0
BACKGROUND_COLOR = (0.45, 0.45, 0.45)
MIN_DEPTH, MAX_DEPTH = 1.0, 5.0
NOISE_TABLE = 64

CLASS_COLORS = [
    (0.45, 0.45, 0.45),
    (0.85, 0.25, 0.20),
    (0.20, 0.65, 0.30),
    (0.20, 0.35, 0.85),
    (0.90, 0.80, 0.20),
    (0.70, 0.30, 0.80),
    (0.20, 0.80, 0.85),
    (0.95, 0.55, 0.15),
]


def class_color(class_id: int) -> np.ndarray:
    if class_id < len(CLASS_COLORS):
        return np.array(CLASS_COLORS[class_id])
    hue = (class_id * 0.618033988749895) % 1.0
    return np.array([0.5 + 0.4 * np.cos(2 * np.pi * (hue + k / 3.0)) for k in range(3)])


@dataclass(frozen=True)
class Rectangle:
    """Rectangle lying in the plane x[axis] = offset, spanning lo..lo+extent on the other two axes."""

    axis: int
    offset: float
    lo: tuple[float, float]
    extent: tuple[float, float]
    class_id: int
    texture_seed: int
    texture_frequency: float

    @property
    def in_plane_axes(self) -> tuple[int, int]:
        a, b = [i for i in range(3) if i != self.axis]
        return a, b


@dataclass(frozen=True)
class Scene:
    rectangles: tuple[Rectangle, ...]
    class_count: int
    background_class: int = BACKGROUND_CLASS

    def __post_init__(self):
        for rect in self.rectangles:
            if not 0 <= rect.class_id < self.class_count:
                raise InvalidArgument(f"class id {rect.class_id} outside 0..{self.class_count - 1}")
            if min(rect.extent) <= 0:
                raise InvalidArgument("rectangle extents must be positive")


@dataclass
class SequenceSample:
    frames: np.ndarray
    depths: np.ndarray
    labels: np.ndarray
    poses: list[RigidTransform]
    intrinsics: CameraIntrinsics
    class_count: int
    seed: int
    seq_id: str = "seq"
    kind: SequenceKind = SequenceKind.DYNAMIC
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.frames)
        if not (len(self.depths) == len(self.labels) == len(self.poses) == n):
            raise InvalidArgument("frames, depths, labels and poses must have equal length")
        if np.any(self.depths <= 0):
            raise InvalidArgument("depths must be positive")
        if self.labels.min(initial=0) < 0 or self.labels.max(initial=0) >= self.class_count:
            raise InvalidArgument("labels outside the class range")

    @property
    def length(self) -> int:
        return len(self.frames)

    def motion(self, t: int) -> RigidTransform:
        """Ground-truth tau from frame t-1 to frame t (0-based t >= 1)."""
        return relative_motion(self.poses[t - 1], self.poses[t])

    def manifest(self) -> SequenceManifest:
        return SequenceManifest(
            seq_id=self.seq_id,
            kind=self.kind,
            length=self.length,
            class_count=self.class_count,
            seed=self.seed,
            intrinsics=self.intrinsics,
            poses=[pose.rows() for pose in self.poses],
        )

    def with_frames(self, frames: np.ndarray) -> "SequenceSample":
        return SequenceSample(
            frames=frames, depths=self.depths, labels=self.labels, poses=self.poses,
            intrinsics=self.intrinsics, class_count=self.class_count, seed=self.seed,
            seq_id=self.seq_id, kind=self.kind, extra=dict(self.extra),
        )


# --- textures ---

def value_noise(seed: int, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Smooth lattice noise in [0, 1] at continuous coordinates (a, b)."""
    table = np.random.default_rng(seed).random((NOISE_TABLE, NOISE_TABLE))
    a0, b0 = np.floor(a), np.floor(b)
    fa, fb = a - a0, b - b0
    fa, fb = fa * fa * (3 - 2 * fa), fb * fb * (3 - 2 * fb)
    i0 = a0.astype(np.int64) % NOISE_TABLE
    j0 = b0.astype(np.int64) % NOISE_TABLE
    i1, j1 = (i0 + 1) % NOISE_TABLE, (j0 + 1) % NOISE_TABLE
    top = table[i0, j0] * (1 - fb) + table[i0, j1] * fb
    bottom = table[i1, j0] * (1 - fb) + table[i1, j1] * fb
    return top * (1 - fa) + bottom * fa


def rectangle_texture(rect: Rectangle, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """RGB [N,3] at in-plane coordinates (u, v) measured from the rectangle corner."""
    noise = value_noise(rect.texture_seed, u * rect.texture_frequency, v * rect.texture_frequency)
    shade = 0.65 + 0.35 * noise
    return np.clip(class_color(rect.class_id)[None, :] * shade[:, None], 0.0, 1.0)


# --- scenes ---

def generate_scene(seed: int, class_count: int) -> Scene:
    if class_count < 2:
        raise InvalidArgument("a scene needs at least 2 classes")
    rng = np.random.default_rng(seed)
    count = int(rng.integers(3, 9))
    # distinct classes while there are enough foreground classes, reused after that
    classes = np.resize(rng.permutation(np.arange(1, class_count)), count)
    rectangles = []
    for class_id in classes:
        kind = rng.random()
        texture_seed = int(rng.integers(0, 2**31))
        frequency = float(rng.uniform(2.0, 6.0))
        if kind < 0.7:
            z = float(rng.uniform(MIN_DEPTH, MAX_DEPTH))
            size = rng.uniform(0.3, 1.0, size=2) * z
            center = rng.uniform(-0.7, 0.7, size=2) * z
            lo = (float(center[0] - size[0] / 2), float(center[1] - size[1] / 2))
            rect = Rectangle(2, z, lo, (float(size[0]), float(size[1])), int(class_id), texture_seed, frequency)
        elif kind < 0.85:
            y = float(rng.uniform(0.6, 1.2))
            z_near = float(rng.uniform(MIN_DEPTH, 2.5))
            z_far = float(rng.uniform(z_near + 1.0, MAX_DEPTH))
            rect = Rectangle(1, y, (-3.0, z_near), (6.0, z_far - z_near), int(class_id), texture_seed, frequency)
        else:
            x = float(rng.choice([-1.0, 1.0]) * rng.uniform(0.8, 1.5))
            z_near = float(rng.uniform(MIN_DEPTH, 2.5))
            z_far = float(rng.uniform(z_near + 1.0, MAX_DEPTH))
            rect = Rectangle(0, x, (-2.0, z_near), (4.0, z_far - z_near), int(class_id), texture_seed, frequency)
        rectangles.append(rect)
    return Scene(tuple(rectangles), class_count)


def pixel_rays(K: CameraIntrinsics) -> np.ndarray:
    """Camera-frame ray directions [H,W,3] with unit z, so ray parameter == z-depth."""
    v, u = np.meshgrid(np.arange(K.height, dtype=np.float64), np.arange(K.width, dtype=np.float64), indexing="ij")
    return np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], axis=-1)


def render(scene: Scene, pose: RigidTransform, K: CameraIntrinsics):
    """Ray cast one view. Returns frame [3,H,W], depth [1,H,W], labels [1,H,W]."""
    h, w = K.height, K.width
    directions = pixel_rays(K).reshape(-1, 3) @ pose.rotation.T
    origin = pose.translation
    depth = np.full(h * w, FAR_DEPTH)
    labels = np.full(h * w, scene.background_class, dtype=np.int32)
    colors = np.tile(np.array(BACKGROUND_COLOR), (h * w, 1))
    for rect in scene.rectangles:
        den = directions[:, rect.axis]
        hit_t = np.full(h * w, np.inf)
        np.divide(rect.offset - origin[rect.axis], den, out=hit_t, where=den != 0)
        points = origin[None, :] + hit_t[:, None] * np.where(np.isfinite(hit_t), 1.0, 0.0)[:, None] * directions
        a, b = rect.in_plane_axes
        pa = points[:, a] - rect.lo[0]
        pb = points[:, b] - rect.lo[1]
        inside = (pa >= 0) & (pa <= rect.extent[0]) & (pb >= 0) & (pb <= rect.extent[1])
        closer = np.isfinite(hit_t) & (hit_t > 1e-9) & inside & (hit_t < depth)
        if not np.any(closer):
            continue
        depth[closer] = hit_t[closer]
        labels[closer] = rect.class_id
        colors[closer] = rectangle_texture(rect, pa[closer], pb[closer])
    frame = colors.T.reshape(3, h, w)
    return frame, depth.reshape(1, h, w), labels.reshape(1, h, w)


# --- sequences ---

def _unit(vector: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(vector)
    return vector / norm if norm > 0 else vector


def sample_trajectory(rng: np.random.Generator, length: int, profile: MotionProfile) -> list[RigidTransform]:
    """Camera-to-world poses starting at the identity, with low-pass filtered per-step motion."""
    # mostly lateral translation keeps the camera in front of the geometry
    heading = _unit(rng.normal(size=3) * np.array([1.0, 1.0, 0.3]))
    spin = _unit(rng.normal(size=3))
    poses = [RigidTransform.identity()]
    velocity = angular = None
    for _ in range(1, length):
        step_t = _unit(heading + 0.3 * rng.normal(size=3)) * rng.uniform(profile.translation_min, profile.translation_max)
        step_r = _unit(spin + 0.3 * rng.normal(size=3)) * rng.uniform(profile.rotation_min, profile.rotation_max)
        if velocity is None:
            velocity, angular = step_t, step_r
        else:
            velocity = profile.smoothing * velocity + (1 - profile.smoothing) * step_t
            angular = profile.smoothing * angular + (1 - profile.smoothing) * step_r
        step = RigidTransform(rotation_from_angles(angular), velocity)
        poses.append(compose(poses[-1], step))
    return poses


def generate_sequence(
    seed: int,
    length: int = 7,
    profile: Optional[MotionProfile] = None,
    class_count: int = 6,
    intrinsics: Optional[CameraIntrinsics] = None,
    kind: SequenceKind = SequenceKind.DYNAMIC,
    seq_id: Optional[str] = None,
) -> SequenceSample:
    if length < 2:
        raise InvalidArgument("sequences need at least 2 frames")
    profile = profile or MotionProfile()
    K = intrinsics or CameraIntrinsics.default_for(32, 32)
    scene_seq, motion_seq = np.random.SeedSequence(seed).spawn(2)
    scene = generate_scene(int(scene_seq.generate_state(1)[0]), class_count)
    if kind == SequenceKind.STATIC:
        poses = [RigidTransform.identity()] * length
    else:
        poses = sample_trajectory(np.random.default_rng(motion_seq), length, profile)
    views = [render(scene, pose, K) for pose in poses] if kind == SequenceKind.DYNAMIC else [render(scene, poses[0], K)] * length
    frames, depths, labels = (np.stack(parts) for parts in zip(*views))
    return SequenceSample(
        frames=frames, depths=depths, labels=labels, poses=list(poses), intrinsics=K,
        class_count=class_count, seed=seed, seq_id=seq_id or f"seq_{seed}", kind=kind,
    )


# --- dataset files ---

MANIFEST = "manifest.json"


def frame_file(prefix: str, index: int) -> str:
    return f"{prefix}_{index:03d}.tnsr"


def save_sequence(root: str, sample: SequenceSample) -> str:
    path = os.path.join(root, sample.seq_id)
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, MANIFEST), "w") as handle:
        handle.write(sample.manifest().model_dump_json(indent=2))
    for t in range(sample.length):
        write_tensor(os.path.join(path, frame_file("rgb", t)), sample.frames[t])
        write_tensor(os.path.join(path, frame_file("depth", t)), sample.depths[t])
        write_tensor(os.path.join(path, frame_file("label", t)), sample.labels[t].astype(np.int32))
    return path


def load_sequence(path: str) -> SequenceSample:
    manifest_path = os.path.join(path, MANIFEST)
    if not os.path.isfile(manifest_path):
        raise InvalidArgument(f"no {MANIFEST} in {path}")
    with open(manifest_path) as handle:
        try:
            manifest = SequenceManifest.model_validate_json(handle.read())
        except ValueError as exc:
            raise InvalidArgument(f"invalid manifest {manifest_path}: {exc}")
    frames, depths, labels = [], [], []
    for t in range(manifest.length):
        frames.append(read_tensor(os.path.join(path, frame_file("rgb", t))))
        depths.append(read_tensor(os.path.join(path, frame_file("depth", t))))
        labels.append(read_tensor(os.path.join(path, frame_file("label", t))))
    return SequenceSample(
        frames=np.stack(frames),
        depths=np.stack(depths),
        labels=np.stack(labels).astype(np.int64),
        poses=[RigidTransform.from_matrix(np.array(rows)) for rows in manifest.poses],
        intrinsics=manifest.intrinsics,
        class_count=manifest.class_count,
        seed=manifest.seed,
        seq_id=manifest.seq_id,
        kind=manifest.kind,
    )


class SequenceDataset:
    """Sequences stored under one root directory, iterated in sorted id order."""

    def __init__(self, root: str, limit: Optional[int] = None):
        if not os.path.isdir(root):
            raise InvalidArgument(f"dataset directory {root} does not exist")
        self.root = root
        ids = sorted(d for d in os.listdir(root) if os.path.isfile(os.path.join(root, d, MANIFEST)))
        self.ids = ids[:limit] if limit else ids
        if not self.ids:
            raise InvalidArgument(f"no sequences found under {root}")

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, index: int) -> SequenceSample:
        return load_sequence(os.path.join(self.root, self.ids[index]))

    def __iter__(self) -> Iterator[SequenceSample]:
        for index in range(len(self)):
            yield self[index]

    def kinds(self) -> set[SequenceKind]:
        kinds = set()
        for seq_id in self.ids:
            with open(os.path.join(self.root, seq_id, MANIFEST)) as handle:
                kinds.add(SequenceManifest.model_validate_json(handle.read()).kind)
        return kinds


def sequence_seed(seed: int, split: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, split, index]).generate_state(1, dtype=np.uint64)[0] >> 1)


def generate_dataset(
    out: str,
    train: int,
    test: int,
    seed: int,
    height: int = 32,
    width: int = 32,
    length: int = 7,
    class_count: int = 6,
    kind: SequenceKind = SequenceKind.DYNAMIC,
    profile: Optional[MotionProfile] = None,
) -> dict[str, int]:
    K = CameraIntrinsics.default_for(width, height)
    written = {}
    for split_code, (split, count) in enumerate((("train", train), ("test", test))):
        root = os.path.join(out, split)
        for index in range(count):
            sample = generate_sequence(
                sequence_seed(seed, split_code, index), length, profile, class_count, K, kind,
                seq_id=f"{split}_{index:05d}",
            )
            save_sequence(root, sample)
            logger.debug("wrote %s/%s", split, sample.seq_id)
        written[split] = count
        logger.info("Generated %d %s sequences under %s", count, split, root)
    return written
