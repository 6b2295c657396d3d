"""Pinhole geometry: rigid transforms, the depth-based forward warp and pose error metrics.

Camera coordinates are x right, y down, z forward; pixel (row v, column u) sits at its
integer coordinates. Rotations built from angles use R = Rz(gamma) @ Ry(beta) @ Rx(alpha).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from fmtnet import tensor as T
from fmtnet.errors import InvalidArgument
from fmtnet.models import CameraIntrinsics
from fmtnet.tensor import Tensor

logger = logging.getLogger(__name__)

ORTHONORMAL_TOLERANCE = 1e-9


@dataclass(frozen=True)
class RigidTransform:
    """Maps points x to R @ x + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rotation = np.asarray(self.rotation, dtype=np.float64)
        translation = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        if rotation.shape != (3, 3) or translation.shape != (3,):
            raise InvalidArgument(f"rigid transform needs 3x3 rotation and 3-vector, got {rotation.shape}, {translation.shape}")
        if not is_rotation(rotation):
            raise InvalidArgument("rotation matrix is not orthonormal with determinant 1")
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "RigidTransform":
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.shape == (12,):
            matrix = matrix.reshape(3, 4)
        if matrix.shape not in ((3, 4), (4, 4)):
            raise InvalidArgument(f"expected a 3x4 or 4x4 matrix, got {matrix.shape}")
        return cls(matrix[:3, :3], matrix[:3, 3])

    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out

    def rows(self) -> list[float]:
        """3x4 row-major values, as stored in dataset manifests."""
        return [float(v) for v in self.matrix()[:3].reshape(-1)]

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)

    def inverse(self) -> "RigidTransform":
        return invert(self)


def is_rotation(matrix: np.ndarray, tolerance: float = ORTHONORMAL_TOLERANCE) -> bool:
    gram = matrix.T @ matrix
    return bool(np.all(np.abs(gram - np.eye(3)) <= tolerance) and abs(np.linalg.det(matrix) - 1.0) <= tolerance)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """a ∘ b: apply b first, then a."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(a: RigidTransform) -> RigidTransform:
    rt = a.rotation.T
    return RigidTransform(rt, -(rt @ a.translation))


def relative_motion(pose_prev: RigidTransform, pose_next: RigidTransform) -> RigidTransform:
    """Camera motion tau taking camera-(t-1) coordinates to camera-t coordinates."""
    return compose(invert(pose_next), pose_prev)


def axis_rotation(axis: int, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    if axis == 0:
        return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    if axis == 1:
        return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    if axis == 2:
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    raise InvalidArgument(f"axis must be 0, 1 or 2, got {axis}")


def rotation_from_angles(angles: Sequence[float]) -> np.ndarray:
    alpha, beta, gamma = angles
    return axis_rotation(2, gamma) @ axis_rotation(1, beta) @ axis_rotation(0, alpha)


def rotation_from_sines(sin_abc: Sequence[float]) -> np.ndarray:
    """Rotation from the sines of (alpha, beta, gamma), each in [-1, 1]."""
    sines = np.asarray(sin_abc, dtype=np.float64)
    return rotation_from_angles(np.arcsin(sines))


def _matrix3(entries: list[list]) -> Tensor:
    return T.stack([T.stack([T.as_tensor(e) for e in row]) for row in entries])


def rotation_from_sines_tensor(sines: Tensor) -> Tensor:
    """Differentiable rotation_from_sines for a Tensor[3] of already clipped sines."""
    s = [sines[i] for i in range(3)]
    c = [T.cos(T.arcsin(v)) for v in s]
    rx = _matrix3([[1.0, 0.0, 0.0], [0.0, c[0], -s[0]], [0.0, s[0], c[0]]])
    ry = _matrix3([[c[1], 0.0, s[1]], [0.0, 1.0, 0.0], [-s[1], 0.0, c[1]]])
    rz = _matrix3([[c[2], -s[2], 0.0], [s[2], c[2], 0.0], [0.0, 0.0, 1.0]])
    return T.matmul(T.matmul(rz, ry), rx)


# --- warp ---

@dataclass(frozen=True)
class DepthMap:
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim == 2:
            values = values[None]
        if values.ndim != 3 or values.shape[0] != 1:
            raise InvalidArgument(f"depth map must be [1,H,W], got {values.shape}")
        if not np.all(values > 0):
            raise InvalidArgument("depth map must be strictly positive")
        object.__setattr__(self, "values", values)

    @classmethod
    def from_inverse(cls, inverse_depth: np.ndarray, floor: float = 1e-3) -> "DepthMap":
        return cls(1.0 / np.maximum(inverse_depth, floor))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[1], self.values.shape[2]


@dataclass
class WarpResult:
    warped: Tensor
    validity: np.ndarray
    # flat index of the winning source pixel per target, -1 where nothing landed
    source: np.ndarray


def transformed_coordinates(depth: DepthMap, tau: RigidTransform, K: CameraIntrinsics):
    """Back-project every pixel with its depth, move it by tau and re-project.

    Returns continuous target columns, rows and transformed depths, each [H,W].
    """
    h, w = depth.shape
    v, u = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    d = depth.values[0]
    x = (u - K.cx) / K.fx * d
    y = (v - K.cy) / K.fy * d
    z = d
    R, t = tau.rotation, tau.translation
    xt = R[0, 0] * x + R[0, 1] * y + R[0, 2] * z + t[0]
    yt = R[1, 0] * x + R[1, 1] * y + R[1, 2] * z + t[1]
    zt = R[2, 0] * x + R[2, 1] * y + R[2, 2] * z + t[2]
    safe_z = np.where(zt > 0, zt, 1.0)
    ut = K.fx * xt / safe_z + K.cx
    vt = K.fy * yt / safe_z + K.cy
    return ut, vt, zt


def splat_winners(depth: DepthMap, tau: RigidTransform, K: CameraIntrinsics) -> np.ndarray:
    """Source index per target pixel after nearest-pixel splatting with a z-buffer.

    Colliding sources resolve to the smaller transformed depth, then the smaller source index.
    """
    h, w = depth.shape
    ut, vt, zt = transformed_coordinates(depth, tau, K)
    col = np.rint(ut)
    row = np.rint(vt)
    landed = (zt > 0) & (col >= 0) & (col <= w - 1) & (row >= 0) & (row <= h - 1)
    src = np.flatnonzero(landed)
    tgt = (row.reshape(-1)[src] * w + col.reshape(-1)[src]).astype(np.int64)
    z_src = zt.reshape(-1)[src]
    order = np.lexsort((src, z_src))
    tgt_sorted = tgt[order]
    _, first = np.unique(tgt_sorted, return_index=True)
    source = np.full(h * w, -1, dtype=np.int64)
    source[tgt_sorted[first]] = src[order][first]
    return source.reshape(h, w)


def project_warp(
    features: Tensor,
    depth: Union[DepthMap, np.ndarray],
    tau: RigidTransform,
    K: CameraIntrinsics,
) -> WarpResult:
    """Forward-warp features[C,H,W] from frame t-1 into frame t.

    Differentiable in `features` only; the winner assignment is a constant.
    """
    if not isinstance(depth, DepthMap):
        depth = DepthMap(depth)
    if features.ndim != 3:
        raise InvalidArgument(f"features must be [C,H,W], got {features.shape}")
    if features.shape[1:] != depth.shape or (K.height, K.width) != depth.shape:
        raise InvalidArgument(
            f"features {features.shape[1:]}, depth {depth.shape} and intrinsics "
            f"{(K.height, K.width)} must agree on H,W"
        )
    source = splat_winners(depth, tau, K)
    validity = (source >= 0).astype(np.float64)[None]
    return WarpResult(warped=T.take_pixels(features, source), validity=validity, source=source)


# --- pose metrics ---

def translation_error(pred: RigidTransform, gt: RigidTransform) -> float:
    """Squared norm of R_pred^-1 (t_gt - t_pred)."""
    v = pred.rotation.T @ (gt.translation - pred.translation)
    return float(v @ v)


def rotation_error(pred: RigidTransform, gt: RigidTransform) -> float:
    """Angle (radians) of R_pred^-1 R_gt, with the cosine clamped to [-1, 1]."""
    cosine = (np.trace(pred.rotation.T @ gt.rotation) - 1.0) / 2.0
    return float(np.arccos(min(1.0, max(-1.0, cosine))))
