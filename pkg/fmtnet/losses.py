"""Training objectives and the learned multi-task weighting."""
from __future__ import annotations

import logging
from typing import Mapping, Union

import numpy as np

from fmtnet import tensor as T
from fmtnet.errors import InvalidArgument
from fmtnet.geometry import RigidTransform, rotation_error, translation_error
from fmtnet.networks import ParameterStore
from fmtnet.tensor import Tensor

logger = logging.getLogger(__name__)

COMPONENTS = ("seg", "depth_l1", "depth_sig", "trans", "rot")
GRADIENT_SPACINGS = (1, 2, 4)
ARCCOS_MARGIN = 1e-7

ArrayLike = Union[Tensor, np.ndarray]


def init_weights(store: ParameterStore) -> None:
    for name in COMPONENTS:
        store.add(f"weights/s_{name}", np.zeros(()))


def weights_of(store: ParameterStore) -> dict[str, Tensor]:
    return {name: store[f"weights/s_{name}"] for name in COMPONENTS}


def _check_same_shape(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise InvalidArgument(f"loss inputs differ in shape: {a.shape} vs {b.shape}")


# --- depth ---

def depth_l1(z_gt: ArrayLike, z_hat: ArrayLike) -> Tensor:
    """Sum over pixels of |z - z_hat| on inverse depths."""
    z_gt, z_hat = T.as_tensor(z_gt), T.as_tensor(z_hat)
    _check_same_shape(z_gt, z_hat)
    return T.sum_(T.abs_(z_gt - z_hat))


def _normalized_difference(a: Tensor, b: Tensor) -> Tensor:
    # |a| + |b| == 0 implies a == b == 0, so shifting the denominator by 1 there yields 0
    den = T.abs_(a) + T.abs_(b)
    return (a - b) / (den + (den.data == 0).astype(np.float64))


def scale_invariant_gradients(n: Tensor, spacing: int) -> tuple[Tensor, Tensor]:
    """Normalized forward differences along rows and columns, zero where the neighbour falls outside."""
    _, h, w = n.shape
    rows = _normalized_difference(n[:, spacing:, :], n[:, : h - spacing, :])
    cols = _normalized_difference(n[:, :, spacing:], n[:, :, : w - spacing])
    rows = T.pad(rows, ((0, 0), (0, spacing), (0, 0)))
    cols = T.pad(cols, ((0, 0), (0, 0), (0, spacing)))
    return rows, cols


def depth_sig(z_gt: ArrayLike, z_hat: ArrayLike) -> Tensor:
    """Scale-invariant gradient loss over spacings 1, 2 and 4."""
    z_gt, z_hat = T.as_tensor(z_gt), T.as_tensor(z_hat)
    _check_same_shape(z_gt, z_hat)
    if z_gt.ndim != 3 or min(z_gt.shape[1:]) <= max(GRADIENT_SPACINGS):
        raise InvalidArgument(f"depth_sig needs maps larger than {max(GRADIENT_SPACINGS)} pixels, got {z_gt.shape}")
    total = None
    for spacing in GRADIENT_SPACINGS:
        gt_rows, gt_cols = scale_invariant_gradients(z_gt, spacing)
        hat_rows, hat_cols = scale_invariant_gradients(z_hat, spacing)
        dr, dc = gt_rows - hat_rows, gt_cols - hat_cols
        term = T.sum_(T.sqrt(dr * dr + dc * dc))
        total = term if total is None else total + term
    return total


# --- segmentation ---

def seg_ce(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean pixel cross-entropy of logits [K,H,W] against integer labels [1,H,W]."""
    labels = np.asarray(labels)
    k, h, w = logits.shape
    if labels.shape != (1, h, w):
        raise InvalidArgument(f"labels {labels.shape} do not match logits {logits.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise InvalidArgument(f"labels outside 0..{k - 1}")
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    picked = T.log_softmax(logits, axis=0)[(labels[0].astype(np.int64), rows, cols)]
    return -T.mean(picked)


# --- motion ---

def motion_losses(pred: RigidTransform, gt: RigidTransform) -> tuple[float, float]:
    return translation_error(pred, gt), rotation_error(pred, gt)


def translation_loss(translation: Tensor, rotation: Tensor, gt: RigidTransform) -> Tensor:
    """||R_hat^T (t_gt - t_hat)||^2, differentiable in both estimates."""
    v = T.matmul(T.transpose(rotation), Tensor(gt.translation) - translation)
    return T.sum_(v * v)


def rotation_loss(rotation: Tensor, gt: RigidTransform) -> Tensor:
    """Angle of R_hat^T R_gt with the cosine kept 1e-7 inside [-1, 1]."""
    product = T.matmul(T.transpose(rotation), Tensor(gt.rotation))
    trace = T.sum_(product[(np.arange(3), np.arange(3))])
    cosine = T.clip((trace - 1.0) / 2.0, -1.0 + ARCCOS_MARGIN, 1.0 - ARCCOS_MARGIN)
    return T.arccos(cosine)


# --- weighting ---

def multitask_total(losses: Mapping[str, Tensor], weights: Mapping[str, Tensor]) -> Tensor:
    """Sum of exp(-s_i) L_i + s_i over the components present in `losses`."""
    total = None
    for name in COMPONENTS:
        if name not in losses:
            continue
        loss = losses[name]
        if not loss.is_finite():
            raise InvalidArgument(f"loss component {name} is not finite")
        s = weights[name]
        term = T.exp(-s) * loss + s
        total = term if total is None else total + term
    if total is None:
        raise InvalidArgument("multitask_total needs at least one loss component")
    unknown = set(losses) - set(COMPONENTS)
    if unknown:
        raise InvalidArgument(f"unknown loss components {sorted(unknown)}")
    return total
