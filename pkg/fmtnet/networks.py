"""Multi-task backbone: encoder with pyramid pooling plus semantic, depth and motion decoders.

Forward functions are pure given a `ParameterStore`. Parameter names are paths
``group/layer/name``; the first segment is the group that training stages freeze or train.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional

import numpy as np

from fmtnet import tensor as T
from fmtnet.errors import InvalidArgument
from fmtnet.models import CheckpointManifest, NetConfig, ParameterEntry
from fmtnet.tensor import RunningStats, Tensor
from fmtnet.tensor_io import read_tensor, write_tensor

logger = logging.getLogger(__name__)

ENCODER = "encoder"
SEMANTIC = "semantic"
DEPTH = "depth"
MOTION_DECODER = "motion_decoder"
FUSION = "fusion"
MOTION_FILTER = "motion_filter"
MOTION_OUT = "motion_out"
GATE = "gate"
WEIGHTS = "weights"

GROUPS = (ENCODER, SEMANTIC, DEPTH, MOTION_DECODER, FUSION, MOTION_FILTER, MOTION_OUT, GATE, WEIGHTS)
# counted as "filter" parameters when comparing against the unfiltered model
FILTER_GROUPS = (GATE, DEPTH, MOTION_DECODER, FUSION, MOTION_FILTER)

ACCELERATION_SIZE = 3


def group_of(name: str) -> str:
    return name.split("/", 1)[0]


class ParameterStore:
    """Named trainable tensors plus batchnorm running statistics."""

    def __init__(self, config: NetConfig):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.stats: dict[str, RunningStats] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise InvalidArgument(f"parameter {name} registered twice")
        if group_of(name) not in GROUPS:
            raise InvalidArgument(f"parameter {name} is outside the known groups")
        tensor = Tensor(value, requires_grad=True)
        self.params[name] = tensor
        return tensor

    def add_stats(self, name: str, size: int) -> RunningStats:
        if name in self.stats:
            raise InvalidArgument(f"running statistics {name} registered twice")
        self.stats[name] = RunningStats(size)
        return self.stats[name]

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self.params[name]
        except KeyError:
            raise InvalidArgument(f"unknown parameter {name}")

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self, groups: Optional[Iterable[str]] = None) -> list[str]:
        wanted = None if groups is None else set(groups)
        return sorted(n for n in self.params if wanted is None or group_of(n) in wanted)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for name in sorted(self.params):
            yield name, self.params[name]

    def set_trainable(self, groups: Iterable[str]) -> None:
        trainable = set(groups)
        for name, param in self.params.items():
            param.requires_grad = group_of(name) in trainable

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.zero_grad()

    def snapshot(self) -> dict[str, np.ndarray]:
        """Copies of every parameter and running statistic, keyed like checkpoint entries."""
        out = {name: p.data.copy() for name, p in self.params.items()}
        for name, stats in self.stats.items():
            out[f"{name}/running_mean"] = stats.mean.copy()
            out[f"{name}/running_var"] = stats.var.copy()
        return out

    def copy_matching(self, other: "ParameterStore") -> int:
        """Take every parameter and statistic of `other` whose name and shape match. Returns the count copied."""
        copied = 0
        for name, param in other.params.items():
            if name in self.params and self.params[name].shape == param.shape:
                self.params[name].data = param.data.copy()
                copied += 1
        for name, stats in other.stats.items():
            if name in self.stats and self.stats[name].mean.shape == stats.mean.shape:
                self.stats[name].mean = stats.mean.copy()
                self.stats[name].var = stats.var.copy()
                copied += 1
        return copied


@dataclass
class Mode:
    """Forward-pass switches: train/eval, dropout randomness and frozen groups."""

    training: bool = False
    rng: Optional[np.random.Generator] = None
    frozen: frozenset[str] = field(default_factory=frozenset)

    def active(self, group: str) -> bool:
        return self.training and group not in self.frozen


EVAL = Mode()


# --- layer registration ---

def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def register_conv(
    store: ParameterStore, rng: np.random.Generator, name: str,
    c_out: int, c_in: int, kernel: int, batchnorm: bool = True,
) -> None:
    store.add(f"{name}/weight", he_normal(rng, (c_out, c_in, kernel, kernel), c_in * kernel * kernel))
    store.add(f"{name}/bias", np.zeros(c_out))
    if batchnorm:
        register_batchnorm(store, f"{name}/bn", c_out)


def register_linear(
    store: ParameterStore, rng: np.random.Generator, name: str,
    n_out: int, n_in: int, batchnorm: bool = False,
) -> None:
    store.add(f"{name}/weight", he_normal(rng, (n_out, n_in), n_in))
    store.add(f"{name}/bias", np.zeros(n_out))
    if batchnorm:
        register_batchnorm(store, f"{name}/bn", n_out)


def register_batchnorm(store: ParameterStore, name: str, size: int) -> None:
    store.add(f"{name}/gamma", np.ones(size))
    store.add(f"{name}/beta", np.zeros(size))
    store.add_stats(name, size)


# --- layer forward ---

def batchnorm_layer(store: ParameterStore, name: str, x: Tensor, mode: Mode) -> Tensor:
    return T.batchnorm(
        x, store[f"{name}/gamma"], store[f"{name}/beta"], store.stats[name], training=mode.active(group_of(name)),
    )


def conv_layer(
    store: ParameterStore, name: str, x: Tensor, mode: Mode,
    stride: int = 1, batchnorm: bool = True, relu: bool = True,
) -> Tensor:
    kernel = store[f"{name}/weight"]
    y = T.conv2d(x, kernel, store[f"{name}/bias"], stride=stride, padding=kernel.shape[2] // 2)
    if batchnorm:
        y = batchnorm_layer(store, f"{name}/bn", y, mode)
    return T.relu(y) if relu else y


def linear_layer(
    store: ParameterStore, name: str, x: Tensor, mode: Mode,
    batchnorm: bool = False, relu: bool = False,
) -> Tensor:
    y = T.matmul(store[f"{name}/weight"], x) + store[f"{name}/bias"]
    if batchnorm:
        y = batchnorm_layer(store, f"{name}/bn", y, mode)
    return T.relu(y) if relu else y


def decoder_dropout(x: Tensor, group: str, mode: Mode, p: float) -> Tensor:
    return T.dropout(x, p, mode.rng, training=mode.active(group))


# --- backbone ---

def init_backbone(store: ParameterStore, rng: np.random.Generator) -> None:
    cfg = store.config
    c = cfg.feature_channels
    register_conv(store, rng, "encoder/stem", cfg.stem_width, cfg.in_channels, 3)
    width = cfg.stem_width
    for i, out in enumerate(cfg.encoder_widths):
        register_conv(store, rng, f"encoder/down{i}", out, width, 3)
        width = out
    for i, _ in enumerate(cfg.pyramid_divisors):
        register_conv(store, rng, f"encoder/pool{i}", cfg.pyramid_features, width, 1, batchnorm=False)
    register_conv(store, rng, "encoder/fuse", c, width + cfg.pyramid_features * len(cfg.pyramid_divisors), 3)

    register_conv(store, rng, "semantic/hidden", cfg.semantic_width, c, 3)
    register_conv(store, rng, "semantic/head", cfg.class_count, cfg.semantic_width, 3, batchnorm=False)

    register_conv(store, rng, "depth/conv0", cfg.depth_width, c, 3)
    register_conv(store, rng, "depth/conv1", cfg.depth_width, cfg.depth_width, 1)
    register_conv(store, rng, "depth/conv2", 1, cfg.depth_width, 1)

    width = 2 * c
    for i, out in enumerate(cfg.motion_widths):
        register_conv(store, rng, f"motion_decoder/conv{i}", out, width, 3)
        width = out
    gh, gw = cfg.motion_grid()
    register_linear(store, rng, "motion_decoder/fc", cfg.motion_feature_width, width * gh * gw, batchnorm=True)

    register_linear(store, rng, "fusion/project", cfg.motion_feature_width, cfg.motion_feature_width + ACCELERATION_SIZE)
    register_linear(store, rng, "motion_out/project", 6, cfg.motion_head_width)


def check_frame(x: Tensor, config: NetConfig) -> None:
    expected = (config.in_channels, config.height, config.width)
    if x.shape != expected:
        raise InvalidArgument(f"frame shape {x.shape} does not match the configured {expected}")


def encode(x: Tensor, store: ParameterStore, mode: Mode = EVAL) -> Tensor:
    """Frame [3,H,W] -> features [C, H/4, W/4] (default config)."""
    cfg = store.config
    if x.ndim != 3 or x.shape[1] % cfg.downsample or x.shape[2] % cfg.downsample:
        raise InvalidArgument(f"input {x.shape} is not divisible by the encoder downsampling {cfg.downsample}")
    y = conv_layer(store, "encoder/stem", x, mode)
    for i, _ in enumerate(cfg.encoder_widths):
        y = conv_layer(store, f"encoder/down{i}", y, mode, stride=2)
    levels = [y]
    for i, kernel in enumerate(cfg.pyramid_kernels()):
        pooled = T.avg_pool2d(y, kernel)
        pooled = conv_layer(store, f"encoder/pool{i}", pooled, mode, batchnorm=False)
        levels.append(T.upsample_nearest(pooled, kernel))
    return conv_layer(store, "encoder/fuse", T.concat(levels, axis=0), mode)


def decode_semantic(r: Tensor, store: ParameterStore, mode: Mode = EVAL) -> Tensor:
    """Features -> class logits [K,H,W]; no softmax."""
    cfg = store.config
    if r.shape != (cfg.feature_channels, cfg.feature_height, cfg.feature_width):
        raise InvalidArgument(f"semantic decoder got features {r.shape}")
    y = conv_layer(store, "semantic/hidden", r, mode)
    y = decoder_dropout(y, SEMANTIC, mode, cfg.dropout)
    y = T.upsample_nearest(y, cfg.downsample)
    return conv_layer(store, "semantic/head", y, mode, batchnorm=False, relu=False)


def decode_depth(r: Tensor, store: ParameterStore, mode: Mode = EVAL) -> Tensor:
    """Features -> non-negative inverse depth [1,h,w]."""
    y = conv_layer(store, "depth/conv0", r, mode)
    y = decoder_dropout(y, DEPTH, mode, store.config.dropout)
    y = conv_layer(store, "depth/conv1", y, mode)
    return conv_layer(store, "depth/conv2", y, mode)


def depth_from_inverse(z_hat: np.ndarray, floor: float = 1e-3) -> np.ndarray:
    return 1.0 / np.maximum(z_hat, floor)


def decode_motion(pair: Tensor, store: ParameterStore, mode: Mode = EVAL) -> Tensor:
    """Concatenated [r_prev, r_next] (2C channels) -> motion feature vector."""
    cfg = store.config
    if pair.ndim != 3 or pair.shape[0] != 2 * cfg.feature_channels:
        raise InvalidArgument(f"motion decoder expects {2 * cfg.feature_channels} channels, got {pair.shape}")
    y = pair
    for i, stride in enumerate(cfg.motion_strides):
        y = conv_layer(store, f"motion_decoder/conv{i}", y, mode, stride=stride)
    return linear_layer(store, "motion_decoder/fc", T.reshape(y, (-1,)), mode, batchnorm=True, relu=True)


def fuse_acceleration(m: Tensor, acceleration: Optional[Tensor], store: ParameterStore, mode: Mode = EVAL) -> Tensor:
    if acceleration is None:
        return m
    acceleration = T.as_tensor(acceleration)
    if acceleration.shape != (ACCELERATION_SIZE,):
        raise InvalidArgument(f"acceleration must be a 3-vector, got {acceleration.shape}")
    return linear_layer(store, "fusion/project", T.concat([m, acceleration]), mode)


def motion_output(features: Tensor, store: ParameterStore, mode: Mode = EVAL) -> Tensor:
    """The 6-vector (translation, rotation sines) layer shared by the filter head and the baseline."""
    return linear_layer(store, "motion_out/project", features, mode)


# --- checkpoints ---

def _tensor_file(name: str) -> str:
    return name.replace("/", ".") + ".tnsr"


def save_checkpoint(store: ParameterStore, path: str) -> CheckpointManifest:
    os.makedirs(path, exist_ok=True)
    entries = []
    for name, param in store.items():
        write_tensor(os.path.join(path, _tensor_file(name)), param.data)
        entries.append(ParameterEntry(name=name, shape=list(param.shape)))
    for name in sorted(store.stats):
        stats = store.stats[name]
        for kind, values in (("running_mean", stats.mean), ("running_var", stats.var)):
            entry = f"{name}/{kind}"
            write_tensor(os.path.join(path, _tensor_file(entry)), values)
            entries.append(ParameterEntry(name=entry, shape=list(values.shape), kind=kind))
    manifest = CheckpointManifest(net=store.config, entries=entries)
    with open(os.path.join(path, "manifest.json"), "w") as handle:
        handle.write(manifest.model_dump_json(indent=2))
    logger.info("Saved %d parameter tensors to %s", len(entries), path)
    return manifest


def load_checkpoint(path: str) -> ParameterStore:
    manifest_path = os.path.join(path, "manifest.json")
    if not os.path.isfile(manifest_path):
        raise InvalidArgument(f"{path} is not a checkpoint directory")
    with open(manifest_path) as handle:
        try:
            manifest = CheckpointManifest.model_validate_json(handle.read())
        except ValueError as exc:
            raise InvalidArgument(f"invalid checkpoint manifest: {exc}")
    store = ParameterStore(manifest.net)
    for entry in manifest.entries:
        values = read_tensor(os.path.join(path, _tensor_file(entry.name)))
        if list(values.shape) != entry.shape:
            raise InvalidArgument(f"{entry.name}: file shape {values.shape} disagrees with manifest {entry.shape}")
        if entry.kind == "parameter":
            store.add(entry.name, values)
            continue
        layer = entry.name.rsplit("/", 1)[0]
        stats = store.stats.get(layer) or store.add_stats(layer, values.shape[0])
        if entry.kind == "running_mean":
            stats.mean = values
        else:
            stats.var = values
    return store


def count_parameters(store: ParameterStore, groups: Optional[Iterable[str]] = None) -> dict[str, int]:
    """Scalar parameter counts per group (running statistics excluded)."""
    counts: dict[str, int] = {}
    for name in store.names(groups):
        counts[group_of(name)] = counts.get(group_of(name), 0) + store[name].size
    return counts
