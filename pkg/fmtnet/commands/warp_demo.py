import logging
import os

import numpy as np

from fmtnet.geometry import project_warp
from fmtnet.images import emit_image, image_name
from fmtnet.models import ImageMode
from fmtnet.synthdata import load_sequence
from fmtnet.tensor import Tensor

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("warp-demo", help="warp each frame into the next with ground-truth depth and motion")
    parser.add_argument("--seq", required=True, help="sequence directory")
    parser.add_argument("--out", required=True)
    parser.set_defaults(handler=run)


def run(args) -> None:
    sample = load_sequence(args.seq)
    K = sample.intrinsics
    for t in range(1, sample.length):
        tau = sample.motion(t)
        rgb = project_warp(Tensor(sample.frames[t - 1]), sample.depths[t - 1], tau, K)
        labels = project_warp(Tensor(sample.labels[t - 1].astype(np.float64)), sample.depths[t - 1], tau, K)
        valid = rgb.validity[0] > 0
        agreement = float(np.mean(np.rint(labels.warped.data[0][valid]) == sample.labels[t][0][valid])) if valid.any() else 0.0
        emit_image(rgb.warped, os.path.join(args.out, image_name("warped", t + 1, ImageMode.RGB)), ImageMode.RGB)
        emit_image(rgb.validity, os.path.join(args.out, image_name("validity", t + 1, ImageMode.GRAY)), ImageMode.GRAY)
        emit_image(sample.frames[t], os.path.join(args.out, image_name("target", t + 1, ImageMode.RGB)), ImageMode.RGB)
        logger.info("frame %d: %.1f%% valid, label agreement %.3f", t + 1, 100.0 * valid.mean(), agreement)
