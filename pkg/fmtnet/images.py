"""PPM/PGM writers for frames, gates, inverse depth and label maps."""
import logging
import os
from typing import Optional, Union

import numpy as np
from PIL import Image

from fmtnet.errors import InvalidArgument
from fmtnet.models import ImageMode
from fmtnet.synthdata import class_color
from fmtnet.tensor import Tensor

logger = logging.getLogger(__name__)


def _to_uint8(values: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8))


def label_palette(class_count: int) -> np.ndarray:
    return np.stack([class_color(c) for c in range(class_count)])


def emit_image(
    values: Union[Tensor, np.ndarray],
    path: str,
    mode: Union[ImageMode, str],
    class_count: Optional[int] = None,
) -> str:
    """Write rgb [3,H,W] as PPM; gray/depth [1,H,W] as PGM; labels [1,H,W] as palette-coloured PPM."""
    mode = ImageMode(mode)
    array = values.data if isinstance(values, Tensor) else np.asarray(values)
    if array.ndim == 2:
        array = array[None]
    if mode == ImageMode.RGB:
        if array.shape[0] != 3:
            raise InvalidArgument(f"rgb images need 3 channels, got {array.shape}")
        image = Image.fromarray(_to_uint8(np.transpose(array, (1, 2, 0))))
    elif array.shape[0] != 1:
        raise InvalidArgument(f"{mode.value} images need a single channel, got {array.shape}")
    elif mode == ImageMode.GRAY:
        image = Image.fromarray(_to_uint8(array[0]))
    elif mode == ImageMode.DEPTH:
        peak = float(array.max())
        image = Image.fromarray(_to_uint8(array[0] / peak if peak > 0 else array[0]))
    else:
        labels = array[0].astype(np.int64)
        palette = label_palette(class_count or int(labels.max()) + 1)
        if labels.min() < 0 or labels.max() >= len(palette):
            raise InvalidArgument("label values outside the palette")
        image = Image.fromarray(_to_uint8(palette[labels]))
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    image.save(path, format="PPM")
    logger.debug("wrote %s", path)
    return path


def read_image(path: str) -> np.ndarray:
    """Channel-first float image in [0, 1]."""
    with Image.open(path) as image:
        array = np.asarray(image, dtype=np.float64) / 255.0
    return array[None] if array.ndim == 2 else np.transpose(array, (2, 0, 1))


def image_name(prefix: str, index: int, mode: Union[ImageMode, str]) -> str:
    return f"{prefix}_{index:03d}." + ("ppm" if ImageMode(mode) in (ImageMode.RGB, ImageMode.LABELS) else "pgm")
