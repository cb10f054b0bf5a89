"""Background replacement on the content image before stylization."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .backbones.base import Matte
from .errors import ShapeMismatchError
from .image_core import Image

__all__ = ["replace_background"]


def replace_background(
    img: Image,
    matte: Matte,
    color: Sequence[float] = (0.0, 0.0, 0.0),
    threshold: float | None = None,
) -> Image:
    """Composite the image over a flat color using the matte as opacity.

    out = alpha * img + (1 - alpha) * color, per pixel and channel. The
    default is soft compositing with the continuous matte; passing a
    ``threshold`` binarizes the matte first, reproducing a hard cut.
    """
    color_arr = np.asarray(tuple(color), dtype=np.float32)
    if color_arr.shape != (3,):
        raise ValueError(f"color must be a 3-vector, got shape {color_arr.shape}")
    if not ((color_arr >= 0) & (color_arr <= 1)).all():
        raise ValueError("color components must lie in [0, 1]")
    if matte.alpha.shape != (img.height, img.width):
        raise ShapeMismatchError(
            f"matte shape {matte.alpha.shape} does not match image "
            f"({img.height}, {img.width})"
        )
    alpha = matte.alpha
    if threshold is not None:
        alpha = (alpha >= threshold).astype(np.float32)
    alpha = alpha[:, :, None]
    out = alpha * img.pixels + (1.0 - alpha) * color_arr
    return Image(out)
