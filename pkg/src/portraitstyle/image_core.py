"""Image representation, file I/O, resizing, and the coarse-to-fine schedule.

All images in the pipeline are H×W×3 sRGB rasters with unit-interval float
pixels. Values are clamped to [0, 1] at every public boundary, so any
``Image`` produced here satisfies that invariant regardless of interpolation
overshoot upstream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PILImage

from .errors import UnsupportedFormatError

__all__ = [
    "Image",
    "ResolutionSchedule",
    "resolution_schedule",
    "resize",
    "resize_to",
    "init_result",
    "load_image",
    "save_image",
    "to_tensor",
    "from_tensor",
]


@dataclass(frozen=True)
class Image:
    """An sRGB raster: H×W×3 float32 pixels, every component in [0, 1].

    The constructor copies and clamps, so instances never alias caller
    arrays and never carry out-of-range values.
    """

    pixels: np.ndarray
    color_space: str = "sRGB"

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"expected an H×W×3 pixel array, got shape {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("image must be at least 1×1")
        if not np.isfinite(px).all():
            raise ValueError("pixel values must be finite")
        object.__setattr__(self, "pixels", np.clip(px, 0.0, 1.0).astype(np.float32))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def long_side(self) -> int:
        return max(self.height, self.width)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Image):
            return NotImplemented
        return (
            self.color_space == other.color_space
            and self.pixels.shape == other.pixels.shape
            and bool(np.array_equal(self.pixels, other.pixels))
        )


@dataclass(frozen=True)
class ResolutionSchedule:
    """Ordered stage resolutions (longest image side, in pixels)."""

    stages: tuple[int, ...]

    def __post_init__(self):
        if not self.stages:
            raise ValueError("schedule must contain at least one stage")
        for a, b in zip(self.stages, self.stages[1:]):
            if b <= a:
                raise ValueError(f"stage resolutions must increase: {self.stages}")

    @property
    def final_resolution(self) -> int:
        return self.stages[-1]

    def __iter__(self) -> Iterator[int]:
        return iter(self.stages)

    def __len__(self) -> int:
        return len(self.stages)

    def __getitem__(self, i: int) -> int:
        return self.stages[i]


def resolution_schedule(r_i: float, r_f: float, k: float) -> ResolutionSchedule:
    """Stage resolutions min(r_f, r_i * k**(s-1)) for s = 1, 2, ...

    Each value is rounded to the nearest integer; the capped final
    resolution appears exactly once. Rounding can collapse neighbouring
    stages when k is close to 1; duplicates are dropped so the schedule
    stays strictly increasing.
    """
    if r_i <= 0 or r_f <= 0:
        raise ValueError("resolutions must be positive")
    if r_i > r_f:
        raise ValueError(f"initial resolution {r_i} exceeds final resolution {r_f}")
    if k <= 1:
        raise ValueError(f"growth factor must be > 1, got {k}")

    stages: list[int] = []
    s = 1
    while True:
        raw = r_i * k ** (s - 1)
        r = int(math.floor(raw + 0.5))
        if r >= r_f:
            stages.append(int(r_f))
            break
        if not stages or r != stages[-1]:
            stages.append(r)
        s += 1
    return ResolutionSchedule(tuple(stages))


def to_tensor(img: Image) -> torch.Tensor:
    """Image -> float32 tensor of shape (3, H, W)."""
    return torch.from_numpy(np.ascontiguousarray(img.pixels.transpose(2, 0, 1)))


def from_tensor(t: torch.Tensor) -> Image:
    """(3, H, W) or (1, 3, H, W) tensor -> Image (detached, clamped)."""
    if t.ndim == 4:
        if t.shape[0] != 1:
            raise ValueError(f"expected batch of 1, got {t.shape[0]}")
        t = t[0]
    if t.ndim != 3 or t.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) tensor, got shape {tuple(t.shape)}")
    arr = t.detach().cpu().numpy().transpose(1, 2, 0)
    return Image(arr)


def _target_shape(h: int, w: int, target_long_side: int) -> tuple[int, int]:
    if h >= w:
        return target_long_side, max(1, int(math.floor(w * target_long_side / h + 0.5)))
    return max(1, int(math.floor(h * target_long_side / w + 0.5))), target_long_side


def resize(img: Image, target_long_side: int, purpose: str) -> Image:
    """Resize preserving aspect ratio (shorter side rounded to nearest).

    ``purpose`` selects the kernel: bicubic when upsampling between
    stages, area averaging when downsampling inputs. The target equal to
    the current long side returns a pixel-identical copy.
    """
    if target_long_side < 1:
        raise ValueError("target_long_side must be >= 1")
    if target_long_side == img.long_side:
        if purpose not in ("downsample", "upsample"):
            raise ValueError(f"purpose must be 'downsample' or 'upsample', got {purpose!r}")
        return Image(img.pixels)
    return resize_to(img, _target_shape(img.height, img.width, target_long_side), purpose)


def resize_to(img: Image, shape: tuple[int, int], purpose: str) -> Image:
    """Resize to an exact (height, width), same kernels as ``resize``.

    Stage transitions use this so the upsampled previous result always
    matches the stage's content image even when independent aspect-ratio
    rounding would differ by a pixel.
    """
    nh, nw = shape
    if nh < 1 or nw < 1:
        raise ValueError("target shape must be at least 1x1")
    if purpose not in ("downsample", "upsample"):
        raise ValueError(f"purpose must be 'downsample' or 'upsample', got {purpose!r}")
    if (nh, nw) == (img.height, img.width):
        return Image(img.pixels)
    t = to_tensor(img).unsqueeze(0)
    if purpose == "upsample":
        out = F.interpolate(t, size=(nh, nw), mode="bicubic", align_corners=False)
    else:
        out = F.interpolate(t, size=(nh, nw), mode="area")
    return from_tensor(out)


def init_result(content: Image, strategy: str = "content", seed: int = 0) -> Image:
    """Initial result image: a copy of the content image, or seeded noise."""
    if strategy == "content":
        return Image(content.pixels)
    if strategy == "noise":
        rng = np.random.default_rng(seed)
        return Image(rng.random(content.pixels.shape, dtype=np.float32))
    raise ValueError(f"unknown init strategy {strategy!r}")


_FORMATS = {".png": "PNG", ".jpg": "JPEG", ".jpeg": "JPEG"}


def load_image(path: str | Path) -> Image:
    """Load a PNG or JPEG file into a unit-interval image."""
    with PILImage.open(path) as im:
        if im.format not in ("PNG", "JPEG"):
            raise UnsupportedFormatError(
                f"{path}: expected PNG or JPEG, found {im.format}"
            )
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return Image(arr)


def save_image(img: Image, path: str | Path) -> None:
    """Write an image as 8-bit PNG or JPEG.

    PNG round-trips within 1/255 per channel (quantization only); JPEG is
    lossy and carries no such bound.
    """
    path = Path(path)
    fmt = _FORMATS.get(path.suffix.lower())
    if fmt is None:
        raise UnsupportedFormatError(f"{path}: unsupported extension {path.suffix!r}")
    arr = np.floor(img.pixels * 255.0 + 0.5).clip(0, 255).astype(np.uint8)
    PILImage.fromarray(arr).save(path, format=fmt)
