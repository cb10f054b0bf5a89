"""Uniform contracts for feature providers and face auxiliaries.

Five networks feed the pipeline: a general classifier for content/style
features, a face recognizer, a face mesher, a face detector, and a matting
network. The first three are differentiable providers; detector and matting
run only on the content image and carry no gradient contract. All of them
take unit-interval images and apply their own input normalization.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

from ..errors import (
    ShapeMismatchError,
    UnknownLayerError,
    WrongCropSizeError,
)
from ..image_core import Image, to_tensor

__all__ = [
    "MESH_VERTEX_COUNT",
    "LayerSpec",
    "FeatureSet",
    "MeshModel",
    "FaceBox",
    "Matte",
    "FeatureBackbone",
    "FaceRecognizer",
    "MeshBackbone",
    "FaceDetector",
    "MattingBackbone",
    "BackboneSet",
    "extract_features",
    "face_mesh",
    "detect_faces",
    "compute_matte",
]

MESH_VERTEX_COUNT = 468


@dataclass(frozen=True)
class LayerSpec:
    """One named feature layer: channel count and the role it plays."""

    name: str
    channels: int
    role: str  # content | style | facial

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError(f"layer {self.name!r}: channels must be positive")
        if self.role not in ("content", "style", "facial"):
            raise ValueError(f"layer {self.name!r}: unknown role {self.role!r}")


@dataclass(eq=False)
class FeatureSet:
    """Ordered map layer name -> feature matrix of shape (channels, positions)."""

    entries: dict[str, torch.Tensor]

    def __post_init__(self):
        for name, t in self.entries.items():
            if t.ndim != 2:
                raise ShapeMismatchError(
                    f"layer {name!r}: expected a 2-D (channels, positions) "
                    f"tensor, got shape {tuple(t.shape)}"
                )
            if t.shape[0] < 1 or t.shape[1] < 1:
                raise ShapeMismatchError(f"layer {name!r}: empty feature matrix")

    def layers(self) -> tuple[str, ...]:
        return tuple(self.entries)

    def items(self):
        return self.entries.items()

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(eq=False)
class MeshModel:
    """Dense face surface: 468 vertices in the face-crop coordinate frame."""

    vertices: torch.Tensor  # (468, 3)

    def __post_init__(self):
        v = torch.as_tensor(self.vertices)
        if tuple(v.shape) != (MESH_VERTEX_COUNT, 3):
            raise ShapeMismatchError(
                f"mesh must have shape ({MESH_VERTEX_COUNT}, 3), got {tuple(v.shape)}"
            )
        if not torch.isfinite(v.detach()).all():
            raise ValueError("mesh vertices must be finite")
        self.vertices = v


@dataclass(frozen=True)
class FaceBox:
    """Axis-aligned face rectangle in content-image pixel coordinates."""

    x: float
    y: float
    w: float
    h: float
    confidence: float = 1.0

    def __post_init__(self):
        vals = (self.x, self.y, self.w, self.h, self.confidence)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("box fields must be finite")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box must have positive extent, got w={self.w}, h={self.h}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must lie in [0, 1], got {self.confidence}")

    @property
    def right(self) -> float:
        return self.x + self.w

    @property
    def bottom(self) -> float:
        return self.y + self.h

    def expanded(self, margin: float) -> "FaceBox":
        """Grow every side by ``margin`` times the corresponding extent."""
        return FaceBox(
            self.x - margin * self.w,
            self.y - margin * self.h,
            self.w * (1 + 2 * margin),
            self.h * (1 + 2 * margin),
            self.confidence,
        )

    def scaled(self, sx: float, sy: float | None = None) -> "FaceBox":
        sy = sx if sy is None else sy
        return FaceBox(self.x * sx, self.y * sy, self.w * sx, self.h * sy, self.confidence)

    def clipped(self, width: float, height: float) -> "FaceBox | None":
        """Intersect with the image rectangle; None when disjoint."""
        x0, y0 = max(self.x, 0.0), max(self.y, 0.0)
        x1, y1 = min(self.right, float(width)), min(self.bottom, float(height))
        if x1 <= x0 or y1 <= y0:
            return None
        return FaceBox(x0, y0, x1 - x0, y1 - y0, self.confidence)


@dataclass(eq=False)
class Matte:
    """Per-pixel foreground opacity, same spatial shape as its source image."""

    alpha: np.ndarray  # (H, W) in [0, 1]

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=np.float32)
        if a.ndim != 2:
            raise ShapeMismatchError(f"matte must be 2-D, got shape {a.shape}")
        if not np.isfinite(a).all():
            raise ValueError("matte values must be finite")
        self.alpha = np.clip(a, 0.0, 1.0)


def _as_batched_tensor(img: "Image | torch.Tensor") -> torch.Tensor:
    if isinstance(img, Image):
        t = to_tensor(img)
    elif isinstance(img, torch.Tensor):
        t = img
    else:
        raise TypeError(f"expected Image or tensor, got {type(img).__name__}")
    if t.ndim == 3:
        t = t.unsqueeze(0)
    if t.ndim != 4 or t.shape[0] != 1 or t.shape[1] != 3:
        raise ShapeMismatchError(f"expected a (3, H, W) image tensor, got {tuple(t.shape)}")
    return t


class FeatureBackbone:
    """A named differentiable feature provider.

    Subclasses declare ``layer_specs`` and implement ``_forward``. Callers
    always pass unit-interval images; ``normalize`` maps them to whatever
    the underlying network was trained on. When the input is a tensor that
    requires grad, every returned feature participates in autograd, so a
    scalar of the features back-propagates to the image pixels.
    """

    name: str = "backbone"
    layer_specs: tuple[LayerSpec, ...] = ()

    def __init__(self):
        self._spec_by_name = {s.name: s for s in self.layer_specs}
        if len(self._spec_by_name) != len(self.layer_specs):
            raise ValueError(f"{self.name}: duplicate layer names")

    def layer_names(self, role: str | None = None) -> tuple[str, ...]:
        return tuple(s.name for s in self.layer_specs if role is None or s.role == role)

    def spec(self, name: str) -> LayerSpec:
        try:
            return self._spec_by_name[name]
        except KeyError:
            raise UnknownLayerError(f"{self.name}: no layer named {name!r}") from None

    def normalize(self, t: torch.Tensor) -> torch.Tensor:
        return t

    def _forward(self, t: torch.Tensor, wanted: set[str]) -> dict[str, torch.Tensor]:
        raise NotImplementedError

    def features(self, img: "Image | torch.Tensor", layers: Sequence[str]) -> FeatureSet:
        """Extract the requested layers, in request order, as (N_l, M_l) matrices."""
        names = list(layers)
        for n in names:
            self.spec(n)  # raises UnknownLayerError
        t = self.normalize(_as_batched_tensor(img))
        raw = self._forward(t, set(names))
        entries: dict[str, torch.Tensor] = {}
        for n in names:
            f = raw[n]
            if f.ndim == 4:
                f = f[0]
            if f.shape[0] != self.spec(n).channels:
                raise ShapeMismatchError(
                    f"{self.name}: layer {n!r} produced {f.shape[0]} channels, "
                    f"spec declares {self.spec(n).channels}"
                )
            entries[n] = f.reshape(f.shape[0], -1)
        return FeatureSet(entries)


class FaceRecognizer(FeatureBackbone):
    """Feature provider that also emits a final identity embedding."""

    def embed(self, crop: "Image | torch.Tensor") -> torch.Tensor:
        raise NotImplementedError


class MeshBackbone:
    """Differentiable face mesher: fixed-size crop -> 468 x 3 vertices."""

    name: str = "mesher"
    crop_size: int = 192

    def mesh(self, crop: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError


class FaceDetector:
    """Face localizer; runs on the content image only, no gradient contract."""

    name: str = "detector"

    def detect(self, img: Image) -> list[FaceBox]:
        raise NotImplementedError


class MattingBackbone:
    """Foreground opacity estimator; no gradient contract."""

    name: str = "matting"

    def matte(self, img: Image) -> Matte:
        raise NotImplementedError


@dataclass
class BackboneSet:
    """The networks a run needs. Optional members may be None when unused."""

    classifier: FeatureBackbone
    face_recognizer: FaceRecognizer | None = None
    face_mesher: MeshBackbone | None = None
    face_detector: FaceDetector | None = None
    matting: MattingBackbone | None = None


def extract_features(
    backbone: FeatureBackbone, img: "Image | torch.Tensor", layers: Sequence[str]
) -> FeatureSet:
    """Feature matrices for the requested layers, in request order."""
    return backbone.features(img, layers)


def face_mesh(backbone: MeshBackbone, crop: "Image | torch.Tensor") -> MeshModel:
    """Run the mesher on a crop of exactly the size it declares."""
    t = crop if isinstance(crop, torch.Tensor) else to_tensor(crop)
    if t.ndim != 3 or t.shape[0] != 3:
        raise ShapeMismatchError(f"expected a (3, H, W) crop, got {tuple(t.shape)}")
    size = (backbone.crop_size, backbone.crop_size)
    if tuple(t.shape[1:]) != size:
        raise WrongCropSizeError(
            f"{backbone.name} expects a {size[0]}x{size[1]} crop, got "
            f"{t.shape[1]}x{t.shape[2]}"
        )
    return MeshModel(backbone.mesh(t))


def detect_faces(backbone: FaceDetector, img: Image, min_confidence: float) -> list[FaceBox]:
    """Detect faces, filter by confidence, clip to bounds, sort by (x, y)."""
    kept: list[FaceBox] = []
    for box in backbone.detect(img):
        if box.confidence < min_confidence:
            continue
        clipped = box.clipped(img.width, img.height)
        if clipped is not None:
            kept.append(clipped)
    kept.sort(key=lambda b: (b.x, b.y))
    return kept


def compute_matte(backbone: MattingBackbone, img: Image) -> Matte:
    """Foreground opacity for ``img``, validated to match its spatial shape."""
    matte = backbone.matte(img)
    if matte.alpha.shape != (img.height, img.width):
        raise ShapeMismatchError(
            f"matte shape {matte.alpha.shape} does not match image "
            f"({img.height}, {img.width})"
        )
    return matte
