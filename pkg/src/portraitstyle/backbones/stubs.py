"""Deterministic stub providers.

These run the entire pipeline without pretrained weights: seeded random
convolution stacks stand in for the classifier and face recognizer, a
fixed linear projection for the mesher, a bright-blob heuristic for the
detector, and a constant matte for matting. Smooth nonlinearities (tanh)
keep every provider friendly to finite-difference gradient checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from ..image_core import Image
from .base import (
    MESH_VERTEX_COUNT,
    BackboneSet,
    FaceBox,
    FaceDetector,
    FaceRecognizer,
    FeatureBackbone,
    LayerSpec,
    Matte,
    MattingBackbone,
    MeshBackbone,
)

__all__ = [
    "StubBackbone",
    "stub_backbone",
    "identity_backbone",
    "stub_classifier",
    "StubFaceRecognizer",
    "stub_face_recognizer",
    "StubFaceMesher",
    "stub_face_mesher",
    "BlobFaceDetector",
    "ConstantMatting",
    "stub_backbone_set",
]

_NONLINEARITIES = {
    "linear": lambda t: t,
    "relu": F.relu,
    "tanh": torch.tanh,
    "softplus": F.softplus,
}


@dataclass(frozen=True)
class _ConvLayer:
    name: str
    weight: torch.Tensor  # (out, in, k, k)
    bias: torch.Tensor
    stride: int
    nonlinearity: str


@dataclass(frozen=True)
class _PoolLayer:
    name: str
    kernel: int


def _conv_layer(
    gen: torch.Generator,
    name: str,
    in_ch: int,
    out_ch: int,
    kernel: int,
    nonlinearity: str,
    stride: int,
) -> _ConvLayer:
    if nonlinearity not in _NONLINEARITIES:
        raise ValueError(f"unknown nonlinearity {nonlinearity!r}")
    fan_in = in_ch * kernel * kernel
    weight = torch.empty(out_ch, in_ch, kernel, kernel)
    weight.normal_(0.0, 1.0 / math.sqrt(fan_in), generator=gen)
    bias = torch.empty(out_ch)
    bias.uniform_(-0.1, 0.1, generator=gen)
    return _ConvLayer(name, weight, bias, stride, nonlinearity)


class StubBackbone(FeatureBackbone):
    """Seeded random conv stack exposing one named layer per stage."""

    def __init__(
        self,
        layers: Sequence[_ConvLayer | _PoolLayer],
        roles: dict[str, str] | None = None,
        name: str = "stub",
    ):
        self.name = name
        self._layers = tuple(layers)
        roles = roles or {}
        specs = []
        channels = 3
        for layer in self._layers:
            if isinstance(layer, _ConvLayer):
                channels = layer.weight.shape[0]
            specs.append(LayerSpec(layer.name, channels, roles.get(layer.name, "style")))
        self.layer_specs = tuple(specs)
        super().__init__()

    def _forward(self, t: torch.Tensor, wanted: set[str]) -> dict[str, torch.Tensor]:
        out: dict[str, torch.Tensor] = {}
        remaining = set(wanted)
        for layer in self._layers:
            if isinstance(layer, _ConvLayer):
                pad = layer.weight.shape[-1] // 2
                t = F.conv2d(t, layer.weight, layer.bias, stride=layer.stride, padding=pad)
                t = _NONLINEARITIES[layer.nonlinearity](t)
            else:
                t = F.avg_pool2d(t, layer.kernel)
            if layer.name in remaining:
                out[layer.name] = t
                remaining.discard(layer.name)
                if not remaining:
                    break
        return out


def stub_backbone(
    seed: int,
    arch: Sequence[tuple[int, int, str]],
    names: Sequence[str] | None = None,
    roles: dict[str, str] | None = None,
    strides: Sequence[int] | None = None,
) -> StubBackbone:
    """Random fixed-weight backbone from an architecture list.

    ``arch`` entries are (kernel_size, out_channels, nonlinearity); layers
    are named conv_1, conv_2, ... unless ``names`` overrides. The same
    seed always yields the same weights.
    """
    if not arch:
        raise ValueError("arch must be non-empty")
    names = list(names) if names is not None else [f"conv_{i + 1}" for i in range(len(arch))]
    if len(names) != len(arch):
        raise ValueError("names must pair one-to-one with arch entries")
    strides = list(strides) if strides is not None else [1] * len(arch)
    gen = torch.Generator().manual_seed(seed)
    layers = []
    in_ch = 3
    for (kernel, out_ch, nonlin), layer_name, stride in zip(arch, names, strides):
        layers.append(_conv_layer(gen, layer_name, in_ch, out_ch, kernel, nonlin, stride))
        in_ch = out_ch
    return StubBackbone(layers, roles=roles, name=f"stub[seed={seed}]")


def identity_backbone(role: str = "content") -> StubBackbone:
    """Single 1x1 identity convolution: features equal the image channels."""
    weight = torch.eye(3).reshape(3, 3, 1, 1)
    layer = _ConvLayer("conv_1", weight, torch.zeros(3), 1, "linear")
    return StubBackbone([layer], roles={"conv_1": role}, name="identity")


def stub_classifier(seed: int = 0) -> StubBackbone:
    """Stand-in for the general classifier: five style layers plus a
    content layer branching between the two deepest, mirroring the usual
    topology."""
    gen = torch.Generator().manual_seed(seed)
    layers = [
        _conv_layer(gen, "conv_1", 3, 8, 3, "tanh", 1),
        _conv_layer(gen, "conv_2", 8, 8, 3, "tanh", 2),
        _conv_layer(gen, "conv_3", 8, 12, 3, "tanh", 2),
        _conv_layer(gen, "conv_4", 12, 12, 3, "tanh", 2),
        _conv_layer(gen, "content", 12, 12, 3, "tanh", 1),
        _conv_layer(gen, "conv_5", 12, 16, 3, "tanh", 2),
    ]
    roles = {f"conv_{i}": "style" for i in range(1, 6)}
    roles["content"] = "content"
    return StubBackbone(layers, roles=roles, name=f"stub-classifier[seed={seed}]")


FACIAL_LAYER_NAMES = ("conv_1a", "conv_2a", "maxpool_3a", "conv_4a", "conv_4b")


class StubFaceRecognizer(StubBackbone, FaceRecognizer):
    """Random conv stack with recognizer-style layer names and an embedding head."""

    def __init__(self, seed: int):
        gen = torch.Generator().manual_seed(seed)
        layers = [
            _conv_layer(gen, "conv_1a", 3, 8, 3, "tanh", 2),
            _conv_layer(gen, "conv_2a", 8, 12, 3, "tanh", 1),
            _PoolLayer("maxpool_3a", 2),
            _conv_layer(gen, "conv_4a", 12, 16, 3, "tanh", 1),
            _conv_layer(gen, "conv_4b", 16, 16, 3, "tanh", 2),
        ]
        roles = {name: "facial" for name in FACIAL_LAYER_NAMES}
        StubBackbone.__init__(self, layers, roles=roles, name=f"stub-recognizer[seed={seed}]")
        self._embed_weight = torch.empty(64, 16)
        self._embed_weight.normal_(0.0, 1.0 / 4.0, generator=gen)

    def embed(self, crop) -> torch.Tensor:
        feats = self.features(crop, ["conv_4b"])["conv_4b"]
        pooled = feats.mean(dim=1)
        v = self._embed_weight @ pooled
        return v / v.norm().clamp_min(1e-12)


def stub_face_recognizer(seed: int = 0) -> StubFaceRecognizer:
    return StubFaceRecognizer(seed)


class StubFaceMesher(MeshBackbone):
    """Fixed linear projection of crop pixels to 468 x 3 vertices."""

    crop_size = 192
    _pooled = 12  # crop is average-pooled to 12x12 before the projection

    def __init__(self, seed: int):
        self.name = f"stub-mesher[seed={seed}]"
        gen = torch.Generator().manual_seed(seed)
        n_in = 3 * self._pooled * self._pooled
        self._weight = torch.empty(MESH_VERTEX_COUNT * 3, n_in)
        self._weight.normal_(0.0, 0.5 / math.sqrt(n_in), generator=gen)
        self._base = torch.empty(MESH_VERTEX_COUNT, 3)
        self._base.uniform_(0.2, 0.8, generator=gen)

    def mesh(self, crop: torch.Tensor) -> torch.Tensor:
        pooled = F.adaptive_avg_pool2d(crop.unsqueeze(0), self._pooled).reshape(-1)
        offsets = (self._weight @ pooled).reshape(MESH_VERTEX_COUNT, 3)
        return self._base + offsets


def stub_face_mesher(seed: int = 0) -> StubFaceMesher:
    return StubFaceMesher(seed)


class BlobFaceDetector(FaceDetector):
    """Bright connected components as face boxes; a deterministic heuristic.

    The confidence of a component is its mean luminance, so a blank image
    yields nothing and thresholds above 1 reject everything.
    """

    name = "stub-detector"

    def __init__(self, luminance_threshold: float = 0.5, min_area: int = 25):
        self.luminance_threshold = luminance_threshold
        self.min_area = min_area

    def detect(self, img: Image) -> list[FaceBox]:
        lum = img.pixels.mean(axis=2)
        mask = lum > self.luminance_threshold
        labels, count = ndimage.label(mask)
        boxes = []
        for idx, sl in enumerate(ndimage.find_objects(labels), start=1):
            component = labels[sl] == idx
            if component.sum() < self.min_area:
                continue
            ys, xs = sl
            conf = float(lum[sl][component].mean())
            boxes.append(
                FaceBox(
                    x=float(xs.start),
                    y=float(ys.start),
                    w=float(xs.stop - xs.start),
                    h=float(ys.stop - ys.start),
                    confidence=min(conf, 1.0),
                )
            )
        return boxes


class ConstantMatting(MattingBackbone):
    """Degenerate matte: everything is foreground."""

    name = "stub-matting"

    def __init__(self, value: float = 1.0):
        self.value = value

    def matte(self, img: Image) -> Matte:
        return Matte(np.full((img.height, img.width), self.value, dtype=np.float32))


def stub_backbone_set(seed: int = 0) -> BackboneSet:
    """A full set of deterministic stubs; the registry name "stub" maps here."""
    return BackboneSet(
        classifier=stub_classifier(seed),
        face_recognizer=stub_face_recognizer(seed + 1),
        face_mesher=stub_face_mesher(seed + 2),
        face_detector=BlobFaceDetector(),
        matting=ConstantMatting(),
    )
