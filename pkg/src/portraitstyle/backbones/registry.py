"""Pretrained backbone loading.

A registry JSON maps each backbone kind to its weight artifact: a source
URL or local path, a pinned sha256 (full digest or a prefix of at least 8
hex chars), and kind-specific metadata such as the layer alias table.
Artifacts are fetched once into a local cache directory; every load
verifies the checksum. Tests never touch the network: they run on the
stub providers, selected with the reserved registry name ``stub``.

The vgg19 kind loads a torchvision VGG-19 state dict. The face kinds
consume TorchScript archives, whose expected calling conventions are
documented on the wrapper classes below.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import urllib.request
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from ..errors import (
    ChecksumMismatchError,
    MissingWeightsError,
    UnsupportedKindError,
)
from ..image_core import Image
from .base import (
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
from .stubs import stub_backbone_set

__all__ = [
    "KINDS",
    "CACHE_ENV",
    "default_registry",
    "load_registry",
    "load_pretrained",
    "load_backbone_set",
    "pretrained_available",
]

KINDS = ("vgg19", "face_recognizer", "face_mesher", "face_detector", "matting")
CACHE_ENV = "PORTRAITSTYLE_CACHE"

_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)


def default_cache_dir() -> Path:
    env = os.environ.get(CACHE_ENV)
    if env:
        return Path(env)
    return Path.home() / ".cache" / "portraitstyle"


def default_registry() -> dict:
    with resources.files("portraitstyle").joinpath("data/registry.json").open("rb") as f:
        return json.load(f)


def load_registry(path: "str | Path | None" = None) -> dict:
    if path is None:
        return default_registry()
    with open(path, "rb") as f:
        return json.load(f)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _verify_checksum(path: Path, pinned: str | None) -> None:
    if not pinned:
        raise MissingWeightsError(
            f"{path}: registry entry has no pinned sha256; refusing to load "
            "an unverified artifact"
        )
    if len(pinned) < 8:
        raise ValueError("pinned sha256 must be at least 8 hex characters")
    digest = _sha256(path)
    if not digest.startswith(pinned.lower()):
        raise ChecksumMismatchError(
            f"{path}: sha256 {digest[:16]}... does not match pinned {pinned}"
        )


def _fetch(url: str, dest: Path) -> None:
    dest.parent.mkdir(parents=True, exist_ok=True)
    tmp = dest.with_suffix(dest.suffix + ".part")
    try:
        with urllib.request.urlopen(url, timeout=30) as r, open(tmp, "wb") as f:
            shutil.copyfileobj(r, f)
        tmp.replace(dest)
    except Exception as exc:
        tmp.unlink(missing_ok=True)
        raise MissingWeightsError(f"could not fetch {url}: {exc}") from exc


def _resolve_artifact(
    kind: str,
    entry: dict,
    source: "str | Path | None",
    cache_dir: "Path | None",
    fetch: bool = True,
) -> Path:
    if source is not None:
        path = Path(source)
        if not path.exists():
            raise MissingWeightsError(f"{kind}: weight file {path} does not exist")
        return path
    url = entry.get("source")
    if not url:
        raise MissingWeightsError(
            f"{kind}: no weight source configured; supply a local artifact "
            "path or add one to the registry"
        )
    cache = cache_dir or default_cache_dir()
    dest = cache / Path(url).name
    if not dest.exists():
        if not fetch:
            raise MissingWeightsError(f"{kind}: {dest} not cached")
        _fetch(url, dest)
    return dest


class Vgg19Backbone(FeatureBackbone):
    """VGG-19 feature extractor over a loaded torchvision state dict.

    Layer names follow the usual reluN_M convention; channel counts are
    read from the weight tensors rather than hard-coded.
    """

    name = "vgg19"

    def __init__(self, state_dict: dict, aliases: dict[str, int], device: str = "cpu"):
        import torchvision.models

        net = torchvision.models.vgg19(weights=None)
        net.load_state_dict(state_dict)
        self._features = net.features.to(device).eval()
        for p in self._features.parameters():
            p.requires_grad_(False)
        self._aliases = dict(aliases)
        specs = []
        for layer_name, idx in self._aliases.items():
            conv = self._features[idx - 1]  # the conv feeding each relu
            role = "content" if layer_name == "relu4_2" else "style"
            specs.append(LayerSpec(layer_name, conv.out_channels, role))
        self.layer_specs = tuple(specs)
        self._device = device
        mean = torch.tensor(_IMAGENET_MEAN, device=device).reshape(1, 3, 1, 1)
        std = torch.tensor(_IMAGENET_STD, device=device).reshape(1, 3, 1, 1)
        self._mean, self._std = mean, std
        super().__init__()

    def normalize(self, t: torch.Tensor) -> torch.Tensor:
        return (t - self._mean) / self._std

    def _forward(self, t: torch.Tensor, wanted: set[str]) -> dict[str, torch.Tensor]:
        by_index = {self._aliases[n]: n for n in wanted}
        out: dict[str, torch.Tensor] = {}
        last = max(by_index)
        for i, module in enumerate(self._features):
            t = module(t)
            if i in by_index:
                out[by_index[i]] = t
            if i >= last:
                break
        return out


def _normalizer(scheme: str):
    if scheme == "unit":
        return lambda t: t
    if scheme == "pm1":
        return lambda t: t * 2.0 - 1.0
    if scheme == "imagenet":
        mean = torch.tensor(_IMAGENET_MEAN).reshape(1, 3, 1, 1)
        std = torch.tensor(_IMAGENET_STD).reshape(1, 3, 1, 1)
        return lambda t: (t - mean) / std
    raise ValueError(f"unknown normalization scheme {scheme!r}")


class TorchScriptRecognizer(FaceRecognizer):
    """Face recognizer from a TorchScript archive.

    Contract: the scripted module takes a normalized (1, 3, H, W) batch
    and returns one tensor per declared layer, in registry order, plus the
    final embedding as the last output.
    """

    def __init__(self, path: Path, entry: dict, device: str = "cpu"):
        self.name = f"recognizer[{path.name}]"
        self._module = torch.jit.load(str(path), map_location=device)
        layer_names = entry["layers"]
        channels = entry["channels"]
        self.layer_specs = tuple(
            LayerSpec(n, c, "facial") for n, c in zip(layer_names, channels)
        )
        self._normalize = _normalizer(entry.get("normalization", "pm1"))
        super().__init__()

    def normalize(self, t: torch.Tensor) -> torch.Tensor:
        return self._normalize(t)

    def _forward(self, t: torch.Tensor, wanted: set[str]) -> dict[str, torch.Tensor]:
        outputs = self._module(t)
        names = [s.name for s in self.layer_specs]
        return {n: o for n, o in zip(names, outputs) if n in wanted}

    def embed(self, crop) -> torch.Tensor:
        from .base import _as_batched_tensor

        t = self.normalize(_as_batched_tensor(crop))
        return self._module(t)[-1].reshape(-1)


class TorchScriptMesher(MeshBackbone):
    """Mesher from a TorchScript archive: (1, 3, s, s) -> (468, 3) vertices."""

    def __init__(self, path: Path, entry: dict, device: str = "cpu"):
        self.name = f"mesher[{path.name}]"
        self._module = torch.jit.load(str(path), map_location=device)
        self.crop_size = int(entry.get("input_size", 192))
        self._normalize = _normalizer(entry.get("normalization", "pm1"))

    def mesh(self, crop: torch.Tensor) -> torch.Tensor:
        out = self._module(self._normalize(crop.unsqueeze(0)))
        return out.reshape(-1, 3)


class TorchScriptDetector(FaceDetector):
    """Detector from a TorchScript archive: image -> (K, 5) rows of
    (x, y, w, h, confidence) in pixel coordinates."""

    def __init__(self, path: Path, entry: dict, device: str = "cpu"):
        self.name = f"detector[{path.name}]"
        self._module = torch.jit.load(str(path), map_location=device)
        self._normalize = _normalizer(entry.get("normalization", "unit"))

    def detect(self, img: Image) -> list[FaceBox]:
        from ..image_core import to_tensor

        with torch.no_grad():
            rows = self._module(self._normalize(to_tensor(img).unsqueeze(0)))
        boxes = []
        for x, y, w, h, conf in np.asarray(rows.cpu()).reshape(-1, 5):
            if w > 0 and h > 0:
                boxes.append(FaceBox(float(x), float(y), float(w), float(h),
                                     float(np.clip(conf, 0.0, 1.0))))
        return boxes


class TorchScriptMatting(MattingBackbone):
    """Matting from a TorchScript archive: image -> (1, 1, H, W) alpha."""

    def __init__(self, path: Path, entry: dict, device: str = "cpu"):
        self.name = f"matting[{path.name}]"
        self._module = torch.jit.load(str(path), map_location=device)
        self._normalize = _normalizer(entry.get("normalization", "pm1"))

    def matte(self, img: Image) -> Matte:
        from ..image_core import to_tensor

        with torch.no_grad():
            alpha = self._module(self._normalize(to_tensor(img).unsqueeze(0)))
        return Matte(np.asarray(alpha.cpu()).reshape(img.height, img.width))


def load_pretrained(
    kind: str,
    source: "str | Path | None" = None,
    *,
    registry: dict | None = None,
    cache_dir: "str | Path | None" = None,
    device: str = "cpu",
):
    """Load a pretrained backbone of the given kind.

    ``source`` overrides the registry's artifact location with a local
    path. Raises UnsupportedKindError, MissingWeightsError, or
    ChecksumMismatchError per the failure.
    """
    if kind not in KINDS:
        raise UnsupportedKindError(f"unknown backbone kind {kind!r}; expected one of {KINDS}")
    reg = registry if registry is not None else default_registry()
    entry = reg.get(kind, {})
    cache = Path(cache_dir) if cache_dir else None
    path = _resolve_artifact(kind, entry, source, cache)
    _verify_checksum(path, entry.get("sha256"))
    if kind == "vgg19":
        state = torch.load(path, map_location=device, weights_only=True)
        return Vgg19Backbone(state, entry["aliases"], device)
    if kind == "face_recognizer":
        return TorchScriptRecognizer(path, entry, device)
    if kind == "face_mesher":
        return TorchScriptMesher(path, entry, device)
    if kind == "face_detector":
        return TorchScriptDetector(path, entry, device)
    return TorchScriptMatting(path, entry, device)


def pretrained_available(
    kinds: Sequence[str] = ("vgg19",),
    registry: dict | None = None,
    cache_dir: "str | Path | None" = None,
) -> bool:
    """True when every requested kind's artifact is already cached locally."""
    reg = registry if registry is not None else default_registry()
    cache = Path(cache_dir) if cache_dir else None
    for kind in kinds:
        try:
            path = _resolve_artifact(kind, reg.get(kind, {}), None, cache, fetch=False)
            _verify_checksum(path, reg.get(kind, {}).get("sha256"))
        except (MissingWeightsError, ChecksumMismatchError):
            return False
    return True


def load_backbone_set(
    registry: "str | Path | None" = "stub",
    *,
    need_faces: bool = False,
    need_matting: bool = False,
    cache_dir: "str | Path | None" = None,
    device: str = "cpu",
    seed: int = 0,
) -> BackboneSet:
    """Assemble the networks a run needs.

    The reserved registry name ``stub`` returns the deterministic stub
    providers. Otherwise the classifier is always loaded, and the face
    trio / matting network only when the run calls for them.
    """
    if registry == "stub":
        return stub_backbone_set(seed)
    reg = load_registry(registry)
    kw = dict(registry=reg, cache_dir=cache_dir, device=device)
    return BackboneSet(
        classifier=load_pretrained("vgg19", **kw),
        face_recognizer=load_pretrained("face_recognizer", **kw) if need_faces else None,
        face_mesher=load_pretrained("face_mesher", **kw) if need_faces else None,
        face_detector=load_pretrained("face_detector", **kw) if need_faces else None,
        matting=load_pretrained("matting", **kw) if need_matting else None,
    )
