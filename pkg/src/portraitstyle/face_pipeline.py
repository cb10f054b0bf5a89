"""Face localization, differentiable cropping, and the FaceID loss.

Boxes are found once on the content image and reused for the result image
at every stage, so the "faces" in the generated image are always the same
regions regardless of how the stylization distorts them. Crops are taken
with bilinear sampling, which keeps pixel gradients flowing from the face
losses back into the result image.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from .backbones.base import (
    BackboneSet,
    FaceBox,
    FaceDetector,
    FaceRecognizer,
    FeatureBackbone,
    MeshBackbone,
    detect_faces,
    face_mesh,
)
from .errors import EmptyCropsError, ShapeMismatchError
from .image_core import Image, to_tensor
from .losses import DEFAULT_EPSILON, LayerWeights, nse

__all__ = [
    "CROP_SIZE",
    "DEFAULT_BOX_MARGIN",
    "FaceCropSet",
    "ConcatFacialFeatures",
    "locate_faces",
    "crop_faces",
    "concat_facial_features",
    "extract_concat_features",
    "faceid_loss",
]

CROP_SIZE = 192
DEFAULT_BOX_MARGIN = 0.15


@dataclass(eq=False)
class FaceCropSet:
    """Face boxes plus their resampled crops, in a single shared order."""

    boxes: tuple[FaceBox, ...]
    crops: torch.Tensor  # (faces, 3, size, size)

    def __post_init__(self):
        c = self.crops
        if c.ndim != 4 or c.shape[1] != 3 or c.shape[2] != c.shape[3]:
            raise ShapeMismatchError(
                f"crops must be (faces, 3, size, size), got {tuple(c.shape)}"
            )
        if c.shape[0] != len(self.boxes):
            raise ShapeMismatchError(
                f"{len(self.boxes)} boxes but {c.shape[0]} crops"
            )

    def __len__(self) -> int:
        return len(self.boxes)

    @property
    def size(self) -> int:
        return self.crops.shape[2]


@dataclass(eq=False)
class ConcatFacialFeatures:
    """Per-layer feature matrices and mesh vertices concatenated across faces."""

    per_layer: dict[str, torch.Tensor]
    mesh: torch.Tensor | None = None


def locate_faces(
    content: Image,
    detector: FaceDetector,
    min_confidence: float,
    margin: float = DEFAULT_BOX_MARGIN,
) -> list[FaceBox]:
    """Detect faces on the content image, expand by a margin, clip, sort.

    Detection runs on the content image only; callers reuse the returned
    boxes for the result image at every stage.
    """
    expanded = []
    for box in detect_faces(detector, content, min_confidence):
        grown = box.expanded(margin).clipped(content.width, content.height)
        if grown is not None:  # always overlaps: the original box is in bounds
            expanded.append(grown)
    expanded.sort(key=lambda b: (b.x, b.y))
    return expanded


def _sample_axis(start: float, extent: float, n: int, limit: int, dtype):
    # Pixel-center positions start + (i + 0.5) * extent / n - 0.5, clamped
    # to valid coordinates (border replication outside the image).
    pos = start + (torch.arange(n, dtype=torch.float64) + 0.5) * (extent / n) - 0.5
    pos = pos.clamp(0.0, limit - 1)
    lo = pos.floor().long()
    hi = (lo + 1).clamp(max=limit - 1)
    frac = (pos - lo).to(dtype)
    return lo, hi, frac


def crop_faces(
    img: "Image | torch.Tensor", boxes: Sequence[FaceBox], size: int = CROP_SIZE
) -> FaceCropSet:
    """Resample each box to a square crop with differentiable bilinear sampling.

    When ``img`` is a tensor requiring grad, gradients flow from the crops
    back to the pixels inside the sampled regions. An empty box list yields
    an empty crop set.
    """
    t = img if isinstance(img, torch.Tensor) else to_tensor(img)
    if t.ndim != 3 or t.shape[0] != 3:
        raise ShapeMismatchError(f"expected a (3, H, W) image, got {tuple(t.shape)}")
    h, w = t.shape[1], t.shape[2]
    boxes = tuple(boxes)
    if not boxes:
        return FaceCropSet(boxes, t.new_zeros((0, 3, size, size)))

    crops = []
    for box in boxes:
        x0, x1, fx = _sample_axis(box.x, box.w, size, w, t.dtype)
        y0, y1, fy = _sample_axis(box.y, box.h, size, h, t.dtype)
        v00 = t[:, y0[:, None], x0[None, :]]
        v01 = t[:, y0[:, None], x1[None, :]]
        v10 = t[:, y1[:, None], x0[None, :]]
        v11 = t[:, y1[:, None], x1[None, :]]
        fx = fx[None, None, :]
        fy = fy[None, :, None]
        top = v00 + (v01 - v00) * fx
        bottom = v10 + (v11 - v10) * fx
        crops.append(top + (bottom - top) * fy)
    return FaceCropSet(boxes, torch.stack(crops))


def concat_facial_features(
    crops: FaceCropSet,
    face_backbone: FeatureBackbone,
    mesh_backbone: MeshBackbone | None = None,
    layers: Sequence[str] = (),
    use_mesh: bool = False,
    mesh_crops: FaceCropSet | None = None,
) -> ConcatFacialFeatures:
    """Concatenate per-face features layer by layer, and meshes vertex-wise.

    Concatenation follows crop order, so content- and result-derived
    instances built from the same box list always align face for face.
    ``mesh_crops`` lets the mesher use its own crop size when the
    recognizer crops differ from it.
    """
    if len(crops) == 0:
        raise EmptyCropsError("cannot concatenate features of zero faces")
    layers = list(layers)
    per_face = [face_backbone.features(crops.crops[f], layers) for f in range(len(crops))]
    per_layer = {
        name: torch.cat([fs[name] for fs in per_face], dim=0) for name in layers
    }
    mesh = None
    if use_mesh:
        if mesh_backbone is None:
            raise ValueError("use_mesh requires a mesh backbone")
        source = mesh_crops if mesh_crops is not None else crops
        if len(source) != len(crops):
            raise ShapeMismatchError("mesh crops must pair one-to-one with face crops")
        meshes = [
            face_mesh(mesh_backbone, source.crops[f]).vertices for f in range(len(source))
        ]
        mesh = torch.cat(meshes, dim=0)
    return ConcatFacialFeatures(per_layer, mesh)


def extract_concat_features(
    img: "Image | torch.Tensor",
    boxes: Sequence[FaceBox],
    backbones: BackboneSet,
    layers: Sequence[str],
    use_mesh: bool,
    crop_size: int = CROP_SIZE,
) -> ConcatFacialFeatures:
    """Crop an image at the given boxes and concatenate facial features."""
    crops = crop_faces(img, boxes, crop_size)
    mesh_crops = None
    if use_mesh and backbones.face_mesher is not None:
        mesher_size = backbones.face_mesher.crop_size
        mesh_crops = crops if crop_size == mesher_size else crop_faces(img, boxes, mesher_size)
    return concat_facial_features(
        crops,
        backbones.face_recognizer,
        backbones.face_mesher,
        layers=layers,
        use_mesh=use_mesh,
        mesh_crops=mesh_crops,
    )


def faceid_loss(
    content: "Image | torch.Tensor",
    result: "Image | torch.Tensor",
    boxes: Sequence[FaceBox],
    backbones: BackboneSet,
    facial_weights: LayerWeights,
    delta: float,
    eta: float,
    epsilon: float = DEFAULT_EPSILON,
) -> tuple[torch.Tensor, torch.Tensor]:
    """The two facial terms: delta-weighted feature distance, eta-weighted mesh distance.

    Both are normalized squared errors over features concatenated across
    all faces; with a single face this reduces to the plain per-face
    definition. No boxes, or delta = eta = 0, yields (0, 0) so the
    objective degrades gracefully on face-free inputs.
    """
    if delta < 0 or eta < 0:
        raise ValueError("delta and eta must be non-negative")
    zero = torch.zeros(())
    if (delta == 0 and eta == 0) or not boxes:
        return zero, zero.clone()
    use_mesh = eta > 0 and backbones.face_mesher is not None
    layers = facial_weights.names() if delta > 0 else ()
    target = extract_concat_features(content, boxes, backbones, layers, use_mesh)
    current = extract_concat_features(result, boxes, backbones, layers, use_mesh)
    feat_term = zero
    if delta > 0:
        acc = None
        for name, w in facial_weights.items():
            d = nse(target.per_layer[name], current.per_layer[name], epsilon)
            acc = w * d if acc is None else acc + w * d
        feat_term = delta * acc
    mesh_term = zero.clone()
    if use_mesh:
        mesh_term = eta * nse(target.mesh, current.mesh, epsilon)
    return feat_term, mesh_term
