"""Differentiable objective terms and their weighted composition.

Distance kernels (``nse``, ``gram``, ``tv_loss``, ...) accept torch tensors
or anything ``torch.as_tensor`` understands and return 0-dim tensors, so
they participate in autograd whenever an input requires grad. Non-tensor
inputs are promoted to float64.

Two families of losses are supported and selected per run:

* ``mse`` content / ``gatys`` style: plain mean-squared errors against
  feature maps and unnormalized Gram matrices with the classic
  1/(4 N_l^2 M_l^2) scaling.
* ``nse`` content / ``crowson`` style: squared error divided by the L1
  error (plus epsilon), applied to features and to channel-normalized
  Gram matrices. The division keeps the gradient L1-norm near 1, which
  approximates gradient normalization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Mapping, Sequence

import numpy as np
import torch

from .backbones.base import BackboneSet, FeatureBackbone, FeatureSet
from .errors import (
    ChannelMismatchError,
    ImageTooSmallError,
    LayerMismatchError,
    ShapeMismatchError,
)
from .image_core import Image, to_tensor

if TYPE_CHECKING:
    from .backbones.base import FaceBox
    from .config import StyleTransferConfig

__all__ = [
    "nse",
    "gram",
    "gram_normalized",
    "content_loss",
    "style_loss",
    "tv_loss",
    "normalize_style_weights",
    "LayerWeights",
    "TermWeights",
    "LossSettings",
    "LossBreakdown",
    "StyleTransferObjective",
    "total_loss",
]

DEFAULT_EPSILON = 1e-8


def _to_float_tensor(x) -> torch.Tensor:
    t = torch.as_tensor(x)
    if not t.is_floating_point():
        t = t.to(torch.float64)
    return t


def nse(y, y_hat, epsilon: float = DEFAULT_EPSILON) -> torch.Tensor:
    """Normalized squared error: sum((y - y_hat)**2) / (sum(|y - y_hat|) + epsilon).

    Non-negative, zero iff the inputs are equal. For error vectors of
    equal magnitude the gradient has L1 norm 1 (up to epsilon), which is
    what makes this a cheap stand-in for gradient normalization.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    y = _to_float_tensor(y)
    y_hat = _to_float_tensor(y_hat)
    if y.shape != y_hat.shape:
        raise ShapeMismatchError(f"nse operands differ: {tuple(y.shape)} vs {tuple(y_hat.shape)}")
    diff = y - y_hat
    return (diff * diff).sum() / (diff.abs().sum() + epsilon)


def gram(F) -> torch.Tensor:
    """Gram matrix G = F @ F.T of a (channels, positions) feature matrix."""
    F = _to_float_tensor(F)
    if F.ndim != 2 or F.shape[0] < 1 or F.shape[1] < 1:
        raise ShapeMismatchError(
            f"gram expects a non-empty 2-D feature matrix, got shape {tuple(F.shape)}"
        )
    return F @ F.T


def gram_normalized(F) -> torch.Tensor:
    """Gram matrix divided by the number of channels."""
    F = _to_float_tensor(F)
    if F.ndim != 2 or F.shape[0] < 1 or F.shape[1] < 1:
        raise ShapeMismatchError(
            f"gram expects a non-empty 2-D feature matrix, got shape {tuple(F.shape)}"
        )
    return (F @ F.T) / F.shape[0]


def _normalize_raw(raw: Sequence[float], scheme: str) -> np.ndarray:
    vals = np.asarray(list(raw), dtype=np.float64)
    if vals.size == 0:
        raise ValueError("weight list must be non-empty")
    if not np.isfinite(vals).all():
        raise ValueError("weights must be finite")
    if scheme == "softmax":
        z = np.exp(vals - vals.max())
        return z / z.sum()
    if scheme == "sum":
        if (vals < 0).any():
            raise ValueError("sum normalization requires non-negative weights")
        total = vals.sum()
        if total == 0:
            raise ValueError("sum normalization requires a non-zero total")
        return vals / total
    raise ValueError(f"unknown normalization scheme {scheme!r}")


@dataclass(frozen=True)
class LayerWeights:
    """Non-negative per-layer weights summing to 1."""

    entries: dict[str, float]

    def __post_init__(self):
        if not self.entries:
            raise ValueError("LayerWeights must not be empty")
        vals = np.array(list(self.entries.values()), dtype=np.float64)
        if not np.isfinite(vals).all() or (vals < 0).any():
            raise ValueError("layer weights must be finite and non-negative")
        if abs(vals.sum() - 1.0) > 1e-9:
            raise ValueError(f"layer weights must sum to 1, got {vals.sum()!r}")

    @classmethod
    def from_raw(
        cls, names: Sequence[str], raw: Sequence[float], scheme: str = "sum"
    ) -> "LayerWeights":
        names = list(names)
        if len(names) != len(list(raw)):
            raise ValueError(f"{len(names)} layer names but {len(list(raw))} weights")
        w = _normalize_raw(raw, scheme)
        return cls(dict(zip(names, w.tolist())))

    @classmethod
    def uniform(cls, names: Sequence[str]) -> "LayerWeights":
        names = list(names)
        return cls.from_raw(names, [1.0] * len(names), "sum")

    def items(self):
        return self.entries.items()

    def names(self) -> tuple[str, ...]:
        return tuple(self.entries)

    def __getitem__(self, name: str) -> float:
        return self.entries[name]


def normalize_style_weights(
    raw: Sequence[float], scheme: str = "softmax", names: Sequence[str] | None = None
) -> LayerWeights:
    """Normalize raw style-layer weights to a distribution.

    ``softmax`` exponentiates with max-subtraction for stability; ``sum``
    divides by the total. Note that softmax over widely spread raw values
    (e.g. 256, 64, 16, 4, 1) is numerically one-hot.
    """
    if names is None:
        names = [f"layer_{i}" for i in range(len(list(raw)))]
    return LayerWeights.from_raw(names, raw, scheme)


def _entries(fs) -> Mapping[str, torch.Tensor]:
    if isinstance(fs, FeatureSet):
        return fs.entries
    if isinstance(fs, Mapping):
        return fs
    raise TypeError(f"expected FeatureSet or mapping, got {type(fs).__name__}")


def _check_weight_layers(weights: LayerWeights, *feature_sets) -> None:
    for name in weights.names():
        for fs in feature_sets:
            if name not in fs:
                raise LayerMismatchError(f"feature set is missing weighted layer {name!r}")


def content_loss(
    C, X, weights: LayerWeights, mode: str = "mse", epsilon: float = DEFAULT_EPSILON
) -> torch.Tensor:
    """Weighted per-layer distance between content and result features.

    ``mse`` averages squared error over all elements of each layer;
    ``nse`` uses the normalized squared error instead.
    """
    if mode not in ("mse", "nse"):
        raise ValueError(f"content mode must be 'mse' or 'nse', got {mode!r}")
    C, X = _entries(C), _entries(X)
    _check_weight_layers(weights, C, X)
    total = None
    for name, w in weights.items():
        c, x = _to_float_tensor(C[name]), _to_float_tensor(X[name])
        if c.shape != x.shape:
            raise ShapeMismatchError(
                f"layer {name!r}: content features {tuple(c.shape)} vs result {tuple(x.shape)}"
            )
        if mode == "mse":
            d = ((c - x) ** 2).mean()
        else:
            d = nse(c, x, epsilon)
        total = w * d if total is None else total + w * d
    return total


def style_loss(
    S, X, weights: LayerWeights, variant: str = "gatys", epsilon: float = DEFAULT_EPSILON
) -> torch.Tensor:
    """Weighted per-layer distance between style and result Gram matrices.

    ``gatys``: squared error of unnormalized Grams scaled by
    1/(4 N_l^2 M_l^2), with M_l taken from the result layer. ``crowson``:
    normalized squared error between channel-normalized Grams. Layers may
    differ spatially (Grams are channels x channels) but must agree on
    channel count.
    """
    if variant not in ("gatys", "crowson"):
        raise ValueError(f"style variant must be 'gatys' or 'crowson', got {variant!r}")
    S, X = _entries(S), _entries(X)
    _check_weight_layers(weights, S, X)
    total = None
    for name, w in weights.items():
        s, x = _to_float_tensor(S[name]), _to_float_tensor(X[name])
        if s.shape[0] != x.shape[0]:
            raise ChannelMismatchError(
                f"layer {name!r}: style has {s.shape[0]} channels, result {x.shape[0]}"
            )
        if variant == "gatys":
            n_l, m_l = x.shape
            d = ((gram(s) - gram(x)) ** 2).sum() / (4.0 * n_l**2 * m_l**2)
        else:
            d = nse(gram_normalized(s), gram_normalized(x), epsilon)
        total = w * d if total is None else total + w * d
    return total


def tv_loss(x) -> torch.Tensor:
    """L2 total variation, averaged over valid forward-difference positions.

    Accepts an Image, a (C, H, W) tensor, or a single-channel (H, W)
    tensor. Differences use no wraparound; the normalizer is the
    per-channel count H*(W-1) + (H-1)*W, and channels are summed.
    """
    if isinstance(x, Image):
        t = to_tensor(x)
    else:
        t = _to_float_tensor(x)
    if t.ndim == 2:
        t = t.unsqueeze(0)
    if t.ndim != 3:
        raise ShapeMismatchError(f"expected (C, H, W) or (H, W), got shape {tuple(t.shape)}")
    h, w = t.shape[1], t.shape[2]
    if h < 2 or w < 2:
        raise ImageTooSmallError(f"total variation needs at least 2x2 pixels, got {h}x{w}")
    dh = t[:, :, 1:] - t[:, :, :-1]
    dv = t[:, 1:, :] - t[:, :-1, :]
    n = h * (w - 1) + (h - 1) * w
    return ((dh * dh).sum() + (dv * dv).sum()) / n


@dataclass(frozen=True)
class TermWeights:
    """The five scalar weights of the total objective."""

    alpha: float = 0.05  # content
    beta: float = 1.0  # style
    gamma: float = 0.0  # total variation
    delta: float = 0.0  # facial features
    eta: float = 0.0  # facial mesh

    def __post_init__(self):
        for f in ("alpha", "beta", "gamma", "delta", "eta"):
            v = getattr(self, f)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{f} must be finite and non-negative, got {v}")

    @property
    def facial_enabled(self) -> bool:
        return self.delta > 0 or self.eta > 0


@dataclass(frozen=True)
class LossSettings:
    """Everything besides the five scalar weights that shapes the objective."""

    content_mode: str = "nse"  # mse | nse
    style_variant: str = "crowson"  # gatys | crowson
    content_layer_weights: tuple[tuple[str, float], ...] | None = None
    style_raw_weights: tuple[float, ...] = (256.0, 64.0, 16.0, 4.0, 1.0)
    style_weight_norm: str = "sum"  # sum | softmax
    facial_layer_weights: tuple[tuple[str, float], ...] | None = None
    epsilon: float = DEFAULT_EPSILON
    recognizer_crop_size: int = 192


@dataclass(frozen=True)
class LossBreakdown:
    """Per-term values of one objective evaluation.

    ``content``, ``style`` and ``tv`` are the raw (unweighted) terms;
    ``facial_features`` and ``facial_mesh`` carry their delta/eta scaling
    already, matching their defining equations. Terms whose weight is zero
    are not computed and read 0. ``total`` is the weighted recombination.
    """

    content: float = 0.0
    style: float = 0.0
    tv: float = 0.0
    facial_features: float = 0.0
    facial_mesh: float = 0.0
    total: float = 0.0

    @classmethod
    def from_terms(
        cls,
        weights: TermWeights,
        content: float = 0.0,
        style: float = 0.0,
        tv: float = 0.0,
        facial_features: float = 0.0,
        facial_mesh: float = 0.0,
    ) -> "LossBreakdown":
        total = (
            weights.alpha * content
            + weights.beta * style
            + weights.gamma * tv
            + facial_features
            + facial_mesh
        )
        return cls(content, style, tv, facial_features, facial_mesh, total)

    def to_dict(self) -> dict[str, float]:
        return {
            "content": self.content,
            "style": self.style,
            "tv": self.tv,
            "facial_features": self.facial_features,
            "facial_mesh": self.facial_mesh,
            "total": self.total,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, float]) -> "LossBreakdown":
        return cls(**{k: float(d[k]) for k in
                      ("content", "style", "tv", "facial_features", "facial_mesh", "total")})


def _resolve_content_weights(
    settings: LossSettings, classifier: FeatureBackbone
) -> LayerWeights:
    if settings.content_layer_weights is not None:
        pairs = dict(settings.content_layer_weights)
        return LayerWeights.from_raw(list(pairs), list(pairs.values()), "sum")
    names = classifier.layer_names(role="content")
    if not names:
        raise LayerMismatchError(f"{classifier.name}: no content-role layers declared")
    return LayerWeights.uniform(names)


def _resolve_style_weights(settings: LossSettings, classifier: FeatureBackbone) -> LayerWeights:
    names = classifier.layer_names(role="style")
    if not names:
        raise LayerMismatchError(f"{classifier.name}: no style-role layers declared")
    if len(settings.style_raw_weights) != len(names):
        raise LayerMismatchError(
            f"{len(settings.style_raw_weights)} style weights for "
            f"{len(names)} style layers of {classifier.name}"
        )
    return LayerWeights.from_raw(names, settings.style_raw_weights, settings.style_weight_norm)


def _resolve_facial_weights(settings: LossSettings, recognizer) -> LayerWeights:
    if settings.facial_layer_weights is not None:
        pairs = dict(settings.facial_layer_weights)
        return LayerWeights.from_raw(list(pairs), list(pairs.values()), "sum")
    names = recognizer.layer_names(role="facial")
    if not names:
        raise LayerMismatchError(f"{recognizer.name}: no facial-role layers declared")
    return LayerWeights.uniform(names)


class StyleTransferObjective:
    """The total loss over a result image, with targets precomputed once.

    Content features, style Grams, and the facial features/meshes of the
    content crops are fixed for the life of the objective; only the result
    image's side is recomputed per evaluation. Feed ``evaluate`` a
    (3, H, W) tensor that requires grad to drive optimization.
    """

    def __init__(
        self,
        content: Image,
        style: Image,
        backbones: BackboneSet,
        boxes: Sequence["FaceBox"] = (),
        *,
        weights: TermWeights,
        settings: LossSettings = LossSettings(),
    ):
        from . import face_pipeline  # local import: face_pipeline depends on this module

        self.weights = weights
        self.settings = settings
        self._classifier = backbones.classifier
        self._backbones = backbones
        self._boxes = tuple(boxes)

        self._content_weights = _resolve_content_weights(settings, self._classifier)
        self._style_weights = _resolve_style_weights(settings, self._classifier)

        self._wanted_layers: list[str] = []
        if weights.alpha > 0:
            self._wanted_layers += list(self._content_weights.names())
        if weights.beta > 0:
            self._wanted_layers += [
                n for n in self._style_weights.names() if n not in self._wanted_layers
            ]

        self._content_target: FeatureSet | None = None
        self._style_target: dict[str, torch.Tensor] | None = None
        with torch.no_grad():
            if weights.alpha > 0:
                self._content_target = self._classifier.features(
                    content, self._content_weights.names()
                )
            if weights.beta > 0:
                feats = self._classifier.features(style, self._style_weights.names())
                g = gram if settings.style_variant == "gatys" else gram_normalized
                self._style_target = {name: g(f) for name, f in feats.items()}

        # Facial targets: content-side crops, concatenated across faces once.
        self._facial = (
            weights.facial_enabled
            and len(self._boxes) > 0
            and backbones.face_recognizer is not None
        )
        self._use_mesh = (
            weights.eta > 0 and self._facial and backbones.face_mesher is not None
        )
        self._facial_weights: LayerWeights | None = None
        self._facial_target = None
        if self._facial:
            if weights.delta > 0:
                self._facial_weights = _resolve_facial_weights(
                    settings, backbones.face_recognizer
                )
            with torch.no_grad():
                self._facial_target = face_pipeline.extract_concat_features(
                    content,
                    self._boxes,
                    backbones,
                    layers=self._facial_weights.names() if self._facial_weights else (),
                    use_mesh=self._use_mesh,
                    crop_size=settings.recognizer_crop_size,
                )

    def _facial_terms(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        from . import face_pipeline

        w, s = self.weights, self.settings
        current = face_pipeline.extract_concat_features(
            x,
            self._boxes,
            self._backbones,
            layers=self._facial_weights.names() if self._facial_weights else (),
            use_mesh=self._use_mesh,
            crop_size=s.recognizer_crop_size,
        )
        zero = x.new_zeros(())
        feat_term = zero
        if self._facial_weights is not None:
            per_layer = None
            for name, lw in self._facial_weights.items():
                d = nse(self._facial_target.per_layer[name], current.per_layer[name], s.epsilon)
                per_layer = lw * d if per_layer is None else per_layer + lw * d
            feat_term = w.delta * per_layer
        mesh_term = zero
        if self._use_mesh:
            mesh_term = w.eta * nse(self._facial_target.mesh, current.mesh, s.epsilon)
        return feat_term, mesh_term

    def evaluate(self, x: torch.Tensor) -> tuple[torch.Tensor, LossBreakdown]:
        """Total loss at ``x`` plus the per-term breakdown (floats, detached)."""
        w, s = self.weights, self.settings
        zero = x.new_zeros(())
        content_term = style_term = tv_term = zero
        if self._wanted_layers:
            feats = self._classifier.features(x, self._wanted_layers)
            if w.alpha > 0:
                content_term = content_loss(
                    self._content_target, feats, self._content_weights, s.content_mode, s.epsilon
                )
            if w.beta > 0:
                g = gram if s.style_variant == "gatys" else gram_normalized
                total = None
                for name, lw in self._style_weights.items():
                    sg, xg = self._style_target[name], g(feats[name])
                    if s.style_variant == "gatys":
                        n_l, m_l = feats[name].shape
                        d = ((sg - xg) ** 2).sum() / (4.0 * n_l**2 * m_l**2)
                    else:
                        d = nse(sg, xg, s.epsilon)
                    total = lw * d if total is None else total + lw * d
                style_term = total
        if w.gamma > 0:
            tv_term = tv_loss(x)

        feat_term = mesh_term = zero
        if self._facial:
            feat_term, mesh_term = self._facial_terms(x)

        total = (
            w.alpha * content_term
            + w.beta * style_term
            + w.gamma * tv_term
            + feat_term
            + mesh_term
        )
        breakdown = LossBreakdown.from_terms(
            w,
            content=float(content_term.detach()),
            style=float(style_term.detach()),
            tv=float(tv_term.detach()),
            facial_features=float(feat_term.detach()),
            facial_mesh=float(mesh_term.detach()),
        )
        return total, breakdown


def total_loss(
    content: Image,
    style: Image,
    x: Image,
    backbones: BackboneSet,
    config: "StyleTransferConfig",
) -> LossBreakdown:
    """Evaluate every enabled objective term for a candidate result image.

    Face boxes, when facial terms are enabled and a detector is available,
    are located on the content image.
    """
    from . import face_pipeline

    weights = config.term_weights()
    settings = config.loss_settings()
    boxes: Sequence = ()
    if weights.facial_enabled and backbones.face_detector is not None:
        boxes = face_pipeline.locate_faces(
            content,
            backbones.face_detector,
            config.min_confidence,
            margin=config.box_margin,
        )
    objective = StyleTransferObjective(
        content, style, backbones, boxes, weights=weights, settings=settings
    )
    _, breakdown = objective.evaluate(to_tensor(x))
    return breakdown
