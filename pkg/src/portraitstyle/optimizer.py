"""Multi-stage coarse-to-fine pixel optimization of the result image.

Each stage runs Adam directly on the pixel variable against the total
objective at the stage's resolution; the next stage starts from the
previous result upsampled. Content features, style Grams, and facial
targets are computed once per stage; only the result side is re-evaluated
per step. Pixels are clamped to [0, 1] after every update (or squashed
through a sigmoid when that parameterization is selected), so every stage
yields a savable image.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import torch

from .backbones.base import BackboneSet, FaceBox
from .errors import NonFiniteLossError, ShapeMismatchError
from .face_pipeline import locate_faces
from .image_core import (
    Image,
    from_tensor,
    init_result,
    resize,
    resize_to,
    resolution_schedule,
    to_tensor,
)
from .losses import LossBreakdown, LossSettings, StyleTransferObjective, TermWeights

if TYPE_CHECKING:
    from .config import StyleTransferConfig

__all__ = [
    "StageConfig",
    "StageTrace",
    "OptimizationTrace",
    "optimize_stage",
    "run_pipeline",
]

logger = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
_SIGMOID_MARGIN = 1e-4


@dataclass(frozen=True)
class StageConfig:
    """One optimization stage: resolution, step budget, learning rate, weights."""

    resolution: int
    steps: int
    learning_rate: float
    weights: TermWeights = TermWeights()
    loss: LossSettings = LossSettings()
    pixel_param: str = "clamp"  # clamp | sigmoid

    def __post_init__(self):
        if self.resolution < 1:
            raise ValueError("resolution must be positive")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.pixel_param not in ("clamp", "sigmoid"):
            raise ValueError(f"unknown pixel parameterization {self.pixel_param!r}")


@dataclass
class StageTrace:
    resolution: int
    history: list[LossBreakdown]
    wall_clock_seconds: float

    def to_dict(self) -> dict:
        return {
            "resolution": self.resolution,
            "wall_clock_seconds": self.wall_clock_seconds,
            "history": [b.to_dict() for b in self.history],
        }


@dataclass
class OptimizationTrace:
    stages: list[StageTrace] = field(default_factory=list)
    seed: int = 0

    @property
    def stage_resolutions(self) -> tuple[int, ...]:
        return tuple(s.resolution for s in self.stages)

    @property
    def final_breakdown(self) -> LossBreakdown:
        if not self.stages or not self.stages[-1].history:
            return LossBreakdown()
        return self.stages[-1].history[-1]

    def to_dict(self) -> dict:
        return {"seed": self.seed, "stages": [s.to_dict() for s in self.stages]}


def optimize_stage(
    x0: Image,
    content: Image,
    style: Image,
    cfg: StageConfig,
    backbones: BackboneSet,
    boxes: Sequence[FaceBox] = (),
) -> tuple[Image, StageTrace]:
    """Run one stage of first-order updates on the pixels of ``x0``.

    Deterministic: no randomness is consumed inside the loop, so identical
    inputs produce identical outputs. Raises NonFiniteLossError with the
    offending step index if the objective diverges.
    """
    if x0.pixels.shape != content.pixels.shape:
        raise ShapeMismatchError(
            f"initial image {x0.pixels.shape} does not match content {content.pixels.shape}"
        )
    if x0.long_side != cfg.resolution:
        raise ValueError(
            f"stage expects images at {cfg.resolution}px, got {x0.long_side}px"
        )

    objective = StyleTransferObjective(
        content, style, backbones, boxes, weights=cfg.weights, settings=cfg.loss
    )

    x = to_tensor(x0)
    if cfg.pixel_param == "sigmoid":
        param = torch.logit(x.clamp(_SIGMOID_MARGIN, 1 - _SIGMOID_MARGIN))
        param.requires_grad_(True)
    else:
        param = x.clone().requires_grad_(True)
    opt = torch.optim.Adam([param], lr=cfg.learning_rate, betas=ADAM_BETAS)

    history: list[LossBreakdown] = []
    start = time.perf_counter()
    for step in range(cfg.steps):
        opt.zero_grad(set_to_none=True)
        xi = torch.sigmoid(param) if cfg.pixel_param == "sigmoid" else param
        total, breakdown = objective.evaluate(xi)
        if not math.isfinite(breakdown.total):
            raise NonFiniteLossError(cfg.resolution, step, breakdown.total)
        if total.requires_grad:  # all-zero weights leave nothing to descend
            total.backward()
            opt.step()
            if cfg.pixel_param == "clamp":
                with torch.no_grad():
                    param.clamp_(0.0, 1.0)
        history.append(breakdown)

    final = torch.sigmoid(param) if cfg.pixel_param == "sigmoid" else param
    trace = StageTrace(cfg.resolution, history, time.perf_counter() - start)
    return from_tensor(final), trace


def _stage_boxes(
    boxes: Sequence[FaceBox], full: Image, staged: Image
) -> list[FaceBox]:
    sx = staged.width / full.width
    sy = staged.height / full.height
    out = []
    for b in boxes:
        scaled = b.scaled(sx, sy).clipped(staged.width, staged.height)
        if scaled is not None:
            out.append(scaled)
    return out


def run_pipeline(
    content: Image,
    style: Image,
    config: "StyleTransferConfig",
    backbones: BackboneSet,
) -> tuple[Image, OptimizationTrace]:
    """Full coarse-to-fine run from initial to final resolution.

    Stage 1 starts from the configured initialization; every later stage
    starts from the previous stage's output upsampled. Content and style
    are resized per stage, and face boxes (located once on the full
    content image) are rescaled to each stage's frame.
    """
    schedule = resolution_schedule(config.init_res, config.final_res, config.scale_factor)
    weights = config.term_weights()
    settings = config.loss_settings()

    boxes_full: list[FaceBox] = []
    if weights.facial_enabled:
        if backbones.face_detector is None or backbones.face_recognizer is None:
            logger.warning(
                "facial terms enabled but detector/recognizer unavailable; "
                "continuing without them"
            )
        else:
            boxes_full = locate_faces(
                content, backbones.face_detector, config.min_confidence,
                margin=config.box_margin,
            )
            if not boxes_full:
                logger.warning(
                    "no faces found on the content image; facial terms are 0"
                )

    snapshot_dir = Path(config.snapshot_dir) if config.snapshot_dir else None
    if snapshot_dir is not None:
        snapshot_dir.mkdir(parents=True, exist_ok=True)

    trace = OptimizationTrace(seed=config.seed)
    x: Image | None = None
    for i, res in enumerate(schedule):
        c_s = resize(content, res, "downsample" if res <= content.long_side else "upsample")
        s_s = resize(style, res, "downsample" if res <= style.long_side else "upsample")
        if x is None:
            x0 = init_result(c_s, config.init_strategy, config.seed)
        else:
            x0 = resize_to(x, (c_s.height, c_s.width), "upsample")
        stage_cfg = StageConfig(
            resolution=res,
            steps=config.steps_per_stage,
            learning_rate=config.learning_rate * config.lr_stage_decay**i,
            weights=weights,
            loss=settings,
            pixel_param=config.pixel_param,
        )
        boxes_s = _stage_boxes(boxes_full, content, c_s)
        logger.info(
            "stage %d/%d at %dpx: %d steps, lr %.4g, %d face(s)",
            i + 1, len(schedule), res, stage_cfg.steps, stage_cfg.learning_rate,
            len(boxes_s),
        )
        x, stage_trace = optimize_stage(x0, c_s, s_s, stage_cfg, backbones, boxes_s)
        trace.stages.append(stage_trace)
        if snapshot_dir is not None:
            from .image_core import save_image

            save_image(x, snapshot_dir / f"stage_{i + 1}_{res}px.png")
    return x, trace
