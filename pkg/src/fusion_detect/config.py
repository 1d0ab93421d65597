"""Run configuration: a strict JSON document with named presets.

Every key has a default, unknown keys are rejected, and a file may name a
``profile`` whose values it then overrides.  ``RunConfig()`` is the
``full`` profile, the published full-scale training setup; ``desk`` is the
small CPU-friendly profile the CLI uses when no config file is given.
"""
from __future__ import annotations

import copy
import json
from fractions import Fraction
from pathlib import Path
from typing import Optional

from pydantic import BaseModel, ConfigDict, ValidationError as PydanticValidationError, field_validator

from .backbones import DEFAULT_BLOCK_FILTERS, BackboneConfig
from .data.synth import SynthConfig
from .data.transforms import AugmentationConfig
from .detection.anchors import AnchorSet
from .detection.model import DetectConfig, ModelConfig, ProposalConfig, SamplingConfig
from .detection.roi import RoiPoolConfig
from .errors import ValidationError
from .train import TrainConfig

Pair = tuple[float, float]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, strict=False)


class ModelSection(_Section):
    block_filters: tuple[int, int, int, int, int] = DEFAULT_BLOCK_FILTERS
    width_scale: str = "1"
    input_dims: tuple[int, int, int] = (224, 224, 3)
    class_names: tuple[str, ...] = ("vehicle",)
    head_hidden: int = 128
    roi_output_size: tuple[int, int] = (7, 7)
    rpn_delta_weights: tuple[float, float, float, float] = (10.0, 10.0, 5.0, 5.0)
    head_delta_weights: tuple[float, float, float, float] = (10.0, 10.0, 5.0, 5.0)
    head_box_features: bool = False

    @field_validator("width_scale", mode="before")
    @classmethod
    def _scale(cls, v):
        try:
            f = Fraction(str(v))
        except (ValueError, ZeroDivisionError) as exc:
            raise ValueError(f"not a number or fraction: {v!r}") from exc
        if f <= 0:
            raise ValueError("width_scale must be positive")
        return str(f)

    @field_validator("class_names")
    @classmethod
    def _names(cls, v):
        if not v or len(set(v)) != len(v):
            raise ValueError("class_names must be non-empty and unique")
        return v


class AnchorSection(_Section):
    k: int = 5
    # explicit (w, h) shapes; when absent they are estimated from the data
    shapes: Optional[tuple[Pair, ...]] = None
    stride: int = 32


class TrainSection(_Section):
    learning_rate: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 20
    iterations: int = 1000
    log_every: int = 20
    checkpoint_every: int = 0
    augment: bool = True
    flip: bool = False
    translate: int = 0
    grad_clip: float = 0.0
    lr_decay_at: tuple[int, ...] = ()
    lr_decay_factor: float = 0.1


class SamplingSection(_Section):
    positive_band: Pair = (0.6, 1.0)
    negative_band: Pair = (0.0, 0.3)
    rpn_batch: int = 128
    rpn_positive_fraction: float = 0.5
    roi_batch: int = 64
    roi_positive_fraction: float = 0.25
    allowed_border: float = 0.0
    lambda_rpn: float = 1.0
    lambda_rcnn: float = 1.0
    roi_jitter: int = 0
    # head roi bands; unset means the anchor bands above apply to both stages
    roi_positive_band: Optional[Pair] = None
    roi_negative_band: Optional[Pair] = None


class ProposalSection(_Section):
    pre_nms_top_n: int = 600
    post_nms_top_n: int = 100
    nms_threshold: float = 0.7
    min_size: float = 1.0


class DetectSection(_Section):
    nms_threshold: float = 0.3
    score_threshold: float = 0.5


class AugmentationSection(_Section):
    darken_range: Pair = (0.5, 1.0)
    brighten_range: Pair = (1.0, 1.5)
    probability: float = 0.5


class SynthSection(_Section):
    scenes: int = 400
    image_dims: tuple[int, int] = (64, 64)
    min_objects: int = 1
    max_objects: int = 3
    min_size: int = 18
    max_size: int = 32
    noise_std: float = 4.0


class DataSection(_Section):
    train_fraction: float = 0.8
    synth: SynthSection = SynthSection()


class EvalSection(_Section):
    iou_threshold: float = 0.5


class RunConfig(_Section):
    profile: str = "full"
    seed: int = 0
    model: ModelSection = ModelSection()
    anchors: AnchorSection = AnchorSection()
    train: TrainSection = TrainSection()
    sampling: SamplingSection = SamplingSection()
    proposals: ProposalSection = ProposalSection()
    detect: DetectSection = DetectSection()
    augmentation: AugmentationSection = AugmentationSection()
    data: DataSection = DataSection()
    eval: EvalSection = EvalSection()

    # -- conversions into the library's own config objects ---------------
    def backbone_config(self) -> BackboneConfig:
        m = self.model
        return BackboneConfig(m.block_filters, m.width_scale, m.input_dims)

    def detector_config(self, anchors: AnchorSet | None = None) -> ModelConfig:
        m = self.model
        if anchors is None:
            if self.anchors.shapes is None:
                raise ValidationError("anchor shapes are not set; estimate them from data first")
            anchors = AnchorSet(self.anchors.shapes, self.anchors.stride)
        return ModelConfig(
            backbone=self.backbone_config(), num_classes=len(m.class_names), anchors=anchors,
            head_hidden=m.head_hidden, roi=RoiPoolConfig(m.roi_output_size, 1.0 / anchors.stride),
            rpn_delta_weights=m.rpn_delta_weights, head_delta_weights=m.head_delta_weights,
            head_box_features=m.head_box_features)

    def proposal_config(self) -> ProposalConfig:
        return ProposalConfig(**self.proposals.model_dump())

    def sampling_config(self) -> SamplingConfig:
        return SamplingConfig(proposals=self.proposal_config(), **self.sampling.model_dump())

    def detect_config(self) -> DetectConfig:
        return DetectConfig(proposals=self.proposal_config(), **self.detect.model_dump())

    def augmentation_config(self) -> AugmentationConfig:
        return AugmentationConfig(**self.augmentation.model_dump())

    def train_config(self) -> TrainConfig:
        return TrainConfig(sampling=self.sampling_config(), augmentation=self.augmentation_config(),
                           **self.train.model_dump())

    def synth_config(self, seed: int | None = None) -> SynthConfig:
        s = self.data.synth
        return SynthConfig(image_dims=s.image_dims, min_objects=s.min_objects, max_objects=s.max_objects,
                           min_size=s.min_size, max_size=s.max_size, noise_std=s.noise_std,
                           seed=self.seed if seed is None else seed)

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"


# Values layered over RunConfig() defaults.  "full" adds nothing: the
# defaults already are the published training setup.
PROFILES: dict[str, dict] = {
    "full": {},
    "desk": {
        "model": {"width_scale": "1/8", "input_dims": [64, 64, 3], "head_box_features": True},
        "train": {"learning_rate": 0.01, "batch_size": 4, "iterations": 3000,
                  "flip": True, "translate": 12, "lr_decay_at": [2200]},
        "sampling": {"roi_jitter": 4},
    },
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _describe(exc: PydanticValidationError) -> str:
    parts = []
    for err in exc.errors():
        where = ".".join(str(p) for p in err["loc"]) or "(top level)"
        msg = "unknown key" if err["type"] == "extra_forbidden" else err["msg"]
        parts.append(f"{where}: {msg}")
    return "; ".join(parts)


def config_from_dict(data: dict) -> RunConfig:
    """Validate ``data`` on top of the profile it names (default ``full``)."""
    if not isinstance(data, dict):
        raise ValidationError("config must be a JSON object")
    profile = data.get("profile", "full")
    if profile not in PROFILES:
        raise ValidationError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    try:
        return RunConfig.model_validate(_merge(PROFILES[profile], data))
    except PydanticValidationError as exc:
        raise ValidationError(f"invalid config: {_describe(exc)}") from None


def preset(name: str) -> RunConfig:
    return config_from_dict({"profile": name})


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ValidationError(f"config file not found: {path}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not valid JSON ({exc})") from None
    try:
        return config_from_dict(data)
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from None


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(cfg.to_json(), encoding="utf-8")
