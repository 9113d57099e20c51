"""Build any trainable model family from a flat description, so checkpoints can be rebuilt for prediction."""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Mapping, Optional

import torch

from .detectors import DetectorConfig, build_detector
from .prompter import build_prompt_segmenter
from .sam_adapter import SamAdapter, build_sam
from .trainer import FASTER_RCNN_KINDS, MASK_RCNN_KINDS, PROMPTER_KINDS

CACHE_ENV = "CROWNSEG_CACHE_DIR"
SAM_CHECKPOINTS = {"vit_h": "sam_vit_h_4b8939.pth", "vit_l": "sam_vit_l_0b3195.pth", "vit_b": "sam_vit_b_01ec64.pth"}
_VARIANTS = {"rsprompter": "rsprompter", "balsam": "balsam", "balsam_a": "variant_a", "balsam_b": "variant_b"}
_DETECTORS = {
    "mask_rcnn": dict(kind="mask"),
    "mask_rcnn_dsm": dict(kind="mask", in_channels=4),
    "mask_rcnn_gradients": dict(kind="mask", in_channels=5),
    "mask_rcnn_dsm_encoder": dict(kind="mask", in_channels=4, dsm_encoder_stack=True),
    "mask_rcnn_extra_capacity": dict(kind="mask", extra_head_capacity=True),
    "faster_rcnn": dict(kind="faster"),
    "faster_rcnn_scratch": dict(kind="faster"),
    "faster_rcnn_dsm": dict(kind="faster", in_channels=4),
}
MODEL_KINDS = MASK_RCNN_KINDS + FASTER_RCNN_KINDS + PROMPTER_KINDS


def cache_dir() -> Path:
    """Checkpoint cache: ``$CROWNSEG_CACHE_DIR`` or ``~/.cache/crownseg``."""
    return Path(os.environ.get(CACHE_ENV) or Path.home() / ".cache" / "crownseg")


@dataclass(frozen=True)
class ModelSpec:
    model_kind: str
    num_classes: int
    image_size: int = 1024
    backbone: str = "resnet50"
    pretrained_backbone: bool = False
    sam: str = "mock"
    sam_checkpoint: Optional[str] = None
    sam_seed: int = 0
    # reduced prompter sizes for CPU runs; None keeps the defaults
    rpn_post_nms_top_n: Optional[tuple[int, int]] = None
    roi_batch_size: Optional[int] = None
    rpn_batch_size: Optional[int] = None
    representation_size: Optional[int] = None
    max_mask_instances: Optional[int] = None

    def __post_init__(self):
        if self.model_kind not in MODEL_KINDS:
            raise ValueError(f"unknown model_kind {self.model_kind!r}; expected one of {', '.join(MODEL_KINDS)}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["rpn_post_nms_top_n"] is not None:
            d["rpn_post_nms_top_n"] = list(d["rpn_post_nms_top_n"])
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        known = {f.name for f in fields(cls)}
        kw = {k: v for k, v in d.items() if k in known}
        if kw.get("rpn_post_nms_top_n") is not None:
            kw["rpn_post_nms_top_n"] = tuple(kw["rpn_post_nms_top_n"])
        return cls(**kw)


def resolve_sam_checkpoint(spec: ModelSpec) -> str:
    if spec.sam_checkpoint:
        return spec.sam_checkpoint
    path = cache_dir() / SAM_CHECKPOINTS[spec.sam]
    if not path.exists():
        raise FileNotFoundError(f"no SAM checkpoint for {spec.sam}: set sam_checkpoint or place {path.name} "
                                f"in ${CACHE_ENV} ({cache_dir()})")
    return str(path)


def build_model(spec: ModelSpec, device: str | torch.device = "cpu"):
    """Instantiate the model family named by ``spec.model_kind`` on ``device``."""
    if spec.model_kind in _DETECTORS:
        cfg = DetectorConfig(num_classes=spec.num_classes, image_size=spec.image_size, backbone=spec.backbone,
                             pretrained_backbone=spec.pretrained_backbone and spec.model_kind != "faster_rcnn_scratch",
                             **_DETECTORS[spec.model_kind])
        if cfg.pretrained_backbone:
            torch.hub.set_dir(str(cache_dir() / "torch"))
        return build_detector(cfg).to(device)
    if spec.sam == "mock":
        sam = build_sam("mock", image_size=spec.image_size, seed=spec.sam_seed)
    else:
        sam = build_sam(spec.sam, checkpoint=resolve_sam_checkpoint(spec))
    overrides = {k: getattr(spec, k) for k in ("rpn_post_nms_top_n", "roi_batch_size", "rpn_batch_size",
                                                "representation_size", "max_mask_instances")
                 if getattr(spec, k) is not None}
    model = build_prompt_segmenter(SamAdapter(sam), spec.num_classes, _VARIANTS[spec.model_kind], **overrides)
    return model.to(device)
