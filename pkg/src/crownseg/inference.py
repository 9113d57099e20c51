"""Greedy non-maximum suppression over :class:`~crownseg.structures.Detection` lists."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from .structures import Detection, box_iou_matrix, mask_iou_matrix


@dataclass(frozen=True)
class NmsConfig:
    score_threshold: float = 0.5
    iou_threshold: float = 0.5
    class_agnostic: bool = False
    overlap_basis: Literal["box", "mask"] = "mask"

    def __post_init__(self):
        for name in ("score_threshold", "iou_threshold"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.overlap_basis not in ("box", "mask"):
            raise ValueError(f"unknown overlap basis {self.overlap_basis!r}")

    @classmethod
    def from_config(cls, cfg: dict) -> "NmsConfig":
        return cls(
            score_threshold=float(cfg.get("nms.score", 0.5)),
            iou_threshold=float(cfg.get("nms.iou", 0.5)),
            class_agnostic=bool(cfg.get("nms.class_agnostic", False)),
            overlap_basis=cfg.get("nms.basis", "mask"),
        )


def _overlaps(dets: Sequence[Detection], basis: str) -> np.ndarray:
    if basis == "mask":
        if any(d.mask is None for d in dets):
            raise ValueError("mask-basis NMS needs a mask on every detection")
        return mask_iou_matrix(np.stack([d.mask for d in dets]), np.stack([d.mask for d in dets]))
    boxes = np.array([d.box for d in dets])
    return box_iou_matrix(boxes, boxes)


def nms(detections: Sequence[Detection], cfg: NmsConfig = NmsConfig()) -> list[Detection]:
    """Drop low scores, then greedily suppress overlaps above ``cfg.iou_threshold``.

    Survivors come back sorted by descending score; equal scores keep their
    input order. Suppression only applies to same-class pairs unless
    ``cfg.class_agnostic`` is set.
    """
    kept_in = [d for d in detections if d.score >= cfg.score_threshold]
    if not kept_in:
        return []
    scores = np.array([d.score for d in kept_in])
    order = np.argsort(-scores, kind="stable")
    dets = [kept_in[i] for i in order]
    iou = _overlaps(dets, cfg.overlap_basis)
    labels = np.array([d.class_label for d in dets], dtype=object)

    suppressed = np.zeros(len(dets), dtype=bool)
    keep = []
    for i in range(len(dets)):
        if suppressed[i]:
            continue
        keep.append(i)
        hit = iou[i] > cfg.iou_threshold
        if not cfg.class_agnostic:
            hit &= labels == labels[i]
        hit[: i + 1] = False
        suppressed |= hit
    return [dets[i] for i in keep]
