"""A frozen promptable segmenter behind one small interface.

``build_sam("vit_h", checkpoint=...)`` loads the real model. ``build_sam("mock")``
builds a one-block image encoder and SAM's prompt encoder with seeded random
weights plus a deterministic readout decoder, so pipelines and tests run
without downloading checkpoints.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from functools import partial
from typing import Literal, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from segment_anything import sam_model_registry
from segment_anything.modeling import ImageEncoderViT, PromptEncoder, Sam
from torch import nn

from .dsmtools import DsmChannel, PeakConfig, peak_prompts
from .inference import NmsConfig, nms
from .structures import Detection, mask_to_box

log = logging.getLogger(__name__)

EMBED_DIM = 256
PATCH = 16
SAM_NMS = NmsConfig(score_threshold=0.5, iou_threshold=0.5, overlap_basis="mask")


@dataclass
class PromptSet:
    """Points are ``(x, y, positive)``; boxes ``(x0, y0, x1, y1)``, all in tile pixels."""

    points: list[tuple[float, float, bool]] = field(default_factory=list)
    boxes: list[tuple[float, float, float, float]] = field(default_factory=list)
    dense_mask: Optional[np.ndarray] = None
    image_size: Optional[int] = None

    def __post_init__(self):
        for b in self.boxes:
            if not (b[2] > b[0] and b[3] > b[1]):
                raise ValueError(f"box prompt must have positive area, got {b}")
        if self.image_size is not None:
            s = self.image_size
            for x, y, *_ in self.points:
                if not (0 <= x <= s and 0 <= y <= s):
                    raise ValueError(f"point ({x}, {y}) outside the {s}px tile")
            for b in self.boxes:
                if min(b) < 0 or max(b) > s:
                    raise ValueError(f"box {b} outside the {s}px tile")

    def __len__(self) -> int:
        return len(self.points) + len(self.boxes)


@dataclass
class EmbeddingMap:
    """Image-encoder output stored channels-first, ``(256, h, w)``."""

    grid: torch.Tensor

    def __post_init__(self):
        if self.grid.ndim != 3 or self.grid.shape[0] != EMBED_DIM:
            raise ValueError(f"embedding must be {EMBED_DIM} x h x w, got {tuple(self.grid.shape)}")

    @property
    def hwc_shape(self) -> tuple[int, int, int]:
        c, h, w = self.grid.shape
        return h, w, c


@dataclass
class MaskPrediction:
    mask: np.ndarray
    predicted_iou: float
    prompt_index: int = 0


MOCK_PREDICTED_IOU = 0.9


class MockMaskDecoder(nn.Module):
    """Deterministic stand-in for SAM's mask decoder with the same call signature.

    Mask logits are the scaled dot product between the mean prompt token and
    the per-pixel sum of image embedding, dense prompt and positional
    encoding, upsampled 4x. A randomly initialised transformer decoder
    scrambles the positional signal and is too ill-conditioned to steer in a
    few hundred steps, so the double keeps only this readout. Predicted IoU is
    the constant ``MOCK_PREDICTED_IOU``.
    """

    def __init__(self, transformer_dim: int = EMBED_DIM):
        super().__init__()
        self.transformer_dim = transformer_dim
        self.num_mask_tokens = 4
        self.register_buffer("scale", torch.tensor(transformer_dim ** -0.5))

    def forward(self, image_embeddings, image_pe, sparse_prompt_embeddings, dense_prompt_embeddings,
                multimask_output: bool):
        n = sparse_prompt_embeddings.shape[0]
        src = image_embeddings + dense_prompt_embeddings + image_pe
        src = src.expand(n, -1, -1, -1) if src.shape[0] == 1 else src
        logits = torch.einsum("nc,nchw->nhw", sparse_prompt_embeddings.mean(1), src) * self.scale
        low = F.interpolate(logits[:, None], scale_factor=4, mode="bilinear", align_corners=False)
        k = 3 if multimask_output else 1
        return low.expand(-1, k, -1, -1).contiguous(), low.new_full((n, k), MOCK_PREDICTED_IOU)


def _mock_sam(image_size: int) -> Sam:
    grid = image_size // PATCH
    return Sam(
        image_encoder=ImageEncoderViT(
            img_size=image_size, patch_size=PATCH, in_chans=3, embed_dim=32, depth=1, num_heads=2,
            mlp_ratio=2.0, out_chans=EMBED_DIM, qkv_bias=True,
            norm_layer=partial(torch.nn.LayerNorm, eps=1e-6), use_rel_pos=False, window_size=0,
            global_attn_indexes=(),
        ),
        prompt_encoder=PromptEncoder(
            embed_dim=EMBED_DIM, image_embedding_size=(grid, grid), input_image_size=(image_size, image_size),
            mask_in_chans=16,
        ),
        mask_decoder=MockMaskDecoder(),
    )


def build_sam(kind: str = "vit_h", checkpoint: Optional[str] = None, image_size: int = 1024,
              seed: int = 0) -> Sam:
    """Real SAM (``vit_h``/``vit_l``/``vit_b``, 1024 px) or the seeded ``mock`` double."""
    if kind == "mock":
        if image_size % PATCH:
            raise ValueError(f"image_size must be a multiple of {PATCH}")
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            return _mock_sam(image_size)
    if kind not in sam_model_registry:
        raise ValueError(f"unknown SAM kind {kind!r}")
    if image_size != 1024:
        raise ValueError("pretrained SAM expects 1024 px inputs")
    if checkpoint is None:
        raise ValueError(f"{kind} needs a checkpoint path")
    return sam_model_registry[kind](checkpoint=checkpoint)


def state_checksum(module: torch.nn.Module) -> str:
    """SHA-256 over parameter and buffer bytes in key order."""
    h = hashlib.sha256()
    for k, v in sorted(module.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def automatic_grid_prompts(pps: int, image_size: int = 1024) -> PromptSet:
    """``pps * pps`` positive points at the centres of a uniform grid."""
    if pps < 1:
        raise ValueError("pps must be >= 1")
    offset = 1.0 / (2 * pps)
    ticks = np.linspace(offset, 1 - offset, pps) * image_size
    xs, ys = np.meshgrid(ticks, ticks)
    pts = [(float(x), float(y), True) for x, y in zip(xs.ravel(), ys.ravel())]
    return PromptSet(points=pts, image_size=image_size)


class SamAdapter:
    """Frozen SAM with helpers for encoding, prompting and the out-of-the-box pipelines."""

    def __init__(self, sam: Sam, prompt_batch: int = 64, mask_prompt_logit: float = 20.0):
        self.sam = sam
        self.prompt_batch = prompt_batch
        self.mask_prompt_logit = mask_prompt_logit
        for p in sam.parameters():
            p.requires_grad_(False)
        sam.eval()

    @property
    def image_size(self) -> int:
        return self.sam.image_encoder.img_size

    @property
    def embedding_size(self) -> int:
        return self.image_size // PATCH

    def checksum(self) -> str:
        return state_checksum(self.sam)

    def preprocess(self, image) -> torch.Tensor:
        """``H x W x 3`` (numpy, 0-255) or ``B x 3 x H x W`` tensor -> normalised batch."""
        if isinstance(image, np.ndarray):
            if image.ndim != 3 or image.shape[2] != 3:
                raise ValueError(f"expected H x W x 3 image, got {image.shape}")
            image = torch.as_tensor(np.ascontiguousarray(image), dtype=torch.float32).permute(2, 0, 1)[None]
        if image.ndim == 3:
            image = image[None]
        s = self.image_size
        if tuple(image.shape[1:]) != (3, s, s):
            raise ValueError(f"expected 3 x {s} x {s} input, got {tuple(image.shape[1:])}")
        image = image.to(self.sam.pixel_mean.device)
        return (image.float() - self.sam.pixel_mean) / self.sam.pixel_std

    @torch.no_grad()
    def embed(self, images) -> torch.Tensor:
        """Batched image embeddings ``(B, 256, h, w)``."""
        return self.sam.image_encoder(self.preprocess(images))

    def encode_image(self, image) -> EmbeddingMap:
        return EmbeddingMap(self.embed(image)[0])

    def no_mask_dense(self, batch: int = 1) -> torch.Tensor:
        h = self.embedding_size
        return self.sam.prompt_encoder.no_mask_embed.weight.reshape(1, -1, 1, 1).expand(batch, -1, h, h)

    def dense_pe(self) -> torch.Tensor:
        return self.sam.prompt_encoder.get_dense_pe()

    def upscale(self, low_res: torch.Tensor) -> torch.Tensor:
        return F.interpolate(low_res, (self.image_size, self.image_size), mode="bilinear", align_corners=False)

    def _mask_prompt(self, mask: np.ndarray) -> torch.Tensor:
        low = 4 * self.embedding_size
        m = torch.as_tensor(mask, dtype=torch.float32)[None, None]
        m = F.interpolate(m, (low, low), mode="area")
        return (m * 2 - 1) * self.mask_prompt_logit

    @torch.no_grad()
    def _decode(self, emb: torch.Tensor, points=None, boxes=None, masks=None):
        sparse, dense = self.sam.prompt_encoder(points=points, boxes=boxes, masks=masks)
        low, iou = self.sam.mask_decoder(
            image_embeddings=emb[None], image_pe=self.dense_pe(), sparse_prompt_embeddings=sparse,
            dense_prompt_embeddings=dense, multimask_output=True,
        )
        best = iou.argmax(dim=1)
        ar = torch.arange(len(best))
        masks_hr = self.upscale(low[ar, best][:, None])[:, 0] > self.sam.mask_threshold
        return masks_hr.cpu().numpy(), iou[ar, best].clamp(0, 1).cpu().numpy()

    def segment(self, prompts: PromptSet, embedding: EmbeddingMap) -> list[MaskPrediction]:
        """One mask per point or box prompt; multimask outputs reduced to the best predicted IoU."""
        if len(prompts) == 0:
            raise ValueError("no prompts")
        emb = embedding.grid
        dense = None
        if prompts.dense_mask is not None:
            dense = self._mask_prompt(prompts.dense_mask)
        out: list[MaskPrediction] = []
        b = self.prompt_batch
        for start in range(0, len(prompts.points), b):
            chunk = prompts.points[start:start + b]
            coords = torch.tensor([[p[:2]] for p in chunk], dtype=torch.float32)
            labels = torch.tensor([[1 if p[2] else 0] for p in chunk], dtype=torch.int64)
            masks, ious = self._decode(emb, points=(coords, labels),
                                       masks=None if dense is None else dense.expand(len(chunk), -1, -1, -1))
            out += [MaskPrediction(m, float(s), start + k) for k, (m, s) in enumerate(zip(masks, ious))]
        offset = len(prompts.points)
        for start in range(0, len(prompts.boxes), b):
            chunk = torch.tensor(prompts.boxes[start:start + b], dtype=torch.float32)
            masks, ious = self._decode(emb, boxes=chunk,
                                       masks=None if dense is None else dense.expand(len(chunk), -1, -1, -1))
            out += [MaskPrediction(m, float(s), offset + start + k) for k, (m, s) in enumerate(zip(masks, ious))]
        return [p for p in out if p.mask.any()]

    def _segment_each(self, image_emb: EmbeddingMap, boxes, masks) -> list[tuple[np.ndarray, float]]:
        res = []
        for box, m in zip(boxes, masks):
            ps = PromptSet(boxes=[box], dense_mask=m)
            pred = self.segment(ps, image_emb)
            res.append((pred[0].mask, pred[0].predicted_iou) if pred else (None, 0.0))
        return res


def _to_detections(preds: Sequence[MaskPrediction], label: str = "tree") -> list[Detection]:
    dets = []
    for p in preds:
        box = mask_to_box(p.mask)
        dets.append(Detection(box=box, class_label=label, box_score=p.predicted_iou, mask=p.mask,
                              mask_score=p.predicted_iou, score=p.predicted_iou))
    return dets


def run_sam_automatic(adapter: SamAdapter, image: np.ndarray, pps: int = 100,
                      nms_cfg: NmsConfig = SAM_NMS) -> list[Detection]:
    """Grid-prompted SAM; each mask becomes a "tree" detection scored by predicted IoU."""
    emb = adapter.encode_image(image)
    preds = adapter.segment(automatic_grid_prompts(pps, adapter.image_size), emb)
    return nms(_to_detections(preds), nms_cfg)


def run_sam_dsm_prompts(adapter: SamAdapter, image: np.ndarray, dsm, peak_cfg: PeakConfig,
                        nms_cfg: NmsConfig = SAM_NMS) -> list[Detection]:
    """SAM prompted with DSM local maxima."""
    if dsm is None:
        raise ValueError("DSM prompts need a DSM")
    if not isinstance(dsm, DsmChannel):
        dsm = DsmChannel.from_tile(dsm, image)
    peaks = peak_prompts(dsm, peak_cfg)
    if not peaks:
        return []
    emb = adapter.encode_image(image)
    preds = adapter.segment(PromptSet(points=[(x, y, True) for x, y in peaks], image_size=adapter.image_size), emb)
    return nms(_to_detections(preds), nms_cfg)


def run_detector_prompted(
    adapter: SamAdapter,
    image: np.ndarray,
    detections_in: Sequence[Detection],
    mode: Literal["boxes", "boxes+masks"] = "boxes",
    score_mode: Literal["box", "box+mask"] = "box+mask",
    nms_cfg: Optional[NmsConfig] = None,
) -> list[Detection]:
    """Re-segment detector outputs with SAM, keeping their class labels.

    ``score_mode="box+mask"`` averages the detector score with SAM's
    predicted IoU; ``"box"`` keeps the detector score. Inputs whose SAM mask
    comes back empty are dropped.
    """
    if mode not in ("boxes", "boxes+masks"):
        raise ValueError(f"unknown prompt mode {mode!r}")
    if score_mode not in ("box", "box+mask"):
        raise ValueError(f"unknown score mode {score_mode!r}")
    if not detections_in:
        return []
    if mode == "boxes+masks" and any(d.mask is None for d in detections_in):
        raise ValueError("boxes+masks mode needs masks on every input detection")
    emb = adapter.encode_image(image)
    masks = [d.mask if mode == "boxes+masks" else None for d in detections_in]
    out = []
    for d, (m, iou) in zip(detections_in, adapter._segment_each(emb, [d.box for d in detections_in], masks)):
        if m is None:
            continue
        score = combine_scores(d.box_score, iou, score_mode)
        out.append(Detection(box=mask_to_box(m), class_label=d.class_label, box_score=d.box_score,
                             mask=m, mask_score=iou, score=score))
    return nms(out, nms_cfg) if nms_cfg is not None else out


def combine_scores(box_score: float, predicted_iou: float, score_mode: str) -> float:
    return box_score if score_mode == "box" else 0.5 * (box_score + predicted_iou)
