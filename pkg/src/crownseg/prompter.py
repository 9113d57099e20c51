"""Prompt learning over a frozen SAM: RSPrompter-anchor, BalSAM and its two variants.

The prompter is a two-stage detector (RPN + RoI head) running on the SAM
image embedding. For every kept box it emits class logits and a short
sequence of sparse prompt tokens that the frozen SAM mask decoder turns
into a mask. BalSAM adds a trainable DSM encoder whose output is summed
with the image embedding.

Wiring per :class:`FusionVariant` (``E`` image embedding, ``D`` DSM embedding):

============  ==============  ======================
variant       prompter input  mask decoder input
============  ==============  ======================
rsprompter    E               E
balsam        E               E + D
variant_a     E + D           E + D
variant_b     E + D           E
============  ==============  ======================

The dense-prompt branch always carries SAM's no-mask embedding unless
``dense_injection="dense"``, in which case ``D`` is added there instead of
to the decoder's image input. SAM's decoder sums the two before its first
layer, so both readings give the same masks.
"""
from __future__ import annotations

import enum
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Literal, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from segment_anything.modeling.common import LayerNorm2d
from torch import nn
from torchvision.models.detection.anchor_utils import AnchorGenerator
from torchvision.models.detection.faster_rcnn import FastRCNNPredictor, TwoMLPHead
from torchvision.models.detection.image_list import ImageList
from torchvision.models.detection.roi_heads import RoIHeads
from torchvision.models.detection.rpn import RegionProposalNetwork, RPNHead
from torchvision.ops import MultiScaleRoIAlign, boxes as box_ops

from .losses import ClassLoss
from .sam_adapter import EMBED_DIM, EmbeddingMap, SamAdapter, state_checksum
from .structures import Detection


class FusionVariant(str, enum.Enum):
    RSPROMPTER = "rsprompter"
    BALSAM = "balsam"
    VARIANT_A = "variant_a"
    VARIANT_B = "variant_b"

    @property
    def uses_dsm(self) -> bool:
        return self is not FusionVariant.RSPROMPTER


@dataclass(frozen=True)
class DsmPromptEncoderSpec:
    channels: tuple[int, int, int] = (192, 768, EMBED_DIM)
    kernels: tuple[int, int, int] = (2, 8, 1)
    strides: tuple[int, int, int] = (2, 8, 1)
    zero_init_last: bool = True

    def __post_init__(self):
        if self.channels[-1] != EMBED_DIM:
            raise ValueError(f"DSM encoder must end with {EMBED_DIM} channels")

    @property
    def total_stride(self) -> int:
        return int(np.prod(self.strides))


class DsmPromptEncoder(nn.Module):
    """Conv -> LayerNorm -> GELU -> Conv -> LayerNorm -> GELU -> Conv, mirroring SAM's mask downscaler."""

    def __init__(self, spec: DsmPromptEncoderSpec = DsmPromptEncoderSpec()):
        super().__init__()
        self.spec = spec
        c1, c2, c3 = spec.channels
        k1, k2, k3 = spec.kernels
        s1, s2, s3 = spec.strides
        self.conv1 = nn.Conv2d(1, c1, k1, stride=s1)
        self.norm1 = LayerNorm2d(c1)
        self.conv2 = nn.Conv2d(c1, c2, k2, stride=s2)
        self.norm2 = LayerNorm2d(c2)
        self.conv3 = nn.Conv2d(c2, c3, k3, stride=s3)
        self.act = nn.GELU()
        if spec.zero_init_last:
            nn.init.zeros_(self.conv3.weight)
            nn.init.zeros_(self.conv3.bias)

    @staticmethod
    def _conv(x: torch.Tensor, conv: nn.Conv2d) -> torch.Tensor:
        """Channels-last in and out; non-overlapping kernels run as a patch matmul."""
        k, s = conv.kernel_size[0], conv.stride[0]
        B, H, W, C = x.shape
        if k == s and conv.padding == (0, 0) and H % k == 0 and W % k == 0:
            p = x.reshape(B, H // k, k, W // k, k, C).permute(0, 1, 3, 5, 2, 4).reshape(B, H // k, W // k, C * k * k)
            return p @ conv.weight.reshape(conv.out_channels, -1).t() + conv.bias
        return conv(x.permute(0, 3, 1, 2)).permute(0, 2, 3, 1)

    @staticmethod
    def _norm(x: torch.Tensor, norm: LayerNorm2d) -> torch.Tensor:
        return F.layer_norm(x, (x.shape[-1],), norm.weight, norm.bias, norm.eps)

    def stages(self, dsm: torch.Tensor) -> list[torch.Tensor]:
        if dsm.ndim != 4 or dsm.shape[1] != 1:
            raise ValueError(f"DSM batch must be B x 1 x H x W, got {tuple(dsm.shape)}")
        st = self.spec.total_stride
        if dsm.shape[2] % st or dsm.shape[3] % st:
            raise ValueError(f"DSM size {tuple(dsm.shape[2:])} not divisible by {st}")
        a = self._conv(dsm.permute(0, 2, 3, 1), self.conv1)
        b = self._conv(self.act(self._norm(a, self.norm1)), self.conv2)
        c = self._conv(self.act(self._norm(b, self.norm2)), self.conv3)
        return [t.permute(0, 3, 1, 2) for t in (a, b, c)]

    def forward(self, dsm: torch.Tensor) -> torch.Tensor:
        return self.stages(dsm)[-1]


def dsm_encode(encoder: DsmPromptEncoder, dsm) -> EmbeddingMap:
    """Encode one normalised ``H x W`` (or ``H x W x 1``) DSM into an embedding map."""
    t = torch.as_tensor(np.asarray(dsm), dtype=torch.float32)
    if t.ndim == 3 and t.shape[-1] == 1:
        t = t[..., 0]
    if t.ndim != 2:
        raise ValueError(f"DSM must be H x W, got {tuple(t.shape)}")
    return EmbeddingMap(encoder(t[None, None])[0])


def fuse(image_emb: EmbeddingMap, dsm_emb: EmbeddingMap) -> EmbeddingMap:
    """Element-wise sum of two embedding maps."""
    if image_emb.grid.shape != dsm_emb.grid.shape:
        raise ValueError(f"shape mismatch {tuple(image_emb.grid.shape)} vs {tuple(dsm_emb.grid.shape)}")
    return EmbeddingMap(image_emb.grid + dsm_emb.grid)


@dataclass(frozen=True)
class AnchorPrompterSpec:
    """Every structural choice of the anchor prompter, in one place."""

    num_classes: int
    image_size: int = 1024
    neck_channels: int = 256
    # strides 8, 16, 32 over the image; sizes scale with image_size / 1024
    anchor_sizes: tuple = ((32, 48), (64, 128), (256, 512))
    aspect_ratios: tuple = (0.5, 1.0, 2.0)
    rpn_pre_nms_top_n: tuple[int, int] = (2000, 1000)  # train, test
    rpn_post_nms_top_n: tuple[int, int] = (1000, 1000)
    rpn_nms_thresh: float = 0.7
    rpn_batch_size: int = 256
    roi_batch_size: int = 512
    roi_positive_fraction: float = 0.25
    box_score_thresh: float = 0.05
    box_nms_thresh: float = 0.5
    detections_per_img: int = 100
    representation_size: int = 1024
    tokens_per_instance: int = 4
    token_dim: int = EMBED_DIM
    box_tokens: bool = True  # prepend SAM's frozen box-corner embedding of the RoI
    max_mask_instances: int = 64
    mask_loss_weight: float = 1.0

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if min(self.rpn_post_nms_top_n) < 1:
            raise ValueError("proposal count must be >= 1")
        if self.tokens_per_instance < 1:
            raise ValueError("tokens_per_instance must be >= 1")

    @property
    def num_proposals(self) -> int:
        return self.rpn_post_nms_top_n[1]

    def scaled_anchor_sizes(self) -> tuple:
        f = self.image_size / 1024
        return tuple(tuple(max(2.0, s * f) for s in lvl) for lvl in self.anchor_sizes)


@dataclass
class PrompterOutput:
    """Per-instance prompt tokens ``(N, T, C)``, foreground logits ``(N, K)`` and background logit ``(N,)``."""

    tokens: torch.Tensor
    class_logits: torch.Tensor
    background_logits: torch.Tensor
    boxes: torch.Tensor


class EmbeddingNeck(nn.Module):
    """Three feature levels (strides 8, 16, 32) from the stride-16 embedding."""

    def __init__(self, in_channels: int = EMBED_DIM, out_channels: int = 256):
        super().__init__()
        self.lateral = nn.Sequential(nn.Conv2d(in_channels, out_channels, 1), nn.GroupNorm(32, out_channels), nn.ReLU())
        self.up = nn.Sequential(nn.ConvTranspose2d(out_channels, out_channels, 2, stride=2), nn.ReLU())
        self.smooth = nn.ModuleList([nn.Conv2d(out_channels, out_channels, 3, padding=1) for _ in range(3)])
        self.down = nn.Conv2d(out_channels, out_channels, 3, stride=2, padding=1)

    def forward(self, x: torch.Tensor) -> "OrderedDict[str, torch.Tensor]":
        mid = self.lateral(x)
        levels = [self.up(mid), mid, self.down(mid)]
        return OrderedDict((str(i), conv(lvl)) for i, (conv, lvl) in enumerate(zip(self.smooth, levels)))


class PromptHead(nn.Module):
    def __init__(self, in_features: int, spec: AnchorPrompterSpec):
        super().__init__()
        self.spec = spec
        self.mlp = nn.Sequential(
            nn.Flatten(), nn.Linear(in_features, spec.representation_size), nn.ReLU(),
            nn.Linear(spec.representation_size, spec.tokens_per_instance * spec.token_dim),
        )

    def forward(self, roi_feats: torch.Tensor) -> torch.Tensor:
        return self.mlp(roi_feats).view(-1, self.spec.tokens_per_instance, self.spec.token_dim)


class AnchorPrompter(nn.Module):
    """RPN + RoI head over SAM embeddings emitting class logits and prompt tokens."""

    def __init__(self, spec: AnchorPrompterSpec, decoder_dim: int = EMBED_DIM):
        super().__init__()
        if spec.token_dim != decoder_dim:
            raise ValueError(f"token width {spec.token_dim} incompatible with mask decoder width {decoder_dim}")
        self.spec = spec
        c = spec.neck_channels
        self.neck = EmbeddingNeck(EMBED_DIM, c)
        anchors = AnchorGenerator(spec.scaled_anchor_sizes(), (spec.aspect_ratios,) * len(spec.anchor_sizes))
        self.rpn = RegionProposalNetwork(
            anchors, RPNHead(c, anchors.num_anchors_per_location()[0]),
            fg_iou_thresh=0.7, bg_iou_thresh=0.3, batch_size_per_image=spec.rpn_batch_size, positive_fraction=0.5,
            pre_nms_top_n=dict(training=spec.rpn_pre_nms_top_n[0], testing=spec.rpn_pre_nms_top_n[1]),
            post_nms_top_n=dict(training=spec.rpn_post_nms_top_n[0], testing=spec.rpn_post_nms_top_n[1]),
            nms_thresh=spec.rpn_nms_thresh,
        )
        roi_pool = MultiScaleRoIAlign(["0", "1", "2"], output_size=7, sampling_ratio=2)
        self.roi_heads = RoIHeads(
            roi_pool, TwoMLPHead(c * 49, spec.representation_size),
            FastRCNNPredictor(spec.representation_size, spec.num_classes + 1),
            fg_iou_thresh=0.5, bg_iou_thresh=0.5, batch_size_per_image=spec.roi_batch_size,
            positive_fraction=spec.roi_positive_fraction, bbox_reg_weights=None,
            score_thresh=spec.box_score_thresh, nms_thresh=spec.box_nms_thresh,
            detections_per_img=spec.detections_per_img,
        )
        self.prompt_head = PromptHead(c * 49, spec)

    def features(self, embedding: torch.Tensor) -> "OrderedDict[str, torch.Tensor]":
        return self.neck(embedding)

    def tokens_for(self, feats, boxes: list[torch.Tensor], image_sizes) -> torch.Tensor:
        pooled = self.roi_heads.box_roi_pool(feats, boxes, image_sizes)
        return self.prompt_head(pooled)

    def classify(self, feats, boxes: list[torch.Tensor], image_sizes):
        pooled = self.roi_heads.box_roi_pool(feats, boxes, image_sizes)
        return self.roi_heads.box_predictor(self.roi_heads.box_head(pooled))

    def forward(self, embedding: torch.Tensor, boxes: Optional[list[torch.Tensor]] = None) -> PrompterOutput:
        """Prompter outputs for ``boxes`` (default: test-time RPN proposals) on a single image."""
        s = self.spec.image_size
        sizes = [(s, s)] * embedding.shape[0]
        feats = self.features(embedding)
        if boxes is None:
            boxes, _ = self.rpn(ImageList(embedding.new_zeros(embedding.shape[0], 3, s, s), sizes), feats)
        logits, _ = self.classify(feats, boxes, sizes)
        tokens = self.tokens_for(feats, boxes, sizes)
        return PrompterOutput(tokens, logits[:, 1:], logits[:, 0], torch.cat(boxes))


def build_anchor_prompter(num_classes: int, spec: Optional[AnchorPrompterSpec] = None, **overrides) -> AnchorPrompter:
    spec = spec or AnchorPrompterSpec(num_classes=num_classes, **overrides)
    if spec.num_classes != num_classes:
        raise ValueError("num_classes disagrees with spec")
    return AnchorPrompter(spec)


def _box_loss(box_regression, labels, regression_targets):
    labels = torch.cat(labels)
    regression_targets = torch.cat(regression_targets)
    pos = torch.where(labels > 0)[0]
    if len(pos) == 0:
        return box_regression.sum() * 0.0
    box_regression = box_regression.reshape(len(labels), box_regression.size(-1) // 4, 4)
    return F.smooth_l1_loss(box_regression[pos, labels[pos]], regression_targets[pos], beta=1 / 9,
                            reduction="sum") / labels.numel()


def _dice_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    p = logits.sigmoid().flatten(1)
    t = target.flatten(1)
    return (1 - (2 * (p * t).sum(1) + 1) / (p.sum(1) + t.sum(1) + 1)).mean()


class PromptSegmenter(nn.Module):
    """RSPrompter-anchor (``variant=rsprompter``) or BalSAM and its variants on a frozen SAM."""

    def __init__(
        self,
        sam: SamAdapter,
        spec: AnchorPrompterSpec,
        variant: FusionVariant | str = FusionVariant.BALSAM,
        dsm_spec: DsmPromptEncoderSpec = DsmPromptEncoderSpec(),
        class_loss: Optional[ClassLoss] = None,
        dense_injection: Literal["image", "dense"] = "image",
    ):
        super().__init__()
        if spec.image_size != sam.image_size:
            raise ValueError(f"prompter built for {spec.image_size}px but SAM expects {sam.image_size}px")
        self.adapter = sam
        self.sam = sam.sam  # registered so .to() moves it; frozen and excluded from checkpoints
        self.variant = FusionVariant(variant)
        self.spec = spec
        self.prompter = AnchorPrompter(spec, sam.sam.mask_decoder.transformer_dim)
        self.dsm_encoder = DsmPromptEncoder(dsm_spec) if self.variant.uses_dsm else None
        self.class_loss = class_loss or ClassLoss("ce")
        if dense_injection not in ("image", "dense"):
            raise ValueError(f"unknown dense injection {dense_injection!r}")
        self.dense_injection = dense_injection

    # frozen SAM stays in eval mode whatever the wrapper's mode
    def train(self, mode: bool = True):
        super().train(mode)
        self.sam.eval()
        return self

    def trainable_state_dict(self) -> dict:
        return {k: v for k, v in self.state_dict().items() if not k.startswith("sam.")}

    def load_trainable_state_dict(self, state: dict) -> None:
        missing, unexpected = self.load_state_dict(state, strict=False)
        missing = [k for k in missing if not k.startswith("sam.")]
        if missing or unexpected:
            raise KeyError(f"checkpoint mismatch: missing {missing}, unexpected {unexpected}")

    def trainable_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("sam.") and p.requires_grad]

    def sam_checksum(self) -> str:
        return state_checksum(self.sam)

    def _embeddings(self, images: torch.Tensor, dsm: Optional[torch.Tensor]):
        image_emb = self.adapter.embed(images)
        if not self.variant.uses_dsm:
            return image_emb, None
        if dsm is None:
            raise ValueError(f"{self.variant.value} needs a DSM input")
        return image_emb, self.dsm_encoder(dsm.float())

    def _route(self, image_emb, dsm_emb):
        """(prompter input, decoder image input, extra dense term)."""
        v = self.variant
        if dsm_emb is None:
            return image_emb, image_emb, None
        fused = image_emb + dsm_emb
        prompter_in = image_emb if v is FusionVariant.BALSAM else fused
        if v is FusionVariant.VARIANT_B:
            return prompter_in, image_emb, None
        if self.dense_injection == "dense":
            return prompter_in, image_emb, dsm_emb
        return prompter_in, fused, None

    def _decode(self, dec_in: torch.Tensor, extra_dense: Optional[torch.Tensor], tokens: torch.Tensor,
                boxes: torch.Tensor) -> torch.Tensor:
        """Low-resolution mask logits ``(N, 4h, 4w)`` for one image."""
        if len(tokens) == 0:
            h = 4 * dec_in.shape[-1]
            return dec_in.new_zeros(0, h, h)
        sparse = tokens
        if self.spec.box_tokens:
            s = self.spec.image_size
            corner = self.sam.prompt_encoder._embed_boxes(boxes.clamp(0, s))
            sparse = torch.cat([corner, tokens], dim=1)
        dense = self.adapter.no_mask_dense(1)
        if extra_dense is not None:
            dense = dense + extra_dense
        low, _ = self.sam.mask_decoder(
            image_embeddings=dec_in, image_pe=self.adapter.dense_pe(), sparse_prompt_embeddings=sparse,
            dense_prompt_embeddings=dense, multimask_output=False,
        )
        return low[:, 0]

    def forward(self, images: torch.Tensor, dsm: Optional[torch.Tensor] = None,
                targets: Optional[list[dict]] = None):
        """Loss dict when ``targets`` are given, otherwise per-image raw outputs.

        ``images`` is ``B x 3 x S x S`` in 0-255, ``dsm`` is ``B x 1 x S x S``
        normalised. Targets carry ``boxes``, ``labels`` (1-based) and ``masks``.
        """
        s = self.spec.image_size
        sizes = [(s, s)] * images.shape[0]
        image_emb, dsm_emb = self._embeddings(images, dsm)
        p_in, dec_in, extra = self._route(image_emb, dsm_emb)
        feats = self.prompter.features(p_in)
        image_list = ImageList(images, sizes)
        heads = self.prompter.roi_heads
        if targets is not None:
            targets = [{k: v for k, v in t.items()} for t in targets]
            for t in targets:
                t["boxes"] = t["boxes"].float()
            proposals, rpn_losses = self.prompter.rpn(image_list, feats, targets)
            proposals, matched_idxs, labels, reg_targets = heads.select_training_samples(proposals, targets)
            class_logits, box_regression = self.prompter.classify(feats, proposals, sizes)
            losses = dict(rpn_losses)
            losses["loss_classifier"] = self.class_loss(class_logits, torch.cat(labels))
            losses["loss_box_reg"] = _box_loss(box_regression, labels, reg_targets)
            losses["loss_mask"] = self._mask_loss(feats, dec_in, extra, proposals, matched_idxs, labels, targets, sizes)
            return losses
        return self._inference(feats, dec_in, extra, image_list)

    def _mask_loss(self, feats, dec_in, extra, proposals, matched_idxs, labels, targets, sizes):
        total = dec_in.sum() * 0.0
        count = 0
        for b, (props, midx, lab, tgt) in enumerate(zip(proposals, matched_idxs, labels, targets)):
            pos = torch.where(lab > 0)[0][: self.spec.max_mask_instances]
            if len(pos) == 0:
                continue
            boxes = props[pos]
            tokens = self.prompter.tokens_for({k: v[b:b + 1] for k, v in feats.items()}, [boxes], sizes[:1])
            low = self._decode(dec_in[b:b + 1], None if extra is None else extra[b:b + 1], tokens, boxes)
            gt = tgt["masks"][midx[pos]].float()[:, None]
            gt = F.interpolate(gt, low.shape[-2:], mode="area")[:, 0]
            total = total + F.binary_cross_entropy_with_logits(low, gt) + _dice_loss(low, gt)
            count += 1
        return self.spec.mask_loss_weight * total / max(count, 1)

    def _inference(self, feats, dec_in, extra, image_list):
        sizes = image_list.image_sizes
        proposals, _ = self.prompter.rpn(image_list, feats)
        class_logits, box_regression = self.prompter.classify(feats, proposals, sizes)
        boxes, scores, labels = self.prompter.roi_heads.postprocess_detections(
            class_logits, box_regression, proposals, sizes)
        out = []
        start = 0
        for b, props in enumerate(proposals):
            n = len(props)
            feats_b = {k: v[b:b + 1] for k, v in feats.items()}
            tokens = self.prompter.tokens_for(feats_b, [boxes[b]], sizes[:1])
            low = self._decode(dec_in[b:b + 1], None if extra is None else extra[b:b + 1], tokens, boxes[b])
            probs = self.adapter.upscale(low[:, None])[:, 0].sigmoid() if len(low) else low
            out.append({
                "proposals": props,
                "class_logits": class_logits[start:start + n],
                "boxes": boxes[b], "scores": scores[b], "labels": labels[b],
                "mask_probs": probs, "tokens": tokens,
            })
            start += n
        return out

    @torch.no_grad()
    def predict(self, image: np.ndarray, dsm: Optional[np.ndarray], classes: Sequence[str],
                mask_threshold: float = 0.5) -> list[Detection]:
        """Detections for one ``S x S x 3`` tile (``dsm`` normalised ``S x S``)."""
        was = self.training
        self.eval()
        dev = next(self.prompter.parameters()).device
        img = torch.as_tensor(np.ascontiguousarray(image), dtype=torch.float32).permute(2, 0, 1)[None].to(dev)
        d = None if dsm is None else torch.as_tensor(np.asarray(dsm, dtype=np.float32))[None, None].to(dev)
        res = {k: v.cpu() for k, v in self(img, d)[0].items()}
        self.train(was)
        return outputs_to_detections(res, classes, mask_threshold)


def outputs_to_detections(res: dict, classes: Sequence[str], mask_threshold: float = 0.5) -> list[Detection]:
    dets = []
    for box, score, label, prob in zip(res["boxes"].tolist(), res["scores"].tolist(),
                                       res["labels"].tolist(), res["mask_probs"]):
        x0, y0, x1, y1 = box
        if not (x1 > x0 and y1 > y0):
            continue
        mask = (prob >= mask_threshold).cpu().numpy()
        dets.append(Detection(box=(x0, y0, x1, y1), class_label=classes[label - 1],
                              box_score=float(min(max(score, 0.0), 1.0)), mask=mask,
                              mask_score=float(prob[torch.as_tensor(mask)].mean()) if mask.any() else 0.0))
    return dets


def build_prompt_segmenter(
    sam: SamAdapter,
    num_classes: int,
    variant: FusionVariant | str = FusionVariant.BALSAM,
    class_loss: Optional[ClassLoss] = None,
    dsm_spec: DsmPromptEncoderSpec = DsmPromptEncoderSpec(),
    **spec_overrides,
) -> PromptSegmenter:
    spec = AnchorPrompterSpec(num_classes=num_classes, image_size=sam.image_size, **spec_overrides)
    return PromptSegmenter(sam, spec, variant, dsm_spec, class_loss)
