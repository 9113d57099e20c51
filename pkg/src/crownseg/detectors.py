"""Faster/Mask R-CNN with optional DSM inputs (stacked channel, gradient channels or a learned DSM encoder)."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Literal, Optional, Sequence

import numpy as np
import torch
import torchvision.models.detection.roi_heads as tv_roi_heads
from segment_anything.modeling.common import LayerNorm2d
from torch import nn
from torchvision.models import resnet18, resnet34, resnet50
from torchvision.models.detection import FasterRCNN, MaskRCNN
from torchvision.models.detection.backbone_utils import _resnet_fpn_extractor
from torchvision.models.detection.roi_heads import RoIHeads
from torchvision.ops.misc import FrozenBatchNorm2d

from .losses import ClassLoss
from .structures import Detection

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
_RESNETS = {"resnet18": resnet18, "resnet34": resnet34, "resnet50": resnet50}


@dataclass(frozen=True)
class DetectorConfig:
    kind: Literal["faster", "mask"] = "mask"
    in_channels: int = 3
    num_classes: int = 1
    pretrained_backbone: bool = False
    extra_head_capacity: bool = False
    dsm_encoder_stack: bool = False
    image_size: int = 1024
    backbone: str = "resnet50"
    box_nms_thresh: float = 0.5
    box_score_thresh: float = 0.05

    def __post_init__(self):
        if self.kind not in ("faster", "mask"):
            raise ValueError(f"unknown detector kind {self.kind!r}")
        if self.in_channels not in (3, 4, 5):
            raise ValueError("in_channels must be 3 (RGB), 4 (RGB+DSM) or 5 (RGB+gradients)")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.dsm_encoder_stack and self.in_channels != 4:
            raise ValueError("the DSM encoder stack feeds a 4th channel; set in_channels=4")
        if self.backbone not in _RESNETS:
            raise ValueError(f"unknown backbone {self.backbone!r}")

    @property
    def aux_kind(self) -> str:
        return {3: "none", 4: "dsm", 5: "gradients"}[self.in_channels]


def expand_first_conv(conv: nn.Conv2d, in_channels: int) -> nn.Conv2d:
    """New first conv with ``in_channels`` inputs; RGB slice copied from ``conv``, the rest He-initialised."""
    new = nn.Conv2d(in_channels, conv.out_channels, conv.kernel_size, conv.stride, conv.padding,
                    bias=conv.bias is not None)
    nn.init.kaiming_normal_(new.weight, mode="fan_out", nonlinearity="relu")
    with torch.no_grad():
        new.weight[:, : conv.in_channels] = conv.weight
        if conv.bias is not None:
            new.bias.copy_(conv.bias)
    return new


class DsmStackEncoder(nn.Module):
    """Same-padded conv encoder mapping the DSM to one channel of identical size."""

    def __init__(self):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(1, 192, 2, padding="same"), LayerNorm2d(192), nn.GELU(),
            nn.Conv2d(192, 768, 2, padding="same"), LayerNorm2d(768), nn.GELU(),
            nn.Conv2d(768, 1, 1),
        )

    def forward(self, dsm: torch.Tensor) -> torch.Tensor:
        if dsm.ndim != 4 or dsm.shape[1] != 1:
            raise ValueError(f"DSM batch must be B x 1 x H x W, got {tuple(dsm.shape)}")
        return self.net(dsm)


def build_dsm_encoder_stack(cfg: DetectorConfig) -> DsmStackEncoder:
    if not cfg.dsm_encoder_stack:
        raise ValueError("config does not enable the DSM encoder stack")
    return DsmStackEncoder()


class ExtraCapacityPredictor(nn.Module):
    """Box predictor with an extra Linear + ReLU before both the class and box outputs."""

    def __init__(self, in_channels: int, num_classes: int):
        super().__init__()
        self.cls_score = nn.Sequential(nn.Linear(in_channels, in_channels), nn.ReLU(),
                                       nn.Linear(in_channels, num_classes))
        self.bbox_pred = nn.Sequential(nn.Linear(in_channels, in_channels), nn.ReLU(),
                                       nn.Linear(in_channels, num_classes * 4))

    def forward(self, x):
        x = x.flatten(start_dim=1)
        return self.cls_score(x), self.bbox_pred(x)


class ClassLossRoIHeads(RoIHeads):
    """RoIHeads whose classification term comes from a configurable :class:`ClassLoss`."""

    class_loss: Optional[ClassLoss] = None

    def forward(self, *args, **kwargs):
        if self.class_loss is None or not self.training:
            return super().forward(*args, **kwargs)
        original = tv_roi_heads.fastrcnn_loss

        def patched(class_logits, box_regression, labels, regression_targets):
            _, box_loss = original(class_logits, box_regression, labels, regression_targets)
            return self.class_loss(class_logits, torch.cat(labels)), box_loss

        # torchvision resolves fastrcnn_loss from module globals at call time
        tv_roi_heads.fastrcnn_loss = patched
        try:
            return super().forward(*args, **kwargs)
        finally:
            tv_roi_heads.fastrcnn_loss = original


def pretrained_backbone_state(backbone: str = "resnet50") -> dict:
    """ImageNet weights from torchvision (downloads on first use)."""
    from torchvision.models import ResNet18_Weights, ResNet34_Weights, ResNet50_Weights

    weights = {"resnet18": ResNet18_Weights, "resnet34": ResNet34_Weights, "resnet50": ResNet50_Weights}[backbone]
    return weights.IMAGENET1K_V1.get_state_dict(progress=False)


class RCNNDetector(nn.Module):
    """torchvision R-CNN plus DSM plumbing.

    ``forward(images, aux, targets)`` takes RGB in 0-255 as ``B x 3 x S x S``
    and, for DSM variants, ``aux`` as ``B x 1 x S x S`` (normalised DSM) or
    ``B x 2 x S x S`` (gradient channels).
    """

    def __init__(self, cfg: DetectorConfig, backbone_state: Optional[dict] = None,
                 class_loss: Optional[ClassLoss] = None):
        super().__init__()
        self.cfg = cfg
        body = _RESNETS[cfg.backbone](norm_layer=FrozenBatchNorm2d if cfg.pretrained_backbone else nn.BatchNorm2d)
        if cfg.pretrained_backbone:
            state = backbone_state if backbone_state is not None else pretrained_backbone_state(cfg.backbone)
            state = {k: v for k, v in state.items() if not k.startswith("fc.")}
            body.load_state_dict(state, strict=False)
        if cfg.in_channels != 3:
            body.conv1 = expand_first_conv(body.conv1, cfg.in_channels)
        backbone = _resnet_fpn_extractor(body, 3 if cfg.pretrained_backbone else 5)
        extra = cfg.in_channels - 3
        kw = dict(
            num_classes=cfg.num_classes + 1, min_size=cfg.image_size, max_size=cfg.image_size,
            image_mean=list(IMAGENET_MEAN) + [0.0] * extra, image_std=list(IMAGENET_STD) + [1.0] * extra,
            box_nms_thresh=cfg.box_nms_thresh, box_score_thresh=cfg.box_score_thresh,
        )
        self.model = MaskRCNN(backbone, **kw) if cfg.kind == "mask" else FasterRCNN(backbone, **kw)
        if cfg.extra_head_capacity:
            self.model.roi_heads.box_predictor = ExtraCapacityPredictor(1024, cfg.num_classes + 1)
        self.model.roi_heads.__class__ = ClassLossRoIHeads
        self.model.roi_heads.class_loss = class_loss
        self.dsm_encoder = build_dsm_encoder_stack(cfg) if cfg.dsm_encoder_stack else None

    @property
    def first_conv(self) -> nn.Conv2d:
        return self.model.backbone.body.conv1

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def trainable_state_dict(self) -> dict:
        return self.state_dict()

    def load_trainable_state_dict(self, state: dict) -> None:
        self.load_state_dict(state)

    def _inputs(self, images: torch.Tensor, aux: Optional[torch.Tensor]) -> list[torch.Tensor]:
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError(f"images must be B x 3 x S x S, got {tuple(images.shape)}")
        rgb = images.float() / 255.0
        extra = self.cfg.in_channels - 3
        if extra == 0:
            if aux is not None and aux.shape[1] != 0:
                raise ValueError("3-channel detector given extra input channels")
            return list(rgb)
        if aux is None or aux.shape[1] != (1 if self.cfg.aux_kind == "dsm" else 2):
            raise ValueError(f"{self.cfg.in_channels}-channel detector needs {self.cfg.aux_kind} input")
        aux = aux.float()
        if self.dsm_encoder is not None:
            aux = self.dsm_encoder(aux)
        return list(torch.cat([rgb, aux], dim=1))

    def forward(self, images: torch.Tensor, aux: Optional[torch.Tensor] = None,
                targets: Optional[list[dict]] = None):
        inputs = self._inputs(images, aux)
        if targets is not None:
            tg = []
            for t in targets:
                d = {"boxes": t["boxes"].float(), "labels": t["labels"]}
                if self.cfg.kind == "mask":
                    d["masks"] = t["masks"]
                tg.append(d)
            return self.model(inputs, tg)
        return self.model(inputs)

    @torch.no_grad()
    def predict(self, image: np.ndarray, aux: Optional[np.ndarray], classes: Sequence[str],
                mask_threshold: float = 0.5) -> list[Detection]:
        was = self.training
        self.eval()
        dev = self.first_conv.weight.device
        img = torch.as_tensor(np.ascontiguousarray(image), dtype=torch.float32).permute(2, 0, 1)[None].to(dev)
        a = None
        if aux is not None:
            a = torch.as_tensor(np.asarray(aux, dtype=np.float32))
            a = (a[None, None] if a.ndim == 2 else a[None]).to(dev)
        out = {k: v.cpu() for k, v in self(img, a)[0].items()}
        self.train(was)
        dets = []
        for k in range(len(out["boxes"])):
            x0, y0, x1, y1 = out["boxes"][k].tolist()
            if not (x1 > x0 and y1 > y0):
                continue
            mask = None
            if "masks" in out:
                mask = (out["masks"][k, 0] >= mask_threshold).numpy()
            dets.append(Detection(box=(x0, y0, x1, y1), class_label=classes[int(out["labels"][k]) - 1],
                                  box_score=float(out["scores"][k]), mask=mask))
        return dets


def build_detector(cfg: DetectorConfig, backbone_state: Optional[dict] = None,
                   class_loss: Optional[ClassLoss] = None) -> RCNNDetector:
    """Build a detector; with ``pretrained_backbone`` the first conv gets the ImageNet RGB kernel slice.

    ``backbone_state`` overrides the torchvision ImageNet download with a
    3-channel ResNet state dict.
    """
    return RCNNDetector(cfg, backbone_state, class_loss)


def predict(model: RCNNDetector, tile: np.ndarray, classes: Sequence[str]) -> list[Detection]:
    """Detections for an ``S x S x C`` tile whose channels must match the model's ``in_channels``."""
    if tile.ndim != 3 or tile.shape[2] != model.cfg.in_channels:
        raise ValueError(f"tile has {tile.shape[-1] if tile.ndim == 3 else '?'} channels, "
                         f"model expects {model.cfg.in_channels}")
    aux = None
    if model.cfg.in_channels > 3:
        aux = np.moveaxis(tile[..., 3:], -1, 0)
    return model.predict(tile[..., :3], aux, classes)


def config_dict(cfg: DetectorConfig) -> dict:
    return asdict(cfg)
