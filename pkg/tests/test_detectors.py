import numpy as np
import pytest
import torch
from torch import nn
from torchvision.models import resnet18

from crownseg.detectors import (
    DetectorConfig, DsmStackEncoder, ExtraCapacityPredictor, build_detector, build_dsm_encoder_stack,
    expand_first_conv, predict,
)
from crownseg.synthetic import synthetic_sample
from crownseg.trainer import collate

S = 64


def stand_in_pretrained(seed=0):
    """A 3-channel ResNet-18 state dict standing in for ImageNet weights (no network access in tests)."""
    torch.manual_seed(seed)
    return resnet18().state_dict()


def _cfg(**kw):
    base = dict(kind="mask", num_classes=2, image_size=S, backbone="resnet18")
    return DetectorConfig(**{**base, **kw})


def test_rgb_slice_bitwise_copy():
    state = stand_in_pretrained()
    for c in (4, 5):
        det = build_detector(_cfg(in_channels=c, pretrained_backbone=True), backbone_state=state)
        w = det.first_conv.weight
        assert w.shape[1] == c
        assert torch.equal(w[:, :3], state["conv1.weight"])
        assert w[:, 3:].abs().sum() > 0


def test_zero_dsm_layer1_equivalence():
    state = stand_in_pretrained()
    three = build_detector(_cfg(pretrained_backbone=True), backbone_state=state)
    four = build_detector(_cfg(in_channels=4, pretrained_backbone=True), backbone_state=state)
    x = torch.rand(2, 3, S, S)
    x4 = torch.cat([x, torch.zeros(2, 1, S, S)], 1)
    with torch.no_grad():
        assert (three.first_conv(x) - four.first_conv(x4)).abs().max() <= 1e-6


def test_expand_first_conv_keeps_geometry():
    conv = nn.Conv2d(3, 8, 7, 2, 3, bias=True)
    new = expand_first_conv(conv, 5)
    assert (new.kernel_size, new.stride, new.padding) == (conv.kernel_size, conv.stride, conv.padding)
    assert torch.equal(new.bias, conv.bias)


def test_extra_capacity_head_structure():
    det = build_detector(_cfg(extra_head_capacity=True))
    pred = det.model.roi_heads.box_predictor
    assert isinstance(pred, ExtraCapacityPredictor)
    for seq, out in ((pred.cls_score, 3), (pred.bbox_pred, 12)):
        kinds = [type(m) for m in seq]
        assert kinds == [nn.Linear, nn.ReLU, nn.Linear] and seq[-1].out_features == out
    plain = build_detector(_cfg()).model.roi_heads.box_predictor
    assert plain.cls_score.out_features == 3


def test_dsm_encoder_stack_shapes():
    enc = DsmStackEncoder()
    for h, w in ((32, 32), (33, 47)):
        assert enc(torch.rand(2, 1, h, w)).shape == (2, 1, h, w)
    with torch.no_grad():
        out = enc(torch.full((1, 1, 16, 16), 0.7))
    interior = out[0, 0, :-2, :-2]  # two same-padded k=2 convs pad right and bottom
    assert torch.allclose(interior, interior[0, 0].expand_as(interior), atol=1e-6)
    with pytest.raises(ValueError):
        enc(torch.rand(1, 2, 8, 8))
    with pytest.raises(ValueError):
        build_dsm_encoder_stack(_cfg(in_channels=4))
    with pytest.raises(ValueError):
        _cfg(in_channels=3, dsm_encoder_stack=True)


def test_dsm_encoder_stack_receives_gradients():
    torch.manual_seed(0)
    det = build_detector(_cfg(in_channels=4, dsm_encoder_stack=True))
    before = [p.detach().clone() for p in det.dsm_encoder.parameters()]
    images, aux, targets = collate([synthetic_sample(0, S, 2, radius=(8, 14))], ["conifer", "broadleaf"], "dsm")
    opt = torch.optim.SGD(det.parameters(), lr=1e-2)
    det.train()
    loss = sum(det(images, aux, targets).values())
    opt.zero_grad()
    loss.backward()
    opt.step()
    assert all(not torch.equal(a, b) for a, b in zip(before, det.dsm_encoder.parameters()))


def test_predict_channel_mismatch():
    det = build_detector(_cfg(in_channels=4))
    with pytest.raises(ValueError, match="channels"):
        predict(det, np.zeros((S, S, 3), np.float32), ["a", "b"])
    with pytest.raises(ValueError):
        det(torch.zeros(1, 3, S, S))


def test_config_validation():
    for bad in (dict(in_channels=6), dict(kind="yolo"), dict(num_classes=0), dict(backbone="vgg")):
        with pytest.raises(ValueError):
            _cfg(**bad)


@pytest.mark.parametrize("kind", ["mask", "faster"])
def test_eval_determinism_and_output_width(kind):
    torch.manual_seed(0)
    det = build_detector(_cfg(kind=kind, in_channels=5, num_classes=3))
    assert det.model.roi_heads.box_predictor.cls_score.out_features == 4
    s = synthetic_sample(1, S, 2, radius=(8, 14))
    tile = np.concatenate([s.image.astype(np.float32), np.moveaxis(s.aux("gradients"), 0, -1)], -1)
    a = predict(det, tile, ["x", "y", "z"])
    b = predict(det, tile, ["x", "y", "z"])
    assert [(d.box, d.score, d.class_label) for d in a] == [(d.box, d.score, d.class_label) for d in b]
    if kind == "faster":
        assert all(d.mask is None for d in a)


def _five_steps(seed):
    torch.manual_seed(seed)
    det = build_detector(_cfg(in_channels=4))
    images, aux, targets = collate([synthetic_sample(0, S, 2, radius=(8, 14))], ["conifer", "broadleaf"], "dsm")
    opt = torch.optim.SGD(det.parameters(), lr=1e-3)
    det.train()
    for _ in range(5):
        torch.manual_seed(seed)
        losses = det(images, aux, targets)
        loss = sum(losses.values())
        opt.zero_grad()
        loss.backward()
        opt.step()
    return {k: float(v.detach()) for k, v in losses.items()}


def test_same_seed_same_losses():
    assert _five_steps(0) == _five_steps(0)


def test_custom_class_loss_is_called():
    calls = []

    def spy(logits, labels):
        calls.append(logits.shape[1])
        return nn.functional.cross_entropy(logits, labels)

    det = build_detector(_cfg(), class_loss=spy)
    images, aux, targets = collate([synthetic_sample(0, S, 2, radius=(8, 14))], ["conifer", "broadleaf"], "none")
    det.train()
    det(images, aux, targets)
    assert calls == [3]
