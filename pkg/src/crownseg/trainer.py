"""Training harness: recipes, LR schedules, flip augmentation, best-checkpoint selection and seed sweeps."""
from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Literal, Mapping, Optional, Sequence

import numpy as np
import torch

from .dsmtools import DsmChannel, gradient_channels, normalize_dsm
from .geodata import Tile
from .metrics import MetricsReport, aggregate_reports, evaluate
from .structures import Detection, GroundTruth, mask_to_box
from .taxonomy import ClassSchema

log = logging.getLogger(__name__)

MASK_RCNN_KINDS = ("mask_rcnn", "mask_rcnn_dsm", "mask_rcnn_gradients", "mask_rcnn_dsm_encoder",
                   "mask_rcnn_extra_capacity")
FASTER_RCNN_KINDS = ("faster_rcnn", "faster_rcnn_scratch", "faster_rcnn_dsm")
PROMPTER_KINDS = ("rsprompter", "balsam", "balsam_a", "balsam_b")
EPOCHS = {
    "rcnn": {"plantations": 100, "sbl": 200, "bci": 300},
    "prompter": {"plantations": 50, "sbl": 100, "bci": 200},
}


@dataclass(frozen=True)
class Warmup:
    kind: Literal["none", "linear"] = "none"
    start_lr: float = 0.0
    duration: int = 0  # epochs


@dataclass(frozen=True)
class TrainConfig:
    model_kind: str
    optimizer: Literal["sgd", "adam", "adamw"] = "sgd"
    base_lr: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    betas: tuple[float, float] = (0.9, 0.999)
    warmup: Warmup = Warmup()
    schedule: Literal["none", "cosine", "exponential"] = "none"
    decay_gamma: float = 0.9
    decay_every: int = 10  # epochs
    batch_size: int = 2
    max_epochs: int = 1
    random_flip: bool = True
    flip_p: float = 0.5
    seed: int = 0
    dataset_id: str = "synthetic"
    num_workers: int = 1
    grad_clip: Optional[float] = None
    published: bool = True

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ValueError("base_lr must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.optimizer not in ("sgd", "adam", "adamw"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("none", "cosine", "exponential"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.warmup.kind not in ("none", "linear"):
            raise ValueError(f"unknown warmup {self.warmup.kind!r}")

    def to_flat(self) -> dict:
        d = asdict(self)
        w = d.pop("warmup")
        for k, v in w.items():
            d[f"warmup.{k}"] = v
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_flat(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        kw, w = {}, {}
        for k, v in d.items():
            if k.startswith("warmup."):
                w[k.split(".", 1)[1]] = v
            elif k in known:
                kw[k] = v
        if "betas" in kw:
            kw["betas"] = tuple(kw["betas"])
        if w:
            kw["warmup"] = Warmup(**w)
        return cls(**kw)


def make_recipe(model_kind: str, dataset_id: str) -> TrainConfig:
    """Published recipe for ``(model_kind, dataset_id)``; other pairs get defaults with ``published=False``."""
    if model_kind in MASK_RCNN_KINDS:
        epochs = EPOCHS["rcnn"].get(dataset_id)
        batch = 32 if model_kind in ("mask_rcnn", "mask_rcnn_extra_capacity") else 8
        return TrainConfig(model_kind, "sgd", 1e-4, 0.9, 5e-4, warmup=Warmup("linear", 1e-6, 1), schedule="none",
                           batch_size=batch, max_epochs=epochs or 100, dataset_id=dataset_id,
                           published=epochs is not None)
    if model_kind in FASTER_RCNN_KINDS:
        known = dataset_id == "plantations"
        lr = 5e-4 if model_kind == "faster_rcnn_scratch" else 1e-4
        return TrainConfig(model_kind, "adam", lr, weight_decay=5e-4, betas=(0.9, 0.999), schedule="exponential",
                           batch_size=16 if model_kind == "faster_rcnn_dsm" else 32, max_epochs=100,
                           dataset_id=dataset_id, published=known)
    if model_kind in PROMPTER_KINDS:
        epochs = EPOCHS["prompter"].get(dataset_id)
        return TrainConfig(model_kind, "adamw", 1e-5, weight_decay=0.1, warmup=Warmup("linear", 1e-8, 1),
                           schedule="cosine", batch_size=2, max_epochs=epochs or 50, dataset_id=dataset_id,
                           published=epochs is not None)
    log.warning("no published recipe for %s on %s; using unpublished defaults", model_kind, dataset_id)
    return TrainConfig(model_kind, "adamw", 1e-4, weight_decay=1e-4, batch_size=2, max_epochs=10,
                       dataset_id=dataset_id, published=False)


def lr_at(cfg: TrainConfig, step: int, steps_per_epoch: int) -> float:
    """Learning rate at optimizer step ``step`` (0-based)."""
    spe = max(steps_per_epoch, 1)
    warm = cfg.warmup.duration * spe if cfg.warmup.kind == "linear" else 0
    if warm and step < warm:
        return cfg.warmup.start_lr + (cfg.base_lr - cfg.warmup.start_lr) * step / warm
    if cfg.schedule == "cosine":
        total = cfg.max_epochs * spe
        span = max(total - warm, 1)
        t = min(max(step - warm, 0), span) / span
        return 0.5 * cfg.base_lr * (1.0 + math.cos(math.pi * t))
    if cfg.schedule == "exponential":
        return cfg.base_lr * cfg.decay_gamma ** ((step // spe) // cfg.decay_every)
    return cfg.base_lr


# ---------------------------------------------------------------------------
# samples


@dataclass
class Sample:
    """One training tile: RGB ``S x S x 3``, optional DSM with validity, instance masks and class names."""

    tile_id: str
    image: np.ndarray
    masks: np.ndarray
    labels: list[str]
    dsm: Optional[np.ndarray] = None
    valid: Optional[np.ndarray] = None

    def __post_init__(self):
        s = self.image.shape[:2]
        if self.masks.ndim != 3 or (len(self.masks) and self.masks.shape[1:] != s):
            raise ValueError("masks must be N x H x W matching the image")
        if len(self.masks) != len(self.labels):
            raise ValueError("one label per mask required")
        if self.dsm is not None and self.dsm.shape != s:
            raise ValueError("DSM must match the image size")

    def ground_truth(self) -> list[GroundTruth]:
        return [GroundTruth(m.astype(bool), c) for m, c in zip(self.masks, self.labels)]

    def aux(self, kind: str) -> Optional[np.ndarray]:
        if kind == "none":
            return None
        if self.dsm is None:
            raise ValueError(f"tile {self.tile_id} has no DSM but the model needs {kind}")
        ch = DsmChannel(self.dsm.astype(np.float32), self.valid if self.valid is not None
                        else np.ones(self.dsm.shape, bool))
        if kind == "dsm":
            return normalize_dsm(ch).values.astype(np.float32)
        if kind == "gradients":
            return gradient_channels(ch).astype(np.float32)
        raise ValueError(f"unknown aux kind {kind!r}")


def samples_from_tiles(tiles: Sequence[Tile], schema: Optional[ClassSchema] = None) -> dict[str, list[Sample]]:
    """Group tiles into per-split samples, mapping raw labels through ``schema``."""
    out: dict[str, list[Sample]] = {}
    for t in tiles:
        masks = t.masks()
        labels = [a.class_label if schema is None else schema.map(a.class_label) for a in t.annotations]
        keep = [i for i in range(len(labels)) if masks[i].any()]
        out.setdefault(t.split or "train", []).append(Sample(
            t.tile_id, t.image, masks[keep] if len(keep) else np.zeros((0, *t.image.shape[:2]), bool),
            [labels[i] for i in keep], t.dsm, t.valid_mask if t.dsm is not None else None))
    return out


def random_flip(sample: Sample, horizontal: bool, vertical: bool) -> Sample:
    """Flip image, masks and DSM together; boxes follow since they are derived from masks."""

    def g(a, image_like):
        if a is None:
            return None
        if image_like:  # H x W x C
            if horizontal:
                a = a[:, ::-1]
            if vertical:
                a = a[::-1]
        else:  # ... x H x W
            if horizontal:
                a = a[..., ::-1]
            if vertical:
                a = a[..., ::-1, :]
        return np.ascontiguousarray(a)

    return Sample(sample.tile_id, g(sample.image, True), g(sample.masks, False), list(sample.labels),
                  g(sample.dsm, False), g(sample.valid, False))


def flip_boxes(boxes: np.ndarray, size: tuple[int, int], horizontal: bool, vertical: bool) -> np.ndarray:
    """Box coordinates under the same flips as :func:`random_flip`."""
    h, w = size
    b = np.array(boxes, dtype=np.float64).reshape(-1, 4).copy()
    if horizontal:
        b[:, [0, 2]] = w - b[:, [2, 0]]
    if vertical:
        b[:, [1, 3]] = h - b[:, [3, 1]]
    return b


def collate(samples: Sequence[Sample], classes: Sequence[str], aux_kind: str):
    """Stack samples into ``(images, aux, targets)`` tensors for the model protocol."""
    index = {c: i + 1 for i, c in enumerate(classes)}
    images = torch.stack([torch.from_numpy(np.ascontiguousarray(s.image[..., :3])).permute(2, 0, 1).float()
                          for s in samples])
    aux = None
    if aux_kind != "none":
        parts = []
        for s in samples:
            a = s.aux(aux_kind)
            parts.append(torch.from_numpy(a[None] if a.ndim == 2 else a))
        aux = torch.stack(parts)
    targets = []
    for s in samples:
        boxes = [mask_to_box(m) for m in s.masks]
        targets.append({
            "boxes": torch.tensor(boxes, dtype=torch.float32).reshape(-1, 4),
            "labels": torch.tensor([index[c] for c in s.labels], dtype=torch.int64),
            "masks": torch.from_numpy(s.masks.astype(np.uint8)),
        })
    return images, aux, targets


def _to_device(batch, device):
    images, aux, targets = batch
    if device.type == "cpu":
        return images, aux, targets
    return (images.to(device), None if aux is None else aux.to(device),
            [{k: v.to(device) for k, v in t.items()} for t in targets])


def model_aux_kind(model) -> str:
    cfg = getattr(model, "cfg", None)
    if cfg is not None and hasattr(cfg, "aux_kind"):
        return cfg.aux_kind
    variant = getattr(model, "variant", None)
    if variant is not None:
        return "dsm" if variant.uses_dsm else "none"
    return getattr(model, "aux_kind", "none")


def predict_samples(model, samples: Sequence[Sample], classes: Sequence[str]) -> dict[str, list[Detection]]:
    kind = model_aux_kind(model)
    return {s.tile_id: model.predict(s.image[..., :3], s.aux(kind), classes) for s in samples}


def evaluate_model(model, samples: Sequence[Sample], classes: Sequence[str], **kw) -> MetricsReport:
    preds = predict_samples(model, samples, classes)
    return evaluate(preds, {s.tile_id: s.ground_truth() for s in samples}, classes, **kw)


# ---------------------------------------------------------------------------
# training


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


def _parameters(model):
    if hasattr(model, "trainable_parameters"):
        return list(model.trainable_parameters())
    return [p for p in model.parameters() if p.requires_grad]


def make_optimizer(cfg: TrainConfig, params) -> torch.optim.Optimizer:
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(params, lr=cfg.base_lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.base_lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
    return torch.optim.AdamW(params, lr=cfg.base_lr, betas=cfg.betas, weight_decay=cfg.weight_decay)


def trainable_state(model) -> dict:
    if hasattr(model, "trainable_state_dict"):
        return model.trainable_state_dict()
    return model.state_dict()


def load_trainable_state(model, state: dict) -> None:
    if hasattr(model, "load_trainable_state_dict"):
        model.load_trainable_state_dict(state)
    else:
        model.load_state_dict(state)


def save_checkpoint(path: str | Path, model, sidecar: Mapping) -> None:
    """Trainable weights as a torch file plus a ``.json`` sidecar describing the model."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().cpu().clone() for k, v in trainable_state(model).items()}
    meta = dict(sidecar)
    if hasattr(model, "sam_checksum"):
        meta["sam_checksum"] = model.sam_checksum()
    torch.save(state, path)
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path: str | Path, model) -> dict:
    """Restore weights saved by :func:`save_checkpoint`; return the sidecar."""
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    if "sam_checksum" in meta and hasattr(model, "sam_checksum") and meta["sam_checksum"] != model.sam_checksum():
        raise ValueError("checkpoint was trained against a different SAM backbone")
    load_trainable_state(model, torch.load(path, map_location="cpu", weights_only=True))
    return meta


@dataclass
class TrainResult:
    best_epoch: int
    best_map: float
    best_state: dict
    log: list[dict] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)


def select_best(val_maps: Sequence[float]) -> int:
    """1-based epoch of the highest validation mAP (earliest on ties)."""
    if not val_maps:
        raise ValueError("no validation results")
    return int(np.argmax(np.asarray(val_maps, dtype=float))) + 1


def _nan_to_zero(x):
    return 0.0 if x is None or (isinstance(x, float) and math.isnan(x)) else float(x)


def train(
    model,
    data: Mapping[str, Sequence[Sample]],
    cfg: TrainConfig,
    classes: Sequence[str],
    out_dir: Optional[str | Path] = None,
    max_steps: Optional[int] = None,
    validate: bool = True,
    on_step: Optional[Callable[[int, dict], None]] = None,
    sidecar: Optional[Mapping] = None,
) -> TrainResult:
    """Train ``model`` on ``data['train']``, validating on ``data['val']`` (or train) each epoch.

    ``max_steps`` caps the total optimizer steps (the last, partial epoch is
    still validated). ``on_step(step, record)`` returning True ends training
    after the current epoch's bookkeeping. With ``out_dir`` the best checkpoint goes to
    ``best.pt`` (``sidecar`` entries are added to its JSON sidecar) and
    per-epoch records to ``train_log.jsonl``.
    """
    train_set = list(data.get("train", ()))
    if not train_set:
        raise ValueError("empty train split")
    val_set = list(data.get("val", ())) or train_set
    if cfg.num_workers != 1:
        log.warning("num_workers=%d: loading is single-process here, determinism unaffected", cfg.num_workers)
    seed_everything(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    aux_kind = model_aux_kind(model)
    opt = make_optimizer(cfg, _parameters(model))
    device = _parameters(model)[0].device
    spe = math.ceil(len(train_set) / cfg.batch_size)
    total = cfg.max_epochs * spe if max_steps is None else min(max_steps, cfg.max_epochs * spe)
    epochs = math.ceil(total / spe)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "train_log.jsonl").write_text("")
    result = TrainResult(best_epoch=0, best_map=-1.0, best_state={})
    step = 0
    stop = False
    for epoch in range(1, epochs + 1):
        model.train()
        order = rng.permutation(len(train_set))
        epoch_losses = []
        lr = cfg.base_lr
        for start in range(0, len(order), cfg.batch_size):
            if step >= total:
                break
            batch = [train_set[i] for i in order[start:start + cfg.batch_size]]
            if cfg.random_flip:
                batch = [random_flip(s, rng.random() < cfg.flip_p, rng.random() < cfg.flip_p) for s in batch]
            images, aux, targets = _to_device(collate(batch, classes, aux_kind), device)
            lr = lr_at(cfg, step, spe)
            for g in opt.param_groups:
                g["lr"] = lr
            losses = model(images, aux, targets)
            loss = sum(losses.values())
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(_parameters(model), cfg.grad_clip)
            opt.step()
            rec = {k: float(v.detach()) for k, v in losses.items()}
            rec["loss"] = float(loss.detach())
            result.step_losses.append(rec["loss"])
            epoch_losses.append(rec)
            step += 1
            if on_step is not None and on_step(step - 1, rec):
                stop = True
                break
        entry = {"epoch": epoch, "step": step, "lr": lr,
                 "losses": {k: float(np.mean([r[k] for r in epoch_losses])) for k in epoch_losses[0]}}
        if validate:
            report = evaluate_model(model, val_set, classes)
            entry["val"] = {"map": _nan_to_zero(report.map), "single_class_map": _nan_to_zero(report.single_class_map)}
            score = entry["val"]["map"]
        else:
            score = -entry["losses"]["loss"]
        if score > result.best_map:
            result.best_map, result.best_epoch = score, epoch
            result.best_state = {k: v.detach().clone() for k, v in trainable_state(model).items()}
            if out is not None:
                save_checkpoint(out / "best.pt", model, {**(sidecar or {}), "train_config": cfg.to_flat(),
                                                         "classes": list(classes), "epoch": epoch})
        result.log.append(entry)
        if out is not None:
            with open(out / "train_log.jsonl", "a") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
        if stop:
            break
    return result


def seed_sweep(
    cfg: TrainConfig,
    seeds: Sequence[int],
    run: Callable[[TrainConfig], MetricsReport],
) -> MetricsReport:
    """Run ``run`` once per seed and aggregate to mean and standard error."""
    if not seeds:
        raise ValueError("need at least one seed")
    return aggregate_reports([run(replace(cfg, seed=s)) for s in seeds])
