"""Classification losses for the R-CNN and prompter class heads."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
import torch.nn.functional as F

from .taxonomy import ClassWeights, TaxonomyTree


@dataclass(frozen=True)
class HierarchicalLossConfig:
    level_weights: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    species_exclusion: frozenset = field(default_factory=frozenset)
    genus_exclusion: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if len(self.level_weights) != 3 or any(w < 0 for w in self.level_weights):
            raise ValueError("level_weights must be three non-negative numbers")

    @classmethod
    def from_taxonomy(cls, taxonomy: TaxonomyTree, level_weights=(1 / 3, 1 / 3, 1 / 3)) -> "HierarchicalLossConfig":
        return cls(tuple(level_weights), taxonomy.excluded("species"), taxonomy.excluded("genus"))


def _check_labels(logits: torch.Tensor, labels: torch.Tensor) -> None:
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[-1]):
        raise ValueError(f"label out of range for {logits.shape[-1]} classes")


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood over instances."""
    _check_labels(logits, labels)
    return F.cross_entropy(logits, labels)


def weighted_cross_entropy(
    logits: torch.Tensor,
    labels: torch.Tensor,
    weights: ClassWeights | torch.Tensor | Sequence[float],
    classes: Optional[Sequence[str]] = None,
) -> torch.Tensor:
    """Cross-entropy with each instance scaled by its true class weight, reduced by weighted mean.

    ``weights`` is a per-column tensor/sequence, or a :class:`ClassWeights`
    together with ``classes`` giving the column order.
    """
    _check_labels(logits, labels)
    if isinstance(weights, ClassWeights):
        if classes is None:
            raise ValueError("classes must give the column order for ClassWeights")
        weights = weights.vector(classes)
    w = torch.as_tensor(weights, dtype=logits.dtype, device=logits.device)
    if w.shape != (logits.shape[-1],):
        raise ValueError(f"need {logits.shape[-1]} class weights, got {tuple(w.shape)}")
    nll = F.cross_entropy(logits, labels, reduction="none")
    wi = w[labels]
    denom = wi.sum()
    if denom == 0:
        return (nll * wi).sum()
    return (nll * wi).sum() / denom


def _bucket_nll(log_probs: torch.Tensor, labels: torch.Tensor, bucket_of: list[int], n_buckets: int) -> torch.Tensor:
    # log of summed sibling probabilities, computed stably with logsumexp per bucket
    index = torch.as_tensor(bucket_of, device=log_probs.device)
    cols = []
    for b in range(n_buckets):
        cols.append(torch.logsumexp(log_probs[:, index == b], dim=1))
    bucket_lp = torch.stack(cols, dim=1)
    return -bucket_lp.gather(1, index[labels][:, None]).squeeze(1)


def hierarchical_loss(
    logits: torch.Tensor,
    labels: torch.Tensor,
    taxonomy: TaxonomyTree,
    cfg: HierarchicalLossConfig,
    classes: Sequence[str],
    background_index: Optional[int] = None,
) -> torch.Tensor:
    """Weighted sum of species, genus and family cross-entropies from one classifier.

    Genus and family probabilities are obtained by summing the softmax mass
    of classes sharing a bucket. Instances whose label is in
    ``cfg.species_exclusion`` skip the species term and those in
    ``cfg.genus_exclusion`` skip the genus term; every instance enters the
    family term. ``classes`` names the non-background columns in order; a
    ``background_index`` column is its own bucket at every level.
    """
    _check_labels(logits, labels)
    n_cols = logits.shape[-1]
    fg_cols = [i for i in range(n_cols) if i != background_index]
    if len(fg_cols) != len(classes):
        raise ValueError(f"{len(classes)} class names for {len(fg_cols)} foreground columns")
    col_name = {}
    for i, c in zip(fg_cols, classes):
        col_name[i] = c

    log_probs = F.log_softmax(logits, dim=-1)
    zero = logits.sum() * 0.0
    terms = []
    for level, w, excl in zip(("species", "genus", "family"), cfg.level_weights,
                              (cfg.species_exclusion, cfg.genus_exclusion, frozenset())):
        if w == 0:
            terms.append(zero)
            continue
        names = []
        bucket_of = []
        for i in range(n_cols):
            if i == background_index:
                b = "__background__"
            else:
                try:
                    b = taxonomy.lift(col_name[i], level)
                except (KeyError, LookupError) as e:
                    raise ValueError(f"class {col_name[i]!r} cannot be lifted to {level}: {e}") from None
            if b not in names:
                names.append(b)
            bucket_of.append(names.index(b))
        keep = torch.tensor(
            [i == background_index or col_name[i] not in excl for i in labels.tolist()],
            dtype=torch.bool, device=logits.device,
        ) if labels.numel() else torch.zeros(0, dtype=torch.bool)
        if not keep.any():
            terms.append(zero)
            continue
        nll = _bucket_nll(log_probs[keep], labels[keep], bucket_of, len(names))
        terms.append(w * nll.mean())
    return terms[0] + terms[1] + terms[2]


def marginal_probabilities(logits: torch.Tensor, taxonomy: TaxonomyTree, classes: Sequence[str],
                           level: str) -> tuple[list[str], torch.Tensor]:
    """Bucket names and per-instance bucket probabilities at ``level``."""
    names, idx = taxonomy.buckets(classes, level)
    probs = F.softmax(logits, dim=-1)
    index = torch.as_tensor(idx, device=logits.device)
    out = torch.zeros(logits.shape[0], len(names), dtype=probs.dtype, device=probs.device)
    out.index_add_(1, index, probs)
    return names, out


@dataclass
class ClassLoss:
    """Callable selected by the ``loss.kind`` config key.

    Works on R-CNN style logits whose column 0 is background.
    """

    kind: str = "ce"
    classes: Sequence[str] = ()
    weights: Optional[ClassWeights] = None
    taxonomy: Optional[TaxonomyTree] = None
    hierarchical: Optional[HierarchicalLossConfig] = None
    background_weight: Optional[float] = None

    def __call__(self, logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        if self.kind == "ce":
            return cross_entropy(logits, labels)
        if self.kind == "weighted_ce":
            if self.weights is None:
                raise ValueError("weighted_ce needs class weights")
            fg = self.weights.vector(self.classes)
            bg = self.background_weight if self.background_weight is not None else 1.0 / len(fg)
            return weighted_cross_entropy(logits, labels, [bg, *fg])
        if self.kind == "hierarchical":
            if self.taxonomy is None:
                raise ValueError("hierarchical loss needs a taxonomy")
            cfg = self.hierarchical or HierarchicalLossConfig.from_taxonomy(self.taxonomy)
            return hierarchical_loss(logits, labels, self.taxonomy, cfg, self.classes, background_index=0)
        raise ValueError(f"unknown loss kind {self.kind!r}")
