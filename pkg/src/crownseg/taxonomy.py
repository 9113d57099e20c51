"""Class schemas, the species -> genus -> family hierarchy and class weight vectors."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Literal, Mapping, Optional, Sequence

LEVELS = ("species", "genus", "family")
_RANK = {"species": 0, "genus": 1, "family": 2}


@dataclass(frozen=True)
class ClassSchema:
    classes: tuple[str, ...]
    raw_to_class: Mapping[str, str]
    other_class: str = "Other"
    min_count: int = 0

    def __post_init__(self):
        if len(set(self.classes)) != len(self.classes):
            raise ValueError("duplicate class codes")
        bad = {r: c for r, c in self.raw_to_class.items() if c not in self.classes}
        if bad:
            raise ValueError(f"raw labels map to unknown classes: {bad}")
        if self.other_class not in self.classes and any(
            c == self.other_class for c in self.raw_to_class.values()
        ):
            raise ValueError("other_class must be a class when labels are grouped")

    def map(self, label: str) -> str:
        """Class code for a raw label; class codes map to themselves."""
        if label in self.classes:
            return label
        try:
            return self.raw_to_class[label]
        except KeyError:
            raise KeyError(f"label {label!r} not covered by schema") from None

    def index(self, label: str) -> int:
        return self.classes.index(self.map(label))

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def to_dict(self) -> dict:
        return {
            "classes": list(self.classes),
            "raw_to_class": dict(sorted(self.raw_to_class.items())),
            "other_class": self.other_class,
            "min_count": self.min_count,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ClassSchema":
        return cls(tuple(d["classes"]), dict(d.get("raw_to_class", {})),
                   d.get("other_class", "Other"), int(d.get("min_count", 0)))


@dataclass(frozen=True)
class TaxonomyTree:
    """Rank tags plus upward edges.

    ``level`` tags each label as species, genus, family or other. ``genus_of``
    maps species to genus and ``family_of`` maps genera (or species) to
    family. Labels tagged ``other`` (e.g. dead trees) are their own bucket at
    every level. ``exclusions`` lists, per loss level, the labels whose
    instances must not contribute to that level's term.
    """

    level: Mapping[str, str]
    genus_of: Mapping[str, str] = field(default_factory=dict)
    family_of: Mapping[str, str] = field(default_factory=dict)
    exclusions: Mapping[str, frozenset] = field(default_factory=dict)

    def __post_init__(self):
        for lab, lev in self.level.items():
            if lev not in (*LEVELS, "other"):
                raise ValueError(f"{lab!r}: unknown level {lev!r}")
        for lev, labs in self.exclusions.items():
            unknown = set(labs) - set(self.level)
            if unknown:
                raise ValueError(f"exclusions for {lev} reference unknown labels {sorted(unknown)}")
        # acyclicity: every upward walk must terminate
        for lab in self.level:
            seen = {lab}
            cur = lab
            while cur in self.genus_of or cur in self.family_of:
                cur = self.genus_of.get(cur) or self.family_of.get(cur)
                if cur in seen:
                    raise ValueError(f"cycle in taxonomy at {cur!r}")
                seen.add(cur)

    def level_of(self, label: str) -> str:
        """Level tag, inferred from the edges for intermediate nodes that are not classes."""
        if label in self.level:
            return self.level[label]
        if label in self.family_of.values():
            return "family"
        if label in self.genus_of.values():
            return "genus"
        raise KeyError(f"label {label!r} not in taxonomy")

    def lift(self, label: str, target: str) -> str:
        """Ancestor of ``label`` at ``target`` level.

        A label coarser than ``target`` stands for itself (a genus class
        counts as its own species-level class when no finer class exists).
        """
        if target not in _RANK:
            raise ValueError(f"unknown level {target!r}")
        lev = self.level_of(label)
        if lev == "other" or _RANK[lev] >= _RANK[target]:
            return label
        cur = label
        if lev == "species":
            if cur not in self.genus_of:
                raise LookupError(f"species {label!r} has no genus")
            cur = self.genus_of[cur]
            if target == "genus":
                return cur
        if cur not in self.family_of:
            raise LookupError(f"{label!r} cannot be lifted to family")
        return self.family_of[cur]

    def buckets(self, classes: Sequence[str], target: str) -> tuple[list[str], list[int]]:
        """Bucket names at ``target`` and each class's bucket index."""
        names: list[str] = []
        idx = []
        for c in classes:
            b = self.lift(c, target)
            if b not in names:
                names.append(b)
            idx.append(names.index(b))
        return names, idx

    def excluded(self, target: str) -> frozenset:
        return frozenset(self.exclusions.get(target, ()))

    @classmethod
    def from_dict(cls, d: Mapping) -> "TaxonomyTree":
        return cls(
            level=dict(d["level"]),
            genus_of=dict(d.get("genus_of", {})),
            family_of=dict(d.get("family_of", {})),
            exclusions={k: frozenset(v) for k, v in d.get("exclusions", {}).items()},
        )


@dataclass(frozen=True)
class ClassWeights:
    weights: Mapping[str, float]
    normalization: Literal["sum-to-one", "none"] = "sum-to-one"

    def __post_init__(self):
        if any(w < 0 for w in self.weights.values()):
            raise ValueError("class weights must be non-negative")
        if self.normalization == "sum-to-one" and abs(sum(self.weights.values()) - 1.0) > 1e-9:
            raise ValueError("weights do not sum to one")

    def __getitem__(self, c: str) -> float:
        return self.weights[c]

    def vector(self, classes: Sequence[str]) -> list[float]:
        missing = [c for c in classes if c not in self.weights]
        if missing:
            raise KeyError(f"missing class weights for {missing}")
        return [float(self.weights[c]) for c in classes]


def build_schema(
    counts: Mapping[str, int],
    min_count: int,
    grouping: Literal["species", "family"] = "species",
    taxonomy: Optional[TaxonomyTree] = None,
    other_class: str = "Other",
    force_other: Sequence[str] = (),
) -> ClassSchema:
    """Keep labels with strictly more than ``min_count`` instances; the rest map to ``other_class``.

    ``force_other`` names (lifted) labels that always go to ``other_class``,
    e.g. the rare BCI families listed in ``bci_grouping.json``.
    """
    if not counts:
        raise ValueError("counts must be non-empty")
    if min_count < 0:
        raise ValueError("min_count must be >= 0")
    lifted = {}
    if grouping == "family":
        if taxonomy is None:
            raise ValueError("family grouping needs a taxonomy")
        bad = []
        for raw in counts:
            try:
                lifted[raw] = taxonomy.lift(raw, "family")
            except (KeyError, LookupError):
                bad.append(raw)
        if bad:
            raise ValueError(f"unknown family for labels: {sorted(bad)}")
    elif grouping == "species":
        lifted = {raw: raw for raw in counts}
    else:
        raise ValueError(f"unknown grouping {grouping!r}")

    grouped: dict[str, int] = {}
    for raw, n in counts.items():
        grouped[lifted[raw]] = grouped.get(lifted[raw], 0) + int(n)
    kept = [c for c in grouped if grouped[c] > min_count and c not in force_other]
    classes = sorted(kept, key=lambda c: (-grouped[c], c))
    raw_to_class = {}
    for raw in counts:
        raw_to_class[raw] = lifted[raw] if lifted[raw] in kept else other_class
    for c in grouped:
        if c not in kept:
            raw_to_class[c] = other_class
    if other_class in raw_to_class.values() and other_class not in classes:
        classes.append(other_class)
    return ClassSchema(tuple(classes), raw_to_class, other_class, min_count)


def inverse_frequency_weights(train_counts: Mapping[str, int]) -> ClassWeights:
    zero = [c for c, n in train_counts.items() if n <= 0]
    if zero:
        raise ValueError(f"class absent from training set: {zero}")
    inv = {c: 1.0 / n for c, n in train_counts.items()}
    total = sum(inv.values())
    return ClassWeights({c: v / total for c, v in inv.items()})


def test_proportion_weights(test_counts: Mapping[str, int]) -> ClassWeights:
    total = sum(test_counts.values())
    if total <= 0:
        raise ValueError("empty test set")
    return ClassWeights({c: n / total for c, n in test_counts.items()})


test_proportion_weights.__test__ = False  # keep pytest from collecting it on import


def _load_json(name_or_path: str | Path) -> dict:
    p = Path(name_or_path)
    if p.suffix and p.exists():
        return json.loads(p.read_text())
    return json.loads(resources.files("crownseg.data").joinpath(f"{name_or_path}.json").read_text())


def load_schema(name_or_path: str | Path) -> ClassSchema:
    """Load a schema file, or a bundled one by name (``plantations_schema``, ``sbl_schema``)."""
    return ClassSchema.from_dict(_load_json(name_or_path))


def load_taxonomy(name_or_path: str | Path) -> TaxonomyTree:
    return TaxonomyTree.from_dict(_load_json(name_or_path))
