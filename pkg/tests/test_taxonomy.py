import itertools

import pytest
from hypothesis import given
from hypothesis import strategies as st

from crownseg.taxonomy import (
    ClassSchema, ClassWeights, TaxonomyTree, build_schema, inverse_frequency_weights, load_schema, load_taxonomy,
    test_proportion_weights as proportion_weights,
)


def test_threshold_is_strict():
    s = build_schema({"A": 25, "B": 19, "C": 100}, 20)
    assert set(s.classes) == {"A", "C", "Other"} and s.map("B") == "Other"
    assert s.classes[:2] == ("C", "A")
    s = build_schema({"A": 25, "B": 20}, 20)
    assert s.map("B") == "Other"
    s = build_schema({"A": 5}, 0)
    assert s.classes == ("A",)


def test_mapping_total_and_idempotent():
    s = build_schema({"A": 25, "B": 3, "C": 30}, 20)
    for raw in ("A", "B", "C"):
        c = s.map(raw)
        assert s.map(c) == c
    with pytest.raises(KeyError):
        s.map("Z")
    assert ClassSchema.from_dict(s.to_dict()) == s


def test_family_grouping():
    tax = TaxonomyTree(
        level={"a1": "species", "a2": "species", "b1": "species", "c1": "species"},
        genus_of={"a1": "A", "a2": "A", "b1": "B", "c1": "C"},
        family_of={"A": "Fam1", "B": "Fam1", "C": "Fam2"},
    )
    s = build_schema({"a1": 10, "a2": 15, "b1": 1, "c1": 4}, 20, "family", tax)
    assert s.classes == ("Fam1", "Other") and s.map("c1") == "Other" and s.map("a2") == "Fam1"
    s = build_schema({"a1": 10, "c1": 40}, 0, "family", tax, force_other=["Fam1"])
    assert s.map("a1") == "Other"
    with pytest.raises(ValueError, match="unknown family.*zz"):
        build_schema({"a1": 10, "zz": 3}, 0, "family", tax)


def test_schema_errors():
    with pytest.raises(ValueError):
        build_schema({}, 2)
    with pytest.raises(ValueError):
        build_schema({"A": 1}, -1)
    with pytest.raises(ValueError, match="duplicate"):
        ClassSchema(("A", "A"), {})
    with pytest.raises(ValueError):
        ClassSchema(("A",), {"b": "B"})


def test_inverse_frequency_examples():
    w = inverse_frequency_weights({"A": 10, "B": 40})
    assert w["A"] == pytest.approx(0.8) and w["B"] == pytest.approx(0.2)
    assert inverse_frequency_weights({"A": 3, "B": 3}).weights == {"A": 0.5, "B": 0.5}
    assert inverse_frequency_weights({"A": 7}).weights == {"A": 1.0}
    with pytest.raises(ValueError, match="class absent from training set"):
        inverse_frequency_weights({"A": 0, "B": 1})


def test_proportion_examples():
    w = proportion_weights({"A": 90, "B": 10})
    assert w.weights == {"A": 0.9, "B": 0.1}
    assert proportion_weights({"A": 4}).weights == {"A": 1.0}
    with pytest.raises(ValueError, match="empty test set"):
        proportion_weights({"A": 0})


@given(st.dictionaries(st.text(min_size=1, max_size=3), st.integers(1, 1000), min_size=1, max_size=6))
def test_weights_sum_to_one_and_permutation_equivariant(counts):
    for fn in (inverse_frequency_weights, proportion_weights):
        w = fn(counts)
        assert abs(sum(w.weights.values()) - 1) <= 1e-9
        rev = fn(dict(reversed(list(counts.items()))))
        for c in counts:
            assert rev[c] == pytest.approx(w[c], rel=1e-12)


def test_class_weights_validation():
    with pytest.raises(ValueError):
        ClassWeights({"A": -1.0}, "none")
    with pytest.raises(ValueError):
        ClassWeights({"A": 0.5})
    assert ClassWeights({"A": 2.0}, "none").vector(["A"]) == [2.0]
    with pytest.raises(KeyError):
        ClassWeights({"A": 1.0}).vector(["B"])


def test_bundled_sbl_taxonomy_paths():
    tax = load_taxonomy("sbl_taxonomy")
    schema = load_schema("sbl_schema")
    for c in schema.classes:
        fam = tax.lift(c, "family")
        assert tax.lift(tax.lift(c, "genus"), "family") == fam
    assert tax.lift("ACSA", "genus") == "Acer" and tax.lift("Acer", "species") == "Acer"
    assert tax.lift("Picea", "family") == "Pinopsida"
    assert tax.lift("Dead", "family") == "Dead"
    assert tax.excluded("species") == {"Betula", "Acer", "Magnoliopsida", "Pinopsida"}
    assert tax.excluded("genus") == {"Magnoliopsida", "Pinopsida"}
    assert len(schema.classes) == 18


def test_bundled_plantations_schema():
    s = load_schema("plantations_schema")
    assert s.classes == ("piba", "pima", "pist", "pigl", "thoc", "ulam", "beal", "acsa", "other")
    assert s.map("quru") == "other"
    tax = load_taxonomy("plantations_taxonomy")
    assert all(tax.lift(c, "family") for c in s.classes)


def test_taxonomy_validation():
    with pytest.raises(ValueError, match="cycle"):
        TaxonomyTree(level={"a": "species", "b": "genus"}, genus_of={"a": "b"}, family_of={"b": "a"})
    with pytest.raises(ValueError, match="unknown labels"):
        TaxonomyTree(level={"a": "species"}, exclusions={"species": frozenset({"q"})})
    with pytest.raises(ValueError):
        TaxonomyTree(level={"a": "kingdom"})
    tax = TaxonomyTree(level={"a": "species"})
    with pytest.raises(LookupError):
        tax.lift("a", "genus")
    with pytest.raises(KeyError):
        tax.lift("zz", "genus")
