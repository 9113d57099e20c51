import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import detection_from_mask, random_blob, random_fixture
from oracles import brute_force_ap, brute_force_miou
from crownseg.metrics import (
    COCO_IOU_THRESHOLDS, MetricsReport, aggregate, aggregate_reports, average_precision, evaluate,
    interpolated_ap, match_image, mean_and_stderr, mean_iou, per_class_average_precision, single_class_collapse,
)
from crownseg.structures import GroundTruth


def _square(y, x, s=4, size=16):
    m = np.zeros((size, size), bool)
    m[y:y + s, x:x + s] = True
    return m


def test_perfect_predictions_give_ap_one():
    gts = {"t": [GroundTruth(_square(0, 0), "a"), GroundTruth(_square(8, 8), "a")]}
    preds = {"t": [detection_from_mask(g.mask, "a", 0.9) for g in gts["t"]]}
    assert average_precision(preds, gts, "a") == 1.0


def test_one_true_positive_out_of_two_gt():
    gts = {"t": [GroundTruth(_square(0, 0), "a"), GroundTruth(_square(8, 8), "a")]}
    preds = {"t": [detection_from_mask(_square(0, 0), "a", 0.9)]}
    # recall tops out at 0.5; precision 1 on recall points 0..0.5 (51 of 101)
    assert average_precision(preds, gts, "a") == pytest.approx(51 / 101)


def test_class_absent_from_gt_is_excluded(caplog):
    gts = {"t": [GroundTruth(_square(0, 0), "a")]}
    preds = {"t": [detection_from_mask(_square(0, 0), "b", 0.9)]}
    assert average_precision(preds, gts, "b") is None
    assert "absent" in caplog.text
    assert per_class_average_precision(preds, gts, ["a", "b"]) == {"a": 0.0}


def test_false_positive_ranked_first_halves_precision():
    gts = {"t": [GroundTruth(_square(0, 0), "a")]}
    preds = {"t": [detection_from_mask(_square(8, 8), "a", 0.9), detection_from_mask(_square(0, 0), "a", 0.5)]}
    assert average_precision(preds, gts, "a") == pytest.approx(0.5)


def test_match_prefers_higher_iou_then_lower_index():
    iou = np.array([[0.6, 0.8, 0.8], [0.7, 0.0, 0.9]])
    res = match_image(iou, [0.5])
    assert res.gt_match[0].tolist() == [-1, 0, 1]
    assert res.pred_tp[0].tolist() == [True, True]


def test_interpolated_ap_requires_gt():
    with pytest.raises(ValueError):
        interpolated_ap(np.array([True]), 0)


def test_ap_matches_brute_force_on_random_fixtures():
    rng = np.random.default_rng(1)
    for _ in range(40):
        preds, gt = random_fixture(rng)
        for c in ("a", "b"):
            assert average_precision(preds, gt, c) == brute_force_ap(preds, gt, c, COCO_IOU_THRESHOLDS)


def test_miou_reference_and_false_positives():
    rng = np.random.default_rng(2)
    for _ in range(30):
        preds, gt = random_fixture(rng)
        if not any(gt.values()):
            continue
        base = mean_iou(preds, gt)
        assert base == pytest.approx(brute_force_miou(preds, gt), abs=1e-12)
        extra = {k: list(v) + [detection_from_mask(random_blob(rng), "a", 0.3)] for k, v in preds.items()}
        assert mean_iou(extra, gt) >= base


def test_miou_without_gt_raises():
    with pytest.raises(ValueError, match="no ground truth"):
        mean_iou({}, {"t": []})


def test_miou_one_prediction_covers_two_crowns():
    a, b = _square(0, 0), _square(0, 4)
    union = a | b
    gt = {"t": [GroundTruth(a, "a"), GroundTruth(b, "a")]}
    preds = {"t": [detection_from_mask(union, "a", 0.9)]}
    assert mean_iou(preds, gt) == pytest.approx(0.5)


def test_aggregate_weights():
    ap = {"a": 0.2, "b": 0.6}
    assert aggregate(ap) == pytest.approx(0.4)
    assert aggregate(ap, {"a": 3, "b": 1}) == pytest.approx(0.3)
    with pytest.raises(ValueError, match="mismatch"):
        aggregate(ap, {"a": 1.0})
    with pytest.raises(ValueError):
        aggregate({})


@settings(max_examples=200, deadline=None)
@given(st.dictionaries(st.sampled_from("abcdef"), st.floats(0, 1), min_size=1),
       st.lists(st.floats(0.01, 10), min_size=6, max_size=6))
def test_wmap_is_convex_combination(per_class, raw_w):
    w = dict(zip(sorted(per_class), raw_w))
    val = aggregate(per_class, w)
    assert min(per_class.values()) - 1e-12 <= val <= max(per_class.values()) + 1e-12
    uniform = aggregate(per_class, {c: 1.0 for c in per_class})
    assert abs(uniform - aggregate(per_class)) <= 1e-12


def test_single_class_collapse():
    gt = {"t": [GroundTruth(_square(0, 0), "a"), GroundTruth(_square(8, 8), "b")]}
    preds = {"t": [detection_from_mask(_square(0, 0), "b", 0.9), detection_from_mask(_square(8, 8), "a", 0.8)]}
    assert per_class_average_precision(preds, gt) == {"a": 0.0, "b": 0.0}
    assert single_class_collapse(preds, gt) == (1.0, 1.0)
    assert single_class_collapse({}, {}) == (0.0, 0.0)


def test_evaluate_report_fields():
    gt = {"t": [GroundTruth(_square(0, 0), "a"), GroundTruth(_square(8, 8), "b"), GroundTruth(_square(8, 0), "b")]}
    preds = {"t": [detection_from_mask(g.mask, g.class_label, 0.9) for g in gt["t"]]}
    rep = evaluate(preds, gt, ["a", "b"])
    assert rep.map == rep.wmap == rep.single_class_map == rep.miou == 1.0
    assert "map\t100.00" in rep.table()
    assert rep.to_dict()["per_class_ap"] == {"a": 1.0, "b": 1.0}


def test_mean_and_stderr():
    assert mean_and_stderr([0.5]) == (0.5, None)
    m, se = mean_and_stderr([0.5, 0.6, 0.7])
    assert m == pytest.approx(0.6) and se == pytest.approx(0.1 / math.sqrt(3))
    assert mean_and_stderr([0.4, 0.4, 0.4])[1] == 0.0


def test_aggregate_reports():
    reps = [MetricsReport({"a": v}, v, v, v, v) for v in (0.5, 0.6, 0.7)]
    agg = aggregate_reports(reps)
    assert agg.map == pytest.approx(0.6) and agg.stderr["map"] == pytest.approx(0.0577, abs=1e-4)
    assert agg.n_seeds == 3
    assert aggregate_reports(reps[:1]).stderr["map"] is None
