"""Evaluation-metric unit, fixture, and property tests.

The derived fixture values here were frozen from hand enumeration of the
interpolated PR staircase before the implementation existed:

* hit(0.9), miss(0.8), hit(0.7) over two GTs:
  cum points (0.5, 1.0), (0.5, 0.5), (1.0, 2/3); envelope 1.0 then 2/3;
  AP = (51*1 + 50*(2/3)) / 101 = 253/303 = 0.83498...
* detections at uniform IoU 0.6: AP is 1 for t in {0.50, 0.55, 0.60} and
  0 above, so map_coco = 3/10 exactly (boundary convention IoU >= t).
"""

from __future__ import annotations

import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from densecotrain.geom import Box, GroundTruth, ScoredBox
from densecotrain.metrics import (
    COCO_THRESHOLDS,
    average_precision,
    average_recall_at,
    brute_force_ap_oracle,
    match_detections,
    mean_average_precision,
)


def _sb(x1, y1, x2, y2, s, label=0):
    return ScoredBox(Box(x1, y1, x2, y2), s, label)


def _gt(x1, y1, x2, y2, label=0):
    return GroundTruth(Box(x1, y1, x2, y2), label)


def test_thresholds_are_exact_hundredths():
    assert COCO_THRESHOLDS == (0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95)
    assert 0.6 in COCO_THRESHOLDS


def test_match_exact_detection_is_tp():
    mr = match_detections([_sb(0, 0, 2, 2, 0.9)], [_gt(0, 0, 2, 2)], 0.5)
    assert mr.det_is_tp == (True,)
    assert mr.det_matched_gt == (0,)
    assert mr.gt_matched == (True,)
    assert mr.det_match_iou[0] == 1.0


def test_match_disjoint_detection_is_fp():
    mr = match_detections([_sb(0, 0, 2, 2, 0.9)], [_gt(5, 5, 7, 7)], 0.5)
    assert mr.det_is_tp == (False,)
    assert mr.det_matched_gt == (None,)
    assert mr.gt_matched == (False,)


def test_match_greedy_consumption():
    # both detections overlap the single GT above t; the higher score wins
    dets = [_sb(0, 0, 2, 2, 0.9), _sb(0, 0, 2, 2.5, 0.8)]
    mr = match_detections(dets, [_gt(0, 0, 2, 2)], 0.5)
    assert mr.det_is_tp == (True, False)


def test_match_label_aware():
    mr = match_detections([_sb(0, 0, 2, 2, 0.9, label=1)], [_gt(0, 0, 2, 2, label=0)], 0.5)
    assert mr.det_is_tp == (False,)


def test_match_threshold_validation():
    with pytest.raises(ValueError):
        match_detections([], [], 0.0)
    with pytest.raises(ValueError):
        match_detections([], [], 1.5)


def test_ap_perfect_detector():
    d = {"a": [_sb(0, 0, 2, 2, 0.9)]}
    g = {"a": [_gt(0, 0, 2, 2)]}
    assert average_precision(d, g, 0.5) == pytest.approx(1.0)


def test_ap_disjoint_detector():
    d = {"a": [_sb(0, 0, 2, 2, 0.9)]}
    g = {"a": [_gt(5, 5, 7, 7)]}
    assert average_precision(d, g, 0.5) == 0.0


def test_ap_three_detection_fixture():
    # two GTs; ranked dets: hit (0.9), miss (0.8), hit (0.7)
    g = {"a": [_gt(0, 0, 2, 2), _gt(10, 10, 12, 12)]}
    d = {
        "a": [
            _sb(0, 0, 2, 2, 0.9),
            _sb(50, 50, 52, 52, 0.8),
            _sb(10, 10, 12, 12, 0.7),
        ]
    }
    expect = 253.0 / 303.0
    got = average_precision(d, g, 0.5)
    assert got == pytest.approx(expect, abs=1e-12)
    assert abs(got - 0.8350) < 1e-4
    assert brute_force_ap_oracle(d, g, 0.5) == pytest.approx(expect, abs=1e-12)


def test_map_perfect():
    d = {"a": [_sb(0, 0, 2, 2, 0.9)], "b": [_sb(1, 1, 4, 5, 0.7)]}
    g = {"a": [_gt(0, 0, 2, 2)], "b": [_gt(1, 1, 4, 5)]}
    rep = mean_average_precision(d, g)
    assert rep.map_coco == pytest.approx(1.0)
    assert rep.ap75 == pytest.approx(1.0)
    assert rep.ar300 == pytest.approx(1.0)


def test_map_no_detections():
    rep = mean_average_precision({"a": []}, {"a": [_gt(0, 0, 2, 2)]})
    assert rep.map_coco == 0.0
    assert rep.ap75 == 0.0


def test_map_uniform_iou_06():
    # detection (0,0,10,6) on GT (0,0,10,10): intersection 60, union 100
    g = {"a": [_gt(0, 0, 10, 10)]}
    d = {"a": [_sb(0, 0, 10, 6, 0.9)]}
    from densecotrain.geom import iou

    assert iou(d["a"][0].box, g["a"][0].box) == 0.6
    rep = mean_average_precision(d, g)
    for t in (0.5, 0.55, 0.6):
        assert rep.ap_per_threshold[t] == pytest.approx(1.0)
    for t in (0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95):
        assert rep.ap_per_threshold[t] == 0.0
    assert rep.map_coco == pytest.approx(0.3, abs=0.0)  # exact
    assert rep.map_coco == 0.3


def test_map_is_exact_mean():
    rng = random.Random(7)
    g = {}
    d = {}
    for i in range(5):
        img = f"im{i}"
        g[img] = [_gt(0, 0, 4, 4), _gt(10, 0, 14, 4)]
        d[img] = [
            _sb(rng.uniform(0, 1), 0, rng.uniform(3, 5), 4, rng.random()),
            _sb(10, 0, rng.uniform(12, 15), 4, rng.random()),
        ]
    rep = mean_average_precision(d, g)
    mean = sum(rep.ap_per_threshold.values()) / 10
    assert abs(rep.map_coco - mean) < 1e-12


def test_ap_nonincreasing_in_threshold_report():
    rng = random.Random(3)
    g = {"a": [_gt(i * 5, 0, i * 5 + 4, 4) for i in range(6)]}
    d = {
        "a": [
            _sb(i * 5 + rng.uniform(-1, 1), rng.uniform(-1, 1), i * 5 + 4, 4, rng.random())
            for i in range(6)
        ]
    }
    rep = mean_average_precision(d, g)
    vals = [rep.ap_per_threshold[t] for t in COCO_THRESHOLDS]
    for a, b in zip(vals, vals[1:]):
        assert a >= b - 1e-12


def test_ar_truncation_drops_late_hit():
    # 301 detections; only the lowest-scored one matches the GT
    g = {"a": [_gt(0, 0, 2, 2)]}
    dets = [
        _sb(100 + i, 100, 102 + i, 102, 1.0 - i * 0.002) for i in range(300)
    ]
    dets.append(_sb(0, 0, 2, 2, 0.05))
    assert average_recall_at({"a": dets}, g, 300) == 0.0
    assert average_recall_at({"a": dets}, g, 301) == pytest.approx(1.0)


def test_ar_k1_top_hit():
    g = {"a": [_gt(0, 0, 2, 2)], "b": [_gt(5, 5, 9, 9)]}
    d = {
        "a": [_sb(0, 0, 2, 2, 0.9), _sb(40, 40, 44, 44, 0.2)],
        "b": [_sb(5, 5, 9, 9, 0.8)],
    }
    assert average_recall_at(d, g, 1) == pytest.approx(1.0)


def test_ar_monotone_in_k():
    rng = random.Random(11)
    g = {"a": [_gt(i * 6, 0, i * 6 + 5, 5) for i in range(5)]}
    d = {
        "a": [
            _sb(i * 6 + rng.uniform(-2, 2), rng.uniform(-2, 2), i * 6 + 5, 5, rng.random())
            for i in range(5)
        ]
        + [_sb(100, 100, 101, 101, rng.random()) for _ in range(4)]
    }
    prev = 0.0
    for k in (1, 2, 3, 5, 9, 300):
        cur = average_recall_at(d, g, k)
        assert cur >= prev - 1e-12
        prev = cur


def test_ar_k_validation():
    with pytest.raises(ValueError):
        average_recall_at({}, {"a": [_gt(0, 0, 1, 1)]}, 0)


def test_zero_gt_with_dets_warns_and_zero():
    with pytest.warns(UserWarning):
        v = average_precision({"a": [_sb(0, 0, 2, 2, 0.9)]}, {"a": []}, 0.5)
    assert v == 0.0
    with pytest.warns(UserWarning):
        rep = mean_average_precision({"a": [_sb(0, 0, 2, 2, 0.9)]}, {"a": []})
    assert rep.map_coco == 0.0
    assert "no ground truths" in rep.notes


def test_zero_gt_zero_dets_absent():
    with pytest.warns(UserWarning):
        v = average_precision({"a": []}, {"a": []}, 0.5)
    assert v is None
    with pytest.warns(UserWarning):
        assert average_recall_at({}, {}, 300) is None


def test_oracle_rejects_large_inputs():
    dets = {"a": [_sb(i, 0, i + 1, 1, 0.5) for i in range(51)]}
    with pytest.raises(ValueError):
        brute_force_ap_oracle(dets, {"a": [_gt(0, 0, 1, 1)]}, 0.5)


def test_oracle_empty_dets():
    assert brute_force_ap_oracle({"a": []}, {"a": [_gt(0, 0, 1, 1)]}, 0.5) == 0.0


def test_oracle_order_independence():
    g = {"a": [_gt(0, 0, 4, 4), _gt(8, 0, 12, 4)]}
    dets = [
        _sb(0, 0, 4, 4, 0.9),
        _sb(8, 0, 12, 4, 0.4),
        _sb(20, 20, 22, 22, 0.6),
    ]
    a = brute_force_ap_oracle({"a": dets}, g, 0.5)
    b = brute_force_ap_oracle({"a": list(reversed(dets))}, g, 0.5)
    assert a == b


def _random_instance(rng: random.Random, max_boxes: int = 20):
    n_img = rng.randint(1, 3)
    gts = {}
    dets = {}
    budget = rng.randint(0, max_boxes)
    for i in range(n_img):
        img = f"im{i}"
        gts[img] = [
            _gt(x := rng.uniform(0, 40), y := rng.uniform(0, 40),
                x + rng.uniform(1, 10), y + rng.uniform(1, 10))
            for _ in range(rng.randint(0, 4))
        ]
        n_d = min(budget, rng.randint(0, 7))
        budget -= n_d
        dets[img] = []
        for _ in range(n_d):
            if gts[img] and rng.random() < 0.7:
                src = rng.choice(gts[img]).box
                x1 = src.x1 + rng.uniform(-2, 2)
                y1 = src.y1 + rng.uniform(-2, 2)
                x2 = max(x1 + 0.5, src.x2 + rng.uniform(-2, 2))
                y2 = max(y1 + 0.5, src.y2 + rng.uniform(-2, 2))
            else:
                x1, y1 = rng.uniform(0, 40), rng.uniform(0, 40)
                x2, y2 = x1 + rng.uniform(1, 8), y1 + rng.uniform(1, 8)
            dets[img].append(_sb(x1, y1, x2, y2, rng.random()))
    if sum(len(v) for v in gts.values()) == 0:
        gts["im0"] = [_gt(0, 0, 1, 1)]
    return dets, gts


def test_ap_matches_oracle_on_random_instances():
    rng = random.Random(20260817)
    for _ in range(120):
        dets, gts = _random_instance(rng)
        t = rng.choice(COCO_THRESHOLDS)
        fast = average_precision(dets, gts, t)
        slow = brute_force_ap_oracle(dets, gts, t)
        assert fast == pytest.approx(slow, abs=1e-9)


def test_ap_monotone_in_threshold_random():
    rng = random.Random(99)
    for _ in range(60):
        dets, gts = _random_instance(rng)
        vals = [average_precision(dets, gts, t) for t in COCO_THRESHOLDS]
        for a, b in zip(vals, vals[1:]):
            assert a >= b - 1e-12


def test_appending_lowest_score_tp_never_decreases_ap():
    rng = random.Random(5)
    for _ in range(40):
        dets, gts = _random_instance(rng)
        base = average_precision(dets, gts, 0.5)
        # add a fresh GT plus an exact lowest-score detection for it
        min_score = min(
            (d.score for v in dets.values() for d in v), default=1.0
        )
        g2 = {k: list(v) for k, v in gts.items()}
        d2 = {k: list(v) for k, v in dets.items()}
        img = next(iter(g2))
        nb = Box(900, 900, 905, 905)
        g2[img] = g2[img] + [GroundTruth(nb)]
        base_with_gt = average_precision(d2, g2, 0.5)
        d2[img] = d2[img] + [ScoredBox(nb, max(min_score / 2, 0.0))]
        after = average_precision(d2, g2, 0.5)
        assert after >= base_with_gt - 1e-12
        del base


def test_appending_lowest_score_fp_never_increases_ap():
    rng = random.Random(6)
    for _ in range(40):
        dets, gts = _random_instance(rng)
        base = average_precision(dets, gts, 0.5)
        min_score = min(
            (d.score for v in dets.values() for d in v), default=1.0
        )
        d2 = {k: list(v) for k, v in dets.items()}
        img = next(iter(gts))
        d2[img] = d2[img] + [ScoredBox(Box(900, 900, 901, 901), max(min_score / 2, 0.0))]
        after = average_precision(d2, gts, 0.5)
        assert after <= base + 1e-12


def test_invariance_under_image_relabeling_and_gt_permutation():
    rng = random.Random(42)
    for _ in range(20):
        dets, gts = _random_instance(rng)
        rep1 = mean_average_precision(dets, gts)
        remap = {k: f"x-{k}-y" for k in set(dets) | set(gts)}
        dets2 = {remap[k]: v for k, v in dets.items()}
        gts2 = {}
        for k, v in gts.items():
            shuffled = list(v)
            rng.shuffle(shuffled)
            gts2[remap[k]] = shuffled
        rep2 = mean_average_precision(dets2, gts2)
        assert rep1.map_coco == pytest.approx(rep2.map_coco, abs=1e-12)
        assert rep1.ar300 == pytest.approx(rep2.ar300, abs=1e-12)


@settings(max_examples=80, deadline=None)
@given(st.integers(min_value=0, max_value=2**31 - 1))
def test_ap_oracle_property(seed):
    rng = random.Random(seed)
    dets, gts = _random_instance(rng, max_boxes=12)
    t = rng.choice(COCO_THRESHOLDS)
    fast = average_precision(dets, gts, t)
    slow = brute_force_ap_oracle(dets, gts, t)
    if fast is None:
        assert slow is None
    else:
        assert fast == pytest.approx(slow, abs=1e-9)


def test_report_scalars_in_unit_interval():
    rng = random.Random(13)
    dets, gts = _random_instance(rng)
    rep = mean_average_precision(dets, gts)
    for v in (rep.map_coco, rep.ap75, rep.ar300, *rep.ap_per_threshold.values()):
        assert v is not None and 0.0 <= v <= 1.0


def test_match_result_tp_iff_match_iou_above_threshold():
    rng = random.Random(21)
    for _ in range(50):
        dets, gts = _random_instance(rng)
        for img in dets:
            t = rng.choice(COCO_THRESHOLDS)
            mr = match_detections(dets[img], gts.get(img, []), t)
            for tp, v in zip(mr.det_is_tp, mr.det_match_iou):
                assert tp == (v >= t if v > 0 else False)
            # each GT matched by at most one detection
            matched = [j for j in mr.det_matched_gt if j is not None]
            assert len(matched) == len(set(matched))
