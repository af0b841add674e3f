import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from marsdet.boxes import iou, iou_matrix, shape_iou
from marsdet.data import CLASSES, generate_synthetic_dataset
from marsdet.detector import Detection, build_model, toy_config
from marsdet.errors import ConfigError, DataError
from marsdet.evaluation import (
    EvalThresholds,
    average_precision,
    compute_ap,
    compute_map,
    evaluate,
    evaluate_detections,
    match_detections,
    oracle_detections,
)

from oracles import box_iou, brute_ap


# --- IoU ---------------------------------------------------------------------------

def test_iou_examples():
    assert iou((1, 2, 5, 7), (1, 2, 5, 7)) == 1.0
    assert iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0
    assert iou((0, 0, 2, 2), (1, 0, 3, 2)) == pytest.approx(2 / 6, abs=1e-12)
    assert 2 / 6 == pytest.approx(0.333333, abs=1e-6)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 50), min_size=8, max_size=8))
def test_iou_matrix_matches_scalar_oracle(v):
    a = (min(v[0], v[1]), min(v[2], v[3]), max(v[0], v[1]), max(v[2], v[3]))
    b = (min(v[4], v[5]), min(v[6], v[7]), max(v[4], v[5]), max(v[6], v[7]))
    m = iou_matrix(np.array([a]), np.array([b]))[0, 0]
    assert m == pytest.approx(box_iou(a, b), abs=1e-12)
    assert 0 <= m <= 1
    assert iou(a, b) == pytest.approx(iou(b, a), abs=1e-15)


def test_shape_iou():
    assert shape_iou((10, 20), (10, 20)) == 1.0
    assert shape_iou((10, 10), (20, 20)) == pytest.approx(0.25)


# --- AP ------------------------------------------------------------------------------

def test_perfect_detector_ap_one():
    gt = {"a": [(0, 0, 10, 10), (20, 20, 30, 30)], "b": [(5, 5, 9, 9)]}
    dets = [Detection(b, 0, 0.9 - 0.1 * n, k) for n, (k, b) in
            enumerate([(k, b) for k, v in gt.items() for b in v])]
    assert compute_ap(dets, gt) == 1.0


def test_null_detector_ap_zero():
    assert compute_ap([], {"a": [(0, 0, 1, 1)]}) == 0.0


def test_zero_ground_truth_ap_zero():
    assert compute_ap([], {}) == 0.0
    assert compute_ap([Detection((0, 0, 1, 1), 0, 0.5, "a")], {"a": []}) == 0.0


def test_ap_hand_computed_curve():
    # ranked: TP, FP, TP over 2 GT -> precision envelope 1.0 to r=0.5, 2/3 to r=1
    gt = {"a": [(0, 0, 10, 10), (20, 20, 30, 30)]}
    dets = [Detection((0, 0, 10, 10), 0, 0.9, "a"), Detection((50, 50, 60, 60), 0, 0.8, "a"),
            Detection((20, 20, 30, 30), 0, 0.7, "a")]
    assert compute_ap(dets, gt) == pytest.approx(0.5 + 0.5 * 2 / 3, abs=1e-12)
    # 11-point: recall >= 0..0.5 -> 1.0 (6 points), 0.6..1.0 -> 2/3 (5 points)
    assert compute_ap(dets, gt, interpolation="11-point") == pytest.approx((6 + 5 * 2 / 3) / 11, abs=1e-12)


def test_unknown_interpolation():
    with pytest.raises(ConfigError):
        average_precision([True], 1, "voc2012")


def random_instance(rng, n_img=3, max_boxes=6):
    gt, dets = {}, []
    for k in range(n_img):
        img = f"im{k}"
        boxes = []
        for _ in range(int(rng.integers(0, max_boxes + 1))):
            x, y = rng.uniform(0, 30, 2)
            w, h = rng.uniform(3, 12, 2)
            boxes.append((float(x), float(y), float(x + w), float(y + h)))
        gt[img] = boxes
        for b in boxes:
            for _ in range(int(rng.integers(0, 3))):
                j = rng.normal(0, 2.0, 4)
                jb = (b[0] + j[0], b[1] + j[1], max(b[0] + j[0] + 0.5, b[2] + j[2]), max(b[1] + j[1] + 0.5, b[3] + j[3]))
                dets.append(Detection(tuple(float(v) for v in jb), 0, float(rng.integers(1, 8)) / 8, img))
        for _ in range(int(rng.integers(0, 3))):
            x, y = rng.uniform(0, 30, 2)
            dets.append(Detection((float(x), float(y), float(x + 5), float(y + 5)), 0, float(rng.integers(1, 8)) / 8, img))
    return dets, gt


@pytest.mark.parametrize("seed", range(50))
def test_ap_matches_exhaustive_reference(seed):
    dets, gt = random_instance(np.random.default_rng(seed))
    assert compute_ap(dets, gt) == pytest.approx(brute_ap(dets, gt), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_ap_properties(seed):
    rng = np.random.default_rng(seed)
    dets, gt = random_instance(rng)
    ap = compute_ap(dets, gt)
    assert 0 <= ap <= 1
    shuffled = list(dets)
    random.Random(seed).shuffle(shuffled)
    assert compute_ap(shuffled, gt) == ap
    ranked, tp = match_detections(dets, gt)
    if tp.any():
        d = ranked[int(np.argmax(tp))]
        dup = Detection(d.box, d.class_id, d.confidence, d.image_id)
        _, tp2 = match_detections(dets + [dup], gt)
        assert int((~tp2).sum()) == int((~tp).sum()) + 1
        assert compute_ap(dets + [dup], gt) <= ap


def test_duplicate_on_claimed_box_is_fp_even_with_overlapping_neighbour():
    # both ground truth boxes overlap the detection above the threshold
    gt = {"a": [(0.0, 0.0, 10.0, 10.0), (0.0, 0.0, 10.0, 9.0)]}
    d = Detection((0.0, 0.0, 10.0, 10.0), 0, 0.9, "a")
    _, tp = match_detections([d, Detection(d.box, 0, 0.9, "a")], gt)
    assert tp.tolist() == [True, False]


# --- mAP -----------------------------------------------------------------------------

def test_map_printed_rows():
    base = dict(zip(CLASSES, np.array([83.67, 71.87, 51.32, 64.54, 0.00]) / 100))
    best = dict(zip(CLASSES, np.array([84.77, 75.34, 57.12, 72.28, 3.35]) / 100))
    assert 100 * compute_map(base) == pytest.approx(54.28, abs=0.005)
    assert 100 * compute_map(best) == pytest.approx(58.57, abs=0.005)
    assert compute_map({c: 0.0 for c in CLASSES}) == 0.0
    assert compute_map({"echinus": 1.0}) == pytest.approx(0.2)


# --- evaluate -------------------------------------------------------------------------

@pytest.fixture(scope="module")
def val_manifest():
    return generate_synthetic_dataset(4, 64, seed=12)


def test_oracle_detector_map_one(val_manifest):
    res = evaluate_detections(oracle_detections(val_manifest), val_manifest)
    present = {c for r in val_manifest.records for c, _ in r.objects}
    for c in CLASSES:
        assert res.per_class_ap[c] == (1.0 if c in present else 0.0)
    full = generate_synthetic_dataset(12, 64, seed=0)
    assert evaluate_detections(oracle_detections(full), full).map == 1.0


def test_untrained_model_high_threshold_null(val_manifest):
    model = build_model(toy_config(64), 0)
    res = evaluate(model, val_manifest, EvalThresholds(conf_threshold=0.99))
    assert res.map == 0.0
    assert res.records == []
    assert all(c["num_det"] == 0 for c in res.counts.values())


def test_eval_result_bookkeeping(val_manifest):
    model = build_model(toy_config(64), 0)
    res = evaluate(model, val_manifest, EvalThresholds(conf_threshold=0.0))
    assert res.map == pytest.approx(sum(res.per_class_ap.values()) / 5, abs=1e-15)
    for c, k in res.counts.items():
        assert k["tp"] <= k["num_det"] and k["tp"] <= k["num_gt"]
        assert k["tp"] + k["fp"] == k["num_det"]
    for rec in res.records[:5]:
        assert set(rec) == {"image_id", "class", "confidence", "box", "match"}


def test_evaluate_is_deterministic(val_manifest):
    model = build_model(toy_config(64), 3)
    a = evaluate(model, val_manifest, EvalThresholds(conf_threshold=0.01))
    b = evaluate(model, val_manifest, EvalThresholds(conf_threshold=0.01))
    assert a.to_dict(with_records=True) == b.to_dict(with_records=True)


def test_evaluate_errors(val_manifest):
    model = build_model(toy_config(64), 0)
    empty = generate_synthetic_dataset(1, 64, seed=0)
    empty.records.clear()
    with pytest.raises(DataError, match="empty"):
        evaluate(model, empty)
    with pytest.raises(DataError, match="classes"):
        evaluate(build_model(toy_config(64, num_classes=3), 0), val_manifest)


def test_eval_thresholds_validation():
    assert EvalThresholds().violations() == []
    assert len(EvalThresholds(1.5, 0.0, 2.0, "x").violations()) == 4
