import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ltn_detect.data import Image
from ltn_detect.detection import BoundingBox, ProposalEmbedding
from ltn_detect.evaluation import (
    Detection, EvalReport, all_point_ap, average_precision, score_report,
)

GT = (0.0, 0.0, 10.0, 10.0)


def ap_two_gt_half_precision():
    """Ranks TP, FP, FP, TP over two ground truths: PR points (0.5, 1) and (1, 0.5)."""
    gts = {"a": np.array([GT, (20.0, 20.0, 30.0, 30.0)])}
    dets = [
        ("a", 0.9, GT),
        ("a", 0.8, (50.0, 50.0, 60.0, 60.0)),
        ("a", 0.7, (70.0, 70.0, 80.0, 80.0)),
        ("a", 0.6, (20.0, 20.0, 30.0, 30.0)),
    ]
    return dets, gts, 0.75


def ap_duplicate_detection():
    gts = {"a": np.array([GT])}
    dets = [("a", 0.9, GT), ("a", 0.8, GT)]
    return dets, gts, 1.0


def ap_below_threshold():
    # IoU = 49 / 100
    gts = {"a": np.array([(0.0, 0.0, 100.0, 100.0)])}
    dets = [("a", 0.9, (0.0, 0.0, 49.0, 100.0))]
    return dets, gts, 0.0


FIXTURES = [ap_two_gt_half_precision, ap_duplicate_detection, ap_below_threshold]


@pytest.mark.parametrize("fixture", FIXTURES, ids=lambda f: f.__name__)
def test_hand_computed_ap(fixture):
    dets, gts, expected = fixture()
    assert average_precision(dets, gts, 0.5) == expected


def test_all_point_ap_integration():
    assert all_point_ap([0.5, 1.0], [1.0, 0.5]) == 0.75
    # the envelope lifts the dip at recall 0.5
    assert all_point_ap([0.5, 0.5, 1.0], [1.0, 0.5, 2 / 3]) == pytest.approx(0.5 + 0.5 * 2 / 3)


def test_no_detections_and_no_ground_truth():
    assert average_precision([], {"a": np.array([GT])}) == 0.0
    assert math.isnan(average_precision([("a", 0.5, GT)], {"a": np.zeros((0, 4))}))


def test_perfect_ranking_gives_one():
    gts = {"a": np.array([GT]), "b": np.array([GT, (20.0, 0.0, 30.0, 10.0)])}
    dets = [("b", 0.99, (20.0, 0.0, 30.0, 10.0)), ("a", 0.95, GT), ("b", 0.9, GT),
            ("a", 0.1, (40.0, 40.0, 50.0, 50.0))]
    assert average_precision(dets, gts) == 1.0


def test_detections_in_images_without_ground_truth_are_false_positives():
    gts = {"a": np.array([GT])}
    dets = [("z", 0.9, GT), ("a", 0.8, GT)]
    assert average_precision(dets, gts) == 0.5


def test_ties_keep_input_order():
    gts = {"a": np.array([GT])}
    first = average_precision([("a", 0.5, GT), ("a", 0.5, (50.0, 50.0, 60.0, 60.0))], gts)
    second = average_precision([("a", 0.5, (50.0, 50.0, 60.0, 60.0)), ("a", 0.5, GT)], gts)
    assert (first, second) == (1.0, 0.5)


@given(st.integers(0, 10_000))
def test_ap_ignores_detection_order_without_ties(seed):
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0, 100, (6, 2))
    gts = {"a": np.array([(x, y, x + 8, y + 8) for x, y in centers[:3]]),
           "b": np.array([(x, y, x + 8, y + 8) for x, y in centers[3:]])}
    dets = []
    for img, arr in gts.items():
        for b in arr:
            jitter = rng.uniform(-2, 2, 4)
            dets.append((img, float(rng.uniform()), tuple(b + jitter)))
    dets.append(("a", float(rng.uniform()), (200.0, 200.0, 210.0, 210.0)))
    ap = average_precision(dets, gts)
    shuffled = [dets[i] for i in rng.permutation(len(dets))]
    assert average_precision(shuffled, gts) == ap
    assert 0.0 <= ap <= 1.0


def test_detection_score_range():
    Detection("a", GT, "cat", 0.3)
    with pytest.raises(ValueError):
        Detection("a", GT, "cat", 1.5)


def _image(image_id, labels, offset=0.0):
    props = [ProposalEmbedding(BoundingBox(offset + 20 * i, 0, offset + 20 * i + 10, 10), np.zeros(2), lab)
             for i, lab in enumerate(labels)]
    return Image(image_id, 200.0, 200.0, props)


def test_score_report_perfect_scores_and_background_column():
    images = [_image("i0", ["cat", "dog", "bg"]), _image("i1", ["dog", "bg"])]
    classes = ["cat", "dog", "bg"]
    scores = {}
    for img in images:
        scores[img.image_id] = np.array([[1.0 if p.label == c else 0.0 for c in classes] for p in img.proposals])
    report = score_report(images, scores, classes)
    assert report.ap == {"cat": 1.0, "dog": 1.0}
    assert report.n_gt == {"cat": 1, "dog": 2}
    assert report.n_det == {"cat": 5, "dog": 5}
    assert report.mAP == 1.0


def test_map_skips_classes_without_ground_truth():
    report = EvalReport(ap={"a": 0.5, "b": float("nan"), "c": 1.0}, n_gt={"a": 2, "b": 0, "c": 1},
                        n_det={"a": 3, "b": 3, "c": 3})
    assert report.mAP == 0.75
    lines = report.to_text().splitlines()
    assert lines[0] == "a\t0.5\t2\t3"
    assert lines[-1] == "mAP\t0.75"
