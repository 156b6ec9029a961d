"""Decoding, accuracy, component extraction, and detection matching."""

import json

import numpy as np
import pytest

from deskocr import evalkit as ek
from deskocr.losses import SeqLabel


def logits_for_path(path, num_classes):
    """One-hot-ish logits whose per-step argmax follows the given path."""
    z = np.zeros((len(path), num_classes))
    for t, k in enumerate(path):
        z[t, k] = 5.0
    return z


# ---------------------------------------------------------------------------
# greedy decode


def test_greedy_decode_collapses_repeats_and_blanks():
    z = logits_for_path((0, 1, 1, 0, 2), 3)
    assert ek.greedy_decode(z) == SeqLabel((1, 2))


def test_greedy_decode_all_blank_is_empty():
    z = logits_for_path((0, 0, 0, 0), 2)
    assert ek.greedy_decode(z) == SeqLabel(())


def test_greedy_decode_blank_separates_repeats():
    z = logits_for_path((1, 0, 1), 2)
    assert ek.greedy_decode(z) == SeqLabel((1, 1))


def test_greedy_decode_magnitude_invariant():
    rng = np.random.default_rng(3)
    z = rng.normal(size=(10, 5))
    assert ek.greedy_decode(z) == ek.greedy_decode(z * 7.0 + 3.0)


def test_greedy_decode_rejects_single_class():
    with pytest.raises(ValueError):
        ek.greedy_decode(np.zeros((4, 1)))


# ---------------------------------------------------------------------------
# sentence accuracy


def test_sentence_accuracy_counts():
    a = [SeqLabel((1, 2)), SeqLabel((3,)), SeqLabel((2, 2)), SeqLabel((4,))]
    b = [SeqLabel((1, 2)), SeqLabel((3,)), SeqLabel((2, 2)), SeqLabel((5,))]
    assert ek.sentence_accuracy(a, a) == 1.0
    assert ek.sentence_accuracy(a, b) == 0.75
    c = [SeqLabel((9,))] * 4
    assert ek.sentence_accuracy(a, c) == 0.0


def test_sentence_accuracy_rejects_length_mismatch():
    with pytest.raises(ValueError):
        ek.sentence_accuracy([SeqLabel((1,))], [])


# ---------------------------------------------------------------------------
# boxes from probability maps


def test_boxes_empty_map():
    assert ek.boxes_from_probmap(np.zeros((8, 8))) == []


def test_boxes_single_rectangle():
    p = np.zeros((10, 12))
    p[2:5, 3:8] = 1.0
    boxes = ek.boxes_from_probmap(p)
    assert boxes == [ek.DetBox(3.0, 2.0, 8.0, 5.0, 1.0)]


def test_boxes_two_rectangles_split_by_zero_column():
    p = np.zeros((10, 12))
    p[1:4, 1:5] = 1.0
    p[5:9, 6:11] = 0.5
    boxes = ek.boxes_from_probmap(p)
    assert len(boxes) == 2
    assert boxes[0] == ek.DetBox(1.0, 1.0, 5.0, 4.0, 1.0)
    assert boxes[1] == ek.DetBox(6.0, 5.0, 11.0, 9.0, 0.5)


def test_boxes_min_area_filters_specks():
    p = np.zeros((8, 8))
    p[1, 1:4] = 1.0  # 3 pixels, below min_area=4
    p[5:7, 5:7] = 1.0  # 4 pixels, kept
    boxes = ek.boxes_from_probmap(p, min_area=4)
    assert boxes == [ek.DetBox(5.0, 5.0, 7.0, 7.0, 1.0)]


def test_boxes_diagonal_pixels_not_connected():
    p = np.zeros((6, 6))
    p[1, 1] = 1.0
    p[2, 2] = 1.0
    boxes = ek.boxes_from_probmap(p, min_area=1)
    assert len(boxes) == 2


def test_boxes_depend_only_on_threshold_comparison():
    rng = np.random.default_rng(8)
    p = rng.uniform(size=(12, 12))
    p[p <= 0.55] = 0.1  # carve clear on/off structure
    hard = np.where(p > 0.3, 0.95, 0.05)
    a = ek.boxes_from_probmap(p, bin_thresh=0.3, min_area=1)
    b = ek.boxes_from_probmap(hard, bin_thresh=0.3, min_area=1)
    assert [(x.x0, x.y0, x.x1, x.y1) for x in a] == \
        [(x.x0, x.y0, x.x1, x.y1) for x in b]


def test_boxes_rejects_bad_threshold():
    with pytest.raises(ValueError):
        ek.boxes_from_probmap(np.zeros((4, 4)), bin_thresh=0.0)


def test_detbox_rejects_degenerate():
    with pytest.raises(ValueError):
        ek.DetBox(3.0, 1.0, 3.0, 2.0, 0.5)


def test_unclip_box_expands_by_area_over_perimeter():
    b = ek.DetBox(2.0, 3.0, 12.0, 8.0, score=0.7)
    got = ek.unclip_box(b, ratio=1.7)
    d = 1.7 * (10.0 * 5.0) / (2.0 * 15.0)  # = 2.8333...
    assert got.x0 == pytest.approx(2.0 - d)
    assert got.y0 == pytest.approx(3.0 - d)
    assert got.x1 == pytest.approx(12.0 + d)
    assert got.y1 == pytest.approx(8.0 + d)
    assert got.score == 0.7


def test_unclip_box_clips_to_bounds():
    b = ek.DetBox(1.0, 1.0, 19.0, 9.0, score=1.0)
    got = ek.unclip_box(b, ratio=2.0, bounds=(10, 20))
    assert (got.x0, got.y0) == (0.0, 0.0)
    assert (got.x1, got.y1) == (20.0, 10.0)


def test_unclip_box_ratio_zero_is_identity():
    b = ek.DetBox(4.0, 5.0, 9.0, 11.0, score=0.2)
    got = ek.unclip_box(b, ratio=0.0)
    assert (got.x0, got.y0, got.x1, got.y1) == (4.0, 5.0, 9.0, 11.0)


def test_unclip_box_rejects_negative_ratio():
    with pytest.raises(ValueError, match="ratio"):
        ek.unclip_box(ek.DetBox(0.0, 0.0, 4.0, 4.0, 1.0), ratio=-0.1)


# ---------------------------------------------------------------------------
# detection matching


def box(x0, y0, x1, y1, score=1.0):
    return ek.DetBox(float(x0), float(y0), float(x1), float(y1), score)


def test_det_hmean_exact_match():
    gt = [box(0, 0, 10, 10), box(20, 0, 30, 10)]
    rep = ek.det_hmean(list(gt), gt)
    assert (rep.precision, rep.recall, rep.hmean) == (1.0, 1.0, 1.0)
    assert (rep.matched, rep.pred, rep.gt) == (2, 2, 2)


def test_det_hmean_degenerate_conventions():
    rep = ek.det_hmean([], [])
    assert (rep.precision, rep.recall, rep.hmean) == (1.0, 1.0, 1.0)
    rep = ek.det_hmean([], [box(0, 0, 5, 5)])
    assert (rep.precision, rep.recall, rep.hmean) == (0.0, 0.0, 0.0)
    rep = ek.det_hmean([box(0, 0, 5, 5)], [])
    assert rep.precision == 0.0 and rep.hmean == 0.0


def test_det_hmean_iou_point_six_boundary():
    # inter = 10 * 7.5 = 75, union = 100 + 100 - 75 = 125, IoU = 0.6
    gt = [box(0, 0, 10, 10)]
    pred = [box(0, 2.5, 10, 12.5)]
    assert ek.box_iou(pred[0], gt[0]) == pytest.approx(0.6)
    assert ek.det_hmean(pred, gt, iou_thresh=0.5).hmean == 1.0
    assert ek.det_hmean(pred, gt, iou_thresh=0.7).hmean == 0.0


def test_det_hmean_one_to_one_matching():
    gt = [box(0, 0, 10, 10)]
    pred = [box(0, 0, 10, 10, score=0.9), box(1, 0, 10, 10, score=0.8)]
    rep = ek.det_hmean(pred, gt)
    assert rep.matched == 1  # second pred cannot reuse the matched gt
    assert rep.precision == 0.5 and rep.recall == 1.0
    assert rep.hmean == pytest.approx(2 / 3)


def test_det_hmean_prefers_highest_iou_gt():
    gt_a = box(0, 0, 10, 10)
    gt_b = box(8, 0, 18, 10)
    # pred1 overlaps both; taking the higher-IoU gt_a leaves gt_b for pred2
    pred1 = box(1, 0, 11, 10, score=0.9)
    pred2 = box(8, 0, 18, 10, score=0.5)
    rep = ek.det_hmean([pred1, pred2], [gt_a, gt_b], iou_thresh=0.3)
    assert rep.matched == 2 and rep.hmean == 1.0


def test_det_hmean_swap_exchanges_precision_recall():
    gt = [box(0, 0, 10, 10), box(20, 0, 30, 10), box(40, 0, 50, 10)]
    pred = [box(0, 1, 10, 11, score=0.9), box(20, 1, 30, 11, score=0.8)]
    fwd = ek.det_hmean(pred, gt)
    rev = ek.det_hmean(gt, pred)
    assert fwd.precision == rev.recall
    assert fwd.recall == rev.precision
    assert fwd.hmean == pytest.approx(rev.hmean)


# ---------------------------------------------------------------------------
# report serialization


def test_report_json_is_single_line_and_parses():
    rep = ek.det_hmean([box(0, 0, 4, 4)], [box(0, 0, 4, 4)])
    s = rep.to_json()
    assert "\n" not in s
    data = json.loads(s)
    assert data["hmean"] == 1.0 and data["matched"] == 1
    assert "sentence_accuracy" not in data
    rec = ek.recognition_report([SeqLabel((1,))], [SeqLabel((1,))])
    data = json.loads(rec.to_json())
    assert data["sentence_accuracy"] == 1.0 and "precision" not in data
