"""Dataset generation, detection target maps, paste augmentation, disk IO."""

import json

import numpy as np
import pytest

from deskocr import datakit as dk
from deskocr.losses import ctc_feasible


def digits_charset():
    return dk.Charset("0123456789")


# ---------------------------------------------------------------------------
# glyph rendering


def test_render_glyph_one_hand():
    out = dk.render_text("1", scale=1)
    expected = np.array(
        [[0, 1, 0],
         [1, 1, 0],
         [0, 1, 0],
         [0, 1, 0],
         [1, 1, 1]], dtype=np.float32)
    np.testing.assert_array_equal(out, expected)


def test_render_advance_and_gap():
    out = dk.render_text("10", scale=1)
    assert out.shape == (5, 7)
    np.testing.assert_array_equal(out[:, 3], np.zeros(5))  # gap column
    np.testing.assert_array_equal(out[:, :3], dk.render_text("1", scale=1))
    np.testing.assert_array_equal(out[:, 4:], dk.render_text("0", scale=1))


def test_render_scale_and_ink():
    out = dk.render_text("8", scale=2, ink=0.5)
    assert out.shape == (10, 6)
    assert out.max() == np.float32(0.5)
    np.testing.assert_array_equal(out[0:2, 0:2], np.full((2, 2), 0.5, np.float32))


def test_render_rejects_unknown_char():
    with pytest.raises(ValueError, match="glyph"):
        dk.render_text("x")
    with pytest.raises(ValueError):
        dk.render_text("")


# ---------------------------------------------------------------------------
# charset


def test_charset_text_label_roundtrip():
    cs = digits_charset()
    label = cs.text_to_label("905")
    assert label.symbols == (10, 1, 6)
    assert cs.label_to_text(label) == "905"


def test_charset_file_roundtrip(tmp_path):
    cs = digits_charset()
    cs.save(tmp_path / "charset.txt")
    again = dk.Charset.load(tmp_path / "charset.txt")
    assert again == cs
    assert again.num_classes == 11


def test_charset_rejects_bad_input():
    with pytest.raises(ValueError):
        dk.Charset("0120")
    with pytest.raises(ValueError):
        dk.Charset([])
    with pytest.raises(ValueError, match="not in charset"):
        digits_charset().text_to_label("1a")


# ---------------------------------------------------------------------------
# recognition dataset


def test_gen_rec_deterministic():
    a = dk.gen_rec_dataset(digits_charset(), 10, (3, 5), seed=7, noise_level=0.05)
    b = dk.gen_rec_dataset(digits_charset(), 10, (3, 5), seed=7, noise_level=0.05)
    c = dk.gen_rec_dataset(digits_charset(), 10, (3, 5), seed=8, noise_level=0.05)
    for s, t in zip(a, b):
        np.testing.assert_array_equal(s.image, t.image)
        assert s.text == t.text
    assert any(not np.array_equal(s.image, t.image) for s, t in zip(a, c))


def test_gen_rec_shapes_and_quantization():
    samples = dk.gen_rec_dataset(digits_charset(), 20, (3, 5), seed=1, noise_level=0.1)
    for s in samples:
        assert s.image.shape == (16, 96)
        assert s.image.dtype == np.float32
        assert s.image.min() >= 0.0 and s.image.max() <= 1.0
        scaled = s.image.astype(np.float64) * 255.0
        np.testing.assert_allclose(scaled, np.round(scaled), atol=1e-3)
        assert 3 <= len(s.label.symbols) <= 5
        assert s.text == digits_charset().label_to_text(s.label)


def test_gen_rec_labels_feasible_for_twelve_steps():
    samples = dk.gen_rec_dataset(digits_charset(), 50, (3, 5), seed=2, noise_level=0.0)
    for s in samples:
        assert ctc_feasible(12, s.label)


def test_gen_rec_class_histogram_roughly_uniform():
    samples = dk.gen_rec_dataset(digits_charset(), 2000, (3, 5), seed=3, noise_level=0.0)
    counts = np.zeros(10)
    for s in samples:
        for ch in s.text:
            counts[int(ch)] += 1
    expected = counts.sum() / 10.0
    assert counts.min() >= 0.8 * expected
    assert counts.max() <= 1.2 * expected


def test_gen_rec_rejects_bad_args():
    with pytest.raises(ValueError):
        dk.gen_rec_dataset(digits_charset(), 0, (3, 5), seed=0, noise_level=0.0)
    with pytest.raises(ValueError):
        dk.gen_rec_dataset(digits_charset(), 1, (5, 3), seed=0, noise_level=0.0)


# ---------------------------------------------------------------------------
# detection target maps


def rect_targets_oracle(x0, y0, x1, y1, shape):
    """Independent closed-form maps for a single axis-aligned rectangle."""
    h, w = shape
    area = (x1 - x0) * (y1 - y0)
    perimeter = 2.0 * ((x1 - x0) + (y1 - y0))
    offset = area * (1.0 - 0.4 ** 2) / perimeter
    ys, xs = np.mgrid[0:h, 0:w]
    cx, cy = xs + 0.5, ys + 0.5

    def inside(a, b, c, d):
        return (cx > a) & (cx < c) & (cy > b) & (cy < d)

    shr = inside(x0 + offset, y0 + offset, x1 - offset, y1 - offset)
    exp = inside(x0 - offset, y0 - offset, x1 + offset, y1 + offset)
    dx = np.maximum(np.maximum(x0 - cx, cx - x1), 0.0)
    dy = np.maximum(np.maximum(y0 - cy, cy - y1), 0.0)
    d_out = np.hypot(dx, dy)
    d_in = np.minimum(np.minimum(cx - x0, x1 - cx), np.minimum(cy - y0, y1 - cy))
    dist = np.where(inside(x0, y0, x1, y1), d_in, d_out)
    band = exp & ~shr
    thresh = np.clip(1.0 - dist / offset, 0.0, 1.0) * band
    return (shr.astype(np.float32), thresh.astype(np.float32),
            band.astype(np.float32), offset)


def test_db_targets_rect_hand_values():
    # 16x8 rectangle: offset = 128 * 0.84 / 48 = 2.24 exactly
    gt = dk.make_db_targets([dk._rect_polygon(8, 4, 24, 12)], (20, 32))
    assert gt.skipped_degenerate == 0
    assert gt.prob_gt[8, 16] == 1.0          # center pixel, inside shrunk box
    assert gt.prob_gt[5, 16] == 0.0          # inside original, outside shrunk
    assert gt.thresh_mask[5, 16] == 1.0
    np.testing.assert_allclose(gt.thresh_gt[5, 16], 1.0 - 1.5 / 2.24, atol=1e-6)
    np.testing.assert_allclose(gt.thresh_gt[4, 16], 1.0 - 0.5 / 2.24, atol=1e-6)
    np.testing.assert_allclose(gt.thresh_gt[3, 16], 1.0 - 0.5 / 2.24, atol=1e-6)
    assert gt.thresh_mask[0, 16] == 0.0      # beyond the expanded box
    assert gt.thresh_gt[0, 16] == 0.0


def test_db_targets_match_rect_oracle():
    rects = [(8, 4, 24, 12), (3, 3, 19, 13), (10, 6, 22, 18)]
    for x0, y0, x1, y1 in rects:
        gt = dk.make_db_targets([dk._rect_polygon(x0, y0, x1, y1)], (24, 32))
        prob, thresh, mask, _ = rect_targets_oracle(x0, y0, x1, y1, (24, 32))
        np.testing.assert_array_equal(gt.prob_gt, prob)
        np.testing.assert_array_equal(gt.thresh_mask, mask)
        np.testing.assert_allclose(gt.thresh_gt, thresh, atol=1e-6)


def test_db_targets_text_region_inside_mask_hole():
    rng = np.random.default_rng(11)
    for _ in range(20):
        x0 = int(rng.integers(2, 10))
        y0 = int(rng.integers(2, 10))
        x1 = x0 + int(rng.integers(8, 20))
        y1 = y0 + int(rng.integers(6, 14))
        gt = dk.make_db_targets([dk._rect_polygon(x0, y0, x1, y1)], (28, 34))
        ink = gt.prob_gt == 1.0
        assert ink.any()
        assert np.all(gt.thresh_mask[ink] == 0.0)
        assert gt.thresh_gt.min() >= 0.0 and gt.thresh_gt.max() <= 1.0
        assert np.all(gt.thresh_gt[gt.thresh_mask == 0.0] == 0.0)


def test_db_targets_permutation_invariant():
    a = dk._rect_polygon(2, 2, 14, 8)
    b = dk._rect_polygon(18, 10, 30, 20)
    fwd = dk.make_db_targets([a, b], (24, 34))
    rev = dk.make_db_targets([b, a], (24, 34))
    np.testing.assert_array_equal(fwd.prob_gt, rev.prob_gt)
    np.testing.assert_array_equal(fwd.thresh_gt, rev.thresh_gt)
    np.testing.assert_array_equal(fwd.thresh_mask, rev.thresh_mask)


def test_db_targets_degenerate_skipped():
    line = [[4.0, 4.0], [9.0, 4.0], [9.0, 4.0], [4.0, 4.0]]  # zero area
    gt = dk.make_db_targets([line], (16, 16))
    assert gt.skipped_degenerate == 1
    assert gt.prob_gt.sum() == 0.0 and gt.thresh_mask.sum() == 0.0
    mixed = dk.make_db_targets([line, dk._rect_polygon(2, 2, 12, 10)], (16, 16))
    assert mixed.skipped_degenerate == 1
    assert mixed.prob_gt.sum() > 0.0


# ---------------------------------------------------------------------------
# detection dataset


def test_gen_det_instances_disjoint_and_cropped():
    samples = dk.gen_det_dataset(8, (1, 3), seed=5)
    for s in samples:
        assert s.image.shape == (48, 48, 1)
        assert 1 <= len(s.instances) <= 3
        boxes = [dk.polygon_aabb(i.polygon) for i in s.instances]
        for i in range(len(boxes)):
            for j in range(i + 1, len(boxes)):
                assert not dk.aabbs_overlap(boxes[i], boxes[j])
        for inst, (x0, y0, x1, y1) in zip(s.instances, boxes):
            crop = s.image[int(y0):int(y1), int(x0):int(x1), 0]
            np.testing.assert_array_equal(inst.patch, crop)
            assert inst.transcription
        assert s.targets.prob_gt.shape == (48, 48)


def test_gen_det_deterministic():
    a = dk.gen_det_dataset(4, (1, 2), seed=9)
    b = dk.gen_det_dataset(4, (1, 2), seed=9)
    for s, t in zip(a, b):
        np.testing.assert_array_equal(s.image, t.image)
        assert [i.polygon for i in s.instances] == [i.polygon for i in t.instances]


def test_gen_det_targets_regenerate_from_instances():
    s = dk.gen_det_dataset(1, (2, 2), seed=13)[0]
    again = dk.make_db_targets([i.polygon for i in s.instances], s.image.shape[:2])
    np.testing.assert_array_equal(s.targets.prob_gt, again.prob_gt)
    np.testing.assert_array_equal(s.targets.thresh_gt, again.thresh_gt)


# ---------------------------------------------------------------------------
# paste augmentation


def test_copy_paste_empty_donors_is_identity():
    base = dk.gen_det_dataset(1, (2, 2), seed=21)[0]
    rng = np.random.default_rng(0)
    out, stats = dk.copy_paste(base, [], rng)
    np.testing.assert_array_equal(out.image, base.image)
    assert len(out.instances) == len(base.instances)
    assert (stats.offered, stats.accepted, stats.skipped) == (0, 0, 0)


def test_copy_paste_accounting_and_disjointness():
    base = dk.gen_det_dataset(1, (1, 2), seed=31, img_size=(64, 64))[0]
    donors = [i for s in dk.gen_det_dataset(3, (2, 3), seed=32) for i in s.instances]
    rng = np.random.default_rng(5)
    out, stats = dk.copy_paste(base, donors, rng)
    assert stats.offered == len(donors)
    assert stats.accepted + stats.skipped == stats.offered
    assert len(out.instances) == len(base.instances) + stats.accepted
    boxes = [dk.polygon_aabb(i.polygon) for i in out.instances]
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            assert not dk.aabbs_overlap(boxes[i], boxes[j])


def test_copy_paste_leaves_outside_pixels_untouched():
    base = dk.gen_det_dataset(1, (1, 1), seed=41, img_size=(64, 64))[0]
    donors = [i for s in dk.gen_det_dataset(2, (1, 2), seed=42) for i in s.instances]
    rng = np.random.default_rng(6)
    out, stats = dk.copy_paste(base, donors, rng)
    changed_ok = np.zeros(base.image.shape[:2], dtype=bool)
    for inst in out.instances[len(base.instances):]:
        x0, y0, x1, y1 = dk.polygon_aabb(inst.polygon)
        changed_ok[int(np.floor(y0)):int(np.ceil(y1)) + 1,
                   int(np.floor(x0)):int(np.ceil(x1)) + 1] = True
    outside = ~changed_ok
    np.testing.assert_array_equal(out.image[outside], base.image[outside])


def test_copy_paste_covered_base_skips_everything():
    img = np.ones((32, 32, 1), dtype=np.float32)
    cover = dk.TextInstance(dk._rect_polygon(0, 0, 32, 32), "7",
                            np.ones((32, 32), dtype=np.float32))
    base = dk.DetSample(img, [cover], None)
    donor = dk.gen_det_dataset(1, (1, 1), seed=51)[0].instances[0]
    rng = np.random.default_rng(7)
    out, stats = dk.copy_paste(base, [donor], rng, max_attempts=10)
    assert (stats.offered, stats.accepted, stats.skipped) == (1, 0, 1)
    np.testing.assert_array_equal(out.image, img)


def test_copy_paste_deterministic():
    base = dk.gen_det_dataset(1, (1, 1), seed=61, img_size=(64, 64))[0]
    donors = [i for s in dk.gen_det_dataset(2, (1, 2), seed=62) for i in s.instances]
    a, sa = dk.copy_paste(base, donors, np.random.default_rng(9))
    b, sb = dk.copy_paste(base, donors, np.random.default_rng(9))
    np.testing.assert_array_equal(a.image, b.image)
    assert (sa.accepted, sa.skipped) == (sb.accepted, sb.skipped)


# ---------------------------------------------------------------------------
# disk round trips


def test_rec_dataset_disk_roundtrip(tmp_path):
    cs = digits_charset()
    samples = dk.gen_rec_dataset(cs, 6, (3, 5), seed=71, noise_level=0.05)
    dk.save_rec_dataset(samples, tmp_path / "rec", cs)
    loaded, cs2 = dk.load_rec_dataset(tmp_path / "rec")
    assert cs2 == cs
    assert len(loaded) == len(samples)
    for s, t in zip(samples, loaded):
        np.testing.assert_array_equal(s.image, t.image)
        assert s.text == t.text
        assert s.label == t.label


def test_det_dataset_disk_roundtrip(tmp_path):
    samples = dk.gen_det_dataset(4, (1, 2), seed=81)
    dk.save_det_dataset(samples, tmp_path / "det")
    loaded = dk.load_det_dataset(tmp_path / "det")
    assert len(loaded) == len(samples)
    for s, t in zip(samples, loaded):
        np.testing.assert_array_equal(s.image, t.image)
        assert [i.polygon for i in s.instances] == [i.polygon for i in t.instances]
        assert [i.transcription for i in s.instances] == \
            [i.transcription for i in t.instances]
        np.testing.assert_array_equal(s.targets.prob_gt, t.targets.prob_gt)
        np.testing.assert_array_equal(s.targets.thresh_gt, t.targets.thresh_gt)


def test_malformed_jsonl_names_line(tmp_path):
    root = tmp_path / "rec"
    (root / "images").mkdir(parents=True)
    dk.Charset("01").save(root / "charset.txt")
    good = json.dumps({"image": "images/rec_00000.png", "text": "0"})
    dk._save_png(root / "images/rec_00000.png", np.zeros((16, 96), dtype=np.float32))
    (root / "annotations.jsonl").write_text(good + "\n{bad json\n", encoding="utf-8")
    with pytest.raises(ValueError, match="line 2"):
        dk.load_rec_dataset(root)
    (root / "annotations.jsonl").write_text(
        good + "\n" + json.dumps({"image": "images/rec_00000.png"}) + "\n",
        encoding="utf-8")
    with pytest.raises(ValueError, match="line 2"):
        dk.load_rec_dataset(root)


def test_save_refuses_silent_overwrite(tmp_path):
    cs = digits_charset()
    samples = dk.gen_rec_dataset(cs, 2, (3, 3), seed=91, noise_level=0.0)
    dk.save_rec_dataset(samples, tmp_path / "d", cs)
    with pytest.raises(FileExistsError):
        dk.save_rec_dataset(samples, tmp_path / "d", cs)
    dk.save_rec_dataset(samples, tmp_path / "d", cs, overwrite=True)
