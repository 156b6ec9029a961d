"""Decoding and metrics: greedy decode, sentence accuracy, box extraction, Hmean.

Detection matching is greedy in descending prediction score with one-to-one
assignment at an IoU threshold (default 0.5). The degenerate conventions are
fixed: empty predictions against empty ground truth score 1.0 across the
board; empty predictions against nonempty ground truth score 0.0.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import asdict, dataclass

import numpy as np

from .losses import SeqLabel, collapse_path


@dataclass(frozen=True)
class DetBox:
    x0: float
    y0: float
    x1: float
    y1: float
    score: float

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"degenerate box {(self.x0, self.y0, self.x1, self.y1)}")

    @property
    def area(self):
        return (self.x1 - self.x0) * (self.y1 - self.y0)


@dataclass
class EvalReport:
    """Metric bundle; unset metrics stay None and are omitted from the JSON."""

    matched: int
    pred: int
    gt: int
    precision: float = None
    recall: float = None
    hmean: float = None
    sentence_accuracy: float = None

    def to_json(self):
        data = {k: v for k, v in asdict(self).items() if v is not None}
        return json.dumps(data, sort_keys=True)


def _as_array(x):
    return np.asarray(getattr(x, "data", x))


def greedy_decode(logits):
    """Per-timestep argmax collapsed to a label (repeats merged, blanks dropped)."""
    z = _as_array(logits)
    if z.ndim != 2 or z.shape[1] < 2:
        raise ValueError(f"expected (T, C) logits with C >= 2, got shape {z.shape}")
    path = tuple(int(k) for k in np.argmax(z, axis=1))
    return SeqLabel(collapse_path(path))


def sentence_accuracy(preds, gts):
    """Fraction of exact full-sequence matches."""
    if len(preds) != len(gts):
        raise ValueError(f"got {len(preds)} predictions for {len(gts)} references")
    if not gts:
        return 1.0
    return sum(p == g for p, g in zip(preds, gts)) / len(gts)


def recognition_report(preds, gts):
    matched = sum(p == g for p, g in zip(preds, gts)) if len(preds) == len(gts) else None
    return EvalReport(matched=matched, pred=len(preds), gt=len(gts),
                      sentence_accuracy=sentence_accuracy(preds, gts))


def boxes_from_probmap(prob, bin_thresh=0.3, min_area=4):
    """Binarize, label 4-connected components, return per-component AABBs.

    Component score is the mean probability over its pixels. Components
    smaller than min_area pixels are dropped. Boxes use exclusive upper
    bounds, scan order is deterministic (top-left first).
    """
    if not 0.0 < bin_thresh < 1.0:
        raise ValueError(f"bin_thresh must be in (0,1), got {bin_thresh}")
    p = _as_array(prob).astype(np.float64)
    if p.ndim != 2:
        raise ValueError(f"expected a 2-D probability map, got shape {p.shape}")
    on = p > bin_thresh
    h, w = on.shape
    seen = np.zeros((h, w), dtype=bool)
    boxes = []
    for sy, sx in zip(*np.nonzero(on)):
        if seen[sy, sx]:
            continue
        seen[sy, sx] = True
        queue = deque([(int(sy), int(sx))])
        ys, xs, total = [], [], 0.0
        while queue:
            y, x = queue.popleft()
            ys.append(y)
            xs.append(x)
            total += p[y, x]
            for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                if 0 <= ny < h and 0 <= nx < w and on[ny, nx] and not seen[ny, nx]:
                    seen[ny, nx] = True
                    queue.append((ny, nx))
        if len(ys) < min_area:
            continue
        boxes.append(DetBox(float(min(xs)), float(min(ys)),
                            float(max(xs) + 1), float(max(ys) + 1),
                            score=total / len(ys)))
    return boxes


def unclip_box(box, ratio=1.7, bounds=None):
    """Expand a detected score-region box back toward full region extent.

    The score map marks an inward-offset core of each region, so detected
    boxes are grown on all sides by ratio * area / perimeter before they are
    compared against full-extent annotations. bounds, when given as (h, w),
    clips the result to the map rectangle.
    """
    if ratio < 0.0:
        raise ValueError(f"ratio must be >= 0, got {ratio}")
    w = box.x1 - box.x0
    h = box.y1 - box.y0
    d = ratio * (w * h) / (2.0 * (w + h))
    x0, y0 = box.x0 - d, box.y0 - d
    x1, y1 = box.x1 + d, box.y1 + d
    if bounds is not None:
        bh, bw = bounds
        x0, y0 = max(x0, 0.0), max(y0, 0.0)
        x1, y1 = min(x1, float(bw)), min(y1, float(bh))
    return DetBox(x0, y0, x1, y1, score=box.score)


def box_iou(a, b):
    ix = min(a.x1, b.x1) - max(a.x0, b.x0)
    iy = min(a.y1, b.y1) - max(a.y0, b.y0)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union if union > 0.0 else 0.0


def det_hmean(pred, gt, iou_thresh=0.5):
    """Greedy score-descending one-to-one matching at the IoU threshold."""
    if not 0.0 < iou_thresh <= 1.0:
        raise ValueError(f"iou_thresh must be in (0,1], got {iou_thresh}")
    order = sorted(range(len(pred)), key=lambda i: -pred[i].score)
    taken = [False] * len(gt)
    matched = 0
    for i in order:
        best_j, best_iou = -1, 0.0
        for j, g in enumerate(gt):
            if taken[j]:
                continue
            iou = box_iou(pred[i], g)
            if iou >= iou_thresh and iou > best_iou:
                best_j, best_iou = j, iou
        if best_j >= 0:
            taken[best_j] = True
            matched += 1
    return report_from_counts(matched, len(pred), len(gt))


def report_from_counts(matched, pred, gt):
    """Precision/recall/hmean from match counts, degenerate conventions included."""
    if pred == 0 and gt == 0:
        precision = recall = hmean = 1.0
    else:
        precision = matched / pred if pred else 0.0
        recall = matched / gt if gt else 1.0
        total = precision + recall
        hmean = 2.0 * precision * recall / total if total > 0.0 else 0.0
    return EvalReport(matched=matched, pred=pred, gt=gt,
                      precision=precision, recall=recall, hmean=hmean)
