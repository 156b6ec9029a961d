"""Training losses for sequence recognition and map-based text detection.

Covers the alignment-free sequence loss (with an exhaustive path-sum
oracle), symmetric KL mutual-learning loss, feature L2, center loss with
greedy alignment, the three-map detection ground-truth loss, the dilated
soft-target distillation loss, and the combined totals used by the two
joint-training schemes.

All losses are pure functions of their inputs and differentiable through
the tensor tape except where a contract says otherwise (teacher inputs,
center vectors, argmax assignments).
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor, ShapeError

log = logging.getLogger(__name__)

BLANK = 0

KL_EPS = 1e-10
BCE_EPS = 1e-7
DICE_SMOOTH = 1e-6


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class SeqLabel:
    """Class-index sequence; index 0 is the reserved blank and never appears."""

    symbols: tuple

    blank_index = BLANK

    def __post_init__(self):
        syms = tuple(int(s) for s in self.symbols)
        object.__setattr__(self, "symbols", syms)
        if any(s == BLANK for s in syms):
            raise ValueError(f"label contains the blank index {BLANK}: {syms}")
        if any(s < 0 for s in syms):
            raise ValueError(f"negative class index in label: {syms}")

    def __len__(self):
        return len(self.symbols)


@dataclass
class CenterBank:
    """Per-class center vectors c_y plus the interpolation momentum."""

    centers: Tensor  # (num_classes, feature_dim), never receives gradients
    momentum: float

    @classmethod
    def zeros(cls, num_classes, feature_dim, momentum=0.1, dtype=np.float32):
        return cls(Tensor(np.zeros((num_classes, feature_dim), dtype=dtype)), momentum)

    @property
    def num_classes(self):
        return self.centers.shape[0]


@dataclass
class DetGroundTruth:
    """Supervision maps for one detection sample.

    prob_gt is binary (1 inside shrunk text regions); thresh_gt ramps over
    the border band; thresh_mask marks where the threshold term applies.
    """

    prob_gt: np.ndarray
    thresh_gt: np.ndarray
    thresh_mask: np.ndarray
    skipped_degenerate: int = field(default=0, compare=False)


# ---------------------------------------------------------------------------
# sequence loss


def collapse_path(path, blank=BLANK):
    """Collapse an emission path: merge consecutive repeats, then drop blanks."""
    out = []
    prev = None
    for p in path:
        if p != prev:
            if p != blank:
                out.append(int(p))
            prev = p
    return tuple(out)


def _lse(arr, axis):
    """log(sum(exp(arr))) along axis; tolerates all -inf slices."""
    m = np.max(arr, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return np.log(np.exp(arr - m).sum(axis=axis)) + np.squeeze(m, axis=axis)


def ctc_feasible(num_steps, label):
    """True when a length-num_steps path can collapse to the label."""
    syms = label.symbols
    repeats = sum(1 for i in range(len(syms) - 1) if syms[i] == syms[i + 1])
    return num_steps >= len(syms) + repeats


def ctc_loss(log_probs, label):
    """-log P(label | per-step log-probabilities), alignment-free.

    Forward-backward recursion over the blank-extended label in log space;
    the gradient flows to log_probs. An infeasible pairing (too few steps
    for the label plus its repeat separators) yields +inf with zero
    gradient — a reportable condition, not an error.
    """
    log_probs = T.as_tensor(log_probs)
    if log_probs.ndim != 2:
        raise ShapeError(f"expected (steps, classes) log-probs, got {log_probs.shape}")
    steps, classes = log_probs.shape
    if len(label) < 1:
        raise ValueError("supervised label must contain at least one symbol")
    if max(label.symbols) >= classes:
        raise ValueError(f"label symbol {max(label.symbols)} out of range for {classes} classes")
    dtype = log_probs.data.dtype
    if not ctc_feasible(steps, label):
        return Tensor(np.asarray(np.inf, dtype=dtype))

    z = log_probs.data.astype(np.float64)
    ext = np.zeros(2 * len(label) + 1, dtype=np.int64)
    ext[1::2] = label.symbols
    S = ext.size
    # s-2 jump allowed only onto a symbol that differs from the one two back
    skip = np.zeros(S, dtype=bool)
    skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])

    neg_inf = np.float64(-np.inf)
    alpha = np.full((steps, S), neg_inf)
    alpha[0, 0] = z[0, ext[0]]
    alpha[0, 1] = z[0, ext[1]]
    for t in range(1, steps):
        prev = alpha[t - 1]
        stay = prev
        step1 = np.concatenate(([neg_inf], prev[:-1]))
        step2 = np.where(skip, np.concatenate(([neg_inf, neg_inf], prev[:-2])), neg_inf)
        alpha[t] = z[t, ext] + _lse(np.stack([stay, step1, step2]), axis=0)

    log_p = float(_lse(alpha[-1, -2:], axis=0))
    if not np.isfinite(log_p):
        return Tensor(np.asarray(np.inf, dtype=dtype))

    beta = np.full((steps, S), neg_inf)
    beta[-1, -1] = z[-1, ext[-1]]
    beta[-1, -2] = z[-1, ext[-2]]
    for t in range(steps - 2, -1, -1):
        nxt = beta[t + 1]
        stay = nxt
        step1 = np.concatenate((nxt[1:], [neg_inf]))
        # jumping s -> s+2 is legal exactly when skip[s+2]
        jump_ok = np.concatenate((skip[2:], [False, False]))
        step2 = np.where(jump_ok, np.concatenate((nxt[2:], [neg_inf, neg_inf])), neg_inf)
        beta[t] = z[t, ext] + _lse(np.stack([stay, step1, step2]), axis=0)

    ab = alpha + beta
    grad = np.zeros_like(z)
    with np.errstate(divide="ignore", invalid="ignore"):
        for k in np.unique(ext):
            lse_k = _lse(ab[:, ext == k], axis=1)
            # unreachable positions (lse -inf) and zero-prob emissions both
            # contribute nothing; inf - inf artifacts are masked out
            contrib = lse_k - log_p - z[:, k]
            grad[:, k] = -np.exp(contrib, where=np.isfinite(contrib), out=np.zeros(steps))

    grad = grad.astype(dtype, copy=False)

    def bwd(g):
        return (g * grad,)

    return T._make_output(np.asarray(-log_p, dtype=dtype), (log_probs,), bwd)


def ctc_brute_force(probs, label):
    """Exhaustive oracle: sum probability over every path that collapses to label.

    probs are plain per-step probabilities (steps x classes). Refuses
    instances with more than 10^7 paths.
    """
    p = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    steps, classes = p.shape
    if classes ** steps > 10 ** 7:
        raise ValueError(f"path count {classes}**{steps} exceeds the 1e7 oracle bound")
    target = label.symbols
    total = 0.0
    for path in itertools.product(range(classes), repeat=steps):
        if collapse_path(path) == target:
            prob = 1.0
            for t, k in enumerate(path):
                prob *= p[t, k]
            total += prob
    if total <= 0.0:
        return float(np.inf)
    return float(-np.log(total))


# ---------------------------------------------------------------------------
# mutual-learning losses


def kl_div(p, q):
    """KL(p || q) summed over the last axis, averaged over all leading axes.

    Both arguments must be distributions along the last axis; the
    denominator side is floored at 1e-10 to survive saturated outputs.
    """
    p, q = T.as_tensor(p), T.as_tensor(q)
    if p.shape != q.shape:
        raise ShapeError(f"distribution shapes differ: {p.shape} vs {q.shape}")
    for name, t in (("p", p), ("q", q)):
        sums = t.data.sum(axis=-1)
        if not np.allclose(sums, 1.0, atol=1e-5):
            raise ValueError(f"{name} is not normalized along the last axis (sum range "
                             f"[{sums.min():.6f}, {sums.max():.6f}])")
    lp = T.log(T.clamp(p, lo=KL_EPS))
    lq = T.log(T.clamp(q, lo=KL_EPS))
    per_dist = T.sum_(T.mul(p, T.sub(lp, lq)), axis=-1)
    return T.mean_(per_dist)


def dml_loss(a_logits, b_logits):
    """Symmetric mutual-learning divergence between two logit tensors.

    (KL(softmax a || softmax b) + KL(softmax b || softmax a)) / 2; the
    gradient flows to both inputs so one combined step updates both peers.
    """
    a, b = T.as_tensor(a_logits), T.as_tensor(b_logits)
    if a.shape != b.shape:
        raise ShapeError(f"logit shapes differ: {a.shape} vs {b.shape}")
    sa = T.softmax(a, axis=-1)
    sb = T.softmax(b, axis=-1)
    return T.mul(T.add(kl_div(sa, sb), kl_div(sb, sa)), 0.5)


def feature_loss(s_feat, t_feat):
    """Mean squared elementwise difference between two same-shape feature maps."""
    s, t = T.as_tensor(s_feat), T.as_tensor(t_feat)
    if s.shape != t.shape:
        raise ShapeError(f"feature shapes differ: {s.shape} vs {t.shape}")
    d = T.sub(s, t)
    return T.mean_(T.mul(d, d))


# ---------------------------------------------------------------------------
# center loss


def center_assignments(head_logits):
    """Greedy per-step class assignment: argmax over the class axis."""
    data = head_logits.data if isinstance(head_logits, Tensor) else np.asarray(head_logits)
    return np.argmax(data, axis=-1)


def center_loss(features, head_logits, bank):
    """Mean squared distance from each step's features to its class center.

    Assignment y_t = argmax of the head logits row (greedy decode); the
    gradient reaches the features only — centers move via update_centers.
    """
    features = T.as_tensor(features)
    if features.ndim != 2:
        raise ShapeError(f"expected (steps, dim) features, got {features.shape}")
    assign = center_assignments(head_logits)
    if assign.shape[0] != features.shape[0]:
        raise ShapeError(
            f"features rows {features.shape[0]} != logits rows {assign.shape[0]}")
    gathered = Tensor(bank.centers.data[assign].astype(features.data.dtype, copy=False))
    d = T.sub(features, gathered)
    return T.mul(T.sum_(T.mul(d, d)), 1.0 / features.shape[0])


def update_centers(bank, features, assignments):
    """Pull each assigned class center toward the mean of its assigned features.

    c_y <- c_y - momentum * (c_y - mean of features assigned to y);
    unassigned classes are untouched. Mutates and returns the bank.
    """
    feats = features.data if isinstance(features, Tensor) else np.asarray(features)
    assignments = np.asarray(assignments)
    centers = bank.centers.data
    for y in np.unique(assignments):
        mean_y = feats[assignments == y].mean(axis=0)
        centers[y] -= bank.momentum * (centers[y] - mean_y)
    if not np.all(np.isfinite(centers)):
        raise FloatingPointError("non-finite center after update")
    return bank


def enhanced_ctc(log_probs, label, features, head_logits, bank, lam=0.05):
    """Sequence loss plus lam times the center loss; lam=0 is exactly the plain loss."""
    if lam < 0:
        raise ValueError("lam must be >= 0")
    ctc = ctc_loss(log_probs, label)
    if lam == 0:
        return ctc
    return T.add(ctc, T.mul(center_loss(features, head_logits, bank), lam))


# ---------------------------------------------------------------------------
# detection map losses


def _as_const(x, dtype):
    """Ground-truth/teacher maps enter losses as gradient-free constants."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    return Tensor(data.astype(dtype, copy=False))


def bce_loss(pred, target):
    """Mean binary cross-entropy; predictions clamped to [1e-7, 1-1e-7]."""
    pred = T.as_tensor(pred)
    tgt = _as_const(target, pred.data.dtype)
    if pred.shape != tgt.shape:
        raise ShapeError(f"map shapes differ: {pred.shape} vs {tgt.shape}")
    p = T.clamp(pred, lo=BCE_EPS, hi=1.0 - BCE_EPS)
    pos = T.mul(tgt, T.log(p))
    neg = T.mul(T.sub(1.0, tgt), T.log(T.sub(1.0, p)))
    return T.neg(T.mean_(T.add(pos, neg)))


def dice_loss(pred, target):
    """1 - 2*sum(p*g) / (sum(p) + sum(g) + 1e-6); zero when maps coincide."""
    pred = T.as_tensor(pred)
    tgt = _as_const(target, pred.data.dtype)
    if pred.shape != tgt.shape:
        raise ShapeError(f"map shapes differ: {pred.shape} vs {tgt.shape}")
    inter = T.sum_(T.mul(pred, tgt))
    den = T.add(T.add(T.sum_(pred), T.sum_(tgt)), DICE_SMOOTH)
    return T.sub(1.0, T.div(T.mul(inter, 2.0), den))


def masked_l1(pred, target, mask):
    """Mean absolute error over the mask; an empty mask contributes zero."""
    pred = T.as_tensor(pred)
    tgt = _as_const(target, pred.data.dtype)
    msk = _as_const(mask, pred.data.dtype)
    if not (pred.shape == tgt.shape == msk.shape):
        raise ShapeError(
            f"map shapes differ: {pred.shape} vs {tgt.shape} vs {msk.shape}")
    denom = float(msk.data.sum())
    if denom == 0.0:
        log.debug("masked_l1: empty mask, term contributes 0")
        return Tensor(np.asarray(0.0, dtype=pred.data.dtype))
    err = T.mul(T.abs_(T.sub(pred, tgt)), msk)
    return T.mul(T.sum_(err), 1.0 / denom)


def db_gt_components(pred, gt):
    """The three supervised map losses: (bce on prob, dice on binary, masked L1 on thresh)."""
    lp = bce_loss(pred.prob, gt.prob_gt)
    lb = dice_loss(pred.binary, gt.prob_gt)
    lt = masked_l1(pred.thresh, gt.thresh_gt, gt.thresh_mask)
    return lp, lb, lt


def db_gt_loss(pred, gt, alpha=5.0, beta=10.0):
    """Three-map detection loss: bce + alpha*dice + beta*masked-L1."""
    if alpha <= 0 or beta <= 0:
        raise ValueError("alpha and beta must be positive")
    lp, lb, lt = db_gt_components(pred, gt)
    return T.add(T.add(lp, T.mul(lb, alpha)), T.mul(lt, beta))


def _dilate_array(a):
    ap = np.pad(a, ((0, 1), (0, 1)), mode="edge")
    h, w = a.shape
    return np.maximum.reduce([
        ap[:h, :w], ap[:h, 1:w + 1], ap[1:h + 1, :w], ap[1:h + 1, 1:w + 1],
    ])


def dilate2x2(m):
    """Grayscale dilation with an all-ones 2x2 kernel, top-left anchored.

    out[i,j] = max over the window rows i..i+1, cols j..j+1, clamped at
    the edges, so the output keeps the input's shape and out >= in holds
    everywhere. Ties in the backward pass route to the first cell in
    (i,j), (i,j+1), (i+1,j), (i+1,j+1) order.
    """
    m = T.as_tensor(m)
    if m.ndim != 2:
        raise ShapeError(f"expected an HxW map, got {m.shape}")
    a = m.data
    h, w = a.shape
    ap = np.pad(a, ((0, 1), (0, 1)), mode="edge")
    views = (ap[:h, :w], ap[:h, 1:w + 1], ap[1:h + 1, :w], ap[1:h + 1, 1:w + 1])
    out = np.maximum.reduce(views)

    def bwd(g):
        gp = np.zeros((h + 1, w + 1), dtype=g.dtype)
        claimed = np.zeros((h, w), dtype=bool)
        slices = ((slice(0, h), slice(0, w)), (slice(0, h), slice(1, w + 1)),
                  (slice(1, h + 1), slice(0, w)), (slice(1, h + 1), slice(1, w + 1)))
        for view, sl in zip(views, slices):
            winner = (view == out) & ~claimed
            claimed |= winner
            gp[sl] += np.where(winner, g, 0.0)
        ga = gp[:h, :w].copy()
        ga[:, w - 1] += gp[:h, w]
        ga[h - 1, :] += gp[h, :w]
        return (ga,)

    return T._make_output(out, (m,), bwd)


def distill_loss(student, teacher_prob, gamma=5.0):
    """Soft supervision of a student's maps by the dilated teacher probability map.

    gamma * bce(student.prob, dilated) + dice(student.binary, dilated).
    The teacher map enters as a constant: no gradient ever reaches it.
    """
    t = teacher_prob.data if isinstance(teacher_prob, Tensor) else np.asarray(teacher_prob)
    if student.prob.shape != t.shape:
        raise ShapeError(f"map shapes differ: {student.prob.shape} vs {t.shape}")
    dilated = _dilate_array(t)
    return T.add(T.mul(bce_loss(student.prob, dilated), gamma),
                 dice_loss(student.binary, dilated))


def dml_map_loss(p_map, q_map):
    """Symmetric per-pixel binary divergence between two probability maps.

    Every pixel value v is read as the two-way distribution (v, 1-v); the
    two directed KL terms are averaged and the result is the mean over
    pixels. Exactly zero when the maps coincide. Values are clamped to
    [1e-7, 1-1e-7] before the logs.
    """
    p = T.clamp(T.as_tensor(p_map), BCE_EPS, 1.0 - BCE_EPS)
    q = T.clamp(T.as_tensor(q_map), BCE_EPS, 1.0 - BCE_EPS)
    if p.shape != q.shape:
        raise ShapeError(f"map shapes differ: {p.shape} vs {q.shape}")
    one = _as_const(1.0, p.data.dtype)
    rp = T.sub(one, p)
    rq = T.sub(one, q)

    def directed(a, ra, b, rb):
        on = T.mul(a, T.sub(T.log(a), T.log(b)))
        off = T.mul(ra, T.sub(T.log(ra), T.log(rb)))
        return T.mean_(T.add(on, off))

    return T.mul(T.add(directed(p, rp, q, rq), directed(q, rq, p, rp)), 0.5)


# ---------------------------------------------------------------------------
# combined totals


def cml_total(gt_losses, dml, distill_losses):
    """Two-student total: (gt1 + gt2) + shared dml + (distill1 + distill2)."""
    g = T.add(T.as_tensor(gt_losses[0]), T.as_tensor(gt_losses[1]))
    d = T.add(T.as_tensor(distill_losses[0]), T.as_tensor(distill_losses[1]))
    return T.add(T.add(g, T.as_tensor(dml)), d)


def udml_total(ctc, dml, feat):
    """Mutual-learning total: ctc (already summed over both peers) + dml + feat."""
    return T.add(T.add(T.as_tensor(ctc), T.as_tensor(dml)), T.as_tensor(feat))
