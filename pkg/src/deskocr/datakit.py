"""Synthetic dataset generation, detection target maps, and paste augmentation.

Text is rendered from a fixed 3x5 bitmap glyph font, which keeps every
sample reproducible from (config, seed) alone. Recognition samples are
single-line grayscale strips; detection samples are square scenes with
non-overlapping text blocks plus the three supervision maps.

On-disk format: a directory of 8-bit PNG images, one `annotations.jsonl`
row per image, and a `charset.txt` with one symbol per line (line number
+ 1 is the class index; 0 is the reserved blank). Pixel values are
quantized to the 8-bit grid at generation time so the disk round trip is
bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path as FsPath

import numpy as np
from matplotlib.path import Path as GeomPath
from PIL import Image

from .losses import DetGroundTruth, SeqLabel

SHRINK_RATIO = 0.4
ROTATE_MAX_DEG = 10.0

# 3x5 pixel glyphs, row-major, 1 = ink
GLYPHS = {
    "0": ("111", "101", "101", "101", "111"),
    "1": ("010", "110", "010", "010", "111"),
    "2": ("111", "001", "111", "100", "111"),
    "3": ("111", "001", "111", "001", "111"),
    "4": ("101", "101", "111", "001", "001"),
    "5": ("111", "100", "111", "001", "111"),
    "6": ("111", "100", "111", "101", "111"),
    "7": ("111", "001", "010", "010", "010"),
    "8": ("111", "101", "111", "101", "111"),
    "9": ("111", "101", "111", "001", "111"),
}

GLYPH_H, GLYPH_W = 5, 3


class Charset:
    """Symbol table mapping text to class indices (blank reserved at 0)."""

    def __init__(self, symbols):
        symbols = list(symbols)
        if not symbols:
            raise ValueError("charset must contain at least one symbol")
        if len(set(symbols)) != len(symbols):
            raise ValueError("charset contains duplicate symbols")
        for s in symbols:
            if len(s) != 1:
                raise ValueError(f"charset symbols must be single characters, got {s!r}")
        self.symbols = symbols
        self._index = {s: i + 1 for i, s in enumerate(symbols)}

    def __len__(self):
        return len(self.symbols)

    def __eq__(self, other):
        return isinstance(other, Charset) and self.symbols == other.symbols

    @property
    def num_classes(self):
        """Class count including the blank."""
        return len(self.symbols) + 1

    def text_to_label(self, text):
        try:
            return SeqLabel(tuple(self._index[ch] for ch in text))
        except KeyError as exc:
            raise ValueError(f"character {exc.args[0]!r} not in charset") from None

    def label_to_text(self, label):
        out = []
        for idx in label.symbols:
            if not 1 <= idx <= len(self.symbols):
                raise ValueError(f"class index {idx} outside charset range")
            out.append(self.symbols[idx - 1])
        return "".join(out)

    def save(self, path):
        FsPath(path).write_text("".join(s + "\n" for s in self.symbols), encoding="utf-8")

    @classmethod
    def load(cls, path):
        lines = FsPath(path).read_text(encoding="utf-8").splitlines()
        return cls(lines)


@dataclass
class RecSample:
    image: np.ndarray  # (h, w) float32 in [0,1]
    label: SeqLabel
    text: str


@dataclass
class TextInstance:
    polygon: list  # >= 4 (x, y) points, pixel coordinates
    transcription: str
    patch: np.ndarray  # crop of the polygon's bounding box


@dataclass
class DetSample:
    image: np.ndarray  # (H, W, 1) float32 in [0,1]
    instances: list
    targets: DetGroundTruth = field(default=None)


# ---------------------------------------------------------------------------
# rendering


def render_text(text, scale=1, gap=1, ink=1.0):
    """Rasterize a string with the bitmap font; returns (h, w) float32."""
    if not text:
        raise ValueError("cannot render empty text")
    glyph_w = GLYPH_W * scale
    advance = glyph_w + gap * scale
    width = advance * len(text) - gap * scale
    height = GLYPH_H * scale
    out = np.zeros((height, width), dtype=np.float32)
    for i, ch in enumerate(text):
        try:
            rows = GLYPHS[ch]
        except KeyError:
            raise ValueError(f"no glyph for character {ch!r}") from None
        bitmap = np.array([[c == "1" for c in row] for row in rows], dtype=np.float32)
        big = bitmap.repeat(scale, axis=0).repeat(scale, axis=1)
        x = i * advance
        out[:, x:x + glyph_w] = big * ink
    return out


def quantize(img):
    """Snap to the 8-bit grid so in-memory values equal the PNG round trip."""
    return (np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


# ---------------------------------------------------------------------------
# recognition data


def gen_rec_dataset(charset, count, length_range, seed, noise_level,
                    img_h=16, img_w=96):
    """Random digit-string strips: glyphs at scale 2, jittered placement, noise."""
    if count < 1:
        raise ValueError("count must be >= 1")
    lo, hi = length_range
    if lo < 1 or hi < lo:
        raise ValueError(f"bad length range {length_range}")
    rng = np.random.default_rng(seed)
    scale = 2
    # glyph advance of 16px = two output columns of the bundled recognizer,
    # leaving room for the separator between repeated characters
    gap = 5
    samples = []
    for _ in range(count):
        n = int(rng.integers(lo, hi + 1))
        text = "".join(charset.symbols[i] for i in rng.integers(0, len(charset), size=n))
        ink = float(rng.uniform(0.7, 1.0))
        patch = render_text(text, scale=scale, gap=gap, ink=ink)
        ph, pw = patch.shape
        if ph > img_h or pw > img_w:
            raise ValueError(f"text {text!r} does not fit a {img_h}x{img_w} canvas")
        img = np.zeros((img_h, img_w), dtype=np.float32)
        x = int(rng.integers(0, img_w - pw + 1))
        y = int(rng.integers(0, img_h - ph + 1))
        img[y:y + ph, x:x + pw] = patch
        if noise_level > 0:
            img = img + noise_level * rng.normal(size=img.shape).astype(np.float32)
        samples.append(RecSample(quantize(img), charset.text_to_label(text), text))
    return samples


# ---------------------------------------------------------------------------
# geometry helpers


def polygon_aabb(points):
    pts = np.asarray(points, dtype=np.float64)
    return float(pts[:, 0].min()), float(pts[:, 1].min()), \
        float(pts[:, 0].max()), float(pts[:, 1].max())


def aabbs_overlap(a, b):
    """Strict interior overlap; shared edges do not count."""
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


def polygon_area_perimeter(points):
    pts = np.asarray(points, dtype=np.float64)
    x, y = pts[:, 0], pts[:, 1]
    x2, y2 = np.roll(x, -1), np.roll(y, -1)
    area = 0.5 * abs(np.dot(x, y2) - np.dot(x2, y))
    perimeter = float(np.hypot(x2 - x, y2 - y).sum())
    return float(area), perimeter


def _scale_about_centroid(points, sx, sy):
    pts = np.asarray(points, dtype=np.float64)
    c = pts.mean(axis=0)
    return (pts - c) * np.array([sx, sy]) + c


def _pixel_centers(h, w):
    ys, xs = np.mgrid[0:h, 0:w]
    return np.stack([xs + 0.5, ys + 0.5], axis=-1).reshape(-1, 2)


def _inside(points_hw, polygon):
    h, w = points_hw
    mask = GeomPath(np.asarray(polygon, dtype=np.float64)).contains_points(
        _pixel_centers(h, w))
    return mask.reshape(h, w)


def _distance_to_boundary(h, w, polygon):
    """Min distance from every pixel center to the polygon outline."""
    pts = _pixel_centers(h, w)
    poly = np.asarray(polygon, dtype=np.float64)
    best = np.full(pts.shape[0], np.inf)
    for i in range(len(poly)):
        a, b = poly[i], poly[(i + 1) % len(poly)]
        ab = b - a
        denom = float(ab @ ab)
        if denom == 0.0:
            d = np.hypot(*(pts - a).T)
        else:
            t = np.clip(((pts - a) @ ab) / denom, 0.0, 1.0)
            proj = a + t[:, None] * ab
            d = np.hypot(*(pts - proj).T)
        best = np.minimum(best, d)
    return best.reshape(h, w)


def make_db_targets(polygons, image_shape):
    """Shrunk-region probability map, border-band threshold ramp, and band mask.

    Each polygon is offset inward/outward by D = area * (1 - r^2) / perimeter
    (r = 0.4), realized as per-axis scaling about the centroid — exact for
    axis-aligned rectangles. The threshold map peaks at 1 on the original
    outline and decays linearly to 0 at distance D on both sides.
    """
    h, w = image_shape[:2]
    prob = np.zeros((h, w), dtype=np.float32)
    thresh = np.zeros((h, w), dtype=np.float32)
    in_shrunk_any = np.zeros((h, w), dtype=bool)
    in_expanded_any = np.zeros((h, w), dtype=bool)
    skipped = 0
    for poly in polygons:
        area, perimeter = polygon_area_perimeter(poly)
        if area <= 0.0 or perimeter <= 0.0:
            skipped += 1
            continue
        offset = area * (1.0 - SHRINK_RATIO ** 2) / perimeter
        x0, y0, x1, y1 = polygon_aabb(poly)
        bw, bh = x1 - x0, y1 - y0
        shrunk = _scale_about_centroid(poly, max(0.05, 1 - 2 * offset / bw),
                                       max(0.05, 1 - 2 * offset / bh))
        expanded = _scale_about_centroid(poly, 1 + 2 * offset / bw, 1 + 2 * offset / bh)
        in_shr = _inside((h, w), shrunk)
        in_exp = _inside((h, w), expanded)
        in_shrunk_any |= in_shr
        in_expanded_any |= in_exp
        band = in_exp & ~in_shr
        if band.any():
            ramp = np.clip(1.0 - _distance_to_boundary(h, w, poly) / offset, 0.0, 1.0)
            thresh = np.maximum(thresh, np.where(band, ramp, 0.0).astype(np.float32))
    prob[in_shrunk_any] = 1.0
    mask = (in_expanded_any & ~in_shrunk_any).astype(np.float32)
    thresh *= mask
    return DetGroundTruth(prob, thresh, mask, skipped_degenerate=skipped)


# ---------------------------------------------------------------------------
# detection data


def _rect_polygon(x0, y0, x1, y1):
    return [[float(x0), float(y0)], [float(x1), float(y0)],
            [float(x1), float(y1)], [float(x0), float(y1)]]


def gen_det_dataset(count, instances_per_image_range, seed, img_size=(48, 48)):
    """Square scenes with non-overlapping rendered text blocks plus targets."""
    if count < 1:
        raise ValueError("count must be >= 1")
    lo, hi = instances_per_image_range
    if lo < 0 or hi < lo:
        raise ValueError(f"bad instance range {instances_per_image_range}")
    rng = np.random.default_rng(seed)
    h, w = img_size
    digits = "0123456789"
    samples = []
    for _ in range(count):
        img = np.zeros((h, w), dtype=np.float32)
        instances = []
        wanted = int(rng.integers(lo, hi + 1))
        placed_boxes = []
        attempts = 0
        while len(instances) < wanted and attempts < 50:
            attempts += 1
            # blocks stay at least 10px tall and at most ~3:1 wide so the
            # shrunken score region keeps a usable interior
            n = int(rng.integers(2, 4))
            scale = int(rng.integers(2, 4))
            text = "".join(digits[i] for i in rng.integers(0, 10, size=n))
            patch = render_text(text, scale=scale, ink=float(rng.uniform(0.7, 1.0)))
            ph, pw = patch.shape
            if ph + 2 > h or pw + 2 > w:
                continue
            x0 = int(rng.integers(1, w - pw))
            y0 = int(rng.integers(1, h - ph))
            box = (x0, y0, x0 + pw, y0 + ph)
            if any(aabbs_overlap(box, b) for b in placed_boxes):
                continue
            img[y0:y0 + ph, x0:x0 + pw] = patch
            placed_boxes.append(box)
            instances.append(TextInstance(
                polygon=_rect_polygon(*box),
                transcription=text,
                patch=patch.copy()))
        # unannotated single-glyph specks: clutter the detector must reject
        specks = int(rng.integers(5, 11))
        placed = 0
        attempts = 0
        while placed < specks and attempts < 40:
            attempts += 1
            glyph = render_text(digits[int(rng.integers(0, 10))],
                                scale=int(rng.integers(1, 3)),
                                ink=float(rng.uniform(0.5, 0.9)))
            gh, gw = glyph.shape
            x0 = int(rng.integers(0, w - gw + 1))
            y0 = int(rng.integers(0, h - gh + 1))
            pad = (x0 - 1, y0 - 1, x0 + gw + 1, y0 + gh + 1)
            if any(aabbs_overlap(pad, b) for b in placed_boxes):
                continue
            region = img[y0:y0 + gh, x0:x0 + gw]
            np.maximum(region, glyph, out=region)
            placed += 1
        img = quantize(img)
        for inst in instances:
            x0, y0, x1, y1 = (int(v) for v in polygon_aabb(inst.polygon))
            inst.patch = img[y0:y1, x0:x1].copy()
        targets = make_db_targets([i.polygon for i in instances], (h, w))
        samples.append(DetSample(img[..., None], instances, targets))
    return samples


# ---------------------------------------------------------------------------
# paste augmentation


@dataclass
class PasteStats:
    offered: int = 0
    accepted: int = 0
    skipped: int = 0


def _rotate_patch_nn(patch, theta):
    """Rotate a patch by theta radians with nearest-neighbour sampling.

    Returns (canvas, ink_mask, corner_points) where corner_points are the
    patch corners in canvas coordinates.
    """
    ph, pw = patch.shape[:2]
    center = np.array([pw / 2.0, ph / 2.0])
    cos, sin = np.cos(theta), np.sin(theta)
    fwd = np.array([[cos, -sin], [sin, cos]])
    corners = np.array([[0.0, 0.0], [pw, 0.0], [pw, ph], [0.0, ph]]) - center
    rotated = corners @ fwd.T
    lo = rotated.min(axis=0)
    hi = rotated.max(axis=0)
    out_w = int(np.ceil(hi[0] - lo[0]))
    out_h = int(np.ceil(hi[1] - lo[1]))
    ys, xs = np.mgrid[0:out_h, 0:out_w]
    pts = np.stack([xs + 0.5 + lo[0], ys + 0.5 + lo[1]], axis=-1)
    inv = pts @ fwd + center  # fwd.T transpose = inverse rotation
    px = np.floor(inv[..., 0]).astype(int)
    py = np.floor(inv[..., 1]).astype(int)
    valid = (px >= 0) & (px < pw) & (py >= 0) & (py < ph)
    canvas = np.zeros((out_h, out_w), dtype=patch.dtype)
    canvas[valid] = patch[py[valid], px[valid]]
    corner_pts = rotated - lo
    return canvas, valid, [[float(x), float(y)] for x, y in corner_pts]


def copy_paste(base, donors, rng, max_attempts=20):
    """Paste donor instances onto a scene, rejecting any overlapping placement.

    Each donor gets up to max_attempts random placements (position plus a
    small rotation); a placement is accepted only when its bounding box is
    disjoint from every existing and previously pasted instance. Targets
    are regenerated from the union of instances. Returns the augmented
    sample and the accept/skip accounting.
    """
    img = base.image.copy()
    h, w = img.shape[:2]
    instances = [TextInstance([list(p) for p in i.polygon], i.transcription, i.patch.copy())
                 for i in base.instances]
    boxes = [polygon_aabb(i.polygon) for i in instances]
    stats = PasteStats(offered=len(donors))
    for donor in donors:
        patch = donor.patch[..., 0] if donor.patch.ndim == 3 else donor.patch
        placed = False
        for _ in range(max_attempts):
            theta = np.deg2rad(rng.uniform(-ROTATE_MAX_DEG, ROTATE_MAX_DEG))
            canvas, ink, corners = _rotate_patch_nn(patch, theta)
            ch, cw = canvas.shape
            if ch >= h or cw >= w:
                continue
            x0 = int(rng.integers(0, w - cw + 1))
            y0 = int(rng.integers(0, h - ch + 1))
            box = (float(x0), float(y0), float(x0 + cw), float(y0 + ch))
            if any(aabbs_overlap(box, b) for b in boxes):
                continue
            region = img[y0:y0 + ch, x0:x0 + cw, 0]
            region[ink] = canvas[ink]
            polygon = [[x + x0, y + y0] for x, y in corners]
            instances.append(TextInstance(
                polygon=polygon,
                transcription=donor.transcription,
                patch=img[y0:y0 + ch, x0:x0 + cw, 0].copy()))
            boxes.append(box)
            stats.accepted += 1
            placed = True
            break
        if not placed:
            stats.skipped += 1
    targets = make_db_targets([i.polygon for i in instances], (h, w))
    return DetSample(img, instances, targets), stats


# ---------------------------------------------------------------------------
# disk format


def _save_png(path, img):
    arr = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    if arr.ndim == 3:
        arr = arr[..., 0]
    Image.fromarray(arr, mode="L").save(path)


def _load_png(path):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float32)
    return arr / 255.0


def _prepare_dir(out_dir, overwrite):
    out = FsPath(out_dir)
    marker = out / "annotations.jsonl"
    if marker.exists() and not overwrite:
        raise FileExistsError(f"{marker} already exists; pass overwrite to replace it")
    (out / "images").mkdir(parents=True, exist_ok=True)
    return out


def save_rec_dataset(samples, out_dir, charset, overwrite=False):
    out = _prepare_dir(out_dir, overwrite)
    charset.save(out / "charset.txt")
    with open(out / "annotations.jsonl", "w", encoding="utf-8") as fh:
        for i, s in enumerate(samples):
            rel = f"images/rec_{i:05d}.png"
            _save_png(out / rel, s.image)
            fh.write(json.dumps({"image": rel, "text": s.text}) + "\n")
    return out


def load_rec_dataset(dataset_dir):
    root = FsPath(dataset_dir)
    charset = Charset.load(root / "charset.txt")
    samples = []
    for lineno, raw in enumerate(_read_jsonl(root / "annotations.jsonl"), start=1):
        row = _parse_row(raw, lineno, required=("image", "text"))
        img = _load_png(root / row["image"])
        samples.append(RecSample(img, charset.text_to_label(row["text"]), row["text"]))
    return samples, charset


def save_det_dataset(samples, out_dir, overwrite=False):
    out = _prepare_dir(out_dir, overwrite)
    with open(out / "annotations.jsonl", "w", encoding="utf-8") as fh:
        for i, s in enumerate(samples):
            rel = f"images/det_{i:05d}.png"
            _save_png(out / rel, s.image)
            row = {"image": rel, "instances": [
                {"polygon": inst.polygon, "transcription": inst.transcription}
                for inst in s.instances]}
            fh.write(json.dumps(row) + "\n")
    return out


def load_det_dataset(dataset_dir):
    root = FsPath(dataset_dir)
    samples = []
    for lineno, raw in enumerate(_read_jsonl(root / "annotations.jsonl"), start=1):
        row = _parse_row(raw, lineno, required=("image", "instances"))
        img = _load_png(root / row["image"])[..., None]
        instances = []
        for inst in row["instances"]:
            poly = [[float(x), float(y)] for x, y in inst["polygon"]]
            x0, y0, x1, y1 = polygon_aabb(poly)
            patch = img[int(np.floor(y0)):int(np.ceil(y1)),
                        int(np.floor(x0)):int(np.ceil(x1)), 0].copy()
            instances.append(TextInstance(poly, inst["transcription"], patch))
        targets = make_db_targets([i.polygon for i in instances], img.shape[:2])
        samples.append(DetSample(img, instances, targets))
    return samples


def _read_jsonl(path):
    with open(path, encoding="utf-8") as fh:
        return fh.read().splitlines()


def _parse_row(raw, lineno, required):
    try:
        row = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ValueError(f"annotations line {lineno}: invalid JSON ({exc.msg})") from None
    for key in required:
        if key not in row:
            raise ValueError(f"annotations line {lineno}: missing field {key!r}")
    return row
