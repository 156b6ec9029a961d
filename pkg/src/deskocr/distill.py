"""Training engine: Adam, warm-up schedules, mutual-learning loops, checkpoints.

Determinism contract: (config, seed, dataset) fixes every logged number and
every trained parameter bitwise on one machine. All randomness flows through
seeds derived from TrainConfig.seed via derive_seed, so the two peer networks
and the shuffle order draw from independent but reproducible streams.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import datakit
from . import evalkit
from . import losses as L
from . import nn
from . import tensor as T

CKPT_MAGIC = b"PPV2CKPT"
CKPT_VERSION = 1
PIECEWISE_DROP_AT = 0.875  # fraction of total epochs trained before the /10 step
PIECEWISE_DIV = 10.0


class DivergenceError(RuntimeError):
    """A training step produced a non-finite loss."""

    def __init__(self, step, value):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step
        self.value = value


class CheckpointError(ValueError):
    """Malformed checkpoint container."""


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.001
    schedule: str = "cosine"  # or "piecewise"
    warmup_epochs: int = 2
    epochs: int = 10
    batch_size: int = 8
    seed: int = 0
    alpha: float = 5.0      # dice weight in the three-map detection loss
    beta: float = 10.0      # masked-L1 weight in the three-map detection loss
    gamma: float = 5.0      # bce weight in the teacher-map distillation loss
    lam: float = 0.05       # center-loss weight in the enhanced sequence loss
    optimizer: str = "adam"
    feat_weight: float = 1.0     # mutual-learning feature term (0 disables)
    dml_weight: float = 1.0      # two-student map divergence term (0 disables)
    distill_weight: float = 1.0  # teacher supervision term (0 disables)

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError(f"warmup_epochs must be in [0, epochs), got "
                             f"{self.warmup_epochs} for {self.epochs} epochs")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.schedule not in ("cosine", "piecewise"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.optimizer != "adam":
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.alpha <= 0 or self.beta <= 0 or self.gamma <= 0:
            raise ValueError("loss weights alpha, beta, gamma must be positive")
        for name in ("lam", "feat_weight", "dml_weight", "distill_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def lr_at(config, step, steps_per_epoch):
    """Learning rate at a global step: linear warm-up, then cosine or piecewise.

    Warm-up ramps linearly from 0; the cosine branch starts exactly at
    base_lr so the schedule is continuous across the boundary. The
    piecewise branch holds base_lr and divides by 10 for the final
    stretch of epochs.
    """
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if steps_per_epoch < 1:
        raise ValueError(f"steps_per_epoch must be >= 1, got {steps_per_epoch}")
    warm = config.warmup_epochs * steps_per_epoch
    if step < warm:
        return config.base_lr * step / warm
    if config.schedule == "cosine":
        total = config.epochs * steps_per_epoch
        progress = min(1.0, (step - warm) / max(1, total - warm))
        return config.base_lr * (1.0 + math.cos(math.pi * progress)) / 2.0
    boundary = int(round(PIECEWISE_DROP_AT * config.epochs))
    epoch = step // steps_per_epoch
    return config.base_lr if epoch < boundary else config.base_lr / PIECEWISE_DIV


class Adam(object):
    """Adam with bias correction; beta1 0.9, beta2 0.999, eps 1e-8."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.t = 0

    def step(self, lr):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            p.data -= (lr / b1c) * m / (np.sqrt(v / b2c) + self.eps)


class MetricsLog:
    """Append-only per-epoch records with an exact text round trip."""

    def __init__(self, columns):
        self.columns = list(columns)
        self.rows = []

    def append(self, **values):
        try:
            row = [values.pop(c) for c in self.columns]
        except KeyError as exc:
            raise ValueError(f"missing column {exc.args[0]!r}") from None
        if values:
            raise ValueError(f"unknown columns {sorted(values)}")
        self.rows.append(row)

    def column(self, name):
        idx = self.columns.index(name)
        return [row[idx] for row in self.rows]

    def to_csv(self):
        def fmt(v):
            if isinstance(v, (int, np.integer)):
                return str(int(v))
            return repr(float(v))  # repr round-trips doubles exactly

        lines = [",".join(self.columns)]
        lines.extend(",".join(fmt(v) for v in row) for row in self.rows)
        return "\n".join(lines) + "\n"

    def save(self, path):
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    @classmethod
    def from_csv(cls, text):
        lines = [ln for ln in text.splitlines() if ln]
        log = cls(lines[0].split(","))
        for ln in lines[1:]:
            row = []
            for tok in ln.split(","):
                try:
                    row.append(int(tok))
                except ValueError:
                    row.append(float(tok))
            log.rows.append(row)
        return log


def derive_seed(seed, tag):
    """Independent 32-bit stream seed for a named role under a master seed."""
    digest = hashlib.blake2s(f"{seed}:{tag}".encode("utf-8"), digest_size=4).digest()
    return int.from_bytes(digest, "little")


# ---------------------------------------------------------------------------
# checkpoint container


def save_checkpoint(net, path):
    """Write all parameters; layout documented in load_checkpoint."""
    state = net.state()
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(state))]
    for name, arr in state.items():
        raw = np.ascontiguousarray(arr, dtype="<f4")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", raw.ndim))
        parts.append(struct.pack(f"<{raw.ndim}I", *raw.shape))
        parts.append(raw.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path):
    """Read a parameter container back into {name: float32 array}.

    Layout: magic "PPV2CKPT", version u32, entry count u32; per entry a
    u16 name length + UTF-8 name, u8 ndim, u32 dims, then raw little-endian
    float32 data. Everything little-endian; round trips are bit-exact.
    """
    blob = Path(path).read_bytes()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"truncated entry: needed {n} bytes for {what}")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    if take(len(CKPT_MAGIC), "magic") != CKPT_MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported container version {version}")
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1, f"{name} ndim"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, f"{name} dims"))
        size = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(take(4 * size, f"{name} data"), dtype="<f4")
        params[name] = data.reshape(shape).copy()
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes after last entry")
    return params


def load_checkpoint_into(net, path):
    """Load a container and install it; shape errors name the parameter."""
    net.load_state(load_checkpoint(path))
    return net


def state_checksum(net):
    """Order-sensitive digest of every parameter buffer."""
    h = hashlib.blake2s()
    for name, arr in net.state().items():
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# shared loop plumbing


def _batch_plan(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _rec_batch(samples):
    x = np.stack([s.image for s in samples])[:, None].astype(np.float32)
    return T.Tensor(x), [s.label for s in samples]


def _det_batch(samples):
    x = np.stack([np.transpose(s.image, (2, 0, 1)) for s in samples]).astype(np.float32)
    return T.Tensor(x), [s.targets for s in samples]


def _mean_losses(parts):
    total = parts[0]
    for p in parts[1:]:
        total = T.add(total, p)
    return T.mul(total, 1.0 / len(parts))


def _batch_ctc(logits, labels):
    logp = T.log_softmax(logits, axis=-1)
    parts = [L.ctc_loss(T.select(logp, 0, i), lab) for i, lab in enumerate(labels)]
    return _mean_losses(parts)


def _weighted(make_term, weight):
    """Build a loss term under a weight; weight 0 skips the computation."""
    if weight == 0.0:
        return T.as_tensor(np.float32(0.0))
    term = make_term()
    return term if weight == 1.0 else T.mul(term, weight)


def _guard_finite(node, step):
    value = float(node.item())
    if not math.isfinite(value):
        raise DivergenceError(step, value)
    return value


# ---------------------------------------------------------------------------
# evaluation used inside the loops


def eval_recognizer(net, samples, batch_size=64):
    """Sentence accuracy of greedy decoding over a sample list."""
    if not samples:
        return 1.0
    correct = 0
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        x, labels = _rec_batch(chunk)
        logits, _ = net.forward(x)
        for j, label in enumerate(labels):
            if evalkit.greedy_decode(logits.data[j]) == label:
                correct += 1
    return correct / len(samples)


def eval_detector(net, samples, iou_thresh=0.5, batch_size=8):
    """Micro-aggregated Hmean against the annotated instance boxes.

    Boxes come from the binarized map (the crisp decision surface, where the
    per-pixel threshold has already been subtracted). The map marks
    inward-shrunken region cores, so each component box is unclipped back to
    full extent before it is matched against the instance polygons' bounding
    boxes.
    """
    matched = pred_n = gt_n = 0
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        x, _ = _det_batch(chunk)
        triples = net.forward(x)
        for s, tri in zip(chunk, triples):
            bounds = tri.binary.data.shape
            pred = [evalkit.unclip_box(b, bounds=bounds)
                    for b in evalkit.boxes_from_probmap(tri.binary.data)]
            gt = []
            for inst in s.instances:
                x0, y0, x1, y1 = datakit.polygon_aabb(inst.polygon)
                gt.append(evalkit.DetBox(x0, y0, x1, y1, score=1.0))
            rep = evalkit.det_hmean(pred, gt, iou_thresh)
            matched += rep.matched
            pred_n += rep.pred
            gt_n += rep.gt
    return evalkit.report_from_counts(matched, pred_n, gt_n)


# ---------------------------------------------------------------------------
# trainers


def train_recognizer(rec_config, cfg, dataset, val_dataset=None,
                     net_seed=None, data_seed=None):
    """Sequence-loss training of a single recognizer -> (network, MetricsLog)."""
    if not dataset:
        raise ValueError("dataset is empty")
    net_seed = derive_seed(cfg.seed, "net1") if net_seed is None else net_seed
    data_seed = derive_seed(cfg.seed, "data") if data_seed is None else data_seed
    net = nn.build_crnn_recognizer(rec_config, seed=net_seed)
    opt = Adam(net.params)
    rng = np.random.default_rng(data_seed)
    spe = math.ceil(len(dataset) / cfg.batch_size)
    held = val_dataset if val_dataset is not None else dataset
    log = MetricsLog(["epoch", "lr", "ctc", "total", "accuracy"])
    step = 0
    for epoch in range(cfg.epochs):
        epoch_lr = lr_at(cfg, step, spe)
        ctc_sum = 0.0
        for idx in _batch_plan(len(dataset), cfg.batch_size, rng):
            lr = lr_at(cfg, step, spe)
            x, labels = _rec_batch([dataset[i] for i in idx])
            net.zero_grad()
            g = T.Graph()
            with g:
                logits, _ = net.forward(x)
                ctc = _batch_ctc(logits, labels)
            ctc_sum += _guard_finite(ctc, step)
            T.backward(g, ctc)
            opt.step(lr)
            step += 1
        log.append(epoch=epoch, lr=epoch_lr, ctc=ctc_sum / spe,
                   total=ctc_sum / spe, accuracy=eval_recognizer(net, held))
    return net, log


def train_udml(rec_config, cfg, dataset, val_dataset=None):
    """Two peer recognizers trained from one shared total -> (net1, net2, log).

    Per step: both peers forward the same batch; the total is the summed
    sequence loss plus the symmetric output divergence plus the feature
    term; both networks take exactly one optimizer step from that total.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    net1 = nn.build_crnn_recognizer(rec_config, seed=derive_seed(cfg.seed, "net1"))
    net2 = nn.build_crnn_recognizer(rec_config, seed=derive_seed(cfg.seed, "net2"))
    opt1, opt2 = Adam(net1.params), Adam(net2.params)
    rng = np.random.default_rng(derive_seed(cfg.seed, "data"))
    spe = math.ceil(len(dataset) / cfg.batch_size)
    held = val_dataset if val_dataset is not None else dataset
    log = MetricsLog(["epoch", "lr", "ctc", "dml", "feat", "total", "accuracy"])
    step = 0
    for epoch in range(cfg.epochs):
        epoch_lr = lr_at(cfg, step, spe)
        sums = dict.fromkeys(("ctc", "dml", "feat", "total"), 0.0)
        for idx in _batch_plan(len(dataset), cfg.batch_size, rng):
            lr = lr_at(cfg, step, spe)
            x, labels = _rec_batch([dataset[i] for i in idx])
            net1.zero_grad()
            net2.zero_grad()
            g = T.Graph()
            with g:
                logits1, feats1 = net1.forward(x)
                logits2, feats2 = net2.forward(x)
                ctc = T.add(_batch_ctc(logits1, labels), _batch_ctc(logits2, labels))
                dml = L.dml_loss(logits1, logits2)
                feat = _weighted(lambda: L.feature_loss(feats1, feats2),
                                 cfg.feat_weight)
                total = L.udml_total(ctc, dml, feat)
            _guard_finite(total, step)
            T.backward(g, total)
            opt1.step(lr)
            opt2.step(lr)
            for key, node in (("ctc", ctc), ("dml", dml),
                              ("feat", feat), ("total", total)):
                sums[key] += float(node.item())
            step += 1
        log.append(epoch=epoch, lr=epoch_lr,
                   **{k: v / spe for k, v in sums.items()},
                   accuracy=eval_recognizer(net1, held))
    return net1, net2, log


def train_detector(det_config, cfg, dataset, val_dataset=None,
                   net_seed=None, data_seed=None):
    """Three-map supervised training of one detector -> (network, MetricsLog)."""
    if not dataset:
        raise ValueError("dataset is empty")
    net_seed = derive_seed(cfg.seed, "net1") if net_seed is None else net_seed
    data_seed = derive_seed(cfg.seed, "data") if data_seed is None else data_seed
    net = nn.build_db_detector(det_config, seed=net_seed)
    opt = Adam(net.params)
    rng = np.random.default_rng(data_seed)
    spe = math.ceil(len(dataset) / cfg.batch_size)
    held = val_dataset if val_dataset is not None else dataset
    log = MetricsLog(["epoch", "lr", "gt", "total", "hmean"])
    step = 0
    for epoch in range(cfg.epochs):
        epoch_lr = lr_at(cfg, step, spe)
        gt_sum = 0.0
        for idx in _batch_plan(len(dataset), cfg.batch_size, rng):
            lr = lr_at(cfg, step, spe)
            batch = [dataset[i] for i in idx]
            x, targets = _det_batch(batch)
            net.zero_grad()
            g = T.Graph()
            with g:
                triples = net.forward(x)
                gt = _mean_losses([
                    L.db_gt_loss(tri, tgt, alpha=cfg.alpha, beta=cfg.beta)
                    for tri, tgt in zip(triples, targets)])
            gt_sum += _guard_finite(gt, step)
            T.backward(g, gt)
            opt.step(lr)
            step += 1
        log.append(epoch=epoch, lr=epoch_lr, gt=gt_sum / spe, total=gt_sum / spe,
                   hmean=eval_detector(net, held).hmean)
    return net, log


def train_cml(det_config, cfg, dataset, teacher_ckpt, val_dataset=None):
    """Two detector students under a frozen teacher -> (net1, net2, log).

    The teacher is rebuilt from its checkpoint, never optimized, and its
    parameter digest is re-verified after every epoch. Per step the total
    combines each student's three-map loss, the pairwise map divergence,
    and each student's dilated-teacher supervision; both students take one
    simultaneous optimizer step from the single total.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    teacher_cfg = nn.DetConfig(preset="teacher", in_channels=det_config.in_channels)
    teacher = nn.build_db_detector(teacher_cfg, seed=0)
    teacher.load_state(load_checkpoint(teacher_ckpt))
    teacher.set_requires_grad(False)
    frozen = state_checksum(teacher)
    net1 = nn.build_db_detector(det_config, seed=derive_seed(cfg.seed, "net1"))
    net2 = nn.build_db_detector(det_config, seed=derive_seed(cfg.seed, "net2"))
    opt1, opt2 = Adam(net1.params), Adam(net2.params)
    rng = np.random.default_rng(derive_seed(cfg.seed, "data"))
    spe = math.ceil(len(dataset) / cfg.batch_size)
    held = val_dataset if val_dataset is not None else dataset
    log = MetricsLog(["epoch", "lr", "gt", "gt1", "gt2", "dml", "distill",
                      "total", "hmean"])
    step = 0
    for epoch in range(cfg.epochs):
        epoch_lr = lr_at(cfg, step, spe)
        sums = dict.fromkeys(("gt", "gt1", "gt2", "dml", "distill", "total"), 0.0)
        for idx in _batch_plan(len(dataset), cfg.batch_size, rng):
            lr = lr_at(cfg, step, spe)
            batch = [dataset[i] for i in idx]
            x, targets = _det_batch(batch)
            net1.zero_grad()
            net2.zero_grad()
            g = T.Graph()
            with g:
                t_triples = teacher.forward(x)  # frozen: records nothing
                s1 = net1.forward(x)
                s2 = net2.forward(x)
                gt1 = _mean_losses([
                    L.db_gt_loss(tri, tgt, alpha=cfg.alpha, beta=cfg.beta)
                    for tri, tgt in zip(s1, targets)])
                gt2 = _mean_losses([
                    L.db_gt_loss(tri, tgt, alpha=cfg.alpha, beta=cfg.beta)
                    for tri, tgt in zip(s2, targets)])
                dml = _weighted(lambda: _mean_losses([
                    L.dml_map_loss(a.prob, b.prob) for a, b in zip(s1, s2)]),
                    cfg.dml_weight)
                d1 = _weighted(lambda: _mean_losses([
                    L.distill_loss(tri, t.prob, gamma=cfg.gamma)
                    for tri, t in zip(s1, t_triples)]), cfg.distill_weight)
                d2 = _weighted(lambda: _mean_losses([
                    L.distill_loss(tri, t.prob, gamma=cfg.gamma)
                    for tri, t in zip(s2, t_triples)]), cfg.distill_weight)
                total = L.cml_total((gt1, gt2), dml, (d1, d2))
            _guard_finite(total, step)
            T.backward(g, total)
            opt1.step(lr)
            opt2.step(lr)
            sums["gt1"] += float(gt1.item())
            sums["gt2"] += float(gt2.item())
            sums["gt"] += float(gt1.item()) + float(gt2.item())
            sums["dml"] += float(dml.item())
            sums["distill"] += float(d1.item()) + float(d2.item())
            sums["total"] += float(total.item())
            step += 1
        if state_checksum(teacher) != frozen:
            raise RuntimeError("teacher parameters changed during training")
        log.append(epoch=epoch, lr=epoch_lr,
                   **{k: v / spe for k, v in sums.items()},
                   hmean=eval_detector(net1, held).hmean)
    return net1, net2, log
