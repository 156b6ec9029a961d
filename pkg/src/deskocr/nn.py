"""Network builders and forward passes.

Three desk-scale architectures share one block vocabulary:

* a lightweight classifier backbone (standard-conv stem, depthwise-
  separable blocks with channel attention and 5x5 kernels at the tail,
  global average pool, a fixed 1280-channel 1x1 conv, classifier head);
* a sequence recognizer (the same backbone trunk, height collapsed to a
  per-column feature sequence, a two-FC head emitting per-step logits);
* a three-map text detector (plain conv trunk at two capacity presets,
  twin 1x1 heads upsampled back to input resolution, and a steep logistic
  binary map).

Builders are deterministic given (config, seed): two builds produce
bitwise-identical parameter stores.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor, ShapeError

BINARIZE_K = 50.0
SE_REDUCTION = 4
HEAD_HIDDEN = 64
FEATURE_WIDTH = 1280

_BLOCK_KINDS = ("stem_conv", "depth_sep_conv", "gap", "conv1x1_1280", "head")


@dataclass(frozen=True)
class BlockSpec:
    kind: str
    kernel_size: int = 1
    stride: int = 1
    channels_out: int = 0
    use_se: bool = False
    activation: str = "hswish"

    def __post_init__(self):
        if self.kind not in _BLOCK_KINDS:
            raise ValueError(f"unknown block kind {self.kind!r}")
        if self.kind in ("stem_conv", "depth_sep_conv") and self.kernel_size not in (3, 5):
            raise ValueError(f"kernel_size must be 3 or 5, got {self.kernel_size}")
        if self.use_se and self.kind != "depth_sep_conv":
            raise ValueError("use_se is only valid on depth_sep_conv blocks")


@dataclass(frozen=True)
class RecConfig:
    """Recognizer shape contract: backbone scale and the class count incl. blank."""

    num_classes: int
    scale: float = 1.0
    img_h: int = 16
    img_w: int = 96

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must include the blank plus at least one symbol")
        if self.scale <= 0:
            raise ValueError("scale must be positive")


@dataclass(frozen=True)
class DetConfig:
    """Detector capacity preset and input channel count."""

    preset: str
    in_channels: int = 1

    def __post_init__(self):
        if self.preset not in ("teacher", "student"):
            raise ValueError(f"unknown detector preset {self.preset!r}")


@dataclass
class ProbMapTriple:
    """The detector's three per-sample maps, all in [0,1]."""

    prob: Tensor
    thresh: Tensor
    binary: Tensor


@dataclass
class DistillBundle:
    """Paired head logits and backbone features from two same-shaped networks."""

    s_hout: Tensor
    t_hout: Tensor
    s_bout: Tensor
    t_bout: Tensor

    def __post_init__(self):
        if self.s_hout.shape != self.t_hout.shape:
            raise ShapeError(
                f"head logit shapes differ: {self.s_hout.shape} vs {self.t_hout.shape}")
        if self.s_bout.shape != self.t_bout.shape:
            raise ShapeError(
                f"backbone feature shapes differ: {self.s_bout.shape} vs {self.t_bout.shape}")


def make_divisible(value, divisor=4):
    return max(divisor, int(value + divisor / 2) // divisor * divisor)


def _conv_out(size, kernel, stride, pad):
    return (size + 2 * pad - kernel) // stride + 1


class Network:
    """Ordered blocks plus a named parameter store; forward dispatches on kind."""

    def __init__(self, kind, config, blocks, params, meta=None):
        self.kind = kind
        self.config = config
        self.blocks = blocks
        self.params = params
        self.meta = dict(meta or {})

    def __repr__(self):
        return f"Network(kind={self.kind!r}, params={self.num_params()})"

    def num_params(self):
        return sum(p.size for p in self.params.values())

    def state(self):
        """Parameter snapshot: name -> a copy of the raw array."""
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state(self, state):
        """Install a parameter snapshot; key set and shapes must match exactly."""
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ValueError(f"parameter set mismatch: missing={sorted(missing)}, "
                             f"unexpected={sorted(extra)}")
        for name, p in self.params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise ShapeError(f"parameter {name!r}: checkpoint shape {arr.shape} "
                                 f"does not fit network shape {p.data.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)

    def set_requires_grad(self, flag):
        for p in self.params.values():
            p.requires_grad = bool(flag)
        return self

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def astype(self, dtype):
        for p in self.params.values():
            p.data = p.data.astype(dtype)
        return self

    def forward(self, x):
        if self.kind == "classifier":
            return _forward_classifier(self, x)
        if self.kind == "recognizer":
            return _forward_recognizer(self, x)
        if self.kind == "detector":
            return _forward_detector(self, x)
        raise ValueError(f"unknown network kind {self.kind!r}")

    def seq_len(self, width):
        """Recognizer timestep count for a given input width."""
        if self.kind != "recognizer":
            raise ValueError("seq_len applies to recognizer networks only")
        w = width
        for spec in self.meta["backbone"]:
            w = _conv_out(w, spec.kernel_size, spec.stride, spec.kernel_size // 2)
        return w


# ---------------------------------------------------------------------------
# parameter initialization


# There are no normalization layers anywhere in these networks, so the init
# gain must keep the activation variance roughly constant through the stack:
# relu keeps half the variance (gain 2), while the hard-swish small-signal
# slope of 1/2 keeps only a quarter (gain 4). Getting this wrong decays the
# signal by ~2x per layer and the deep stacks stop training.
RELU_GAIN = 2.0
HSWISH_GAIN = 4.0
LINEAR_GAIN = 1.0
# Channel-attention gates start at hsigmoid(2) = 5/6: close to pass-through,
# but inside the linear region so the gate still receives gradient.
SE_GATE_BIAS = 2.0


def _init_normal(rng, shape, fan_in, gain, dtype):
    return rng.normal(0.0, np.sqrt(gain / fan_in), size=shape).astype(dtype)


class _ParamStore:
    def __init__(self, seed, dtype=np.float32):
        self.rng = np.random.default_rng(seed)
        self.dtype = dtype
        self.params = {}

    def conv(self, name, out_c, in_c, k, bias_init=0.0, gain=RELU_GAIN):
        fan_in = in_c * k * k
        self.params[f"{name}.w"] = Tensor(
            _init_normal(self.rng, (out_c, in_c, k, k), fan_in, gain, self.dtype),
            requires_grad=True)
        self.params[f"{name}.b"] = Tensor(
            np.full(out_c, bias_init, dtype=self.dtype), requires_grad=True)

    def fc(self, name, in_d, out_d, bias_init=0.0, gain=RELU_GAIN):
        self.params[f"{name}.w"] = Tensor(
            _init_normal(self.rng, (in_d, out_d), in_d, gain, self.dtype),
            requires_grad=True)
        self.params[f"{name}.b"] = Tensor(
            np.full(out_d, bias_init, dtype=self.dtype), requires_grad=True)

    def se(self, name, channels, reduction=SE_REDUCTION):
        if channels % reduction:
            raise ValueError(f"channels {channels} not divisible by reduction {reduction}")
        hidden = channels // reduction
        self.fc(f"{name}.fc1", channels, hidden)
        self.fc(f"{name}.fc2", hidden, channels, bias_init=SE_GATE_BIAS)


# ---------------------------------------------------------------------------
# shared layers


def _conv_block(x, w, b, stride, activation=None, groups=1):
    pad = w.shape[2] // 2
    out = T.conv2d(x, w, stride=stride, padding=pad, groups=groups)
    out = T.add(out, T.reshape(b, (1, b.shape[0], 1, 1)))
    if activation is not None:
        out = T.activation(out, activation)
    return out


def se_block(x, fc1_w, fc1_b, fc2_w, fc2_b):
    """Channel attention: x scaled by hsigmoid(fc2(relu(fc1(pooled channels))))."""
    n, c = x.shape[0], x.shape[1]
    if fc1_w.shape[0] != c or fc2_w.shape[1] != c:
        raise ShapeError(f"attention weights {fc1_w.shape}/{fc2_w.shape} "
                         f"do not fit {c} channels")
    pooled = T.reshape(T.global_avg_pool(x), (n, c))
    z = T.relu(T.add(T.matmul(pooled, fc1_w), fc1_b))
    gate = T.hsigmoid(T.add(T.matmul(z, fc2_w), fc2_b))
    return T.mul(x, T.reshape(gate, (n, c, 1, 1)))


def _run_backbone(net, x, blocks, prefix="block"):
    h = x
    for i, spec in enumerate(blocks):
        p = net.params
        name = f"{prefix}{i}"
        if spec.kind == "stem_conv":
            h = _conv_block(h, p[f"{name}.w"], p[f"{name}.b"], spec.stride, spec.activation)
        elif spec.kind == "depth_sep_conv":
            c_in = h.shape[1]
            h = _conv_block(h, p[f"{name}.dw.w"], p[f"{name}.dw.b"], spec.stride,
                            spec.activation, groups=c_in)
            if spec.use_se:
                h = se_block(h, p[f"{name}.se.fc1.w"], p[f"{name}.se.fc1.b"],
                             p[f"{name}.se.fc2.w"], p[f"{name}.se.fc2.b"])
            h = _conv_block(h, p[f"{name}.pw.w"], p[f"{name}.pw.b"], 1, spec.activation)
        else:
            raise ValueError(f"unexpected backbone block {spec.kind!r}")
    return h


# ---------------------------------------------------------------------------
# lightweight backbone


_BASE_BLOCKS = (
    BlockSpec("stem_conv", kernel_size=3, stride=2, channels_out=8),
    BlockSpec("depth_sep_conv", kernel_size=3, stride=1, channels_out=16),
    BlockSpec("depth_sep_conv", kernel_size=3, stride=2, channels_out=32),
    BlockSpec("depth_sep_conv", kernel_size=3, stride=1, channels_out=32),
    BlockSpec("depth_sep_conv", kernel_size=5, stride=2, channels_out=64, use_se=True),
    BlockSpec("depth_sep_conv", kernel_size=5, stride=1, channels_out=64, use_se=True),
)


def _scaled_backbone(scale):
    return tuple(
        BlockSpec(s.kind, s.kernel_size, s.stride,
                  make_divisible(s.channels_out * scale), s.use_se, s.activation)
        for s in _BASE_BLOCKS)


def _init_backbone(store, blocks, in_channels):
    c = in_channels
    for i, spec in enumerate(blocks):
        name = f"block{i}"
        if spec.kind == "stem_conv":
            store.conv(name, spec.channels_out, c, spec.kernel_size, gain=HSWISH_GAIN)
        else:
            store.conv(f"{name}.dw", c, 1, spec.kernel_size, gain=HSWISH_GAIN)
            if spec.use_se:
                store.se(f"{name}.se", c)
            store.conv(f"{name}.pw", spec.channels_out, c, 1, gain=HSWISH_GAIN)
        c = spec.channels_out
    return c


def build_pplcnet(scale, in_channels, num_classes, seed=0):
    """Classifier: scaled backbone, GAP, fixed 1280-channel 1x1 conv, class head."""
    if scale <= 0:
        raise ValueError("scale must be positive")
    backbone = _scaled_backbone(scale)
    store = _ParamStore(seed)
    c_last = _init_backbone(store, backbone, in_channels)
    store.conv("feat1280", FEATURE_WIDTH, c_last, 1, gain=HSWISH_GAIN)
    store.conv("head", num_classes, FEATURE_WIDTH, 1, gain=LINEAR_GAIN)
    blocks = backbone + (
        BlockSpec("gap"),
        BlockSpec("conv1x1_1280", channels_out=FEATURE_WIDTH),
        BlockSpec("head", channels_out=num_classes),
    )
    meta = {"backbone": backbone, "in_channels": in_channels, "num_classes": num_classes}
    return Network("classifier", {"scale": scale}, blocks, store.params, meta)


def _forward_classifier(net, x):
    h = _run_backbone(net, x, net.meta["backbone"])
    h = T.global_avg_pool(h)
    h = _conv_block(h, net.params["feat1280.w"], net.params["feat1280.b"], 1, "hswish")
    h = _conv_block(h, net.params["head.w"], net.params["head.b"], 1)
    return T.reshape(h, (x.shape[0], net.meta["num_classes"]))


# ---------------------------------------------------------------------------
# sequence recognizer


def build_crnn_recognizer(config, seed=0):
    """Backbone trunk + height collapse + two-FC head emitting per-step logits."""
    backbone = _scaled_backbone(config.scale)
    store = _ParamStore(seed)
    c_last = _init_backbone(store, backbone, 1)
    store.fc("head_fc1", c_last, HEAD_HIDDEN)
    store.fc("head_fc2", HEAD_HIDDEN, config.num_classes, gain=LINEAR_GAIN)
    meta = {"backbone": backbone, "feature_dim": c_last}
    return Network("recognizer", config, backbone, store.params, meta)


def _forward_recognizer(net, x):
    """(N,1,H,W) image batch -> (per-step logits (N,T,C), sequence features (N,T,D))."""
    if x.ndim != 4 or x.shape[1] != 1:
        raise ShapeError(f"recognizer expects (N,1,H,W) input, got {x.shape}")
    h = _run_backbone(net, x, net.meta["backbone"])
    h = T.mean_(h, axis=2)                        # collapse height: (N, D, T)
    feats = T.transpose(h, (0, 2, 1))             # (N, T, D)
    n, t, d = feats.shape
    flat = T.reshape(feats, (n * t, d))
    p = net.params
    hidden = T.relu(T.add(T.matmul(flat, p["head_fc1.w"]), p["head_fc1.b"]))
    logits = T.add(T.matmul(hidden, p["head_fc2.w"]), p["head_fc2.b"])
    return T.reshape(logits, (n, t, net.config.num_classes)), feats


def forward_pair(student, teacher, batch):
    """Run two same-config recognizers on one batch and pair their outputs."""
    if student.kind != "recognizer" or teacher.kind != "recognizer":
        raise ValueError("forward_pair expects two recognizer networks")
    if student.config != teacher.config:
        raise ValueError(f"config mismatch: {student.config} vs {teacher.config}")
    s_logits, s_feats = student.forward(batch)
    t_logits, t_feats = teacher.forward(batch)
    return DistillBundle(s_hout=s_logits, t_hout=t_logits, s_bout=s_feats, t_bout=t_feats)


# ---------------------------------------------------------------------------
# detector


_DET_TRUNKS = {
    # (out_channels, stride) per conv; one stride-2 stage -> /2 resolution,
    # fine enough that the upsampled maps can trace small region outlines
    "student": ((8, 2), (16, 1), (16, 1), (16, 1)),
    "teacher": ((16, 2), (16, 1), (16, 1), (32, 1), (32, 1), (32, 1), (32, 1), (32, 1)),
}

_DET_SCALE = 2  # total downsample undone by the upsampling head


def build_db_detector(config, seed=0):
    """Plain conv trunk at a capacity preset; twin 1x1 heads; maps at input size."""
    trunk = _DET_TRUNKS[config.preset]
    store = _ParamStore(seed)
    c = config.in_channels
    for i, (out_c, _stride) in enumerate(trunk):
        store.conv(f"conv{i}", out_c, c, 3, gain=HSWISH_GAIN)
        c = out_c
    # start both maps near zero activation so early binary maps are not saturated
    store.conv("prob_head", 1, c, 1, bias_init=-2.0, gain=LINEAR_GAIN)
    store.conv("thresh_head", 1, c, 1, bias_init=-2.0, gain=LINEAR_GAIN)
    meta = {"trunk": trunk, "in_channels": config.in_channels}
    return Network("detector", config, (), store.params, meta)


def _forward_detector(net, x):
    """(N,C,H,W) batch with H,W divisible by 4 -> one ProbMapTriple per sample."""
    if x.ndim != 4:
        raise ShapeError(f"detector expects (N,C,H,W) input, got {x.shape}")
    n, _, h, w = x.shape
    if h % _DET_SCALE or w % _DET_SCALE:
        raise ShapeError(f"detector input size {h}x{w} must be divisible by {_DET_SCALE}")
    p = net.params
    feat = x
    for i, (_out_c, stride) in enumerate(net.meta["trunk"]):
        feat = _conv_block(feat, p[f"conv{i}.w"], p[f"conv{i}.b"], stride, "hswish")
    prob = T.sigmoid(T.upsample_nearest(
        _conv_block(feat, p["prob_head.w"], p["prob_head.b"], 1), _DET_SCALE))
    thresh = T.sigmoid(T.upsample_nearest(
        _conv_block(feat, p["thresh_head.w"], p["thresh_head.b"], 1), _DET_SCALE))
    binary = T.sigmoid(T.mul(T.sub(prob, thresh), BINARIZE_K))
    triples = []
    for i in range(n):
        triples.append(ProbMapTriple(
            prob=T.select(T.select(prob, 0, i), 0, 0),
            thresh=T.select(T.select(thresh, 0, i), 0, 0),
            binary=T.select(T.select(binary, 0, i), 0, 0)))
    return triples
