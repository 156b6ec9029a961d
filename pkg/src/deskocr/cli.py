"""Command-line surface: dataset generation, training, distillation, eval, tools.

Conventions shared by every subcommand:

* stdout carries exactly one machine-readable payload (JSON or CSV);
  anything meant for humans goes to stderr.
* --config points at a flat key=value file (# starts a comment line);
  explicit command-line flags override file values.
* directories that receive run artifacts are never silently overwritten;
  pass --overwrite to replace them. A run that dies part-way leaves a
  FAILED marker file next to whatever it managed to write.
"""

import argparse
import contextlib
import json
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import datakit as dk
from . import distill as D
from . import evalkit as E
from . import losses as L
from . import nn
from . import report
from . import tensor as T


class CliError(Exception):
    """Operational failure with a chosen exit code (default 1)."""

    def __init__(self, message, code=1):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# config files


_INT_KEYS = ("epochs", "warmup_epochs", "batch_size", "seed",
             "min_len", "max_len", "instances_min", "instances_max")
_FLOAT_KEYS = ("base_lr", "alpha", "beta", "gamma", "lam", "feat_weight",
               "dml_weight", "distill_weight", "noise_level")
_STR_KEYS = ("schedule", "optimizer", "charset", "preset")


def parse_config_text(text, source="<config>"):
    """key=value per line -> {key: (raw_value, lineno)}; # lines are comments."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CliError(f"{source}:{lineno}: expected key=value, got {line!r}", 2)
        key, value = line.split("=", 1)
        key, value = key.strip(), value.strip()
        if not key:
            raise CliError(f"{source}:{lineno}: empty key", 2)
        if key in out:
            raise CliError(f"{source}:{lineno}: duplicate key {key!r}", 2)
        out[key] = (value, lineno)
    return out


def load_config(path):
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise CliError(f"config file not found: {p}", 2)
    return parse_config_text(p.read_text(encoding="utf-8"), str(p))


def _coerce(key, raw, source, lineno):
    try:
        if key in _INT_KEYS:
            return int(raw)
        if key in _FLOAT_KEYS:
            return float(raw)
        return raw
    except ValueError:
        raise CliError(
            f"{source}:{lineno}: bad value {raw!r} for {key}", 2) from None


def resolve_settings(args, defaults):
    """defaults <- config file <- explicit flags; unknown keys are errors."""
    settings = dict(defaults)
    source = getattr(args, "config", None)
    for key, (raw, lineno) in load_config(source).items():
        if key not in settings:
            raise CliError(f"{source}:{lineno}: unknown key {key!r}", 2)
        settings[key] = _coerce(key, raw, source, lineno)
    if getattr(args, "seed", None) is not None and "seed" in settings:
        settings["seed"] = args.seed
    return settings


def _train_defaults():
    cfg = D.TrainConfig()
    return {f: getattr(cfg, f) for f in (
        "base_lr", "schedule", "warmup_epochs", "epochs", "batch_size", "seed",
        "alpha", "beta", "gamma", "lam", "optimizer",
        "feat_weight", "dml_weight", "distill_weight")}


def _train_config(settings):
    fields = _train_defaults().keys()
    try:
        return D.TrainConfig(**{k: settings[k] for k in fields})
    except ValueError as exc:
        raise CliError(f"bad training configuration: {exc}", 2) from None


# ---------------------------------------------------------------------------
# run directories


def progress(msg):
    print(msg, file=sys.stderr, flush=True)


def emit(payload):
    """The single machine-readable stdout line."""
    if isinstance(payload, str):
        print(payload)
    else:
        print(json.dumps(payload, sort_keys=True))


def start_run(out, overwrite, snapshot):
    """Create the run directory and write the replayable config snapshot."""
    run = Path(out)
    config_file = run / "config.txt"
    if config_file.exists() and not overwrite:
        raise CliError(
            f"{run} already contains a run; pass --overwrite to replace it", 2)
    run.mkdir(parents=True, exist_ok=True)
    failed = run / "FAILED"
    if failed.exists():
        failed.unlink()
    lines = [f"{k}={snapshot[k]}" for k in sorted(snapshot)]
    config_file.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return run


@contextlib.contextmanager
def failure_marker(out_dir):
    """Stamp FAILED into out_dir when the wrapped block dies."""
    try:
        yield
    except BaseException as exc:
        target = Path(out_dir)
        if target.is_dir():
            (target / "FAILED").write_text(f"{type(exc).__name__}: {exc}\n",
                                           encoding="utf-8")
        raise


def _save_train_artifacts(run, log, nets):
    log.save(run / "metrics.csv")
    report.render_curves(log, run / "curves.png", title=run.name)
    for name, net in nets:
        D.save_checkpoint(net, run / name)


# ---------------------------------------------------------------------------
# gen-data


_GEN_DEFAULTS = {
    "seed": 0,
    "min_len": 3, "max_len": 5, "noise_level": 0.05, "charset": "0123456789",
    "instances_min": 1, "instances_max": 3,
}


def _refuse_existing_dataset(out, overwrite):
    marker = Path(out) / "annotations.jsonl"
    if marker.exists() and not overwrite:
        raise CliError(
            f"{out} already holds a dataset; pass --overwrite to replace it", 2)


def cmd_gen_data(args):
    if args.count < 1:
        raise CliError("--count must be >= 1", 2)
    _refuse_existing_dataset(args.out, args.overwrite)
    s = resolve_settings(args, _GEN_DEFAULTS)
    progress(f"generating {args.count} {args.kind} samples (seed {s['seed']})")
    with failure_marker(args.out):
        if args.kind == "rec":
            charset = dk.Charset(s["charset"])
            samples = dk.gen_rec_dataset(
                charset, args.count, (s["min_len"], s["max_len"]),
                seed=s["seed"], noise_level=s["noise_level"])
            out = dk.save_rec_dataset(samples, args.out, charset,
                                      overwrite=args.overwrite)
        else:
            samples = dk.gen_det_dataset(
                args.count, (s["instances_min"], s["instances_max"]),
                seed=s["seed"])
            out = dk.save_det_dataset(samples, args.out,
                                      overwrite=args.overwrite)
    emit({"kind": args.kind, "count": len(samples), "out": str(out)})
    return 0


# ---------------------------------------------------------------------------
# training and distillation


def _load_rec_data(args):
    samples, charset = dk.load_rec_dataset(args.data)
    val = None
    if args.val_data:
        val, val_charset = dk.load_rec_dataset(args.val_data)
        if val_charset.symbols != charset.symbols:
            raise CliError("training and validation charsets differ", 2)
    return samples, val, charset


def _snapshot(command, args, settings, **extra):
    snap = {"command": command, "data": args.data}
    snap.update(settings)
    snap.update(extra)
    return snap


def cmd_train_rec(args):
    settings = resolve_settings(args, _train_defaults())
    cfg = _train_config(settings)
    samples, val, charset = _load_rec_data(args)
    rec_config = nn.RecConfig(num_classes=len(charset) + 1)
    run = start_run(args.out, args.overwrite,
                    _snapshot("train-rec", args, settings))
    with failure_marker(run):
        progress(f"train-rec: {len(samples)} samples, {cfg.epochs} epochs")
        t0 = time.time()
        net, log = D.train_recognizer(rec_config, cfg, samples, val_dataset=val)
        _save_train_artifacts(run, log, [("model.ckpt", net)])
        progress(f"train-rec: done in {time.time() - t0:.1f}s")
    emit({"run": str(run), "epochs": cfg.epochs,
          "final_accuracy": log.column("accuracy")[-1]})
    return 0


def cmd_train_det(args):
    settings = resolve_settings(args, {**_train_defaults(), "preset": "student"})
    cfg = _train_config(settings)
    samples = dk.load_det_dataset(args.data)
    val = dk.load_det_dataset(args.val_data) if args.val_data else None
    det_config = nn.DetConfig(preset=settings["preset"])
    run = start_run(args.out, args.overwrite,
                    _snapshot("train-det", args, settings))
    with failure_marker(run):
        progress(f"train-det[{settings['preset']}]: {len(samples)} images, "
                 f"{cfg.epochs} epochs")
        t0 = time.time()
        net, log = D.train_detector(det_config, cfg, samples, val_dataset=val)
        _save_train_artifacts(run, log, [("model.ckpt", net)])
        progress(f"train-det: done in {time.time() - t0:.1f}s")
    emit({"run": str(run), "epochs": cfg.epochs,
          "final_hmean": log.column("hmean")[-1]})
    return 0


def cmd_distill_udml(args):
    settings = resolve_settings(args, _train_defaults())
    if args.no_feat_loss:
        settings["feat_weight"] = 0.0
    cfg = _train_config(settings)
    samples, val, charset = _load_rec_data(args)
    rec_config = nn.RecConfig(num_classes=len(charset) + 1)
    run = start_run(args.out, args.overwrite,
                    _snapshot("distill-udml", args, settings,
                              no_feat_loss=args.no_feat_loss))
    with failure_marker(run):
        progress(f"distill-udml: {len(samples)} samples, {cfg.epochs} epochs")
        t0 = time.time()
        net1, net2, log = D.train_udml(rec_config, cfg, samples, val_dataset=val)
        _save_train_artifacts(run, log, [("net1.ckpt", net1), ("net2.ckpt", net2)])
        progress(f"distill-udml: done in {time.time() - t0:.1f}s")
    emit({"run": str(run), "epochs": cfg.epochs,
          "final_accuracy": log.column("accuracy")[-1]})
    return 0


def cmd_distill_cml(args):
    settings = resolve_settings(args, {**_train_defaults(), "preset": "student"})
    cfg = _train_config(settings)
    if not Path(args.teacher_ckpt).exists():
        raise CliError(f"teacher checkpoint not found: {args.teacher_ckpt}")
    samples = dk.load_det_dataset(args.data)
    val = dk.load_det_dataset(args.val_data) if args.val_data else None
    det_config = nn.DetConfig(preset=settings["preset"])
    run = start_run(args.out, args.overwrite,
                    _snapshot("distill-cml", args, settings,
                              teacher_ckpt=args.teacher_ckpt))
    with failure_marker(run):
        progress(f"distill-cml: {len(samples)} images, {cfg.epochs} epochs")
        t0 = time.time()
        net1, net2, log = D.train_cml(det_config, cfg, samples,
                                      args.teacher_ckpt, val_dataset=val)
        _save_train_artifacts(run, log, [("net1.ckpt", net1), ("net2.ckpt", net2)])
        progress(f"distill-cml: done in {time.time() - t0:.1f}s")
    emit({"run": str(run), "epochs": cfg.epochs,
          "final_hmean": log.column("hmean")[-1]})
    return 0


# ---------------------------------------------------------------------------
# evaluation


def _load_into(net, ckpt_path):
    try:
        return D.load_checkpoint_into(net, ckpt_path)
    except FileNotFoundError:
        raise CliError(f"checkpoint not found: {ckpt_path}") from None
    except (nn.ShapeError, ValueError) as exc:
        raise CliError(f"checkpoint does not fit the network: {exc}") from None


def cmd_eval_rec(args):
    samples, charset = dk.load_rec_dataset(args.data)
    net = nn.build_crnn_recognizer(nn.RecConfig(num_classes=len(charset) + 1))
    _load_into(net, args.ckpt)
    preds, gts = [], []
    for i in range(0, len(samples), 64):
        chunk = samples[i:i + 64]
        x, labels = D._rec_batch(chunk)
        logits, _ = net.forward(x)
        preds.extend(E.greedy_decode(logits.data[j]) for j in range(len(chunk)))
        gts.extend(labels)
    emit(E.recognition_report(preds, gts).to_json())
    return 0


def cmd_eval_det(args):
    if not 0.0 < args.iou_thresh <= 1.0:
        raise CliError("--iou-thresh must be in (0, 1]", 2)
    samples = dk.load_det_dataset(args.data)
    net = nn.build_db_detector(nn.DetConfig(preset=args.preset))
    _load_into(net, args.ckpt)
    rep = D.eval_detector(net, samples, iou_thresh=args.iou_thresh)
    emit(rep.to_json())
    return 0


# ---------------------------------------------------------------------------
# augmentation


def cmd_augment(args):
    if args.donors < 0:
        raise CliError("--donors must be >= 0", 2)
    _refuse_existing_dataset(args.out, args.overwrite)
    src = Path(args.data)
    if (src / "charset.txt").exists():
        raise CliError("augment requires a detection dataset; "
                       f"{src} holds a recognition dataset", 2)
    samples = dk.load_det_dataset(src)
    pool = [inst for s in samples for inst in s.instances]
    if args.donors > 0 and not pool:
        raise CliError("source dataset has no instances to donate", 2)
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    augmented = []
    totals = dk.PasteStats()
    with failure_marker(args.out):
        for s in samples:
            donors = [pool[int(k)] for k in
                      rng.integers(0, len(pool), size=args.donors)] \
                if args.donors else []
            new, stats = dk.copy_paste(s, donors, rng)
            augmented.append(new)
            totals.offered += stats.offered
            totals.accepted += stats.accepted
            totals.skipped += stats.skipped
        out = dk.save_det_dataset(augmented, args.out, overwrite=args.overwrite)
    emit({"images": len(augmented), "offered": totals.offered,
          "accepted": totals.accepted, "skipped": totals.skipped,
          "out": str(out)})
    return 0


# ---------------------------------------------------------------------------
# gradcheck


def _gc_ctc(rng):
    steps, classes = int(rng.integers(4, 7)), int(rng.integers(3, 5))
    label = L.SeqLabel(tuple(int(v) for v in rng.integers(1, classes, size=2)))
    x = T.Tensor(rng.normal(size=(steps, classes)), requires_grad=True)
    return T.grad_check(lambda t: L.ctc_loss(t, label), x)


def _gc_enhanced_ctc(rng):
    steps, classes, dim = 5, 4, 3
    label = L.SeqLabel((1, 2))
    feats = T.Tensor(rng.normal(size=(steps, dim)))
    head = rng.normal(size=(steps, classes))
    bank = L.CenterBank.zeros(classes, dim, dtype=np.float64)
    bank.centers.data[:] = rng.normal(size=(classes, dim))
    x = T.Tensor(rng.normal(size=(steps, classes)), requires_grad=True)
    return T.grad_check(
        lambda t: L.enhanced_ctc(t, label, feats, head, bank, lam=0.05), x)


def _gc_dml(rng):
    shape = (int(rng.integers(2, 5)), int(rng.integers(3, 6)))
    b = T.Tensor(rng.normal(size=shape))
    a = T.Tensor(rng.normal(size=shape), requires_grad=True)
    return T.grad_check(lambda t: L.dml_loss(t, b), a)


def _gc_dml_map(rng):
    shape = (4, 5)
    b = T.Tensor(rng.uniform(0.1, 0.9, size=shape))
    a = T.Tensor(rng.uniform(0.1, 0.9, size=shape), requires_grad=True)
    return T.grad_check(lambda t: L.dml_map_loss(t, b), a)


def _gc_feature(rng):
    shape = (int(rng.integers(2, 5)), int(rng.integers(2, 5)))
    t_fixed = T.Tensor(rng.normal(size=shape))
    s = T.Tensor(rng.normal(size=shape), requires_grad=True)
    return T.grad_check(lambda t: L.feature_loss(t, t_fixed), s)


def _gc_center(rng):
    steps, classes, dim = 5, 4, 3
    head = rng.normal(size=(steps, classes))
    bank = L.CenterBank.zeros(classes, dim, dtype=np.float64)
    bank.centers.data[:] = rng.normal(size=(classes, dim))
    feats = T.Tensor(rng.normal(size=(steps, dim)), requires_grad=True)
    return T.grad_check(lambda t: L.center_loss(t, head, bank), feats)


def _det_case(rng, h=5, w=5):
    mask = (rng.uniform(size=(h, w)) > 0.5).astype(np.float64)
    mask[0, 0] = 1.0
    gt = L.DetGroundTruth(
        prob_gt=(rng.uniform(size=(h, w)) > 0.5).astype(np.float64),
        thresh_gt=rng.uniform(size=(h, w)),
        thresh_mask=mask)
    maps = {name: rng.uniform(0.1, 0.9, size=(h, w))
            for name in ("prob", "thresh", "binary")}
    return maps, gt


def _gc_db_gt(rng):
    maps, gt = _det_case(rng)
    worst = 0.0
    for name in ("prob", "thresh", "binary"):
        x = T.Tensor(maps[name].copy(), requires_grad=True)

        def f(t, _name=name):
            triple = {k: T.Tensor(v) for k, v in maps.items()}
            triple[_name] = t
            return L.db_gt_loss(nn.ProbMapTriple(**triple), gt)

        worst = max(worst, T.grad_check(f, x))
    return worst


def _gc_distill(rng):
    maps, _ = _det_case(rng)
    teacher = rng.uniform(size=maps["prob"].shape)
    worst = 0.0
    for name in ("prob", "binary"):
        x = T.Tensor(maps[name].copy(), requires_grad=True)

        def f(t, _name=name):
            triple = {k: T.Tensor(v) for k, v in maps.items()}
            triple[_name] = t
            return L.distill_loss(nn.ProbMapTriple(**triple), teacher)

        worst = max(worst, T.grad_check(f, x))
    return worst


# name -> single-instance check returning the max relative error; tests may
# patch entries in, so the table is consulted at call time
GRADCHECK_TARGETS = {
    "ctc": _gc_ctc,
    "enhanced_ctc": _gc_enhanced_ctc,
    "dml": _gc_dml,
    "dml_map": _gc_dml_map,
    "feature": _gc_feature,
    "center": _gc_center,
    "db_gt": _gc_db_gt,
    "distill": _gc_distill,
}

GRADCHECK_TOL = 1e-4


def cmd_gradcheck(args):
    if args.count < 1:
        raise CliError("--count must be >= 1", 2)
    names = list(GRADCHECK_TARGETS)
    if args.losses:
        names = [n.strip() for n in args.losses.split(",") if n.strip()]
        unknown = [n for n in names if n not in GRADCHECK_TARGETS]
        if unknown:
            raise CliError(
                f"unknown loss name(s) {unknown}; "
                f"choose from {sorted(GRADCHECK_TARGETS)}", 2)
    seed = args.seed if args.seed is not None else 0
    lines = ["name,max_rel_err,status"]
    failed = False
    for name in names:
        fn = GRADCHECK_TARGETS[name]
        rng = np.random.default_rng(seed)
        worst = max(fn(rng) for _ in range(args.count))
        ok = worst < GRADCHECK_TOL
        failed = failed or not ok
        lines.append(f"{name},{worst:.3e},{'ok' if ok else 'FAIL'}")
        progress(f"gradcheck {name}: {worst:.3e} ({'ok' if ok else 'FAIL'})")
    emit("\n".join(lines))
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# bench


def _bench_ops(seed):
    rng = np.random.default_rng(seed)
    conv_x = T.Tensor(rng.normal(size=(1, 8, 16, 16)).astype(np.float32))
    conv_k = T.Tensor(rng.normal(size=(8, 8, 3, 3)).astype(np.float32))
    rec = nn.build_crnn_recognizer(nn.RecConfig(num_classes=11), seed=0)
    rec_x = T.Tensor(rng.uniform(size=(1, 1, 16, 96)).astype(np.float32))
    det = nn.build_db_detector(nn.DetConfig(preset="student"), seed=0)
    det_x = T.Tensor(rng.uniform(size=(1, 1, 48, 48)).astype(np.float32))
    logp = np.log(rng.dirichlet(np.ones(11), size=12).astype(np.float64))
    label = L.SeqLabel((3, 1, 4, 1))
    logits = rng.normal(size=(12, 11))
    probmap = (rng.uniform(size=(48, 48)) > 0.7).astype(np.float64)
    maps, det_gt = _det_case(rng, h=24, w=24)
    triple = nn.ProbMapTriple(**{k: T.Tensor(v) for k, v in maps.items()})
    return (
        ("conv3x3_8c_16px", lambda: T.conv2d(conv_x, conv_k, padding=1)),
        ("recognizer_forward", lambda: rec.forward(rec_x)),
        ("detector_forward", lambda: det.forward(det_x)),
        ("ctc_loss_T12", lambda: L.ctc_loss(logp, label)),
        ("db_gt_loss_24px", lambda: L.db_gt_loss(triple, det_gt)),
        ("greedy_decode", lambda: E.greedy_decode(logits)),
        ("boxes_from_probmap_48px", lambda: E.boxes_from_probmap(probmap)),
    )


def cmd_bench(args):
    if args.reps < 1:
        raise CliError("--reps must be >= 1", 2)
    lines = ["name,median_ms"]
    for name, fn in _bench_ops(args.seed if args.seed is not None else 0):
        fn()  # warm-up outside the timed reps
        times = []
        for _ in range(args.reps):
            t0 = time.perf_counter()
            fn()
            times.append((time.perf_counter() - t0) * 1000.0)
        med = statistics.median(times)
        lines.append(f"{name},{med:.4f}")
        progress(f"bench {name}: {med:.4f} ms")
    emit("\n".join(lines))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(
        prog="deskocr",
        description="Text detection/recognition training and distillation runs.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="flat key=value settings file")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--out", required=out_required,
                       help="output directory for this command's artifacts")
        p.add_argument("--overwrite", action="store_true",
                       help="replace existing artifacts at --out")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--kind", choices=("rec", "det"), required=True)
    p.add_argument("--count", type=int, required=True)
    common(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train-rec", help="train one recognizer")
    p.add_argument("--data", required=True)
    p.add_argument("--val-data")
    common(p)
    p.set_defaults(fn=cmd_train_rec)

    p = sub.add_parser("train-det", help="train one detector")
    p.add_argument("--data", required=True)
    p.add_argument("--val-data")
    common(p)
    p.set_defaults(fn=cmd_train_det)

    p = sub.add_parser("distill-udml",
                       help="mutual distillation of two recognizers")
    p.add_argument("--data", required=True)
    p.add_argument("--val-data")
    p.add_argument("--no-feat-loss", action="store_true",
                   help="drop the feature term (ablation)")
    common(p)
    p.set_defaults(fn=cmd_distill_udml)

    p = sub.add_parser("distill-cml",
                       help="two detector students under a frozen teacher")
    p.add_argument("--data", required=True)
    p.add_argument("--val-data")
    p.add_argument("--teacher-ckpt", required=True)
    common(p)
    p.set_defaults(fn=cmd_distill_cml)

    p = sub.add_parser("eval-rec", help="sentence accuracy of a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.set_defaults(fn=cmd_eval_rec)

    p = sub.add_parser("eval-det", help="P/R/Hmean of a detector checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--preset", choices=("student", "teacher"), default="student")
    p.add_argument("--iou-thresh", type=float, default=0.5)
    p.set_defaults(fn=cmd_eval_det)

    p = sub.add_parser("augment", help="paste-augment a detection dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--donors", type=int, default=1,
                   help="donor instances offered per image")
    common(p)
    p.set_defaults(fn=cmd_augment)

    p = sub.add_parser("gradcheck",
                       help="finite-difference check of every loss gradient")
    p.add_argument("--losses", help="comma-separated subset of loss names")
    p.add_argument("--count", type=int, default=20,
                   help="random instances per loss")
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("bench", help="median wall time per core op")
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_bench)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (D.DivergenceError, D.CheckpointError,
            FileNotFoundError, FileExistsError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
