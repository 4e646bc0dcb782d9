"""Command-line surface tying the pipeline together.

Subcommands: synth, preprocess, train, prune, finetune, eval, infer,
export-embeddings, plan-memory. Exit codes: 0 success, 1 input error,
2 configuration/usage error. All randomness flows through --seed.
"""

import argparse
import re
import struct
import sys
from pathlib import Path

import numpy as np

from . import data as dp
from .errors import ConfigError, InputError, ParseError, StateError, TrainingDiverged
from .losses import LossConfig
from .model import ModelConfig, build_model, count_parameters, load_model, save_model
from .pruning import PruneConfig, apply_prune, compact, finetune
from .runtime import infer_stream, plan_memory, run_length_encode
from .training import (SplitSpec, TrainConfig, evaluate, export_embeddings,
                       split_subjects, train, write_log)

DEFAULT_BUDGET_BYTES = 512 * 1024


def _log(msg):
    print(msg, file=sys.stderr)


def _parse_subjects(text):
    if not text:
        return ()
    try:
        return tuple(int(s) for s in text.split(","))
    except ValueError:
        raise ConfigError(f"bad subject list {text!r}, expected comma-separated integers") from None


def _load_segments(path):
    if not Path(path).exists():
        raise InputError(f"dataset file not found: {path}")
    return dp.load_dataset(path)


def _load_model(path):
    if not Path(path).exists():
        raise InputError(f"model file not found: {path}")
    return load_model(path)


def _split_for_training(segments, test_subjects, val_fraction, seed):
    subjects = sorted({s.subject_id for s in segments})
    test_ids = tuple(test_subjects)
    unknown = set(test_ids) - set(subjects)
    if unknown:
        raise InputError(f"test subjects {sorted(unknown)} not present in the dataset")
    train_ids = tuple(s for s in subjects if s not in test_ids)
    spec = SplitSpec(train_subject_ids=train_ids, test_subject_ids=test_ids,
                     val_fraction=val_fraction, seed=seed)
    return split_subjects(segments, spec)


def _loss_config(args):
    return LossConfig(lam=args.lam, tau=args.tau, strategy=args.contrastive,
                      bank_enabled=args.bank_size > 0,
                      bank_capacity=args.bank_size if args.bank_size > 0 else 1000)


def _train_config(args, epochs, l1):
    return TrainConfig(batch_size=args.batch_size, lr0=args.lr, epochs=epochs,
                       seed=args.seed, loss=_loss_config(args), l1_gamma_weight=l1)


def _progress(epoch, lr, loss, val_dice):
    _log(f"epoch {epoch} lr {lr:.6g} loss {loss:.5f} val_dice {val_dice:.4f}")


def _run_training(args, model, segments):
    train_segs, val_segs, test_segs = _split_for_training(
        segments, _parse_subjects(args.test_subjects), args.val_fraction, args.seed)
    if not train_segs:
        raise InputError("training split is empty")
    cfg = _train_config(args, args.epochs, args.l1_gamma)
    model, log_rows = train(model, train_segs, val_segs, cfg, progress=_progress)
    if args.log:
        write_log(log_rows, args.log)
    save_model(model, args.out)
    _log(f"saved model to {args.out} ({count_parameters(model)} parameters)")
    if test_segs:
        counts, overall, _ = evaluate(model, test_segs, threshold=args.threshold)
        print(f"test_dice {overall:.4f} tp {counts.tp} fp {counts.fp} fn {counts.fn} tn {counts.tn}")
    return 0


# -- subcommand handlers -----------------------------------------------------

def cmd_synth(args):
    cfg = dp.SyntheticConfig(n_segments=args.n, seed=args.seed,
                             artifact_rate=args.artifact_rate,
                             pulse_freq_range_hz=(args.pulse_low, args.pulse_high),
                             n_subjects=args.subjects)
    segments = dp.generate_synthetic(cfg)
    dp.save_dataset(segments, args.out)
    labels_mean = float(np.mean([s.labels.mean() for s in segments])) if segments else 0.0
    print(f"wrote {len(segments)} segments to {args.out} (artifact fraction {labels_mean:.3f})")
    return 0


_RAW_NAME = re.compile(r"^S(\d+)\.raw$")


def _read_raw_dump(path):
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise ParseError(f"{path}: truncated header", offset=0)
    (count,) = struct.unpack_from("<I", raw, 0)
    expected = 4 + 4 * count + count
    if len(raw) != expected:
        raise ParseError(f"{path}: expected {expected} bytes for {count} samples, "
                         f"found {len(raw)}", offset=min(len(raw), expected))
    samples = np.frombuffer(raw, dtype="<f4", count=count, offset=4)
    labels = np.frombuffer(raw, dtype=np.uint8, count=count, offset=4 + 4 * count)
    return samples, labels


def cmd_preprocess(args):
    raw_dir = Path(args.raw_dir)
    if not raw_dir.is_dir():
        raise InputError(f"raw dump directory not found: {raw_dir}")
    files = sorted(raw_dir.glob("S*.raw"), key=lambda p: int(_RAW_NAME.match(p.name).group(1))
                   if _RAW_NAME.match(p.name) else 0)
    files = [f for f in files if _RAW_NAME.match(f.name)]
    if not files:
        raise InputError(f"no S<id>.raw dumps found in {raw_dir}")
    spec = dp.FilterSpec(low_hz=args.low, high_hz=args.high, order=args.order)
    all_segments = []
    for f in files:
        subject = int(_RAW_NAME.match(f.name).group(1))
        samples, labels = _read_raw_dump(f)
        rec = dp.RawRecording(subject_id=subject, sample_rate_hz=dp.SAMPLE_RATE,
                              samples=samples, labels=labels)
        segments = dp.segment_and_normalize(dp.bandpass_filter(rec, spec))
        print(f"subject {subject} segments {len(segments)}")
        all_segments.extend(segments)
    dp.save_dataset(all_segments, args.out)
    print(f"total segments {len(all_segments)}")
    return 0


def cmd_train(args):
    segments = _load_segments(args.data)
    mc = ModelConfig(standard_conv=args.standard_conv, use_aspp=not args.no_aspp)
    model = build_model(mc, seed=args.seed, with_head=True)
    return _run_training(args, model, segments)


def cmd_finetune(args):
    segments = _load_segments(args.data)
    model = _load_model(args.model)
    return _run_training(args, model, segments)


def cmd_prune(args):
    model = _load_model(args.model)
    cfg = PruneConfig(ratio=args.ratio)
    masked = apply_prune(model, cfg)
    result = masked if args.no_compact else compact(masked)
    save_model(result, args.out)
    kind = "masked" if args.no_compact else "compacted"
    print(f"pruned ratio {args.ratio} -> {kind} model with {count_parameters(result)} "
          f"parameters at {args.out}")
    return 0


def cmd_eval(args):
    model = _load_model(args.model)
    segments = _load_segments(args.data)
    counts, overall, per_segment = evaluate(model, segments, threshold=args.threshold)
    lines = [
        f"segments {len(segments)}",
        f"tp {counts.tp}",
        f"fp {counts.fp}",
        f"fn {counts.fn}",
        f"tn {counts.tn}",
        f"overall_dice {overall:.6f}",
        "per_segment_dice " + " ".join(f"{d:.4f}" for d in per_segment),
    ]
    report = "\n".join(lines)
    if args.out:
        Path(args.out).write_text(report + "\n")
    print(report)
    return 0


def cmd_infer(args):
    model = _load_model(args.model)
    path = Path(args.data)
    if not path.exists():
        raise InputError(f"input file not found: {path}")
    with open(path, "rb") as f:
        magic = f.read(4)
    if magic == dp.MAGIC:
        segments = dp.load_dataset(path)
        stream = np.concatenate([s.samples for s in segments]) if segments else np.empty(0)
    else:
        stream = np.fromfile(path, dtype="<f4")
    results, stats = infer_stream(model, stream, window=args.window, hop=args.hop,
                                  threshold=args.threshold)
    lines = []
    for r in results:
        runs = run_length_encode(r.mask)
        runs_text = ",".join(f"{a}:{b}" for a, b in runs) if runs else "none"
        lines.append(f"window {r.index} start {r.start_sample} runs {runs_text}")
    lines.append(f"windows {stats.windows_processed} "
                 f"mean_latency_s {stats.mean_latency:.6f} "
                 f"max_latency_s {stats.max_latency:.6f} "
                 f"peak_bytes {stats.peak_bytes}")
    text = "\n".join(lines)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_export_embeddings(args):
    model = _load_model(args.model)
    segments = _load_segments(args.data)
    n = export_embeddings(model, segments, args.out, max_points=args.max_points,
                          seed=args.seed)
    print(f"wrote {n} embedding rows to {args.out}")
    return 0


def cmd_plan_memory(args):
    model = _load_model(args.model)
    if model.head is not None:
        model = model.without_head()
    plan = plan_memory(model)
    lines = [
        f"weight_bytes {plan.weight_bytes}",
        f"peak_bytes {plan.peak_bytes}",
        f"arena_total_bytes {plan.arena_total_bytes}",
        "buffers (name channels length bytes offset start end):",
    ]
    for name, c, L, nbytes, offset, start, end in plan.table():
        lines.append(f"  {name} {c} {L} {nbytes} {offset} {start} {end}")
    code = 0
    if args.budget_bytes is not None:
        if plan.peak_bytes <= args.budget_bytes:
            lines.append(f"budget_bytes {args.budget_bytes} within")
        else:
            lines.append(f"budget_bytes {args.budget_bytes} EXCEEDED")
            code = 1
    text = "\n".join(lines)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return code


# -- parser ------------------------------------------------------------------

def _add_train_flags(p, default_epochs, default_l1):
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log", default=None, help="training log CSV path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=default_epochs)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=0.0005)
    p.add_argument("--lambda", dest="lam", type=float, default=0.1)
    p.add_argument("--tau", type=float, default=0.1)
    p.add_argument("--contrastive", choices=["off", "both", "artifact", "clean"],
                   default="off")
    p.add_argument("--bank-size", type=int, default=0,
                   help="per-class memory bank capacity; 0 disables the bank")
    p.add_argument("--l1-gamma", dest="l1_gamma", type=float, default=default_l1,
                   help="L1 sparsity weight on BN scales (pruning preparation)")
    p.add_argument("--test-subjects", default="",
                   help="comma-separated subject ids held out for testing")
    p.add_argument("--val-fraction", type=float, default=0.10)
    p.add_argument("--threshold", type=float, default=0.5)


def build_parser():
    parser = argparse.ArgumentParser(prog="tinyppg",
                                     description="PPG motion-artifact segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labeled dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--artifact-rate", type=float, default=0.3)
    p.add_argument("--pulse-low", type=float, default=1.0)
    p.add_argument("--pulse-high", type=float, default=2.5)
    p.add_argument("--subjects", type=int, default=10)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="filter + segment raw dumps into a TPPG dataset")
    p.add_argument("--raw-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--low", type=float, default=0.9)
    p.add_argument("--high", type=float, default=5.0)
    p.add_argument("--order", type=int, default=4)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train a model from scratch")
    _add_train_flags(p, default_epochs=1000, default_l1=1e-4)
    p.add_argument("--standard-conv", action="store_true",
                   help="ablation: standard convs instead of depthwise separable")
    p.add_argument("--no-aspp", action="store_true", help="ablation: drop the dilated pyramid")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="continue training a saved (e.g. pruned) model")
    _add_train_flags(p, default_epochs=20, default_l1=0.0)
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("prune", help="rank, mask and compact channels by BN scale")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ratio", type=float, required=True)
    p.add_argument("--no-compact", action="store_true",
                   help="keep the masked model instead of compacting")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("eval", help="pooled DICE over a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="streaming inference over raw float32 or TPPG input")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--window", type=int, default=1920)
    p.add_argument("--hop", type=int, default=1920)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("export-embeddings", help="dump per-point embeddings to CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-points", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_export_embeddings)

    p = sub.add_parser("plan-memory", help="activation arena plan and budget check")
    p.add_argument("--model", required=True)
    p.add_argument("--budget-bytes", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_plan_memory)

    return parser


def cli_dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        code = exc.code if isinstance(exc.code, int) else 2
        return 0 if code == 0 else 2
    try:
        return int(args.func(args) or 0)
    except (InputError, ParseError, TrainingDiverged) as exc:
        _log(f"error: {exc}")
        return 1
    except FileNotFoundError as exc:
        _log(f"error: file not found: {exc.filename or exc}")
        return 1
    except (ConfigError, StateError) as exc:
        _log(f"error: {exc}")
        return 2


def main():
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
