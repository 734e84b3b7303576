"""Command-line entry point: ``deepwriter <subcommand> [flags]``.

Human-readable results go to stdout (no timestamps, so equal runs give equal
output); diagnostics go to stderr through :mod:`logging`.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

from threadpoolctl import threadpool_limits

from . import checkpoint as ckpt_mod
from .data import ADAPTERS, ManifestEntry, load_dataset, load_image, split_per_writer, write_manifest
from .errors import DeepWriterError
from .model import DEFAULT_INIT, INITS, deepwriter_spec, output_shapes, param_count
from .optim import TrainConfig
from .patching import ENGLISH_RATIO, PatchPlan
from .pipeline import evaluate, finetune, identify, train
from .synth import DEFAULT_LAYOUT, generate_synthetic_corpus

log = logging.getLogger("deepwriter")

ARCH_STREAMS = {"deepwriter": 2, "half": 1}
THREADS_ENV = "DEEPWRITER_THREADS"


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _add_arch_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("architecture")
    g.add_argument("--arch", choices=sorted(ARCH_STREAMS), default="deepwriter",
                   help="deepwriter = two streams over patch pairs, half = one stream")
    g.add_argument("--input", type=_positive_int, default=113, help="patch side in pixels")
    g.add_argument("--conv1", default="96C5S2")
    g.add_argument("--conv2", default="256C3S1P1")
    g.add_argument("--fc-width", type=_positive_int, default=1024)
    g.add_argument("--dropout", type=float, default=0.5)
    g.add_argument("--scale", type=float, default=1.0, help="channel/width multiplier")


def _add_train_flags(p: argparse.ArgumentParser, defaults: TrainConfig) -> None:
    g = p.add_argument_group("optimisation")
    g.add_argument("--manifest", required=True, help="manifest.jsonl with train/val splits")
    g.add_argument("--batch-size", type=_positive_int, default=defaults.batch_size)
    g.add_argument("--momentum", type=float, default=defaults.momentum)
    g.add_argument("--weight-decay", type=float, default=defaults.weight_decay)
    g.add_argument("--lr", type=float, default=defaults.base_lr)
    g.add_argument("--lr-drop", type=float, default=defaults.lr_drop_factor)
    g.add_argument("--lr-step", type=_positive_int, default=defaults.lr_step)
    g.add_argument("--stop-iter", type=_positive_int, default=defaults.stop_iter)
    g.add_argument("--classifier-lr-mult", type=float, default=defaults.classifier_lr_mult)
    g.add_argument("--init", choices=INITS, default=DEFAULT_INIT)
    g.add_argument("--ratio", type=float, default=ENGLISH_RATIO,
                   help="patch sampling ratio used for validation")
    g.add_argument("--log-every", type=_positive_int, default=100)
    g.add_argument("--val-every", type=_positive_int, default=None)
    g.add_argument("--out", required=True, help="output checkpoint path")
    g.add_argument("--metrics-out", default=None, help="also write metrics as JSON lines")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deepwriter", description="Writer identification from handwriting patches.")
    parser.add_argument("--seed", type=int, default=0, help="seed for all randomness")
    parser.add_argument("--threads", type=_positive_int, default=None,
                        help=f"BLAS threads (default ${THREADS_ENV} or 1)")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug diagnostics on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic handwriting corpus")
    p.add_argument("--writers", type=_positive_int, default=10)
    p.add_argument("--samples", type=_positive_int, default=30)
    p.add_argument("--script", choices=sorted(DEFAULT_LAYOUT), default="latin")
    p.add_argument("--layout", choices=("line", "char"), default=None)
    p.add_argument("--height", type=_positive_int, default=40)
    p.add_argument("--out", required=True)

    p = sub.add_parser("split", help="build a 4:1:1 per-writer manifest from a dataset directory")
    p.add_argument("--root", required=True)
    p.add_argument("--adapter", choices=sorted(ADAPTERS), default="writer-dirs")
    p.add_argument("--out", default=None, help="manifest path (default <root>/manifest.jsonl)")

    p = sub.add_parser("train", help="train from scratch")
    _add_arch_flags(p)
    _add_train_flags(p, TrainConfig())

    p = sub.add_parser("finetune", help="train from a source checkpoint with a new classifier")
    _add_arch_flags(p)
    _add_train_flags(p, TrainConfig.finetune_defaults())
    p.add_argument("--source", required=True, help="checkpoint to transfer from")

    p = sub.add_parser("eval", help="accuracy on a manifest split")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--ratio", type=float, default=ENGLISH_RATIO)

    p = sub.add_parser("identify", help="predict the writer of one image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--ratio", type=float, default=ENGLISH_RATIO)

    p = sub.add_parser("inspect", help="print a model's layer shape trace")
    p.add_argument("--model", default=None, help="checkpoint (otherwise use the architecture flags)")
    p.add_argument("--classes", type=_positive_int, default=10)
    _add_arch_flags(p)
    return parser


# -- commands ------------------------------------------------------------------

def _spec_from_args(args, num_classes: int):
    return deepwriter_spec(num_classes, args.input, conv1=args.conv1, conv2=args.conv2,
                           fc_width=args.fc_width, dropout=args.dropout, scale=args.scale)


def _config_from_args(args) -> TrainConfig:
    return TrainConfig(batch_size=args.batch_size, momentum=args.momentum,
                       weight_decay=args.weight_decay, base_lr=args.lr,
                       lr_drop_factor=args.lr_drop, lr_step=args.lr_step,
                       stop_iter=args.stop_iter, seed=args.seed,
                       classifier_lr_mult=args.classifier_lr_mult)


def cmd_synth(args) -> None:
    entries = generate_synthetic_corpus(args.out, args.writers, args.samples, args.seed,
                                        args.script, args.layout, args.height)
    print(f"wrote {len(entries)} images by {args.writers} writers to {Path(args.out) / 'manifest.jsonl'}")


def cmd_split(args) -> None:
    root = Path(args.root)
    out = Path(args.out) if args.out else root / "manifest.jsonl"
    entries = ADAPTERS[args.adapter](root)
    if not entries:
        raise DeepWriterError(f"no images found under {root}")
    # Manifest paths are relative to the manifest's own directory.
    rebase = os.path.relpath(root.resolve(), out.parent.resolve())
    if rebase != ".":
        entries = [ManifestEntry(Path(rebase, e.path).as_posix(), e.writer, e.split) for e in entries]
    entries = split_per_writer(entries, args.seed)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_manifest(entries, out)
    counts = {s: sum(e.split == s for e in entries) for s in ("train", "val", "test")}
    print(f"wrote {out}: " + " ".join(f"{k}={v}" for k, v in counts.items()))


def _run_training(args, phase_source=None) -> None:
    streams = ARCH_STREAMS[args.arch]
    data, labels = load_dataset(args.manifest, "train")
    val, _ = load_dataset(args.manifest, "val", labels)
    spec = _spec_from_args(args, len(labels))
    config = _config_from_args(args)
    plan = PatchPlan.for_side(spec.input_side, args.ratio)
    metrics = open(args.metrics_out, "w", encoding="utf-8") if args.metrics_out else None

    def on_record(rec):
        print(rec.line(), flush=True)
        if metrics:
            metrics.write(json.dumps({k: v for k, v in vars(rec).items() if v is not None}) + "\n")

    try:
        kw = dict(val=val, plan=plan, labels=labels, log_every=args.log_every,
                  val_every=args.val_every, init=args.init, on_record=on_record)
        if phase_source is None:
            result = train(spec, streams, config, data, **kw)
        else:
            result = finetune(spec, streams, phase_source, config, data, **kw)
    finally:
        if metrics:
            metrics.close()
    ckpt = ckpt_mod.from_network(result.network, result.state, config=config.to_dict(),
                                 phase="scratch" if phase_source is None else "finetune")
    ckpt_mod.save_checkpoint(ckpt, args.out)
    print(f"saved {args.out}")


def cmd_train(args) -> None:
    _run_training(args)


def cmd_finetune(args) -> None:
    _run_training(args, ckpt_mod.load_checkpoint(args.source))


def _load_model(path):
    return ckpt_mod.to_network(ckpt_mod.load_checkpoint(path))


def cmd_eval(args) -> None:
    net = _load_model(args.model)
    samples, _ = load_dataset(args.manifest, args.split, net.labels)
    report = evaluate(net, samples, PatchPlan.for_side(net.spec.input_side, args.ratio))
    print(f"split={args.split} accuracy={report.accuracy:.4f} correct={report.correct}/{len(report.rows)}")


def cmd_identify(args) -> None:
    net = _load_model(args.model)
    idx, scores = identify(net, load_image(args.image), PatchPlan.for_side(net.spec.input_side, args.ratio))
    label = net.labels[idx] if idx < len(net.labels) else str(idx)
    print(f"writer={label} confidence={float(scores[idx]):.6f}")


def cmd_inspect(args) -> None:
    if args.model:
        ckpt = ckpt_mod.load_checkpoint(args.model)
        spec, streams = ckpt.spec, int(ckpt.meta.get("streams", 1))
    else:
        spec, streams = _spec_from_args(args, args.classes), ARCH_STREAMS[args.arch]
    for token, dims in output_shapes(spec):
        print(f"{token:<12} {'x'.join(map(str, dims))}")
    print(f"streams={streams} params={param_count(spec)} fingerprint={spec.fingerprint()[:16]}")


COMMANDS = {
    "synth": cmd_synth, "split": cmd_split, "train": cmd_train, "finetune": cmd_finetune,
    "eval": cmd_eval, "identify": cmd_identify, "inspect": cmd_inspect,
}


def _thread_count(args) -> int:
    if args.threads is not None:
        return args.threads
    env = os.environ.get(THREADS_ENV)
    if env is None:
        return 1
    try:
        return _positive_int(env)
    except (ValueError, argparse.ArgumentTypeError):
        raise DeepWriterError(f"{THREADS_ENV} must be a positive integer, got {env!r}")


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(_thread_count(args)):
            COMMANDS[args.command](args)
    except (DeepWriterError, OSError, ValueError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"deepwriter {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0
