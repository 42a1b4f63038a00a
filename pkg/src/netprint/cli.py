"""Command-line entry point: ``netprint <subcommand> [flags]``.

Every run prints its resolved configuration as ``# key=value`` lines first.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import matcher, synthgen, trainer
from .codec import CodecConfig, EmptyTraceError, load_corpus
from .convlstm import AutoencoderHyper, ConvLstmConfig
from .diffcore import ShapeError
from .protonet import EmbedConfig

EXIT_OK = 0
EXIT_CONTRACT = 1


def _header(args: argparse.Namespace, out) -> None:
    for key, val in sorted(vars(args).items()):
        if key == "func":
            continue
        print(f"# {key}={val}", file=out)


def cmd_gen(args) -> int:
    traces = synthgen.make_corpus(args.devices, args.lines, args.similarity, args.seed)
    paths = synthgen.write_corpus(traces, args.out)
    print(f"wrote {len(paths)} device traces to {args.out}")
    return EXIT_OK


def _train_config(args) -> trainer.TrainConfig:
    return trainer.TrainConfig(
        codec=CodecConfig(max_len=args.max_len),
        convlstm=ConvLstmConfig(args.hidden, args.kernel),
        embed=EmbedConfig(args.embed_dim, args.embed_channels, args.embed_kernel),
        phase1=AutoencoderHyper(args.epochs, args.ae_batch, args.ae_lr),
        phase2=trainer.Phase2Hyper(args.batches, args.batch_size, args.pos_fraction, args.lr, args.window_pool),
        split_ratio=args.split_ratio,
        window_stride=args.window_stride,
        seed=args.seed,
    )


def cmd_train(args) -> int:
    traces = load_corpus(args.corpus)
    cfg = _train_config(args)
    model = trainer.train(traces, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    matcher.save_weights(
        out / "weights.dnp",
        model.theta,
        model.phi,
        cfg.codec,
        seed=cfg.seed,
        train_devices=",".join(model.split.train_devices),
        held_out_devices=",".join(model.split.held_out_devices),
    )
    with open(out / "curves.tsv", "w") as fh:
        fh.write("phase\tstep\tloss\n")
        for i, v in enumerate(model.phase1_losses):
            fh.write(f"1\t{i}\t{v!r}\n")
        for i, v in enumerate(model.phase2_losses):
            fh.write(f"2\t{i}\t{v!r}\n")
    print(f"train devices: {' '.join(model.split.train_devices)}")
    print(f"held-out devices: {' '.join(model.split.held_out_devices) or '-'}")
    print(f"phase1 recon loss {model.phase1_initial:.6f} -> {model.phase1_final:.6f}")
    tail = model.phase2_losses[-200:]
    print(f"phase2 pair loss (last {len(tail)} batches) {float(np.mean(tail)):.6f}")
    print(f"wrote {out / 'weights.dnp'} and {out / 'curves.tsv'}")
    return EXIT_OK


def cmd_fingerprint(args) -> int:
    bundle = matcher.load_weights(args.weights)
    model = matcher.build_fingerprint(args.target, bundle.theta, bundle.phi, bundle.codec, args.tau, args.seed)
    matcher.save_model(model, args.out)
    print(f"fingerprint for {model.target} ({model.c_t.support_count} packets) written to {args.out}")
    return EXIT_OK


def cmd_scan(args) -> int:
    model = matcher.load_model(args.model)
    result = matcher.scan_stream(model, args.stream, args.tau)
    text = result.log()
    if args.log:
        Path(args.log).write_text(text)
        print(result.summary())
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_eval(args) -> int:
    bundle = matcher.load_weights(args.weights)
    traces = load_corpus(args.corpus)
    ids = [t.device_id for t in traces]
    if "train_devices" in bundle.meta:
        train_ids = tuple(d for d in bundle.meta["train_devices"].split(",") if d)
        split = trainer.SplitSpec(train_ids, tuple(d for d in sorted(ids) if d not in train_ids))
    else:
        split = trainer.split_devices(ids, args.split_ratio, args.seed)
    report = trainer.evaluate(bundle.theta, bundle.phi, traces, split, bundle.codec, args.tau)
    print(trainer.format_report(report))
    if args.log:
        with open(args.log, "w") as fh:
            fh.write("target\tsource\tindex\tp_target\tdecision\n")
            for d in report.decisions:
                fh.write(d.line() + "\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = trainer.composed_gradcheck(seed=args.seed, samples=args.samples, h=args.h, tol=args.tol)
    print(f"checked {report.checked} elements")
    print(f"worst {report.worst_param}[{report.worst_index}]")
    print(f"max relative error {report.max_rel_error:.3e} (tol {report.tol:g}) {'PASS' if report.passed else 'FAIL'}")
    return EXIT_OK if report.passed else EXIT_CONTRACT


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="netprint", description="Few-shot IoT device fingerprinting from packet info strings.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic device corpus")
    p.add_argument("--out", required=True, help="corpus directory")
    p.add_argument("--devices", type=int, default=8)
    p.add_argument("--lines", type=int, default=400, help="packets per device")
    p.add_argument("--similarity", type=float, default=0.6)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="phase 1 autoencoder then phase 2 embedder")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="output directory for weights.dnp and curves.tsv")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split-ratio", type=float, default=12 / 23, help="fraction of devices used for training")
    p.add_argument("--max-len", type=int, default=96)
    p.add_argument("--hidden", type=int, default=16, help="ConvLSTM hidden channels")
    p.add_argument("--kernel", type=int, default=5, help="ConvLSTM kernel width")
    p.add_argument("--embed-dim", type=int, default=32)
    p.add_argument("--embed-channels", type=int, default=16)
    p.add_argument("--embed-kernel", type=int, default=3)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--ae-batch", type=int, default=8)
    p.add_argument("--ae-lr", type=float, default=1e-3)
    p.add_argument("--window-stride", type=int, default=20)
    p.add_argument("--batches", type=int, default=2000)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--pos-fraction", type=float, default=0.5)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--window-pool", type=int, default=64, help="cached window offsets per device in phase 2")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fingerprint", help="build a fingerprint model from a target trace")
    p.add_argument("--weights", required=True)
    p.add_argument("--target", required=True, help="target trace; its first 20 packets are used")
    p.add_argument("--out", required=True)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_fingerprint)

    p = sub.add_parser("scan", help="flag probable target packets in a stream")
    p.add_argument("--model", required=True)
    p.add_argument("--stream", required=True)
    p.add_argument("--tau", type=float, default=None, help="override the model threshold")
    p.add_argument("--log", help="write the per-packet log here instead of stdout")
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("eval", help="every device as target against every packet")
    p.add_argument("--weights", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--split-ratio", type=float, default=12 / 23, help="used only if the weights carry no split")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log", help="per-decision log path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full pair-loss graph")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)
    _header(args, sys.stdout)
    try:
        return args.func(args)
    except (ValueError, ShapeError, EmptyTraceError, FileNotFoundError, KeyError) as e:
        msg = str(e).replace("\n", " ")
        print(f"netprint {args.command}: {type(e).__name__}: {msg}", file=sys.stderr)
        return EXIT_CONTRACT
