"""Command line driver: ``fewshot-sdf <command> ...``.

Configuration comes from ``--config FILE`` (or ``--profile``), then the
configuration stored by the previous stage (dataset directory or base
checkpoint), then ``--set section.key=value`` overrides. The thread count of
the numba kernels can be set with ``FEWSHOT_SDF_THREADS`` or ``--threads``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import checkpoint as ck
from . import gradcheck, pipeline
from ._accel import set_threads
from .config import ExperimentConfig, load_config

log = logging.getLogger("fewshot_sdf")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON experiment configuration")
    p.add_argument("--profile", choices=("desk", "paper"), default=None,
                   help="built-in configuration profile (default: desk)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. --set meta.k=3 (repeatable)")
    p.add_argument("--seed", type=int, help="shorthand for --set seed=N and --set dataset.seed=N")
    p.add_argument("--threads", type=int, help="numba thread count")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fewshot-sdf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the procedural shape dataset")
    _common(p)
    p.add_argument("out_dir", type=Path)
    p.add_argument("--force", action="store_true", help="replace a non-empty output directory")

    p = sub.add_parser("train-base", help="supervised encoder+decoder training")
    _common(p)
    p.add_argument("data_dir", type=Path)
    p.add_argument("out_dir", type=Path)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--force", action="store_true", help="discard an existing run in out_dir")
    p.add_argument("--stop-after", type=int, help="stop after this many epochs (resume later)")

    p = sub.add_parser("train-meta", help="meta-learn the decoder on top of a frozen base encoder")
    _common(p)
    p.add_argument("data_dir", type=Path)
    p.add_argument("base_ckpt", type=Path)
    p.add_argument("out_dir", type=Path)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--force", action="store_true")
    p.add_argument("--stop-after", type=int)
    p.add_argument("--first-order", action="store_true", help="drop second-order terms of the meta-gradient")
    p.add_argument("--no-decoder-pretrain", action="store_true", help="start the decoder from random weights")
    p.add_argument("--no-meta", action="store_true", help="base-only ablation (the command then refuses)")

    p = sub.add_parser("reconstruct", help="mesh one point cloud")
    p.add_argument("ckpt", type=Path)
    p.add_argument("cloud", type=Path, help="points as .bin (dataset format) or whitespace text")
    p.add_argument("out_obj", type=Path)
    p.add_argument("--resolution", type=int, help="marching-cubes grid resolution R")
    p.add_argument("--adapt-steps", type=int, help="inner steps K (default: the checkpoint's K, 0 for base)")
    p.add_argument("--steps-dump", action="store_true", help="also write one mesh per inner step")
    p.add_argument("--threads", type=int)
    p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("eval", help="IoU / Chamfer evaluation of one or more checkpoints")
    _common(p)
    p.add_argument("data_dir", type=Path)
    p.add_argument("ckpts", type=Path, nargs="+")
    p.add_argument("--report", type=Path, required=True, help="CSV report path")
    p.add_argument("--labels", nargs="+", help="model names for the comparison table")
    p.add_argument("--split", choices=("train", "test"))
    p.add_argument("--adapt-steps", type=int)

    p = sub.add_parser("gradcheck", help="finite-difference checks of the gradients")
    p.add_argument("--scale", choices=("tiny", "small"), default="tiny")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _config(args, fallback: Path | None = None, extra: list[str] = ()) -> ExperimentConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides += [f"seed={args.seed}", f"dataset.seed={args.seed}"]
    overrides += list(extra)
    if args.config is not None or args.profile is not None or fallback is None:
        return load_config(args.config, args.profile or "desk", overrides)
    return _stored_config(fallback).with_overrides(overrides)


def _stored_config(source: Path) -> ExperimentConfig:
    if source.is_dir():
        path = source / pipeline.CONFIG_NAME
        if path.exists():
            return ExperimentConfig.load(path)
        return ExperimentConfig()
    return ExperimentConfig.from_dict(ck.load(source).metadata["config"])


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    manifest = pipeline.gen_data(cfg, args.out_dir, args.force)
    print(f"wrote {len(manifest['train'])} train and {len(manifest['test'])} test shapes to {args.out_dir}")
    return EXIT_OK


def cmd_train_base(args) -> int:
    cfg = _config(args, fallback=args.data_dir)
    path = pipeline.train_base(cfg, args.data_dir, args.out_dir, args.resume, args.force, args.stop_after)
    print(f"checkpoint {path}")
    return EXIT_OK


def cmd_train_meta(args) -> int:
    extra = []
    if args.first_order:
        extra.append("ablation.first_order=true")
    if args.no_decoder_pretrain:
        extra.append("ablation.no_decoder_pretrain=true")
    if args.no_meta:
        extra.append("ablation.no_meta=true")
    cfg = _config(args, fallback=args.base_ckpt, extra=extra)
    path = pipeline.train_meta(cfg, args.data_dir, args.base_ckpt, args.out_dir, args.resume, args.force,
                               args.stop_after)
    meta = ck.load(path).metadata
    print(f"checkpoint {path}")
    if meta.get("heldout_query_loss_after") is not None:
        print(f"held-out query loss {meta['heldout_query_loss_before']:.6f} -> {meta['heldout_query_loss_after']:.6f}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    written = pipeline.reconstruct(args.ckpt, args.cloud, args.out_obj, args.resolution, args.adapt_steps,
                                   args.steps_dump)
    for p in written:
        print(p)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args, fallback=args.ckpts[0])
    results = pipeline.evaluate(args.ckpts, args.data_dir, args.report, cfg, args.labels, args.split,
                                args.adapt_steps)
    print(f"{'model':<16s} {'IoU':>8s} {'CD1 x1e-1':>10s} {'CD2 x1e-3':>10s} {'shapes':>7s} {'failed':>7s}")
    for r in results:
        print(f"{r.label:<16s} {r.mean('iou'):8.4f} {r.mean('cd1') * 10:10.4f} {r.mean('cd2') * 1e3:10.4f} "
              f"{len(r.reports):7d} {len(r.failures):7d}")
    (args.report.parent / f"{args.report.stem}_summary.json").write_text(pipeline.summary_json(results))
    return EXIT_FAIL if any(r.failures for r in results) else EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradcheck.run(args.scale, args.seed)
    for r in results:
        print(r.line())
    worst = max(r.max_error for r in results if not r.expected_fail)
    ok = all(r.passed for r in results)
    print(f"{'PASS' if ok else 'FAIL'}: {len(results)} checks, max rel err {worst:.3e}")
    return EXIT_OK if ok else EXIT_FAIL


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-base": cmd_train_base,
    "train-meta": cmd_train_meta,
    "reconstruct": cmd_reconstruct,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "threads", None):
        set_threads(args.threads)
    try:
        return COMMANDS[args.command](args)
    except (pipeline.UsageError, ck.CheckpointError, ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
