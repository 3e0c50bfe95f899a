"""Desk-scale comparison of the meta-learned decoder against the supervised base model.

For each seed: one dataset, base and meta models at two input resolutions, and
a meta model trained from a fresh decoder. Run as
``python -m fewshot_sdf.experiments OUT_DIR`` to print and save a summary.
"""

from __future__ import annotations

import argparse
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ck
from . import pipeline
from .config import ExperimentConfig, desk_profile

log = logging.getLogger(__name__)

# evaluation settings used by the comparison; coarser than the full-scale 256^3 grid
# and 100k samples so the whole study fits a desk budget
COMPARISON_EVAL = ["reconstruct.resolution=48", "eval.n_volume_samples=20000", "eval.n_surface_samples=20000"]


@dataclass
class SeedResult:
    seed: int
    iou: dict[str, float] = field(default_factory=dict)
    cd1: dict[str, float] = field(default_factory=dict)
    failures: dict[str, int] = field(default_factory=dict)
    support_traces: list[list[float]] = field(default_factory=list)
    query_traces: list[list[float]] = field(default_factory=list)
    heldout_query_loss: dict[str, float] = field(default_factory=dict)
    stage_seconds: dict[str, float] = field(default_factory=dict)
    seconds: float = 0.0

    def seconds_for(self, labels) -> float:
        """Data generation plus training and evaluation time of the given models."""
        keys = ["data"] + [f"{kind}_{lab}" for lab in labels for kind in ("train", "eval")]
        return float(sum(self.stage_seconds.get(k, 0.0) for k in keys))


def seed_config(seed: int, resolution: int, extra: list[str] = ()) -> ExperimentConfig:
    return desk_profile().with_overrides(
        [f"seed={seed}", f"dataset.seed={seed}", f"encoder.resolution={resolution}", *COMPARISON_EVAL, *extra]
    )


def run_seed(root, seed: int, resolutions=(32, 16), ablation: bool = True) -> SeedResult:
    root = Path(root) / f"seed{seed}"
    t0 = time.time()
    res = SeedResult(seed)
    data = root / "data"
    clock = time.time()

    def lap(key: str) -> None:
        nonlocal clock
        now = time.time()
        res.stage_seconds[key] = now - clock
        clock = now

    pipeline.gen_data(seed_config(seed, resolutions[0]), data, force=True)
    lap("data")
    test_ids, test = pipeline.load_split(data, "test")
    for n in resolutions:
        cfg = seed_config(seed, n)
        base = pipeline.train_base(cfg, data, root / f"base{n}", force=True)
        lap(f"train_base{n}")
        meta = pipeline.train_meta(cfg, data, base, root / f"meta{n}", force=True)
        lap(f"train_meta{n}")
        runs = [(f"base{n}", base), (f"meta{n}", meta)]
        if ablation and n == resolutions[0]:
            cfg_fresh = seed_config(seed, n, ["ablation.no_decoder_pretrain=true"])
            runs.append((f"meta{n}_fresh", pipeline.train_meta(cfg_fresh, data, base, root / f"meta{n}_fresh",
                                                               force=True)))
            lap(f"train_meta{n}_fresh")
        for label, ckpt in runs:
            model = pipeline.load_model(ckpt)
            r = pipeline.evaluate_model(model, test_ids, test, label, cfg.reconstruct.resolution,
                                        cfg.eval.n_volume_samples, cfg.eval.n_surface_samples, cfg.eval.seed)
            # a failed shape (empty mesh) counts as IoU 0 so failures cannot flatter a model
            ious = [rep.iou for rep in r.reports] + [0.0] * len(r.failures)
            res.iou[label] = float(np.mean(ious))
            res.cd1[label] = r.mean("cd1")
            res.failures[label] = len(r.failures)
            lap(f"eval_{label}")
            log.info("seed %d %s: IoU %.4f CD1 %.5f (%d failed)", seed, label, res.iou[label], res.cd1[label],
                     len(r.failures))
        if n == resolutions[0]:
            model = pipeline.load_model(meta)
            sup, qry = pipeline.adaptation_traces(model, test)
            res.support_traces = sup.tolist()
            res.query_traces = qry.tolist()
            md = ck.load(meta).metadata
            res.heldout_query_loss = {"before": md["heldout_query_loss_before"],
                                      "after": md["heldout_query_loss_after"]}
            lap("traces")
    res.seconds = time.time() - t0
    (root / "result.json").write_text(json.dumps(res.__dict__, indent=2, sort_keys=True) + "\n")
    return res


def run_study(root, seeds=(0, 1, 2), resolutions=(32, 16)) -> list[SeedResult]:
    return [run_seed(root, s, resolutions) for s in seeds]


def format_table(results: list[SeedResult]) -> str:
    labels = list(results[0].iou)
    lines = ["seed  " + "  ".join(f"{lab:>13s}" for lab in labels)]
    for r in results:
        lines.append(f"{r.seed:<4d}  " + "  ".join(f"{r.iou[lab]:6.4f}/{r.cd1[lab]:6.4f}" for lab in labels))
    lines.append("(IoU / CD1 per model; CD1 raw, not rescaled)")
    return "\n".join(lines)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description="desk-scale base vs meta comparison")
    ap.add_argument("out_dir", type=Path)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    results = run_study(args.out_dir, args.seeds)
    table = format_table(results)
    print(table)
    (args.out_dir / "summary.txt").write_text(table + "\n")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
