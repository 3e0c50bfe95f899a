"""Experiment stages: data generation, base training, meta training, reconstruction, evaluation.

Every stage writes the effective configuration next to its outputs. Training
stages checkpoint after each epoch and can resume; the per-epoch shuffling is
derived from ``(seed, epoch)``, so a resumed run matches an uninterrupted one
bit for bit.
"""

from __future__ import annotations

import csv
import json
import logging
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint as ck
from . import decoder_meta as dm
from .autodiff import ParamSet
from .config import ExperimentConfig
from .encoder import EncoderConfig, init_encoder
from .geometry import ShapeRecord, load_dataset, make_dataset, read_array, save_dataset, voxelize
from .metrics import MetricsReport, evaluate_against_shape, mean_rows, write_report_csv
from .reconstruct import TriangleMesh, evaluate_grid, export_mesh, marching_cubes

log = logging.getLogger(__name__)

CONFIG_NAME = "config.json"
FINAL_NAME = "model.ckpt"
LAST_NAME = "last.ckpt"


class UsageError(RuntimeError):
    """A request the pipeline refuses, with guidance in the message."""


def write_config(cfg: ExperimentConfig, out_dir: Path) -> None:
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    (Path(out_dir) / CONFIG_NAME).write_text(cfg.to_json())


# -- data ----------------------------------------------------------------------------------


def gen_data(cfg: ExperimentConfig, out_dir, force: bool = False) -> dict:
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()):
        if not force:
            raise UsageError(f"{out_dir} exists and is not empty; pass --force to overwrite it")
        shutil.rmtree(out_dir)
    records = make_dataset(cfg.dataset)
    manifest = save_dataset(records, out_dir, cfg.dataset.split)
    write_config(cfg, out_dir)
    return manifest


def load_split(data_dir, split: str) -> tuple[list[str], list[ShapeRecord]]:
    data_dir = Path(data_dir)
    if not (data_dir / "manifest.json").exists():
        raise UsageError(f"{data_dir} has no manifest.json; run gen-data first")
    return load_dataset(data_dir, split)


# -- checkpoint helpers --------------------------------------------------------------------


def _prefixed(prefix: str, arrays: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v for k, v in arrays.items()}


def _prepare_out(out_dir: Path, resume: bool, force: bool) -> ck.Checkpoint | None:
    out_dir.mkdir(parents=True, exist_ok=True)
    last = out_dir / LAST_NAME
    if resume:
        return ck.load(last) if last.exists() else None
    if last.exists() and not force:
        raise UsageError(f"{out_dir} already holds a training run; pass --resume to continue or --force to restart")
    if force:
        for p in out_dir.glob("*.ckpt"):
            p.unlink()
    return None


def _write_epoch(out_dir: Path, ckpt: ck.Checkpoint, epoch: int, done: bool) -> None:
    ck.save(ckpt, out_dir / f"epoch_{epoch:03d}.ckpt")
    ck.save(ckpt, out_dir / LAST_NAME)
    if done:
        ck.save(ckpt, out_dir / FINAL_NAME)


def _write_loss_csv(path: Path, rows: list[list]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "iteration", "loss"])
        for e, i, v in rows:
            w.writerow([int(e), int(i), repr(float(v))])


# -- base training -------------------------------------------------------------------------


def train_base(cfg: ExperimentConfig, data_dir, out_dir, resume: bool = False, force: bool = False,
               stop_after: int | None = None) -> Path:
    """Supervised encoder+decoder training; returns the path of the newest checkpoint.

    ``stop_after`` ends the run after that many completed epochs, as an
    interruption would; ``resume`` continues from ``last.ckpt``.
    """
    out_dir = Path(out_dir)
    h = cfg.stage_hash("base")
    enc_cfg = cfg.encoder_config()
    _, records = load_split(data_dir, "train")
    if not records:
        raise UsageError("the training split is empty")
    prev = _prepare_out(out_dir, resume, force)
    adam = dm.Adam(cfg.base.lr)
    if prev is not None:
        ck.check_hash(prev, h, f"resume from {out_dir / LAST_NAME}")
        state = dm.BaseState(ParamSet(prev.group("encoder"), requires_grad=True),
                             ParamSet(prev.group("theta"), requires_grad=True))
        adam.load_state_arrays(prev.arrays, "adam")
        start = int(prev.metadata["epoch"])
        losses = [list(r) for r in prev.metadata["losses"]]
    else:
        rng = np.random.default_rng([cfg.seed, 1])
        state = dm.BaseState(init_encoder(enc_cfg, rng), dm.init_decoder(cfg.decoder_config(), rng))
        start, losses = 0, []
    write_config(cfg, out_dir)
    grids = [voxelize(r.cloud, enc_cfg.resolution) for r in records]

    def snapshot(epoch: int) -> ck.Checkpoint:
        arrays = _prefixed("encoder", state.encoder.arrays()) | _prefixed("theta", state.theta.arrays())
        arrays |= adam.state_arrays("adam")
        meta = {"stage": "base", "epoch": epoch, "epochs": cfg.base.epochs, "seed": cfg.seed,
                "rng": {"seed": cfg.seed, "next_epoch": epoch}, "losses": losses, "config": cfg.to_dict(),
                "complete": epoch >= cfg.base.epochs}
        return ck.Checkpoint(h, meta, arrays)

    if start == 0 and cfg.base.epochs == 0:
        _write_epoch(out_dir, snapshot(0), 0, True)
    for epoch in range(start, cfg.base.epochs):
        if stop_after is not None and epoch >= stop_after:
            break
        state, batch_losses = dm.base_epoch(state, records, grids, enc_cfg, cfg.base, epoch, cfg.seed, adam)
        losses.extend([epoch + 1, i, v] for i, v in enumerate(batch_losses))
        log.info("base epoch %d/%d mean loss %.6f", epoch + 1, cfg.base.epochs, float(np.mean(batch_losses)))
        _write_epoch(out_dir, snapshot(epoch + 1), epoch + 1, epoch + 1 == cfg.base.epochs)
        _write_loss_csv(out_dir / "loss.csv", losses)
    if not losses:
        _write_loss_csv(out_dir / "loss.csv", losses)
    return out_dir / (FINAL_NAME if (out_dir / FINAL_NAME).exists() else LAST_NAME)


# -- meta training -------------------------------------------------------------------------


def _tasks(encoder: ParamSet, records: list[ShapeRecord], enc_cfg: EncoderConfig) -> list[dm.ShapeTask]:
    return [dm.make_task(encoder, r, enc_cfg) for r in records]


def train_meta(cfg: ExperimentConfig, data_dir, base_ckpt, out_dir, resume: bool = False, force: bool = False,
               stop_after: int | None = None) -> Path:
    if cfg.ablation.no_meta:
        raise UsageError(
            "ablation.no_meta is set, so there is nothing to meta-train; reconstruct or evaluate "
            "the base checkpoint directly (it is used without adaptation)"
        )
    out_dir = Path(out_dir)
    base = ck.load(base_ckpt)
    ck.check_hash(base, cfg.stage_hash("base"), f"base checkpoint {base_ckpt}")
    if base.metadata.get("stage") != "base" or not base.metadata.get("complete"):
        raise UsageError(f"{base_ckpt} is not a finished base-training checkpoint")
    h = cfg.stage_hash("meta")
    mcfg = cfg.meta_config()
    enc_cfg = cfg.encoder_config()
    encoder = ParamSet(base.group("encoder"))
    _, train_recs = load_split(data_dir, "train")
    _, test_recs = load_split(data_dir, "test")
    prev = _prepare_out(out_dir, resume, force)
    adam = dm.make_outer_optimizer(mcfg)
    if prev is not None:
        ck.check_hash(prev, h, f"resume from {out_dir / LAST_NAME}")
        state = dm.MetaState(ParamSet(prev.group("theta"), requires_grad=True),
                             ParamSet(prev.group("alpha"), requires_grad=True))
        if adam is not None:
            adam.load_state_arrays(prev.arrays)
        start = int(prev.metadata["epoch"])
        losses = [list(r) for r in prev.metadata["losses"]]
        before = prev.metadata["heldout_query_loss_before"]
    else:
        if cfg.ablation.no_decoder_pretrain:
            theta = dm.init_decoder(cfg.decoder_config(), np.random.default_rng([cfg.seed, 2]))
        else:
            theta = ParamSet(base.group("theta"), requires_grad=True)
        state = dm.MetaState(theta, dm.init_alpha(theta, mcfg.alpha_init))
        start, losses, before = 0, [], None
    write_config(cfg, out_dir)
    tasks = _tasks(encoder, train_recs, enc_cfg)
    heldout = _tasks(encoder, test_recs, enc_cfg)
    if before is None:
        before = dm.mean_query_loss(state, heldout, mcfg) if heldout else None
    after = None

    def snapshot(epoch: int) -> ck.Checkpoint:
        arrays = _prefixed("encoder", encoder.arrays()) | _prefixed("theta", state.theta.arrays())
        arrays |= _prefixed("alpha", state.alpha.arrays())
        if adam is not None:
            arrays |= adam.state_arrays()
        meta = {"stage": "meta", "epoch": epoch, "epochs": mcfg.epochs, "seed": cfg.seed,
                "rng": {"seed": cfg.seed, "next_epoch": epoch}, "losses": losses, "config": cfg.to_dict(),
                "first_order": not mcfg.second_order, "no_decoder_pretrain": cfg.ablation.no_decoder_pretrain,
                "heldout_query_loss_before": before, "heldout_query_loss_after": after,
                "complete": epoch >= mcfg.epochs}
        return ck.Checkpoint(h, meta, arrays)

    if start == 0 and mcfg.epochs == 0:
        after = before
        _write_epoch(out_dir, snapshot(0), 0, True)
    for epoch in range(start, mcfg.epochs):
        if stop_after is not None and epoch >= stop_after:
            break
        state, batch_losses = dm.meta_epoch(state, tasks, mcfg, epoch, cfg.seed, adam)
        losses.extend([epoch + 1, i, v] for i, v in enumerate(batch_losses))
        log.info("meta epoch %d/%d mean query loss %.6f", epoch + 1, mcfg.epochs, losses[-1][2])
        done = epoch + 1 == mcfg.epochs
        if done and heldout:
            after = dm.mean_query_loss(state, heldout, mcfg)
        _write_epoch(out_dir, snapshot(epoch + 1), epoch + 1, done)
        _write_loss_csv(out_dir / "loss.csv", losses)
    if not losses:
        _write_loss_csv(out_dir / "loss.csv", losses)
    return out_dir / (FINAL_NAME if (out_dir / FINAL_NAME).exists() else LAST_NAME)


# -- models and reconstruction --------------------------------------------------------------


@dataclass
class Model:
    encoder: ParamSet
    theta: ParamSet
    alpha: ParamSet | None
    config: ExperimentConfig
    stage: str

    @property
    def default_k(self) -> int:
        return self.config.meta.k if self.alpha is not None else 0


def load_model(path) -> Model:
    c = ck.load(path)
    cfg = ExperimentConfig.from_dict(c.metadata["config"])
    alpha = ParamSet(c.group("alpha")) if c.has_group("alpha") else None
    return Model(ParamSet(c.group("encoder")), ParamSet(c.group("theta")), alpha, cfg, c.metadata.get("stage", "?"))


def read_cloud(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".bin":
        pts = read_array(path)
    else:
        pts = np.loadtxt(path, ndmin=2)
    pts = np.asarray(pts, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
        raise UsageError(f"{path}: expected a nonempty list of 3D points")
    if np.any(np.abs(pts) > 1.0):
        raise UsageError(f"{path}: points outside [-1, 1]^3")
    return pts


def evaluator_for(model: Model, cloud: np.ndarray, k: int | None = None) -> dm.SDFEvaluator:
    k = model.default_k if k is None else k
    if k > 0 and model.alpha is None:
        raise UsageError("adaptation needs learning rates alpha, which only meta checkpoints carry")
    return dm.infer(model.theta, model.alpha, model.encoder, cloud, model.config.encoder_config(), k)


def mesh_from_evaluator(ev, r: int) -> TriangleMesh:
    return marching_cubes(evaluate_grid(ev, r))


def reconstruct(ckpt, cloud_file, out_obj, r: int | None = None, k: int | None = None,
                steps_dump: bool = False) -> list[Path]:
    """Write the reconstruction to ``out_obj``; with ``steps_dump`` also one mesh per inner step."""
    model = load_model(ckpt)
    cloud = read_cloud(cloud_file)
    r = model.config.reconstruct.resolution if r is None else r
    ev = evaluator_for(model, cloud, k)
    out_obj = Path(out_obj)
    out_obj.parent.mkdir(parents=True, exist_ok=True)
    written = []
    if steps_dump:
        for i in range(len(ev.step_params)):
            p = out_obj.with_name(f"{out_obj.stem}_step{i}{out_obj.suffix}")
            export_mesh(mesh_from_evaluator(ev.at_step(i), r), p)
            written.append(p)
    export_mesh(mesh_from_evaluator(ev, r), out_obj)
    written.append(out_obj)
    return written


# -- evaluation -------------------------------------------------------------------------------


@dataclass
class EvalResult:
    label: str
    reports: list[MetricsReport]
    failures: list[tuple[str, str]]

    def mean(self, metric: str) -> float:
        vals = [getattr(r, metric) for r in self.reports]
        return float(np.mean(vals)) if vals else float("nan")


def evaluate_model(model: Model, ids: list[str], records: list[ShapeRecord], label: str, r: int,
                   n_volume: int, n_surface: int, seed: int, k: int | None = None) -> EvalResult:
    reports, failures = [], []
    for sid, rec in zip(ids, records):
        try:
            mesh = mesh_from_evaluator(evaluator_for(model, rec.cloud, k), r)
            reports.append(evaluate_against_shape(mesh, rec.shape, sid, n_volume, n_surface, seed))
        except (ValueError, FloatingPointError) as exc:
            log.warning("%s: shape %s failed: %s", label, sid, exc)
            failures.append((sid, str(exc)))
    return EvalResult(label, reports, failures)


def evaluate(ckpts: list, data_dir, report_csv, cfg: ExperimentConfig | None = None,
             labels: list[str] | None = None, split: str | None = None, k: int | None = None) -> list[EvalResult]:
    """Evaluate checkpoints on a split; one CSV per model, plus a comparison table for several.

    Evaluation settings (grid resolution, sample counts, seed) come from ``cfg``
    when given, otherwise from the first checkpoint's stored config.
    """
    models = [load_model(p) for p in ckpts]
    cfg = cfg or models[0].config
    split = split or cfg.eval.split
    ids, records = load_split(data_dir, split)
    labels = labels or [Path(p).parent.name or Path(p).stem for p in ckpts]
    if len(set(labels)) != len(labels):
        labels = [f"{lab}_{i}" for i, lab in enumerate(labels)]
    report_csv = Path(report_csv)
    report_csv.parent.mkdir(parents=True, exist_ok=True)
    results = []
    for model, label in zip(models, labels):
        res = evaluate_model(model, ids, records, label, cfg.reconstruct.resolution, cfg.eval.n_volume_samples,
                             cfg.eval.n_surface_samples, cfg.eval.seed, k)
        results.append(res)
        path = report_csv if len(models) == 1 else report_csv.with_name(f"{report_csv.stem}_{label}.csv")
        write_report_csv(path, res.reports)
    if len(models) > 1:
        with open(report_csv, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["model", "metric", "raw", "reported", "n_shapes", "n_failed"])
            for res in results:
                for row in mean_rows(res.reports, res.label):
                    w.writerow([row[0], row[1], repr(row[2]), repr(row[3]), len(res.reports), len(res.failures)])
    write_config(cfg, report_csv.parent)
    return results


def adaptation_traces(model: Model, records: list[ShapeRecord], k: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-shape mean support loss and mean query loss after each of 0..K inner steps."""
    k = model.default_k if k is None else k
    sup, qry = [], []
    clamp = model.config.meta.clamp
    for rec in records:
        ev = evaluator_for(model, rec.cloud, k)
        q_feats = ev.features(rec.samples.points)
        s_feats = ev.features(rec.cloud)
        target = np.clip(rec.samples.sdf, -clamp, clamp)
        s_row, q_row = [], []
        for params in ev.step_params:
            with_params = dm.decode(params, s_feats).data
            s_row.append(float(np.abs(with_params).mean()))
            q_row.append(float(np.abs(dm.decode(params, q_feats).data - target).mean()))
        sup.append(s_row)
        qry.append(q_row)
    return np.array(sup), np.array(qry)


def summary_json(results: list[EvalResult]) -> str:
    return json.dumps({r.label: {"iou": r.mean("iou"), "cd1": r.mean("cd1"), "cd2": r.mean("cd2"),
                                 "n_shapes": len(r.reports), "n_failed": len(r.failures)} for r in results},
                      indent=2, sort_keys=True) + "\n"
