"""Training, evaluation and ablation-grid orchestration."""
from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import torch

from .agnostic import GrlGate, grl_forward, modality_bce, pool_modality_map, total_loss
from .config import ExperimentConfig
from .data import PairedDataset, SceneSpec, load_coco_pairs
from .detection import assign_targets, detection_loss, stack_targets
from .evaluation import METRICS, MODALITIES, EvalReport, build_report
from .model import MiPaDetector, build_classifier, load_checkpoint, save_checkpoint
from .mosaic import mix_images, sample_mask
from .rho import RhoPolicy

log = logging.getLogger(__name__)

REPORT_COLUMNS = [f"{m}_{mod}" for m in METRICS for mod in MODALITIES + ("avg",)]
METRIC_COLUMNS = ["kind", "epoch", "step", "progress", "rho_drawn", "lambda_ma", "l_det", "l_ma",
                  "loss_total", "l_det_epoch"] + REPORT_COLUMNS


class TrainingDiverged(FloatingPointError):

    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass
class TrainResult:
    model: MiPaDetector
    classifier: object
    metrics: list
    report: EvalReport
    best_report: EvalReport
    out_dir: object = None
    elapsed: float = 0.0
    presented: list = field(default_factory=list)


# ---------------------------------------------------------------- data

@lru_cache(maxsize=8)
def _synthetic_split(spec_json: str, count: int, start: int) -> PairedDataset:
    return PairedDataset.synthetic(SceneSpec(**json.loads(spec_json)), count, start)


def load_datasets(config: ExperimentConfig) -> tuple:
    ds = config.dataset
    if ds.kind == "synthetic":
        spec = dict(ds.synthetic)
        spec.setdefault("patch_size", config.encoder.patch_size)
        spec_json = json.dumps(SceneSpec(**spec).to_dict(), sort_keys=True)
        return (_synthetic_split(spec_json, ds.train_size, 0),
                _synthetic_split(spec_json, ds.test_size, ds.test_offset))
    rule = tuple(ds.pairing_rule)
    train = load_coco_pairs(ds.root, ds.train_annotations, rule, ds.image_size, config.encoder.patch_size)
    num_classes = train.num_classes
    train = PairedDataset(list(train), num_classes)
    test_ann = ds.test_annotations or ds.train_annotations
    test = load_coco_pairs(ds.root, test_ann, rule, ds.image_size, config.encoder.patch_size)
    return train, PairedDataset(list(test), num_classes)


# ---------------------------------------------------------------- training

def _lr_lambda(schedule: str, total_steps: int):
    if schedule == "cosine":
        return lambda t: 0.5 * (1.0 + math.cos(math.pi * min(t, total_steps) / total_steps))
    return lambda t: 1.0


class _BatchComposer:
    """Builds the training input for a batch according to the regime.

    Shuffling, Both-baseline modality picks and MiPa masks draw from separate
    generators, so regimes that consume no randomness for modality choice
    present identical sample orders.
    """

    def __init__(self, config: ExperimentConfig, grid_hw: tuple):
        order_ss, modality_ss, mask_ss, rho_ss = np.random.SeedSequence(config.seed).spawn(4)
        self.config = config
        self.order_rng = np.random.default_rng(order_ss)
        self.modality_rng = np.random.default_rng(modality_ss)
        self.mask_rng = np.random.default_rng(mask_ss)
        self.policy = RhoPolicy.from_dict(config.rho_policy,
                                          rng_seed=int(rho_ss.generate_state(1)[0]))
        self.grid_hw = grid_hw

    def compose(self, image_f: torch.Tensor, image_g: torch.Tensor) -> tuple:
        """Return ``(images, modality_map or None, rho_drawn)``."""
        regime = self.config.regime
        b = image_f.shape[0]
        if regime == "rgb_only":
            return image_g, None, 0.0
        if regime == "ir_only":
            return image_f, None, 1.0
        if regime == "both":
            pick_ir = self.modality_rng.random(b) < self.config.both_rho
            sel = torch.from_numpy(pick_ir)[:, None, None, None]
            return torch.where(sel, image_f, image_g), None, float(pick_ir.mean())
        rho = self.policy.next_rho()
        gh, gw = self.grid_hw
        masks = [sample_mask(gh * gw, rho, self.mask_rng).assignment.reshape(gh, gw) for _ in range(b)]
        modality_map = torch.from_numpy(np.stack(masks)).to(torch.float32)
        return mix_images(image_f, image_g, modality_map, self.config.encoder.patch_size), modality_map, rho


def run_training(config: ExperimentConfig, out_dir=None, datasets=None, evaluate: bool = True,
                 record_batches: bool = False) -> TrainResult:
    """Train one regime end to end; writes metrics.csv, report.json and checkpoints to ``out_dir``."""
    config.validate()
    start = time.time()
    if config.threads:
        torch.set_num_threads(config.threads)
    train, test = datasets if datasets is not None else load_datasets(config)
    num_classes = train.num_classes

    torch.manual_seed(config.seed)
    model = MiPaDetector(config.encoder, train.image_size, num_classes)
    model.train()
    classifier = build_classifier(model, config.seed + 1) if config.regime == "mipa_ma" else None
    params = list(model.parameters()) + (list(classifier.parameters()) if classifier is not None else [])
    opt = torch.optim.AdamW(params, lr=config.optimizer.lr, weight_decay=config.optimizer.weight_decay)

    steps_per_epoch = math.ceil(len(train) / config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    sched = torch.optim.lr_scheduler.LambdaLR(opt, _lr_lambda(config.optimizer.schedule, total_steps))
    gate = GrlGate(gamma=config.ma.gamma) if config.regime == "mipa_ma" else None
    composer = _BatchComposer(config, model.encoder.stage1_shape())
    final_hw = model.encoder.final_shape()
    targets = [assign_targets(gt, final_hw[0], final_hw[1], num_classes) for gt in train.gts]

    writer = _MetricsWriter(out_dir)
    if out_dir is not None:
        with open(os.path.join(out_dir, "config.json"), "w") as fh:
            fh.write(config.to_json())
    experiment = config.to_dict()
    metrics, presented = [], []
    report = best_report = None
    best_avg = -1.0
    step = 0
    for epoch in range(config.epochs):
        perm = composer.order_rng.permutation(len(train))
        epoch_l_det = []
        for first in range(0, len(train), config.batch_size):
            idx = perm[first:first + config.batch_size]
            images, modality_map, rho = composer.compose(train.images_f[idx], train.images_g[idx])
            if record_batches:
                presented.append(images.clone())
            try:
                objective, l_det_value, l_ma_value, lambda_ma = _forward_losses(
                    model, classifier, gate, config, images, modality_map,
                    stack_targets([targets[i] for i in idx]), step, total_steps)
                loss_value = total_loss(l_det_value, l_ma_value, lambda_ma)
            except FloatingPointError as exc:
                writer.write({"kind": "diverged", "epoch": epoch, "step": step})
                writer.close()
                raise TrainingDiverged(step, str(exc)) from exc
            opt.zero_grad(set_to_none=True)
            objective.backward()
            opt.step()
            sched.step()
            epoch_l_det.append(l_det_value)
            if step % config.log_every == 0:
                row = {"kind": "train", "epoch": epoch, "step": step, "progress": step / total_steps,
                       "rho_drawn": rho, "lambda_ma": lambda_ma, "l_det": l_det_value,
                       "l_ma": l_ma_value, "loss_total": loss_value}
                metrics.append(row)
                writer.write(row)
            step += 1
        composer.policy.advance_epoch()
        row = {"kind": "eval", "epoch": epoch, "step": step, "progress": step / total_steps,
               "l_det_epoch": float(np.mean(epoch_l_det))}
        if evaluate:
            report = evaluate_model(model, test, config.det.score_threshold)
            row.update(report.to_row())
            avg = report.average("ap50")
            if avg > best_avg:
                best_avg, best_report = avg, report
                if out_dir is not None:
                    save_checkpoint(os.path.join(out_dir, "checkpoint_best.bin"), model, experiment, classifier,
                                    {"epoch": epoch})
            log.info("epoch %d  l_det %.4f  AP50 rgb %.3f ir %.3f avg %.3f", epoch, row["l_det_epoch"],
                     report.value("ap50", "rgb"), report.value("ap50", "ir"), avg)
        metrics.append(row)
        writer.write(row)
    writer.close()
    if out_dir is not None:
        save_checkpoint(os.path.join(out_dir, "checkpoint.bin"), model, experiment, classifier,
                        {"epoch": config.epochs - 1})
        if report is not None:
            with open(os.path.join(out_dir, "report.json"), "w") as fh:
                fh.write(report.to_json())
        from .plots import plot_training
        plot_training(metrics, os.path.join(out_dir, "training.png"))
    return TrainResult(model=model, classifier=classifier, metrics=metrics, report=report,
                       best_report=best_report, out_dir=out_dir, elapsed=time.time() - start,
                       presented=presented)


def _forward_losses(model, classifier, gate, config, images, modality_map, targets, step, total_steps):
    """Return ``(objective, l_det, l_ma, lambda_ma)``; the objective is what gets backpropagated."""
    stage1, raw = model(images)
    l_det = detection_loss(raw, targets, config.det.lambda_reg)
    if gate is None:
        return l_det, l_det.item(), 0.0, 0.0
    if config.ma.force_lambda is not None:
        gate.lambda_ma, gate.step_fraction = float(config.ma.force_lambda), step / total_steps
    else:
        gate.update(step / total_steps)
    pred = classifier(grl_forward(stage1, gate))
    target = pool_modality_map(modality_map, *pred.logits.shape[-2:])
    l_ma = modality_bce(pred, target)
    # the classifier descends on the raw BCE; the encoder receives -lambda * grad through the gate
    return l_det + l_ma, l_det.item(), l_ma.item(), gate.lambda_ma


class _MetricsWriter:

    def __init__(self, out_dir):
        self.fh = None
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            self.fh = open(os.path.join(out_dir, "metrics.csv"), "w", newline="")
            self.writer = csv.DictWriter(self.fh, fieldnames=METRIC_COLUMNS, restval="")
            self.writer.writeheader()

    def write(self, row: dict):
        if self.fh is not None:
            self.writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
            self.fh.flush()

    def close(self):
        if self.fh is not None:
            self.fh.close()
            self.fh = None


def read_metrics(path) -> list:
    rows = []
    with open(path, newline="") as fh:
        for raw in csv.DictReader(fh):
            row = {}
            for key, value in raw.items():
                if value == "" or key == "kind":
                    row[key] = value if key == "kind" else None
                elif key in ("epoch", "step"):
                    row[key] = int(value)
                else:
                    row[key] = float(value)
            rows.append(row)
    return rows


# ---------------------------------------------------------------- evaluation

def evaluate_model(model: MiPaDetector, dataset: PairedDataset, score_threshold: float = 0.3,
                   modality: str = "both-separately", batch_size: int = 250) -> EvalReport:
    """Evaluate on pure RGB and/or pure IR images; mosaics are never used at test time."""
    if modality not in ("rgb", "ir", "both-separately"):
        raise ValueError(f"modality must be rgb, ir or both-separately, got {modality!r}")
    ids = [g.image_id for g in dataset.gts]

    def run(images):
        preds = []
        for first in range(0, len(dataset), batch_size):
            preds.extend(model.detect(images[first:first + batch_size], score_threshold,
                                      image_ids=ids[first:first + batch_size]))
        return preds

    preds_rgb = run(dataset.images_g) if modality in ("rgb", "both-separately") else None
    preds_ir = run(dataset.images_f) if modality in ("ir", "both-separately") else None
    return build_report(preds_rgb, preds_ir, dataset.gts, dataset.num_classes)


def run_eval(checkpoint, dataset: PairedDataset, modality: str = "both-separately",
             score_threshold=None) -> EvalReport:
    model, archive = load_checkpoint(checkpoint)
    if tuple(archive["image_size"]) != dataset.image_size:
        raise ValueError(f"checkpoint expects images of size {tuple(archive['image_size'])}, "
                         f"dataset has {dataset.image_size}")
    if archive["num_classes"] != dataset.num_classes:
        raise ValueError(f"checkpoint has {archive['num_classes']} classes, dataset has {dataset.num_classes}")
    if score_threshold is None:
        score_threshold = archive["experiment"].get("det", {}).get("score_threshold", 0.3)
    return evaluate_model(model, dataset, score_threshold, modality)


# ---------------------------------------------------------------- ablation grid

def grid_points(grid) -> list:
    """Expand ``{key: [values]}`` (cartesian) or pass through an explicit list of override dicts."""
    if grid is None:
        return [{}]
    if isinstance(grid, list):
        return [dict(p) for p in grid] or [{}]
    if not grid:
        return [{}]
    keys = list(grid)
    return [dict(zip(keys, values)) for values in itertools.product(*(grid[k] for k in keys))]


def point_label(overrides: dict) -> str:
    if not overrides:
        return "base"
    if "label" in overrides:
        return str(overrides["label"])
    parts = []
    for key, value in overrides.items():
        if key == "rho_policy":
            parts.append(RhoPolicy.from_dict(value).label())
        else:
            parts.append(f"{key}={value}")
    return " ".join(parts)


def run_ablation_grid(base_config: ExperimentConfig, grid=None, seeds=(0, 1, 2), out_dir=None,
                      plot: bool = True) -> list:
    """One run per grid point and seed; aggregates mean and std of every report metric."""
    rows = []
    for overrides in grid_points(grid):
        label = point_label(overrides)
        overrides = {k: v for k, v in overrides.items() if k != "label"}
        cell = {"label": label, "overrides": overrides, "reports": [], "errors": []}
        for seed in seeds:
            run_dir = None
            if out_dir is not None:
                run_dir = os.path.join(out_dir, _slug(label), f"seed{seed}")
            try:
                config = base_config.with_overrides({**overrides, "seed": seed})
                result = run_training(config, out_dir=run_dir)
                cell["reports"].append(result.report)
            except Exception as exc:  # noqa: BLE001  a failed cell must not stop the grid
                log.exception("grid cell %s seed %s failed", label, seed)
                cell["errors"].append(f"seed {seed}: {exc!r}")
        for col in REPORT_COLUMNS:
            values = [r.to_row()[col] for r in cell["reports"]]
            cell[f"{col}_mean"] = float(np.mean(values)) if values else float("nan")
            cell[f"{col}_std"] = float(np.std(values)) if values else float("nan")
        rows.append(cell)
        log.info("grid %s: AP50 avg %.3f +- %.3f", label, cell["ap50_avg_mean"], cell["ap50_avg_std"])
    if out_dir is not None:
        write_grid_csv(rows, os.path.join(out_dir, "grid.csv"))
        if plot:
            from .plots import plot_grid
            plot_grid(rows, os.path.join(out_dir, "grid_ap50.png"))
    return rows


def _slug(label: str) -> str:
    keep = [c if c.isalnum() or c in "._-" else "_" for c in label]
    return "".join(keep).strip("_") or "base"


def write_grid_csv(rows: list, path):
    fields = ["label", "n_runs", "errors"] + [f"{c}_{s}" for c in REPORT_COLUMNS for s in ("mean", "std")] \
        + [f"{c}_pm" for c in REPORT_COLUMNS]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            out = {"label": row["label"], "n_runs": len(row["reports"]), "errors": "; ".join(row["errors"])}
            for c in REPORT_COLUMNS:
                out[f"{c}_mean"] = row[f"{c}_mean"]
                out[f"{c}_std"] = row[f"{c}_std"]
                out[f"{c}_pm"] = f"{100 * row[f'{c}_mean']:.2f} ± {100 * row[f'{c}_std']:.2f}"
            writer.writerow(out)
