"""Experiment orchestration: training with early stopping, evaluation,
and the configuration sweep.

Training early-stops on validation MAE with a fixed patience, keeps the
best-so-far parameters, and always evaluates the restored best state on
the test split. A diverging run (non-finite loss) aborts but leaves the
last good checkpoint on disk. Reports are written as delimited text and
JSON, with rendered figures alongside.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import DatasetManifest, load_samples
from .errors import DataError, NumericalError
from .metrics import MetricsReport, compute_metrics
from .model import (OtfpfConfig, OtfpfModel, ablation_variants, load_checkpoint,
                    predict_batch, save_checkpoint, train_step)
from .optim import AdamW

ABLATION_ORDER = (
    "no_otem",
    "no_otem_no_fpfn",
    "no_otem_no_fpfn_single_pathway",
    "no_sex_label",
    "classical_stage_depths",
    "no_overlapped_downsampling",
)


@dataclass
class ExperimentResult:
    metrics: MetricsReport
    baseline_mae: float
    train_losses: list[float] = field(default_factory=list)
    val_maes: list[float] = field(default_factory=list)
    best_epoch: int = 0
    epochs_run: int = 0
    seconds: float = 0.0
    out_dir: Path | None = None


def emit_scatter(preds, ages, path) -> Path:
    """Two-column text file: chronological age, then prediction."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, np.column_stack([np.asarray(ages, dtype=np.float64),
                                      np.asarray(preds, dtype=np.float64)]),
               fmt="%.6f")
    return path


def mean_predictor_baseline(train_ages, eval_ages) -> float:
    """MAE of the constant predictor that outputs the train-split mean age."""
    mean_age = float(np.mean(train_ages))
    return float(np.mean(np.abs(np.asarray(eval_ages) - mean_age)))


def _write_history(path, losses, maes):
    lines = ["epoch\ttrain_loss\tval_mae"]
    for i, (l, m) in enumerate(zip(losses, maes), start=1):
        lines.append(f"{i}\t{l:.6f}\t{m:.6f}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def run_experiment(cfg: OtfpfConfig, manifest: DatasetManifest, base_dir,
                   out_dir, max_epochs: int | None = None,
                   make_figures: bool = True) -> ExperimentResult:
    """Train on the manifest's train split and report test metrics."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    t_start = time.perf_counter()

    train = load_samples(manifest, base_dir, "train")
    val = load_samples(manifest, base_dir, "val")
    test = load_samples(manifest, base_dir, "test")
    if not train or not test:
        raise DataError("manifest must provide non-empty train and test splits")

    train_ages = np.array([s.age for s in train])
    test_ages = np.array([s.age for s in test])
    baseline = mean_predictor_baseline(train_ages, test_ages)

    cfg_dict = cfg.to_dict()
    cfg_dict["head_bias_init"] = float(train_ages.mean())  # regression centering
    cfg = OtfpfConfig.from_dict(cfg_dict)
    model = OtfpfModel(cfg)
    if cfg.calibrate_otem:
        model.calibrate_from_samples(train)
    optimizer = AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)

    epochs = cfg.max_epochs if max_epochs is None else max_epochs
    shuffle_rng = np.random.default_rng(cfg.seed + 1000)
    best_mae = np.inf
    best_state = [p.data.copy() for p in model.parameters()]
    best_epoch = 0
    bad_epochs = 0
    losses_per_epoch: list[float] = []
    val_maes: list[float] = []
    epochs_run = 0

    def checkpoint_best():
        for p, data in zip(model.parameters(), best_state):
            p.data = data
        return save_checkpoint(model, out_dir / "checkpoint")

    try:
        for epoch in range(1, epochs + 1):
            order = shuffle_rng.permutation(len(train))
            batch_losses = []
            for start in range(0, len(order), cfg.batch_size):
                batch = [train[i] for i in order[start:start + cfg.batch_size]]
                batch_losses.append(train_step(model, optimizer, batch))
            epochs_run = epoch
            losses_per_epoch.append(float(np.mean(batch_losses)))
            eval_split = val if val else train
            eval_ages = np.array([s.age for s in eval_split])
            preds = predict_batch(model, eval_split)
            val_mae = float(np.mean(np.abs(preds - eval_ages)))
            val_maes.append(val_mae)
            if val_mae < best_mae:
                best_mae = val_mae
                best_epoch = epoch
                best_state = [p.data.copy() for p in model.parameters()]
                bad_epochs = 0
            else:
                bad_epochs += 1
                if bad_epochs >= cfg.patience:
                    break
    except NumericalError:
        checkpoint_best()  # divergence: keep the last good state on disk
        raise

    checkpoint_best()
    test_preds = predict_batch(model, test)
    metrics = compute_metrics(test_preds, test_ages)
    emit_scatter(test_preds, test_ages, out_dir / "scatter_test.txt")
    _write_history(out_dir / "history.tsv", losses_per_epoch, val_maes)
    seconds = time.perf_counter() - t_start
    metrics.save(out_dir / "metrics.json", extra={
        "baseline_mae": baseline,
        "best_epoch": best_epoch,
        "epochs_run": epochs_run,
        "seconds": seconds,
        "config": cfg.to_dict(),
    })
    if make_figures:
        from . import report
        report.scatter_figure(test_ages, test_preds, out_dir / "scatter_test.png")
        if losses_per_epoch:
            report.training_curve_figure(losses_per_epoch, val_maes,
                                         out_dir / "training_curve.png")
    return ExperimentResult(metrics=metrics, baseline_mae=baseline,
                            train_losses=losses_per_epoch, val_maes=val_maes,
                            best_epoch=best_epoch, epochs_run=epochs_run,
                            seconds=seconds, out_dir=out_dir)


def evaluate_checkpoint(ckpt_prefix, manifest: DatasetManifest, base_dir,
                        split: str = "test", out_dir=None,
                        make_figures: bool = True) -> MetricsReport:
    """Load a checkpoint and score one split, emitting scatter data."""
    model = load_checkpoint(ckpt_prefix)
    samples = load_samples(manifest, base_dir, split)
    if not samples:
        raise DataError(f"split {split!r} is empty")
    ages = np.array([s.age for s in samples])
    preds = predict_batch(model, samples)
    metrics = compute_metrics(preds, ages)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        emit_scatter(preds, ages, out_dir / f"scatter_{split}.txt")
        metrics.save(out_dir / f"metrics_{split}.json")
        if make_figures:
            from . import report
            report.scatter_figure(ages, preds, out_dir / f"scatter_{split}.png")
    return metrics


def run_ablation(manifest: DatasetManifest, base_dir, out_dir,
                 base_cfg: OtfpfConfig | None = None, epochs: int = 1,
                 make_figures: bool = True) -> dict:
    """Train the full model and the six variant rows, then tabulate.

    Each variant trains for ``epochs`` epochs (no claim is made that
    toy-scale orderings match full-scale results); the table records test
    metrics and parameter counts.
    """
    base_cfg = base_cfg or OtfpfConfig()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    variants = ablation_variants(base_cfg)

    def row(name, cfg):
        result = run_experiment(cfg, manifest, base_dir, out_dir / name,
                                max_epochs=epochs, make_figures=False)
        return {
            "name": name,
            "parameters": OtfpfModel(cfg).parameter_count(),
            "mae": result.metrics.mae,
            "pcc": result.metrics.pcc,
            "srcc": result.metrics.srcc,
        }

    full_row = row("otfpf_full", base_cfg)
    ablation_rows = [row(name, variants[name]) for name in ABLATION_ORDER]

    table = {"full": full_row, "ablations": ablation_rows}
    (out_dir / "ablation.json").write_text(json.dumps(table, indent=2) + "\n",
                                           encoding="utf-8")
    lines = ["name\tparameters\tmae\tpcc\tsrcc"]
    for r in [full_row] + ablation_rows:
        pcc = "undefined" if r["pcc"] is None else f"{r['pcc']:.6f}"
        srcc = "undefined" if r["srcc"] is None else f"{r['srcc']:.6f}"
        lines.append(f"{r['name']}\t{r['parameters']}\t{r['mae']:.6f}\t{pcc}\t{srcc}")
    (out_dir / "ablation.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    if make_figures:
        from . import report
        report.ablation_figure([full_row] + ablation_rows, out_dir / "ablation.png")
    return table
