"""Training loop, held-out evaluation, and the run directory layout.

A run writes into its output directory: `config.cfg` (the resolved
configuration), `train_log.txt` (one line per iteration: iteration, lr,
per-scale losses, wall time), periodic checkpoints, `ckpt_best.dckpt`
(best held-out EPE so far) and `ckpt_final.dckpt`. Every batch is a pure
function of (config, iteration), so resuming from a checkpoint reproduces
the uninterrupted run bit for bit.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import DataConfig, RunConfig, save_config
from .data import BatchLoader, ManifestDataset, RdsDataset, hash_seed
from .errors import ConfigError, DataError, NumericError
from .losses import multiscale_loss
from .metrics import EvalReport
from .model import DiscoNet, build_model
from .optim import Adam
from .tensor import Tensor, no_grad

HOLDOUT_STREAM = 0x401D  # keeps held-out RDS seeds disjoint from training


@dataclass
class TrainResult:
    iterations: int
    first_loss: float
    final_loss: float
    best_epe: float
    final_report: EvalReport | None
    history: list = field(default_factory=list)  # (iteration, lr, total loss)
    final_checkpoint: str = ""
    best_checkpoint: str = ""


def make_datasets(data_cfg: DataConfig):
    """(train dataset, holdout dataset or None) from the data section.

    RDS holdout samples come from a disjoint seed stream; manifest datasets
    reserve their last `holdout_count` rows for the holdout split.
    """
    if data_cfg.source == "rds":
        train = RdsDataset(data_cfg.rds, data_cfg.sample_count, seed=hash_seed(data_cfg.seed, 1))
        holdout = None
        if data_cfg.holdout_count > 0:
            holdout = RdsDataset(
                data_cfg.rds,
                data_cfg.holdout_count,
                seed=hash_seed(data_cfg.seed, HOLDOUT_STREAM),
            )
        return train, holdout
    full = ManifestDataset(data_cfg.manifest_path)
    n_hold = min(data_cfg.holdout_count, len(full) - 1)
    if n_hold <= 0:
        return full, None
    train_rows = full.rows[: len(full) - n_hold]
    holdout_rows = full.rows[len(full) - n_hold :]
    train = _RowSubset(full, train_rows)
    holdout = _RowSubset(full, holdout_rows)
    return train, holdout


class _RowSubset:
    unlimited = False

    def __init__(self, parent: ManifestDataset, rows):
        self.parent = parent
        self.rows = rows

    def __len__(self):
        return len(self.rows)

    def sample(self, index):
        saved = self.parent.rows
        try:
            self.parent.rows = self.rows
            return self.parent.sample(index)
        finally:
            self.parent.rows = saved


def evaluate_model(model: DiscoNet, dataset, batch_size: int = 4) -> EvalReport:
    """Held-out metrics; predictions are clamped to >= 0 for evaluation."""
    n = len(dataset)
    if n == 0:
        raise DataError("evaluation dataset is empty")
    per_image = []
    abs_sums = []
    counts = []
    t0 = time.perf_counter()
    dtype = model.config.dtype
    with no_grad():
        for start in range(0, n, batch_size):
            idx = list(range(start, min(start + batch_size, n)))
            samples = [dataset.sample(i) for i in idx]
            left = Tensor(np.stack([s.left for s in samples]).astype(dtype))
            right = Tensor(np.stack([s.right for s in samples]).astype(dtype))
            out = model.forward(left, right)
            pred = np.maximum(out.full_resolution.data, 0.0)
            for b, s in enumerate(samples):
                mask = s.valid_mask[0]
                if not mask.any():
                    raise DataError(f"evaluation sample {idx[b]} has no valid pixels")
                err = np.abs(pred[b, 0].astype(np.float64) - s.gt_disparity[0])[mask]
                per_image.append((float(err.mean()), float(100.0 * (err > 3.0).mean())))
                abs_sums.append(float(err.sum()))
                counts.append((int(err.size), int((err > 3.0).sum())))
    return EvalReport.from_samples(per_image, abs_sums, counts, time.perf_counter() - t0)


def _loss_line(iteration, lr, report, wall):
    scales = "|".join(f"{v:.5f}" for v in report.per_scale)
    refined = f" refined={report.refined:.5f}" if report.refined is not None else ""
    return (
        f"iter={iteration} lr={lr:.6e} total={report.total:.6f} "
        f"scales={scales}{refined} wall={wall:.3f}"
    )


def _numeric_diagnostics(model: DiscoNet) -> str:
    bad = []
    for name, p in model.named_parameters():
        if not np.isfinite(np.sum(p.data, dtype=np.float64)):
            bad.append(name + "(value)")
        elif p.grad is not None and not np.isfinite(np.sum(p.grad, dtype=np.float64)):
            bad.append(name + "(grad)")
    return "non-finite parameters: " + (", ".join(bad) if bad else "none")


def train_run(cfg: RunConfig, resume_from: str | None = None, quiet: bool = True) -> TrainResult:
    """Run (or resume) training per the config; returns summary metrics."""
    out_dir = cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    save_config(os.path.join(out_dir, "config.cfg"), cfg)

    train_ds, holdout_ds = make_datasets(cfg.data)
    loader = BatchLoader(
        train_ds,
        cfg.data.batch_size,
        shuffle_seed=hash_seed(cfg.seed, cfg.data.seed),
        augment_cfg=cfg.data.augment,
    )

    start_iteration = 0
    if resume_from:
        bundle = load_checkpoint(resume_from)
        model = bundle.model
        optimizer = Adam(list(model.named_parameters()), cfg.optim)
        if bundle.optimizer_state is not None:
            optimizer.load_state_dict(bundle.optimizer_state)
        start_iteration = bundle.iteration
        best_epe = bundle.extra.get("best_epe")
        best_epe = float("inf") if best_epe is None else float(best_epe)
    else:
        model = build_model(cfg.model)
        optimizer = Adam(list(model.named_parameters()), cfg.optim)
        best_epe = float("inf")

    log_path = os.path.join(out_dir, "train_log.txt")
    final_path = os.path.join(out_dir, "ckpt_final.dckpt")
    best_path = os.path.join(out_dir, "ckpt_best.dckpt")
    dtype = cfg.model.dtype

    first_loss = None
    final_loss = 0.0
    final_report = None
    history = []

    with open(log_path, "a", encoding="utf-8") as log:

        def emit(line):
            log.write(line + "\n")
            log.flush()
            if not quiet:
                print(line)

        if cfg.iterations == 0:
            save_checkpoint(final_path, model, 0, optimizer, extra={"best_epe": None})
            emit("iter=0 note=zero-iteration-budget wrote initial checkpoint")
            return TrainResult(
                iterations=0,
                first_loss=0.0,
                final_loss=0.0,
                best_epe=float("inf"),
                final_report=None,
                final_checkpoint=final_path,
                best_checkpoint="",
            )

        for iteration in range(start_iteration + 1, cfg.iterations + 1):
            t0 = time.perf_counter()
            batch = loader.batch_at(iteration - 1)
            left = Tensor(batch.left.astype(dtype))
            right = Tensor(batch.right.astype(dtype))
            lr = cfg.optim.lr_at(iteration - 1, cfg.iterations)
            try:
                output = model.forward(left, right)
                total, report = multiscale_loss(
                    output, batch.gt_disparity.astype(dtype), batch.valid_mask
                )
                model.zero_grad()
                total.backward()
                optimizer.step(lr)
            except NumericError as exc:
                raise NumericError(
                    f"aborted at iteration {iteration}: {exc}; "
                    f"{_numeric_diagnostics(model)}"
                ) from exc
            wall = time.perf_counter() - t0
            if first_loss is None:
                first_loss = report.total
            final_loss = report.total
            if cfg.log_every and (iteration % cfg.log_every == 0 or iteration == 1):
                emit(_loss_line(iteration, lr, report, wall))
            history.append((iteration, lr, report.total))

            if cfg.checkpoint_every and iteration % cfg.checkpoint_every == 0:
                save_checkpoint(
                    os.path.join(out_dir, f"ckpt_iter{iteration}.dckpt"),
                    model,
                    iteration,
                    optimizer,
                    extra={"best_epe": None if best_epe == float("inf") else best_epe},
                )
            if (
                holdout_ds is not None
                and cfg.eval_every
                and (iteration % cfg.eval_every == 0 or iteration == cfg.iterations)
            ):
                rep = evaluate_model(model, holdout_ds, cfg.data.batch_size)
                emit(
                    f"iter={iteration} eval epe={rep.epe:.4f} "
                    f"three_pixel_error={rep.three_pixel_error:.3f}"
                )
                final_report = rep
                if rep.epe < best_epe:
                    best_epe = rep.epe
                    save_checkpoint(
                        best_path, model, iteration, optimizer, extra={"best_epe": best_epe}
                    )

        save_checkpoint(
            final_path,
            model,
            cfg.iterations,
            optimizer,
            extra={"best_epe": None if best_epe == float("inf") else best_epe},
        )
        if holdout_ds is not None and final_report is None:
            final_report = evaluate_model(model, holdout_ds, cfg.data.batch_size)
            if final_report.epe < best_epe:
                best_epe = final_report.epe
        emit(
            f"done iterations={cfg.iterations} "
            f"best_holdout_epe={best_epe if best_epe != float('inf') else 'n/a'}"
        )

    return TrainResult(
        iterations=cfg.iterations,
        first_loss=first_loss if first_loss is not None else 0.0,
        final_loss=final_loss,
        best_epe=best_epe,
        final_report=final_report,
        history=history,
        final_checkpoint=final_path,
        best_checkpoint=best_path if os.path.exists(best_path) else "",
    )
