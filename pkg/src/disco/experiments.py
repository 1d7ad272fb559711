"""Pinned desk-scale experiment protocols.

These definitions are the single source of truth shared by the acceptance
tests and the runnable scripts: an overfit run on eight fixed stereograms,
and a generalization run on a 200-sample stream scored against unseen
held-out samples, with ablation variants of the same protocol.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .checkpoint import load_checkpoint
from .config import (
    AugmentConfig,
    DataConfig,
    ModelConfig,
    OptimConfig,
    RdsConfig,
    RunConfig,
)
from .train import evaluate_model, make_datasets, train_run

ABLATION_SWITCHES = {
    "baseline": dict(use_dilations=False, use_lgcf=False, use_refinement=False),
    "dilations": dict(use_dilations=True, use_lgcf=False, use_refinement=False),
    "context": dict(use_dilations=True, use_lgcf=True, use_refinement=False),
    "full": dict(use_dilations=True, use_lgcf=True, use_refinement=True),
}


def _desk_rds() -> RdsConfig:
    return RdsConfig(height=64, width=128, channels=1, dot_density=1.0,
                     layout="mixed", max_disparity=12.0)


def overfit_config(out_dir: str, iterations: int = 700, seed: int = 0) -> RunConfig:
    """Tiny model fitted to 8 fixed stereograms (memorization experiment)."""
    return RunConfig(
        model=ModelConfig(init_seed=seed),
        optim=OptimConfig(lr=2e-4),
        data=DataConfig(
            source="rds",
            sample_count=8,
            holdout_count=0,
            batch_size=4,
            seed=seed,
            rds=_desk_rds(),
            augment=AugmentConfig(enabled=False),
        ),
        iterations=iterations,
        checkpoint_every=0,
        eval_every=0,
        log_every=25,
        out_dir=out_dir,
        seed=seed,
    )


def generalization_config(
    out_dir: str,
    variant: str = "full",
    iterations: int = 2200,
    seed: int = 0,
) -> RunConfig:
    """200-sample stream with photometric+crop augmentation, scored on 32
    unseen samples from a disjoint seed stream."""
    if variant not in ABLATION_SWITCHES:
        raise KeyError(f"unknown ablation variant {variant!r}")
    model = ModelConfig(init_seed=seed, **ABLATION_SWITCHES[variant])
    return RunConfig(
        model=model,
        optim=OptimConfig(lr=2e-4),
        data=DataConfig(
            source="rds",
            sample_count=200,
            holdout_count=32,
            batch_size=4,
            seed=seed,
            rds=_desk_rds(),
            augment=AugmentConfig(
                enabled=True,
                crop_height=64,
                crop_width=128,  # full-size crop: photometric jitter only
            ),
        ),
        iterations=iterations,
        checkpoint_every=0,
        eval_every=max(1, iterations // 4),
        log_every=50,
        out_dir=out_dir,
        seed=seed,
    )


@dataclass
class OverfitOutcome:
    train_epe: float
    train_3pe: float
    first_loss: float
    final_loss: float
    loss_reduction: float  # 1 - final/first
    iterations: int
    checkpoint: str


def run_overfit(out_dir: str, iterations: int = 700, seed: int = 0) -> OverfitOutcome:
    cfg = overfit_config(out_dir, iterations, seed)
    result = train_run(cfg)
    train_ds, _ = make_datasets(cfg.data)
    bundle = load_checkpoint(result.final_checkpoint)
    report = evaluate_model(bundle.model, train_ds, cfg.data.batch_size)
    return OverfitOutcome(
        train_epe=report.epe,
        train_3pe=report.three_pixel_error,
        first_loss=result.first_loss,
        final_loss=result.final_loss,
        loss_reduction=1.0 - result.final_loss / result.first_loss,
        iterations=cfg.iterations,
        checkpoint=result.final_checkpoint,
    )


@dataclass
class GeneralizationOutcome:
    variant: str
    holdout_epe: float
    holdout_3pe: float
    best_epe: float
    iterations: int
    checkpoint: str


def run_generalization(
    out_dir: str, variant: str = "full", iterations: int = 2200, seed: int = 0
) -> GeneralizationOutcome:
    cfg = generalization_config(out_dir, variant, iterations, seed)
    result = train_run(cfg)
    _, holdout = make_datasets(cfg.data)
    bundle = load_checkpoint(result.final_checkpoint)
    report = evaluate_model(bundle.model, holdout, cfg.data.batch_size)
    return GeneralizationOutcome(
        variant=variant,
        holdout_epe=report.epe,
        holdout_3pe=report.three_pixel_error,
        best_epe=result.best_epe,
        iterations=cfg.iterations,
        checkpoint=result.final_checkpoint,
    )
