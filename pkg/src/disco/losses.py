"""Losses: masked Huber regression and deep multi-scale supervision.

Ground truth lives at full resolution in full-resolution pixel units; the
coarse-scale targets are produced by masked average pooling without value
rescaling, matching the model's convention that every decoder emits
full-resolution pixel units.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import DECODER_SCALES
from .errors import ConfigError, DataError, ShapeError
from .tensor import Tensor

# per-scale weights for scales 1/16 .. 1; coarse maps down-weighted so the
# full-resolution loss dominates
DEFAULT_SCALE_WEIGHTS = (1 / 32, 1 / 16, 1 / 8, 1 / 4, 1.0)
REFINED_WEIGHT = 1.0


@dataclass
class LossReport:
    """Per-scale Huber losses and their weighted total."""

    per_scale: list
    weights: list
    refined: float | None
    refined_weight: float
    valid_pixels: list
    total: float = field(default=0.0)


def huber_loss(pred: Tensor, target, valid_mask=None) -> Tensor:
    """Mean masked Huber loss: 0.5 t^2 for |t| < 1 else |t| - 0.5, t = pred - gt.

    The two branches meet smoothly at |t| = 1, so the gradient clip(t,-1,1)
    is continuous everywhere.
    """
    tgt = target.data if isinstance(target, Tensor) else np.asarray(target)
    if tgt.shape != pred.data.shape:
        raise ShapeError(f"huber_loss: prediction {pred.data.shape} vs target {tgt.shape}")
    if valid_mask is None:
        mask = np.ones(pred.data.shape, dtype=pred.dtype)
    else:
        mask = np.asarray(valid_mask)
        if mask.shape != pred.data.shape:
            raise ShapeError(f"huber_loss: mask {mask.shape} vs prediction {pred.data.shape}")
        mask = mask.astype(pred.dtype)
    n_valid = float(mask.sum())
    if n_valid == 0:
        raise DataError("huber_loss: no valid pixels in mask")

    t = pred.data - tgt
    a = np.abs(t)
    per_pixel = np.where(a < 1.0, 0.5 * t * t, a - 0.5)
    value = np.asarray((per_pixel * mask).sum(dtype=np.float64) / n_valid, dtype=pred.dtype)

    def backward(g):
        pred._accumulate((g * np.clip(t, -1.0, 1.0) * mask / n_valid).astype(pred.dtype))

    return Tensor._from_op(value, (pred,), backward, "huber_loss")


def downsample_ground_truth(gt: np.ndarray, valid: np.ndarray, factor: int):
    """Masked average-pool of (N,1,H,W) disparity by `factor`; values stay in
    full-resolution pixel units. A pooled pixel is valid if any source pixel
    in its window was valid."""
    if factor == 1:
        return gt, valid.astype(bool)
    n, c, h, w = gt.shape
    if h % factor or w % factor:
        raise ConfigError(f"ground truth {h}x{w} not divisible by scale factor {factor}")
    v = valid.astype(gt.dtype).reshape(n, c, h // factor, factor, w // factor, factor)
    g = (gt * valid).reshape(n, c, h // factor, factor, w // factor, factor)
    vsum = v.sum(axis=(3, 5))
    gsum = g.sum(axis=(3, 5))
    target = gsum / np.maximum(vsum, 1.0)
    return target.astype(gt.dtype), vsum > 0


def multiscale_loss(
    output,
    gt: np.ndarray,
    valid: np.ndarray,
    weights=DEFAULT_SCALE_WEIGHTS,
    refined_weight: float = REFINED_WEIGHT,
):
    """Weighted sum of per-scale Huber losses over a ModelOutput.

    Returns (total loss tensor, LossReport). The refined full-resolution map
    contributes an extra term with `refined_weight` when refinement is on.
    """
    weights = tuple(weights)
    if len(weights) != len(DECODER_SCALES):
        raise ConfigError(
            f"need {len(DECODER_SCALES)} scale weights (scales 1/16..1), got {len(weights)}"
        )
    if len(output.disparities) != len(DECODER_SCALES):
        raise ShapeError(
            f"model produced {len(output.disparities)} maps, expected {len(DECODER_SCALES)}"
        )
    total = None
    per_scale = []
    counts = []
    for disp, scale, w in zip(output.disparities, DECODER_SCALES, weights):
        target, mask = downsample_ground_truth(gt, valid, scale)
        loss = huber_loss(disp, target, mask)
        per_scale.append(loss.item())
        counts.append(int(mask.sum()))
        term = loss * float(w)
        total = term if total is None else total + term
    refined_val = None
    if output.refined is not None:
        rloss = huber_loss(output.refined, gt, valid)
        refined_val = rloss.item()
        total = total + rloss * float(refined_weight)
    report = LossReport(
        per_scale=per_scale,
        weights=list(map(float, weights)),
        refined=refined_val,
        refined_weight=float(refined_weight),
        valid_pixels=counts,
        total=total.item(),
    )
    return total, report
