"""Evaluation metrics and the serialized evaluation report.

End-point error is the mean absolute disparity difference over valid pixels;
the three-pixel error is the percentage of valid pixels whose absolute
difference exceeds 3 (strict inequality). Depth conversion uses
z = focal * baseline / disparity with a finite sentinel for non-positive
disparities.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, ShapeError

INVALID_DEPTH = -1.0  # sentinel for non-positive disparity; never +/-Inf or NaN


@dataclass(frozen=True)
class CameraParams:
    focal_px: float
    baseline_m: float

    def __post_init__(self):
        if self.focal_px <= 0 or self.baseline_m <= 0:
            raise ConfigError(
                f"focal length and baseline must be positive, got "
                f"f={self.focal_px}, B={self.baseline_m}"
            )


def _checked(pred, gt, valid_mask):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"metric shapes differ: {pred.shape} vs {gt.shape}")
    if valid_mask is None:
        mask = np.ones(pred.shape, dtype=bool)
    else:
        mask = np.asarray(valid_mask).astype(bool)
        if mask.shape != pred.shape:
            raise ShapeError(f"mask shape {mask.shape} vs prediction {pred.shape}")
    if not mask.any():
        raise DataError("metric: no valid pixels")
    return pred, gt, mask


def epe(pred, gt, valid_mask=None) -> float:
    """End-point error: mean |pred - gt| over valid pixels."""
    pred, gt, mask = _checked(pred, gt, valid_mask)
    return float(np.abs(pred - gt)[mask].mean())


def three_pixel_error(pred, gt, valid_mask=None) -> float:
    """Percentage of valid pixels with |pred - gt| strictly greater than 3."""
    pred, gt, mask = _checked(pred, gt, valid_mask)
    err = np.abs(pred - gt)[mask]
    return float(100.0 * np.count_nonzero(err > 3.0) / err.size)


def disparity_to_depth(disparity, cam: CameraParams):
    """Per-pixel depth z = f*B/d in meters.

    Non-positive disparities map to the INVALID_DEPTH sentinel with a False
    validity flag; the output never contains NaN or Inf.
    """
    d = np.asarray(disparity, dtype=np.float64)
    valid = d > 0
    depth = np.full(d.shape, INVALID_DEPTH, dtype=np.float64)
    depth[valid] = cam.focal_px * cam.baseline_m / d[valid]
    return depth, valid


@dataclass
class EvalReport:
    """Aggregate metrics over an evaluation set, serializable to both a
    line-oriented key=value text and JSON. The timestamp is a separate field
    so reports from identical inputs are otherwise byte-identical."""

    epe: float
    three_pixel_error: float
    valid_pixels: int
    image_count: int
    eval_seconds: float
    per_image: list = field(default_factory=list)  # (epe, 3pe) pairs
    timestamp: str = ""

    def to_text(self, include_per_image: bool = True) -> str:
        lines = [
            f"epe = {self.epe:.6f}",
            f"three_pixel_error = {self.three_pixel_error:.6f}",
            f"valid_pixels = {self.valid_pixels}",
            f"image_count = {self.image_count}",
            f"eval_seconds = {self.eval_seconds:.3f}",
            f"timestamp = {self.timestamp}",
        ]
        if include_per_image:
            for i, (e, t) in enumerate(self.per_image):
                lines.append(f"image[{i}].epe = {e:.6f}")
                lines.append(f"image[{i}].three_pixel_error = {t:.6f}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(
            {
                "epe": self.epe,
                "three_pixel_error": self.three_pixel_error,
                "valid_pixels": self.valid_pixels,
                "image_count": self.image_count,
                "eval_seconds": self.eval_seconds,
                "per_image": [{"epe": e, "three_pixel_error": t} for e, t in self.per_image],
                "timestamp": self.timestamp,
            },
            indent=2,
        )

    @staticmethod
    def from_samples(per_image, abs_error_sums, counts, eval_seconds, timestamp=""):
        """Aggregate from per-image (sum of |err|, count, #over-3) triples."""
        total_abs = float(sum(abs_error_sums))
        total_n = int(sum(c for c, _ in counts))
        total_bad = int(sum(b for _, b in counts))
        if total_n == 0:
            raise DataError("evaluation produced no valid pixels")
        return EvalReport(
            epe=total_abs / total_n,
            three_pixel_error=100.0 * total_bad / total_n,
            valid_pixels=total_n,
            image_count=len(per_image),
            eval_seconds=eval_seconds,
            per_image=per_image,
            timestamp=timestamp,
        )
