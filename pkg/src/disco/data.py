"""Procedural stereo data with exact ground truth, plus loading machinery.

A random-dot stereogram holds the random texture in the right view and
constructs the left view by sampling it at x - d(x,y) with the same linear
interpolation the differentiable warp uses, so the geometric consistency
warp(right, gt) == left holds to machine precision on valid pixels. The
valid mask excludes out-of-bounds correspondences and pixels occluded by a
nearer surface (ordering-constraint scan).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blocks import _horizontal_sample
from .config import AugmentConfig, RdsConfig
from .errors import ConfigError, DataError
from .pfm import read_pfm
from .raster import read_image

OCCLUSION_MARGIN = 0.45  # half-pixel footprint overlap that counts as covered


@dataclass
class StereoSample:
    """Rectified pair with dense left-view ground truth.

    left/right: (C,H,W) intensities in [0,1]; gt_disparity: (1,H,W) pixels;
    valid_mask: (1,H,W) bool.
    """

    left: np.ndarray
    right: np.ndarray
    gt_disparity: np.ndarray
    valid_mask: np.ndarray

    def __post_init__(self):
        if self.left.shape != self.right.shape:
            raise DataError(
                f"sample views differ: {self.left.shape} vs {self.right.shape}"
            )
        if self.gt_disparity.shape[1:] != self.left.shape[1:]:
            raise DataError(
                f"ground truth {self.gt_disparity.shape} does not cover image "
                f"{self.left.shape}"
            )


def _disparity_field(cfg: RdsConfig, rng: np.random.Generator) -> np.ndarray:
    """Left-view disparity (H,W) in [0, max_disparity) under the layout."""
    h, w, md = cfg.height, cfg.width, cfg.max_disparity
    layout = cfg.layout
    if layout == "mixed":
        layout = ("constant", "layered", "ramp")[rng.integers(0, 3)]
    if layout == "constant":
        return np.full((h, w), cfg.constant_disparity, dtype=np.float64)
    if layout == "ramp":
        lo = rng.uniform(0.0, 0.25 * md)
        hi = rng.uniform(0.5 * md, 0.95 * md)
        axis = rng.integers(0, 2)
        ramp = np.linspace(lo, hi, w if axis == 0 else h)
        return (
            np.tile(ramp, (h, 1)) if axis == 0 else np.tile(ramp[:, None], (1, w))
        ).astype(np.float64)
    # layered rectangles: integer background plus nearer integer layers
    levels = int(max(2, np.floor(md)))
    field = np.full((h, w), float(rng.integers(0, max(1, levels // 3))), dtype=np.float64)
    n_rects = int(rng.integers(cfg.min_layers, cfg.max_layers + 1))
    for _ in range(n_rects):
        rh = int(rng.integers(h // 4, max(h // 4 + 1, h // 2)))
        rw = int(rng.integers(w // 4, max(w // 4 + 1, w // 2)))
        y0 = int(rng.integers(0, h - rh + 1))
        x0 = int(rng.integers(0, w - rw + 1))
        depth_level = float(rng.integers(1, levels))
        region = field[y0 : y0 + rh, x0 : x0 + rw]
        # nearer layers overwrite; keep the nearest value where rects overlap
        np.maximum(region, depth_level, out=region)
    return field


def _occlusion_mask(disparity: np.ndarray) -> np.ndarray:
    """True where the pixel's right-view position is covered by a nearer
    surface. Ordering constraint: an occluder always lies to the right and
    lands at or left of our position."""
    h, w = disparity.shape
    t = np.arange(w, dtype=np.float64)[None, :] - disparity
    suffix_min = np.minimum.accumulate(t[:, ::-1], axis=1)[:, ::-1]
    occluded = np.zeros((h, w), dtype=bool)
    # compare against the minimum position among strictly-right pixels
    occluded[:, :-1] = suffix_min[:, 1:] <= t[:, :-1] + OCCLUSION_MARGIN
    return occluded


def generate_rds(cfg: RdsConfig, seed: int) -> StereoSample:
    """Deterministic random-dot stereogram with exact left-view ground truth."""
    rng = np.random.default_rng((int(seed), 0xD15C0))
    h, w, c = cfg.height, cfg.width, cfg.channels

    texture = rng.random((c, h, w))
    if cfg.dot_density < 1.0:
        dots = rng.random((c, h, w)) < cfg.dot_density
        texture = texture * dots
    # quantize texture and ground truth to storage precision BEFORE sampling
    # so warp(right, gt) reproduces the stored left to interpolation rounding
    right = texture.astype(np.float32)
    disparity = _disparity_field(cfg, rng).astype(np.float32).astype(np.float64)

    grid = np.arange(w, dtype=np.float64)[None, :]
    x_coord = (grid - disparity)[None, None, :, :]
    left, _ = _horizontal_sample(
        right[None].astype(np.float64), np.broadcast_to(x_coord, (1, 1, h, w))
    )
    left = left[0]

    in_bounds = (grid - disparity >= 0) & (grid - disparity <= w - 1)
    valid = in_bounds
    if cfg.mask_occlusions:
        valid = valid & ~_occlusion_mask(disparity)

    return StereoSample(
        left=left.astype(np.float32),
        right=right.astype(np.float32),
        gt_disparity=disparity[None].astype(np.float32),
        valid_mask=valid[None],
    )


# -- augmentation ---------------------------------------------------------------


def augment(sample: StereoSample, cfg: AugmentConfig, seed: int) -> StereoSample:
    """Random crop plus photometric jitter, identical for both views.

    The crop moves the ground truth spatially but never changes its values;
    intensities are re-clamped to [0,1]. Deterministic per seed.
    """
    if not cfg.enabled:
        return sample
    rng = np.random.default_rng((int(seed), 0xA46))
    c, h, w = sample.left.shape
    left, right = sample.left, sample.right
    gt, mask = sample.gt_disparity, sample.valid_mask

    ch = cfg.crop_height or h
    cw = cfg.crop_width or w
    if ch > h or cw > w:
        raise ConfigError(f"crop {ch}x{cw} exceeds image {h}x{w}")
    dy = int(rng.integers(0, h - ch + 1))
    dx = int(rng.integers(0, w - cw + 1))
    left = left[:, dy : dy + ch, dx : dx + cw]
    right = right[:, dy : dy + ch, dx : dx + cw]
    gt = gt[:, dy : dy + ch, dx : dx + cw]
    mask = mask[:, dy : dy + ch, dx : dx + cw]

    brightness = rng.uniform(cfg.brightness_lo, cfg.brightness_hi)
    gamma = rng.uniform(cfg.gamma_lo, cfg.gamma_hi)
    color = rng.uniform(cfg.color_lo, cfg.color_hi, size=(c, 1, 1))

    def photometric(img):
        out = np.clip(img, 0.0, 1.0).astype(np.float64)
        if gamma != 1.0:  # pow(x, 1.0) is not guaranteed bit-exact
            out = np.power(out, gamma)
        out = out * brightness * color
        return np.clip(out, 0.0, 1.0).astype(np.float32)

    return StereoSample(
        left=photometric(left),
        right=photometric(right),
        gt_disparity=np.ascontiguousarray(gt),
        valid_mask=np.ascontiguousarray(mask),
    )


# -- datasets and batching -------------------------------------------------------


class RdsDataset:
    """Seed-addressed stream of generated samples; count=0 means unlimited.

    Finite datasets memoize generated samples (they are revisited every
    epoch); unlimited streams generate on demand.
    """

    def __init__(self, cfg: RdsConfig, count: int, seed: int):
        self.cfg = cfg
        self.count = count
        self.seed = seed
        self._cache: dict = {}

    def __len__(self):
        if self.count == 0:
            raise ConfigError("unlimited RDS stream has no length")
        return self.count

    @property
    def unlimited(self):
        return self.count == 0

    def sample(self, index: int) -> StereoSample:
        if self.count and index >= self.count:
            raise IndexError(index)
        if self.count:
            cached = self._cache.get(index)
            if cached is None:
                cached = generate_rds(self.cfg, seed=hash_seed(self.seed, index))
                self._cache[index] = cached
            return cached
        return generate_rds(self.cfg, seed=hash_seed(self.seed, index))


class ManifestDataset:
    """Tab-separated manifest: one `left<TAB>right<TAB>gt.pfm` line per sample."""

    def __init__(self, manifest_path: str):
        import os

        self.base = os.path.dirname(os.path.abspath(manifest_path))
        try:
            with open(manifest_path, "r", encoding="utf-8") as fh:
                lines = [ln.strip() for ln in fh if ln.strip()]
        except OSError as exc:
            raise DataError(f"cannot read manifest {manifest_path}: {exc}") from exc
        self.rows = []
        for i, line in enumerate(lines, start=1):
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(
                    f"manifest line {i}: expected 3 tab-separated paths, got {len(parts)}"
                )
            self.rows.append(parts)
        if not self.rows:
            raise ConfigError(f"manifest {manifest_path} lists no samples")

    def __len__(self):
        return len(self.rows)

    unlimited = False

    def _resolve(self, p):
        import os

        return p if os.path.isabs(p) else os.path.join(self.base, p)

    def sample(self, index: int) -> StereoSample:
        lp, rp, gp = self.rows[index]
        left = read_image(self._resolve(lp))
        right = read_image(self._resolve(rp))
        gt, _scale = read_pfm(self._resolve(gp))
        if gt.shape[0] != 1:
            gt = gt[:1]
        finite = np.isfinite(gt)
        valid = finite & (gt >= 0)
        gt = np.where(finite, gt, 0.0).astype(np.float32)
        return StereoSample(left=left, right=right, gt_disparity=gt, valid_mask=valid)


@dataclass
class Batch:
    left: np.ndarray  # (B,C,H,W)
    right: np.ndarray
    gt_disparity: np.ndarray  # (B,1,H,W)
    valid_mask: np.ndarray
    indices: list


class BatchLoader:
    """Deterministic batch stream with per-sample on-the-fly augmentation.

    Finite datasets are reshuffled every epoch from the shuffle seed and the
    trailing short batch is kept (no drop-last). `batch_at(i)` is a pure
    function of (dataset, seeds, i), which makes training resumable from a
    bare iteration number.
    """

    def __init__(self, dataset, batch_size: int, shuffle_seed: int, augment_cfg=None):
        if batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        self.dataset = dataset
        self.batch_size = batch_size
        self.shuffle_seed = shuffle_seed
        self.augment_cfg = augment_cfg

    def batches_per_epoch(self) -> int:
        n = len(self.dataset)
        return (n + self.batch_size - 1) // self.batch_size

    def _epoch_order(self, epoch: int):
        rng = np.random.default_rng((self.shuffle_seed, 0x0E0C, epoch))
        return rng.permutation(len(self.dataset))

    def batch_at(self, iteration: int) -> Batch:
        b = self.batch_size
        if getattr(self.dataset, "unlimited", False):
            indices = [iteration * b + j for j in range(b)]
        else:
            bpe = self.batches_per_epoch()
            epoch, slot = divmod(iteration, bpe)
            order = self._epoch_order(epoch)
            indices = [int(i) for i in order[slot * b : (slot + 1) * b]]
        return self._gather(indices, iteration)

    def _gather(self, indices, iteration) -> Batch:
        samples = []
        for j, idx in enumerate(indices):
            s = self.dataset.sample(idx)
            if self.augment_cfg is not None and self.augment_cfg.enabled:
                s = augment(s, self.augment_cfg, seed=hash_seed(self.shuffle_seed, iteration, j))
            samples.append(s)
        return Batch(
            left=np.stack([s.left for s in samples]),
            right=np.stack([s.right for s in samples]),
            gt_disparity=np.stack([s.gt_disparity for s in samples]),
            valid_mask=np.stack([s.valid_mask for s in samples]),
            indices=list(indices),
        )

    def __iter__(self):
        """One pass over a finite dataset; endless stream otherwise."""
        if getattr(self.dataset, "unlimited", False):
            i = 0
            while True:
                yield self.batch_at(i)
                i += 1
        else:
            for i in range(self.batches_per_epoch()):
                yield self.batch_at(i)


def hash_seed(*parts) -> int:
    """Stable composition of integer seed parts (order-sensitive)."""
    mask = (1 << 64) - 1
    acc = 0x9E3779B97F4A7C15
    for p in parts:
        acc = ((acc ^ (int(p) & mask)) * 0xBF58476D1CE4E5B9) & mask
        acc ^= acc >> 31
    return acc & 0x7FFFFFFFFFFFFFFF


# -- block-matching oracle ---------------------------------------------------


def patch_match_disparity(sample: StereoSample, window: int = 9, d_max: int | None = None):
    """Integer disparity by intensity patch correlation (block matching).

    Stacks the w*w intensity patch around each pixel as feature channels and
    takes the disparity level with the largest multiplicative score, i.e. a
    1x1 correlation over patch features. Intensities are centered on the
    global mean first so the multiplicative score discriminates rather than
    rewarding bright patches. Returns (disparity (H,W) int, scorable (H,W)
    bool marking pixels whose window fits inside the image).
    """
    if window % 2 == 0 or window < 1:
        raise ConfigError("window must be odd and >= 1")
    c, h, w = sample.left.shape
    if d_max is None:
        d_max = int(np.ceil(float(sample.gt_disparity.max()))) + 1
    half = window // 2
    center = 0.5 * (sample.left.mean() + sample.right.mean())
    left = sample.left.astype(np.float64) - center
    right = sample.right.astype(np.float64) - center

    scores = np.full((d_max, h, w), -np.inf)
    for d in range(d_max):
        prod = np.zeros((h, w))
        prod[:, d:] = (left[:, :, d:] * right[:, :, : w - d]).sum(axis=0)
        scores[d] = _box_sum(prod, window)
    disparity = scores.argmax(axis=0)

    scorable = np.zeros((h, w), dtype=bool)
    scorable[half : h - half, half : w - half] = True
    return disparity, scorable


def _box_sum(img: np.ndarray, window: int) -> np.ndarray:
    """Sum over a centered window x window box (zero beyond the border)."""
    half = window // 2
    h, w = img.shape
    padded = np.zeros((h + 2 * half, w + 2 * half))
    padded[half : half + h, half : half + w] = img
    ii = np.zeros((h + 2 * half + 1, w + 2 * half + 1))
    ii[1:, 1:] = padded.cumsum(axis=0).cumsum(axis=1)
    return (
        ii[window:, window:]
        - ii[:-window, window:]
        - ii[window:, :-window]
        + ii[:-window, :-window]
    )
