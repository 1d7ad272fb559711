"""The full disparity network: Siamese feature extraction, cost-volume
construction (plain correlation or context-fused), an encoder-decoder
estimation subnetwork with deep supervision at five scales, and an optional
residual refinement subnetwork.

All disparity maps are expressed in full-resolution pixel units at every
scale. Forward passes record named stage shapes for architecture audits and
per-subnetwork wall time.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .blocks import (
    Conv2d,
    CorrelationSpec,
    Deconv2d,
    DenseBlock,
    DenseBlockSpec,
    Lgcf,
    LgcfSpec,
    Module,
    ResidualBlock,
    correlation,
    warp_horizontal,
)
from .config import DECODER_SCALES, ModelConfig
from .errors import ConfigError, DiscoError, ShapeError
from .tensor import Tensor, concat_channels, upsample_bilinear


@dataclass
class ModelOutput:
    """Forward-pass results: one disparity map per decoder scale
    (coarse to fine, full-resolution pixel units), the refined full-res map
    when refinement is enabled, the cost volume, stage shapes, and timing."""

    disparities: list
    refined: Tensor | None
    cost_volume: Tensor
    stage_shapes: list = field(default_factory=list)
    timing: dict = field(default_factory=dict)

    @property
    def full_resolution(self) -> Tensor:
        """The map evaluation should use: refined if present, else finest."""
        return self.refined if self.refined is not None else self.disparities[-1]


class FeatureExtractor(Module):
    """Siamese residual tower: blocks at 1/2 then 1/4 resolution."""

    def __init__(self, cfg: ModelConfig, *, rng, dtype):
        w, q = cfg.base_width, cfg.quarter_channels
        blocks = [ResidualBlock(cfg.in_channels, w, stride=2, rng=rng, dtype=dtype)]
        blocks += [
            ResidualBlock(w, w, rng=rng, dtype=dtype)
            for _ in range(cfg.res_blocks_half - 1)
        ]
        blocks.append(ResidualBlock(w, q, stride=2, rng=rng, dtype=dtype))
        blocks += [
            ResidualBlock(q, q, rng=rng, dtype=dtype)
            for _ in range(cfg.res_blocks_quarter - 1)
        ]
        self.block = blocks
        self.half_index = cfg.res_blocks_half

    def __call__(self, image: Tensor):
        x = image
        half = None
        for i, blk in enumerate(self.block, start=1):
            x = blk(x)
            if i == self.half_index:
                half = x
        return half, x


class EncoderStage(Module):
    """Entry conv (optionally stride-2) followed by a dense block."""

    def __init__(self, in_channels, width, growth, layers, dilations, stride, *, rng, dtype):
        self.entry = Conv2d(in_channels, width, 3, stride=stride, rng=rng, dtype=dtype)
        self.dense = DenseBlock(
            DenseBlockSpec(width, growth, layers, tuple(dilations)), rng=rng, dtype=dtype
        )

    @property
    def out_channels(self):
        return self.dense.spec.out_channels

    def __call__(self, x: Tensor) -> Tensor:
        return self.dense(self.entry(x))


class DecoderStage(Module):
    """1x1 fusion of (upsampled features, skip), a dense block for spatial
    context, and a 1x1 disparity head (no activation)."""

    def __init__(self, in_channels, width, growth, layers, head_scale, *, rng, dtype):
        self.entry = Conv2d(in_channels, width, 1, rng=rng, dtype=dtype)
        self.dense = DenseBlock(DenseBlockSpec(width, growth, layers), rng=rng, dtype=dtype)
        self.head = Conv2d(self.dense.spec.out_channels, 1, 1, rng=rng, dtype=dtype)
        self.head_scale = head_scale

    @property
    def out_channels(self):
        return self.dense.spec.out_channels

    def __call__(self, x: Tensor):
        feats = self.dense(self.entry(x))
        disparity = self.head(feats) * self.head_scale
        return feats, disparity


class EstimationNet(Module):
    """Encoder-decoder over the cost-volume input.

    Two stride-2 encoder stages take the 1/4-scale input down to 1/16 and a
    third, non-downsampling stage acts as the bottleneck, so the deepest
    feature map sits at exactly 1/16 of the original resolution. Five
    decoder stages emit a disparity map each at 1/16, 1/8, 1/4, 1/2 and
    full resolution; the first three take encoder-side skips, the last two
    take low-level feature-extraction skips.
    """

    def __init__(self, cfg: ModelConfig, est_in_channels: int, *, rng, dtype):
        g, layers, ew = cfg.growth, cfg.encoder_layers, cfg.encoder_width
        scheds = (
            cfg.encoder_dilations
            if cfg.use_dilations
            else tuple((1,) * layers for _ in cfg.encoder_dilations)
        )
        self.enc1 = EncoderStage(est_in_channels, ew, g, layers, scheds[0], 2, rng=rng, dtype=dtype)
        self.enc2 = EncoderStage(self.enc1.out_channels, ew, g, layers, scheds[1], 2, rng=rng, dtype=dtype)
        self.bottleneck = EncoderStage(
            self.enc2.out_channels, ew, g, layers, scheds[2], 1, rng=rng, dtype=dtype
        )

        skip_channels = [
            self.enc2.out_channels,  # 1/16
            self.enc1.out_channels,  # 1/8
            est_in_channels,  # 1/4
            cfg.base_width,  # 1/2 (feature extraction)
            cfg.base_width,  # full (upsampled feature extraction)
        ]
        decoders = []
        prev = self.bottleneck.out_channels
        for width, skip in zip(cfg.decoder_widths, skip_channels):
            decoders.append(
                DecoderStage(prev + skip, width, g, cfg.decoder_layers, cfg.head_scale,
                             rng=rng, dtype=dtype)
            )
            prev = decoders[-1].out_channels
        self.dec = decoders

    def __call__(self, est_input: Tensor, half_feats: Tensor, trace):
        e1 = self.enc1(est_input)
        trace("estim.enc1", e1)
        e2 = self.enc2(e1)
        trace("estim.enc2", e2)
        bott = self.bottleneck(e2)
        trace("estim.bottleneck", bott)

        full_skip = upsample_bilinear(half_feats, 2)
        skips = [e2, e1, est_input, half_feats, full_skip]
        feats = bott
        disparities = []
        for i, (dec, skip) in enumerate(zip(self.dec, skips)):
            if i > 0:
                feats = upsample_bilinear(feats, 2)
            if feats.data.shape[2:] != skip.data.shape[2:]:
                raise ConfigError(
                    f"decoder {i + 1}: skip spatial {skip.data.shape[2:]} does not match "
                    f"decoder features {feats.data.shape[2:]}"
                )
            feats, disp = dec(concat_channels([feats, skip]))
            trace(f"estim.dec{i + 1}", feats)
            disparities.append(disp)
        return disparities


class RefinementNet(Module):
    """Residual refinement from warp error at full resolution.

    Right features are warped by the estimated disparity; the difference to
    the left features (feature reconstruction error) is concatenated with
    the disparity and the upsampled left features, pushed through three
    stride-2 convs and three deconvs, and the predicted residual is added
    to the input disparity.
    """

    def __init__(self, cfg: ModelConfig, *, rng, dtype):
        rw, fc = cfg.refine_width, cfg.refine_feat_channels
        self.compress = Conv2d(cfg.quarter_channels, fc, 1, rng=rng, dtype=dtype)
        in_ch = 1 + 2 * fc  # disparity + reconstruction error + left features
        self.conv1 = Conv2d(in_ch, rw, 3, stride=2, rng=rng, dtype=dtype)
        self.conv2 = Conv2d(rw, rw, 3, stride=2, rng=rng, dtype=dtype)
        self.conv3 = Conv2d(rw, rw, 3, stride=2, rng=rng, dtype=dtype)
        self.deconv1 = Deconv2d(rw, rw, rng=rng, dtype=dtype)
        self.deconv2 = Deconv2d(rw, rw, rng=rng, dtype=dtype)
        self.deconv3 = Deconv2d(rw, rw, rng=rng, dtype=dtype)
        self.head = Conv2d(rw, 1, 1, rng=rng, dtype=dtype)
        self.head_scale = cfg.head_scale

    def __call__(self, disparity: Tensor, left_q: Tensor, right_q: Tensor, trace):
        from .tensor import elu

        left_f = upsample_bilinear(self.compress(left_q), 4)
        right_f = upsample_bilinear(self.compress(right_q), 4)
        warped = warp_horizontal(right_f, disparity)
        recon_error = left_f - warped
        x = concat_channels([disparity, recon_error, left_f])
        c1 = elu(self.conv1(x))
        trace("refine.conv1", c1)
        c2 = elu(self.conv2(c1))
        trace("refine.conv2", c2)
        c3 = elu(self.conv3(c2))
        trace("refine.conv3", c3)
        u = elu(self.deconv1(c3))
        u = elu(self.deconv2(u))
        u = elu(self.deconv3(u))
        trace("refine.deconv3", u)
        residual = self.head(u) * self.head_scale
        return disparity + residual


class DiscoNet(Module):
    """Composition of the three subnetworks with ablation switches."""

    def __init__(self, cfg: ModelConfig):
        self.config = cfg
        rng = np.random.default_rng(cfg.init_seed)
        dtype = cfg.dtype
        self.feat = FeatureExtractor(cfg, rng=rng, dtype=dtype)
        if cfg.use_lgcf:
            self.lgcf = Lgcf(
                LgcfSpec(
                    feature_channels=cfg.quarter_channels,
                    growth=cfg.lgcf_growth,
                    dilations=cfg.lgcf_dilations,
                    pool_kernels=cfg.lgcf_pool_kernels,
                ),
                rng=rng,
                dtype=dtype,
            )
        else:
            self.lgcf = None
        self.correlation_spec = CorrelationSpec(cfg.max_disparity)
        est_in = cfg.max_disparity + cfg.quarter_channels
        self.estim = EstimationNet(cfg, est_in, rng=rng, dtype=dtype)
        self.refine = RefinementNet(cfg, rng=rng, dtype=dtype) if cfg.use_refinement else None

    # -- subnetwork passes ---------------------------------------------------

    def feature_extract(self, left: Tensor, right: Tensor):
        """Shared-parameter feature towers; returns (left half-scale,
        left quarter-scale, right quarter-scale) feature maps."""
        self._check_input(left, right)
        left_half, left_q = self.feat(left)
        _, right_q = self.feat(right)
        return left_half, left_q, right_q

    def build_cost_volume(self, left_q: Tensor, right_q: Tensor):
        """Correlation volume (context-fused features when enabled),
        concatenated with the left quarter-scale features."""
        if self.lgcf is not None:
            left_m = self.lgcf(left_q)
            right_m = self.lgcf(right_q)
        else:
            left_m, right_m = left_q, right_q
        cost = correlation(left_m, right_m, self.correlation_spec)
        return concat_channels([cost, left_q]), cost

    def forward(self, left: Tensor, right: Tensor) -> ModelOutput:
        stage_shapes: list = []

        def trace(name, t):
            stage_shapes.append((name, tuple(t.data.shape)))

        timing = {}
        t0 = time.perf_counter()
        try:
            left_half, left_q, right_q = self.feature_extract(left, right)
        except DiscoError as exc:
            raise type(exc)(f"feature extraction: {exc}") from exc
        trace("feat.half", left_half)
        trace("feat.quarter", left_q)
        timing["feature_extract"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        try:
            est_input, cost = self.build_cost_volume(left_q, right_q)
        except DiscoError as exc:
            raise type(exc)(f"cost volume: {exc}") from exc
        trace("costvol", cost)
        timing["cost_volume"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        try:
            disparities = self.estim(est_input, left_half, trace)
        except DiscoError as exc:
            raise type(exc)(f"disparity estimation: {exc}") from exc
        for scale, d in zip(DECODER_SCALES, disparities):
            trace(f"disparity.s{scale}", d)
        timing["estimation"] = time.perf_counter() - t0

        refined = None
        if self.refine is not None:
            t0 = time.perf_counter()
            try:
                refined = self.refine(disparities[-1], left_q, right_q, trace)
            except DiscoError as exc:
                raise type(exc)(f"refinement: {exc}") from exc
            trace("disparity.refined", refined)
            timing["refinement"] = time.perf_counter() - t0

        return ModelOutput(
            disparities=disparities,
            refined=refined,
            cost_volume=cost,
            stage_shapes=stage_shapes,
            timing=timing,
        )

    __call__ = forward

    def _check_input(self, left: Tensor, right: Tensor):
        if left.data.shape != right.data.shape:
            raise ShapeError(
                f"left/right shapes differ: {left.data.shape} vs {right.data.shape}"
            )
        if left.data.ndim != 4:
            raise ShapeError(f"inputs must be (N,C,H,W), got {left.data.shape}")
        n, c, h, w = left.data.shape
        if c != self.config.in_channels:
            raise ConfigError(
                f"model expects {self.config.in_channels} input channels, got {c}"
            )
        if h % 16 or w % 16:
            raise ConfigError(
                f"input {h}x{w} not divisible by 16; pad or crop the images "
                f"(the CLI offers --auto-pad)"
            )


def build_model(cfg: ModelConfig) -> DiscoNet:
    return DiscoNet(cfg)


def parameter_report(model: DiscoNet) -> dict:
    """Deterministic parameter-count breakdown per top-level subnetwork."""
    counts: dict = {}
    for name, p in model.named_parameters():
        top = name.split(".", 1)[0]
        counts[top] = counts.get(top, 0) + p.data.size
    counts["total"] = sum(v for k, v in counts.items())
    return counts


def min_estimation_scale(output: ModelOutput, input_hw) -> int:
    """Smallest spatial divisor reached inside the estimation network."""
    h, _ = input_hw
    divisors = [
        h // shape[2]
        for name, shape in output.stage_shapes
        if name.startswith("estim.")
    ]
    return max(divisors)
