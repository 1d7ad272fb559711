"""Composite network blocks and the stereo-specific differentiable ops.

Contains the small module system (parameter registration / naming), the
dense block with per-layer dilation schedules, residual blocks, spatial
pyramid pooling, the horizontal correlation layer, differentiable horizontal
warping, the local+global context fusion block, and the receptive-field
calculus used by the `rf` CLI report.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import (
    ConvSpec,
    Tensor,
    concat_channels,
    conv2d,
    crop_spatial,
    deconv2d,
    elu,
    maxpool2d,
    pad_spatial,
    same_padding,
    upsample_bilinear,
)


# -- receptive-field calculus --------------------------------------------------


def receptive_field(kernel_size: int, dilation: int = 1) -> int:
    """Effective receptive field (k-1)(d-1) + k of one dilated conv layer."""
    if kernel_size < 1 or dilation < 1:
        raise ConfigError("kernel size and dilation must be >= 1")
    return (kernel_size - 1) * (dilation - 1) + kernel_size


def stacked_receptive_field(layers) -> int:
    """Effective receptive field of a unit-stride stack of conv layers.

    `layers` is a sequence of (kernel_size, dilation) pairs or ConvSpecs; the
    stack composes as sum of per-layer fields minus (n-1).
    """
    sizes = []
    for layer in layers:
        if isinstance(layer, ConvSpec):
            sizes.append(layer.receptive_field)
        else:
            k, d = layer
            sizes.append(receptive_field(k, d))
    if not sizes:
        raise ConfigError("stacked_receptive_field: empty stack")
    return sum(sizes) - (len(sizes) - 1)


# -- module system ---------------------------------------------------------------


class Module:
    """Base class giving dotted parameter paths and recursive traversal.

    Parameters are Tensor attributes with requires_grad=True; child modules
    are Module attributes or lists of Modules (list entries are named
    `<attr><1-based index>`, e.g. `layer2`).
    """

    def named_parameters(self, prefix: str = ""):
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}{i + 1}.")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters())


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    """Fan-in-scaled normal init; always drawn in float64 for seed stability."""
    w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
    return Tensor(w.astype(dtype), requires_grad=True)


class Conv2d(Module):
    """Square conv layer; padding defaults to size-preserving zero fill."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int = 3,
        stride: int = 1,
        dilation: int = 1,
        padding: int | None = None,
        *,
        rng: np.random.Generator,
        dtype=np.float32,
        weight_gain: float = 1.0,
    ):
        if padding is None:
            padding = same_padding(kernel_size, dilation)
        self.spec = ConvSpec(
            in_channels=in_channels,
            out_channels=out_channels,
            kernel_size=kernel_size,
            dilation=dilation,
            stride=stride,
            padding=padding,
        )
        k = kernel_size
        self.weight = he_normal(
            rng, (out_channels, in_channels, k, k), in_channels * k * k, dtype
        )
        if weight_gain != 1.0:
            self.weight.data *= weight_gain
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.spec)


class Deconv2d(Module):
    """Transposed conv layer; defaults double spatial size (k=4,s=2,p=1)."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int = 4,
        stride: int = 2,
        padding: int = 1,
        *,
        rng: np.random.Generator,
        dtype=np.float32,
    ):
        self.stride = stride
        self.padding = padding
        k = kernel_size
        self.weight = he_normal(
            rng, (in_channels, out_channels, k, k), in_channels * k * k, dtype
        )
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return deconv2d(x, self.weight, self.bias, self.stride, self.padding)


# -- dense blocks -----------------------------------------------------------------


@dataclass(frozen=True)
class DenseBlockSpec:
    """Dense connectivity arithmetic: layer i sees g0+(i-1)*g channels."""

    in_channels: int  # g0
    growth: int  # g, channels added per layer
    layers: int  # l
    dilations: tuple = ()  # per-layer dilation schedule; empty means all 1

    def __post_init__(self):
        dil = tuple(self.dilations) if self.dilations else (1,) * self.layers
        object.__setattr__(self, "dilations", dil)
        if self.layers < 1:
            raise ConfigError(f"dense block needs >= 1 layer, got {self.layers}")
        if len(dil) != self.layers:
            raise ConfigError(
                f"dilation schedule length {len(dil)} != layer count {self.layers}"
            )
        if self.in_channels < 1 or self.growth < 1:
            raise ConfigError("dense block channels/growth must be positive")

    def layer_in_channels(self, i: int) -> int:
        """Channels entering layer i (1-based): g0 + (i-1)*g."""
        return self.in_channels + (i - 1) * self.growth

    @property
    def out_channels(self) -> int:
        """Block output: input concatenated with every layer's g maps."""
        return self.in_channels + self.layers * self.growth

    @property
    def stacked_receptive_field(self) -> int:
        return stacked_receptive_field([(3, d) for d in self.dilations])


class DenseLayer(Module):
    def __init__(self, in_channels, growth, dilation, *, rng, dtype):
        self.conv = Conv2d(in_channels, growth, 3, dilation=dilation, rng=rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        # composite transform: ELU then 3x3 conv
        return self.conv(elu(x))


class DenseBlock(Module):
    """Stack of ELU->conv3x3 layers, each consuming all previous outputs."""

    def __init__(self, spec: DenseBlockSpec, *, rng, dtype):
        self.spec = spec
        self.layer = [
            DenseLayer(spec.layer_in_channels(i + 1), spec.growth, spec.dilations[i],
                       rng=rng, dtype=dtype)
            for i in range(spec.layers)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.shape[1] != self.spec.in_channels:
            raise ConfigError(
                f"dense block expects {self.spec.in_channels} input channels, "
                f"got {x.data.shape[1]}"
            )
        feats = [x]
        for layer in self.layer:
            inp = feats[0] if len(feats) == 1 else concat_channels(feats)
            feats.append(layer(inp))
        return concat_channels(feats)


class ResidualBlock(Module):
    """Two 3x3 convs with ELU; 1x1 projection shortcut on channel/stride change.

    The branch's second conv is initialized with a small gain so stacked
    blocks start near identity; without normalization layers a full He gain
    doubles activation variance at every block.
    """

    def __init__(self, in_channels, out_channels, stride=1, *, rng, dtype):
        self.conv1 = Conv2d(in_channels, out_channels, 3, stride=stride, rng=rng, dtype=dtype)
        self.conv2 = Conv2d(out_channels, out_channels, 3, rng=rng, dtype=dtype,
                            weight_gain=0.1)
        if in_channels != out_channels or stride != 1:
            self.proj = Conv2d(in_channels, out_channels, 1, stride=stride, rng=rng, dtype=dtype)
        else:
            self.proj = None

    def __call__(self, x: Tensor) -> Tensor:
        branch = self.conv2(elu(self.conv1(x)))
        shortcut = self.proj(x) if self.proj is not None else x
        return elu(branch + shortcut)


# -- stereo ops -------------------------------------------------------------------


@dataclass(frozen=True)
class CorrelationSpec:
    """1x1 multiplicative matching over `max_disparity` leftward shifts."""

    max_disparity: int

    def __post_init__(self):
        if self.max_disparity < 1:
            raise ConfigError(f"max_disparity must be >= 1, got {self.max_disparity}")


def correlation(left: Tensor, right: Tensor, spec: CorrelationSpec) -> Tensor:
    """Cost volume: out[d] at (y,x) = mean_c left[c,y,x] * right[c,y,x-d].

    Out-of-range right positions contribute zero. One output channel per
    disparity level d in [0, max_disparity).
    """
    if left.data.shape != right.data.shape:
        raise ShapeError(
            f"correlation: feature shapes differ {left.data.shape} vs {right.data.shape}"
        )
    n, c, h, w = _shape4(left, "correlation input")
    dmax = spec.max_disparity
    out = np.zeros((n, dmax, h, w), dtype=left.dtype)
    for d in range(min(dmax, w)):
        prod = left.data[:, :, :, d:] * right.data[:, :, :, : w - d]
        out[:, d, :, d:] = prod.mean(axis=1)

    def backward(g):
        inv_c = 1.0 / c
        gl = np.zeros_like(left.data) if left.requires_grad else None
        gr = np.zeros_like(right.data) if right.requires_grad else None
        for d in range(min(dmax, w)):
            gd = g[:, d : d + 1, :, d:] * inv_c
            if gl is not None:
                gl[:, :, :, d:] += gd * right.data[:, :, :, : w - d]
            if gr is not None:
                gr[:, :, :, : w - d] += gd * left.data[:, :, :, d:]
        if gl is not None:
            left._accumulate(gl)
        if gr is not None:
            right._accumulate(gr)

    return Tensor._from_op(out, (left, right), backward, "correlation")


def _horizontal_sample(source: np.ndarray, x_coord: np.ndarray):
    """Linear sampling of `source` (N,C,H,W) at per-pixel x positions.

    `x_coord` is (N,1,H,W) and is evaluated in double precision so single
    precision coordinates keep sub-1e-6 sampling accuracy; out-of-bounds
    taps contribute zero. Returns the sampled array plus the pieces the
    gradient needs.
    """
    w = source.shape[3]
    x_coord = np.asarray(x_coord, dtype=np.float64)
    x0 = np.floor(x_coord).astype(np.intp)
    frac = (x_coord - x0).astype(source.dtype)
    x1 = x0 + 1
    m0 = ((x0 >= 0) & (x0 <= w - 1)).astype(source.dtype)
    m1 = ((x1 >= 0) & (x1 <= w - 1)).astype(source.dtype)
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x1, 0, w - 1)
    idx0 = np.broadcast_to(x0c, source.shape)
    idx1 = np.broadcast_to(x1c, source.shape)
    v0 = np.take_along_axis(source, idx0, axis=3) * m0
    v1 = np.take_along_axis(source, idx1, axis=3) * m1
    out = (1.0 - frac) * v0 + frac * v1
    return out, (x0c, x1c, m0, m1, frac, v0, v1)


def warp_horizontal(source: Tensor, disparity: Tensor) -> Tensor:
    """Sample source at x - disparity with linear interpolation along x.

    Left-view convention: output(x,y) = source(x - d(x,y), y); out-of-bounds
    samples are zero. Differentiable w.r.t. both source and disparity.
    """
    n, c, h, w = _shape4(source, "warp source")
    if disparity.data.shape != (n, 1, h, w):
        raise ShapeError(
            f"warp disparity shape {disparity.data.shape} != {(n, 1, h, w)}"
        )
    grid_x = np.arange(w, dtype=np.float64)[None, None, None, :]
    x_coord = grid_x - disparity.data.astype(np.float64)
    out, (x0c, x1c, m0, m1, frac, v0, v1) = _horizontal_sample(source.data, x_coord)

    def backward(g):
        if source.requires_grad:
            gsrc = _scatter_horizontal(g, source.data.shape, x0c, x1c, m0, m1, frac)
            source._accumulate(gsrc.astype(source.dtype, copy=False))
        if disparity.requires_grad:
            # d out / d disparity = -(m1*v1 - m0*v0), summed over channels
            gd = (g * (m0 * v0 - m1 * v1)).sum(axis=1, keepdims=True)
            disparity._accumulate(gd.astype(disparity.dtype, copy=False))

    return Tensor._from_op(out, (source, disparity), backward, "warp_horizontal")


def _scatter_horizontal(g, src_shape, x0c, x1c, m0, m1, frac):
    n, c, h, w = src_shape
    idx0 = np.broadcast_to(x0c, src_shape)
    idx1 = np.broadcast_to(x1c, src_shape)
    base = (np.arange(n * c * h).reshape(n, c, h, 1)) * w
    flat0 = (base + idx0).ravel()
    flat1 = (base + idx1).ravel()
    w0 = (g * (1.0 - frac) * m0).ravel()
    w1 = (g * frac * m1).ravel()
    total = np.bincount(flat0, weights=w0, minlength=n * c * h * w)
    total += np.bincount(flat1, weights=w1, minlength=n * c * h * w)
    return total.reshape(src_shape)


# -- pyramid pooling and context fusion ---------------------------------------


def spp(x: Tensor, pool_kernels) -> Tensor:
    """Spatial pyramid pooling: max-pool at each kernel (stride = kernel),
    bilinear-restore to the input size, concatenate on channels.

    Inputs smaller than a kernel are zero-padded up to the next multiple of
    it before pooling; the restored map is cropped back.
    """
    n, c, h, w = _shape4(x, "spp input")
    branches = []
    for kern in pool_kernels:
        if kern < 1:
            raise ConfigError(f"spp pool kernel must be >= 1, got {kern}")
        ph = (-h) % kern
        pw = (-w) % kern
        t = pad_spatial(x, ph, pw) if (ph or pw) else x
        pooled = maxpool2d(t, kern, kern)
        restored = upsample_bilinear(pooled, kern)
        if ph or pw:
            restored = crop_spatial(restored, h, w)
        branches.append(restored)
    return concat_channels(branches)


@dataclass(frozen=True)
class LgcfSpec:
    """Context fusion: dilated dense branch + pyramid pooling branch,
    fused with the raw features by a 1x1 conv."""

    feature_channels: int
    growth: int = 8
    dilations: tuple = (1, 3, 6, 12, 18, 24)
    pool_kernels: tuple = (8, 16, 32, 64)
    fusion_channels: int = 0  # 0 means "same as feature_channels"

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(self.dilations))
        object.__setattr__(self, "pool_kernels", tuple(self.pool_kernels))
        if self.fusion_channels == 0:
            object.__setattr__(self, "fusion_channels", self.feature_channels)

    @property
    def dense_spec(self) -> DenseBlockSpec:
        return DenseBlockSpec(
            in_channels=self.feature_channels,
            growth=self.growth,
            layers=len(self.dilations),
            dilations=self.dilations,
        )


class Lgcf(Module):
    """Siamese context-fusion block applied to each view's feature map."""

    def __init__(self, spec: LgcfSpec, *, rng, dtype):
        self.lgcf_spec = spec
        self.dense = DenseBlock(spec.dense_spec, rng=rng, dtype=dtype)
        fused_in = (
            spec.feature_channels
            + spec.dense_spec.out_channels
            + spec.feature_channels * len(spec.pool_kernels)
        )
        self.fusion = Conv2d(fused_in, spec.fusion_channels, 1, rng=rng, dtype=dtype)

    def __call__(self, feats: Tensor) -> Tensor:
        local_ctx = self.dense(feats)
        global_ctx = spp(feats, self.lgcf_spec.pool_kernels)
        return self.fusion(concat_channels([feats, local_ctx, global_ctx]))


def _shape4(t: Tensor, what: str):
    if t.data.ndim != 4:
        raise ShapeError(f"{what} must be 4-D (N,C,H,W), got {t.data.shape}")
    return t.data.shape
