"""Minimal reverse-mode autodiff tensor core.

Implements exactly the op set the disparity network needs: 2-D convolution
and transposed convolution, ELU, max pooling, bilinear upsampling, channel
concatenation, zero-padding/cropping, elementwise arithmetic and reductions.
Every op checks its output for NaN/Inf and raises NumericError instead of
propagating silently.

Tensors wrap a numpy array and record the computation graph through parent
links plus a backward closure; `Tensor.backward()` runs reverse topological
accumulation. Gradient mode is a thread-local flag so independent graphs can
run on separate threads (a single graph is never thread-safe).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

_tls = threading.local()


def grad_enabled() -> bool:
    return getattr(_tls, "grad_enabled", True)


class no_grad:
    """Context manager that disables graph recording on the current thread."""

    def __enter__(self):
        self._prev = grad_enabled()
        _tls.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _tls.grad_enabled = self._prev
        return False


def _as_float_array(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return arr


def _check_finite(arr: np.ndarray, op: str) -> None:
    # sum() in a float64 accumulator is one pass and goes non-finite iff the
    # array contains NaN/Inf (desk-scale magnitudes cannot overflow it).
    if not np.isfinite(np.sum(arr, dtype=np.float64)):
        raise NumericError(f"{op} produced non-finite values")


class Tensor:
    """N-dimensional array node of the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_float_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward_fn = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op}, grad={self.requires_grad})"

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents, backward_fn, op: str) -> "Tensor":
        _check_finite(data, op)
        out = Tensor(data)
        if grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward_fn = backward_fn
            out.op = op
        return out

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            # copy: g may be a view into (or alias of) another node's buffer
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar; accumulates into `.grad`."""
        if self.data.size != 1:
            raise ValueError(
                f"backward() requires a scalar loss, got shape {self.data.shape}"
            )
        if not self.requires_grad:
            raise ValueError("backward() on a tensor with no recorded graph")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None:
                node._backward_fn(node.grad)

    # -- elementwise arithmetic ---------------------------------------------

    def _binary(self, other, fwd, bwd_self, bwd_other, op):
        if isinstance(other, (int, float)):
            other = Tensor(np.asarray(other, dtype=self.dtype))
        if other.data.shape != self.data.shape and other.data.size != 1:
            raise ShapeError(
                f"{op}: operand shapes {self.data.shape} vs {other.data.shape}"
            )
        a, b = self, other
        data = fwd(a.data, b.data)

        def backward(g):
            a._accumulate(_reduce_to(bwd_self(g, a.data, b.data), a.data.shape))
            b._accumulate(_reduce_to(bwd_other(g, a.data, b.data), b.data.shape))

        return Tensor._from_op(data, (a, b), backward, op)

    def __add__(self, other):
        return self._binary(
            other, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g, "add"
        )

    __radd__ = __add__

    def __sub__(self, other):
        return self._binary(
            other, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g, "sub"
        )

    def __mul__(self, other):
        return self._binary(
            other,
            lambda x, y: x * y,
            lambda g, x, y: g * y,
            lambda g, x, y: g * x,
            "mul",
        )

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __truediv__(self, scalar):
        if not isinstance(scalar, (int, float)):
            raise TypeError("division only by python scalars")
        return self * (1.0 / scalar)

    def sum(self) -> "Tensor":
        x = self
        data = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype)

        def backward(g):
            x._accumulate(np.broadcast_to(g, x.data.shape).astype(x.dtype))

        return Tensor._from_op(data, (x,), backward, "sum")

    def mean(self) -> "Tensor":
        return self.sum() / float(self.data.size)


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    # scalar operands absorb the full upstream gradient
    if g.shape == tuple(shape):
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


# -- convolution -------------------------------------------------------------


@dataclass(frozen=True)
class ConvSpec:
    """Static description of a square 2-D convolution."""

    in_channels: int
    out_channels: int
    kernel_size: int = 3
    dilation: int = 1
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        k, d, s, p = self.kernel_size, self.dilation, self.stride, self.padding
        if k < 1 or k % 2 == 0:
            raise ConfigError(f"kernel size must be odd and >= 1, got {k}")
        if d < 1:
            raise ConfigError(f"dilation must be >= 1, got {d}")
        if s < 1:
            raise ConfigError(f"stride must be >= 1, got {s}")
        if p < 0:
            raise ConfigError(f"padding must be >= 0, got {p}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("channel counts must be positive")

    @property
    def receptive_field(self) -> int:
        """Effective receptive field (k-1)(d-1) + k of this single layer."""
        k, d = self.kernel_size, self.dilation
        return (k - 1) * (d - 1) + k

    def out_size(self, size: int) -> int:
        n = (size + 2 * self.padding - self.receptive_field) // self.stride + 1
        if n < 1:
            raise ConfigError(
                f"conv output size {n} for input {size} "
                f"(k={self.kernel_size}, d={self.dilation}, "
                f"stride={self.stride}, pad={self.padding})"
            )
        return n


def same_padding(kernel_size: int, dilation: int = 1) -> int:
    """Zero-fill padding that preserves spatial size at stride 1."""
    return ((kernel_size - 1) * (dilation - 1) + kernel_size) // 2


def _to_nhwc(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


def _to_nchw(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


def _pad_nhwc(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    n, h, w, c = x.shape
    out = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=x.dtype)
    out[:, p : p + h, p : p + w, :] = x
    return out


_COLS_CACHE_BYTES = 2 << 20


def _gather_cols(xp: np.ndarray, k: int, stride: int, dilation: int, ho: int, wo: int):
    """im2col over a padded NHWC array -> (n*ho*wo, k*k*c), innermost contiguous."""
    n, _, _, c = xp.shape
    sn, sh, sw, sc = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, ho, wo, k, k, c),
        strides=(sn, stride * sh, stride * sw, dilation * sh, dilation * sw, sc),
        writeable=False,
    )
    return windows.reshape(n * ho * wo, k * k * c)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, spec: ConvSpec) -> Tensor:
    """2-D convolution, zero-fill padding, NCHW layout, weight (Cout,Cin,k,k).

    Internally runs channels-last im2col + one GEMM; backward uses the
    transposed GEMMs plus a k*k scatter for the input gradient.
    """
    n, c, h, w = _require_4d(x, "conv2d input")
    co, ci, kh, kw = _require_4d(weight, "conv2d weight")
    k, s, d, p = spec.kernel_size, spec.stride, spec.dilation, spec.padding
    if kh != k or kw != k:
        raise ShapeError(f"conv2d: weight kernel {kh}x{kw} != spec kernel {k}")
    if c != ci or ci != spec.in_channels:
        raise ShapeError(
            f"conv2d: input channels {c} vs weight in_channels {ci} "
            f"vs spec in_channels {spec.in_channels}"
        )
    if co != spec.out_channels:
        raise ShapeError(
            f"conv2d: weight out_channels {co} != spec out_channels {spec.out_channels}"
        )
    if bias is not None and bias.data.shape != (co,):
        raise ShapeError(f"conv2d: bias shape {bias.data.shape} != ({co},)")
    ho = spec.out_size(h)
    wo = spec.out_size(w)

    xp = _pad_nhwc(_to_nhwc(x.data), p)
    cols = _gather_cols(xp, k, s, d, ho, wo)
    wmat = weight.data.transpose(2, 3, 1, 0).reshape(k * k * ci, co)
    out = cols @ wmat
    if bias is not None:
        out += bias.data
    out = _to_nchw(out.reshape(n, ho, wo, co))
    # small im2col matrices are kept for the weight-grad GEMM; large ones
    # are re-gathered in backward to keep peak memory flat
    cols_cached = cols if cols.nbytes <= _COLS_CACHE_BYTES else None
    del cols

    def backward(g):
        gmat = _to_nhwc(g).reshape(n * ho * wo, co)
        if bias is not None:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if weight.requires_grad:
            cols_b = cols_cached if cols_cached is not None else _gather_cols(
                xp, k, s, d, ho, wo
            )
            gw = (cols_b.T @ gmat).reshape(k, k, ci, co)
            weight._accumulate(gw.transpose(3, 2, 0, 1).astype(weight.dtype, copy=False))
        if x.requires_grad:
            gcols = (gmat @ wmat.T).reshape(n, ho, wo, k, k, ci)
            gxp = np.zeros_like(xp)
            for t in range(k * k):
                i, j = divmod(t, k)
                gxp[:, i * d : i * d + s * ho : s, j * d : j * d + s * wo : s, :] += (
                    gcols[:, :, :, i, j, :]
                )
            gx = gxp[:, p : p + h, p : p + w, :] if p else gxp
            x._accumulate(_to_nchw(gx).astype(x.dtype, copy=False))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward, "conv2d")


def deconv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None,
    stride: int = 2,
    padding: int = 0,
) -> Tensor:
    """Transposed convolution; weight layout (Cin,Cout,k,k).

    Forward is the scatter adjoint of conv2d, so its gradient w.r.t. the
    input is an ordinary convolution with the same weights.
    """
    if stride < 1:
        raise ConfigError(f"deconv2d stride must be positive, got {stride}")
    if padding < 0:
        raise ConfigError(f"deconv2d padding must be >= 0, got {padding}")
    n, c, h, w = _require_4d(x, "deconv2d input")
    ci, co, kh, kw = _require_4d(weight, "deconv2d weight")
    if kh != kw:
        raise ShapeError(f"deconv2d: kernel must be square, got {kh}x{kw}")
    k = kh
    if c != ci:
        raise ShapeError(f"deconv2d: input channels {c} != weight in_channels {ci}")
    if bias is not None and bias.data.shape != (co,):
        raise ShapeError(f"deconv2d: bias shape {bias.data.shape} != ({co},)")
    hf = (h - 1) * stride + k
    wf = (w - 1) * stride + k
    ho, wo = hf - 2 * padding, wf - 2 * padding
    if ho < 1 or wo < 1:
        raise ConfigError(f"deconv2d output {ho}x{wo} is empty (padding too large)")

    xt = _to_nhwc(x.data).reshape(n * h * w, ci)
    # (ci,co,k,k) -> (ci, k*k*co): one GEMM emits every tap's contribution
    wmat = np.ascontiguousarray(weight.data.transpose(0, 2, 3, 1)).reshape(ci, k * k * co)
    cols = (xt @ wmat).reshape(n, h, w, k, k, co)
    full = np.zeros((n, hf, wf, co), dtype=x.dtype)
    for t in range(k * k):
        i, j = divmod(t, k)
        full[:, i : i + stride * h : stride, j : j + stride * w : stride, :] += (
            cols[:, :, :, i, j, :]
        )
    out = full[:, padding : padding + ho, padding : padding + wo, :]
    if bias is not None:
        out = out + bias.data
    out = _to_nchw(out)

    def backward(g):
        if bias is not None:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        gfull = np.zeros((n, hf, wf, co), dtype=g.dtype)
        gfull[:, padding : padding + ho, padding : padding + wo, :] = _to_nhwc(g)
        gcols = np.empty((n * h * w, k * k * co), dtype=g.dtype)
        for t in range(k * k):
            i, j = divmod(t, k)
            gsl = gfull[:, i : i + stride * h : stride, j : j + stride * w : stride, :]
            gcols[:, t * co : (t + 1) * co] = gsl.reshape(n * h * w, co)
        if x.requires_grad:
            gx = (gcols @ wmat.T).reshape(n, h, w, ci)
            x._accumulate(_to_nchw(gx).astype(x.dtype, copy=False))
        if weight.requires_grad:
            gw = (xt.T @ gcols).reshape(ci, k, k, co)
            weight._accumulate(gw.transpose(0, 3, 1, 2).astype(weight.dtype, copy=False))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward, "deconv2d")


# -- activations and pooling --------------------------------------------------


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    """Exponential linear unit: x for x >= 0, alpha*(e^x - 1) below."""
    if alpha <= 0:
        raise ConfigError(f"elu alpha must be positive, got {alpha}")
    pos = x.data >= 0
    # expm1 of the clipped values avoids overflow on the unused branch
    out = np.where(pos, x.data, alpha * np.expm1(np.minimum(x.data, 0)))

    def backward(g):
        x._accumulate(g * np.where(pos, np.asarray(1, dtype=out.dtype), out + alpha))

    return Tensor._from_op(out, (x,), backward, "elu")


def maxpool2d(x: Tensor, kernel: int, stride: int) -> Tensor:
    """Per-window maximum; gradient routes to the first (row-major) argmax."""
    if kernel < 1 or stride < 1:
        raise ConfigError(f"maxpool2d kernel/stride must be >= 1, got {kernel}/{stride}")
    n, c, h, w = _require_4d(x, "maxpool2d input")
    if kernel > h or kernel > w:
        raise ConfigError(f"maxpool2d kernel {kernel} exceeds input {h}x{w}")
    ho = (h - kernel) // stride + 1
    wo = (w - kernel) // stride + 1
    sn, sc, sh, sw = x.data.strides
    windows = np.lib.stride_tricks.as_strided(
        x.data,
        shape=(n, c, ho, wo, kernel, kernel),
        strides=(sn, sc, stride * sh, stride * sw, sh, sw),
        writeable=False,
    ).reshape(n, c, ho, wo, kernel * kernel)
    arg = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        ni, ci_, yi, xi = np.ogrid[:n, :c, :ho, :wo]
        iy = yi * stride + arg // kernel
        ix = xi * stride + arg % kernel
        flat = ((ni * c + ci_) * h + iy) * w + ix
        gx = np.bincount(flat.ravel(), weights=g.ravel(), minlength=n * c * h * w)
        x._accumulate(gx.reshape(n, c, h, w).astype(x.dtype, copy=False))

    return Tensor._from_op(np.ascontiguousarray(out), (x,), backward, "maxpool2d")


_INTERP_CACHE: dict = {}


def _interp_matrix(n_in: int, factor: int, dtype) -> np.ndarray:
    """Row-stochastic 1-D bilinear upsampling matrix, align-corners-false."""
    key = (n_in, factor, np.dtype(dtype).str)
    m = _INTERP_CACHE.get(key)
    if m is None:
        n_out = n_in * factor
        coords = np.clip((np.arange(n_out) + 0.5) / factor - 0.5, 0, n_in - 1)
        lo = np.floor(coords).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = coords - lo
        m = np.zeros((n_out, n_in), dtype=dtype)
        rows = np.arange(n_out)
        np.add.at(m, (rows, lo), 1.0 - frac)
        np.add.at(m, (rows, hi), frac)
        _INTERP_CACHE[key] = m
    return m


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    """Bilinear upsampling by an integer factor (align-corners-false)."""
    if not isinstance(factor, int) or factor < 2:
        raise ConfigError(f"upsample factor must be an integer >= 2, got {factor}")
    n, c, h, w = _require_4d(x, "upsample input")
    mh = _interp_matrix(h, factor, x.dtype)
    mw = _interp_matrix(w, factor, x.dtype)
    t = np.tensordot(x.data, mh, axes=([2], [1]))  # (n,c,w,ho)
    out = np.tensordot(t, mw, axes=([2], [1]))  # (n,c,ho,wo)

    def backward(g):
        gt = np.tensordot(g, mh, axes=([2], [0]))  # (n,c,wo,h)
        gx = np.tensordot(gt, mw, axes=([2], [0]))  # (n,c,h,w)
        x._accumulate(gx.astype(x.dtype, copy=False))

    return Tensor._from_op(np.ascontiguousarray(out), (x,), backward, "upsample_bilinear")


# -- shape plumbing -----------------------------------------------------------


def concat_channels(inputs) -> Tensor:
    """Concatenate NCHW tensors along the channel axis."""
    inputs = list(inputs)
    if not inputs:
        raise ShapeError("concat_channels: empty input list")
    base = inputs[0].data.shape
    for t in inputs:
        s = t.data.shape
        if len(s) != 4 or s[0] != base[0] or s[2:] != base[2:]:
            raise ShapeError(
                f"concat_channels: shape {s} incompatible with {base} (N,H,W must match)"
            )
    out = np.concatenate([t.data for t in inputs], axis=1)
    splits = np.cumsum([t.data.shape[1] for t in inputs])[:-1]

    def backward(g):
        for t, piece in zip(inputs, np.split(g, splits, axis=1)):
            t._accumulate(piece)

    return Tensor._from_op(out, tuple(inputs), backward, "concat_channels")


def pad_spatial(x: Tensor, pad_h: int, pad_w: int) -> Tensor:
    """Zero-pad bottom/right so spatial dims grow by (pad_h, pad_w)."""
    if pad_h < 0 or pad_w < 0:
        raise ConfigError("pad_spatial amounts must be >= 0")
    n, c, h, w = _require_4d(x, "pad_spatial input")
    if pad_h == 0 and pad_w == 0:
        out = x.data.copy()
    else:
        out = np.pad(x.data, ((0, 0), (0, 0), (0, pad_h), (0, pad_w)))

    def backward(g):
        x._accumulate(g[:, :, :h, :w])

    return Tensor._from_op(out, (x,), backward, "pad_spatial")


def crop_spatial(x: Tensor, height: int, width: int) -> Tensor:
    """Keep the top-left (height, width) window; backward zero-fills the rest."""
    n, c, h, w = _require_4d(x, "crop_spatial input")
    if height > h or width > w or height < 1 or width < 1:
        raise ConfigError(f"crop {height}x{width} invalid for input {h}x{w}")
    out = np.ascontiguousarray(x.data[:, :, :height, :width])

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, :, :height, :width] = g
        x._accumulate(gx)

    return Tensor._from_op(out, (x,), backward, "crop_spatial")


def _require_4d(t: Tensor, what: str):
    if t.data.ndim != 4:
        raise ShapeError(f"{what} must be 4-D (N,C,H,W), got shape {t.data.shape}")
    return t.data.shape
