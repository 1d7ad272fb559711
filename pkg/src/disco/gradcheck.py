"""Central finite-difference verification of every differentiable op.

Each op has a case builder producing double-precision inputs that stay away
from gradient kinks (ELU at 0, pooling ties, Huber at |t|=1, integer warp
positions), a forward closure, and the list of tensors to differentiate.
The check perturbs every element by +/-h and compares the analytic gradient
against (f(x+h) - f(x-h)) / 2h elementwise.
"""

from __future__ import annotations

import numpy as np

from .blocks import CorrelationSpec, correlation, warp_horizontal
from .errors import ConfigError
from .losses import huber_loss
from .tensor import (
    ConvSpec,
    Tensor,
    concat_channels,
    conv2d,
    deconv2d,
    elu,
    maxpool2d,
    upsample_bilinear,
)

FD_STEP = 1e-5
REL_TOLERANCE = 1e-4
REL_FLOOR = 1e-3  # denominator floor so FD noise near zero cannot dominate


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_FLOOR)
    return float((np.abs(analytic - numeric) / denom).max())


def check_gradients(build_loss, tensors, h: float = FD_STEP, grad_hook=None) -> float:
    """Max relative error between backward() gradients and central FD.

    `grad_hook(analytic_list) -> analytic_list` is a test-mode mutation point
    used to prove the checker detects wrong gradients.
    """
    loss = build_loss()
    loss.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    if grad_hook is not None:
        analytic = grad_hook(analytic)
    worst = 0.0
    for t, ag in zip(tensors, analytic):
        flat = t.data.ravel()
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = build_loss().item()
            flat[i] = orig - h
            fm = build_loss().item()
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * h)
        worst = max(worst, max_rel_error(ag.ravel(), numeric))
        for tt in tensors:
            tt.zero_grad()
    return worst


def _rand(rng, shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _away_from(arr, kink, margin):
    """Push values lying within `margin` of `kink` outward (kink avoidance)."""
    near = np.abs(arr - kink) < margin
    arr[near] = kink + margin * np.where(arr[near] >= kink, 1.0, -1.0)
    return arr


def _loss_weights(rng, shape):
    return Tensor(rng.standard_normal(shape))


# -- per-op suites -------------------------------------------------------------


def _case_conv2d(rng):
    k, d, s = 3, int(rng.integers(1, 4)), int(rng.integers(1, 3))
    p = int(rng.integers(0, d + 2))
    x = _rand(rng, (1, 2, 7, 8))
    w = _rand(rng, (3, 2, k, k), 0.5)
    b = _rand(rng, (3,), 0.2)
    spec = ConvSpec(2, 3, k, dilation=d, stride=s, padding=max(p, (k - 1) * d // 2))
    r = _loss_weights(rng, (1, 3, spec.out_size(7), spec.out_size(8)))
    return lambda: (conv2d(x, w, b, spec) * r).sum(), [x, w, b]


def _case_deconv2d(rng):
    k = int(rng.choice([2, 4]))
    p = int(rng.integers(0, 2)) if k == 4 else 0
    x = _rand(rng, (1, 2, 3, 4))
    w = _rand(rng, (2, 3, k, k), 0.5)
    b = _rand(rng, (3,), 0.2)
    ho = (3 - 1) * 2 + k - 2 * p
    wo = (4 - 1) * 2 + k - 2 * p
    r = _loss_weights(rng, (1, 3, ho, wo))
    return lambda: (deconv2d(x, w, b, 2, p) * r).sum(), [x, w, b]


def _case_elu(rng):
    data = rng.standard_normal((2, 3, 4, 5))
    x = Tensor(_away_from(data, 0.0, 1e-3), requires_grad=True)
    r = _loss_weights(rng, (2, 3, 4, 5))
    return lambda: (elu(x, alpha=1.0) * r).sum(), [x]


def _case_maxpool2d(rng):
    # unique-valued windows keep the argmax stable under FD perturbation
    vals = rng.permutation(6 * 2 * 6 * 8).astype(np.float64).reshape(6, 2, 6, 8)
    x = Tensor(vals * 0.1 + rng.standard_normal((6, 2, 6, 8)) * 1e-4, requires_grad=True)
    kernel = int(rng.choice([2, 3]))
    stride = int(rng.choice([1, 2]))
    ho = (6 - kernel) // stride + 1
    wo = (8 - kernel) // stride + 1
    r = _loss_weights(rng, (6, 2, ho, wo))
    return lambda: (maxpool2d(x, kernel, stride) * r).sum(), [x]


def _case_upsample(rng):
    factor = int(rng.choice([2, 4]))
    x = _rand(rng, (1, 3, 3, 4))
    r = _loss_weights(rng, (1, 3, 3 * factor, 4 * factor))
    return lambda: (upsample_bilinear(x, factor) * r).sum(), [x]


def _case_concat(rng):
    a = _rand(rng, (2, 2, 3, 4))
    b = _rand(rng, (2, 3, 3, 4))
    c = _rand(rng, (2, 1, 3, 4))
    r = _loss_weights(rng, (2, 6, 3, 4))
    return lambda: (concat_channels([a, b, c]) * r).sum(), [a, b, c]


def _case_correlation(rng):
    left = _rand(rng, (1, 3, 4, 7))
    right = _rand(rng, (1, 3, 4, 7))
    r = _loss_weights(rng, (1, 3, 4, 7))
    spec = CorrelationSpec(3)
    return lambda: (correlation(left, right, spec) * r).sum(), [left, right]


def _case_warp(rng):
    source = _rand(rng, (1, 2, 4, 7))
    # fractional offsets well inside a cell so FD never crosses floor()
    frac = rng.uniform(0.2, 0.8, size=(1, 1, 4, 7))
    base = rng.integers(0, 3, size=(1, 1, 4, 7)).astype(np.float64)
    disparity = Tensor(base + frac, requires_grad=True)
    r = _loss_weights(rng, (1, 2, 4, 7))
    return lambda: (warp_horizontal(source, disparity) * r).sum(), [source, disparity]


def _case_huber(rng):
    t = rng.standard_normal((2, 1, 4, 5)) * 2.0
    t = _away_from(t, 1.0, 1e-3)
    t = _away_from(t, -1.0, 1e-3)
    target = rng.standard_normal((2, 1, 4, 5))
    pred = Tensor(target + t, requires_grad=True)
    mask = rng.random((2, 1, 4, 5)) < 0.8
    if not mask.any():
        mask[0, 0, 0, 0] = True
    return lambda: huber_loss(pred, target, mask), [pred]


OP_SUITES = {
    "conv2d": _case_conv2d,
    "deconv2d": _case_deconv2d,
    "elu": _case_elu,
    "maxpool2d": _case_maxpool2d,
    "upsample_bilinear": _case_upsample,
    "concat": _case_concat,
    "correlation": _case_correlation,
    "warp_horizontal": _case_warp,
    "huber_loss": _case_huber,
}


def _op_stream(op: str) -> int:
    return sum(op.encode("ascii"))  # stable across processes, unlike hash()


def run_op_check(op: str, seeds: int = 20, corrupt_op: str | None = None) -> float:
    """Worst relative error for one op over `seeds` random cases."""
    if op not in OP_SUITES:
        raise ConfigError(f"unknown op {op!r}; known: {', '.join(sorted(OP_SUITES))}")
    builder = OP_SUITES[op]
    hook = None
    if corrupt_op == op:
        hook = lambda grads: [g + 1e-3 for g in grads]  # noqa: E731
    worst = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng((seed, _op_stream(op)))
        build_loss, tensors = builder(rng)
        worst = max(worst, check_gradients(build_loss, tensors, grad_hook=hook))
    return worst


def run_gradcheck(ops=None, seeds: int = 20, corrupt_op: str | None = None) -> dict:
    """All per-op suites; returns {op: max relative error}."""
    names = list(OP_SUITES) if ops is None else list(ops)
    return {name: run_op_check(name, seeds, corrupt_op) for name in names}
