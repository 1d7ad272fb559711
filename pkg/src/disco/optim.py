"""Adaptive-moment optimizer with bias correction and stepwise LR decay."""

from __future__ import annotations

import numpy as np

from .config import OptimConfig
from .errors import NumericError


class Adam:
    """Standard Adam over named parameters.

    State (first/second moments, step count) is keyed by parameter path so
    checkpoints can restore it exactly; a missing gradient counts as zero.
    """

    def __init__(self, named_params, cfg: OptimConfig):
        self.cfg = cfg
        self.params = list(named_params)
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}
        self.step_count = 0

    def zero_grad(self):
        for _, p in self.params:
            p.zero_grad()

    def step(self, lr: float):
        self.step_count += 1
        b1, b2, eps = self.cfg.beta1, self.cfg.beta2, self.cfg.eps
        bc1 = 1.0 - b1**self.step_count
        bc2 = 1.0 - b2**self.step_count
        for name, p in self.params:
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif not np.isfinite(np.sum(g, dtype=np.float64)):
                raise NumericError(f"non-finite gradient for parameter {name}")
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + eps)
            p.data -= np.asarray(lr, dtype=p.data.dtype) * update.astype(p.data.dtype)

    def state_dict(self) -> dict:
        return {
            "step_count": self.step_count,
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
        }

    def load_state_dict(self, state: dict):
        self.step_count = int(state["step_count"])
        for key in self.m:
            self.m[key][...] = state["m"][key]
            self.v[key][...] = state["v"][key]
