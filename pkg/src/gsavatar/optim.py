"""Adam with per-attribute learning rates and cosine decay, acting on a GaussianLayer."""

from __future__ import annotations

import math

import numpy as np

from .core import ATTRIBUTES, GaussianLayer

_FIELDS = {
    "center": "centers",
    "scale": "log_scales",
    "rotation": "quats",
    "color": "color_logits",
    "opacity": "opacity_logits",
}

DEFAULT_LR = {"center": 1.6e-4, "scale": 5e-3, "rotation": 1e-3, "color": 1e-2, "opacity": 5e-2}


def cosine_lr(base: float, step: int, total: int, final_ratio: float = 0.01) -> float:
    if total <= 1:
        return base
    frac = min(step / (total - 1), 1.0)
    return base * (final_ratio + (1 - final_ratio) * 0.5 * (1 + math.cos(math.pi * frac)))


class LayerAdam:
    def __init__(self, layer: GaussianLayer, lr: dict, total_steps: int,
                 betas=(0.9, 0.999), eps: float = 1e-15, final_ratio: float = 0.01):
        unknown = set(lr) - set(ATTRIBUTES)
        if unknown:
            raise ValueError(f"unknown attributes {unknown}")
        self.lr = dict(lr)
        self.total_steps = total_steps
        self.betas = betas
        self.eps = eps
        self.final_ratio = final_ratio
        self.t = 0
        self.m = {a: np.zeros_like(getattr(layer, _FIELDS[a])) for a in self.lr}
        self.v = {a: np.zeros_like(getattr(layer, _FIELDS[a])) for a in self.lr}

    def grow(self, n_new: int) -> None:
        """Zero moments for points appended to the layer."""
        for state in (self.m, self.v):
            for a, arr in state.items():
                state[a] = np.concatenate([arr, np.zeros((n_new,) + arr.shape[1:])])

    def step(self, layer: GaussianLayer, grads: dict) -> None:
        b1, b2 = self.betas
        self.t += 1
        for a, base in self.lr.items():
            if getattr(layer.frozen, a) or base == 0:
                continue
            g = grads[a]
            self.m[a] = b1 * self.m[a] + (1 - b1) * g
            self.v[a] = b2 * self.v[a] + (1 - b2) * g * g
            m_hat = self.m[a] / (1 - b1**self.t)
            v_hat = self.v[a] / (1 - b2**self.t)
            lr = cosine_lr(base, self.t - 1, self.total_steps, self.final_ratio)
            param = getattr(layer, _FIELDS[a])
            param -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
