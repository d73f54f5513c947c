"""Poly learning-rate schedule, AdamW and plain SGD over ``name -> Tensor`` dicts."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import Tensor

logger = logging.getLogger(__name__)


def poly_lr(base_lr: float, t: int, total: int, power: float = 0.9) -> float:
    if t < 0 or t > total:
        raise ValueError(f"iteration {t} outside schedule [0, {total}]")
    return base_lr * (1.0 - t / total) ** power


def _finite(grads: Mapping[str, np.ndarray]) -> bool:
    return all(np.all(np.isfinite(g)) for g in grads.values())


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    skipped: int = 0


class AdamW:
    """Decoupled weight decay followed by a bias-corrected Adam update."""

    def __init__(self, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 1e-4):
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = AdamWState()

    def step(self, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], lr: float) -> bool:
        """Apply one update in place. Returns False (and leaves everything
        untouched) when any gradient is non-finite."""
        if not _finite(grads):
            self.state.skipped += 1
            logger.warning("non-finite gradient at step %d; update skipped", self.state.step)
            return False
        st = self.state
        st.step += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** st.step
        bc2 = 1.0 - b2 ** st.step
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            if name not in st.m:
                st.m[name] = np.zeros_like(p.data)
                st.v[name] = np.zeros_like(p.data)
            m, v = st.m[name], st.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            data = p.data
            if self.weight_decay:
                data = data - lr * self.weight_decay * data
            denom = np.sqrt(v / bc2) + self.eps
            p.data = (data - lr * (m / bc1) / denom).astype(p.data.dtype, copy=False)
        return True


def adamw_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamW,
               lr: float) -> bool:
    return state.step(params, grads, lr)


class SGD:
    """Plain gradient descent with optional decoupled weight decay."""

    def __init__(self, weight_decay: float = 0.0):
        self.weight_decay = weight_decay
        self.steps = 0
        self.skipped = 0

    def step(self, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], lr: float) -> bool:
        if not _finite(grads):
            self.skipped += 1
            logger.warning("non-finite gradient; SGD update skipped")
            return False
        self.steps += 1
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            data = p.data
            if self.weight_decay:
                data = data - lr * self.weight_decay * data
            p.data = (data - lr * g).astype(p.data.dtype, copy=False)
        return True


def collect_grads(params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Current gradients, with zeros for parameters the loss did not reach."""
    return {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
