"""AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..tensor import Tensor


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def optimizer_step(param: np.ndarray, grad: np.ndarray, state: AdamState, lr_t: float,
                   beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                   weight_decay: float = 0.0) -> None:
    """One in-place AdamW update of ``param``."""
    state.t += 1
    state.m *= beta1
    state.m += (1.0 - beta1) * grad
    state.v *= beta2
    state.v += (1.0 - beta2) * grad * grad
    mhat = state.m / (1.0 - beta1**state.t)
    vhat = state.v / (1.0 - beta2**state.t)
    if weight_decay:
        param *= 1.0 - lr_t * weight_decay
    param -= lr_t * mhat / (np.sqrt(vhat) + eps)


@dataclass
class AdamW:
    """AdamW over named tensors; tensors with ``requires_grad=False`` are skipped."""

    tensors: list[tuple[str, Tensor]]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    gate_weight_decay: float = 0.0
    grad_clip: float | None = 1.0
    state: dict[str, AdamState] = field(default_factory=dict)

    def _decay(self, name: str, t: Tensor) -> float:
        if name.startswith("gate."):
            return self.gate_weight_decay
        # matrices decay; gains, biases and other vectors do not
        return self.weight_decay if t.ndim >= 2 else 0.0

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(k, t) for k, t in self.tensors if t.requires_grad]

    def grad_norm(self) -> float:
        total = 0.0
        for _, t in self.trainable():
            if t.grad is not None:
                total += float(np.dot(t.grad.reshape(-1), t.grad.reshape(-1)))
        return math.sqrt(total)

    def step(self, lr_t: float) -> float:
        """Apply one update; returns the pre-clip global gradient norm."""
        norm = self.grad_norm()
        mult = 1.0
        if self.grad_clip is not None and norm > self.grad_clip:
            mult = self.grad_clip / (norm + 1e-12)
        for name, t in self.trainable():
            if t.grad is None:
                continue
            st = self.state.get(name)
            if st is None:
                st = self.state[name] = AdamState(np.zeros_like(t.data), np.zeros_like(t.data))
            g = t.grad if mult == 1.0 else t.grad * mult
            optimizer_step(t.data, g, st, lr_t, self.beta1, self.beta2, self.eps, self._decay(name, t))
        return norm

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, st in self.state.items():
            out[f"opt.m.{name}"] = st.m
            out[f"opt.v.{name}"] = st.v
        return out


def lr_at(step: int, total_steps: int, peak: float, warmup_frac: float = 0.02, min_frac: float = 0.1) -> float:
    """Linear warmup then cosine decay from ``peak`` to ``min_frac * peak``."""
    warmup = max(1, int(round(warmup_frac * total_steps))) if warmup_frac > 0 else 0
    if step < warmup:
        return peak * (step + 1) / warmup
    span = max(1, total_steps - warmup)
    progress = min(1.0, (step - warmup) / span)
    floor = min_frac * peak
    return floor + 0.5 * (peak - floor) * (1.0 + math.cos(math.pi * progress))
