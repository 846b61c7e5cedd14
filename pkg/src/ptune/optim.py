"""Adam / AdamW with bias correction, operating on named :class:`Parameter` s."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .autodiff import Parameter


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adamw"  # "adam" or "adamw"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    schedule: str = "constant"  # "constant" or "linear"
    max_steps: int = 1000
    batch_size: int = 32
    grad_clip: float | None = None

    def __post_init__(self):
        if self.kind not in ("adam", "adamw"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be non-negative")
        if self.schedule not in ("constant", "linear"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    def lr_at(self, step: int) -> float:
        """Learning rate for the 1-based ``step``."""
        if self.schedule == "linear":
            return self.lr * max(0.0, 1.0 - (step - 1) / max(1, self.max_steps))
        return self.lr


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class MissingGradientError(RuntimeError):
    pass


def adam_step(params: Iterable[Parameter], state: AdamState, config: OptimizerConfig,
              lr: float | None = None, scales: Mapping[str, float] | None = None) -> None:
    """One in-place Adam/AdamW update over the trainable entries of ``params``.

    Every trainable parameter must carry a gradient; frozen ones are skipped
    even if a stray gradient is attached. ``lr`` overrides the scheduled rate
    and ``scales`` multiplies it per parameter name.
    """
    params = [p for p in params if p.trainable]
    for p in params:
        if p.grad is None:
            raise MissingGradientError(f"no gradient for trainable parameter {p.name!r}")
    state.step += 1
    t = state.step
    lr = config.lr_at(t) if lr is None else lr

    if config.grad_clip is not None:
        norm = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params))
        scale = min(1.0, config.grad_clip / (norm + 1e-12))
    else:
        scale = 1.0

    b1, b2 = config.beta1, config.beta2
    bc1 = 1 - b1 ** t
    bc2 = 1 - b2 ** t
    for p in params:
        g = p.grad * scale if scale != 1.0 else p.grad
        if config.kind == "adam" and config.weight_decay:
            g = g + config.weight_decay * p.data  # coupled L2
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p_lr = lr * scales.get(p.name, 1.0) if scales else lr
        if config.kind == "adamw" and config.weight_decay:
            p.data -= (p_lr * config.weight_decay * p.data).astype(p.data.dtype)
        update = (m / bc1) / (np.sqrt(v / bc2) + config.eps)
        p.data -= (p_lr * update).astype(p.data.dtype)
