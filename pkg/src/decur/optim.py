"""SGD with momentum, LARS, and cosine learning-rate decay.

Parameters flagged ``excluded`` (biases, batch-norm gains/shifts) never get
weight decay and, under LARS, no trust-ratio adaptation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Parameter

LARS_EPS = 1e-9


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        self.param_name = name
        super().__init__(f"non-finite gradient for parameter {name!r}; step aborted")


@dataclass
class OptimConfig:
    kind: str = "lars"
    base_lr_weights: float = 0.2
    base_lr_bias_bn: float = 0.0048
    momentum: float = 0.9
    weight_decay: float = 1e-6
    total_steps: int = 1
    lars_eta: float = 0.001

    def __post_init__(self):
        if self.kind not in ("sgd", "lars"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.base_lr_weights <= 0 or self.base_lr_bias_bn <= 0:
            raise ValueError("learning rates must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0 or self.lars_eta <= 0:
            raise ValueError("weight_decay must be >= 0 and lars_eta > 0")


@dataclass
class OptimState:
    buffers: list[np.ndarray] = field(default_factory=list)
    step: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Parameter]) -> "OptimState":
        return cls([np.zeros_like(p.data) for p in params], 0)


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def _check(params, grads, state):
    if len(params) != len(grads) or len(params) != len(state.buffers):
        raise ValueError("params, grads and optimizer state must align")
    for p, g, b in zip(params, grads, state.buffers):
        if p.data.shape != g.shape or b.shape != g.shape:
            raise ValueError(f"{p.name}: grad shape {g.shape} vs param {p.data.shape}")
    for p, g in zip(params, grads):
        if not np.isfinite(g.sum()) and not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(p.name)


def _bias_lr(cfg: OptimConfig, lr: float) -> float:
    return lr * cfg.base_lr_bias_bn / cfg.base_lr_weights


def sgd_step(params: Sequence[Parameter], grads: Sequence[np.ndarray], state: OptimState,
             cfg: OptimConfig, lr: float) -> None:
    """v <- m v + g + wd w ; w <- w - lr v   (wd skipped for excluded params)."""
    _check(params, grads, state)
    for p, g, v in zip(params, grads, state.buffers):
        d = g if p.excluded or cfg.weight_decay == 0 else g + cfg.weight_decay * p.data
        v *= cfg.momentum
        v += d
        p.data -= lr * v
    state.step += 1


def trust_ratio(w: np.ndarray, g: np.ndarray, cfg: OptimConfig) -> float:
    wf, gf = w.reshape(-1), g.reshape(-1)
    w_norm = float(np.sqrt(wf @ wf))
    if w_norm == 0:
        return 1.0
    g_norm = float(np.sqrt(gf @ gf))
    return cfg.lars_eta * w_norm / (g_norm + cfg.weight_decay * w_norm + LARS_EPS)


def lars_step(params: Sequence[Parameter], grads: Sequence[np.ndarray], state: OptimState,
              cfg: OptimConfig, lr: float) -> None:
    """LARS update. ``lr`` is the weight learning rate; excluded params use
    ``lr * base_lr_bias_bn / base_lr_weights`` with plain momentum SGD."""
    _check(params, grads, state)
    lr_b = _bias_lr(cfg, lr)
    for p, g, v in zip(params, grads, state.buffers):
        if p.excluded:
            v *= cfg.momentum
            v += g
            p.data -= lr_b * v
            continue
        local = trust_ratio(p.data, g, cfg)
        d = g + cfg.weight_decay * p.data if cfg.weight_decay else g
        v *= cfg.momentum
        v += local * d
        p.data -= lr * v
    state.step += 1


class Optimizer:
    """Binds params, config and state; ``step`` reads ``param.grad``."""

    def __init__(self, params: Sequence[Parameter], cfg: OptimConfig):
        self.params = list(params)
        self.cfg = cfg
        self.state = OptimState.for_params(self.params)

    def lr_at(self, step: int) -> float:
        return cosine_lr(self.cfg.base_lr_weights, step, self.cfg.total_steps)

    def step(self, lr: float | None = None) -> float:
        lr = self.lr_at(self.state.step) if lr is None else lr
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        fn = lars_step if self.cfg.kind == "lars" else sgd_step
        fn(self.params, grads, self.state, self.cfg, lr)
        return lr
