"""Deterministic SGD with momentum, weight decay and a step-drop schedule,
plus a central-difference gradient checker."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    lr_drop_epochs: tuple[int, ...] = ()
    lr_drop_factor: float = 10.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"sgd.learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"sgd.momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"sgd.weight_decay must be >= 0, got {self.weight_decay}")
        if not self.lr_drop_factor > 0:
            raise ConfigError(f"sgd.lr_drop_factor must be > 0, got {self.lr_drop_factor}")
        drops = tuple(int(e) for e in self.lr_drop_epochs)
        if any(b <= a for a, b in zip(drops, drops[1:])):
            raise ConfigError(f"sgd.lr_drop_epochs must be strictly increasing, got {drops}")
        object.__setattr__(self, "lr_drop_epochs", drops)


def effective_lr(config: SgdConfig, epoch: int) -> float:
    """Learning rate at a 0-based epoch: divided by lr_drop_factor once per
    schedule entry <= epoch."""
    drops = sum(1 for e in config.lr_drop_epochs if e <= epoch)
    return config.learning_rate / config.lr_drop_factor ** drops


class SgdState:
    """Momentum buffers, one per parameter array, in parameter order."""

    def __init__(self, params: Sequence[np.ndarray]):
        self.buffers = [np.zeros_like(p) for p in params]


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
             state: SgdState, config: SgdConfig, epoch: int) -> None:
    """In-place update: buf <- momentum*buf + (grad + wd*p); p <- p - lr_eff*buf."""
    if len(params) != len(grads) or len(params) != len(state.buffers):
        raise ShapeError("params, grads and momentum buffers must align")
    lr = effective_lr(config, epoch)
    wd = config.weight_decay
    for p, g, buf in zip(params, grads, state.buffers):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        update = g + wd * p if wd else g
        buf *= config.momentum
        buf += update
        p -= lr * buf


def grad_check(params: Sequence[np.ndarray], names: Sequence[str],
               loss_fn: Callable[[], float],
               analytic: Sequence[np.ndarray], h: float = 1e-6) -> dict[str, float]:
    """Compare analytic gradients against central finite differences.

    Perturbs every entry of every parameter array in place, calling
    ``loss_fn`` twice per entry.  Per block, the reported figure is the max
    absolute deviation divided by the block's largest gradient magnitude
    (guarding near-zero entries against finite-difference roundoff noise);
    an all-zero block falls back to absolute deviation.
    """
    report: dict[str, float] = {}
    for p, name, a in zip(params, names, analytic):
        numeric = np.zeros_like(p)
        flat_p = p.reshape(-1)
        flat_n = numeric.reshape(-1)
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + h
            up = loss_fn()
            flat_p[i] = orig - h
            down = loss_fn()
            flat_p[i] = orig
            flat_n[i] = (up - down) / (2.0 * h)
        scale = max(np.max(np.abs(a)), np.max(np.abs(numeric)))
        err = np.max(np.abs(a - numeric))
        report[name] = float(err / scale) if scale > 0 else float(err)
    return report
