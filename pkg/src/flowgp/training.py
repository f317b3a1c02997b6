"""Adam optimization of the bounds, freeze schedules and initialization.

The optimizer state and step are exposed on flat float64 vectors so the
same machinery drives model fits, flow initializers and the net matcher.
"""

from __future__ import annotations

import sys
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import NonFiniteValue, NotPositiveDefinite, UsageError


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @staticmethod
    def zeros(n):
        return AdamState(m=np.zeros(n), v=np.zeros(n), t=0)


def adam_step(params, grads, state, lr=0.01, betas=(0.9, 0.999), eps=1e-8):
    """One Adam update with bias correction; returns (params, state)."""
    grads = np.asarray(grads, dtype=np.float64)
    params = np.asarray(params, dtype=np.float64)
    if grads.shape != params.shape or state.m.shape != params.shape:
        raise UsageError("parameter, gradient and state shapes must match")
    if not np.all(np.isfinite(grads)):
        raise NonFiniteValue("non-finite gradient passed to adam_step")
    b1, b2 = betas
    t = state.t + 1
    m = b1 * state.m + (1.0 - b1) * grads
    v = b2 * state.v + (1.0 - b2) * grads * grads
    m_hat = m / (1.0 - b1 ** t)
    v_hat = v / (1.0 - b2 ** t)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_params, AdamState(m=m, v=v, t=t)


@dataclass(frozen=True)
class TrainConfig:
    """Knobs for one optimization run."""

    lr: float = 0.01
    epochs: int = 500
    batch_size: int = 0             # 0 means full batch
    seed: int = 0
    freeze: str = "none"            # "none" | "noise" | "covariance"
    freeze_fraction: float = 0.6    # of epochs, for the noise schedule
    freeze_epochs: int = 2000       # for the covariance schedule
    flow_init: str = "identity"     # "identity" | "from-data" | "random"
    init_epochs: int = 2000
    kmeans_runs: int = 10
    verbose: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise UsageError("learning rate must be positive")
        if self.freeze not in ("none", "noise", "covariance"):
            raise UsageError(f"unknown freeze schedule {self.freeze!r}")
        if self.flow_init not in ("identity", "from-data", "random"):
            raise UsageError(f"unknown flow init {self.flow_init!r}")


@dataclass
class TrainTrace:
    """Per-epoch record of the optimization."""

    elbo: list = field(default_factory=list)
    ell: list = field(default_factory=list)
    kl: list = field(default_factory=list)
    penalty: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    jitter_escalations: int = 0
