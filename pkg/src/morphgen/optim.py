"""AdamW with decoupled decay, warmup+cosine schedule, and weight averaging.

The schedule rises linearly from 0 to the peak rate over the warmup steps,
then follows half a cosine down to 0. Weight averaging keeps the running
mean of parameter snapshots via the exact recurrence
w_avg <- (w_avg * n + w) / (n + 1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class ScheduleConfig:
    peak_lr: float = 1.5e-4
    warmup_epochs: int = 8
    total_epochs: int = 60
    steps_per_epoch: int = 1

    def __post_init__(self) -> None:
        if not 0 < self.warmup_epochs < self.total_epochs:
            raise ValueError(
                f"need 0 < warmup_epochs < total_epochs, got "
                f"{self.warmup_epochs} / {self.total_epochs}"
            )
        if self.steps_per_epoch < 1:
            raise ValueError("steps_per_epoch must be >= 1")

    @property
    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.steps_per_epoch

    @property
    def total_steps(self) -> int:
        return self.total_epochs * self.steps_per_epoch


def _cos_pi(t: float) -> float:
    """cos(pi * t), exact at integer and half-integer t."""
    q = t % 2.0
    if q == 0.0:
        return 1.0
    if q == 0.5 or q == 1.5:
        return 0.0
    if q == 1.0:
        return -1.0
    return math.cos(math.pi * q)


def lr_at(cfg: ScheduleConfig, step: int) -> float:
    """Learning rate at a given optimizer step (0-based)."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    w, total = cfg.warmup_steps, cfg.total_steps
    if step > total:
        return 0.0
    if step < w:
        return cfg.peak_lr * step / w
    tau = (step - w) / (total - w)
    return cfg.peak_lr * 0.5 * (1.0 + _cos_pi(tau))


@dataclass
class AdamWState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    weight_decay: float = 1e-3

    @classmethod
    def init(cls, n_params: int, *, beta1: float = 0.9, beta2: float = 0.999,
             eps_adam: float = 1e-8, weight_decay: float = 1e-3) -> "AdamWState":
        return cls(
            m=np.zeros(n_params, dtype=np.float64),
            v=np.zeros(n_params, dtype=np.float64),
            t=0,
            beta1=beta1,
            beta2=beta2,
            eps_adam=eps_adam,
            weight_decay=weight_decay,
        )


def adamw_step(params: np.ndarray, grads: np.ndarray, state: AdamWState,
               lr: float) -> np.ndarray:
    """One AdamW update on a flat parameter vector; mutates state.

    The decoupled decay term lr * wd * params uses the pre-step parameter
    values, so the gradient-driven part of the update is independent of
    weight_decay.
    """
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError(
            f"shape mismatch: params {params.shape}, grads {grads.shape}, "
            f"state {state.m.shape}"
        )
    if not np.all(np.isfinite(grads)):
        raise FloatingPointError("non-finite gradients passed to adamw_step")

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    state.m = b1 * state.m + (1.0 - b1) * grads
    state.v = b2 * state.v + (1.0 - b2) * (grads * grads)
    m_hat = state.m / (1.0 - b1 ** state.t)
    v_hat = state.v / (1.0 - b2 ** state.t)
    new = params - lr * (m_hat / (np.sqrt(v_hat) + state.eps_adam))
    if state.weight_decay != 0.0:
        new = new - (lr * state.weight_decay) * params
    return new


@dataclass
class SwaState:
    """Running average of parameter snapshots.

    w_swa is undefined until the first update; reading it before then is
    an error.
    """

    n_models: int = 0
    start_epoch: int = 25
    w_swa: np.ndarray | None = field(default=None, repr=False)


def swa_update(state: SwaState, w: np.ndarray) -> SwaState:
    """Fold one snapshot into the running average; returns a new state."""
    w = np.asarray(w, dtype=np.float64)
    if state.n_models == 0:
        return SwaState(n_models=1, start_epoch=state.start_epoch, w_swa=w.copy())
    if state.w_swa.shape != w.shape:
        raise ValueError(
            f"snapshot shape {w.shape} does not match average {state.w_swa.shape}"
        )
    new_avg = (state.w_swa * state.n_models + w) / (state.n_models + 1)
    return SwaState(n_models=state.n_models + 1, start_epoch=state.start_epoch,
                    w_swa=new_avg)


def swa_finalize(state: SwaState) -> np.ndarray:
    """The averaged parameter vector for evaluation."""
    if state.n_models == 0 or state.w_swa is None:
        raise ValueError("swa_finalize called before any snapshot was averaged")
    return state.w_swa.copy()
