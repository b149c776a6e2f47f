"""Discrete forward-noising schedule (linear beta ramp) and the noising map."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

DEFAULT_T = 200
DEFAULT_BETA_START = 1e-4
# chosen so alpha_bar at the terminal step is ~5e-5 (near-pure noise) with T=200
DEFAULT_BETA_END = 0.1


@dataclass(frozen=True)
class NoiseSchedule:
    """Beta/alpha tables for a T-step diffusion process.

    alpha_bar is the cumulative product of (1 - beta); it is strictly
    decreasing and stays in (0, 1).
    """

    T: int
    beta: np.ndarray
    alpha: np.ndarray = field(repr=False, default=None)
    alpha_bar: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        object.__setattr__(self, "alpha", 1.0 - self.beta)
        object.__setattr__(self, "alpha_bar", np.cumprod(self.alpha))


def make_schedule(T: int = DEFAULT_T,
                  beta_start: float = DEFAULT_BETA_START,
                  beta_end: float = DEFAULT_BETA_END) -> NoiseSchedule:
    """Linear beta schedule with T steps.

    Raises ConfigError unless T >= 1 and 0 < beta_start <= beta_end < 1.
    """
    if T < 1:
        raise ConfigError(f"schedule needs T >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(
            f"beta range must satisfy 0 < start <= end < 1, got ({beta_start}, {beta_end})")
    if T == 1:
        beta = np.array([beta_start], dtype=np.float64)
    else:
        beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    return NoiseSchedule(T=T, beta=beta)


def add_noise(x0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Forward-noise x0 at step t: sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 shape {x0.shape} != eps shape {eps.shape}")
    if not 0 <= t < sched.T:
        raise IndexError(f"t={t} outside schedule range [0, {sched.T})")
    abar = sched.alpha_bar[t]
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps
