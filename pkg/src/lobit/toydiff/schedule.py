from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)


def make_schedule(T: int = 1000, beta_start: float = 0.00085, beta_end: float = 0.012) -> NoiseSchedule:
    """Scaled-linear betas (linear in sqrt(beta)) and their cumulative alpha products."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    frac = np.arange(T) / (T - 1) if T > 1 else np.zeros(1)
    betas = (np.sqrt(beta_start) + frac * (np.sqrt(beta_end) - np.sqrt(beta_start))) ** 2
    return NoiseSchedule(betas, np.cumprod(1.0 - betas))


def forward_diffuse(x, t, eps, sched: NoiseSchedule | None = None, alpha_bar=None):
    """z_t = sqrt(abar_t) x + sqrt(1 - abar_t) eps; t may be an array (one per row).

    Pass ``alpha_bar`` directly to bypass the schedule lookup.
    """
    if alpha_bar is None:
        alpha_bar = sched.alpha_bars[np.asarray(t)]
    ab = np.asarray(alpha_bar, dtype=np.float64)
    if ab.ndim == 1:
        ab = ab[:, None]
    x = np.asarray(x)
    out = np.sqrt(ab) * x + np.sqrt(1.0 - ab) * np.asarray(eps)
    return out.astype(np.result_type(x.dtype, np.float32), copy=False)
