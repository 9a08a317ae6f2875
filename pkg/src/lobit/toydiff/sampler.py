"""Deterministic DDIM sampling with classifier-free guidance."""

from __future__ import annotations

import numpy as np

from lobit.metrics import Rng
from lobit.toydiff.model import DenoiserParams, denoiser_forward, time_features_at
from lobit.toydiff.schedule import NoiseSchedule


def cfg_combine(eps_c, eps_u, w: float):
    """Guided noise w * eps_c - (w - 1) * eps_u."""
    if w < 1:
        raise ValueError(f"guidance scale must be >= 1, got {w}")
    return w * eps_c - (w - 1) * eps_u


def ddim_timesteps(T: int, steps: int) -> np.ndarray:
    """Uniform-stride steps, descending: (steps-1)*k, ..., k, 0 with k = T // steps."""
    if not 1 <= steps <= T:
        raise ValueError(f"steps must be in [1, {T}], got {steps}")
    return np.arange(steps - 1, -1, -1, dtype=np.int64) * (T // steps)


def ddim_loop(eps_fn, sched: NoiseSchedule, z, c, steps: int = 50, guidance: float = 1.0,
              null_class: int | None = None, trajectory: list | None = None):
    """Run eta = 0 DDIM from ``z``.

    ``eps_fn(z, t, c)`` predicts noise for a batch.  With ``guidance != 1``
    the conditional and null-conditioned predictions come from one call on
    the stacked batch and are mixed by ``cfg_combine``.
    """
    z = np.asarray(z, dtype=np.float64)
    c = np.asarray(c, dtype=np.int64)
    n = len(z)
    ts = ddim_timesteps(sched.T, steps)
    guided = guidance != 1.0
    if guided and null_class is None:
        raise ValueError("guidance needs the null class index")
    null = np.full(n, null_class if guided else 0, dtype=np.int64)
    for i, t in enumerate(ts):
        if guided:
            both = np.asarray(eps_fn(np.concatenate([z, z]), int(t), np.concatenate([c, null])), dtype=np.float64)
            eps = cfg_combine(both[:n], both[n:], guidance)
        else:
            eps = np.asarray(eps_fn(z, int(t), c), dtype=np.float64)
        ab = sched.alpha_bars[t]
        ab_prev = sched.alpha_bars[ts[i + 1]] if i + 1 < len(ts) else 1.0
        x0 = (z - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)
        z = np.sqrt(ab_prev) * x0 + np.sqrt(1.0 - ab_prev) * eps
        if trajectory is not None:
            trajectory.append(z.copy())
    return z


def model_eps_fn(params: DenoiserParams, weights=None, time_table=None):
    """Wrap the denoiser as ``eps_fn``; time features come from the table when given."""

    def eps_fn(z, t, c):
        if time_table is not None:
            feats = [time_table.lookup(i, t) for i in range(params.config.n_blocks)]
        else:
            feats = time_features_at(params, t)
        return denoiser_forward(params, z, c, t_features=feats, weights=weights)[0]

    return eps_fn


def ddim_sample(params: DenoiserParams, sched: NoiseSchedule, c, steps: int = 50,
                guidance: float = 7.5, seed: int = 0, weights=None, time_table=None,
                trajectory: list | None = None):
    """One sample per entry of ``c``; the starting noise comes from ``Rng(seed)``."""
    c = np.atleast_1d(np.asarray(c, dtype=np.int64))
    z = Rng(seed).normal((len(c), params.config.data_dim))
    fn = model_eps_fn(params, weights, time_table)
    return ddim_loop(fn, sched, z, c, steps, guidance, params.config.null_class, trajectory)
