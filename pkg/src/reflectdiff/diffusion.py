"""Closed-form DDPM math shared by the transmission and reflection branches.

Every function here is pure: randomness enters only through explicit noise
arguments, so identical inputs give bit-identical outputs. Timesteps are
1-based (t = 1..T) at the API surface; the schedule arrays are stored
0-based internally. Image arguments may be numpy arrays or torch tensors
(any shape); per-sample timestep vectors are supported for batched tensors
whose leading axis is the batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

__all__ = [
    "NoiseSchedule",
    "make_schedule",
    "respace_schedule",
    "q_sample",
    "posterior_mean",
    "reverse_step",
    "predict_x0",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed variance schedule.

    beta[i], alpha[i] = 1 - beta[i], alpha_bar[i] = prod_{j<=i} alpha[j] and
    sigma2[i] = beta[i] hold the values for timestep t = i + 1.
    """

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma2: np.ndarray

    def __post_init__(self):
        for name in ("beta", "alpha", "alpha_bar", "sigma2"):
            arr = getattr(self, name)
            if arr.shape != (self.T,):
                raise ValueError(f"{name} must have shape ({self.T},), got {arr.shape}")
        if np.any(self.beta <= 0.0) or np.any(self.beta >= 1.0):
            raise ValueError("beta values must lie strictly inside (0, 1)")
        if not np.array_equal(self.sigma2, self.beta):
            raise ValueError("sigma2 must equal beta exactly")
        if self.T > 1 and np.any(np.diff(self.alpha_bar) >= 0.0):
            raise ValueError("alpha_bar must be strictly decreasing")


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear variance schedule with `T` points inclusive of both endpoints."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar, sigma2=beta.copy())


def respace_schedule(sched: NoiseSchedule, steps: int) -> tuple[NoiseSchedule, np.ndarray]:
    """Uniform step-skipping: keep `steps` timesteps spanning 1..T (endpoints
    always retained) and rebuild per-step betas so the cumulative products of
    the sub-schedule reproduce the retained alpha_bar values.

    Returns the sub-schedule plus the retained original timesteps `taus`
    (ascending), so sub-step i+1 corresponds to original timestep taus[i].
    """
    if not (1 <= steps <= sched.T):
        raise ValueError(f"steps must be in [1, T={sched.T}], got {steps}")
    taus = np.unique(np.round(np.linspace(1, sched.T, steps)).astype(np.int64))
    abar = sched.alpha_bar[taus - 1]
    prev = np.concatenate(([1.0], abar[:-1]))
    beta = 1.0 - abar / prev
    sub = NoiseSchedule(
        T=len(taus), beta=beta, alpha=1.0 - beta, alpha_bar=np.cumprod(1.0 - beta),
        sigma2=beta.copy(),
    )
    return sub, taus


def _check_t(t, T):
    tv = np.asarray(t)
    if not np.issubdtype(tv.dtype, np.integer):
        raise TypeError(f"timesteps must be integers, got dtype {tv.dtype}")
    if np.any(tv < 1) or np.any(tv > T):
        raise ValueError(f"timestep out of range 1..{T}: {t}")


def _gather(arr: np.ndarray, t, like):
    """arr[t-1] as a scalar for int t, or as a broadcastable per-sample column
    (shape [B, 1, ..., 1]) for a length-B vector of timesteps."""
    if isinstance(t, (int, np.integer)):
        _check_t(int(t), len(arr))
        return float(arr[int(t) - 1])
    idx = np.asarray(t, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError(f"t must be a scalar or 1-D vector, got shape {idx.shape}")
    _check_t(idx, len(arr))
    if idx.shape[0] != like.shape[0]:
        raise ValueError(
            f"per-sample timestep vector of length {idx.shape[0]} does not match "
            f"batch size {like.shape[0]}"
        )
    coef = arr[idx - 1].reshape((-1,) + (1,) * (like.ndim - 1))
    if torch.is_tensor(like):
        return torch.as_tensor(coef, dtype=like.dtype, device=like.device)
    return coef


def _sqrt(v):
    if isinstance(v, float):
        return math.sqrt(v)
    if torch.is_tensor(v):
        return torch.sqrt(v)
    return np.sqrt(v)


def _check_same_shape(a, b, what):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def q_sample(x0, t, eps, sched: NoiseSchedule):
    """Forward-diffuse x0 to timestep t: sqrt(abar_t)*x0 + sqrt(1-abar_t)*eps."""
    _check_same_shape(x0, eps, "q_sample")
    ab = _gather(sched.alpha_bar, t, x0)
    return _sqrt(ab) * x0 + _sqrt(1.0 - ab) * eps


def posterior_mean(z_t, eps_pred, t, sched: NoiseSchedule):
    """Reverse-step mean: (z_t - beta_t/sqrt(1-abar_t) * eps_pred) / sqrt(1-beta_t)."""
    _check_same_shape(z_t, eps_pred, "posterior_mean")
    beta = _gather(sched.beta, t, z_t)
    ab = _gather(sched.alpha_bar, t, z_t)
    return (z_t - (beta / _sqrt(1.0 - ab)) * eps_pred) / _sqrt(1.0 - beta)


def reverse_step(z_t, eps_pred, t, noise, sched: NoiseSchedule):
    """One ancestral sampling step: posterior mean plus sqrt(beta_t) * noise.

    The caller provides the standard-normal `noise`; at t = 1 it must be the
    zero tensor (the final step injects no variance).
    """
    _check_same_shape(z_t, noise, "reverse_step")
    t_arr = np.asarray(t)
    if np.any(t_arr == 1):
        n = noise[t_arr == 1] if t_arr.ndim else noise
        zero = (n == 0).all() if torch.is_tensor(n) else np.all(np.asarray(n) == 0)
        if not bool(zero):
            raise ValueError("reverse_step at t=1 requires zero noise")
    mean = posterior_mean(z_t, eps_pred, t, sched)
    s2 = _gather(sched.sigma2, t, z_t)
    return mean + _sqrt(s2) * noise


def predict_x0(z_t, eps_pred, t, sched: NoiseSchedule):
    """Single-step x0 estimate: (z_t - sqrt(1-abar_t) * eps_pred) / sqrt(abar_t)."""
    _check_same_shape(z_t, eps_pred, "predict_x0")
    ab = _gather(sched.alpha_bar, t, z_t)
    return (z_t - _sqrt(1.0 - ab) * eps_pred) / _sqrt(ab)
