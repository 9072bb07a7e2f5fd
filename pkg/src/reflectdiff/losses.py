"""Training objectives as pure functions of predictions and targets.

All reductions are means over batch and pixels so the loss weights are
resolution-independent. Adversarial terms are evaluated from logits
internally (softplus forms) to stay finite near saturation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

__all__ = [
    "LossWeights",
    "denoising_loss",
    "reconstruction_loss",
    "cycle_loss",
    "adversarial_loss_d",
    "adversarial_loss_g",
    "adversarial_loss_d_logits",
    "adversarial_loss_g_logits",
    "decomposer_objective",
]


@dataclass(frozen=True)
class LossWeights:
    """lambda1: denoising, lambda2: reconstruction, lambda3: adversarial
    (paired stage), lambda_adv: adversarial (unpaired stage)."""

    lambda1: float = 1.0
    lambda2: float = 10.0
    lambda3: float = 0.1
    lambda_adv: float = 0.1

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "lambda_adv"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


def _check_shapes(a, b, what):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def denoising_loss(eps_true, eps_pred):
    """Mean squared error between true and predicted noise (one branch)."""
    _check_shapes(eps_true, eps_pred, "denoising_loss")
    return ((eps_true - eps_pred) ** 2).mean()


def reconstruction_loss(s0, r0, s0_hat, r0_hat):
    """Mean absolute error of the s pair plus that of the r pair."""
    _check_shapes(s0, s0_hat, "reconstruction_loss[s]")
    _check_shapes(r0, r0_hat, "reconstruction_loss[r]")
    return (s0 - s0_hat).abs().mean() + (r0 - r0_hat).abs().mean()


def cycle_loss(x, x_hat):
    """Mean absolute error between the input and its re-synthesis."""
    _check_shapes(x, x_hat, "cycle_loss")
    return (x - x_hat).abs().mean()


def _as_prob(v, name):
    p = v if torch.is_tensor(v) else torch.as_tensor(float(v), dtype=torch.float64)
    if ((p <= 0.0) | (p >= 1.0)).any():
        raise ValueError(f"{name} saturated (a score hit 0 or 1 exactly)")
    return p


def adversarial_loss_d(d_real, d_fake):
    """Discriminator loss -[log d_real + log(1 - d_fake)] from probabilities.

    Scores of exactly 0 or 1 signal upstream saturation and are rejected;
    training uses the logit forms below instead.
    """
    real = _as_prob(d_real, "d_real")
    fake = _as_prob(d_fake, "d_fake")
    return -(torch.log(real).mean() + torch.log1p(-fake).mean())


def adversarial_loss_g(d_fake):
    """Non-saturating generator loss -log d_fake from probabilities."""
    return -torch.log(_as_prob(d_fake, "d_fake")).mean()


def adversarial_loss_d_logits(logit_real, logit_fake):
    """Numerically stable discriminator loss from raw logits."""
    return F.softplus(-logit_real).mean() + F.softplus(logit_fake).mean()


def adversarial_loss_g_logits(logit_fake):
    """Numerically stable non-saturating generator loss from raw logits."""
    return F.softplus(-logit_fake).mean()


def decomposer_objective(de, rec, adv, weights: LossWeights = LossWeights()):
    """Weighted total lambda1*de + lambda2*rec + lambda3*adv for the paired
    stage. Rejects non-finite parts."""
    for name, part in (("de", de), ("rec", rec), ("adv", adv)):
        value = float(part)
        if not math.isfinite(value):
            raise ValueError(f"non-finite loss component {name!r}: {value}")
    return weights.lambda1 * de + weights.lambda2 * rec + weights.lambda3 * adv
