import math

import numpy as np
import pytest
import torch

from reflectdiff.diffusion import make_schedule, q_sample
from reflectdiff.losses import (
    LossWeights,
    adversarial_loss_d,
    adversarial_loss_d_logits,
    adversarial_loss_g,
    adversarial_loss_g_logits,
    cycle_loss,
    decomposer_objective,
    denoising_loss,
    reconstruction_loss,
)


def rand(shape, seed):
    return torch.randn(shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


class TestDenoisingLoss:
    def test_perfect_prediction(self):
        e = rand((2, 3, 4, 4), 0)
        assert float(denoising_loss(e, e)) == 0.0

    def test_scalar_oracle(self):
        # zero truth vs all-ones prediction: mean squared error is exactly 1
        n = (2, 3, 4, 4)
        got = float(denoising_loss(torch.zeros(n), torch.ones(n)))
        expected = sum(1.0 for _ in range(math.prod(n))) / math.prod(n)
        assert got == pytest.approx(expected, rel=1e-12)

    def test_symmetry(self):
        a, b = rand((3, 3), 1), rand((3, 3), 2)
        assert float(denoising_loss(a, b)) == pytest.approx(float(denoising_loss(b, a)), rel=0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            denoising_loss(torch.zeros(2, 2), torch.zeros(3, 2))

    def test_uniform_t_estimator_is_unbiased(self):
        # Monte-Carlo over t matches the exact average over all T timesteps
        # on a fixed tiny problem with a deterministic surrogate predictor
        T = 7
        sched = make_schedule(T, 0.05, 0.3)
        x0 = rand((1, 2, 2), 3)
        eps = rand((1, 2, 2), 4)
        predict = lambda z: 0.3 * z  # fixed fake denoiser

        def loss_at(t):
            z = q_sample(x0, t, eps, sched)
            return float(denoising_loss(eps, predict(z)))

        exact = sum(loss_at(t) for t in range(1, T + 1)) / T
        rng = np.random.default_rng(5)
        draws = np.array([loss_at(int(t)) for t in rng.integers(1, T + 1, size=10_000)])
        se = draws.std(ddof=1) / math.sqrt(len(draws))
        assert abs(draws.mean() - exact) < 3 * se


class TestReconstructionLoss:
    def test_perfect(self):
        s, r = rand((2, 2), 6), rand((2, 2), 7)
        assert float(reconstruction_loss(s, r, s, r)) == 0.0

    def test_constant_offset(self):
        s, r = rand((4, 4), 8), rand((4, 4), 9)
        got = float(reconstruction_loss(s, r, s + 0.5, r))
        assert got == pytest.approx(0.5, rel=1e-12)

    def test_loop_oracle(self):
        s, r, sh, rh = (rand((2, 2), k) for k in (10, 11, 12, 13))
        expected = 0.0
        for pair in ((s, sh), (r, rh)):
            expected += sum(
                abs(float(pair[0][i, j]) - float(pair[1][i, j])) for i in range(2) for j in range(2)
            ) / 4
        assert float(reconstruction_loss(s, r, sh, rh)) == pytest.approx(expected, rel=1e-7)


class TestCycleLoss:
    def test_identical(self):
        x = rand((3, 3), 14)
        assert float(cycle_loss(x, x)) == 0.0

    def test_constant_offset(self):
        x = rand((3, 3), 15)
        assert float(cycle_loss(x, x + 0.1)) == pytest.approx(0.1, rel=1e-9)

    def test_loop_oracle(self):
        x, xh = rand((2, 2), 16), rand((2, 2), 17)
        expected = sum(
            abs(float(x[i, j]) - float(xh[i, j])) for i in range(2) for j in range(2)
        ) / 4
        assert float(cycle_loss(x, xh)) == pytest.approx(expected, rel=1e-7)


class TestAdversarialLosses:
    def test_half_scores_closed_form(self):
        assert float(adversarial_loss_d(0.5, 0.5)) == pytest.approx(2 * math.log(2), abs=1e-9)
        assert float(adversarial_loss_g(0.5)) == pytest.approx(math.log(2), abs=1e-9)

    def test_perfect_discriminator_limit(self):
        assert float(adversarial_loss_d(1 - 1e-9, 1e-9)) < 1e-8

    def test_saturated_scores_rejected(self):
        for bad in (0.0, 1.0):
            with pytest.raises(ValueError, match="saturated"):
                adversarial_loss_d(bad, 0.5)
            with pytest.raises(ValueError, match="saturated"):
                adversarial_loss_d(0.5, bad)
            with pytest.raises(ValueError, match="saturated"):
                adversarial_loss_g(bad)

    def test_logit_forms_agree_with_probability_forms(self):
        g = torch.Generator().manual_seed(18)
        lr = torch.randn(5, generator=g, dtype=torch.float64)
        lf = torch.randn(5, generator=g, dtype=torch.float64)
        d1 = float(adversarial_loss_d_logits(lr, lf))
        d2 = float(adversarial_loss_d(torch.sigmoid(lr), torch.sigmoid(lf)))
        assert d1 == pytest.approx(d2, rel=1e-10)
        g1 = float(adversarial_loss_g_logits(lf))
        g2 = float(adversarial_loss_g(torch.sigmoid(lf)))
        assert g1 == pytest.approx(g2, rel=1e-10)


class TestObjective:
    def test_paper_default_weights(self):
        assert decomposer_objective(1.0, 1.0, 1.0) == 11.1

    def test_zero_parts(self):
        assert decomposer_objective(0.0, 0.0, 0.0) == 0.0

    def test_zero_weights(self):
        w = LossWeights(lambda1=0, lambda2=0, lambda3=0)
        assert decomposer_objective(3.0, 5.0, 7.0, w) == 0.0

    def test_nonfinite_part_rejected(self):
        with pytest.raises(ValueError, match="non-finite"):
            decomposer_objective(float("nan"), 0.0, 0.0)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(lambda1=-1.0)

    def test_losses_nonnegative(self):
        a, b = rand((3, 3), 19), rand((3, 3), 20)
        assert float(denoising_loss(a, b)) >= 0
        assert float(cycle_loss(a, b)) >= 0
        assert float(reconstruction_loss(a, a, b, b)) >= 0
        assert float(adversarial_loss_d(0.3, 0.7)) >= 0
        assert float(adversarial_loss_g(0.3)) >= 0
