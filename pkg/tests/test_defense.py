"""
Test suite for the gradient perturbation defenses.
"""

import math

import numpy as np
import pytest

from src.autodiff import Tensor
from src.defense import apply_defense, laplace_scale, perturb_gaussian, perturb_laplacian
from src.errors import ValidationError
from src.models import LeakedGradient
from src.rng import SeededRNG

VARIANCE = 0.04
ENTRIES = 200_000


class TestDefenses:
    @pytest.fixture
    def gradient(self):
        """
        Fixture with a large constant gradient so sample moments are sharp.
        """
        return LeakedGradient(values=Tensor(np.full(ENTRIES, 0.5)), model_id="test")

    def test_gaussian_moments(self, gradient):
        """
        Test that Gaussian noise has zero mean and the requested variance.
        """
        noisy = perturb_gaussian(gradient, VARIANCE, SeededRNG(0))
        noise = noisy.values.data - gradient.values.data
        assert abs(noise.mean()) < 5 * math.sqrt(VARIANCE / ENTRIES), "Noise mean should be near zero"
        assert noise.var() == pytest.approx(VARIANCE, rel=0.02), "Noise variance should match"
        assert noisy.perturbation == "gaussian" and noisy.variance == VARIANCE, "Metadata should be recorded"

    def test_laplacian_matches_variance(self, gradient):
        """
        Test that the Laplace scale yields the requested variance and heavier tails.
        """
        assert laplace_scale(VARIANCE) == pytest.approx(math.sqrt(VARIANCE / 2)), "b = sqrt(v/2)"
        noisy = perturb_laplacian(gradient, VARIANCE, SeededRNG(1))
        noise = noisy.values.data - gradient.values.data
        assert noise.var() == pytest.approx(VARIANCE, rel=0.03), "Laplacian variance should match"
        kurtosis = np.mean(noise ** 4) / noise.var() ** 2
        assert kurtosis == pytest.approx(6.0, rel=0.1), "Laplace kurtosis should be 6"

    def test_inputs_are_not_modified(self, gradient):
        """
        Test that defenses return new gradients and leave the input untouched.
        """
        before = gradient.values.numpy()
        for kind in ("gaussian", "laplacian"):
            apply_defense(gradient, kind, VARIANCE, SeededRNG(2))
        assert np.array_equal(gradient.values.data, before), "Input gradient must not change"
        assert apply_defense(gradient, "none", 0.0, SeededRNG(2)) is gradient, "none returns the input"

    def test_zero_variance_keeps_values(self, gradient):
        """
        Test that zero-variance noise leaves the values unchanged.
        """
        noisy = apply_defense(gradient, "gaussian", 0.0, SeededRNG(3))
        assert np.array_equal(noisy.values.data, gradient.values.data), "Zero variance adds nothing"

    def test_same_seed_same_noise(self, gradient):
        """
        Test that the noise is a deterministic function of the seed.
        """
        first = apply_defense(gradient, "laplacian", VARIANCE, SeededRNG(4))
        second = apply_defense(gradient, "laplacian", VARIANCE, SeededRNG(4))
        assert np.array_equal(first.values.data, second.values.data), "Same seed should give same noise"

    def test_invalid_arguments(self, gradient):
        """
        Test that negative variances and unknown kinds are rejected.
        """
        with pytest.raises(ValidationError):
            apply_defense(gradient, "gaussian", -1.0, SeededRNG(0))
        with pytest.raises(ValidationError):
            apply_defense(gradient, "clipping", 0.1, SeededRNG(0))
