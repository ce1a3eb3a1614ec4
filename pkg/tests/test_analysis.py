"""
Test suite for reconstruction metrics and the empirical theory checks.
"""

import math

import numpy as np
import pytest

from src.analysis import (
    TheoremReport,
    check_monotonicity,
    convergence_rate_report,
    gaussian_posterior,
    gram_spectrum,
    jacobian_spectrum,
    jensen_gap_bound,
    jensen_gap_estimate,
    jensen_gap_hse_closed_form,
    jensen_gap_with_error,
    laurent_massart_check,
    matched_noise_report,
    mse,
    noise_trend_report,
    power_iteration_extremes,
    psnr,
    psnr_from_mse,
    rv_psnr_report,
    spearman_rank,
)
from src.autodiff import Tensor
from src.diffusion import GaussianMixture, make_schedule
from src.errors import ShapeError, ValidationError
from src.models import ArchitectureSpec, build_model, client_gradient, from_params, gradient_jacobian
from src.rng import SeededRNG


class TestMetrics:
    def test_mse_and_psnr(self):
        """
        Test MSE and PSNR on a known pair.
        """
        a, b = Tensor([0.0, 0.0, 0.0, 0.0]), Tensor([0.1, 0.1, 0.1, 0.1])
        assert mse(a, b) == pytest.approx(0.01), "MSE of a 0.1 offset is 0.01"
        assert psnr(a, b) == pytest.approx(20.0), "PSNR at MSE 0.01 is 20 dB"
        assert psnr_from_mse(0.0) == math.inf, "Identical images have infinite PSNR"

    def test_shape_and_range_checks(self):
        """
        Test that mismatched shapes and bad peak values are rejected.
        """
        with pytest.raises(ShapeError):
            mse([1.0, 2.0], [1.0])
        with pytest.raises(ValidationError):
            psnr_from_mse(0.1, max_value=0.0)

    def test_report_text(self):
        """
        Test the flat key=value rendering of a report.
        """
        report = TheoremReport("demo", True, {"b": 2.0, "a": 0.5}, 0.1, 10, (1, 2), "note")
        lines = report.to_text().splitlines()
        assert lines[:5] == ["theorem=demo", "passed=true", "tolerance=0.10000000000000001",
                             "samples=10", "seeds=1,2"], "Header lines should be fixed"
        assert lines[5:7] == ["stat.a=0.5", "stat.b=2"], "Statistics should be sorted"
        assert lines[-1] == "notes=note", "Notes come last"


class TestConcentration:
    @pytest.mark.parametrize("n, eps", [(1000, 0.005), (1000, 0.01), (4096, 0.005)])
    def test_upper_tail_within_bound(self, n, eps):
        """
        Test the squared-norm upper tail against exp(-n eps).
        """
        report = laurent_massart_check(n, 1.0, eps, 10_000, SeededRNG(0))
        assert report.passed, f"upper frequency {report.statistics['upper_frequency']} above bound"
        assert report.statistics["concentration_fraction"] > 0.95, "Norms should concentrate near n"

    def test_lower_tail_is_recorded(self):
        """
        Test that both lower-tail frequencies are reported.
        """
        report = laurent_massart_check(1000, 1.0, 0.01, 10_000, SeededRNG(1))
        assert report.statistics["printed_lower_frequency"] > 0.5, "Printed lower event is likely"
        assert report.statistics["standard_lower_frequency"] < 0.01, "Standard lower tail is rare"

    def test_sample_floor(self):
        """
        Test that too few samples are refused.
        """
        with pytest.raises(ValidationError):
            laurent_massart_check(100, 1.0, 0.01, 500, SeededRNG(0))


class TestJensenGap:
    @pytest.fixture
    def prior(self):
        """
        Fixture with a single Gaussian prior in 3 dimensions.
        """
        return GaussianMixture([1.0], [[0.5, 0.2, 0.8]], [0.1])

    def test_gaussian_posterior(self, prior):
        """
        Test the analytic posterior at alpha = 1 and alpha -> 0.
        """
        mean, var = gaussian_posterior(prior, 1.0, [0.1, 0.1, 0.1])
        assert np.allclose(mean, [0.1, 0.1, 0.1]) and var == 0.0, "alpha = 1 leaves x0 = x_t"
        mean, var = gaussian_posterior(prior, 1e-12, [5.0, 5.0, 5.0])
        assert np.allclose(mean, prior.means[0], atol=1e-5), "alpha -> 0 returns the prior mean"
        assert var == pytest.approx(0.1, rel=1e-6), "alpha -> 0 returns the prior variance"

    def test_affine_gradient_has_no_gap(self, prior):
        """
        Test that an affine gradient map has a gap within Monte Carlo error.
        """
        sched = make_schedule(100, 0.5)
        model = build_model("linear-1", seed=0, input_dim=3, num_classes=2, loss="linear-score")
        gap, stderr = jensen_gap_with_error(model, prior, sched, 50, [0.3, 0.1, 0.4], 5000, SeededRNG(2))
        assert gap <= 4 * stderr, f"affine gap {gap:.3g} exceeds 4 standard errors {stderr:.3g}"

    def test_squared_error_closed_form(self, prior):
        """
        Test the Monte Carlo gap against posterior_variance * ||W||_F.
        """
        sched = make_schedule(100, 0.5)
        spec = ArchitectureSpec("linear-1", input_dim=3, num_classes=2, loss="half-squared-error")
        rng = np.random.default_rng(3)
        model = from_params(spec, [rng.normal(size=(2, 3)), rng.normal(size=2)])
        x_t = [0.3, 0.1, 0.4]
        _, post_var = gaussian_posterior(prior, float(sched.alpha[30]), x_t)
        gap, stderr = jensen_gap_with_error(model, prior, sched, 30, x_t, 10_000, SeededRNG(4))
        expected = jensen_gap_hse_closed_form(model, post_var)
        assert abs(gap - expected) <= 5 * stderr, f"gap {gap:.4g} vs closed form {expected:.4g}"

    def test_gap_grows_with_posterior_variance(self):
        """
        Test that a nonlinear model shows a larger gap under a wider prior.
        """
        sched = make_schedule(100, 0.5)
        model = build_model("cnn-tiny", seed=1, input_dim=9, num_classes=2)
        gaps = []
        for variance in (0.05, 0.8):
            prior = GaussianMixture([1.0], [np.full(9, 0.5)], [variance])
            point = math.sqrt(sched.alpha[50]) * prior.means[0]
            gaps.append(jensen_gap_estimate(model, prior, sched, 50, point, 4000, SeededRNG(5)))
        assert gaps[1] > gaps[0], f"gap should grow with variance, got {gaps}"

    def test_bound_dominates_gap(self):
        """
        Test that the Lipschitz bound is at least the estimated gap of a smooth model.
        """
        sched = make_schedule(100, 0.5)
        model = build_model("cnn-tiny", seed=2, input_dim=9, num_classes=2)
        wide = GaussianMixture([1.0], [np.full(9, 0.4)], [0.1])
        gap = jensen_gap_estimate(model, wide, sched, 60, np.full(9, 0.3), 2000, SeededRNG(6))
        bound = jensen_gap_bound(model, wide, sched, 60, np.full(9, 0.3), 2000, SeededRNG(6))
        assert bound >= gap, f"bound {bound:.3g} below gap {gap:.3g}"

    def test_mixture_prior_refused(self):
        """
        Test that the analytic posterior needs one component.
        """
        mixture = GaussianMixture([0.5, 0.5], [[0.0], [1.0]], [0.1, 0.1])
        model = build_model("linear-1", seed=0, input_dim=1, num_classes=2)
        with pytest.raises(ValidationError):
            jensen_gap_estimate(model, mixture, make_schedule(10, 0.5), 5, [0.0], 1000, SeededRNG(0))


class TestTrendReports:
    def test_monotonicity(self):
        """
        Test the non-increasing step fraction.
        """
        assert check_monotonicity([5.0, 4.0, 4.0, 3.0]).passed, "Non-increasing trace should pass"
        report = check_monotonicity([5.0, 6.0, 4.0, 5.0, 3.0])
        assert not report.passed, "Half-increasing trace should fail"
        assert report.statistics["fraction"] == pytest.approx(0.5), "Two of four steps decrease"
        with pytest.raises(ValidationError):
            check_monotonicity([])

    def test_convergence_rate(self):
        """
        Test that the per-step decrease must not grow with the noise.
        """
        traces = {
            1e-4: [[10.0, 6.0, 2.0]] * 3,
            1e-2: [[10.0, 8.0, 6.0]] * 3,
        }
        report = convergence_rate_report(traces)
        assert report.passed, "Slower decrease at higher noise should pass"
        assert report.statistics["decrease@0.0001"] == pytest.approx(4.0), "Mean decrease per step"
        with pytest.raises(ValidationError):
            convergence_rate_report({1e-4: [[1.0, 0.5]] * 2, 1e-2: [[1.0, 0.9]] * 2})

    def test_noise_trend_and_matching(self):
        """
        Test the PSNR ordering and Gaussian/Laplacian agreement reports.
        """
        gaussian = {1e-4: [30.0, 32.0], 1e-2: [20.0, 21.0]}
        laplacian = {1e-4: [30.5, 31.0], 1e-2: [20.5, 21.5]}
        assert noise_trend_report(gaussian).passed, "PSNR falls with noise"
        assert not noise_trend_report({1e-4: [10.0], 1e-2: [12.0]}).passed, "Rising PSNR should fail"
        assert matched_noise_report(gaussian, laplacian).passed, "Equal-variance results should agree"
        with pytest.raises(ValidationError):
            matched_noise_report(gaussian, {1e-4: [30.0]})


class TestSpectrum:
    def test_gram_spectrum_known_matrix(self):
        """
        Test eigenvalues of J^T J for a diagonal Jacobian.
        """
        low, high = gram_spectrum(np.diag([1.0, 2.0, 3.0]))
        assert low == pytest.approx(1.0) and high == pytest.approx(9.0), "Squares of singular values"

    def test_power_iteration_agrees(self):
        """
        Test the power-iteration extremes against the dense eigensolver.
        """
        jac = np.random.default_rng(0).normal(size=(12, 4))
        dense = gram_spectrum(jac)
        iterated = power_iteration_extremes(jac, SeededRNG(1))
        assert iterated[1] == pytest.approx(dense[1], rel=1e-6), "Largest eigenvalue should agree"
        assert iterated[0] == pytest.approx(dense[0], rel=1e-4, abs=1e-8), "Smallest eigenvalue should agree"

    def test_affine_model_spectrum(self):
        """
        Test that linear-score on linear-1 gives J^T J = ||y||^2 I.
        """
        model = build_model("linear-1", seed=0, input_dim=3, num_classes=4, loss="linear-score")
        low, high = jacobian_spectrum(model, Tensor([0.1, 0.5, 0.9]))
        assert low == pytest.approx(4.0) and high == pytest.approx(4.0), "Ones label gives eigenvalue 4"

    def test_dense_jacobian_guard(self):
        """
        Test that oversized dense Jacobians are refused.
        """
        model = build_model("mlp-2", seed=0, input_dim=400, num_classes=10)
        with pytest.raises(ValidationError):
            jacobian_spectrum(model, Tensor(np.zeros(400)))

    def test_jacobian_columns(self):
        """
        Test one Jacobian column against finite differences of the gradient.
        """
        model = build_model("mlp-2", seed=1, input_dim=3, num_classes=2)
        x = np.array([0.2, 0.4, 0.6])
        jac = gradient_jacobian(model, Tensor(x))
        step = np.array([1e-6, 0.0, 0.0])
        column = (client_gradient(model, Tensor(x + step)).values.data
                  - client_gradient(model, Tensor(x - step)).values.data) / 2e-6
        assert np.allclose(jac[:, 0], column, atol=1e-7), "First column should match finite differences"


class TestRankCorrelation:
    def test_spearman(self):
        """
        Test perfect and reversed rankings.
        """
        assert spearman_rank([1, 2, 3, 4], [10, 20, 35, 40]) == pytest.approx(1.0), "Same order"
        assert spearman_rank([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1.0), "Reversed order"
        with pytest.raises(ValidationError):
            spearman_rank([1.0], [2.0])

    def test_rv_psnr_report(self):
        """
        Test that RV and PSNR rankings are compared per model.
        """
        rv = {"linear-1": 0.3, "mlp-2": 0.1, "cnn-tiny": 0.05}
        agreeing = {"linear-1": [21.0, 20.0], "mlp-2": [19.0, 18.5], "cnn-tiny": [17.0, 17.5]}
        report = rv_psnr_report(rv, agreeing)
        assert report.passed, "Same ranking should pass"
        assert report.statistics["spearman"] == pytest.approx(1.0), "Rankings agree exactly"
        assert report.statistics["peak_psnr@mlp-2"] == pytest.approx(18.75), "Seed-averaged PSNR"
        reversed_ = {"linear-1": [15.0], "mlp-2": [18.0], "cnn-tiny": [19.0]}
        assert not rv_psnr_report(rv, reversed_).passed, "Reversed ranking should fail"
        flat = rv_psnr_report(rv, {"linear-1": [18.0], "mlp-2": [18.0], "cnn-tiny": [18.0]})
        assert not flat.passed and flat.notes, "Undefined correlation should fail with a note"
        with pytest.raises(ValidationError):
            rv_psnr_report(rv, {"linear-1": [20.0]})
