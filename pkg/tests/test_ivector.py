"""Tests for the i-vector posterior, expected log-likelihoods and the VB bound."""

from __future__ import annotations

import itertools

import numpy as np
import pytest
from scipy.integrate import trapezoid
from scipy.special import entr, logsumexp
from scipy.stats import multivariate_normal

from vbivec.errors import NotPositiveDefiniteError, StaleStatisticsError
from vbivec.model.core import random_model, sample_segment
from vbivec.model.gmm import align, lb0, log_gauss_frames
from vbivec.model.ivector import (
    IVectorPosterior,
    elbo,
    expected_likelihoods,
    expected_log_gauss,
    extract,
    extract_full_vb,
    optimal_responsibilities,
    posterior,
    prior_term,
    project,
)
from vbivec.model.suffstats import accumulate
from vbivec.state import ModelDims, ModelParams, Responsibilities, SegmentFeatures

from tests.conftest import random_responsibilities


def scalar_model(loading=1.0, var=1.0) -> ModelParams:
    return ModelParams(np.ones(1), np.zeros((1, 1)), np.full((1, 1), var), np.full((1, 1, 1), loading))


def log_marginal_given_path(params: ModelParams, seg: SegmentFeatures, path) -> float:
    """log P(Φ, path) with x integrated out: a single stacked Gaussian."""
    mean = np.concatenate([params.means[i] for i in path])
    load = np.concatenate([params.loadings[i] for i in path])
    cov = load @ load.T + np.diag(np.concatenate([params.covariances[i] for i in path]))
    log_w = float(np.sum(np.log(params.weights[list(path)])))
    return log_w + multivariate_normal(mean, cov).logpdf(seg.frames.reshape(-1))


class TestPosterior:
    def test_zero_loadings_give_prior(self, small_model, small_data):
        params = small_model.ubm()
        seg = small_data[0]
        post = extract(seg, align(params, seg), params)
        assert np.array_equal(post.mean, np.zeros(2))
        assert np.allclose(post.covariance, np.eye(2), atol=1e-15)

    def test_scalar_example(self):
        seg = SegmentFeatures(np.array([[2.0]]), "s")
        post = extract(seg, Responsibilities(np.ones((1, 1)), "s"), scalar_model())
        assert post.precision[0, 0] == pytest.approx(2.0, abs=1e-12)
        assert post.natural_mean[0] == pytest.approx(2.0, abs=1e-12)
        assert post.mean[0] == pytest.approx(1.0, abs=1e-12)
        assert post.covariance[0, 0] == pytest.approx(0.5, abs=1e-12)

    def test_log_det_matches_numpy(self, small_model, small_data):
        seg = small_data[0]
        post = extract(seg, align(small_model, seg), small_model)
        assert post.log_det_covariance == pytest.approx(np.linalg.slogdet(post.covariance)[1], abs=1e-10)

    def test_covariance_inverts_precision(self, full_model):
        seg, _ = sample_segment(full_model, 30, seed=4)
        post = extract(seg, align(full_model, seg), full_model)
        assert np.allclose(post.covariance @ post.precision, np.eye(2), atol=1e-10)

    def test_more_frames_shrink_covariance(self, small_model):
        short, _ = sample_segment(small_model, 10, seed=1)
        long, _ = sample_segment(small_model, 400, seed=1)
        a = extract(short, align(small_model, short), small_model)
        b = extract(long, align(small_model, long), small_model)
        assert np.trace(b.covariance) < np.trace(a.covariance)

    def test_indefinite_precision_rejected(self):
        with pytest.raises(NotPositiveDefiniteError):
            IVectorPosterior.from_natural(np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]))

    def test_stale_statistics_rejected(self, small_model, small_data):
        seg = small_data[0]
        stats = accumulate(seg, align(small_model, seg), small_model.means + 0.5)
        with pytest.raises(StaleStatisticsError):
            posterior(stats, project(small_model))

    def test_stale_projection_rejected(self, small_model, small_data):
        seg = small_data[0]
        proj = project(small_model.ubm())
        with pytest.raises(StaleStatisticsError):
            extract(seg, align(small_model, seg), small_model, proj)

    @pytest.mark.parametrize("instance", range(20))
    def test_posterior_is_exact_for_one_hot_paths(self, instance):
        # with Q(Γ) fixed to a path, the Gaussian posterior of x is exact
        rng = np.random.Generator(np.random.PCG64(300 + instance))
        n, frames = int(rng.integers(1, 4)), int(rng.integers(1, 6))
        model = random_model(ModelDims(n, 1, 1), seed=400 + instance)
        seg, truth = sample_segment(model, frames, seed=500 + instance)
        post = extract(seg, Responsibilities(truth.one_hot(n), seg.segment_id), model)
        grid = np.linspace(-8.0, 8.0, 4001)
        log_joint = -0.5 * grid**2
        for t, i in enumerate(truth.path):
            var = model.covariances[i, 0]
            resid = seg.frames[t, 0] - model.means[i, 0] - model.loadings[i, 0, 0] * grid
            log_joint = log_joint - 0.5 * resid**2 / var
        density = np.exp(log_joint - log_joint.max())
        density /= trapezoid(density, grid)
        mean = trapezoid(grid * density, grid)
        assert post.mean[0] == pytest.approx(mean, abs=1e-6)
        assert post.covariance[0, 0] == pytest.approx(trapezoid((grid - mean) ** 2 * density, grid), abs=1e-6)


class TestExpectedLogGauss:
    def test_scalar_example(self):
        value = expected_log_gauss(np.zeros(1), 0, IVectorPosterior.prior(1), scalar_model())
        assert value == pytest.approx(-1.4189385332046727, abs=1e-12)

    def test_point_posterior_reduces_to_log_gauss(self, small_model):
        post = IVectorPosterior.from_natural(np.array([1e12, -2e12]), np.eye(2) * 1e12)
        phi = np.arange(4.0)
        expected = log_gauss_frames(phi[None, :], small_model.means[1] + small_model.loadings[1] @ post.mean, small_model.covariances[1])[0]
        assert expected_log_gauss(phi, 1, post, small_model) == pytest.approx(expected, abs=1e-9)

    @pytest.mark.parametrize("instance", range(10))
    def test_monte_carlo(self, full_model, instance):
        rng = np.random.Generator(np.random.PCG64(2024 + instance))
        factor = rng.normal(size=(2, 2))
        post = IVectorPosterior.from_natural(rng.normal(size=2), factor @ factor.T + np.eye(2))
        phi = rng.normal(0.0, 2.0, size=3)
        i = int(rng.integers(0, full_model.dims.N))
        xs = rng.multivariate_normal(post.mean, post.covariance, size=1_000_000)
        centers = full_model.means[i] + xs @ full_model.loadings[i].T
        draws = multivariate_normal(np.zeros(3), full_model.covariances[i]).logpdf(phi - centers)
        std_err = draws.std(ddof=1) / np.sqrt(draws.size)
        assert abs(expected_log_gauss(phi, i, post, full_model) - draws.mean()) < 4 * std_err

    @pytest.mark.parametrize("model_name", ["small_model", "full_model"])
    @pytest.mark.parametrize("instance", range(4))
    def test_mean_gradient_matches_finite_differences(self, request, model_name, instance):
        model = request.getfixturevalue(model_name)
        rng = np.random.Generator(np.random.PCG64(900 + instance))
        factor = rng.normal(size=(2, 2))
        precision = factor @ factor.T + np.eye(2)
        mean = rng.normal(size=2)
        phi = rng.normal(0.0, 2.0, size=model.dims.D)
        i = int(rng.integers(0, model.dims.N))

        def at(m):
            return expected_log_gauss(phi, i, IVectorPosterior.from_natural(precision @ m, precision), model)

        cov = model.covariances[i] if model.covariances.ndim == 3 else np.diag(model.covariances[i])
        resid = phi - model.means[i] - model.loadings[i] @ mean
        analytic = model.loadings[i].T @ np.linalg.solve(cov, resid)
        h = 1e-5
        for k in range(2):
            step = np.zeros(2)
            step[k] = h
            fd = (at(mean + step) - at(mean - step)) / (2 * h)
            assert fd == pytest.approx(analytic[k], abs=1e-6)

    def test_expected_likelihoods_match_pointwise(self, small_model, small_data):
        seg = small_data[0]
        post = extract(seg, align(small_model, seg), small_model)
        table = expected_likelihoods(seg, post, small_model)
        for t in (0, 7):
            for i in range(3):
                expected = np.log(small_model.weights[i]) + expected_log_gauss(seg.frames[t], i, post, small_model)
                assert table[t, i] == pytest.approx(expected, abs=1e-10)


class TestOptimalResponsibilities:
    def test_two_component_example(self):
        resp = optimal_responsibilities(np.log(np.array([[3.0, 1.0]])))
        assert np.allclose(resp.probs, [[0.75, 0.25]], atol=1e-12)

    def test_shift_invariant(self):
        log_ell = np.array([[-1000.0, -1001.0, -1003.0]])
        a = optimal_responsibilities(log_ell)
        b = optimal_responsibilities(log_ell + 1000.0)
        assert np.allclose(a.probs, b.probs, atol=1e-15)


class TestElbo:
    def test_zero_loadings_equal_lb0(self, small_model, small_data):
        params = small_model.ubm()
        for seg in small_data[:4]:
            resp = align(params, seg)
            post = extract(seg, resp, params)
            assert elbo(seg, resp, post, params) == pytest.approx(lb0(params, seg, resp), abs=1e-9)

    def test_scalar_against_quadrature(self):
        rng = np.random.Generator(np.random.PCG64(77))
        grid = np.linspace(-8.0, 8.0, 8001)
        for _ in range(20):
            loading = rng.uniform(0.2, 1.5)
            var = rng.uniform(0.5, 2.0)
            params = scalar_model(loading, var)
            frames = rng.normal(size=(3, 1))
            seg = SegmentFeatures(frames, "q")
            resp = Responsibilities(np.ones((3, 1)), "q")
            post = extract(seg, resp, params)
            log_int = np.array([
                -0.5 * (np.log(2 * np.pi) + x * x)
                + float(np.sum(-0.5 * (np.log(2 * np.pi * var) + (frames[:, 0] - loading * x) ** 2 / var)))
                for x in grid
            ])
            peak = log_int.max()
            exact = peak + np.log(trapezoid(np.exp(log_int - peak), grid))
            assert elbo(seg, resp, post, params) == pytest.approx(exact, abs=1e-6)

    @pytest.mark.parametrize("instance", range(20))
    def test_bound_below_enumerated_likelihood(self, instance):
        rng = np.random.Generator(np.random.PCG64(600 + instance))
        n, frames, dim = int(rng.integers(2, 4)), int(rng.integers(1, 5)), int(rng.integers(1, 3))
        model = random_model(ModelDims(n, dim, 1), seed=700 + instance)
        seg, _ = sample_segment(model, frames, seed=800 + instance)
        exact = logsumexp([log_marginal_given_path(model, seg, path) for path in itertools.product(range(n), repeat=frames)])
        for _ in range(5):
            resp = random_responsibilities(rng, frames, n, seg.segment_id)
            post = extract(seg, resp, model)
            assert elbo(seg, resp, post, model) <= exact + 1e-9
        _, _, trace = extract_full_vb(seg, model, align(model, seg), iterations=50, tol=0.0)
        assert trace[-1] <= exact + 1e-9

    def test_one_hot_bound_is_path_joint(self):
        model = random_model(ModelDims(2, 2, 1), seed=43)
        seg, truth = sample_segment(model, 3, seed=44)
        resp = Responsibilities(truth.one_hot(2), seg.segment_id)
        post = extract(seg, resp, model)
        assert elbo(seg, resp, post, model) == pytest.approx(log_marginal_given_path(model, seg, truth.path), abs=1e-9)

    def test_statistics_and_frames_agree(self, full_model):
        seg, _ = sample_segment(full_model, 25, seed=5)
        resp = align(full_model, seg)
        post = extract(seg, resp, full_model)
        proj = project(full_model)
        stats = accumulate(seg, resp, full_model.means, full_model.mode)
        direct = float(np.sum(resp.probs * expected_likelihoods(seg, post, full_model, proj)))
        entropy = float(np.sum(entr(resp.probs)))
        expected = prior_term(post) + direct + entropy
        assert elbo(seg, resp, post, full_model, stats, proj) == pytest.approx(expected, abs=1e-8)

    def test_posterior_maximizes_bound(self, small_model, small_data):
        seg = small_data[0]
        resp = align(small_model, seg)
        best = extract(seg, resp, small_model)
        top = elbo(seg, resp, best, small_model)
        nudged = IVectorPosterior.from_natural(best.natural_mean + 0.05, best.precision)
        assert elbo(seg, resp, nudged, small_model) < top

    def test_prior_term_zero_at_prior(self):
        assert prior_term(IVectorPosterior.prior(3)) == pytest.approx(0.0, abs=1e-15)


class TestFullVb:
    def test_trace_non_decreasing(self, small_model, small_data):
        for seg in small_data[:3]:
            _, _, trace = extract_full_vb(seg, small_model, align(small_model, seg), iterations=20, tol=0.0)
            for prev, cur in zip(trace, trace[1:]):
                assert cur >= prev - 1e-9 * abs(prev)

    def test_zero_loadings_are_fixed_point(self, small_model, small_data):
        params = small_model.ubm()
        seg = small_data[0]
        resp, post, trace = extract_full_vb(seg, params, align(params, seg))
        assert np.allclose(resp.probs, align(params, seg).probs, atol=1e-12)
        assert len(trace) == 2

    def test_recovers_ivector_direction(self):
        model = random_model(ModelDims(3, 4, 1), seed=50)
        seg, truth = sample_segment(model, 2000, seed=51)
        _, post, _ = extract_full_vb(seg, model, align(model.ubm(), seg), iterations=30)
        assert post.mean[0] == pytest.approx(truth.ivector[0], abs=0.2)
