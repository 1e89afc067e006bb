"""Tests for densities, UBM alignment, LB⁰ and UBM EM."""

from __future__ import annotations

import warnings

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from vbivec.errors import ConfigError, DataError, DegenerateComponentError, NotPositiveDefiniteError
from vbivec.model.core import random_model, sample_dataset
from vbivec.model.gmm import (
    LOG_2PI,
    VarianceFloor,
    align,
    global_covariance,
    global_mean,
    lb0,
    log_gauss,
    log_likelihood,
    train_ubm,
    ubm_mstep,
)
from vbivec.state import CovarianceMode, EmptyComponentPolicy, ModelDims, ModelParams, Responsibilities, SegmentFeatures

from tests.conftest import aligned, random_responsibilities


def total_lb0(params, segs, resps):
    return sum(lb0(params, seg, resp) for seg, resp in zip(segs, resps))


class TestLogGauss:
    def test_standard_scalar(self):
        assert log_gauss(np.zeros(1), np.zeros(1), np.ones(1)) == pytest.approx(-0.9189385332046727, abs=1e-12)

    def test_zero_quadratic_in_2d(self):
        assert log_gauss(np.ones(2), np.ones(2), np.eye(2)) == pytest.approx(-LOG_2PI, abs=1e-12)

    def test_full_and_diagonal_agree(self):
        rng = np.random.Generator(np.random.PCG64(0))
        var = rng.uniform(0.5, 2.0, size=4)
        phi, mean = rng.normal(size=4), rng.normal(size=4)
        assert log_gauss(phi, mean, var) == pytest.approx(log_gauss(phi, mean, np.diag(var)), abs=1e-12)

    def test_matches_scipy(self):
        rng = np.random.Generator(np.random.PCG64(1))
        a = rng.normal(size=(3, 3))
        cov = a @ a.T + np.eye(3)
        phi, mean = rng.normal(size=3), rng.normal(size=3)
        assert log_gauss(phi, mean, cov) == pytest.approx(multivariate_normal(mean, cov).logpdf(phi), abs=1e-10)

    def test_indefinite_covariance_rejected(self):
        with pytest.raises(NotPositiveDefiniteError):
            log_gauss(np.zeros(2), np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]))


class TestAlign:
    def test_single_component_is_certain(self):
        params = ModelParams(np.ones(1), np.zeros((1, 2)), np.ones((1, 2)), np.zeros((1, 2, 1)))
        seg = SegmentFeatures(np.random.Generator(np.random.PCG64(0)).normal(size=(7, 2)), "s")
        assert np.array_equal(align(params, seg).probs, np.ones((7, 1)))

    def test_frame_at_separated_mean(self):
        params = ModelParams(np.array([0.5, 0.5]), np.array([[-5.0], [5.0]]), np.ones((2, 1)), np.zeros((2, 1, 1)))
        resp = align(params, SegmentFeatures(np.array([[5.0]]), "s"))
        assert resp.probs[0, 1] > 0.99

    def test_rows_sum_to_one(self, small_model, small_data):
        for seg in small_data:
            assert np.allclose(align(small_model, seg).probs.sum(axis=1), 1.0, atol=1e-12)

    def test_aligned_lb0_is_exact_likelihood(self, small_model, small_data):
        for seg in small_data:
            assert lb0(small_model, seg, align(small_model, seg)) == pytest.approx(log_likelihood(small_model, seg), abs=1e-9)

    def test_align_maximizes_lb0(self, small_model, small_data):
        rng = np.random.Generator(np.random.PCG64(3))
        seg = small_data[0]
        best = align(small_model, seg)
        top = lb0(small_model, seg, best)
        for _ in range(10):
            noisy = best.probs * np.exp(0.1 * rng.normal(size=best.probs.shape))
            noisy /= noisy.sum(axis=1, keepdims=True)
            assert lb0(small_model, seg, Responsibilities(noisy, seg.segment_id)) <= top + 1e-9

    def test_other_responsibilities_are_below_likelihood(self, small_model, small_data):
        rng = np.random.Generator(np.random.PCG64(4))
        seg = small_data[1]
        resp = random_responsibilities(rng, seg.num_frames, small_model.dims.N, seg.segment_id)
        assert lb0(small_model, seg, resp) < log_likelihood(small_model, seg)


class TestLb0:
    def test_single_component_single_frame(self):
        params = ModelParams(np.ones(1), np.array([[0.5, -1.0]]), np.array([[2.0, 0.5]]), np.zeros((1, 2, 1)))
        seg = SegmentFeatures(np.array([[1.0, 1.0]]), "s")
        expected = log_gauss(np.array([1.0, 1.0]), params.means[0], params.covariances[0])
        assert lb0(params, seg, Responsibilities(np.ones((1, 1)), "s")) == pytest.approx(expected, abs=1e-12)

    def test_zero_responsibility_contributes_nothing(self):
        params = ModelParams(np.array([0.5, 0.5]), np.array([[0.0], [100.0]]), np.ones((2, 1)), np.zeros((2, 1, 1)))
        seg = SegmentFeatures(np.array([[0.0]]), "s")
        value = lb0(params, seg, Responsibilities(np.array([[1.0, 0.0]]), "s"))
        assert value == pytest.approx(np.log(0.5) - 0.5 * LOG_2PI, abs=1e-12)


class TestUbmMstep:
    def test_single_component_gives_global_moments(self, small_data):
        resps = [Responsibilities(np.ones((seg.num_frames, 1)), seg.segment_id) for seg in small_data]
        params = ubm_mstep(small_data, resps, CovarianceMode.FULL, floor=np.zeros(4) + 1e-12)
        assert params.weights[0] == 1.0
        assert np.allclose(params.means[0], global_mean(small_data), atol=1e-10)
        assert np.allclose(params.covariances[0], global_covariance(small_data), atol=1e-10)
        assert not np.any(params.loadings)

    def test_one_hot_recovers_cluster_moments(self):
        model = random_model(ModelDims(2, 3, 1), seed=2)
        data = sample_dataset(model, 4, 200, seed=9)
        segs = [seg for seg, _ in data]
        resps = [Responsibilities(t.one_hot(2), seg.segment_id) for seg, t in data]
        params = ubm_mstep(segs, resps, floor=np.full(3, 1e-12))
        frames = np.concatenate([seg.frames for seg in segs])
        path = np.concatenate([t.path for _, t in data])
        for i in range(2):
            sel = frames[path == i]
            assert np.allclose(params.means[i], sel.mean(axis=0), atol=1e-10)
            assert np.allclose(params.covariances[i], sel.var(axis=0), atol=1e-10)
            assert params.weights[i] == pytest.approx(len(sel) / len(frames), abs=1e-12)

    def test_mstep_never_decreases_lb0(self, small_model, small_data):
        resps = aligned(small_model, small_data)
        before = total_lb0(small_model, small_data, resps)
        updated = ubm_mstep(small_data, resps, ivector_dim=2)
        assert total_lb0(updated, small_data, resps) >= before - 1e-9

    def test_mstep_is_a_maximum(self, small_model, small_data):
        resps = aligned(small_model, small_data)
        best = ubm_mstep(small_data, resps, floor=np.full(4, 1e-12), ivector_dim=2)
        top = total_lb0(best, small_data, resps)
        rng = np.random.Generator(np.random.PCG64(5))
        for _ in range(5):
            means = best.means + 1e-3 * rng.normal(size=best.means.shape)
            covs = best.covariances * np.exp(1e-3 * rng.normal(size=best.covariances.shape))
            w = best.weights * np.exp(1e-3 * rng.normal(size=best.weights.shape))
            perturbed = ModelParams(w / w.sum(), means, covs, best.loadings)
            assert total_lb0(perturbed, small_data, resps) <= top + 1e-9

    def test_empty_component_named(self, small_data):
        resps = [
            Responsibilities(np.column_stack([np.ones(seg.num_frames), np.zeros(seg.num_frames)]), seg.segment_id)
            for seg in small_data
        ]
        with pytest.raises(DegenerateComponentError) as info:
            ubm_mstep(small_data, resps)
        assert info.value.component == 1

    def test_floor_applied(self):
        seg = SegmentFeatures(np.array([[1.0, 2.0], [1.0, 3.0]]), "s")
        resp = Responsibilities(np.ones((2, 1)), "s")
        params = ubm_mstep([seg], [resp], floor=VarianceFloor(absolute=0.01, relative=0.0))
        assert params.covariances[0, 0] == 0.01

    def test_reproducible_reduction_matches_threads(self, small_model, small_data):
        resps = aligned(small_model, small_data)
        a = ubm_mstep(small_data, resps, threads=1, reproducible=True)
        b = ubm_mstep(small_data, resps, threads=4, reproducible=True)
        assert a.means.tobytes() == b.means.tobytes()
        assert a.covariances.tobytes() == b.covariances.tobytes()


class TestTrainUbm:
    def test_trace_non_decreasing(self, small_data):
        _, trace = train_ubm(small_data, 3, iterations=8, seed=1)
        assert len(trace) == 9
        for prev, cur in zip(trace, trace[1:]):
            assert cur >= prev - 1e-8 * abs(prev)

    def test_full_mode_trace_non_decreasing(self, full_model):
        segs = [seg for seg, _ in sample_dataset(full_model.ubm(), 6, 50, seed=3)]
        _, trace = train_ubm(segs, 3, CovarianceMode.FULL, iterations=6, seed=2)
        for prev, cur in zip(trace, trace[1:]):
            assert cur >= prev - 1e-8 * abs(prev)

    def test_single_gaussian_one_iteration(self):
        rng = np.random.Generator(np.random.PCG64(6))
        segs = [SegmentFeatures(rng.normal(1.0, 2.0, size=(300, 2)), "a")]
        params, _ = train_ubm(segs, 1, iterations=1, seed=0)
        assert np.allclose(params.means[0], segs[0].frames.mean(axis=0), atol=1e-10)
        assert np.allclose(params.covariances[0], segs[0].frames.var(axis=0), atol=1e-10)

    def test_separated_clusters(self):
        rng = np.random.Generator(np.random.PCG64(7))
        centers = np.array([[-10.0, 0.0], [10.0, 0.0]])
        frames = np.concatenate([rng.normal(c, 1.0, size=(400, 2)) for c in centers])
        params, _ = train_ubm([SegmentFeatures(frames, "s")], 2, iterations=40, seed=3)
        order = np.argsort(params.means[:, 0])
        for i, c in zip(order, centers):
            assert np.allclose(params.means[i], frames[np.sign(frames[:, 0]) == np.sign(c[0])].mean(axis=0), atol=0.1)

    def test_negative_seed_rejected(self, small_data):
        with pytest.raises(ConfigError):
            train_ubm(small_data, 3, iterations=1, seed=-1)

    def test_same_seed_bit_identical(self, small_data):
        a, _ = train_ubm(small_data, 3, iterations=3, seed=4, reproducible=True)
        b, _ = train_ubm(small_data, 3, iterations=3, seed=4, reproducible=True, threads=3)
        assert a.means.tobytes() == b.means.tobytes()
        assert a.covariances.tobytes() == b.covariances.tobytes()

    def test_too_many_components(self):
        seg = SegmentFeatures(np.zeros((3, 1)), "s")
        with pytest.raises(DataError):
            train_ubm([seg], 4)

    def test_empty_dataset(self):
        with pytest.raises(DataError):
            train_ubm([], 1)

    def test_reseed_policy_recovers(self):
        rng = np.random.Generator(np.random.PCG64(8))
        # two identical frames seeded as means collapse one component
        frames = np.concatenate([np.zeros((2, 1)), rng.normal(50.0, 1.0, size=(50, 1))])
        segs = [SegmentFeatures(frames, "s")]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            params, trace = train_ubm(segs, 3, iterations=5, seed=1, empty_policy=EmptyComponentPolicy.RESEED)
        assert params.dims.N == 3
        assert np.all(np.isfinite(trace))

    def test_progress_callback(self, small_data):
        seen = []
        train_ubm(small_data, 2, iterations=2, seed=0, progress=lambda k, phase, v: seen.append((k, phase)))
        assert seen == [(0, "ubm"), (1, "ubm"), (2, "ubm")]
