import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import bevadapt.numerics as N
from bevadapt.geometry import DepthDistribution, ModelDims, encode_image, estimate_depth, init_model_params
from bevadapt.numerics import TensorRecord, UsageError
from bevadapt.numerics.graph import bind_params
from bevadapt.uncertainty import (
    FusionConfig,
    LidarDepthMap,
    UncertaintyMap,
    confidence_map,
    ensemble_mean,
    fuse_depth,
    fuse_depth_by_confidence,
    mc_depth_samples,
    resolve_theta,
    uncertainty_map,
)

from helpers import naive_uncertainty, rel_err
from test_geometry import small_dims, toy_cam


def dist(probs: np.ndarray) -> DepthDistribution:
    edges = np.linspace(0.0, 1.0, probs.shape[0] + 1)
    return DepthDistribution(TensorRecord(np.asarray(probs, dtype=float)), edges)


def random_dist(rng, c_d=4, h=3, w=3) -> DepthDistribution:
    logits = rng.standard_normal((c_d, h, w))
    e = np.exp(logits - logits.max(axis=0, keepdims=True))
    return dist(e / e.sum(axis=0, keepdims=True))


def lidar_all(bin_idx: int, c_d=4, h=3, w=3) -> LidarDepthMap:
    onehot = np.zeros((c_d, h, w))
    onehot[bin_idx] = 1.0
    return LidarDepthMap(TensorRecord(onehot), np.ones((h, w), dtype=bool))


class TestFusionConfig:
    def test_rejects_single_pass(self):
        with pytest.raises(UsageError):
            FusionConfig(m=1)

    def test_rejects_bad_rate(self):
        with pytest.raises(UsageError):
            FusionConfig(dropout_rate=0.0)


class TestMcSamples:
    def setup_method(self):
        self.dims = small_dims()
        self.params = init_model_params(self.dims, 31)
        self.leaves = bind_params(self.params, trainable=False)
        rng = np.random.default_rng(30)
        self.feat = encode_image(rng.random((3, 8, 8)), self.leaves, toy_cam())

    def test_vanishing_rate_matches_deterministic_pass(self):
        cfg = FusionConfig(m=3, dropout_rate=1e-12)
        samples = mc_depth_samples(self.feat, toy_cam(), self.leaves, cfg, 7, self.dims.bin_edges)
        det = estimate_depth(self.feat, toy_cam(), self.leaves, self.dims.bin_edges)
        for s in samples:
            assert np.abs(s.probabilities() - det.probabilities()).max() < 1e-9

    def test_same_seed_gives_identical_samples(self):
        cfg = FusionConfig(m=4, dropout_rate=0.4)
        a = mc_depth_samples(self.feat, toy_cam(), self.leaves, cfg, 11, self.dims.bin_edges)
        b = mc_depth_samples(self.feat, toy_cam(), self.leaves, cfg, 11, self.dims.bin_edges)
        for sa, sb in zip(a, b):
            assert sa.probabilities().tobytes() == sb.probabilities().tobytes()

    def test_default_five_passes_all_normalised(self):
        cfg = FusionConfig()
        assert cfg.m == 5
        samples = mc_depth_samples(self.feat, toy_cam(), self.leaves, cfg, 3, self.dims.bin_edges)
        assert len(samples) == 5
        for s in samples:
            assert np.abs(s.probabilities().sum(axis=0) - 1.0).max() < 1e-9


class TestUncertaintyMap:
    def test_identical_samples_give_zero(self):
        rng = np.random.default_rng(32)
        d = random_dist(rng)
        # Power-of-two ensemble: the mean is exact, so the map is exactly zero.
        u = uncertainty_map([d, d, d, d])
        assert np.all(u.tensor.array == 0)
        assert u.scalar_mean == 0.0
        # Odd ensemble sizes can round the mean by one ulp.
        u3 = uncertainty_map([d, d, d])
        assert u3.tensor.array.max() < 1e-15

    def test_two_sample_hand_value(self):
        a = np.full((1, 1, 1), 0.4)
        b = np.full((1, 1, 1), 0.6)
        u = uncertainty_map([dist(a), dist(b)])
        assert abs(u.tensor.array[0, 0, 0] - 0.1) < 1e-12

    def test_extreme_two_sample_hits_upper_bound(self):
        u = uncertainty_map([dist(np.zeros((1, 2, 2))), dist(np.ones((1, 2, 2)))])
        assert np.allclose(u.tensor.array, 0.5, atol=1e-15)

    def test_bounds_hold_for_random_ensembles(self):
        rng = np.random.default_rng(33)
        samples = [random_dist(rng) for _ in range(6)]
        u = uncertainty_map(samples)
        assert np.all(u.tensor.array >= 0)
        assert np.all(u.tensor.array <= 0.5)
        assert 0.0 <= u.scalar_mean <= 0.5

    def test_scalar_mean_is_mean_of_entries(self):
        rng = np.random.default_rng(34)
        samples = [random_dist(rng) for _ in range(4)]
        u = uncertainty_map(samples)
        assert abs(u.scalar_mean - u.tensor.array.mean()) < 1e-12

    def test_matches_naive_two_pass_loop(self):
        rng = np.random.default_rng(35)
        for _ in range(10):
            samples = [random_dist(rng, c_d=3, h=2, w=4) for _ in range(5)]
            got = uncertainty_map(samples).tensor.array
            want = naive_uncertainty([s.probabilities() for s in samples])
            assert rel_err(got, want) < 1e-12

    def test_rejects_single_sample_and_shape_mismatch(self):
        rng = np.random.default_rng(36)
        with pytest.raises(UsageError):
            uncertainty_map([random_dist(rng)])
        with pytest.raises(N.ShapeError):
            uncertainty_map([random_dist(rng, h=2), random_dist(rng, h=3)])

    def test_monotone_in_dropout_rate(self):
        # Corpus-mean uncertainty should not shrink when dropout doubles.
        dims = small_dims()
        params = init_model_params(dims, 40)
        leaves = bind_params(params, trainable=False)
        for seed in range(5):
            rng = np.random.default_rng(200 + seed)
            feat = encode_image(rng.random((3, 8, 8)), leaves, toy_cam())
            means = []
            for rate in (0.05, 0.5):
                cfg = FusionConfig(m=6, dropout_rate=rate)
                samples = mc_depth_samples(feat, toy_cam(), leaves, cfg, seed, dims.bin_edges)
                means.append(uncertainty_map(samples).scalar_mean)
            assert means[1] >= means[0]


class TestFusion:
    def test_reliable_pixel_keeps_prediction(self):
        pred = dist(np.array([0.1, 0.2, 0.6, 0.1]).reshape(4, 1, 1))
        lidar = lidar_all(3, c_d=4, h=1, w=1)
        u = UncertaintyMap(TensorRecord(np.full((4, 1, 1), 0.05)), 0.05)
        fused = fuse_depth(pred, lidar, u, theta=0.1)
        assert np.array_equal(fused.probabilities(), pred.probabilities())

    def test_unreliable_observed_pixel_takes_lidar(self):
        pred = dist(np.array([0.1, 0.2, 0.6, 0.1]).reshape(4, 1, 1))
        lidar = lidar_all(3, c_d=4, h=1, w=1)
        u = UncertaintyMap(TensorRecord(np.full((4, 1, 1), 0.2)), 0.2)
        fused = fuse_depth(pred, lidar, u, theta=0.1)
        assert np.array_equal(fused.probabilities().reshape(4), [0, 0, 0, 1])

    def test_unreliable_unobserved_pixel_keeps_prediction(self):
        pred = dist(np.full((2, 1, 1), 0.5))
        lidar = LidarDepthMap(TensorRecord(np.zeros((2, 1, 1))), np.zeros((1, 1), dtype=bool))
        u = UncertaintyMap(TensorRecord(np.full((2, 1, 1), 0.4)), 0.4)
        fused = fuse_depth(pred, lidar, u, theta=0.1)
        assert np.array_equal(fused.probabilities(), pred.probabilities())

    def test_theta_at_maximum_keeps_everything(self):
        rng = np.random.default_rng(37)
        pred = random_dist(rng)
        lidar = lidar_all(0)
        u = uncertainty_map([random_dist(rng) for _ in range(4)])
        fused = fuse_depth(pred, lidar, u, theta=0.5)
        assert np.array_equal(fused.probabilities(), pred.probabilities())

    def test_idempotent(self):
        rng = np.random.default_rng(38)
        pred = random_dist(rng)
        lidar = lidar_all(2)
        u = uncertainty_map([random_dist(rng) for _ in range(4)])
        theta = float(np.median(u.pixel_scores()))
        once = fuse_depth(pred, lidar, u, theta)
        twice = fuse_depth(once, lidar, u, theta)
        assert np.array_equal(once.probabilities(), twice.probabilities())

    def test_output_is_valid_distribution(self):
        rng = np.random.default_rng(39)
        for _ in range(5):
            pred = random_dist(rng)
            mask = rng.random((3, 3)) < 0.5
            onehot = np.zeros((4, 3, 3))
            bins = rng.integers(0, 4, size=(3, 3))
            for i in range(3):
                for j in range(3):
                    if mask[i, j]:
                        onehot[bins[i, j], i, j] = 1.0
            lidar = LidarDepthMap(TensorRecord(onehot), mask)
            u = uncertainty_map([random_dist(rng) for _ in range(3)])
            fused = fuse_depth(pred, lidar, u, theta=float(np.median(u.pixel_scores())))
            assert np.abs(fused.probabilities().sum(axis=0) - 1.0).max() < 1e-9

    def test_confidence_variant_replaces_low_confidence(self):
        pred = dist(np.array([0.55, 0.45]).reshape(2, 1, 1))
        lidar = lidar_all(1, c_d=2, h=1, w=1)
        conf = confidence_map(pred)
        fused = fuse_depth_by_confidence(pred, lidar, conf, threshold=0.9)
        assert np.array_equal(fused.probabilities().reshape(2), [0, 1])


class TestConfidence:
    def test_uniform_gives_inverse_bin_count(self):
        pred = dist(np.full((5, 2, 2), 0.2))
        assert np.allclose(confidence_map(pred).array, 0.2, atol=1e-15)

    def test_one_hot_gives_one(self):
        probs = np.zeros((4, 1, 1))
        probs[2] = 1.0
        assert confidence_map(dist(probs)).array[0, 0] == 1.0

    def test_two_bin_hand_value(self):
        pred = dist(np.array([1.0 / 3, 2.0 / 3]).reshape(2, 1, 1))
        assert abs(confidence_map(pred).array[0, 0] - 2.0 / 3) < 1e-12


class TestThreshold:
    def test_fixed_theta_passthrough(self):
        cfg = FusionConfig(theta=0.12)
        assert resolve_theta(cfg, np.array([0.0, 1.0])) == 0.12

    def test_quantile_default(self):
        cfg = FusionConfig()
        scores = np.linspace(0.0, 0.5, 101)
        assert abs(resolve_theta(cfg, scores) - 0.35) < 1e-9


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=2, max_size=6))
def test_ensemble_mean_and_bounds_property(values):
    # Single-bin probabilities p and 1-p over two bins keep std within [0, 0.5].
    samples = [dist(np.array([[ [v] ], [[1.0 - v]]]).reshape(2, 1, 1)) for v in values]
    u = uncertainty_map(samples)
    assert np.all(u.tensor.array <= 0.5 + 1e-15)
    mean = ensemble_mean(samples)
    assert abs(mean.probabilities().sum() - 1.0) < 1e-12
