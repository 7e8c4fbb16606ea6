import math

import numpy as np
import pytest

from bevadapt.synth import (
    Corpus,
    DomainShift,
    SceneError,
    SceneSpec,
    apply_fog,
    apply_night,
    apply_rain,
    apply_shift,
    build_corpus,
    generate_scene,
    load_corpus,
    read_sealed_labels,
    sample_lidar,
)


def spec_with(**overrides) -> SceneSpec:
    base = dict(seed=5, n_objects=2, image_hw=(16, 32), view_count=2)
    base.update(overrides)
    return SceneSpec(**base)


class TestSceneSpec:
    def test_rejects_single_view(self):
        with pytest.raises(SceneError):
            spec_with(view_count=1)

    def test_rejects_tiny_image(self):
        with pytest.raises(SceneError):
            spec_with(image_hw=(4, 4))

    def test_rejects_unknown_layout(self):
        with pytest.raises(SceneError):
            spec_with(layout_style="suburbia")


class TestGenerateScene:
    def test_bit_identical_for_same_spec(self):
        a = generate_scene(spec_with())
        b = generate_scene(spec_with())
        for ia, ib in zip(a.images, b.images):
            assert ia.tobytes() == ib.tobytes()
        for da, db in zip(a.depth_gt, b.depth_gt):
            assert da.tobytes() == db.tobytes()
        assert np.array_equal(a.label_cells, b.label_cells)

    def test_different_seeds_differ(self):
        a = generate_scene(spec_with(seed=1))
        b = generate_scene(spec_with(seed=2))
        assert not np.array_equal(a.images[0], b.images[0])

    def test_empty_scene_has_ground_plane_depth(self):
        sample = generate_scene(spec_with(n_objects=0))
        assert sample.label_cells.shape == (0, 2)
        spec = spec_with(n_objects=0)
        d_min, d_max = spec.depth_range
        for depth in sample.depth_gt:
            assert depth.min() >= d_min and depth.max() <= d_max
        # Above the horizon everything sits at the far plane.
        assert np.all(sample.depth_gt[0][0] == d_max)

    def test_images_in_unit_range(self):
        sample = generate_scene(spec_with(n_objects=4))
        for image in sample.images:
            assert image.min() >= 0.0 and image.max() <= 1.0

    def test_objects_leave_depth_evidence(self):
        # Every labeled object has a pixel at its exact depth in some view.
        spec = spec_with(n_objects=3, seed=9)
        sample = generate_scene(spec)
        bin_width = np.diff(spec.bin_edges).max()
        assert len(sample.objects) > 0
        for obj in sample.objects:
            depth = sample.depth_gt[obj.view]
            assert np.abs(depth - obj.z).min() < bin_width

    def test_labels_inside_grid(self):
        spec = spec_with(n_objects=6, seed=3)
        sample = generate_scene(spec)
        gh, gw = spec.grid
        for row, col in sample.label_cells:
            assert 0 <= row < gh and 0 <= col < gw
        labels = sample.cell_labels()
        assert labels.occupied_count() == len(sample.objects)

    def test_layouts_render_differently(self):
        a = generate_scene(spec_with(layout_style="grid-city", n_objects=0))
        b = generate_scene(spec_with(layout_style="curved-city", n_objects=0))
        assert not np.allclose(a.images[0], b.images[0])


class TestFog:
    def test_zero_extinction_is_identity(self):
        rng = np.random.default_rng(0)
        img = rng.random((3, 8, 8))
        depth = rng.uniform(2, 20, (8, 8))
        assert np.array_equal(apply_fog(img, depth, 0.0, 0.8), img)

    def test_deep_fog_saturates_to_airlight(self):
        img = np.zeros((3, 4, 4))
        depth = np.full((4, 4), 100.0)
        out = apply_fog(img, depth, 0.5, 0.8)  # beta*d = 50
        assert np.abs(out - 0.8).max() < 1e-9

    def test_half_transmittance_hand_value(self):
        img = np.full((3, 2, 2), 0.4)
        d = 7.0
        beta = math.log(2.0) / d
        out = apply_fog(img, np.full((2, 2), d), beta, 0.6)
        assert np.abs(out - (0.5 * 0.4 + 0.5 * 0.6)).max() < 1e-12


class TestNight:
    def test_identity_at_unit_gain(self):
        img = np.random.default_rng(1).random((3, 6, 6))
        assert np.array_equal(apply_night(img, 1.0, 0.0, 3), img)

    def test_gain_scales(self):
        img = np.full((3, 4, 4), 0.8)
        out = apply_night(img, 0.5, 0.0, 3)
        assert np.abs(out - 0.4).max() < 1e-12

    def test_seed_reproducible(self):
        img = np.random.default_rng(2).random((3, 6, 6))
        a = apply_night(img, 0.5, 0.1, 7)
        b = apply_night(img, 0.5, 0.1, 7)
        c = apply_night(img, 0.5, 0.1, 8)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)


class TestRain:
    def test_identity_at_zero_density(self):
        img = np.random.default_rng(3).random((3, 8, 8))
        assert np.array_equal(apply_rain(img, 0.0, 0.0, 1), img)

    def test_streak_fraction_concentrates(self):
        from bevadapt.synth import RAIN_STREAK_LEN as L

        img = np.zeros((3, 512, 512))
        density = 0.005
        out = apply_rain(img, density, 0.0, 11)
        painted = float((out[0] > 0).sum())
        n_interior = (512 - L) * (512 - L)
        p_seed = density / L
        sigma_seeds = math.sqrt(n_interior * p_seed * (1 - p_seed))
        expect = n_interior * p_seed * L
        slack = 3.0 * L * sigma_seeds + 0.02 * expect  # binomial band + overlap allowance
        assert abs(painted - expect) <= slack

    def test_streaks_brighten(self):
        img = np.full((3, 64, 64), 0.1)
        out = apply_rain(img, 0.05, 0.0, 4)
        assert np.all(out >= img - 1e-12)
        assert (out > 0.5).any()

    def test_seed_reproducible(self):
        img = np.random.default_rng(5).random((3, 32, 32))
        assert np.array_equal(apply_rain(img, 0.02, 0.01, 9), apply_rain(img, 0.02, 0.01, 9))


class TestSampleLidar:
    def edges(self):
        return np.linspace(2.0, 20.0, 17)

    def test_full_density_observes_everything(self):
        rng = np.random.default_rng(6)
        depth = rng.uniform(2.0, 19.9, (10, 10))
        lidar, dropped = sample_lidar(depth, 1.0, self.edges(), 3)
        assert dropped == 0
        assert lidar.mask.all()
        bins = lidar.tensor.array.argmax(axis=0)
        expect = np.clip(np.searchsorted(self.edges(), depth, side="right") - 1, 0, 15)
        assert np.array_equal(bins, expect)

    def test_observed_sums_are_one(self):
        rng = np.random.default_rng(7)
        depth = rng.uniform(2.0, 19.9, (20, 20))
        lidar, _ = sample_lidar(depth, 0.3, self.edges(), 5)
        sums = lidar.tensor.array.sum(axis=0)
        assert np.array_equal(sums[lidar.mask], np.ones(int(lidar.mask.sum())))
        assert np.all(sums[~lidar.mask] == 0)

    def test_density_concentration(self):
        depth = np.full((100, 100), 10.0)
        lidar, _ = sample_lidar(depth, 0.1, self.edges(), 8)
        count = int(lidar.mask.sum())
        assert 850 <= count <= 1150  # 3 sigma of Binomial(1e4, 0.1)

    def test_out_of_range_dropped_and_counted(self):
        depth = np.array([[1.0, 10.0], [25.0, 15.0]])
        lidar, dropped = sample_lidar(depth, 1.0, self.edges(), 2)
        assert dropped == 2
        assert lidar.mask.sum() == 2

    def test_consistency_with_depth(self):
        spec = spec_with(seed=12, n_objects=3)
        sample = generate_scene(spec)
        for v, lidar in enumerate(sample.lidar):
            half = sample.depth_gt[v][::2, ::2]
            bins = np.clip(
                np.searchsorted(spec.bin_edges, half, side="right") - 1, 0, spec.depth_bins - 1
            )
            got = lidar.tensor.array.argmax(axis=0)
            assert np.array_equal(got[lidar.mask], bins[lidar.mask])


class TestShifts:
    def test_annotations_preserved(self):
        spec = spec_with(seed=13, n_objects=3)
        sample = generate_scene(spec)
        for kind in ("fog", "night", "rain"):
            shifted = apply_shift(sample, DomainShift(kind=kind), seed=77)
            assert shifted.label_cells.tobytes() == sample.label_cells.tobytes()
            assert shifted.label_offsets.tobytes() == sample.label_offsets.tobytes()
            for v in range(spec.view_count):
                assert np.array_equal(shifted.depth_gt[v], sample.depth_gt[v])
                assert np.array_equal(
                    shifted.lidar[v].tensor.array, sample.lidar[v].tensor.array
                )
                assert np.array_equal(
                    shifted.cams[v].intrinsics, sample.cams[v].intrinsics
                )

    def test_fog_ladder_betas(self):
        for level, scale in [(1, 0.5), (3, 1.5), (5, 2.5)]:
            shift = DomainShift(kind="fog", level=level, fog_beta0=0.06)
            assert abs(shift.fog_beta - scale * 0.06) < 1e-12

    def test_fog_ladder_contrast_strictly_decreases(self):
        spec = spec_with(seed=21, n_objects=3)
        contrasts = []
        for level in (1, 3, 5):
            shift = DomainShift(kind="fog", level=level)
            stds = []
            for i in range(4):
                sample = generate_scene(spec_with(seed=100 + i, n_objects=3))
                shifted = apply_shift(sample, shift, seed=55)
                for image in shifted.images:
                    stds.append(image.mean(axis=0).std())
            contrasts.append(float(np.mean(stds)))
        assert contrasts[0] > contrasts[1] > contrasts[2]


class TestCorpus:
    def test_round_trip(self, tmp_path):
        spec = spec_with(seed=31, n_objects=2)
        path = tmp_path / "src.corpus"
        header = build_corpus(spec, DomainShift(kind="none"), 3, seed=9, path=path, labeled=True)
        corpus = load_corpus(path)
        assert corpus.header == header
        assert len(corpus.scenes) == 3
        # The no-shift corpus equals direct generation.
        from bevadapt.numerics import derive_seed
        from dataclasses import replace

        direct = generate_scene(replace(spec, seed=derive_seed(9, "scene", 0)))
        scene = corpus.scenes[0]
        for v in range(spec.view_count):
            assert np.array_equal(scene.images[v], direct.images[v])
            assert np.array_equal(scene.depth_gt[v], direct.depth_gt[v])
        assert scene.labels is not None
        assert np.array_equal(
            scene.labels.occupancy, direct.cell_labels().occupancy
        )

    def test_rewrite_is_bit_identical(self, tmp_path):
        spec = spec_with(seed=32)
        a = tmp_path / "a.corpus"
        b = tmp_path / "b.corpus"
        build_corpus(spec, DomainShift(kind="fog"), 2, seed=4, path=a, labeled=False)
        build_corpus(spec, DomainShift(kind="fog"), 2, seed=4, path=b, labeled=False)
        assert a.read_bytes() == b.read_bytes()

    def test_unlabeled_corpus_hides_labels_but_seals_them(self, tmp_path):
        spec = spec_with(seed=33, n_objects=2)
        path = tmp_path / "tgt.corpus"
        build_corpus(spec, DomainShift(kind="fog"), 2, seed=11, path=path, labeled=False)
        corpus = load_corpus(path)
        assert all(s.labels is None for s in corpus.scenes)
        sealed = read_sealed_labels(path)
        assert len(sealed) == 2
        assert sealed[0].occupied_count() > 0

    def test_sealed_labels_match_open_ones_for_labeled_corpora(self, tmp_path):
        spec = spec_with(seed=34, n_objects=2)
        path = tmp_path / "lab.corpus"
        build_corpus(spec, DomainShift(kind="none"), 2, seed=12, path=path, labeled=True)
        corpus = load_corpus(path)
        sealed = read_sealed_labels(path)
        for scene, labels in zip(corpus.scenes, sealed):
            assert np.array_equal(scene.labels.occupancy, labels.occupancy)
            assert np.array_equal(scene.labels.offsets, labels.offsets)

    def test_rejects_zero_scenes(self, tmp_path):
        with pytest.raises(SceneError):
            build_corpus(spec_with(), DomainShift(), 0, 1, tmp_path / "x.corpus")
