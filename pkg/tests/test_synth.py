"""Tests for synthetic model generation, keypoint selection, and scenes."""

import numpy as np
import pytest

from equipose.errors import ConfigInvalid, TooFewVertices
from equipose.geometry import RigidTransform, Rotation, compose, sample_uniform_rotation
from equipose.metrics import add_s
from equipose.synth import (
    ObjectModel,
    Registry,
    SceneConfig,
    generate_object,
    load_registry,
    load_scene,
    make_default_models,
    render_scene,
    save_registry,
    save_scene,
    select_keypoints,
)

RNG = np.random.default_rng


class TestGenerateObject:
    def test_box_diameter_matches_analytic(self):
        model = generate_object("box", 600, seed=0, size=(0.1, 0.2, 0.3))
        expected = np.sqrt(0.1**2 + 0.2**2 + 0.3**2)
        assert abs(model.diameter - expected) <= 0.02 * expected

    def test_deterministic_per_seed(self):
        a = generate_object("blob", 200, seed=5)
        b = generate_object("blob", 200, seed=5)
        np.testing.assert_array_equal(a.vertices, b.vertices)
        np.testing.assert_array_equal(a.colors, b.colors)
        np.testing.assert_array_equal(a.keypoints, b.keypoints)

    def test_cylinder_axially_self_similar(self):
        from scipy.spatial import cKDTree

        model = generate_object("cylinder", 2000, seed=6)
        spacing = float(cKDTree(model.vertices).query(model.vertices, k=2)[0][:, 1].mean())
        rng = RNG(7)
        gt = RigidTransform(sample_uniform_rotation(rng), rng.normal(size=3))
        spin = RigidTransform(Rotation.from_axis_angle([0, 0, 1], rng.uniform(0, 2 * np.pi)), np.zeros(3))
        assert add_s(gt, compose(gt, spin), model) <= 2.0 * spacing

    def test_min_vertices_enforced(self):
        with pytest.raises(ConfigInvalid):
            generate_object("box", 10, seed=0)

    def test_unknown_kind(self):
        with pytest.raises(ConfigInvalid):
            generate_object("torus", 100, seed=0)

    def test_keypoints_inside_bounding_sphere(self):
        for model in make_default_models(seed=1, n_vertices=300):
            radius = np.linalg.norm(model.vertices - model.center, axis=1).max()
            kp_radius = np.linalg.norm(model.keypoints - model.center, axis=1).max()
            assert kp_radius <= radius + 1e-12
            assert model.diameter > 0
            assert model.keypoints.shape[0] >= 3


class TestSelectKeypoints:
    def test_all_vertices_is_permutation(self):
        model = generate_object("blob", 60, seed=2)
        kps = select_keypoints(model, 60)
        assert kps.shape == (60, 3)
        # same multiset of rows
        a = np.lexsort(kps.T)
        b = np.lexsort(model.vertices.T)
        np.testing.assert_array_equal(kps[a], model.vertices[b])

    def test_unit_cube_two_points_are_opposite_corners(self):
        corners = np.array(
            [[x, y, z] for x in (0.0, 1.0) for y in (0.0, 1.0) for z in (0.0, 1.0)]
        )
        kps = select_keypoints(corners, 2)
        assert abs(np.linalg.norm(kps[0] - kps[1]) - np.sqrt(3.0)) <= 1e-12

    def test_spread_dominates_random_subsets(self):
        model = generate_object("blob", 150, seed=3)
        m = 6

        def min_pairwise(pts):
            d = np.linalg.norm(pts[:, None] - pts[None, :], axis=-1)
            return d[np.triu_indices(len(pts), k=1)].min()

        fps_spread = min_pairwise(select_keypoints(model, m))
        rng = RNG(4)
        best_random = max(
            min_pairwise(model.vertices[rng.choice(len(model.vertices), m, replace=False)])
            for _ in range(1000)
        )
        assert fps_spread >= best_random

    def test_too_few_vertices(self):
        with pytest.raises(TooFewVertices):
            select_keypoints(np.zeros((4, 3)), 5)


class TestRenderScene:
    def setup_method(self):
        self.models = make_default_models(seed=0, n_vertices=400)

    def test_offset_consistency_at_zero_noise(self):
        scene = render_scene(self.models, SceneConfig(noise_sigma=0.0, occlusion=0.3), seed=1)
        (cls, pose), = scene.gt_poses
        model = next(m for m in self.models if m.id == cls)
        targets = pose.apply(np.vstack([model.keypoints, model.center]))
        fg = scene.labels == cls
        votes = scene.cloud.points[fg, None, :] + scene.gt_offsets[fg]
        assert np.max(np.abs(votes - targets[None])) <= 1e-12

    def test_occlusion_removes_half(self):
        base = render_scene(self.models, SceneConfig(occlusion=0.0), seed=2)
        occluded = render_scene(self.models, SceneConfig(occlusion=0.5), seed=2)
        n_base = (base.labels > 0).sum()
        n_occ = (occluded.labels > 0).sum()
        assert abs(n_occ - 0.5 * n_base) <= 0.05 * 0.5 * n_base

    def test_fixed_seed_bit_identical(self):
        cfg = SceneConfig(noise_sigma=0.002, occlusion=(0.0, 0.3), n_background=30)
        a = render_scene(self.models, cfg, seed=3)
        b = render_scene(self.models, cfg, seed=3)
        np.testing.assert_array_equal(a.cloud.points, b.cloud.points)
        np.testing.assert_array_equal(a.labels, b.labels)
        np.testing.assert_array_equal(a.gt_offsets, b.gt_offsets)

    def test_labels_partition_points(self):
        scene = render_scene(
            self.models, SceneConfig(n_background=25, occlusion=0.2), seed=4
        )
        assert scene.labels.shape == (len(scene.cloud),)
        assert set(np.unique(scene.labels)) <= {0, 1, 2, 3}
        assert (scene.labels == 0).sum() == 25

    def test_explicit_poses(self):
        pose = RigidTransform(Rotation.identity(), np.array([0.0, 0.0, 0.6]))
        scene = render_scene(self.models, SceneConfig(poses=[(2, pose)]), seed=5)
        assert scene.gt_poses == [(2, pose)]
        assert set(np.unique(scene.labels)) == {2}

    def test_invalid_occlusion(self):
        with pytest.raises(ConfigInvalid):
            SceneConfig(occlusion=0.95)
        with pytest.raises(ConfigInvalid):
            SceneConfig(noise_sigma=-1.0)

    def test_noise_added_after_offsets(self):
        # with noise, votes are scattered around the true keypoints instead of
        # landing exactly on them
        sigma = 0.01
        scene = render_scene(self.models, SceneConfig(noise_sigma=sigma), seed=6)
        (cls, pose), = scene.gt_poses
        model = next(m for m in self.models if m.id == cls)
        targets = pose.apply(np.vstack([model.keypoints, model.center]))
        fg = scene.labels == cls
        votes = scene.cloud.points[fg, None, :] + scene.gt_offsets[fg]
        residuals = np.linalg.norm(votes - targets[None], axis=-1)
        assert residuals.mean() > 0.5 * sigma
        assert abs(residuals.mean() - sigma * np.sqrt(8 / np.pi) / np.sqrt(3) * np.sqrt(3)) < sigma


class TestOnDisk:
    def test_scene_roundtrip(self, tmp_path):
        models = make_default_models(seed=0, n_vertices=200)
        scene = render_scene(
            models, SceneConfig(noise_sigma=0.002, occlusion=0.2, n_background=10), seed=7
        )
        save_scene(tmp_path / "scene_00000", scene)
        loaded = load_scene(tmp_path / "scene_00000")
        np.testing.assert_array_equal(loaded.cloud.points, scene.cloud.points)
        np.testing.assert_array_equal(loaded.cloud.attributes, scene.cloud.attributes)
        np.testing.assert_array_equal(loaded.labels, scene.labels)
        np.testing.assert_array_equal(loaded.gt_offsets, scene.gt_offsets)
        assert loaded.scene_seed == scene.scene_seed
        for (c1, p1), (c2, p2) in zip(loaded.gt_poses, scene.gt_poses):
            assert c1 == c2
            np.testing.assert_array_equal(p1.rotation.m, p2.rotation.m)

    def test_registry_roundtrip(self, tmp_path):
        registry = Registry(make_default_models(seed=0, n_vertices=150))
        save_registry(registry, tmp_path / "registry")
        loaded = load_registry(tmp_path / "registry")
        assert loaded.class_ids() == registry.class_ids()
        for cls in registry:
            a, b = registry[cls], loaded[cls]
            np.testing.assert_array_equal(a.vertices, b.vertices)
            np.testing.assert_array_equal(a.keypoints, b.keypoints)
            assert a.symmetric == b.symmetric
            assert a.diameter == b.diameter

    def test_oracle_pipeline_on_loaded_scene(self, tmp_path):
        # ties the on-disk format to the second stage
        from equipose.metrics import add
        from equipose.pipeline import run_pipeline

        models = make_default_models(seed=0, n_vertices=300)
        registry = Registry(models)
        scene = render_scene(models, SceneConfig(noise_sigma=0.0, occlusion=0.1), seed=8)
        save_scene(tmp_path / "scene_00000", scene)
        loaded = load_scene(tmp_path / "scene_00000")
        detections = run_pipeline(
            loaded.cloud, None, registry, oracle=(loaded.labels, loaded.gt_offsets)
        )
        (cls, pose), = loaded.gt_poses
        det = next(d for d in detections if d.class_id == cls)
        assert add(pose, det.pose, registry[cls]) <= 1e-6
