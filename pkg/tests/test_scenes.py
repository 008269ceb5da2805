import numpy as np
import pytest
from scipy.spatial import cKDTree

from moereg.cloudio import read_cloud, write_cloud, write_ply
from moereg.errors import ConfigError, ParseError
from moereg.geometry import PointCloud, random_rotation, RigidTransform
from moereg.scenes import (BASE_FEATURES, SceneConfig, compute_descriptors,
                           generate_scene, local_geometry_features,
                           measure_overlap, voxel_downsample)

FAST_SCENE = SceneConfig(n_points=400, room_size=2.0, wall_height=1.0,
                         n_boxes=2, n_cylinders=1)


def test_full_overlap_zero_noise_is_exact():
    cfg = SceneConfig(n_points=300, overlap=1.0, noise_sigma=0.0,
                      room_size=2.0, wall_height=1.0, n_boxes=2, n_cylinders=1)
    scene = generate_scene(3, cfg)
    assert scene.overlap_fraction == 1.0
    moved = scene.ground_truth.apply(scene.source.points)
    np.testing.assert_array_equal(moved, scene.target.points)


def test_same_seed_is_bit_identical():
    a = generate_scene(11, FAST_SCENE)
    b = generate_scene(11, FAST_SCENE)
    np.testing.assert_array_equal(a.source.points, b.source.points)
    np.testing.assert_array_equal(a.target.points, b.target.points)
    np.testing.assert_array_equal(a.ground_truth.rotation, b.ground_truth.rotation)
    assert a.overlap_fraction == b.overlap_fraction


def test_overlap_target_tracked_by_brute_force():
    cfg = SceneConfig(n_points=600, overlap=0.2, room_size=2.2, wall_height=1.0,
                      n_boxes=2, n_cylinders=1)
    for seed in (0, 5, 9):
        scene = generate_scene(seed, cfg)
        moved = scene.ground_truth.apply(scene.source.points)
        d2 = np.sum((moved[:, None, :] - scene.target.points[None, :, :]) ** 2, axis=-1)
        measured = float(np.mean(np.sqrt(d2.min(axis=1)) <= cfg.check_radius()))
        assert abs(measured - scene.overlap_fraction) < 1e-12
        assert 0.1 <= measured <= 0.3


def test_scene_config_errors():
    with pytest.raises(ConfigError):
        generate_scene(0, SceneConfig(overlap=0.0))
    with pytest.raises(ConfigError):
        generate_scene(0, SceneConfig(overlap=1.5))
    with pytest.raises(ConfigError):
        generate_scene(0, SceneConfig(n_points=50))


def test_zero_noise_overlap_points_match_exactly():
    cfg = SceneConfig(n_points=500, overlap=0.5, noise_sigma=0.0,
                      room_size=2.0, wall_height=1.0, n_boxes=2, n_cylinders=1)
    scene = generate_scene(2, cfg)
    moved = scene.ground_truth.apply(scene.source.points)
    d, _ = cKDTree(scene.target.points).query(moved, k=1)
    in_overlap = d <= cfg.check_radius()
    assert np.all(d[in_overlap] < 1e-9)


def test_min_spacing_enforced():
    scene = generate_scene(4, SceneConfig(n_points=500, noise_sigma=0.0,
                                          room_size=2.0, wall_height=1.0,
                                          n_boxes=2, n_cylinders=1))
    d, _ = cKDTree(scene.source.points).query(scene.source.points, k=2)
    assert d[:, 1].min() >= SceneConfig().min_spacing - 1e-12


def test_voxel_single_cell():
    cloud = PointCloud(np.array([[x, y, z] for x in (0.0, 1.0)
                                 for y in (0.0, 1.0) for z in (0.0, 1.0)]))
    sp = voxel_downsample(cloud, 10.0)
    assert len(sp) == 1
    np.testing.assert_allclose(sp.superpoints[0], [0.5, 0.5, 0.5])
    assert len(sp.patch_members[0]) == 8


def test_voxel_grid_counts_match_brute_force():
    # 4x4 planar grid, unit spacing, unit voxel: one superpoint per point
    xs, ys = np.meshgrid(np.arange(4.0), np.arange(4.0))
    cloud = PointCloud(np.stack([xs.ravel(), ys.ravel(), np.zeros(16)], axis=1))
    sp = voxel_downsample(cloud, 1.0)
    assert len(sp) == 16


def test_voxel_partition_property():
    for seed in (0, 1, 2):
        scene = generate_scene(seed, FAST_SCENE)
        sp = voxel_downsample(scene.source, 0.5)
        all_members = np.concatenate(sp.patch_members)
        assert len(all_members) == len(scene.source.points)
        assert len(np.unique(all_members)) == len(all_members)


def test_voxel_octant_localization():
    rng = np.random.default_rng(0)
    pts = np.abs(rng.normal(size=(200, 3)))  # one octant only
    sp = voxel_downsample(PointCloud(pts), 0.4)
    lo = pts.min(axis=0) - 0.4
    hi = pts.max(axis=0) + 0.4
    assert np.all(sp.superpoints >= lo) and np.all(sp.superpoints <= hi)


def test_voxel_idempotence():
    scene = generate_scene(8, FAST_SCENE)
    sp = voxel_downsample(scene.source, 0.5)
    again = voxel_downsample(PointCloud(sp.superpoints), 0.5)
    assert len(again) == len(sp)


def test_planar_patch_features():
    # symmetric square grid: planarity exactly 1, sphericity exactly 0
    xs, ys = np.meshgrid(np.linspace(-1, 1, 9), np.linspace(-1, 1, 9))
    pts = np.stack([xs.ravel(), ys.ravel(), np.zeros(81)], axis=1)
    cloud = PointCloud(pts)
    feats = local_geometry_features(cloud, np.array([[0.0, 0.0, 0.0]]), radius=3.0)
    idx = {name: i for i, name in enumerate(BASE_FEATURES)}
    assert abs(feats[0, idx["planarity"]] - 1.0) < 1e-6
    assert abs(feats[0, idx["sphericity"]]) < 1e-12
    assert abs(feats[0, idx["height_spread"]]) < 1e-12


def test_identical_geometry_identical_descriptors():
    # two separated but congruent clusters
    rng = np.random.default_rng(6)
    patch = rng.normal(size=(30, 3)) * 0.1
    cloud = PointCloud(np.concatenate([patch, patch + [5.0, 0, 0]]))
    sp = voxel_downsample(cloud, 1.0)
    sp = compute_descriptors(cloud, sp, radius=0.5, d=32)
    centers = np.array([patch.mean(axis=0), patch.mean(axis=0) + [5.0, 0, 0]])
    feats = local_geometry_features(cloud, centers, 0.5)
    np.testing.assert_allclose(feats[0], feats[1], atol=1e-9)


def test_descriptor_rotation_invariance():
    cfg = SceneConfig(n_points=400, noise_sigma=0.0, room_size=2.0,
                      wall_height=1.0, n_boxes=2, n_cylinders=1)
    scene = generate_scene(5, cfg)
    rot = random_rotation(np.random.default_rng(2), 170.0)
    moved = PointCloud(scene.source.points @ rot.T)
    centers = scene.source.points[::25]
    a = local_geometry_features(scene.source, centers, 0.5)
    b = local_geometry_features(moved, centers @ rot.T, 0.5)
    np.testing.assert_allclose(a, b, atol=1e-3)


def test_descriptor_shape_and_normalization():
    scene = generate_scene(7, FAST_SCENE)
    sp = voxel_downsample(scene.source, 0.5)
    sp = compute_descriptors(scene.source, sp, radius=0.5, d=64)
    assert sp.features.shape == (len(sp), 64)
    norms = np.linalg.norm(sp.features, axis=1)
    nz = norms > 0
    np.testing.assert_allclose(norms[nz], 1.0, atol=1e-9)


def test_descriptor_preconditions():
    scene = generate_scene(7, FAST_SCENE)
    sp = voxel_downsample(scene.source, 0.5)
    with pytest.raises(ValueError):
        compute_descriptors(scene.source, sp, radius=-1.0, d=64)
    with pytest.raises(ValueError):
        compute_descriptors(scene.source, sp, radius=0.5, d=4)


def test_cloud_io_round_trip(tmp_path):
    rng = np.random.default_rng(12)
    cloud = PointCloud(rng.normal(size=(64, 3)) * 10)
    path = tmp_path / "cloud.xyz"
    write_cloud(cloud, path)
    back = read_cloud(path)
    np.testing.assert_allclose(back.points, cloud.points, atol=1e-6)


def test_cloud_io_comments_and_errors(tmp_path):
    path = tmp_path / "bad.xyz"
    path.write_text("# header\n1 2 3\n4 five 6\n", encoding="utf-8")
    with pytest.raises(ParseError) as err:
        read_cloud(path)
    assert err.value.line == 3

    path.write_text("1 2 3 4\n", encoding="utf-8")
    with pytest.raises(ParseError) as err:
        read_cloud(path)
    assert err.value.line == 1

    path.write_text("# nothing\n\n", encoding="utf-8")
    with pytest.raises(ParseError):
        read_cloud(path)


def test_ply_export(tmp_path):
    pts = np.array([[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]])
    path = tmp_path / "out.ply"
    write_ply(pts, path, expert=np.array([2, 0]))
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "ply"
    assert "element vertex 2" in lines
    assert "property int expert" in lines
    assert lines[-1].split()[-1] == "0"
    with pytest.raises(ValueError):
        write_ply(pts, path, expert=np.array([1]))


def test_measure_overlap_full():
    scene = generate_scene(1, SceneConfig(n_points=300, overlap=1.0,
                                          noise_sigma=0.0, room_size=2.0,
                                          wall_height=1.0, n_boxes=1, n_cylinders=1))
    assert measure_overlap(scene.source, scene.target, scene.ground_truth, 0.01) == 1.0
