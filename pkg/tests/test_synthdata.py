"""Synthetic shapes, rendered scenes, and the on-disk dataset format."""

import os

import numpy as np
import pytest

from fdmpose.synthdata import (MAX_POINTS, SyntheticScene,
                               generate_dataset, generate_scene, load_dataset,
                               load_ppm, load_scene, make_shape, save_ppm,
                               save_scene, shape_library, tetx_spec)


def test_shape_library_contents():
    specs = shape_library(0)
    assert len(specs) == 8
    names = [s.name or s.kind for s in specs]
    assert len(set(names)) == 8
    other = shape_library(7)
    # same primitive kinds, different randomized dimensions
    assert [s.kind for s in specs] == [s.kind for s in other]
    assert any(a.dims != b.dims for a, b in zip(specs, other))


def test_make_shape_normalized():
    for spec in shape_library(0):
        cloud = make_shape(spec, 256, seed=1)
        assert len(cloud) == 256
        assert cloud.normals is not None and cloud.colors is not None
        r = np.linalg.norm(cloud.points, axis=1).max()
        assert np.isclose(r, 0.1, atol=1e-9)  # 0.1 m normalization
        assert np.allclose(np.linalg.norm(cloud.normals, axis=1), 1.0)


def test_make_shape_deterministic():
    spec = shape_library(0)[3]
    a = make_shape(spec, 128, seed=5)
    b = make_shape(spec, 128, seed=5)
    assert np.array_equal(a.points, b.points)
    assert np.array_equal(a.colors, b.colors)


def test_generate_scene_contract():
    scene = generate_scene(shape_library(0)[0], seed=11)
    assert isinstance(scene, SyntheticScene)
    assert scene.crop.shape[2] == 3
    assert scene.crop.min() >= 0.0 and scene.crop.max() <= 1.0
    assert len(scene.depth_cloud) > 32
    assert scene.cad_visible_index is not None
    assert len(scene.cad_visible_index) == len(scene.depth_cloud)
    # visible index maps depth points onto their generating CAD points
    back = scene.gt_pose.apply(scene.cad.points[scene.cad_visible_index])
    assert np.abs(back - scene.depth_cloud.points).max() < 1e-9


def test_generate_scene_deterministic():
    a = generate_scene(shape_library(0)[2], seed=4)
    b = generate_scene(shape_library(0)[2], seed=4)
    assert np.array_equal(a.depth_cloud.points, b.depth_cloud.points)
    assert np.array_equal(a.crop, b.crop)
    assert np.array_equal(a.gt_pose.rotation, b.gt_pose.rotation)


def test_generate_scene_noise_and_dropout():
    clean = generate_scene(shape_library(0)[0], seed=8)
    noisy = generate_scene(shape_library(0)[0], seed=8, noise_sigma=0.002,
                           dropout_p=0.3)
    assert len(noisy.depth_cloud) < len(clean.depth_cloud)


def test_max_points_enforced():
    with pytest.raises(ValueError):
        generate_scene(shape_library(0)[0], seed=0, n_points=MAX_POINTS + 1)


def test_depth_cloud_in_camera_frame():
    scene = generate_scene(shape_library(0)[1], seed=13)
    z = scene.depth_cloud.points[:, 2]
    assert (z > 0.1).all()  # in front of the camera


def test_tetx_has_red_face():
    cloud = make_shape(tetx_spec(), 512, seed=0)
    red = (cloud.colors[:, 0] > 0.9) & (cloud.colors[:, 1] < 0.1)
    frac = red.mean()
    assert 0.1 < frac < 0.45  # one face of four


def test_ppm_roundtrip(tmp_path, rng):
    img = rng.uniform(0, 1, (16, 20, 3))
    p = tmp_path / "img.ppm"
    save_ppm(p, img)
    back = load_ppm(p)
    assert back.shape == img.shape
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-9


def test_scene_save_load_roundtrip(tmp_path):
    scene = generate_scene(shape_library(0)[4], seed=17)
    d = tmp_path / "scene"
    save_scene(d, scene)
    back = load_scene(d)
    assert np.allclose(back.cad.points, scene.cad.points)
    assert np.allclose(back.depth_cloud.points, scene.depth_cloud.points)
    assert np.abs(back.crop - scene.crop).max() <= 0.5 / 255 + 1e-9
    assert np.allclose(back.gt_pose.rotation, scene.gt_pose.rotation, atol=1e-9)
    assert np.allclose(back.gt_pose.translation, scene.gt_pose.translation)
    assert back.camera.fx == scene.camera.fx


def test_generate_dataset_layout(tmp_path):
    specs = shape_library(0)
    idx = generate_dataset(specs, 10, tmp_path / "ds", seed=2, n_points=128)
    assert len(idx.entries) == 10
    splits = [e[1] for e in idx.entries]
    assert splits.count("train") == 7
    assert os.path.exists(tmp_path / "ds" / "index.txt")
    loaded = load_dataset(tmp_path / "ds")
    assert loaded.entries == idx.entries
    assert len(loaded.scenes("test")) == splits.count("test")


def test_generate_dataset_reproducible(tmp_path):
    specs = shape_library(0)[:2]
    a = generate_dataset(specs, 4, tmp_path / "a", seed=9, n_points=128)
    b = generate_dataset(specs, 4, tmp_path / "b", seed=9, n_points=128)
    for (na, *_), (nb, *_) in zip(a.entries, b.entries):
        sa = load_scene(tmp_path / "a" / na)
        sb = load_scene(tmp_path / "b" / nb)
        assert np.array_equal(sa.cad.points, sb.cad.points)
        assert np.array_equal(sa.crop, sb.crop)


def test_crop_mostly_filled_inside_silhouette():
    # the splat-gap fill leaves few black holes inside the object's footprint
    scene = generate_scene(shape_library(0)[0], seed=23)
    filled = (scene.crop.sum(axis=2) > 0)
    ys, xs = np.nonzero(filled)
    y0, y1, x0, x1 = ys.min() + 2, ys.max() - 2, xs.min() + 2, xs.max() - 2
    inner = filled[y0:y1, x0:x1]
    assert inner.mean() > 0.7
