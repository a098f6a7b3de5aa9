import dataclasses

import numpy as np
import pytest
from scipy.ndimage import map_coordinates

from stg_avatar import synth
from stg_avatar.camera import Camera
from stg_avatar.data import DataError
from stg_avatar.skeleton import Pose, forward_kinematics, translation


@pytest.fixture(scope="module")
def scene():
    return synth.make_scene(seed=0, frames=6, height=48, width=48)


def test_skeleton_has_nine_bones():
    assert len(synth.build_skeleton()) == 9


def test_scene_rejects_bad_sizes():
    with pytest.raises(ValueError):
        synth.make_scene(frames=1)
    with pytest.raises(ValueError):
        synth.make_scene(height=4)


def test_static_script_gives_zero_flow():
    ds = synth.generate(1, 3, 24, 24, static=True)
    for f in ds.flows:
        assert not f.any()


def test_parallel_translation_flow_follows_depth():
    base = synth.make_scene(seed=2, frames=2, height=40, width=40, static=True)
    n = len(base.skeleton)
    dx = 0.2
    poses = [Pose(Pose.rest(n).rotations, np.zeros(3)), Pose(Pose.rest(n).rotations, np.array([dx, 0, 0]))]
    f = 40 * synth.FOCAL_PER_PIXEL
    cam = Camera(f, f, 19.5, 19.5, 40, 40, translation((0, 0, 10.0)))
    sc = dataclasses.replace(base, poses=poses, cameras=[cam, cam])
    flow, _ = sc.flow(0)
    ids, _ = sc.front_ids(0)
    x0, _ = sc.posed(0)
    z = x0[:, 2] + 10.0
    fg = ids >= 0
    assert fg.sum() > 50
    np.testing.assert_allclose(flow[fg, 0], f * dx / z[ids[fg]], rtol=1e-12)
    np.testing.assert_allclose(flow[fg, 1], 0.0, atol=1e-12)
    assert not flow[~fg].any()
    # nearly uniform: depth spread of the figure is small next to the distance
    assert np.ptp(flow[fg, 0]) < 0.1 * flow[fg, 0].mean()


def test_same_seed_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    synth.generate(5, 3, 20, 20, a)
    synth.generate(5, 3, 20, 20, b)
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    for rel in files:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_dataset_layout(tiny_dataset_dir):
    root = tiny_dataset_dir
    for name in ("cameras.json", "poses.json", "skeleton.json", "meta.json"):
        assert (root / name).is_file()
    assert len(list((root / "frames").glob("*.png"))) == 8
    assert len(list((root / "frames_raw").glob("*.imgf"))) == 8
    assert len(list((root / "flow").glob("*.flo"))) == 7


def test_flow_warp_reproduces_next_frame(scene):
    for k in range(scene.n_frames - 1):
        a, b = scene.render(k), scene.render(k + 1)
        flow, vis = scene.flow(k)
        yy, xx = np.mgrid[0:scene.height, 0:scene.width].astype(float)
        coords = [yy + flow[..., 1], xx + flow[..., 0]]
        warped = np.stack([map_coordinates(b[..., c], coords, order=1, mode="nearest") for c in range(3)], -1)
        assert np.abs(warped - a)[vis].mean() < 0.02


def test_pose_script_fk_matches_render_path(scene, tmp_path):
    ds = synth.scene_dataset(scene)
    synth.write_dataset(ds, tmp_path)
    from stg_avatar.skeleton import load_poses
    for k, p in enumerate(load_poses(tmp_path / "poses.json")):
        assert np.array_equal(forward_kinematics(scene.skeleton, p), scene.bone_transforms(k))


def test_holdout_frames():
    assert synth.holdout_frames(24) == [3, 9, 15, 21]


def test_ground_truth_points_score_high(scene):
    ds = synth.scene_dataset(scene)
    res = synth.eval_holdout(scene.render, ds, [0, 3])
    assert res["psnr"] >= 40.0 and res["ssim"] > 0.999


def test_empty_holdout_is_an_error(tiny_dataset):
    with pytest.raises(DataError):
        synth.eval_holdout(lambda k: tiny_dataset.images[k], tiny_dataset, [])
    with pytest.raises(DataError):
        synth.eval_holdout(lambda k: tiny_dataset.images[k], tiny_dataset, [99])


def test_eval_is_deterministic(tiny_dataset):
    fn = lambda k: 0.9 * tiny_dataset.images[k] + 0.05  # noqa: E731
    assert synth.eval_holdout(fn, tiny_dataset) == synth.eval_holdout(fn, tiny_dataset)


def test_images_in_unit_range_and_figure_visible(tiny_dataset):
    imgs = tiny_dataset.images
    assert imgs.min() >= 0 and imgs.max() <= 1
    assert all((img.sum(-1) > 0).mean() > 0.05 for img in imgs)
