import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stg_avatar.skeleton import (Bone, Pose, Skeleton, SkinningWeights, assign_skinning_weights,
                                 forward_kinematics, lbs_backward, lbs_jacobian, lbs_transform, rigid,
                                 translation)

RZ90 = np.array([[0.0, -1, 0], [1, 0, 0], [0, 0, 1]])
QZ90 = np.array([np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4)])


def chain():
    return Skeleton([Bone("root", -1, np.eye(4), tail=np.array([1.0, 0, 0])),
                     Bone("child", 0, translation((1.0, 0, 0)), tail=np.array([1.0, 0, 0]))])


def random_rig(rng, n_bones=5):
    bones = [Bone("b0", -1, rigid(_rand_rot(rng), rng.normal(size=3)), tail=rng.normal(size=3))]
    for i in range(1, n_bones):
        bones.append(Bone(f"b{i}", int(rng.integers(0, i)), rigid(_rand_rot(rng), rng.normal(size=3)),
                          tail=rng.normal(size=3)))
    return Skeleton(bones)


def _rand_rot(rng):
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    return q * np.sign(np.linalg.det(q))


def random_pose(rng, n):
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return Pose(q, rng.normal(size=3))


# forward kinematics

def test_rest_pose_gives_identity_transforms(rng):
    skel = random_rig(rng)
    T = forward_kinematics(skel, Pose.rest(len(skel)))
    np.testing.assert_allclose(T, np.broadcast_to(np.eye(4), T.shape), atol=1e-12)


def test_root_translation_single_bone():
    skel = Skeleton([Bone("root", -1, np.eye(4))])
    T = forward_kinematics(skel, Pose(np.array([[1.0, 0, 0, 0]]), np.array([1.0, 2, 3])))
    np.testing.assert_array_equal(T[0], translation((1, 2, 3)))


def test_two_bone_chain_against_hand_composition():
    skel = chain()
    pose = Pose(np.array([[1.0, 0, 0, 0], QZ90]), np.zeros(3))
    T = forward_kinematics(skel, pose)
    # hand-composed: world_child = T(1,0,0) Rz90 ; rest_world_child = T(1,0,0)
    by_hand = translation((1, 0, 0)) @ rigid(RZ90) @ translation((-1, 0, 0))
    np.testing.assert_allclose(T[1], by_hand, atol=1e-15)
    tip = T[1] @ np.array([2.0, 0, 0, 1])
    np.testing.assert_allclose(tip[:3], [1.0, 1.0, 0.0], atol=1e-15)


def test_fk_rejects_bone_count_mismatch():
    with pytest.raises(ValueError):
        forward_kinematics(chain(), Pose.rest(3))


def test_skeleton_validation():
    with pytest.raises(ValueError):
        Skeleton([])
    with pytest.raises(ValueError):
        Skeleton([Bone("a", -1, np.eye(4)), Bone("b", 1, np.eye(4))])
    bad = np.eye(4)
    bad[0, 0] = 2.0
    with pytest.raises(ValueError):
        Skeleton([Bone("a", -1, bad)])


def test_skeleton_and_pose_json_roundtrip(tmp_path, rng):
    skel = random_rig(rng)
    skel.save(tmp_path / "s.json")
    back = Skeleton.load(tmp_path / "s.json")
    np.testing.assert_array_equal(back.rest_world, skel.rest_world)
    minimal = {"bones": [{"name": "r", "parent": -1, "rest": list(np.eye(4).ravel())}]}
    assert len(Skeleton.from_dict(json.loads(json.dumps(minimal)))) == 1
    pose = random_pose(rng, 5)
    np.testing.assert_array_equal(Pose.from_dict(pose.to_dict()).rotations, pose.rotations)


# skinning

def test_lbs_identity_transforms(rng):
    x = rng.normal(size=(7, 3))
    w = SkinningWeights(np.zeros((7, 1), dtype=int), np.ones((7, 1)))
    np.testing.assert_array_equal(lbs_transform(x, w, np.eye(4)[None]), x)


def test_lbs_single_rotation():
    w = SkinningWeights(np.zeros((1, 1), dtype=int), np.ones((1, 1)))
    out = lbs_transform(np.array([[1.0, 0, 0]]), w, rigid(RZ90)[None])
    np.testing.assert_allclose(out[0], [0, 1, 0], atol=1e-15)


def test_lbs_blend_of_translations():
    w = SkinningWeights(np.array([[0, 1]]), np.array([[0.5, 0.5]]))
    T = np.stack([translation((1, 0, 0)), translation((0, 1, 0))])
    np.testing.assert_array_equal(lbs_transform(np.zeros((1, 3)), w, T)[0], [0.5, 0.5, 0])


def test_lbs_jacobian_simple_cases():
    w = SkinningWeights(np.zeros((1, 1), dtype=int), np.ones((1, 1)))
    np.testing.assert_array_equal(lbs_jacobian(w, np.eye(4)[None])[0], np.eye(3))
    np.testing.assert_array_equal(lbs_jacobian(w, rigid(RZ90)[None])[0], RZ90)


def test_lbs_jacobian_finite_differences(rng):
    skel = random_rig(rng)
    T = forward_kinematics(skel, random_pose(rng, len(skel)))
    x = rng.normal(size=(5, 3))
    w = assign_skinning_weights(x, skel, k=3, sharpness=0.5)
    J = lbs_jacobian(w, T)
    h = 1e-6
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        num = (lbs_transform(x + e, w, T) - lbs_transform(x - e, w, T)) / (2 * h)
        np.testing.assert_allclose(J[:, :, j], num, rtol=1e-6, atol=1e-9)


def test_lbs_backward_bone_gradient(rng):
    T = forward_kinematics(random_rig(rng, 3), random_pose(rng, 3))
    x = rng.normal(size=(4, 3))
    w = SkinningWeights(np.array([[0, 1], [1, 2], [2, 0], [0, 2]]), np.full((4, 2), 0.5))
    g_out = rng.normal(size=(4, 3))
    _, gT = lbs_backward(x, w, T, g_out)
    h = 1e-6
    for b, i, j in [(0, 0, 0), (1, 2, 3), (2, 1, 2)]:
        Tp, Tm = T.copy(), T.copy()
        Tp[b, i, j] += h
        Tm[b, i, j] -= h
        num = (np.sum(g_out * lbs_transform(x, w, Tp)) - np.sum(g_out * lbs_transform(x, w, Tm))) / (2 * h)
        assert gT[b, i, j] == pytest.approx(num, rel=1e-6, abs=1e-9)


def test_point_on_bone_gets_full_weight():
    w = assign_skinning_weights(np.array([[1.5, 0, 0]]), chain(), k=1)
    assert w.indices[0, 0] == 1 and w.weights[0, 0] == 1.0


def test_equidistant_point_splits_evenly():
    skel = Skeleton([Bone("a", -1, np.eye(4), tail=np.array([0, 1.0, 0])),
                     Bone("b", 0, translation((2.0, 0, 0)), tail=np.array([0, 1.0, 0]))])
    w = assign_skinning_weights(np.array([[1.0, 0.5, 0]]), skel, k=2)
    np.testing.assert_allclose(w.weights[0], [0.5, 0.5], atol=1e-15)


@given(st.integers(0, 10_000), st.integers(1, 6), st.floats(0.1, 500))
def test_weights_normalized_and_nonnegative(seed, k, sharpness):
    rng = np.random.default_rng(seed)
    skel = random_rig(rng)
    w = assign_skinning_weights(rng.normal(0, 3, size=(20, 3)), skel, k=k, sharpness=sharpness)
    assert np.all(w.weights >= 0)
    np.testing.assert_allclose(w.weights.sum(axis=1), 1.0, atol=1e-12)


@given(st.integers(0, 10_000))
def test_global_rigid_motion_equivariance(seed):
    rng = np.random.default_rng(seed)
    skel = random_rig(rng)
    T = forward_kinematics(skel, random_pose(rng, len(skel)))
    x = rng.normal(size=(10, 3))
    w = assign_skinning_weights(x, skel, sharpness=1.0)
    G = rigid(_rand_rot(rng), rng.normal(size=3))
    lhs = lbs_transform(x, w, G @ T)
    rhs = lbs_transform(x, w, T) @ G[:3, :3].T + G[:3, 3]
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


@given(st.integers(0, 10_000))
def test_lbs_result_in_convex_hull(seed):
    rng = np.random.default_rng(seed)
    skel = random_rig(rng, 3)
    T = forward_kinematics(skel, random_pose(rng, 3))
    x = rng.normal(size=(1, 3))
    w = assign_skinning_weights(x, skel, k=3, sharpness=1.0)
    pts = np.einsum("bij,j->bi", T[w.indices[0], :3, :3], x[0]) + T[w.indices[0], :3, 3]
    out = lbs_transform(x, w, T)[0]
    # barycentric reconstruction with the skinning weights
    np.testing.assert_allclose(out, w.weights[0] @ pts, atol=1e-12)
    assert np.all(out <= pts.max(axis=0) + 1e-12) and np.all(out >= pts.min(axis=0) - 1e-12)
