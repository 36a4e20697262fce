import numpy as np
import pytest

from slicesplat.core import (
    GaussianSet,
    PsfSpec,
    SlicePose,
    VolumeGrid,
    checkpoint_bytes,
    covariance_from_scale_rotation,
    quat_to_rotation,
    read_checkpoint,
    regularized_inverse,
    world_to_camera,
)
from slicesplat.errors import InvalidArgumentError, VolumeLoadError

from conftest import random_quat, random_set


def random_rotation(rng):
    return quat_to_rotation(random_quat(rng))


def test_identity_quaternion():
    assert np.array_equal(quat_to_rotation([1, 0, 0, 0]), np.eye(3))


def test_half_turn_about_z():
    R = quat_to_rotation([0, 0, 0, 1])
    np.testing.assert_allclose(R, np.diag([-1.0, -1.0, 1.0]), atol=1e-15)


def test_rotation_is_orthonormal(rng):
    for _ in range(100):
        R = quat_to_rotation(random_quat(rng))
        np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)


def test_double_cover_exact(rng):
    for _ in range(20):
        q = rng.normal(size=4)
        assert np.array_equal(quat_to_rotation(q), quat_to_rotation(-q))


def test_zero_quaternion_rejected():
    with pytest.raises(InvalidArgumentError):
        quat_to_rotation([0, 0, 0, 0])


def test_covariance_examples(rng):
    np.testing.assert_allclose(covariance_from_scale_rotation([1, 2, 3], [1, 0, 0, 0]), np.diag([1.0, 4, 9]))
    S = covariance_from_scale_rotation([1, 1, 1], random_quat(rng), mod=2)
    np.testing.assert_allclose(S, 4 * np.eye(3), atol=1e-12)


def test_covariance_matches_matrix_product(rng):
    for _ in range(50):
        s = rng.uniform(0.1, 5, 3)
        q = random_quat(rng)
        mod = rng.uniform(0.5, 2)
        R = quat_to_rotation(q)
        M = R @ np.diag(mod * s) @ np.diag(mod * s).T @ R.T
        S = covariance_from_scale_rotation(s, q, mod)
        assert np.max(np.abs(S - M)) / np.max(np.abs(M)) < 1e-12
        np.testing.assert_allclose(S, S.T, atol=1e-12)
        assert np.linalg.eigvalsh(S).min() > 0
        np.testing.assert_allclose(np.sort(np.linalg.eigvalsh(S)), np.sort((mod * s) ** 2), rtol=1e-10)


@pytest.mark.parametrize("scale", [[1, 0, 1], [1, -1, 1], [np.nan, 1, 1]])
def test_nonpositive_scale_rejected(scale):
    with pytest.raises(InvalidArgumentError):
        covariance_from_scale_rotation(scale, [1, 0, 0, 0])


def test_world_to_camera_examples():
    S = np.diag([1.0, 2, 3])
    mu = np.array([1.0, 2, 3])
    mu_c, S_c = world_to_camera(mu, S, SlicePose.identity(4, 4))
    assert np.array_equal(mu_c, mu) and np.array_equal(S_c, S)
    pose = SlicePose(np.eye(3), [0, 0, 5], 4, 4)
    mu_c, _ = world_to_camera([0, 0, -5], S, pose)
    assert np.array_equal(mu_c, np.zeros(3))


def test_world_to_camera_preserves_spectrum_and_inverts(rng):
    for _ in range(50):
        pose = SlicePose(random_rotation(rng), rng.normal(size=3) * 10, 8, 8)
        S = covariance_from_scale_rotation(rng.uniform(0.2, 4, 3), random_quat(rng))
        mu = rng.normal(size=3) * 5
        mu_c, S_c = world_to_camera(mu, S, pose)
        np.testing.assert_allclose(np.linalg.eigvalsh(S_c), np.linalg.eigvalsh(S), rtol=1e-10)
        mu_back, S_back = pose.inverse_transform(mu_c, S_c)
        np.testing.assert_allclose(mu_back, mu, atol=1e-10)
        np.testing.assert_allclose(S_back, S, atol=1e-10)


def test_regularized_inverse_floor():
    S = np.diag([1.0, 1.0, 1e-14])
    P = regularized_inverse(S)
    eps = 1e-9 * np.trace(S) / 3
    np.testing.assert_allclose(P, np.linalg.inv(S + eps * np.eye(3)))
    good = np.diag([1.0, 2.0, 3.0])
    assert np.array_equal(regularized_inverse(good), np.linalg.inv(good))


def test_pose_validation():
    with pytest.raises(InvalidArgumentError):
        SlicePose(np.diag([1.0, 1, -1]), np.zeros(3), 4, 4)
    with pytest.raises(InvalidArgumentError):
        SlicePose.identity(0, 4)
    with pytest.raises(InvalidArgumentError):
        SlicePose.identity(4, 4, pixel_spacing=(1.0, 0.0))


@pytest.mark.parametrize("bad", [0.0, -1.0, np.inf, np.nan])
def test_psf_validation(bad):
    with pytest.raises(InvalidArgumentError):
        PsfSpec(1.0, 1.0, bad)


def test_set_exposes_activated_parameters(rng):
    gs = random_set(rng, 50)
    assert np.all(gs.scale > 0)
    assert np.all((gs.alpha >= 0) & (gs.alpha <= 1))
    np.testing.assert_allclose(np.linalg.norm(gs.unit_quat, axis=1), 1.0)
    gs.quat *= 3.0
    np.testing.assert_allclose(np.linalg.norm(gs[0].quat), 1.0)


def test_positions_clamped_into_bbox():
    gs = GaussianSet.from_exposed([[5.0, -5.0, 0.5]], [[1, 1, 1]], [[1, 0, 0, 0]], [0.5], [[0, 0, 0], [1, 1, 1]])
    assert np.array_equal(gs.mu, [[1.0, 0.0, 0.5]])
    gs.mu[0] = [2, 2, 2]
    gs.clamp()
    assert np.array_equal(gs.mu, [[1.0, 1.0, 1.0]])


def test_degenerate_bbox_rejected():
    with pytest.raises(InvalidArgumentError):
        GaussianSet.empty([[0, 0, 0], [1, 0, 1]])


def test_checkpoint_roundtrip(rng):
    gs = random_set(rng, 37)
    blob = checkpoint_bytes(gs)
    assert blob[:5] == b"GPILE"
    assert len(blob) == 65 + 37 * 44
    back = read_checkpoint(blob)
    assert np.array_equal(back.flat_params(), gs.flat_params().astype(np.float32))
    assert np.array_equal(back.bbox, gs.bbox)


def test_checkpoint_errors(rng):
    blob = checkpoint_bytes(random_set(rng, 3))
    with pytest.raises(VolumeLoadError):
        read_checkpoint(blob[:-1])
    with pytest.raises(VolumeLoadError):
        read_checkpoint(b"XPILE" + blob[5:])
    with pytest.raises(VolumeLoadError):
        read_checkpoint(blob[:10])


def test_slice_pose_convention():
    vol = VolumeGrid(np.zeros((5, 4, 3)), spacing=(0.5, 0.5, 2.0), origin=(1.0, 2.0, 3.0))
    assert vol.dims == (3, 4, 5)
    pose = vol.slice_pose(2)
    np.testing.assert_allclose(pose.translation, [-1.0, -2.0, -7.0])
    assert (pose.width, pose.height) == (3, 4)
    # voxel (1, 3, 2) sits at camera (0.5, 1.5, 0)
    mu_c, _ = world_to_camera([1.5, 3.5, 7.0], np.eye(3), pose)
    np.testing.assert_allclose(mu_c, [0.5, 1.5, 0.0])
    np.testing.assert_allclose(pose.pixel_to_camera(1, 3), (0.5, 1.5))
    with pytest.raises(InvalidArgumentError):
        vol.slice_pose(5)


def test_volume_validate():
    VolumeGrid(np.full((2, 2, 2), 0.5)).validate()
    with pytest.raises(VolumeLoadError):
        VolumeGrid(np.full((2, 2, 2), 1.5)).validate()
    with pytest.raises(VolumeLoadError):
        VolumeGrid(np.full((2, 2, 2), np.nan)).validate()
