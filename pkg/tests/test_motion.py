"""Motion representation: rotations, FK, encode/decode round trips, file IO."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from beatflow.motion import (
    SKELETONS,
    SMPL22,
    TOY5,
    FrameLayout,
    GlobalPose,
    MotionDecoder,
    Skeleton,
    decode_positions,
    decode_stream,
    encode_frame,
    encode_trajectory,
    forward_kinematics,
    heading_angle,
    load_motion,
    matrix_to_rot6d,
    rot6d_to_matrix,
    save_motion,
    yaw_matrix,
)


def _random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def _wiggle_trajectory(skel: Skeleton, n: int, seed: int, step_scale=0.05):
    """Smooth random trajectory: small joint-angle wiggles plus root drift."""
    rng = np.random.default_rng(seed)
    K = skel.n_joints
    angles = np.cumsum(rng.normal(scale=step_scale, size=(n, K, 3)), axis=0)
    rots = np.empty((n, K, 3, 3))
    for i in range(n):
        for k in range(K):
            ax, ay, az = angles[i, k]
            rots[i, k] = yaw_matrix(ay) @ _rot_x(ax) @ _rot_z(az)
    root = np.cumsum(rng.normal(scale=0.02, size=(n, 3)), axis=0)
    root[:, 1] = skel.rest_root_height() + 0.05 * np.sin(np.linspace(0, 4, n))
    return root, rots


def _rot_x(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


class TestRot6d:
    def test_identity(self):
        assert np.allclose(rot6d_to_matrix(np.array([1, 0, 0, 0, 1, 0.0])), np.eye(3))

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10**6))
    def test_orthonormal(self, seed):
        r6 = np.random.default_rng(seed).normal(size=6)
        r = rot6d_to_matrix(r6)
        assert np.allclose(r.T @ r, np.eye(3), atol=1e-9)
        assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-9)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10**6))
    def test_round_trip_fixed_point(self, seed):
        rot = _random_rotation(np.random.default_rng(seed))
        again = rot6d_to_matrix(matrix_to_rot6d(rot))
        assert np.allclose(again, rot, atol=1e-12)

    def test_degenerate_rejected(self):
        with pytest.raises(ValueError):
            rot6d_to_matrix(np.zeros(6))
        with pytest.raises(ValueError):
            rot6d_to_matrix(np.array([1, 0, 0, 2, 0, 0.0]))

    def test_batched(self):
        rng = np.random.default_rng(0)
        rots = np.stack([_random_rotation(rng) for _ in range(7)]).reshape(7, 3, 3)
        r6 = matrix_to_rot6d(rots)
        assert r6.shape == (7, 6)
        assert np.allclose(rot6d_to_matrix(r6), rots, atol=1e-12)


class TestHeading:
    def test_yaw_matrix_round_trip(self):
        for theta in (-2.5, -0.3, 0.0, 1.1, 3.0):
            assert heading_angle(yaw_matrix(theta)) == pytest.approx(theta, abs=1e-12)

    def test_tilt_has_zero_heading(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            rot = _random_rotation(rng)
            h = yaw_matrix(heading_angle(rot))
            tilt = h.T @ rot
            assert abs(heading_angle(tilt)) < 1e-9


class TestForwardKinematics:
    def test_identity_accumulates_offsets(self):
        eye = np.broadcast_to(np.eye(3), (5, 3, 3))
        pos = forward_kinematics(TOY5, np.zeros(3), eye)
        assert np.allclose(pos[0], [0, 0, 0])
        assert np.allclose(pos[2], [0, 0.7, 0])  # chest + head offsets chain
        assert np.allclose(pos[3], [0, 0.1, 0])
        assert np.allclose(pos[4], [0, -0.9, 0])

    def test_root_rotation_equivariance(self):
        rng = np.random.default_rng(1)
        rots = np.stack([np.eye(3)] + [_random_rotation(rng) for _ in range(4)])
        pos_id = forward_kinematics(TOY5, np.zeros(3), rots)
        r = _random_rotation(rng)
        rots_rot = rots.copy()
        rots_rot[0] = r @ rots[0]
        pos_rot = forward_kinematics(TOY5, np.zeros(3), rots_rot)
        assert np.allclose(pos_rot, pos_id @ r.T, atol=1e-12)

    def test_three_joint_analytic_chain(self):
        # unit offsets along +x, middle joint rotated 90 degrees about +z:
        # j0 at origin, j1 at (1,0,0), elbow bends so j2 lands at (1,1,0)
        chain = Skeleton(
            name="chain3",
            parents=(-1, 0, 1),
            offsets=np.array([[0, 0, 0], [1, 0, 0], [1, 0, 0.0]]),
            joint_names=("a", "b", "c"),
            foot_indices=(),
        )
        rots = np.stack([np.eye(3), _rot_z(np.pi / 2), np.eye(3)])
        pos = forward_kinematics(chain, np.zeros(3), rots)
        assert np.allclose(pos[2], [1, 1, 0], atol=1e-12)

    def test_continuity_in_rotations(self):
        rng = np.random.default_rng(2)
        rots = np.stack([_random_rotation(rng) for _ in range(5)])
        base = forward_kinematics(TOY5, np.zeros(3), rots)
        bumped = rots.copy()
        bumped[2] = bumped[2] @ _rot_x(1e-7)
        moved = forward_kinematics(TOY5, np.zeros(3), bumped)
        assert np.abs(moved - base).max() < 1e-5

    def test_wrong_joint_count(self):
        with pytest.raises(ValueError):
            forward_kinematics(TOY5, np.zeros(3), np.broadcast_to(np.eye(3), (4, 3, 3)))


class TestDimensionIdentity:
    def test_smpl22_is_272(self):
        assert SMPL22.frame_dim == 272 and SMPL22.n_joints == 22

    def test_toy5_is_68(self):
        assert TOY5.frame_dim == 68 and TOY5.n_joints == 5

    def test_layout_partitions_frame(self):
        lay = FrameLayout(5)
        assert lay.dim == 68
        covered = sum(s.stop - s.start for s in (lay.root_vel, lay.root_ang, lay.pos, lay.vel, lay.rot))
        assert covered == lay.dim


class TestEncodeFrame:
    def test_stationary(self):
        pose = TOY5.rest_pose()
        f = encode_frame(pose, pose)
        lay = FrameLayout(5)
        assert np.allclose(f[lay.root_vel], 0)
        assert np.allclose(f[lay.vel], 0)
        assert np.allclose(rot6d_to_matrix(f[lay.root_ang]), np.eye(3), atol=1e-12)
        # rest joint positions in the heading frame, anchored at the ground
        expect = forward_kinematics(TOY5, pose.root_pos, pose.joint_rots)
        assert np.allclose(lay.joint_pos(f), expect, atol=1e-12)

    def test_pure_x_translation(self):
        prev = TOY5.rest_pose()
        curr = TOY5.rest_pose(root_pos=prev.root_pos + np.array([0.07, 0, 0]))
        f = encode_frame(prev, curr)
        lay = FrameLayout(5)
        assert np.allclose(f[lay.root_vel], [0.07, 0.0], atol=1e-12)

    def test_skeleton_mismatch_rejected(self):
        with pytest.raises(ValueError):
            encode_frame(TOY5.rest_pose(), SMPL22.rest_pose())

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10**6))
    def test_yaw_translation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        root, rots = _wiggle_trajectory(TOY5, 4, seed)
        frames = encode_trajectory(TOY5, root, rots)
        phi = rng.uniform(-np.pi, np.pi)
        t = np.array([rng.uniform(-5, 5), 0.0, rng.uniform(-5, 5)])
        r = yaw_matrix(phi)
        root2 = root @ r.T + t
        rots2 = rots.copy()
        rots2[:, 0] = r @ rots[:, 0]
        frames2 = encode_trajectory(TOY5, root2, rots2)
        assert np.allclose(frames, frames2, atol=1e-9)

    def test_pairwise_matches_batched(self):
        root, rots = _wiggle_trajectory(TOY5, 6, seed=9)
        batched = encode_trajectory(TOY5, root, rots)
        poses = [GlobalPose.from_rotations(TOY5, root[i], rots[i]) for i in range(6)]
        pairwise = np.stack([encode_frame(poses[i], poses[i + 1]) for i in range(5)])
        assert np.allclose(batched, pairwise, atol=1e-12)


class TestDecode:
    def test_round_trip_300_frames(self):
        root, rots = _wiggle_trajectory(TOY5, 301, seed=4)
        frames = encode_trajectory(TOY5, root, rots)
        init = GlobalPose.from_rotations(TOY5, root[0], rots[0])
        true_pos, _ = np.stack(
            [forward_kinematics(TOY5, root[i], rots[i]) for i in range(301)]
        ), None
        decoded = decode_positions(frames, init)
        err = np.abs(decoded - true_pos[1:]).max()
        assert err <= 1e-4, f"max joint error {err:.2e} m"

    def test_round_trip_smpl22(self):
        root, rots = _wiggle_trajectory(SMPL22, 61, seed=5, step_scale=0.02)
        frames = encode_trajectory(SMPL22, root, rots)
        init = GlobalPose.from_rotations(SMPL22, root[0], rots[0])
        decoded = decode_positions(frames, init)
        true_pos = np.stack([forward_kinematics(SMPL22, root[i], rots[i]) for i in range(61)])
        assert np.abs(decoded - true_pos[1:]).max() <= 1e-4

    def test_zero_velocity_freezes(self):
        pose = TOY5.rest_pose()
        frames = np.tile(encode_frame(pose, pose), (10, 1))
        for out in decode_stream(frames, pose):
            assert np.allclose(out.joint_pos, pose.joint_pos, atol=1e-12)

    def test_prefix_stability(self):
        root, rots = _wiggle_trajectory(TOY5, 31, seed=6)
        frames = encode_trajectory(TOY5, root, rots)
        init = GlobalPose.from_rotations(TOY5, root[0], rots[0])
        full = decode_positions(frames, init)
        dec = MotionDecoder(TOY5, init)
        first = [dec.step(f) for f in frames[:13]]
        rest = [dec.step(f) for f in frames[13:]]
        split = np.stack([p.joint_pos for p in first + rest])
        assert np.array_equal(full, split)

    def test_nonfinite_frame_preserves_state(self):
        pose = TOY5.rest_pose()
        dec = MotionDecoder(TOY5, pose)
        good = encode_frame(pose, pose)
        out1 = dec.step(good)
        bad = good.copy()
        bad[3] = np.nan
        with pytest.raises(ValueError):
            dec.step(bad)
        out2 = dec.step(good)
        assert np.allclose(out1.joint_pos, out2.joint_pos, atol=1e-12)

    def test_decoded_pose_fk_consistent(self):
        root, rots = _wiggle_trajectory(TOY5, 11, seed=7)
        frames = encode_trajectory(TOY5, root, rots)
        init = GlobalPose.from_rotations(TOY5, root[0], rots[0])
        for pose in decode_stream(frames, init):
            pose.validate(tol=1e-6)


class TestMotionFiles:
    def _frames(self):
        root, rots = _wiggle_trajectory(TOY5, 21, seed=8)
        return encode_trajectory(TOY5, root, rots)

    @pytest.mark.parametrize("ext", [".csv", ".bfm"])
    def test_round_trip(self, tmp_path, ext):
        frames = self._frames()
        p = tmp_path / f"clip{ext}"
        save_motion(p, frames, TOY5, fps=30)
        loaded, skel, fps = load_motion(p)
        assert skel.name == "toy5" and fps == 30.0
        if ext == ".bfm":
            assert np.array_equal(loaded, frames)
        else:
            assert np.allclose(loaded, frames, rtol=0, atol=0)  # %.17g is exact for float64

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.bfm"
        p.write_bytes(b"garbagex" + b"\x00" * 16)
        with pytest.raises(ValueError):
            load_motion(p)

    def test_wrong_dim_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            save_motion(tmp_path / "x.csv", np.zeros((4, 10)), TOY5, fps=30)

    def test_registry(self):
        assert set(SKELETONS) == {"toy5", "smpl22"}
