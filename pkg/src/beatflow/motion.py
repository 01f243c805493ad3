"""Canonicalized incremental motion frames over a skeletal character.

A pose stream is encoded one transition at a time into a (8 + 12K)-D
feature vector: root planar velocity in the previous heading frame, a 6-D
root rotation increment, and heading-frame joint positions/velocities plus
parent-relative 6-D joint rotations for the current pose.  The encoding is
invariant to world yaw and horizontal translation, and decoding integrates
the root state frame by frame then runs forward kinematics, so it is
streaming-safe.

Conventions:
  - ground plane is y=0, up is +y; "XZ" is the horizontal plane
  - velocities are meters per frame at the stream rate (30 Hz), not m/s
  - heading = yaw-only part of the root orientation (forward axis = +z
    column projected to XZ); the root slot of the joint-rotation block
    stores the heading-relative tilt, so decoded orientation is
    yaw(integrated) composed with the per-frame tilt
  - 6-D rotation = first two columns of the matrix, Gram-Schmidt on decode
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# ---------------------------------------------------------------------------
# skeletons


@dataclass(frozen=True)
class Skeleton:
    """Joint tree: parents topologically sorted, rest offsets in meters."""

    name: str
    parents: tuple[int, ...]
    offsets: np.ndarray = field(repr=False)  # (K, 3) parent-frame rest offsets
    joint_names: tuple[str, ...]
    foot_indices: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "offsets", np.asarray(self.offsets, dtype=np.float64))
        if self.parents[0] != -1 or any(p < 0 for p in self.parents[1:]):
            raise ValueError("exactly one root with parent -1, first in order")
        if any(p >= k for k, p in enumerate(self.parents)):
            raise ValueError("parents must be topologically sorted (parent < joint)")
        if self.offsets.shape != (self.n_joints, 3):
            raise ValueError(f"offsets shape {self.offsets.shape} != ({self.n_joints}, 3)")
        if len(self.joint_names) != self.n_joints:
            raise ValueError("joint_names length mismatch")
        if any(i < 0 or i >= self.n_joints for i in self.foot_indices):
            raise ValueError("foot index out of range")

    @property
    def n_joints(self) -> int:
        return len(self.parents)

    @property
    def frame_dim(self) -> int:
        return 8 + 12 * self.n_joints

    def rest_root_height(self) -> float:
        pos = forward_kinematics(self, np.zeros(3), np.broadcast_to(np.eye(3), (self.n_joints, 3, 3)))
        return float(-pos[:, 1].min())

    def rest_pose(self, root_pos: np.ndarray | None = None) -> "GlobalPose":
        if root_pos is None:
            root_pos = np.array([0.0, self.rest_root_height(), 0.0])
        rots = np.broadcast_to(np.eye(3), (self.n_joints, 3, 3)).copy()
        return GlobalPose.from_rotations(self, np.asarray(root_pos, dtype=np.float64), rots)


TOY5 = Skeleton(
    name="toy5",
    parents=(-1, 0, 1, 1, 0),
    offsets=np.array(
        [
            [0.0, 0.0, 0.0],
            [0.0, 0.35, 0.0],   # chest
            [0.0, 0.35, 0.0],   # head (child of chest)
            [0.0, -0.25, 0.0],  # arm hanging from the chest
            [0.0, -0.9, 0.0],   # foot
        ]
    ),
    joint_names=("root", "chest", "head", "arm", "foot"),
    foot_indices=(4,),
)

SMPL22 = Skeleton(
    name="smpl22",
    parents=(-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19),
    offsets=np.array(
        [
            [0.0, 0.0, 0.0],      # pelvis
            [0.09, -0.09, 0.0],   # left_hip
            [-0.09, -0.09, 0.0],  # right_hip
            [0.0, 0.11, 0.0],     # spine1
            [0.0, -0.38, 0.0],    # left_knee
            [0.0, -0.38, 0.0],    # right_knee
            [0.0, 0.14, 0.0],     # spine2
            [0.0, -0.40, 0.0],    # left_ankle
            [0.0, -0.40, 0.0],    # right_ankle
            [0.0, 0.06, 0.0],     # spine3
            [0.0, -0.06, 0.13],   # left_foot
            [0.0, -0.06, 0.13],   # right_foot
            [0.0, 0.22, 0.0],     # neck
            [0.08, 0.12, 0.0],    # left_collar
            [-0.08, 0.12, 0.0],   # right_collar
            [0.0, 0.09, 0.0],     # head
            [0.10, 0.04, 0.0],    # left_shoulder
            [-0.10, 0.04, 0.0],   # right_shoulder
            [0.26, 0.0, 0.0],     # left_elbow
            [-0.26, 0.0, 0.0],    # right_elbow
            [0.25, 0.0, 0.0],     # left_wrist
            [-0.25, 0.0, 0.0],    # right_wrist
        ]
    ),
    joint_names=(
        "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee",
        "spine2", "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot",
        "neck", "left_collar", "right_collar", "head", "left_shoulder",
        "right_shoulder", "left_elbow", "right_elbow", "left_wrist", "right_wrist",
    ),
    foot_indices=(7, 8, 10, 11),
)

SKELETONS = {s.name: s for s in (TOY5, SMPL22)}


# ---------------------------------------------------------------------------
# rotations


def rot6d_to_matrix(r6: np.ndarray) -> np.ndarray:
    """Gram-Schmidt two 3-vectors into a right-handed rotation matrix.

    Accepts (..., 6), returns (..., 3, 3) with the orthonormalized vectors
    as the first two columns and their cross product as the third.
    """
    r6 = np.asarray(r6, dtype=np.float64)
    if r6.shape[-1] != 6:
        raise ValueError(f"expected trailing dim 6, got {r6.shape}")
    a1, a2 = r6[..., :3], r6[..., 3:]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    if np.any(n1 < 1e-8):
        raise ValueError("degenerate 6-D rotation: first vector near zero")
    b1 = a1 / n1
    u2 = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    n2 = np.linalg.norm(u2, axis=-1, keepdims=True)
    if np.any(n2 < 1e-8):
        raise ValueError("degenerate 6-D rotation: vectors near parallel")
    b2 = u2 / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def matrix_to_rot6d(rot: np.ndarray) -> np.ndarray:
    """First two columns of (..., 3, 3), flattened to (..., 6)."""
    rot = np.asarray(rot, dtype=np.float64)
    if rot.shape[-2:] != (3, 3):
        raise ValueError(f"expected trailing (3, 3), got {rot.shape}")
    return np.concatenate([rot[..., :, 0], rot[..., :, 1]], axis=-1)


def heading_angle(rot: np.ndarray) -> np.ndarray:
    """Yaw of the forward (+z column) axis projected to the ground plane.

    Falls back to the up (+y) column when forward points straight up/down.
    Accepts (..., 3, 3), returns (...) radians.
    """
    rot = np.asarray(rot, dtype=np.float64)
    fwd = rot[..., :, 2]
    fx, fz = fwd[..., 0], fwd[..., 2]
    degenerate = np.hypot(fx, fz) < 1e-6
    if np.any(degenerate):
        up = rot[..., :, 1]
        fx = np.where(degenerate, up[..., 0], fx)
        fz = np.where(degenerate, up[..., 2], fz)
    return np.arctan2(fx, fz)


def yaw_matrix(theta) -> np.ndarray:
    """Rotation about +y by theta; accepts scalars or arrays (...,)."""
    theta = np.asarray(theta, dtype=np.float64)
    c, s = np.cos(theta), np.sin(theta)
    zero, one = np.zeros_like(c), np.ones_like(c)
    rows = [
        np.stack([c, zero, s], axis=-1),
        np.stack([zero, one, zero], axis=-1),
        np.stack([-s, zero, c], axis=-1),
    ]
    return np.stack(rows, axis=-2)


def heading_matrix(rot: np.ndarray) -> np.ndarray:
    return yaw_matrix(heading_angle(rot))


# ---------------------------------------------------------------------------
# forward kinematics


def forward_kinematics(skeleton: Skeleton, root_pos: np.ndarray, local_rots: np.ndarray) -> np.ndarray:
    """World joint positions from parent-chain composition.

    local_rots is (K, 3, 3) or batched (N, K, 3, 3) with slot 0 holding the
    root's world orientation.  Returns (K, 3) or (N, K, 3) respectively.
    """
    local_rots = np.asarray(local_rots, dtype=np.float64)
    root_pos = np.asarray(root_pos, dtype=np.float64)
    single = local_rots.ndim == 3
    if single:
        local_rots = local_rots[None]
        root_pos = root_pos[None]
    N, K = local_rots.shape[:2]
    if K != skeleton.n_joints:
        raise ValueError(f"rotation count {K} != {skeleton.n_joints} joints")
    pos, _ = _fk_with_rots(skeleton, root_pos, local_rots)
    return pos[0] if single else pos


def _fk_with_rots(skeleton: Skeleton, root_pos: np.ndarray, local_rots: np.ndarray):
    """FK returning both world positions and world rotations (batched)."""
    local_rots = np.asarray(local_rots, dtype=np.float64)
    root_pos = np.asarray(root_pos, dtype=np.float64)
    N, K = local_rots.shape[:2]
    world_rot = np.empty((N, K, 3, 3))
    world_pos = np.empty((N, K, 3))
    world_rot[:, 0] = local_rots[:, 0]
    world_pos[:, 0] = root_pos
    for k in range(1, K):
        p = skeleton.parents[k]
        world_rot[:, k] = world_rot[:, p] @ local_rots[:, k]
        world_pos[:, k] = world_pos[:, p] + np.einsum("nij,j->ni", world_rot[:, p], skeleton.offsets[k])
    return world_pos, world_rot


# ---------------------------------------------------------------------------
# poses


@dataclass
class GlobalPose:
    """World-frame pose: FK-consistent positions plus the local rotations.

    joint_rots[0] is the root's world orientation; joint_rots[k>0] are
    parent-relative.
    """

    skeleton: Skeleton
    root_pos: np.ndarray  # (3,)
    joint_rots: np.ndarray  # (K, 3, 3)
    joint_pos: np.ndarray  # (K, 3) world

    @classmethod
    def from_rotations(cls, skeleton: Skeleton, root_pos: np.ndarray, joint_rots: np.ndarray) -> "GlobalPose":
        root_pos = np.asarray(root_pos, dtype=np.float64)
        joint_rots = np.asarray(joint_rots, dtype=np.float64)
        pos = forward_kinematics(skeleton, root_pos, joint_rots)
        return cls(skeleton, root_pos, joint_rots, pos)

    def validate(self, tol: float = 1e-6):
        pos = forward_kinematics(self.skeleton, self.root_pos, self.joint_rots)
        err = float(np.abs(pos - self.joint_pos).max())
        if err > tol:
            raise ValueError(f"joint positions inconsistent with FK by {err:.2e} m")


# ---------------------------------------------------------------------------
# frame layout


class FrameLayout:
    """Index slices of the flat (8 + 12K)-D motion frame."""

    def __init__(self, n_joints: int):
        K = n_joints
        self.n_joints = K
        self.dim = 8 + 12 * K
        self.root_vel = slice(0, 2)
        self.root_ang = slice(2, 8)
        self.pos = slice(8, 8 + 3 * K)
        self.vel = slice(8 + 3 * K, 8 + 6 * K)
        self.rot = slice(8 + 6 * K, 8 + 12 * K)

    def joint_pos(self, frames: np.ndarray) -> np.ndarray:
        """(..., D) -> (..., K, 3) heading-frame joint positions."""
        return frames[..., self.pos].reshape(*frames.shape[:-1], self.n_joints, 3)

    def joint_vel(self, frames: np.ndarray) -> np.ndarray:
        return frames[..., self.vel].reshape(*frames.shape[:-1], self.n_joints, 3)

    def joint_rot6d(self, frames: np.ndarray) -> np.ndarray:
        return frames[..., self.rot].reshape(*frames.shape[:-1], self.n_joints, 6)


# ---------------------------------------------------------------------------
# encode


def encode_frame(prev: GlobalPose, curr: GlobalPose) -> np.ndarray:
    """One transition prev -> curr as a flat (8 + 12K)-D feature vector."""
    if prev.skeleton.name != curr.skeleton.name:
        raise ValueError(f"skeleton mismatch: {prev.skeleton.name} vs {curr.skeleton.name}")
    return encode_trajectory(
        prev.skeleton,
        np.stack([prev.root_pos, curr.root_pos]),
        np.stack([prev.joint_rots, curr.joint_rots]),
    )[0]


def encode_trajectory(skeleton: Skeleton, root_pos: np.ndarray, joint_rots: np.ndarray) -> np.ndarray:
    """Encode N poses into N-1 transition frames (vectorized over time).

    root_pos: (N, 3); joint_rots: (N, K, 3, 3) with slot 0 = root world
    orientation.  Frame i describes the transition pose[i] -> pose[i+1].
    """
    root_pos = np.asarray(root_pos, dtype=np.float64)
    joint_rots = np.asarray(joint_rots, dtype=np.float64)
    N, K = joint_rots.shape[:2]
    if N < 2:
        raise ValueError("need at least two poses")
    if K != skeleton.n_joints:
        raise ValueError(f"rotation count {K} != {skeleton.n_joints} joints")
    lay = FrameLayout(K)
    world_pos, _ = _fk_with_rots(skeleton, root_pos, joint_rots)

    root_rot = joint_rots[:, 0]
    h_prev = heading_matrix(root_rot[:-1])          # (N-1, 3, 3)
    h_curr = heading_matrix(root_rot[1:])

    out = np.empty((N - 1, lay.dim))
    # root planar velocity in the previous heading frame
    d_world = root_pos[1:] - root_pos[:-1]
    d_local = np.einsum("nij,nj->ni", h_prev.transpose(0, 2, 1), d_world)
    out[:, lay.root_vel] = d_local[:, [0, 2]]
    # root rotation increment
    rel = root_rot[:-1].transpose(0, 2, 1) @ root_rot[1:]
    out[:, lay.root_ang] = matrix_to_rot6d(rel)
    # heading-frame joint positions relative to the grounded root anchor
    anchor = root_pos[1:].copy()
    anchor[:, 1] = 0.0
    rel_pos = world_pos[1:] - anchor[:, None, :]
    out[:, lay.pos] = np.einsum("nij,nkj->nki", h_curr.transpose(0, 2, 1), rel_pos).reshape(N - 1, 3 * K)
    # heading-frame joint velocities
    d_joints = world_pos[1:] - world_pos[:-1]
    out[:, lay.vel] = np.einsum("nij,nkj->nki", h_curr.transpose(0, 2, 1), d_joints).reshape(N - 1, 3 * K)
    # joint rotations: root slot stores heading-relative tilt
    rot_block = joint_rots[1:].copy()
    rot_block[:, 0] = h_curr.transpose(0, 2, 1) @ root_rot[1:]
    out[:, lay.rot] = matrix_to_rot6d(rot_block).reshape(N - 1, 6 * K)
    return out


# ---------------------------------------------------------------------------
# decode


class MotionDecoder:
    """Streaming frame-to-pose integrator.

    Holds the running root state (planar position + orientation).  Each
    step consumes one motion frame and emits an FK-consistent GlobalPose;
    decoding N frames then M more equals decoding N+M at once.
    """

    def __init__(self, skeleton: Skeleton, init: GlobalPose):
        if init.skeleton.name != skeleton.name:
            raise ValueError("init pose skeleton mismatch")
        self.skeleton = skeleton
        self.layout = FrameLayout(skeleton.n_joints)
        self._root_xz = np.array([init.root_pos[0], init.root_pos[2]], dtype=np.float64)
        self._root_rot = np.asarray(init.joint_rots[0], dtype=np.float64).copy()

    def step(self, frame: np.ndarray) -> GlobalPose:
        frame = np.asarray(frame, dtype=np.float64)
        if frame.shape != (self.layout.dim,):
            raise ValueError(f"frame shape {frame.shape} != ({self.layout.dim},)")
        if not np.all(np.isfinite(frame)):
            raise ValueError("non-finite motion frame")
        lay = self.layout
        # integrate planar root motion in the previous heading frame
        vx, vz = frame[lay.root_vel]
        h_prev = heading_matrix(self._root_rot)
        d_world = h_prev @ np.array([vx, 0.0, vz])
        root_xz = self._root_xz + d_world[[0, 2]]
        # integrate orientation, then re-anchor the per-frame tilt on its yaw
        r_int = self._root_rot @ rot6d_to_matrix(frame[lay.root_ang])
        h_curr = heading_matrix(r_int)
        rot6 = lay.joint_rot6d(frame)
        local_rots = rot6d_to_matrix(rot6)
        root_rot = h_curr @ local_rots[0]
        local_rots[0] = root_rot
        height = lay.joint_pos(frame)[0, 1]
        root_pos = np.array([root_xz[0], height, root_xz[1]])
        pose = GlobalPose.from_rotations(self.skeleton, root_pos, local_rots)
        # commit state only after everything validated
        self._root_xz = root_xz
        self._root_rot = root_rot
        return pose


def decode_stream(frames: np.ndarray, init: GlobalPose) -> list[GlobalPose]:
    dec = MotionDecoder(init.skeleton, init)
    return [dec.step(f) for f in np.asarray(frames, dtype=np.float64)]


def decode_positions(frames: np.ndarray, init: GlobalPose) -> np.ndarray:
    """(N, D) frames -> (N, K, 3) world joint positions."""
    return np.stack([p.joint_pos for p in decode_stream(frames, init)])


# ---------------------------------------------------------------------------
# motion files

MOTION_MAGIC = b"BFMOT001"


def save_motion(path: str | Path, frames: np.ndarray, skeleton: Skeleton, fps: float):
    """Write frames as CSV (.csv) or binary (.bfm), chosen by extension."""
    path = Path(path)
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != skeleton.frame_dim:
        raise ValueError(f"frames shape {frames.shape} != (N, {skeleton.frame_dim})")
    if path.suffix == ".csv":
        header = f"skeleton={skeleton.name} fps={fps:g} frames={frames.shape[0]} dim={frames.shape[1]}"
        np.savetxt(path, frames, fmt="%.17g", delimiter=",", header=header)
    elif path.suffix == ".bfm":
        meta = {
            "skeleton": skeleton.name,
            "fps": fps,
            "frames": int(frames.shape[0]),
            "dim": int(frames.shape[1]),
        }
        blob = json.dumps(meta).encode("utf-8")
        with open(path, "wb") as f:
            f.write(MOTION_MAGIC)
            f.write(struct.pack("<I", len(blob)))
            f.write(blob)
            f.write(np.ascontiguousarray(frames, dtype="<f8").tobytes())
    else:
        raise ValueError(f"unknown motion extension {path.suffix!r} (use .csv or .bfm)")


def load_motion(path: str | Path) -> tuple[np.ndarray, Skeleton, float]:
    path = Path(path)
    if path.suffix == ".csv":
        with open(path) as f:
            header = f.readline()
        if not header.startswith("# skeleton="):
            raise ValueError(f"{path}: missing motion CSV header")
        fields = dict(kv.split("=") for kv in header[2:].split())
        frames = np.loadtxt(path, delimiter=",", ndmin=2)
        skeleton = SKELETONS[fields["skeleton"]]
        expect = (int(fields["frames"]), int(fields["dim"]))
        if frames.shape != expect:
            raise ValueError(f"{path}: data shape {frames.shape} != header {expect}")
        return frames, skeleton, float(fields["fps"])
    if path.suffix == ".bfm":
        raw = path.read_bytes()
        if raw[:8] != MOTION_MAGIC:
            raise ValueError(f"{path}: not a motion file (bad magic)")
        (hlen,) = struct.unpack("<I", raw[8:12])
        meta = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
        frames = np.frombuffer(raw, dtype="<f8", offset=12 + hlen).reshape(meta["frames"], meta["dim"]).copy()
        return frames, SKELETONS[meta["skeleton"]], float(meta["fps"])
    raise ValueError(f"unknown motion extension {path.suffix!r}")
