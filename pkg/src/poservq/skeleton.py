"""Skeleton definition, forward kinematics and motion-sequence utilities.

Coordinates are meters, world frame, y up. The character faces +z in its
rest pose and its left side points to +x. Rest pose has arms hanging down.

Default bone table (offset of each joint from its parent)::

    joint        parent       offset (x, y, z)
    pelvis       -            root
    spine        pelvis       (0, 0.25, 0)
    neck         spine        (0, 0.25, 0)
    head         neck         (0, 0.15, 0)
    l_shoulder   neck         (+0.18, 0, 0)
    l_elbow      l_shoulder   (0, -0.28, 0)
    l_wrist      l_elbow      (0, -0.26, 0)
    r_*          mirror of l_* in x
    l_hip        pelvis       (+0.10, 0, 0)
    l_knee       l_hip        (0, -0.42, 0)
    l_ankle      l_knee       (0, -0.42, 0)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

GROUND_EPS = 0.05
"""Ankle height (m) below which a foot counts as touching the ground."""

DEFAULT_FPS = 20.0


@dataclass(frozen=True)
class SkeletonSpec:
    joints: tuple[str, ...]
    parents: tuple[int, ...]
    offsets: np.ndarray = field(compare=False)

    def __post_init__(self):
        offsets = np.asarray(self.offsets, dtype=np.float64)
        object.__setattr__(self, "offsets", offsets)
        n = len(self.joints)
        if len(self.parents) != n or offsets.shape != (n, 3):
            raise ValueError("joints, parents and offsets must describe the same joint count")
        if self.parents[0] != -1:
            raise ValueError("joint 0 must be the root (parent -1)")
        for j in range(1, n):
            if not 0 <= self.parents[j] < j:
                raise ValueError(f"parent of {self.joints[j]!r} must precede it")
            if np.linalg.norm(offsets[j]) <= 0:
                raise ValueError(f"bone ending at {self.joints[j]!r} has zero length")

    def __eq__(self, other):
        if not isinstance(other, SkeletonSpec):
            return NotImplemented
        return (
            self.joints == other.joints
            and self.parents == other.parents
            and np.array_equal(self.offsets, other.offsets)
        )

    def __hash__(self):
        return hash((self.joints, self.parents))

    @property
    def num_joints(self) -> int:
        return len(self.joints)

    @property
    def dim(self) -> int:
        return 3 * len(self.joints)

    def index(self, name: str) -> int:
        try:
            return self.joints.index(name)
        except ValueError:
            raise KeyError(f"unknown joint {name!r}") from None

    def bone_lengths(self) -> np.ndarray:
        return np.linalg.norm(self.offsets, axis=1)

    def to_dict(self) -> dict:
        return {
            "joints": list(self.joints),
            "parents": list(self.parents),
            "offsets": self.offsets.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SkeletonSpec":
        return cls(tuple(d["joints"]), tuple(int(p) for p in d["parents"]), np.asarray(d["offsets"], dtype=float))


def default_skeleton() -> SkeletonSpec:
    joints = (
        "pelvis", "spine", "neck", "head",
        "l_shoulder", "l_elbow", "l_wrist",
        "r_shoulder", "r_elbow", "r_wrist",
        "l_hip", "l_knee", "l_ankle",
        "r_hip", "r_knee", "r_ankle",
    )  # fmt: skip
    parents = (-1, 0, 1, 2, 2, 4, 5, 2, 7, 8, 0, 10, 11, 0, 13, 14)
    offsets = [
        (0.0, 0.0, 0.0),
        (0.0, 0.25, 0.0),
        (0.0, 0.25, 0.0),
        (0.0, 0.15, 0.0),
        (0.18, 0.0, 0.0),
        (0.0, -0.28, 0.0),
        (0.0, -0.26, 0.0),
        (-0.18, 0.0, 0.0),
        (0.0, -0.28, 0.0),
        (0.0, -0.26, 0.0),
        (0.10, 0.0, 0.0),
        (0.0, -0.42, 0.0),
        (0.0, -0.42, 0.0),
        (-0.10, 0.0, 0.0),
        (0.0, -0.42, 0.0),
        (0.0, -0.42, 0.0),
    ]
    return SkeletonSpec(joints, parents, np.array(offsets))


def forward_kinematics(skeleton: SkeletonSpec, root_position, rotations) -> np.ndarray:
    """World joint positions from local Euler rotations.

    Each joint's local rotation is intrinsic XYZ (``R = Rx(a) @ Ry(b) @ Rz(c)``).
    A child sits at ``pos(parent) + R_global(parent) @ offset(child)`` and
    ``R_global(j) = R_global(parent) @ R_local(j)``.

    Args:
        skeleton: the joint tree.
        root_position: ``(3,)`` or ``(F, 3)`` root positions.
        rotations: ``(J, 3)`` or ``(F, J, 3)`` Euler angles in radians.

    Returns:
        ``(J, 3)`` or ``(F, J, 3)`` positions.
    """
    rot = np.asarray(rotations, dtype=np.float64)
    root = np.asarray(root_position, dtype=np.float64)
    single = rot.ndim == 2
    if single:
        rot, root = rot[None], root[None]
    n_frames, n_joints = rot.shape[:2]
    if n_joints != skeleton.num_joints or rot.shape[2] != 3:
        raise ValueError(f"expected rotations of shape (..., {skeleton.num_joints}, 3), got {rot.shape}")
    if root.shape != (n_frames, 3):
        raise ValueError(f"expected root positions of shape ({n_frames}, 3), got {root.shape}")
    local = Rotation.from_euler("XYZ", rot.reshape(-1, 3)).as_matrix().reshape(n_frames, n_joints, 3, 3)
    glob = np.empty_like(local)
    pos = np.empty((n_frames, n_joints, 3))
    glob[:, 0] = local[:, 0]
    pos[:, 0] = root
    for j in range(1, n_joints):
        p = skeleton.parents[j]
        pos[:, j] = pos[:, p] + glob[:, p] @ skeleton.offsets[j]
        glob[:, j] = glob[:, p] @ local[:, j]
    return pos[0] if single else pos


@dataclass
class MotionSequence:
    """``frames`` is ``(L, 3 * J)`` joint positions, row-major per joint."""

    frames: np.ndarray
    fps: float = DEFAULT_FPS
    label: str | None = None
    id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError(f"frames must be (L >= 1, D), got shape {self.frames.shape}")
        if self.frames.shape[1] % 3:
            raise ValueError(f"feature dimension {self.frames.shape[1]} is not a multiple of 3")

    @property
    def length(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    def positions(self) -> np.ndarray:
        """``(L, J, 3)`` view of the frames."""
        return self.frames.reshape(self.length, -1, 3)

    def replace_frames(self, frames: np.ndarray) -> "MotionSequence":
        return MotionSequence(frames, self.fps, self.label, self.id)


def downsample(motion: MotionSequence, stride: int) -> MotionSequence:
    """Keep frames ``0, stride, 2*stride, ...``; ``floor(L / stride)`` of them."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if stride > motion.length:
        raise ValueError(f"stride {stride} exceeds sequence length {motion.length}")
    n = motion.length // stride
    return MotionSequence(motion.frames[: n * stride : stride], motion.fps / stride, motion.label, motion.id)


def crop_start(length: int, crop_length: int, pivot: int) -> int:
    return int(np.clip(pivot - crop_length // 2, 0, length - crop_length))


def crop(
    motion: MotionSequence,
    length: int = 64,
    pivot: int | None = None,
    rng: np.random.Generator | None = None,
) -> MotionSequence:
    """Window of ``length`` frames centred on ``pivot``, clamped to the sequence.

    With ``pivot=None`` the pivot is drawn uniformly from ``rng``.
    """
    if motion.length < length:
        raise ValueError(f"sequence {motion.id!r} has {motion.length} frames, crop needs {length}")
    if pivot is None:
        rng = rng if rng is not None else np.random.default_rng()
        pivot = int(rng.integers(0, motion.length))
    start = crop_start(motion.length, length, pivot)
    return motion.replace_frames(motion.frames[start : start + length])
