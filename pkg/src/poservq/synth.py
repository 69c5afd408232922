"""Seeded synthetic motion classes driven through forward kinematics.

Every class sets per-joint local Euler angles as sinusoids whose frequency,
amplitude and phase are drawn from fixed ranges, then places the body on the
ground (lowest ankle at ``ANKLE_REST``). Joint-angle conventions, all local:

* shoulder flexion (arm forward/up): ``Rx(-a)``; abduction: ``Rz(+a)`` left, ``Rz(-a)`` right
* elbow flexion: ``Rx(-a)``; hip flexion: ``Rx(-a)``; knee flexion: ``Rx(+a)``
* spine forward lean: ``Rx(+a)``; root heading: ``Ry(yaw)``

Classes:

idle-sway
    Lateral pelvis sway, small spine bend and arm swing. Legs straight, both
    feet stay on the ground.
walk-cycle
    Root advances along its heading; hips swing in antiphase and the knee of
    the swinging leg flexes, so single-foot contact alternates L/R.
arm-raise-L / arm-raise-R
    One arm abducts from rest to 130-165 degrees and back.
squat
    Knees flex to 100-120 degrees (interior angle below 90), hips follow at
    half the knee angle, torso leans forward, arms reach forward.
box-punch
    Guard stance; arms alternately extend forward with a torso twist.
"""

from __future__ import annotations

import numpy as np

from .skeleton import DEFAULT_FPS, MotionSequence, SkeletonSpec, default_skeleton, forward_kinematics

MOTION_CLASSES = ("idle-sway", "walk-cycle", "arm-raise-L", "arm-raise-R", "squat", "box-punch")

ANKLE_REST = 0.02

# joint indices of the default skeleton
PELVIS, SPINE, NECK, HEAD = 0, 1, 2, 3
L_SH, L_EL, R_SH, R_EL = 4, 5, 7, 8
L_HIP, L_KNEE, R_HIP, R_KNEE = 10, 11, 13, 14
X, Y, Z = 0, 1, 2


def _u(rng: np.random.Generator, lo: float, hi: float) -> float:
    return float(rng.uniform(lo, hi))


def _idle(rng, t, rot, root):
    w = 2 * np.pi * _u(rng, 0.2, 0.5)
    ph = _u(rng, 0, 2 * np.pi)
    root[:, X] += _u(rng, 0.02, 0.06) * np.sin(w * t + ph)
    rot[:, SPINE, Z] = _u(rng, 0.04, 0.12) * np.sin(w * t + ph)
    rot[:, HEAD, X] = _u(rng, 0.0, 0.15) * np.sin(2 * w * t)
    swing = _u(rng, 0.05, 0.2)
    rot[:, L_SH, X] = -swing * np.sin(w * t)
    rot[:, R_SH, X] = swing * np.sin(w * t)
    rot[:, L_EL, X] = -_u(rng, 0.15, 0.45)
    rot[:, R_EL, X] = -_u(rng, 0.15, 0.45)


def _walk(rng, t, rot, root):
    w = 2 * np.pi * _u(rng, 0.8, 1.1)
    ph = _u(rng, 0, 2 * np.pi)
    hip_amp, knee_amp = _u(rng, 0.35, 0.5), _u(rng, 0.8, 1.1)
    s, c = np.sin(w * t + ph), np.cos(w * t + ph)
    rot[:, L_HIP, X] = -hip_amp * s
    rot[:, R_HIP, X] = hip_amp * s
    # the leg moving forward (d/dt of its hip flexion > 0) is the swing leg
    rot[:, L_KNEE, X] = knee_amp * np.maximum(0.0, c)
    rot[:, R_KNEE, X] = knee_amp * np.maximum(0.0, -c)
    arm = _u(rng, 0.2, 0.45)
    rot[:, L_SH, X] = arm * s
    rot[:, R_SH, X] = -arm * s
    rot[:, L_EL, X] = -_u(rng, 0.2, 0.5)
    rot[:, R_EL, X] = -_u(rng, 0.2, 0.5)
    rot[:, SPINE, X] = _u(rng, 0.0, 0.1)
    speed = _u(rng, 0.5, 0.9)
    yaw = rot[0, PELVIS, Y]
    root[:, X] += speed * t * np.sin(yaw)
    root[:, Z] += speed * t * np.cos(yaw)


def _arm_raise(side):
    def gen(rng, t, rot, root):
        w = 2 * np.pi * _u(rng, 0.3, 0.55)
        peak = _u(rng, np.radians(130), np.radians(165))
        raise_ = peak * (1 - np.cos(w * t)) / 2
        sh, el, other_el = (L_SH, L_EL, R_EL) if side == "L" else (R_SH, R_EL, L_EL)
        rot[:, sh, Z] = raise_ if side == "L" else -raise_
        rot[:, el, X] = -_u(rng, 0.0, 0.3)
        rot[:, other_el, X] = -_u(rng, 0.1, 0.4)
        rot[:, SPINE, Z] = _u(rng, 0.0, 0.08) * np.sin(w * t) * (-1 if side == "L" else 1)
        root[:, X] += _u(rng, 0.0, 0.03) * np.sin(0.5 * w * t)

    return gen


def _squat(rng, t, rot, root):
    w = 2 * np.pi * _u(rng, 0.25, 0.4)
    knee = _u(rng, np.radians(100), np.radians(120)) * (1 - np.cos(w * t)) / 2
    for hip, kn in ((L_HIP, L_KNEE), (R_HIP, R_KNEE)):
        rot[:, kn, X] = knee
        rot[:, hip, X] = -knee / 2  # keeps the ankle below the hip
    rot[:, SPINE, X] = _u(rng, 0.25, 0.4) * knee
    reach = _u(rng, 0.5, 0.8)
    rot[:, L_SH, X] = -reach * knee
    rot[:, R_SH, X] = -reach * knee
    rot[:, L_EL, X] = -_u(rng, 0.0, 0.3)
    rot[:, R_EL, X] = -_u(rng, 0.0, 0.3)


def _box(rng, t, rot, root):
    w = 2 * np.pi * _u(rng, 0.8, 1.3)
    ph = _u(rng, 0, 2 * np.pi)
    p_l = np.maximum(0.0, np.sin(w * t + ph)) ** 2
    p_r = np.maximum(0.0, -np.sin(w * t + ph)) ** 2
    guard_sh, reach_sh = _u(rng, 0.5, 0.8), _u(rng, 1.3, 1.6)
    guard_el, reach_el = _u(rng, 1.8, 2.2), _u(rng, 0.0, 0.2)
    for sh, el, p in ((L_SH, L_EL, p_l), (R_SH, R_EL, p_r)):
        rot[:, sh, X] = -(guard_sh + (reach_sh - guard_sh) * p)
        rot[:, el, X] = -(guard_el + (reach_el - guard_el) * p)
    rot[:, SPINE, Y] = _u(rng, 0.15, 0.35) * (p_r - p_l)
    bend = _u(rng, 0.2, 0.4)
    for hip, kn in ((L_HIP, L_KNEE), (R_HIP, R_KNEE)):
        rot[:, kn, X] = bend
        rot[:, hip, X] = -bend / 2


_GENERATORS = {
    "idle-sway": _idle,
    "walk-cycle": _walk,
    "arm-raise-L": _arm_raise("L"),
    "arm-raise-R": _arm_raise("R"),
    "squat": _squat,
    "box-punch": _box,
}


def synthesize_motion(
    motion_class: str,
    length: int,
    seed: int,
    skeleton: SkeletonSpec | None = None,
    fps: float = DEFAULT_FPS,
    seq_id: str | None = None,
) -> MotionSequence:
    """Generate one sequence; identical ``(class, length, seed)`` give identical frames."""
    if motion_class not in _GENERATORS:
        raise ValueError(f"unknown motion class {motion_class!r}; expected one of {', '.join(MOTION_CLASSES)}")
    if length < 8:
        raise ValueError(f"length must be >= 8, got {length}")
    skeleton = skeleton or default_skeleton()
    rng = np.random.default_rng([int(seed) & 0xFFFF_FFFF_FFFF_FFFF, MOTION_CLASSES.index(motion_class)])

    t = np.arange(length) / fps
    rot = np.zeros((length, skeleton.num_joints, 3))
    root = np.zeros((length, 3))
    rot[:, PELVIS, Y] = _u(rng, -np.pi, np.pi)
    root[:, X] = _u(rng, -0.5, 0.5)
    root[:, Z] = _u(rng, -0.5, 0.5)
    _GENERATORS[motion_class](rng, t, rot, root)

    pos = forward_kinematics(skeleton, root, rot)
    ankles = [skeleton.index("l_ankle"), skeleton.index("r_ankle")]
    pos[:, :, Y] += (ANKLE_REST - pos[:, ankles, Y].min(axis=1))[:, None]
    return MotionSequence(pos.reshape(length, -1), fps, motion_class, seq_id or f"{motion_class}-{seed}")


def sequence_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed) & 0xFFFF_FFFF_FFFF_FFFF, index]).generate_state(1, np.uint64)[0])


def generate_dataset(
    classes=MOTION_CLASSES,
    per_class: int = 100,
    length: int = 96,
    seed: int = 0,
    skeleton: SkeletonSpec | None = None,
) -> list[MotionSequence]:
    """``per_class`` sequences of each class, ids ``<class>-<nnnn>``."""
    unknown = [c for c in classes if c not in _GENERATORS]
    if unknown:
        raise ValueError(f"unknown motion class {unknown[0]!r}")
    out = []
    for c in classes:
        for i in range(per_class):
            s = sequence_seed(seed, MOTION_CLASSES.index(c) * 1_000_003 + i)
            out.append(synthesize_motion(c, length, s, skeleton, seq_id=f"{c}-{i:04d}"))
    return out
