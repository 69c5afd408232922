"""Rule-based pose-code parser.

A :class:`PoseCodeSchema` lists K categories. Each category computes one
scalar from the pose (an angle, a distance, a height, ...) and splits its
range into half-open bins ``[lo, hi)``; the last bin also includes its top.
Every bin is one pose code, so a parsed frame has exactly one active code per
category (a K-hot vector over N codes).

Default schema (10 categories, 28 codes)::

    L/R elbow angle     joint-angle        <60 deg | 60-140 | >=140
    L/R knee angle      joint-angle        <60 deg | 60-140 | >=140
    L/R hand height     relative-height    wrist - shoulder: < -0.1 m | -0.1..0.1 | >= 0.1
    hands distance      inter-joint-dist   < 0.3 m | 0.3-0.8 | >= 0.8
    L/R foot contact    ground-contact     ankle height < 0.05 m | >= 0.05
    torso lean          torso-lean         pitch < -10 deg | -10..10 | >= 10
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .skeleton import GROUND_EPS, MotionSequence, SkeletonSpec, default_skeleton

RULE_KINDS = ("joint-angle", "inter-joint-distance", "relative-height", "ground-contact", "torso-lean")
_JOINT_COUNT = {
    "joint-angle": 3,
    "inter-joint-distance": 2,
    "relative-height": 2,
    "ground-contact": 1,
    "torso-lean": 4,
}
SCHEMA_FORMAT = "poservq-pose-schema"
SCHEMA_VERSION = 1


class ParseError(ValueError):
    def __init__(self, message: str, joint: str | None = None, frame: int | None = None):
        self.joint = joint
        self.frame = frame
        where = f" at frame {frame}" if frame is not None else ""
        super().__init__(f"{message}{where}")


@dataclass(frozen=True)
class Category:
    name: str
    kind: str
    joints: tuple[str, ...]
    bounds: tuple[float, ...]
    codes: tuple[str, ...]
    unit: str = ""

    def __post_init__(self):
        if self.kind not in RULE_KINDS:
            raise ValueError(f"category {self.name!r}: unknown rule kind {self.kind!r}")
        if len(self.joints) != _JOINT_COUNT[self.kind]:
            raise ValueError(f"category {self.name!r}: {self.kind} needs {_JOINT_COUNT[self.kind]} joints")
        if len(self.codes) < 2 or len(self.bounds) != len(self.codes) + 1:
            raise ValueError(f"category {self.name!r}: need >= 2 bins and len(bounds) == bins + 1")
        if any(not hi > lo for lo, hi in zip(self.bounds, self.bounds[1:])):
            raise ValueError(f"category {self.name!r}: bounds must be strictly increasing")

    @property
    def num_bins(self) -> int:
        return len(self.codes)

    def bin_index(self, values: np.ndarray) -> np.ndarray:
        """Bin of each value. Values outside ``[lo, hi]`` fall into the end bins."""
        return np.searchsorted(np.asarray(self.bounds[1:-1]), values, side="right")


@dataclass(frozen=True)
class PoseCodeSchema:
    categories: tuple[Category, ...]
    offsets: tuple[int, ...] = field(init=False, repr=False)

    def __post_init__(self):
        if not self.categories:
            raise ValueError("schema needs at least one category")
        names = [c.name for c in self.categories]
        if len(set(names)) != len(names):
            raise ValueError("category names must be unique")
        offsets = np.concatenate([[0], np.cumsum([c.num_bins for c in self.categories])])
        object.__setattr__(self, "offsets", tuple(int(o) for o in offsets))

    @property
    def num_categories(self) -> int:
        return len(self.categories)

    @property
    def num_codes(self) -> int:
        return self.offsets[-1]

    def code_names(self) -> list[str]:
        return [name for c in self.categories for name in c.codes]

    def category_of_code(self) -> np.ndarray:
        return np.repeat(np.arange(self.num_categories), [c.num_bins for c in self.categories])

    def code_index(self, name: str) -> int:
        return self.code_names().index(name)

    def to_dict(self) -> dict:
        def enc(b):
            return None if np.isinf(b) else float(b)

        return {
            "format": SCHEMA_FORMAT,
            "format_version": SCHEMA_VERSION,
            "categories": [
                {
                    "name": c.name,
                    "kind": c.kind,
                    "joints": list(c.joints),
                    "unit": c.unit,
                    # null marks an unbounded end
                    "bounds": [enc(b) for b in c.bounds],
                    "codes": list(c.codes),
                }
                for c in self.categories
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PoseCodeSchema":
        if d.get("format") != SCHEMA_FORMAT or d.get("format_version") != SCHEMA_VERSION:
            raise ValueError(
                f"unsupported schema document (format={d.get('format')!r}, version={d.get('format_version')!r})"
            )
        cats = []
        for c in d["categories"]:
            bounds = list(c["bounds"])
            bounds = [
                (-np.inf if i == 0 else np.inf) if b is None else float(b) for i, b in enumerate(bounds)
            ]
            cats.append(Category(c["name"], c["kind"], tuple(c["joints"]), tuple(bounds), tuple(c["codes"]),
                                 c.get("unit", "")))
        return cls(tuple(cats))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "PoseCodeSchema":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def default_schema() -> PoseCodeSchema:
    deg = np.radians
    inf = np.inf
    cats = []
    for side, s in (("L", "l"), ("R", "r")):
        cats.append(Category(f"{side}-elbow angle", "joint-angle", (f"{s}_shoulder", f"{s}_elbow", f"{s}_wrist"),
                             (0.0, deg(60), deg(140), np.pi),
                             (f"{side}-elbow bent", f"{side}-elbow slightly bent", f"{side}-elbow straight"), "rad"))
    for side, s in (("L", "l"), ("R", "r")):
        cats.append(Category(f"{side}-knee angle", "joint-angle", (f"{s}_hip", f"{s}_knee", f"{s}_ankle"),
                             (0.0, deg(60), deg(140), np.pi),
                             (f"{side}-knee bent", f"{side}-knee slightly bent", f"{side}-knee straight"), "rad"))
    for side, s in (("L", "l"), ("R", "r")):
        cats.append(Category(f"{side}-hand height", "relative-height", (f"{s}_wrist", f"{s}_shoulder"),
                             (-inf, -0.1, 0.1, inf),
                             (f"{side}-hand below shoulder", f"{side}-hand at shoulder level",
                              f"{side}-hand above shoulder"), "m"))
    cats.append(Category("hands distance", "inter-joint-distance", ("l_wrist", "r_wrist"),
                         (0.0, 0.3, 0.8, inf), ("hands close", "hands apart", "hands wide apart"), "m"))
    for side, s in (("L", "l"), ("R", "r")):
        cats.append(Category(f"{side}-foot contact", "ground-contact", (f"{s}_ankle",),
                             (-inf, GROUND_EPS, inf), (f"{side}-foot on ground", f"{side}-foot in air"), "m"))
    cats.append(Category("torso lean", "torso-lean", ("pelvis", "neck", "l_hip", "r_hip"),
                         (-inf, deg(-10), deg(10), inf),
                         ("torso leaning back", "torso upright", "torso leaning forward"), "rad"))
    return PoseCodeSchema(tuple(cats))


def _unit(v: np.ndarray, what: str, first_bad_joint: str) -> np.ndarray:
    n = np.linalg.norm(v, axis=-1)
    bad = np.flatnonzero(n <= 1e-12)
    if bad.size:
        raise ParseError(f"degenerate geometry: zero-length vector {what}", joint=first_bad_joint,
                         frame=int(bad[0]))
    return v / n[..., None]


def rule_value(category: Category, pos: np.ndarray, skeleton: SkeletonSpec) -> np.ndarray:
    """Scalar rule value per frame for ``pos`` of shape ``(F, J, 3)``."""
    idx = [skeleton.index(j) for j in category.joints]
    kind = category.kind
    if kind == "joint-angle":
        a, b, c = (pos[:, i] for i in idx)
        ja, jb, jc = category.joints
        u = _unit(a - b, f"from {jb} to {ja}", ja)
        v = _unit(c - b, f"from {jb} to {jc}", jc)
        return np.arccos(np.clip(np.sum(u * v, axis=-1), -1.0, 1.0))
    if kind == "inter-joint-distance":
        return np.linalg.norm(pos[:, idx[0]] - pos[:, idx[1]], axis=-1)
    if kind == "relative-height":
        return pos[:, idx[0], 1] - pos[:, idx[1], 1]
    if kind == "ground-contact":
        return pos[:, idx[0], 1].copy()
    # torso-lean: pitch of pelvis->neck about the body's lateral axis, forward positive
    pelvis, neck, lhip, rhip = (pos[:, i] for i in idx)
    lateral = lhip - rhip
    lateral[:, 1] = 0.0
    lateral = _unit(lateral, f"between {category.joints[2]} and {category.joints[3]}", category.joints[2])
    up = np.array([0.0, 1.0, 0.0])
    forward = np.cross(lateral, up)
    torso = neck - pelvis
    return np.arctan2(np.sum(torso * forward, axis=-1), torso[:, 1])


def rule_values(schema: PoseCodeSchema, positions: np.ndarray, skeleton: SkeletonSpec | None = None) -> np.ndarray:
    """``(F, K)`` rule values for ``(F, J, 3)`` positions."""
    skeleton = skeleton or default_skeleton()
    return np.stack([rule_value(c, positions, skeleton) for c in schema.categories], axis=1)


def parse_frames(schema: PoseCodeSchema, positions: np.ndarray, skeleton: SkeletonSpec | None = None) -> np.ndarray:
    """K-hot ``(F, N)`` int8 matrix for ``(F, J, 3)`` (or ``(F, 3J)``) positions."""
    skeleton = skeleton or default_skeleton()
    pos = np.asarray(positions, dtype=np.float64)
    if pos.ndim == 2:
        pos = pos.reshape(pos.shape[0], -1, 3)
    if pos.shape[1:] != (skeleton.num_joints, 3):
        raise ValueError(f"pose shape {pos.shape[1:]} does not match a {skeleton.num_joints}-joint skeleton")
    out = np.zeros((pos.shape[0], schema.num_codes), dtype=np.int8)
    rows = np.arange(pos.shape[0])
    for k, cat in enumerate(schema.categories):
        out[rows, schema.offsets[k] + cat.bin_index(rule_value(cat, pos, skeleton))] = 1
    return out


def parse_pose(schema: PoseCodeSchema, pose: np.ndarray, skeleton: SkeletonSpec | None = None) -> np.ndarray:
    """N-dim binary vector for one pose given as ``(J, 3)`` or ``(3J,)``."""
    pose = np.asarray(pose, dtype=np.float64).reshape(1, -1, 3)
    try:
        return parse_frames(schema, pose, skeleton)[0]
    except ParseError as exc:
        raise ParseError(str(exc).rsplit(" at frame", 1)[0], joint=exc.joint) from None


@dataclass
class KHotSequence:
    activations: np.ndarray
    schema: PoseCodeSchema

    def __post_init__(self):
        self.activations = np.asarray(self.activations, dtype=np.int8)
        if self.activations.ndim != 2 or self.activations.shape[1] != self.schema.num_codes:
            raise ValueError(f"activations must be (L_d, {self.schema.num_codes}), got {self.activations.shape}")

    @property
    def length(self) -> int:
        return self.activations.shape[0]

    def active_codes(self) -> list[list[int]]:
        return [np.flatnonzero(row).tolist() for row in self.activations]

    def is_valid(self) -> bool:
        """Exactly one active code per category in every row."""
        per_cat = np.add.reduceat(self.activations.astype(np.int64), self.schema.offsets[:-1], axis=1)
        return bool(np.all(per_cat == 1))


def parse_motion(
    schema: PoseCodeSchema, motion: MotionSequence, skeleton: SkeletonSpec | None = None
) -> KHotSequence:
    """Row ``i`` is the parse of frame ``i``; pass an already downsampled motion."""
    return KHotSequence(parse_frames(schema, motion.positions(), skeleton), schema)
