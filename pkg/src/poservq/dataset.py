"""JSON-lines motion dataset files.

Line 1 is a header::

    {"format": "poservq-motion", "format_version": 1, "fps": 20.0, "dim": 48, "skeleton": {...}}

Every further line is one sequence::

    {"id": "squat-0003", "class": "squat", "L": 96, "D": 48, "frames": [...L*D floats, row-major...]}

Floats are written with Python's shortest round-trip repr, so reading back
reproduces the float64 values exactly.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .skeleton import DEFAULT_FPS, MotionSequence, SkeletonSpec

FORMAT = "poservq-motion"
FORMAT_VERSION = 1


class DatasetError(ValueError):
    def __init__(self, path, line: int, message: str):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


def write_dataset(
    path,
    sequences: Iterable[MotionSequence],
    skeleton: SkeletonSpec,
    fps: float = DEFAULT_FPS,
    extra: dict | None = None,
) -> int:
    """Write sequences; returns how many were written."""
    header = {
        "format": FORMAT,
        "format_version": FORMAT_VERSION,
        "fps": float(fps),
        "dim": skeleton.dim,
        "skeleton": skeleton.to_dict(),
    }
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for seq in sequences:
            if seq.dim != skeleton.dim:
                raise ValueError(f"sequence {seq.id!r} has D={seq.dim}, skeleton needs {skeleton.dim}")
            record = {
                "id": seq.id,
                "class": seq.label,
                "L": seq.length,
                "D": seq.dim,
                "frames": seq.frames.ravel().tolist(),
            }
            if extra and seq.id in extra:
                record.update(extra[seq.id])
            fh.write(json.dumps(record) + "\n")
            count += 1
    return count


def _parse_header(path, text: str, expected: SkeletonSpec | None) -> dict:
    try:
        header = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DatasetError(path, 1, f"malformed header: {exc.msg}") from None
    if not isinstance(header, dict) or header.get("format") != FORMAT:
        raise DatasetError(path, 1, f"not a {FORMAT} file")
    if header.get("format_version") != FORMAT_VERSION:
        raise DatasetError(
            path, 1, f"unsupported format_version {header.get('format_version')!r} (expected {FORMAT_VERSION})"
        )
    try:
        skeleton = SkeletonSpec.from_dict(header["skeleton"])
        dim = int(header["dim"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(path, 1, f"bad skeleton header: {exc}") from None
    if dim != skeleton.dim:
        raise DatasetError(path, 1, f"header dim {dim} disagrees with skeleton ({skeleton.dim})")
    if expected is not None and skeleton != expected:
        raise DatasetError(path, 1, "file skeleton does not match the expected skeleton")
    header["skeleton"] = skeleton
    return header


def iter_dataset(path, expected_skeleton: SkeletonSpec | None = None) -> Iterator[tuple[dict, MotionSequence]]:
    """Yield ``(record, sequence)`` pairs; the record keeps any extra fields."""
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
        if not first.strip():
            raise DatasetError(path, 1, "missing header")
        header = _parse_header(path, first, expected_skeleton)
        dim, fps = header["dim"], float(header.get("fps", DEFAULT_FPS))
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                length, d = int(rec["L"]), int(rec["D"])
                frames = np.asarray(rec["frames"], dtype=np.float64)
            except json.JSONDecodeError as exc:
                raise DatasetError(path, lineno, f"malformed record: {exc.msg}") from None
            except (KeyError, TypeError, ValueError) as exc:
                raise DatasetError(path, lineno, f"malformed record: {exc!r}") from None
            if d != dim:
                raise DatasetError(path, lineno, f"record D={d} but header dim={dim}")
            if frames.ndim != 1 or frames.size != length * d:
                raise DatasetError(path, lineno, f"shape error: {frames.size} floats for L={length}, D={d}")
            if length < 1 or not np.all(np.isfinite(frames)):
                raise DatasetError(path, lineno, "frames must be finite and L >= 1")
            seq = MotionSequence(frames.reshape(length, d), fps, rec.get("class"), str(rec.get("id", "")))
            yield rec, seq


def read_header(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return _parse_header(path, fh.readline(), None)


def read_dataset(path, expected_skeleton: SkeletonSpec | None = None) -> tuple[SkeletonSpec, list[MotionSequence]]:
    skeleton = read_header(path)["skeleton"]
    return skeleton, [seq for _, seq in iter_dataset(path, expected_skeleton)]
