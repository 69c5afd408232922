"""Versioned binary checkpoints.

Layout: one UTF-8 JSON header line terminated by ``\\n``, then every array as
a contiguous little-endian block (``<f8`` or ``<i8``) in header order. The
header holds the format version, config, schema, skeleton, scalar training
state, the generator state and an ``arrays`` list of ``{name, dtype, shape,
offset, nbytes}`` with offsets relative to the first byte after the header.

Serialization is canonical (sorted keys, fixed separators), so save -> load ->
save reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .codebooks import EmaState, PoseCodebook, ResidualCodebook
from .model import MotionTokenizer, TrainConfig
from .parser import PoseCodeSchema
from .skeleton import SkeletonSpec
from .training import Adam, TrainState

FORMAT = "poservq-checkpoint"
FORMAT_VERSION = 1
_DTYPES = {"f8": np.dtype("<f8"), "i8": np.dtype("<i8")}


class CheckpointError(ValueError):
    def __init__(self, path, message: str):
        self.path = str(path)
        super().__init__(f"{path}: {message}")


class CheckpointVersionError(CheckpointError):
    def __init__(self, path, found, expected=FORMAT_VERSION):
        self.found = found
        self.expected = expected
        super().__init__(path, f"checkpoint format version {found!r}, this build reads version {expected}")


class CheckpointTruncatedError(CheckpointError):
    pass


def _state_arrays(state: TrainState) -> dict[str, np.ndarray]:
    model = state.model
    ema = model.residual_codebook.ema
    arrays = {f"param/{k}": v for k, v in sorted(model.params.items())}
    arrays["pose_codebook/entries"] = model.pose_codebook.entries
    arrays["pose_codebook/category_of_code"] = model.pose_codebook.category_of_code
    arrays["residual_codebook/entries"] = model.residual_codebook.entries
    arrays["residual_codebook/cluster_size"] = ema.cluster_size
    arrays["residual_codebook/embed_sum"] = ema.embed_sum
    arrays["residual_codebook/usage_since_reset"] = ema.usage_since_reset
    for k in sorted(state.adam.m):
        arrays[f"adam_m/{k}"] = state.adam.m[k]
        arrays[f"adam_v/{k}"] = state.adam.v[k]
    return arrays


def _finite_or_none(x: float):
    return float(x) if np.isfinite(x) else None


def encode_checkpoint(state: TrainState) -> bytes:
    arrays = _state_arrays(state)
    descriptors, blocks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = "i8" if np.issubdtype(arr.dtype, np.integer) else "f8"
        data = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        descriptors.append({"name": name, "dtype": code, "shape": list(arr.shape), "offset": offset,
                            "nbytes": len(data)})
        blocks.append(data)
        offset += len(data)
    header = {
        "format": FORMAT,
        "format_version": FORMAT_VERSION,
        "config": asdict(state.model.config),
        "schema": state.model.schema.to_dict(),
        "skeleton": state.model.skeleton.to_dict(),
        "iteration": state.iteration,
        "best_val": _finite_or_none(state.best_val),
        "best_iteration": state.best_iteration,
        "ema_decay": state.model.residual_codebook.ema.decay,
        "adam": {"beta1": state.adam.beta1, "beta2": state.adam.beta2, "eps": state.adam.eps, "t": state.adam.t},
        "rng": state.rng.bit_generator.state,
        "arrays": descriptors,
        "data_bytes": offset,
    }
    line = json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return line.encode("utf-8") + b"\n" + b"".join(blocks)


def save_checkpoint(state: TrainState, path) -> None:
    """Write atomically (temp file + rename) so a crash never leaves half a file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(state))
    os.replace(tmp, path)


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        line = fh.readline()
    return _parse_header(path, line)


def _parse_header(path, line: bytes) -> dict:
    if not line.endswith(b"\n"):
        raise CheckpointTruncatedError(path, "header line is incomplete")
    try:
        header = json.loads(line)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(path, f"header is not valid JSON ({exc})") from None
    if not isinstance(header, dict) or header.get("format") != FORMAT:
        raise CheckpointError(path, f"not a {FORMAT} file")
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointVersionError(path, header.get("format_version"))
    return header


def decode_checkpoint(raw: bytes, path="<bytes>") -> TrainState:
    cut = raw.find(b"\n")
    if cut < 0:
        raise CheckpointTruncatedError(path, "header line is incomplete")
    header = _parse_header(path, raw[: cut + 1])
    body = memoryview(raw)[cut + 1 :]
    if len(body) != header["data_bytes"]:
        raise CheckpointTruncatedError(path, f"expected {header['data_bytes']} data bytes, found {len(body)}")
    arrays = {}
    for d in header["arrays"]:
        dtype = _DTYPES[d["dtype"]]
        chunk = body[d["offset"] : d["offset"] + d["nbytes"]]
        arrays[d["name"]] = np.frombuffer(chunk, dtype=dtype).astype(dtype.newbyteorder("=")).reshape(d["shape"])

    config = TrainConfig(**header["config"])
    schema = PoseCodeSchema.from_dict(header["schema"])
    skeleton = SkeletonSpec.from_dict(header["skeleton"])
    params = {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("param/")}
    pose = PoseCodebook(arrays["pose_codebook/entries"], arrays["pose_codebook/category_of_code"])
    ema = EmaState(arrays["residual_codebook/cluster_size"], arrays["residual_codebook/embed_sum"],
                   header["ema_decay"], arrays["residual_codebook/usage_since_reset"])
    residual = ResidualCodebook(arrays["residual_codebook/entries"], ema)
    model = MotionTokenizer(config, schema, skeleton, params, pose, residual)

    a = header["adam"]
    adam = Adam(a["beta1"], a["beta2"], a["eps"], t=a["t"])
    for k, v in arrays.items():
        if k.startswith("adam_m/"):
            adam.m[k[7:]] = v
        elif k.startswith("adam_v/"):
            adam.v[k[7:]] = v
    bit_gen = getattr(np.random, header["rng"]["bit_generator"])()
    bit_gen.state = header["rng"]
    best_val = header["best_val"]
    return TrainState(model, adam, np.random.Generator(bit_gen), header["iteration"],
                      float("inf") if best_val is None else best_val, header["best_iteration"])


def load_checkpoint(path) -> TrainState:
    return decode_checkpoint(Path(path).read_bytes(), path)
