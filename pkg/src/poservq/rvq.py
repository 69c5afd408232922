"""Residual quantization of the gap between encoder latents and pose latents.

Array-level API (``rvq_encode``) does the greedy per-frame quantization.
Graph-level API (``initial_residual``, ``quantize``, ``assemble_latent``)
wires the same computation onto an autodiff tape:

* ``r0 = h - sg(z)``
* stage ``v`` picks the nearest shared code ``q_v`` to ``r_v`` and sets
  ``r_{v+1} = r_v - q_v``
* the quantized sum reaches the graph as ``r0 + sg(sum(q) - r0)``, so its
  forward value is the codes and its gradient passes straight to ``r0``
* ``commit = sum_v mean((r_v - sg(q_v))^2)``
* ``F = z + quantized``, where ``z`` is *not* detached
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .codebooks import nearest_codes


@dataclass
class QuantizationOutput:
    """Result of quantizing ``(..., D_c)`` residual vectors with ``S`` stages."""

    indices: np.ndarray  # (..., S) int
    quantized: np.ndarray  # (S, ..., D_c)
    final_residual: np.ndarray  # (..., D_c)
    stage_energy: np.ndarray  # (S + 1,) mean squared norm of r_0 ... r_S

    @property
    def num_stages(self) -> int:
        return self.indices.shape[-1]

    def total(self) -> np.ndarray:
        """Sum of the quantized residuals over stages."""
        if self.num_stages == 0:
            return np.zeros_like(self.final_residual)
        return self.quantized.sum(axis=0)

    def residuals(self) -> list[np.ndarray]:
        """``r_0 ... r_{S-1}``: the vector each stage quantized."""
        out = []
        r = self.final_residual + self.total()
        for v in range(self.num_stages):
            out.append(r)
            r = r - self.quantized[v]
        return out


def rvq_encode(r0: np.ndarray, entries: np.ndarray, stages: int) -> QuantizationOutput:
    """Greedy multi-stage nearest-code quantization with one shared codebook."""
    if stages < 0:
        raise ValueError(f"stages must be >= 0, got {stages}")
    r0 = np.asarray(r0, dtype=np.float64)
    lead, dim = r0.shape[:-1], r0.shape[-1]
    flat = r0.reshape(-1, dim)
    r = flat.copy()
    indices = np.zeros((flat.shape[0], stages), dtype=np.int64)
    quantized = np.zeros((stages, flat.shape[0], dim))
    energy = [float(np.mean(np.sum(r * r, axis=1)))]
    for v in range(stages):
        idx, _ = nearest_codes(entries, r)
        indices[:, v] = idx
        quantized[v] = entries[idx]
        r = r - quantized[v]
        energy.append(float(np.mean(np.sum(r * r, axis=1))))
    return QuantizationOutput(
        indices.reshape(*lead, stages),
        quantized.reshape(stages, *lead, dim),
        r.reshape(*lead, dim),
        np.array(energy),
    )


def initial_residual(h: Tensor, z: Tensor, detach_z: bool = True) -> Tensor:
    if h.shape != z.shape:
        raise ad.ShapeError("initial_residual", "h and z must have the same shape", [h.shape, z.shape])
    return ad.sub(h, ad.stop_gradient(z) if detach_z else z)


def one_hot(indices: np.ndarray, size: int) -> np.ndarray:
    out = np.zeros((*indices.shape, size))
    np.put_along_axis(out, indices[..., None], 1.0, axis=-1)
    return out


@dataclass
class GraphQuantization:
    quantized: Tensor  # straight-through sum of stage outputs, channels-first like r0
    commit: Tensor | None
    result: QuantizationOutput  # frame-major arrays, (B, L_d, ...)


def quantize(r0: Tensor, codebook: Tensor, stages: int) -> GraphQuantization:
    """Quantize channels-first residuals ``(B, D_c, L_d)`` on the tape.

    ``codebook`` is the ``(N_r, D_c)`` residual codebook node; it only ever
    enters through a stop-gradient, so no loss can push gradient into it.
    """
    tape = r0.tape
    frames = r0.value.transpose(0, 2, 1)  # (B, L_d, D_c)
    result = rvq_encode(frames, codebook.value, stages)
    if stages == 0:
        zero = tape.constant(np.zeros(r0.shape))
        return GraphQuantization(zero, None, result)
    commit = None
    r = r0
    total = None
    for v in range(stages):
        onehot = tape.constant(one_hot(result.indices[..., v], codebook.shape[0]))
        q = ad.stop_gradient(ad.transpose(ad.matmul(onehot, codebook), (0, 2, 1)))
        term = ad.scale(ad.sqnorm(ad.sub(r, q)), 1.0 / r.value.size)
        commit = term if commit is None else ad.add(commit, term)
        r = ad.sub(r, q)
        total = q if total is None else ad.add(total, q)
    straight = ad.add(r0, ad.stop_gradient(ad.sub(total, r0)))
    return GraphQuantization(straight, commit, result)


def assemble_latent(z: Tensor, quantized: Tensor) -> Tensor:
    if z.shape != quantized.shape:
        raise ad.ShapeError("assemble_latent", "pose latent and quantized residual differ", [z.shape, quantized.shape])
    return ad.add(z, quantized)


def assemble_latent_array(z: np.ndarray, quantized_stages) -> np.ndarray:
    """Array form: ``z + sum_v q_v`` for any number of stage arrays."""
    f = np.array(z, dtype=np.float64, copy=True)
    for q in quantized_stages:
        if np.shape(q) != f.shape:
            raise ValueError(f"stage output shape {np.shape(q)} != pose latent shape {f.shape}")
        f = f + q
    return f


TOKEN_FORMAT = "poservq-tokens"
TOKEN_VERSION = 1


def token_record(seq_id: str, label, khot: np.ndarray, stage_indices: np.ndarray, stride: int) -> dict:
    """One tokenized sequence: per downsampled frame, its pose codes and residual codes."""
    rows = []
    for i, (bits, codes) in enumerate(zip(khot, stage_indices)):
        rows.append({
            "frame": i * stride,
            "pose_codes": np.flatnonzero(bits).tolist(),
            "residual_codes": [int(c) for c in codes],
        })
    return {"id": seq_id, "class": label, "rows": rows}


def write_tokens(path, header: dict, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format": TOKEN_FORMAT, "format_version": TOKEN_VERSION, **header}) + "\n")
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def read_tokens(path) -> tuple[dict, list[dict]]:
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != TOKEN_FORMAT or header.get("format_version") != TOKEN_VERSION:
            raise ValueError(f"{path}: not a version-{TOKEN_VERSION} {TOKEN_FORMAT} file")
        return header, [json.loads(line) for line in fh if line.strip()]


def latents_from_tokens(record: dict, pose_entries: np.ndarray, residual_entries: np.ndarray) -> np.ndarray:
    """Rebuild ``F`` (``(L_d, D_c)``) from a token record and both codebooks."""
    f = np.zeros((len(record["rows"]), pose_entries.shape[1]))
    for i, row in enumerate(record["rows"]):
        z = pose_entries[row["pose_codes"]].sum(axis=0)
        f[i] = assemble_latent_array(z, [residual_entries[c] for c in row["residual_codes"]])
    return f
