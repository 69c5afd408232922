"""Proxy-FID over handcrafted kinematic features, reports, and code-direction analysis."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .codebooks import utilization
from .losses import loss_recons, loss_vel
from .parser import PoseCodeSchema, default_schema, parse_frames, rule_value
from .skeleton import GROUND_EPS, MotionSequence, SkeletonSpec, crop_start, default_skeleton

log = logging.getLogger(__name__)

FEATURE_VERSION = "kinematic-v1"
REPORT_FORMAT = "poservq-reconstruction-report"
REPORT_VERSION = 1


@dataclass
class FeatureSet:
    vectors: np.ndarray  # (S, F_d)
    version: str = FEATURE_VERSION

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise ValueError(f"feature vectors must be (S, F_d), got {self.vectors.shape}")


def kinematic_features(
    motion: MotionSequence | np.ndarray,
    schema: PoseCodeSchema | None = None,
    skeleton: SkeletonSpec | None = None,
) -> np.ndarray:
    """Fixed-order feature vector of one motion.

    Order: per-joint position mean (3J), per-joint position std (3J), per-joint
    mean speed (J), per-joint speed std (J), mean of every joint-angle rule
    (one per angle category), ground-contact fraction of every ground-contact
    rule. Speeds are per-frame displacement norms.
    """
    schema = schema or default_schema()
    skeleton = skeleton or default_skeleton()
    frames = motion.frames if isinstance(motion, MotionSequence) else np.asarray(motion, dtype=np.float64)
    if frames.shape[0] < 2:
        raise ValueError("kinematic features need at least 2 frames")
    pos = frames.reshape(frames.shape[0], -1, 3)
    speed = np.linalg.norm(np.diff(pos, axis=0), axis=-1)
    angles = [rule_value(c, pos, skeleton).mean() for c in schema.categories if c.kind == "joint-angle"]
    contact = [np.mean(rule_value(c, pos, skeleton) < GROUND_EPS)
               for c in schema.categories if c.kind == "ground-contact"]
    return np.concatenate([
        frames.mean(axis=0), frames.std(axis=0),
        speed.mean(axis=0), speed.std(axis=0),
        np.asarray(angles, dtype=np.float64), np.asarray(contact, dtype=np.float64),
    ])


def feature_set(motions: Sequence[MotionSequence], schema=None, skeleton=None) -> FeatureSet:
    ordered = sorted(motions, key=lambda m: m.id)
    return FeatureSet(np.stack([kinematic_features(m, schema, skeleton) for m in ordered]))


def matrix_sqrt_psd(s: np.ndarray) -> np.ndarray:
    """Symmetric square root of a PSD matrix; negative eigenvalues clamp to 0."""
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ValueError(f"expected a square matrix, got {s.shape}")
    if np.max(np.abs(s - s.T), initial=0.0) > 1e-9 * max(1.0, np.max(np.abs(s), initial=0.0)):
        raise ValueError("matrix is not symmetric")
    w, v = np.linalg.eigh((s + s.T) / 2)
    if w.size and w.min() < -1e-8 * max(abs(w.max()), 1e-300):
        log.warning("matrix_sqrt_psd: clamping eigenvalue %.3g (largest %.3g)", w.min(), w.max())
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def gaussian_fit(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 2:
        raise ValueError("need at least 2 samples to fit a Gaussian")
    cov = np.atleast_2d(np.cov(x, rowvar=False, ddof=1))
    if not np.all(np.isfinite(cov)):
        raise ValueError("covariance is not finite")
    return x.mean(axis=0), cov


def frechet_from_stats(mu_a, cov_a, mu_b, cov_b) -> float:
    diff = np.asarray(mu_a) - np.asarray(mu_b)
    root_a = matrix_sqrt_psd(cov_a)
    inner = root_a @ cov_b @ root_a
    cross = np.trace(matrix_sqrt_psd((inner + inner.T) / 2))
    return max(0.0, float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * cross))


def frechet_distance(a: FeatureSet | np.ndarray, b: FeatureSet | np.ndarray) -> float:
    """``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))`` of Gaussian fits."""
    va = a.vectors if isinstance(a, FeatureSet) else np.asarray(a, dtype=np.float64)
    vb = b.vectors if isinstance(b, FeatureSet) else np.asarray(b, dtype=np.float64)
    va = va[:, None] if va.ndim == 1 else va
    vb = vb[:, None] if vb.ndim == 1 else vb
    if va.shape[1] != vb.shape[1]:
        raise ValueError(f"feature dimension mismatch: {va.shape[1]} vs {vb.shape[1]}")
    return frechet_from_stats(*gaussian_fit(va), *gaussian_fit(vb))


def direction_similarity(
    codebook, schema: PoseCodeSchema | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Cosine similarity between all pairs of unit-normalised codes, plus category labels."""
    entries = np.asarray(getattr(codebook, "entries", codebook), dtype=np.float64)
    if schema is not None:
        labels = schema.category_of_code()
        names = schema.code_names()
    else:
        labels = np.asarray(getattr(codebook, "category_of_code", np.arange(len(entries))))
        names = [str(i) for i in range(len(entries))]
    norms = np.linalg.norm(entries, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise ValueError(f"pose code {names[zero[0]]!r} has zero norm")
    unit = entries / norms[:, None]
    sim = np.clip(unit @ unit.T, -1.0, 1.0)
    sim = (sim + sim.T) / 2
    np.fill_diagonal(sim, 1.0)
    return sim, labels


def disentanglement_summary(similarity: np.ndarray, labels: Sequence[int]) -> dict[str, float]:
    """Mean |similarity| across categories and mean similarity within them (off-diagonal)."""
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    off = ~np.eye(len(labels), dtype=bool)
    cross = similarity[~same]
    within = similarity[same & off]
    return {
        "cross_category_abs_mean": float(np.mean(np.abs(cross))) if cross.size else 0.0,
        "within_category_mean": float(np.mean(within)) if within.size else 0.0,
    }


def eval_windows(sequences: Sequence[MotionSequence], crop_length: int, hop: int | None = None):
    """``(sequence, start)`` for every window of ``crop_length`` frames at the given hop.

    Sequences shorter than a crop are skipped. ``hop=None`` gives one centre crop.
    """
    out = []
    for seq in sorted(sequences, key=lambda s: s.id):
        if seq.length < crop_length:
            continue
        if hop is None:
            out.append((seq, crop_start(seq.length, crop_length, seq.length // 2)))
        else:
            out += [(seq, s) for s in range(0, seq.length - crop_length + 1, hop)]
    return out


def reconstruction_report(
    sequences: Sequence[MotionSequence],
    model=None,
    crop_length: int = 64,
    hop: int | None = 16,
    batch_size: int = 32,
) -> dict:
    """Losses, per-class breakdown, proxy-FID, utilization and stage energies.

    ``model=None`` is the identity bypass (reconstruction == input), used as a
    sanity oracle.
    """
    windows = eval_windows(sequences, crop_length, hop)
    if not windows:
        raise ValueError("no sequence is long enough to evaluate")
    schema = model.schema if model is not None else default_schema()
    skeleton = model.skeleton if model is not None else default_skeleton()
    variant = model.config.loss if model is not None else "huber"
    real, recon, per_window = [], [], []
    assignments, energies = [], []
    for lo in range(0, len(windows), batch_size):
        chunk = windows[lo : lo + batch_size]
        motion = np.stack([seq.frames[s : s + crop_length] for seq, s in chunk])
        if model is None:
            m_hat = motion.copy()
        else:
            khot = np.stack([parse_frames(schema, m[:: model.config.stride], skeleton) for m in motion])
            latent, quant = model.latents(motion, khot)
            m_hat = model.decode_latents(latent)
            if quant is not None:
                assignments.append(quant.indices.ravel())
                energies.append(quant.stage_energy * len(chunk))
        for (seq, s), m, mh in zip(chunk, motion, m_hat):
            real.append(m)
            recon.append(mh)
            per_window.append((seq.label, loss_recons(m, mh, variant), loss_vel(m, mh, variant)))

    fid = frechet_distance(
        FeatureSet(np.stack([kinematic_features(m, schema, skeleton) for m in real])),
        FeatureSet(np.stack([kinematic_features(m, schema, skeleton) for m in recon])),
    )
    per_class: dict[str, dict] = {}
    for label in sorted({str(w[0]) for w in per_window}):
        rows = [w for w in per_window if str(w[0]) == label]
        per_class[label] = {
            "windows": len(rows),
            "recons_loss": float(np.mean([r[1] for r in rows])),
            "vel_loss": float(np.mean([r[2] for r in rows])),
        }
    report = {
        "format": REPORT_FORMAT,
        "format_version": REPORT_VERSION,
        "feature_version": FEATURE_VERSION,
        "sequences": len({w[0].id for w in windows}),
        "windows": len(windows),
        "crop_length": crop_length,
        "recons_loss": float(np.mean([w[1] for w in per_window])),
        "vel_loss": float(np.mean([w[2] for w in per_window])),
        "proxy_fid": fid,
        "per_class": per_class,
        "utilization": None,
        "stage_energy": None,
    }
    if assignments:
        report["utilization"] = utilization(np.concatenate(assignments), model.residual_codebook.size)
        report["stage_energy"] = (np.sum(energies, axis=0) / len(windows)).tolist()
    return report


REPORT_KEYS = {
    "format", "format_version", "feature_version", "sequences", "windows", "crop_length", "recons_loss",
    "vel_loss", "proxy_fid", "per_class", "utilization", "stage_energy",
}


def validate_report(report: dict) -> None:
    """Check a report dict against the documented schema (raises ``ValueError``)."""
    if set(report) != REPORT_KEYS:
        raise ValueError(f"report keys differ: {sorted(set(report) ^ REPORT_KEYS)}")
    if report["format"] != REPORT_FORMAT or report["format_version"] != REPORT_VERSION:
        raise ValueError("unsupported report format")
    for key in ("recons_loss", "vel_loss", "proxy_fid"):
        if not isinstance(report[key], float) or report[key] < 0:
            raise ValueError(f"{key} must be a non-negative float")
    for label, row in report["per_class"].items():
        if set(row) != {"windows", "recons_loss", "vel_loss"}:
            raise ValueError(f"per_class[{label!r}] has unexpected keys")
    if report["utilization"] is not None and set(report["utilization"]) != {"fraction_used", "perplexity"}:
        raise ValueError("utilization must hold fraction_used and perplexity")


def export_embeddings(path, codebook, schema: PoseCodeSchema) -> int:
    """CSV of ``code,category,e0..e{D-1}``; floats written with 17 significant digits."""
    entries = np.asarray(getattr(codebook, "entries", codebook), dtype=np.float64)
    names = schema.code_names()
    cats = [schema.categories[k].name for k in schema.category_of_code()]
    if len(names) != len(entries):
        raise ValueError(f"codebook has {len(entries)} rows but the schema defines {len(names)} codes")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["code", "category"] + [f"e{i}" for i in range(entries.shape[1])])
        for name, cat, row in zip(names, cats, entries):
            w.writerow([name, cat] + [f"{x:.17g}" for x in row])
    return len(entries)


def read_embeddings(path) -> tuple[list[str], list[str], np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    body = rows[1:]
    return [r[0] for r in body], [r[1] for r in body], np.array([[float(x) for x in r[2:]] for r in body])


def write_similarity_csv(path, similarity: np.ndarray, names: Sequence[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["code"] + list(names))
        for name, row in zip(names, similarity):
            w.writerow([name] + [f"{x:.17g}" for x in row])
