"""Pose and residual codebooks: lookup, K-hot aggregation, EMA and code reset."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

EMA_EPS = 1e-6


@dataclass
class PoseCodebook:
    """``entries[n]`` is the embedding of pose code ``n``; trained by gradient only."""

    entries: np.ndarray
    category_of_code: np.ndarray

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.float64)
        self.category_of_code = np.asarray(self.category_of_code, dtype=np.int64)
        if self.entries.ndim != 2 or min(self.entries.shape) < 1:
            raise ValueError(f"pose codebook must be a non-empty (N, D_c) matrix, got {self.entries.shape}")
        if self.category_of_code.shape != (self.entries.shape[0],):
            raise ValueError("category_of_code must have one entry per code")
        if not np.all(np.isfinite(self.entries)):
            raise ValueError("pose codebook entries must be finite")

    @classmethod
    def init(cls, category_of_code, dim: int, rng: np.random.Generator, std: float = 0.02) -> "PoseCodebook":
        category_of_code = np.asarray(category_of_code)
        return cls(rng.normal(0.0, std, size=(len(category_of_code), dim)), category_of_code)

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]


@dataclass
class EmaState:
    cluster_size: np.ndarray
    embed_sum: np.ndarray
    decay: float = 0.99
    usage_since_reset: np.ndarray = field(default=None)

    def __post_init__(self):
        if not 0.0 <= self.decay < 1.0:
            raise ValueError(f"EMA decay must lie in [0, 1), got {self.decay}")
        if self.usage_since_reset is None:
            self.usage_since_reset = np.zeros(len(self.cluster_size), dtype=np.int64)


@dataclass
class ResidualCodebook:
    """One codebook shared by every quantization stage, updated by EMA."""

    entries: np.ndarray
    ema: EmaState

    @classmethod
    def init(cls, size: int, dim: int, rng: np.random.Generator, std: float = 0.02,
             decay: float = 0.99) -> "ResidualCodebook":
        entries = rng.normal(0.0, std, size=(size, dim))
        return cls(entries, EmaState(np.ones(size), entries.copy(), decay))

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]


def aggregate(khot: np.ndarray, entries: np.ndarray) -> np.ndarray:
    """Pose latents: each row is the sum of the codes active in that K-hot row.

    Works for ``(L_d, N)`` or ``(B, L_d, N)`` activations.
    """
    khot = np.asarray(khot)
    if khot.shape[-1] != entries.shape[0]:
        raise ValueError(f"K-hot width {khot.shape[-1]} != codebook size {entries.shape[0]}")
    return khot.astype(np.float64) @ entries


def squared_distances(entries: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """``(Q, N)`` squared Euclidean distances, computed by explicit differences."""
    diff = queries[:, None, :] - entries[None, :, :]
    return np.einsum("qnd,qnd->qn", diff, diff)


def nearest_codes(entries: np.ndarray, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index of the nearest code for every row of ``queries`` and its squared distance.

    Ties go to the lowest index.
    """
    entries = np.asarray(entries, dtype=np.float64)
    if entries.ndim != 2 or entries.shape[0] == 0:
        raise ValueError("nearest_code needs a non-empty (N, D) codebook")
    queries = np.asarray(queries, dtype=np.float64)
    d2 = squared_distances(entries, queries)
    idx = np.argmin(d2, axis=1)
    return idx, d2[np.arange(len(idx)), idx]


def nearest_code(entries: np.ndarray, query: np.ndarray) -> tuple[int, np.ndarray, float]:
    idx, d2 = nearest_codes(entries, np.asarray(query, dtype=np.float64)[None])
    return int(idx[0]), np.asarray(entries)[idx[0]].copy(), float(d2[0])


def ema_update(codebook: ResidualCodebook, assignments: np.ndarray, vectors: np.ndarray) -> None:
    """In-place EMA step.

    ``cluster_size <- d * cluster_size + (1 - d) * count`` and
    ``embed_sum <- d * embed_sum + (1 - d) * sum(assigned vectors)``; codes that
    received vectors become ``embed_sum / (cluster_size + eps)``. Codes with no
    assignment keep their entry (their ratio is unchanged by the decay).
    """
    assignments = np.asarray(assignments, dtype=np.int64)
    vectors = np.asarray(vectors, dtype=np.float64)
    if len(assignments) != len(vectors):
        raise ValueError("assignments and vectors must have the same length")
    ema = codebook.ema
    d = ema.decay
    counts = np.bincount(assignments, minlength=codebook.size).astype(np.float64)
    sums = np.zeros_like(codebook.entries)
    np.add.at(sums, assignments, vectors)
    ema.cluster_size = d * ema.cluster_size + (1 - d) * counts
    ema.embed_sum = d * ema.embed_sum + (1 - d) * sums
    ema.usage_since_reset = ema.usage_since_reset + counts.astype(np.int64)
    used = counts > 0
    entries = codebook.entries.copy()
    entries[used] = ema.embed_sum[used] / (ema.cluster_size[used, None] + EMA_EPS)
    codebook.entries = entries


def code_reset(
    codebook: ResidualCodebook, vectors: np.ndarray, threshold: float, rng: np.random.Generator
) -> np.ndarray:
    """Replace every code whose EMA cluster size is below ``threshold``.

    Each dead code becomes a vector sampled uniformly from ``vectors``. Returns
    the indices that were reset.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    if len(vectors) == 0:
        raise ValueError("code_reset needs a non-empty batch")
    ema = codebook.ema
    dead = np.flatnonzero(ema.cluster_size < threshold)
    if dead.size == 0:
        return dead
    picks = vectors[rng.integers(0, len(vectors), size=dead.size)]
    entries = codebook.entries.copy()
    entries[dead] = picks
    codebook.entries = entries
    fresh = max(1.0, threshold)
    ema.cluster_size = ema.cluster_size.copy()
    ema.cluster_size[dead] = fresh
    ema.embed_sum = ema.embed_sum.copy()
    ema.embed_sum[dead] = picks * fresh
    ema.usage_since_reset = ema.usage_since_reset.copy()
    ema.usage_since_reset[dead] = 0
    return dead


def utilization(assignments, size: int) -> dict[str, float]:
    """Fraction of codes used and perplexity ``exp(entropy)`` of the assignment histogram."""
    a = np.asarray(assignments, dtype=np.int64).ravel()
    if a.size == 0:
        raise ValueError("utilization needs at least one assignment")
    counts = np.bincount(a, minlength=size)
    p = counts[counts > 0] / a.size
    return {
        "fraction_used": float(np.count_nonzero(counts)) / size,
        "perplexity": float(np.exp(-np.sum(p * np.log(p)))),
    }
