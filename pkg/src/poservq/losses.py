"""Reconstruction, velocity and combined training losses.

Graph versions take channels-first tensors ``(B, D, L)``; array versions take
``(..., L, D)`` numpy arrays and are used for evaluation and as test oracles.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LOSS_VARIANTS = ("huber", "l1")


def _check_variant(variant: str) -> None:
    if variant not in LOSS_VARIANTS:
        raise ValueError(f"loss variant must be one of {LOSS_VARIANTS}, got {variant!r}")


def elementwise_loss(diff: np.ndarray, variant: str = "huber", delta: float = 1.0) -> np.ndarray:
    _check_variant(variant)
    a = np.abs(diff)
    if variant == "l1":
        return a
    return np.where(a <= delta, 0.5 * diff * diff, delta * (a - 0.5 * delta))


def loss_recons(m: np.ndarray, m_hat: np.ndarray, variant: str = "huber", delta: float = 1.0) -> float:
    """Mean Huber (smooth L1) or L1 distance over every element."""
    m, m_hat = np.asarray(m, dtype=np.float64), np.asarray(m_hat, dtype=np.float64)
    if m.shape != m_hat.shape:
        raise ValueError(f"shape mismatch: {m.shape} vs {m_hat.shape}")
    return float(np.mean(elementwise_loss(m - m_hat, variant, delta)))


def velocity(m: np.ndarray) -> np.ndarray:
    """Frame differences ``p[i+1] - p[i]`` along the time axis (second to last)."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape[-2] < 2:
        raise ValueError("velocity needs at least 2 frames")
    return m[..., 1:, :] - m[..., :-1, :]


def loss_vel(m: np.ndarray, m_hat: np.ndarray, variant: str = "huber", delta: float = 1.0) -> float:
    return loss_recons(velocity(m), velocity(m_hat), variant, delta)


def loss_final(recons: float, vel: float, commit: float, beta: float = 0.5, gamma: float = 0.02) -> float:
    return recons + beta * vel + gamma * commit


def _distance(diff: Tensor, variant: str, delta: float) -> Tensor:
    _check_variant(variant)
    return ad.mean(ad.huber(diff, delta) if variant == "huber" else ad.abs_(diff))


def graph_recons(m: Tensor, m_hat: Tensor, variant: str = "huber", delta: float = 1.0) -> Tensor:
    if m.shape != m_hat.shape:
        raise ad.ShapeError("loss_recons", "motion and reconstruction differ", [m.shape, m_hat.shape])
    return _distance(ad.sub(m_hat, m), variant, delta)


def graph_velocity(m: Tensor) -> Tensor:
    """Velocity of a channels-first ``(..., D, L)`` tensor along its last axis."""
    length = m.shape[-1]
    if length < 2:
        raise ad.ShapeError("velocity", "needs at least 2 frames", [m.shape])
    return ad.sub(ad.narrow(m, -1, 1, length), ad.narrow(m, -1, 0, length - 1))


def graph_vel(m: Tensor, m_hat: Tensor, variant: str = "huber", delta: float = 1.0) -> Tensor:
    return _distance(ad.sub(graph_velocity(m_hat), graph_velocity(m)), variant, delta)


def graph_final(recons: Tensor, vel: Tensor, commit: Tensor | None, beta: float, gamma: float) -> Tensor:
    total = ad.add(recons, ad.scale(vel, beta))
    if commit is not None:
        total = ad.add(total, ad.scale(commit, gamma))
    return total
