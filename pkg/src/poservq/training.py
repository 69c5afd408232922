"""Training loop: learning-rate warm-up, Adam, EMA/reset, validation and selection."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .codebooks import code_reset, ema_update, utilization
from .model import Batch, MotionTokenizer, TrainConfig
from .parser import PoseCodeSchema, parse_frames
from .skeleton import MotionSequence, SkeletonSpec, crop_start

log = logging.getLogger(__name__)


def lr_schedule(iteration: int, peak: float = 2e-4, warmup: int = 1000) -> float:
    """Linear ramp from 0 to ``peak`` over ``warmup`` iterations, then constant."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    if warmup <= 0:
        return peak
    return peak * min(1.0, iteration / warmup)


@dataclass
class Adam:
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> dict[str, np.ndarray]:
        """Return updated copies of ``params``; moments are kept per key."""
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        out = {}
        for k, p in params.items():
            g = grads[k]
            m = self.m.get(k)
            v = self.v.get(k)
            m = (1 - self.beta1) * g if m is None else self.beta1 * m + (1 - self.beta1) * g
            v = (1 - self.beta2) * g * g if v is None else self.beta2 * v + (1 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            out[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out


class TrainingData:
    """Sequences plus their per-frame K-hot parses, for fast crop sampling."""

    def __init__(self, sequences: Sequence[MotionSequence], schema: PoseCodeSchema, skeleton: SkeletonSpec,
                 crop_length: int = 64, stride: int = 4):
        usable = [s for s in sequences if s.length >= crop_length]
        if not usable:
            raise ValueError(f"no sequence has the {crop_length} frames a crop needs")
        if len(usable) < len(sequences):
            log.warning("skipping %d sequences shorter than %d frames", len(sequences) - len(usable), crop_length)
        self.sequences = list(usable)
        self.crop_length = crop_length
        self.stride = stride
        self.khot = [parse_frames(schema, s.frames, skeleton) for s in self.sequences]

    def __len__(self) -> int:
        return len(self.sequences)

    def window(self, i: int, start: int) -> tuple[np.ndarray, np.ndarray]:
        end = start + self.crop_length
        return self.sequences[i].frames[start:end], self.khot[i][start:end : self.stride]

    def sample_batch(self, rng: np.random.Generator, batch_size: int) -> Batch:
        """Random sequences, each cropped around a uniformly drawn pivot frame."""
        which = rng.integers(0, len(self.sequences), size=batch_size)
        motion, khot = [], []
        for i in which:
            length = self.sequences[i].length
            pivot = int(rng.integers(0, length))
            m, k = self.window(int(i), crop_start(length, self.crop_length, pivot))
            motion.append(m)
            khot.append(k)
        return Batch(np.stack(motion), np.stack(khot))

    def center_batches(self, batch_size: int = 32):
        """Deterministic centre crops, in sequence order."""
        for lo in range(0, len(self.sequences), batch_size):
            motion, khot = [], []
            for i in range(lo, min(lo + batch_size, len(self.sequences))):
                length = self.sequences[i].length
                m, k = self.window(i, crop_start(length, self.crop_length, length // 2))
                motion.append(m)
                khot.append(k)
            yield Batch(np.stack(motion), np.stack(khot))


def split_dataset(sequences: Sequence[MotionSequence], val_fraction: float, seed: int):
    """Deterministic train/validation split, independent of input order."""
    ordered = sorted(sequences, key=lambda s: s.id)
    perm = np.random.default_rng([int(seed) & 0xFFFF_FFFF_FFFF_FFFF, 0x5EED]).permutation(len(ordered))
    n_val = max(1, int(round(val_fraction * len(ordered))))
    if n_val >= len(ordered):
        raise ValueError("dataset too small for a train/validation split")
    val = sorted((ordered[i] for i in perm[:n_val]), key=lambda s: s.id)
    train = sorted((ordered[i] for i in perm[n_val:]), key=lambda s: s.id)
    return train, val


@dataclass
class TrainState:
    model: MotionTokenizer
    adam: Adam
    rng: np.random.Generator
    iteration: int = 0
    best_val: float = float("inf")
    best_iteration: int = -1

    @classmethod
    def fresh(cls, config: TrainConfig, schema: PoseCodeSchema, skeleton: SkeletonSpec) -> "TrainState":
        rng = np.random.default_rng(int(config.seed) & 0xFFFF_FFFF_FFFF_FFFF)
        model = MotionTokenizer.init(config, schema, skeleton, rng)
        return cls(model, Adam(config.adam_beta1, config.adam_beta2, config.adam_eps), rng)

    @property
    def config(self) -> TrainConfig:
        return self.model.config


def trainable_arrays(model: MotionTokenizer) -> dict[str, np.ndarray]:
    out = dict(model.params)
    out["pose_codebook"] = model.pose_codebook.entries
    return out


def train_step(state: TrainState, batch: Batch) -> dict:
    """One optimizer step plus residual-codebook EMA and reset.

    Returns the log record for this step.
    """
    model = state.model
    cfg = model.config
    fwd = model.forward(batch)
    grads = fwd.tape.backward(fwd.final)
    lr = lr_schedule(state.iteration + 1, cfg.lr, cfg.warmup)

    arrays = trainable_arrays(model)
    grad_arrays = {k: grads[t] for k, t in fwd.params.items()}
    grad_arrays["pose_codebook"] = grads[fwd.pose_codebook]
    if cfg.freeze_codebooks:
        arrays.pop("pose_codebook")
    updated = state.adam.step(arrays, grad_arrays, lr)
    if not cfg.freeze_codebooks:
        model.pose_codebook.entries = updated.pop("pose_codebook")
    model.params = updated

    record = {"iter": state.iteration + 1, "lr": lr, **fwd.breakdown()}
    if fwd.quant is not None:
        q = fwd.quant
        vectors = np.concatenate([r.reshape(-1, cfg.latent_dim) for r in q.residuals()])
        assignments = np.concatenate([q.indices[..., v].ravel() for v in range(q.num_stages)])
        record["utilization"] = utilization(assignments, cfg.residual_codebook_size)
        if not cfg.freeze_codebooks:
            ema_update(model.residual_codebook, assignments, vectors)
        if cfg.code_reset and not cfg.freeze_codebooks:
            code_reset(model.residual_codebook, vectors, cfg.reset_threshold, state.rng)
    else:
        record["utilization"] = None
    state.iteration += 1
    return record


def validation_loss(model: MotionTokenizer, data: TrainingData) -> float:
    """Mean reconstruction loss over centre crops of every validation sequence."""
    total, count = 0.0, 0
    for batch in data.center_batches():
        fwd = model.forward(batch, trainable=False)
        total += fwd.recons.item() * len(batch.motion)
        count += len(batch.motion)
    return total / count


def snapshot(model: MotionTokenizer) -> MotionTokenizer:
    return copy.deepcopy(model)


def train(
    state: TrainState,
    data: TrainingData,
    val_data: TrainingData | None = None,
    on_record: Callable[[dict], None] | None = None,
    on_checkpoint: Callable[[TrainState, str], None] | None = None,
) -> tuple[TrainState, MotionTokenizer]:
    """Run until ``config.iterations``; returns the final state and the best model.

    ``on_checkpoint(state, kind)`` fires with kind ``"periodic"``, ``"best"``
    or ``"last"``.
    """
    cfg = state.config
    best = snapshot(state.model)
    while state.iteration < cfg.iterations:
        record = train_step(state, data.sample_batch(state.rng, cfg.batch_size))
        if val_data is not None and (state.iteration % cfg.val_every == 0 or state.iteration == cfg.iterations):
            val = validation_loss(state.model, val_data)
            record["val_recons"] = val
            if val < state.best_val:
                state.best_val, state.best_iteration = val, state.iteration
                best = snapshot(state.model)
                if on_checkpoint:
                    on_checkpoint(state, "best")
        if on_record:
            on_record(record)
        if on_checkpoint and state.iteration % cfg.checkpoint_every == 0:
            on_checkpoint(state, "periodic")
    if on_checkpoint:
        on_checkpoint(state, "last")
    if val_data is None:
        best = snapshot(state.model)
    return state, best
