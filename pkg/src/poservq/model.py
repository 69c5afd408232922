"""The full tokenizer: pose parser + pose codebook + encoder + RVQ + decoder."""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from . import losses
from .autodiff import Tape, Tensor
from .codebooks import PoseCodebook, ResidualCodebook, aggregate
from .encdec import EncDecConfig, bind, decode, encode, init_params
from .parser import PoseCodeSchema, parse_frames
from .rvq import QuantizationOutput, assemble_latent, initial_residual, quantize, rvq_encode
from .skeleton import SkeletonSpec


@dataclass
class TrainConfig:
    """Hyperparameters for model shape, losses, optimizer and schedule."""

    batch_size: int = 16
    crop_length: int = 64
    stride: int = 4
    stages: int = 2
    beta: float = 0.5
    gamma: float = 0.02
    lr: float = 2e-4
    warmup: int = 1000
    iterations: int = 5000
    seed: int = 0
    loss: str = "huber"
    huber_delta: float = 1.0
    latent_dim: int = 64
    width: int = 96
    res_blocks: int = 2
    residual_codebook_size: int = 64
    codebook_init_std: float = 0.02
    ema_decay: float = 0.99
    reset_threshold: float = 1.0
    code_reset: bool = True
    freeze_codebooks: bool = False
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    adam_eps: float = 1e-8
    val_fraction: float = 0.05
    val_every: int = 250
    checkpoint_every: int = 1000

    def __post_init__(self):
        self.validate()

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def paper_scale(cls, **overrides) -> "TrainConfig":
        """Paper-sized dimensions: batch 256, 512-d codes, 64 residual codes."""
        base = dict(batch_size=256, latent_dim=512, width=512, residual_codebook_size=64)
        base.update(overrides)
        return cls(**base)

    @property
    def levels(self) -> int:
        return int(np.log2(self.stride))

    def encdec(self, input_dim: int) -> EncDecConfig:
        return EncDecConfig(input_dim, self.latent_dim, self.width, self.levels, self.res_blocks)

    def validate(self) -> None:
        if self.beta < 0 or self.gamma < 0:
            raise ValueError("beta and gamma must be >= 0")
        if self.iterations < 0 or not 0 <= self.warmup <= self.iterations:
            raise ValueError(f"warmup ({self.warmup}) must lie in [0, iterations ({self.iterations})]")
        if self.stride < 2 or 2 ** self.levels != self.stride:
            raise ValueError(f"stride must be a power of two >= 2, got {self.stride}")
        if self.crop_length % self.stride:
            raise ValueError(f"crop_length {self.crop_length} is not divisible by stride {self.stride}")
        if self.stages < 0:
            raise ValueError("stages must be >= 0")
        if self.batch_size < 1 or self.residual_codebook_size < 1 or self.latent_dim < 1 or self.width < 1:
            raise ValueError("batch_size, residual_codebook_size, latent_dim and width must be >= 1")
        if self.loss not in losses.LOSS_VARIANTS:
            raise ValueError(f"loss must be one of {losses.LOSS_VARIANTS}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.val_every < 1 or self.checkpoint_every < 1:
            raise ValueError("val_every and checkpoint_every must be >= 1")


@dataclass
class Batch:
    motion: np.ndarray  # (B, L, D)
    khot: np.ndarray  # (B, L / stride, N)


@dataclass
class ForwardResult:
    tape: Tape
    params: dict[str, Tensor]
    pose_codebook: Tensor
    residual_codebook: Tensor
    encoded: Tensor | None
    pose_latent: Tensor
    latent: Tensor
    recons: Tensor
    vel: Tensor
    commit: Tensor | None
    final: Tensor
    quant: QuantizationOutput | None
    m_hat: np.ndarray = field(repr=False)

    def breakdown(self) -> dict[str, float]:
        return {
            "recons": self.recons.item(),
            "vel": self.vel.item(),
            "commit": self.commit.item() if self.commit is not None else 0.0,
            "final": self.final.item(),
        }


@dataclass
class MotionTokenizer:
    config: TrainConfig
    schema: PoseCodeSchema
    skeleton: SkeletonSpec
    params: dict[str, np.ndarray]
    pose_codebook: PoseCodebook
    residual_codebook: ResidualCodebook

    @classmethod
    def init(cls, config: TrainConfig, schema: PoseCodeSchema, skeleton: SkeletonSpec,
             rng: np.random.Generator) -> "MotionTokenizer":
        params = init_params(config.encdec(skeleton.dim), rng)
        pose = PoseCodebook.init(schema.category_of_code(), config.latent_dim, rng, config.codebook_init_std)
        residual = ResidualCodebook.init(config.residual_codebook_size, config.latent_dim, rng,
                                         config.codebook_init_std, config.ema_decay)
        return cls(config, schema, skeleton, params, pose, residual)

    @property
    def encdec_config(self) -> EncDecConfig:
        return self.config.encdec(self.skeleton.dim)

    def parse(self, frames: np.ndarray) -> np.ndarray:
        """K-hot rows for frames ``0, stride, 2*stride, ...`` of an ``(L, D)`` motion."""
        return parse_frames(self.schema, frames[:: self.config.stride], self.skeleton)

    def forward(self, batch: Batch, trainable: bool = True) -> ForwardResult:
        """Build the training graph for one batch and evaluate every loss term."""
        cfg = self.config
        ed = self.encdec_config
        motion = np.asarray(batch.motion, dtype=np.float64)
        if motion.ndim != 3 or motion.shape[2] != self.skeleton.dim:
            raise ValueError(f"batch motion must be (B, L, {self.skeleton.dim}), got {motion.shape}")
        if motion.shape[1] % cfg.stride:
            raise ValueError(f"sequence length {motion.shape[1]} is not divisible by stride {cfg.stride}")
        l_d = motion.shape[1] // cfg.stride
        if batch.khot.shape != (motion.shape[0], l_d, self.schema.num_codes):
            raise ValueError(f"K-hot batch must be {(motion.shape[0], l_d, self.schema.num_codes)}, "
                             f"got {batch.khot.shape}")

        tape = Tape()
        leaf = tape.leaf if trainable else tape.constant
        params = bind(tape, self.params, trainable)
        pose_cb = leaf(self.pose_codebook.entries, name="pose_codebook")
        residual_cb = leaf(self.residual_codebook.entries, name="residual_codebook")
        x = tape.constant(motion.transpose(0, 2, 1))
        khot = tape.constant(batch.khot.astype(np.float64))

        z = ad.transpose(ad.matmul(khot, pose_cb), (0, 2, 1))
        h = None
        commit = None
        quant = None
        if cfg.stages > 0:
            h = encode(params, x, ed)
            r0 = initial_residual(h, z, detach_z=True)
            gq = quantize(r0, residual_cb, cfg.stages)
            latent = assemble_latent(z, gq.quantized)
            commit, quant = gq.commit, gq.result
        else:
            latent = z
        m_hat = decode(params, latent, ed)
        recons = losses.graph_recons(x, m_hat, cfg.loss, cfg.huber_delta)
        vel = losses.graph_vel(x, m_hat, cfg.loss, cfg.huber_delta)
        final = losses.graph_final(recons, vel, commit, cfg.beta, cfg.gamma)
        return ForwardResult(tape, params, pose_cb, residual_cb, h, z, latent, recons, vel, commit, final,
                             quant, m_hat.value.transpose(0, 2, 1))

    # inference -----------------------------------------------------------

    def pose_latents(self, khot: np.ndarray) -> np.ndarray:
        return aggregate(khot, self.pose_codebook.entries)

    def encode_latents(self, motion: np.ndarray) -> np.ndarray:
        """Encoder output ``(B, L_d, D_c)`` for ``(B, L, D)`` motion."""
        tape = Tape()
        x = tape.constant(np.asarray(motion, dtype=np.float64).transpose(0, 2, 1))
        h = encode(bind(tape, self.params, False), x, self.encdec_config)
        return h.value.transpose(0, 2, 1)

    def latents(self, motion: np.ndarray, khot: np.ndarray) -> tuple[np.ndarray, QuantizationOutput | None]:
        """Assembled latent ``F`` (``(B, L_d, D_c)``) and the quantization record."""
        z = self.pose_latents(khot)
        if self.config.stages == 0:
            return z, None
        r0 = self.encode_latents(motion) - z
        q = rvq_encode(r0, self.residual_codebook.entries, self.config.stages)
        return z + q.total(), q

    def decode_latents(self, latent: np.ndarray) -> np.ndarray:
        tape = Tape()
        f = tape.constant(np.asarray(latent, dtype=np.float64).transpose(0, 2, 1))
        m = decode(bind(tape, self.params, False), f, self.encdec_config)
        return m.value.transpose(0, 2, 1)

    def reconstruct(self, motion: np.ndarray, khot: np.ndarray | None = None) -> np.ndarray:
        motion = np.asarray(motion, dtype=np.float64)
        if khot is None:
            khot = np.stack([self.parse(m) for m in motion])
        latent, _ = self.latents(motion, khot)
        return self.decode_latents(latent)
