"""1D-convolutional motion encoder and decoder.

Encoder (``(B, D, L) -> (B, D_c, L / 2**levels)``)::

    conv3(D -> w), relu
    repeat levels: conv4/stride2(w -> w), res_blocks x [x + conv3(relu(conv3(x)))]
    conv3(w -> D_c)

The decoder mirrors it with nearest-neighbour x2 upsampling::

    conv3(D_c -> w), relu
    repeat levels: upsample x2, conv3(w -> w), res_blocks x residual block
    relu, conv3(w -> D)

Parameters live in plain ``dict[str, np.ndarray]`` so the optimizer and the
checkpoint code can treat them uniformly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor


@dataclass(frozen=True)
class EncDecConfig:
    input_dim: int = 48
    latent_dim: int = 64
    width: int = 96
    levels: int = 2
    res_blocks: int = 2

    @property
    def downsample_factor(self) -> int:
        return 2**self.levels

    def validate(self, stride: int | None = None) -> None:
        for name in ("input_dim", "latent_dim", "width", "levels"):
            if getattr(self, name) < 1:
                raise ValueError(f"EncDecConfig.{name} must be >= 1")
        if self.res_blocks < 0:
            raise ValueError("EncDecConfig.res_blocks must be >= 0")
        if stride is not None and stride != self.downsample_factor:
            raise ValueError(
                f"encoder downsample factor {self.downsample_factor} does not match pipeline stride {stride}"
            )


def _conv_param(rng: np.random.Generator, c_out: int, c_in: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    # uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero bias
    bound = 1.0 / np.sqrt(c_in * width)
    return rng.uniform(-bound, bound, size=(c_out, c_in, width)), np.zeros(c_out)


def _layer_specs(cfg: EncDecConfig, prefix: str) -> list[tuple[str, int, int, int]]:
    """(name, c_out, c_in, width) for every conv in encoder or decoder order."""
    w = cfg.width
    specs = []
    if prefix == "enc":
        specs.append(("enc.in", w, cfg.input_dim, 3))
        for lvl in range(cfg.levels):
            specs.append((f"enc.down{lvl}", w, w, 4))
            for r in range(cfg.res_blocks):
                specs += [(f"enc.down{lvl}.res{r}.a", w, w, 3), (f"enc.down{lvl}.res{r}.b", w, w, 3)]
        specs.append(("enc.out", cfg.latent_dim, w, 3))
    else:
        specs.append(("dec.in", w, cfg.latent_dim, 3))
        for lvl in range(cfg.levels):
            specs.append((f"dec.up{lvl}", w, w, 3))
            for r in range(cfg.res_blocks):
                specs += [(f"dec.up{lvl}.res{r}.a", w, w, 3), (f"dec.up{lvl}.res{r}.b", w, w, 3)]
        specs.append(("dec.out", cfg.input_dim, w, 3))
    return specs


def init_params(cfg: EncDecConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Fresh encoder + decoder parameters, keys ``<layer>.w`` / ``<layer>.b``."""
    params: dict[str, np.ndarray] = {}
    for prefix in ("enc", "dec"):
        for name, c_out, c_in, width in _layer_specs(cfg, prefix):
            params[f"{name}.w"], params[f"{name}.b"] = _conv_param(rng, c_out, c_in, width)
    return params


def _conv(p: dict[str, Tensor], name: str, x: Tensor, stride: int = 1) -> Tensor:
    w = p[f"{name}.w"]
    width = w.shape[-1]
    pad = 1 if width in (3, 4) else width // 2
    return ad.conv1d(x, w, p[f"{name}.b"], stride=stride, pad=pad)


def _res_block(p: dict[str, Tensor], name: str, x: Tensor) -> Tensor:
    return ad.add(x, _conv(p, f"{name}.b", ad.relu(_conv(p, f"{name}.a", x))))


def encode(p: dict[str, Tensor], x: Tensor, cfg: EncDecConfig) -> Tensor:
    """Map motion ``(B, D, L)`` to latents ``(B, D_c, L / factor)``."""
    length = x.shape[-1]
    if length % cfg.downsample_factor:
        raise ValueError(f"sequence length {length} is not divisible by {cfg.downsample_factor}")
    h = ad.relu(_conv(p, "enc.in", x))
    for lvl in range(cfg.levels):
        h = _conv(p, f"enc.down{lvl}", h, stride=2)
        for r in range(cfg.res_blocks):
            h = _res_block(p, f"enc.down{lvl}.res{r}", h)
    return _conv(p, "enc.out", h)


def decode(p: dict[str, Tensor], f: Tensor, cfg: EncDecConfig) -> Tensor:
    """Map latents ``(B, D_c, L_d)`` back to motion ``(B, D, L_d * factor)``."""
    h = ad.relu(_conv(p, "dec.in", f))
    for lvl in range(cfg.levels):
        h = _conv(p, f"dec.up{lvl}", ad.upsample1d(h, 2))
        for r in range(cfg.res_blocks):
            h = _res_block(p, f"dec.up{lvl}.res{r}", h)
    return _conv(p, "dec.out", ad.relu(h))


def bind(tape: Tape, params: dict[str, np.ndarray], trainable: bool = True) -> dict[str, Tensor]:
    make = tape.leaf if trainable else tape.constant
    return {k: make(v, name=k) for k, v in params.items()}


def encode_array(params: dict[str, np.ndarray], motion: np.ndarray, cfg: EncDecConfig) -> np.ndarray:
    """Inference helper: ``(L, D)`` or ``(B, L, D)`` -> ``(..., L_d, D_c)``."""
    tape = Tape()
    batched = motion.ndim == 3
    x = np.asarray(motion if batched else motion[None], dtype=np.float64).transpose(0, 2, 1)
    h = encode(bind(tape, params, trainable=False), tape.constant(x), cfg).value.transpose(0, 2, 1)
    return h if batched else h[0]


def decode_array(params: dict[str, np.ndarray], latents: np.ndarray, cfg: EncDecConfig) -> np.ndarray:
    """Inference helper: ``(L_d, D_c)`` or ``(B, L_d, D_c)`` -> ``(..., L, D)``."""
    tape = Tape()
    batched = latents.ndim == 3
    f = np.asarray(latents if batched else latents[None], dtype=np.float64).transpose(0, 2, 1)
    m = decode(bind(tape, params, trainable=False), tape.constant(f), cfg).value.transpose(0, 2, 1)
    return m if batched else m[0]
