"""Continuous latent autoencoder (32x32x3 image <-> 4x8x8 latent).

Both directions are patch MLPs with token mixing: 4x4 pixel patches map to
an 8x8 grid of tokens, and each token carries the 4 latent channels of its
grid cell. Latents are flattened channel-major then row-major, i.e. index
``c*64 + row*8 + col``, and multiplied by a fixed ``latent_scale`` chosen
after training so the training latents have unit standard deviation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from mindkit import nn
from mindkit import tensor as T
from mindkit.errors import BadResolution, EmptyDataset, OutOfRange, ShapeMismatch
from mindkit.tensor import AdamState, Tensor

IMAGE_SHAPE = (32, 32, 3)
PATCH = 4
GRID = 8
LATENT_CHANNELS = 4
LATENT_DIM = LATENT_CHANNELS * GRID * GRID  # 256
N_TOKENS = GRID * GRID


@dataclass
class AEConfig:
    width: int = 48
    token_hidden: int = 64
    channel_hidden: int = 96
    blocks: int = 1
    seed: int = 0


@dataclass
class AutoencoderParams:
    weights: dict[str, np.ndarray]
    config: AEConfig = field(default_factory=AEConfig)
    latent_scale: float = 1.0

    @property
    def latent_dim(self) -> int:
        return LATENT_DIM


@dataclass
class AEHyper:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 2e-3
    seed: int = 0


def init_autoencoder(config: AEConfig | None = None) -> AutoencoderParams:
    cfg = config or AEConfig()
    rng = np.random.default_rng(cfg.seed)
    p: dict[str, np.ndarray] = {}
    pd = PATCH * PATCH * 3
    nn.add_linear(p, rng, "enc.in", pd, cfg.width)
    for i in range(cfg.blocks):
        nn.add_mixer(p, rng, f"enc.mix{i}", N_TOKENS, cfg.width, cfg.token_hidden, cfg.channel_hidden)
    nn.add_norm(p, "enc.ln", cfg.width)
    nn.add_linear(p, rng, "enc.out", cfg.width, LATENT_CHANNELS)
    nn.add_linear(p, rng, "dec.in", LATENT_CHANNELS, cfg.width)
    for i in range(cfg.blocks):
        nn.add_mixer(p, rng, f"dec.mix{i}", N_TOKENS, cfg.width, cfg.token_hidden, cfg.channel_hidden)
    nn.add_norm(p, "dec.ln", cfg.width)
    nn.add_linear(p, rng, "dec.out", cfg.width, pd)
    return AutoencoderParams(weights=p, config=cfg)


def _check_images(images: np.ndarray) -> np.ndarray:
    x = np.asarray(images)
    if x.ndim == 3:
        x = x[None]
    if x.shape[1:] != IMAGE_SHAPE:
        raise BadResolution(f"expected (*, 32, 32, 3), got {np.shape(images)}")
    if np.any(x < 0) or np.any(x > 1):
        raise OutOfRange("pixel values must lie in [0, 1]")
    return x


def encode_graph(x: Tensor, p, blocks: int, latent_scale: float) -> Tensor:
    """(B, 32, 32, 3) -> (B, 256) scaled latent."""
    h = T.silu(nn.linear(nn.patchify(x, PATCH), p, "enc.in"))
    for i in range(blocks):
        h = nn.mixer_block(h, p, f"enc.mix{i}")
    z = nn.linear(nn.norm(h, p, "enc.ln"), p, "enc.out")  # (B, 64, 4)
    z = T.reshape(T.transpose(z, (0, 2, 1)), (x.shape[0], LATENT_DIM))
    return T.scale(z, latent_scale)


def decode_graph(z: Tensor, p, blocks: int, latent_scale: float) -> Tensor:
    """(B, 256) scaled latent -> (B, 32, 32, 3) in [0, 1]."""
    b = z.shape[0]
    h = T.transpose(T.reshape(T.scale(z, 1.0 / latent_scale), (b, LATENT_CHANNELS, N_TOKENS)), (0, 2, 1))
    h = nn.linear(h, p, "dec.in")
    for i in range(blocks):
        h = nn.mixer_block(h, p, f"dec.mix{i}")
    out = nn.linear(nn.norm(h, p, "dec.ln"), p, "dec.out")
    img = T.add(T.scale(T.tanh(out), 0.5), Tensor(np.float32(0.5)))
    return nn.unpatchify(img, PATCH, *IMAGE_SHAPE)


def encode(images: np.ndarray, params: AutoencoderParams) -> np.ndarray:
    """Images (32x32x3 or a batch) -> flattened latents (256,) / (B, 256)."""
    single = np.ndim(images) == 3
    x = _check_images(images).astype(np.float32)
    z = encode_graph(Tensor(x), nn.bind(params.weights), params.config.blocks, params.latent_scale).data
    return z[0] if single else z


def decode(z, params: AutoencoderParams) -> Tensor | np.ndarray:
    """Latent(s) -> image(s). Tensor in, Tensor out (differentiable); array in, array out."""
    as_tensor = isinstance(z, Tensor)
    zt = z if as_tensor else Tensor(np.asarray(z, dtype=np.float32))
    single = zt.ndim == 1
    if zt.shape[-1] != LATENT_DIM:
        raise ShapeMismatch(f"latent must have {LATENT_DIM} dims, got {zt.shape}")
    if single:
        zt = T.reshape(zt, (1, LATENT_DIM))
    img = decode_graph(zt, nn.bind(params.weights), params.config.blocks, params.latent_scale)
    if single:
        img = T.reshape(img, IMAGE_SHAPE)
    return img if as_tensor else img.data


def reconstruction_loss(x: Tensor, p, blocks: int) -> Tensor:
    z = encode_graph(x, p, blocks, 1.0)
    return T.mse(decode_graph(z, p, blocks, 1.0), x)


def train_autoencoder(images: np.ndarray, params: AutoencoderParams, hyper: AEHyper | None = None,
                      log=None) -> tuple[AutoencoderParams, list[float]]:
    """Adam on pixel MSE; returns new params (with latent_scale set) and per-epoch mean loss."""
    hp = hyper or AEHyper()
    x_all = _check_images(images).astype(np.float32)
    if len(x_all) == 0:
        raise EmptyDataset("no images to train on")
    rng = np.random.default_rng(hp.seed)
    weights = {k: v.copy() for k, v in params.weights.items()}
    state = AdamState(lr=hp.lr)
    blocks = params.config.blocks
    curve: list[float] = []
    for epoch in range(hp.epochs):
        state.lr = hp.lr * 0.5 * (1.0 + np.cos(np.pi * epoch / max(hp.epochs, 1)))
        losses, counts = [], []
        for idx in nn.batches(len(x_all), hp.batch_size, rng):
            xb = Tensor(x_all[idx])
            losses.append(nn.train_step(weights, lambda p: reconstruction_loss(xb, p, blocks), state))
            counts.append(len(idx))
        curve.append(float(np.average(losses, weights=counts)))
        if log:
            log(f"autoencoder epoch {epoch + 1}/{hp.epochs} loss {curve[-1]:.5f}")
    out = AutoencoderParams(weights=weights, config=params.config, latent_scale=1.0)
    out.latent_scale = fit_latent_scale(x_all, out)
    return out, curve


def fit_latent_scale(images: np.ndarray, params: AutoencoderParams, limit: int = 1024) -> float:
    raw = AutoencoderParams(params.weights, params.config, 1.0)
    z = encode(images[:limit], raw)
    sd = float(np.std(z.astype(np.float64)))
    return float(np.float32(1.0 / sd)) if sd > 0 else 1.0


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    err = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    return float("inf") if err == 0 else 10.0 * np.log10(1.0 / err)
