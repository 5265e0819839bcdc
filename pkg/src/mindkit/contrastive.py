"""Dual image/caption encoder trained with symmetric InfoNCE.

Image branch: 8x8 pixel patches (a 4x4 grid of 16 tokens) projected to
width 48, six residual mixer blocks, then mean-pool and a projection to the
shared 32-d embedding. The output of blocks 1..3 is exposed as structure
taps, each flattened token-major to 16*48 = 768 values.

Text branch: token + position embeddings over 8 slots, two mixer blocks and a
final norm give the conditioning matrix ``c`` (8 x 32). Only the first
``K_KEEP`` rows are used downstream, mirroring caption-length truncation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from mindkit import nn
from mindkit import tensor as T
from mindkit.errors import BadResolution, BatchTooSmall, EmptyDataset, TooLong, UnknownToken
from mindkit.neurosim import MAX_TOKENS, VOCAB
from mindkit.tensor import AdamState, Tensor

IMAGE_SHAPE = (32, 32, 3)
PATCH = 8
N_PATCHES = (32 // PATCH) ** 2
K_KEEP = 6
TEMPERATURE = 0.07
TAP_BLOCKS = (1, 2, 3)
TAP_NAMES = tuple(f"tap{i}" for i in TAP_BLOCKS)


@dataclass
class EncoderConfig:
    width: int = 48
    blocks: int = 6
    token_hidden: int = 32
    channel_hidden: int = 96
    d_txt: int = 32
    text_blocks: int = 2
    d_emb: int = 32
    vocab_size: int = len(VOCAB)
    seed: int = 0

    @property
    def tap_dim(self) -> int:
        return N_PATCHES * self.width


@dataclass
class EncoderParams:
    weights: dict[str, np.ndarray]
    config: EncoderConfig = field(default_factory=EncoderConfig)


@dataclass
class ContrastiveHyper:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 2e-3
    temperature: float = TEMPERATURE
    seed: int = 0


def init_encoder(config: EncoderConfig | None = None) -> EncoderParams:
    cfg = config or EncoderConfig()
    rng = np.random.default_rng(cfg.seed)
    p: dict[str, np.ndarray] = {}
    nn.add_linear(p, rng, "img.in", PATCH * PATCH * 3, cfg.width)
    p["img.pos"] = (0.02 * rng.standard_normal((N_PATCHES, cfg.width))).astype(np.float32)
    for i in range(cfg.blocks):
        nn.add_mixer(p, rng, f"img.blk{i + 1}", N_PATCHES, cfg.width, cfg.token_hidden, cfg.channel_hidden)
    nn.add_norm(p, "img.ln", cfg.width)
    nn.add_linear(p, rng, "img.proj", cfg.width, cfg.d_emb)
    p["txt.emb"] = (0.5 * rng.standard_normal((cfg.vocab_size, cfg.d_txt))).astype(np.float32)
    p["txt.pos"] = (0.1 * rng.standard_normal((MAX_TOKENS, cfg.d_txt))).astype(np.float32)
    for i in range(cfg.text_blocks):
        nn.add_mixer(p, rng, f"txt.blk{i}", MAX_TOKENS, cfg.d_txt, 2 * MAX_TOKENS, 2 * cfg.d_txt)
    nn.add_norm(p, "txt.ln", cfg.d_txt)
    nn.add_linear(p, rng, "txt.proj", cfg.d_txt, cfg.d_emb)
    return EncoderParams(weights=p, config=cfg)


# ---------------------------------------------------------------- graphs

def image_graph(x: Tensor, p, cfg: EncoderConfig) -> tuple[dict[str, Tensor], Tensor]:
    """(B, 32, 32, 3) -> ({tap_i: (B, 768)}, unit embedding (B, d_emb))."""
    b = x.shape[0]
    h = T.add(nn.linear(nn.patchify(x, PATCH), p, "img.in"), p["img.pos"])
    taps: dict[str, Tensor] = {}
    for i in range(1, cfg.blocks + 1):
        h = nn.mixer_block(h, p, f"img.blk{i}")
        if i in TAP_BLOCKS:
            taps[f"tap{i}"] = T.reshape(h, (b, cfg.tap_dim))
    pooled = T.mean(nn.norm(h, p, "img.ln"), axis=1)
    return taps, T.normalize(nn.linear(pooled, p, "img.proj"))


def image_taps_graph(x: Tensor, p, cfg: EncoderConfig, upto: int = max(TAP_BLOCKS)) -> dict[str, Tensor]:
    """Only the shallow taps (skips the deeper blocks)."""
    b = x.shape[0]
    h = T.add(nn.linear(nn.patchify(x, PATCH), p, "img.in"), p["img.pos"])
    taps: dict[str, Tensor] = {}
    for i in range(1, upto + 1):
        h = nn.mixer_block(h, p, f"img.blk{i}")
        if i in TAP_BLOCKS:
            taps[f"tap{i}"] = T.reshape(h, (b, cfg.tap_dim))
    return taps


def text_graph(tokens: np.ndarray, p, cfg: EncoderConfig) -> Tensor:
    """(B, 8) ids -> c as (B, 8, d_txt)."""
    onehot = Tensor(nn.one_hot(tokens, cfg.vocab_size))
    h = T.add(T.matmul(onehot, p["txt.emb"]), p["txt.pos"])
    for i in range(cfg.text_blocks):
        h = nn.mixer_block(h, p, f"txt.blk{i}")
    return nn.norm(h, p, "txt.ln")


def text_embedding_graph(c: Tensor, p) -> Tensor:
    kept = T.row_slice(c, 0, K_KEEP, axis=1)
    return T.normalize(nn.linear(T.mean(kept, axis=1), p, "txt.proj"))


# ---------------------------------------------------------------- public ops

def check_tokens(tokens, cfg: EncoderConfig | None = None) -> np.ndarray:
    """Validate and right-pad caption ids to (B, 8)."""
    cfg = cfg or EncoderConfig()
    seqs = [tokens] if np.ndim(tokens) <= 1 else list(tokens)
    out = np.zeros((len(seqs), MAX_TOKENS), dtype=np.int64)
    for i, seq in enumerate(seqs):
        seq = [int(t) for t in np.asarray(seq).reshape(-1)]
        if len(seq) > MAX_TOKENS:
            raise TooLong(f"caption has {len(seq)} tokens, max is {MAX_TOKENS}")
        bad = [t for t in seq if not 0 <= t < cfg.vocab_size]
        if bad:
            raise UnknownToken(f"token ids {bad} not in vocabulary")
        out[i, :len(seq)] = seq
    return out


def embed_text(tokens, params: EncoderParams) -> np.ndarray:
    """Caption ids -> c with shape (8, d_txt); a batch gives (B, 8, d_txt). Empty caption is all padding."""
    single = np.ndim(tokens) <= 1
    ids = check_tokens(tokens, params.config)
    c = text_graph(ids, nn.bind(params.weights), params.config).data
    return c[0] if single else c


def truncate_condition(c: np.ndarray) -> np.ndarray:
    """Keep the first ``K_KEEP`` token rows and flatten: (..., 8, d) -> (..., K_KEEP*d)."""
    c = np.asarray(c)
    kept = c[..., :K_KEEP, :]
    return kept.reshape(kept.shape[:-2] + (-1,))


def normalize_rows(c: np.ndarray) -> np.ndarray:
    """L2-normalized variant of the text features (per token row)."""
    n = np.linalg.norm(c, axis=-1, keepdims=True)
    return c / np.where(n > 0, n, 1.0)


def _check_images(images) -> np.ndarray:
    x = np.asarray(images, dtype=np.float32)
    if x.ndim == 3:
        x = x[None]
    if x.shape[1:] != IMAGE_SHAPE:
        raise BadResolution(f"expected (*, 32, 32, 3), got {np.shape(images)}")
    return x


def image_features(image, params: EncoderParams) -> dict[str, np.ndarray]:
    """Taps (768 each, token-major) and the unit-norm final embedding under key ``"embedding"``."""
    single = np.ndim(image) == 3
    x = _check_images(image)
    taps, emb = image_graph(Tensor(x), nn.bind(params.weights), params.config)
    out = {k: v.data for k, v in taps.items()}
    out["embedding"] = emb.data
    if single:
        out = {k: v[0] for k, v in out.items()}
    return out


def image_embedding(images, params: EncoderParams) -> np.ndarray:
    return image_features(images, params)["embedding"]


def text_embedding(tokens, params: EncoderParams) -> np.ndarray:
    ids = check_tokens(tokens, params.config)
    p = nn.bind(params.weights)
    return text_embedding_graph(text_graph(ids, p, params.config), p).data


def info_nce(img: Tensor, txt: Tensor, temperature: float = TEMPERATURE) -> Tensor:
    """Symmetric cross-entropy over the in-batch similarity matrix."""
    b = img.shape[0]
    logits = T.scale(T.matmul(img, T.transpose(txt)), 1.0 / temperature)
    eye = Tensor(np.eye(b, dtype=img.data.dtype))
    i2t = T.sum(T.mul(T.log_softmax(logits), eye))
    t2i = T.sum(T.mul(T.log_softmax(T.transpose(logits)), eye))
    return T.scale(T.add(i2t, t2i), -0.5 / b)


def pair_loss(x: Tensor, tokens: np.ndarray, p, cfg: EncoderConfig, temperature: float) -> Tensor:
    _, img = image_graph(x, p, cfg)
    txt = text_embedding_graph(text_graph(tokens, p, cfg), p)
    return info_nce(img, txt, temperature)


def retrieval_accuracy(images: np.ndarray, tokens: np.ndarray, params: EncoderParams) -> float:
    """Top-1 image->caption retrieval over the given set; identical captions count as hits."""
    img = image_embedding(images, params)
    txt = text_embedding(tokens, params)
    best = np.argmax(img @ txt.T, axis=1)
    ids = check_tokens(tokens, params.config)
    return float(np.mean([np.array_equal(ids[b], ids[i]) for i, b in enumerate(best)]))


def train_contrastive(images: np.ndarray, tokens: np.ndarray, params: EncoderParams,
                      hyper: ContrastiveHyper | None = None, held_out: tuple[np.ndarray, np.ndarray] | None = None,
                      log=None) -> tuple[EncoderParams, list[float], list[float]]:
    """Returns (trained params, per-epoch loss, per-epoch held-out top-1 accuracy)."""
    hp = hyper or ContrastiveHyper()
    x_all = _check_images(images)
    ids = check_tokens(tokens, params.config)
    if len(x_all) == 0:
        raise EmptyDataset("no pairs to train on")
    if hp.batch_size < 4 or len(x_all) < 4:
        raise BatchTooSmall("InfoNCE needs at least 4 pairs per batch")
    rng = np.random.default_rng(hp.seed)
    weights = {k: v.copy() for k, v in params.weights.items()}
    state = AdamState(lr=hp.lr)
    cfg = params.config
    losses_curve, acc_curve = [], []
    for epoch in range(hp.epochs):
        state.lr = hp.lr * 0.5 * (1.0 + np.cos(np.pi * epoch / max(hp.epochs, 1)))
        losses, counts = [], []
        for idx in nn.batches(len(x_all), hp.batch_size, rng):
            if len(idx) < 4:
                continue
            xb, tb = Tensor(x_all[idx]), ids[idx]
            losses.append(nn.train_step(weights, lambda p: pair_loss(xb, tb, p, cfg, hp.temperature), state))
            counts.append(len(idx))
        losses_curve.append(float(np.average(losses, weights=counts)))
        if held_out is not None:
            acc_curve.append(retrieval_accuracy(held_out[0], held_out[1], EncoderParams(weights, cfg)))
        if log:
            acc = f" held-out top1 {acc_curve[-1]:.3f}" if acc_curve else ""
            log(f"contrastive epoch {epoch + 1}/{hp.epochs} loss {losses_curve[-1]:.4f}{acc}")
    return EncoderParams(weights=weights, config=cfg), losses_curve, acc_curve
