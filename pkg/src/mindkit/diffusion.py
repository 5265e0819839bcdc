"""DDPM schedule, forward noising, the conditional noise predictor and img2img sampling.

The noise predictor works on the 256-d latent viewed as a 4x4 grid of 2x2
spatial cells (16 tokens of 4 channels x 2 x 2 = 16 values). Each block is
cross-attention to the caption rows, then token mixing, then a channel MLP,
all residual. Timesteps are 1..T; ``alpha_bar[0] == 1`` so step 0 means
"clean".
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from mindkit import nn
from mindkit import tensor as T
from mindkit.errors import BadRange, EmptyDataset, ShapeMismatch, StepOutOfRange
from mindkit.tensor import AdamState, Tensor

LATENT_DIM = 256
N_TOKENS = 16
TOKEN_DIM = 16


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int
    beta: np.ndarray  # (T,), beta[t-1] is beta_t
    alpha: np.ndarray  # (T,)
    alpha_bar: np.ndarray  # (T+1,), alpha_bar[0] == 1

    def abar(self, t: int) -> float:
        if not 0 <= t <= self.T:
            raise StepOutOfRange(f"step {t} outside 0..{self.T}")
        return float(self.alpha_bar[t])


def make_schedule(T_steps: int = 300, beta_start: float = 1e-4, beta_end: float = 0.02) -> DiffusionSchedule:
    if T_steps < 1 or not (0 < beta_start <= beta_end < 1):
        raise BadRange(f"need T >= 1 and 0 < beta_start <= beta_end < 1 (got {T_steps}, {beta_start}, {beta_end})")
    beta = np.linspace(beta_start, beta_end, T_steps, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.concatenate([[1.0], np.cumprod(alpha)])
    return DiffusionSchedule(T_steps, beta, alpha, alpha_bar)


def forward_noise(z, t: int, eps, sched: DiffusionSchedule):
    """sqrt(abar_t) * z + sqrt(1 - abar_t) * eps; tensors stay differentiable."""
    if np.shape(z) != np.shape(eps):
        raise ShapeMismatch(f"z {np.shape(z)} vs eps {np.shape(eps)}")
    ab = sched.abar(t)
    a, b = math.sqrt(ab), math.sqrt(1.0 - ab)
    if isinstance(z, Tensor) or isinstance(eps, Tensor):
        z = z if isinstance(z, Tensor) else Tensor(z)
        eps = eps if isinstance(eps, Tensor) else Tensor(eps)
        return T.add(T.scale(z, a), T.scale(eps, b))
    z = np.asarray(z)
    return (a * z + b * np.asarray(eps)).astype(z.dtype, copy=False)


# ---------------------------------------------------------------- cross-attention

def cross_attention(phi: Tensor, c: Tensor, weights: Mapping[str, Tensor], heads: int = 1,
                    return_attention: bool = False):
    """softmax(Q K^T / sqrt(d)) V, projected back to the query width.

    ``phi``: (n, d_model) or (B, n, d_model); ``c``: (m, d_cond) or (B, m, d_cond);
    ``weights``: ``wq`` (d_model x d_model), ``wk``/``wv`` (d_cond x d_model), ``wo``.
    ``d`` is the per-head width d_model / heads.
    """
    phi = phi if isinstance(phi, Tensor) else Tensor(phi)
    c = c if isinstance(c, Tensor) else Tensor(c)
    w = {k: (v if isinstance(v, Tensor) else Tensor(v)) for k, v in weights.items()}
    single = phi.ndim == 2
    if single:
        phi = T.reshape(phi, (1,) + phi.shape)
        c = T.reshape(c, (1,) + c.shape) if c.ndim == 2 else c
    if c.ndim != 3 or phi.ndim != 3 or c.shape[0] != phi.shape[0]:
        raise ShapeMismatch(f"phi {phi.shape} / c {c.shape}")
    b, n, dm = phi.shape
    m = c.shape[1]
    if w["wq"].shape[0] != dm or w["wk"].shape[0] != c.shape[2] or dm % heads:
        raise ShapeMismatch("projection shapes do not match inputs")
    dh = dm // heads
    q = _split_heads(T.matmul(phi, w["wq"]), heads)  # (B*h, n, dh)
    k = _split_heads(T.matmul(c, w["wk"]), heads)  # (B*h, m, dh)
    v = _split_heads(T.matmul(c, w["wv"]), heads)
    att = T.softmax(T.scale(T.bmm(q, T.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh)))
    out = T.bmm(att, v)  # (B*h, n, dh)
    out = T.reshape(T.transpose(T.reshape(out, (b, heads, n, dh)), (0, 2, 1, 3)), (b, n, dm))
    out = T.matmul(out, w["wo"])
    if single:
        out = T.reshape(out, (n, dm))
    if return_attention:
        return out, T.reshape(att, (b, heads, n, m))
    return out


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, dm = x.shape
    y = T.transpose(T.reshape(x, (b, n, heads, dm // heads)), (0, 2, 1, 3))
    return T.reshape(y, (b * heads, n, dm // heads))


# ---------------------------------------------------------------- denoiser

@dataclass
class DenoiserConfig:
    d_model: int = 32
    heads: int = 2
    blocks: int = 2
    d_cond: int = 32
    token_hidden: int = 32
    channel_hidden: int = 64
    T: int = 300
    seed: int = 0


@dataclass
class DenoiserParams:
    weights: dict[str, np.ndarray]
    config: DenoiserConfig = field(default_factory=DenoiserConfig)


@dataclass
class DenoiserHyper:
    epochs: int = 40
    batch_size: int = 64
    lr: float = 2e-3
    seed: int = 0


def sinusoidal_table(n: int, d: int) -> np.ndarray:
    pos = np.arange(1, n + 1, dtype=np.float64)[:, None]
    freqs = np.exp(-math.log(1000.0) * np.arange(0, d, 2, dtype=np.float64) / d)[None, :]
    table = np.zeros((n, d))
    table[:, 0::2] = np.sin(pos * freqs)
    table[:, 1::2] = np.cos(pos * freqs)
    return table.astype(np.float32)


def init_denoiser(config: DenoiserConfig | None = None) -> DenoiserParams:
    cfg = config or DenoiserConfig()
    if cfg.d_model % cfg.heads:
        raise ShapeMismatch("head count must divide d_model")
    rng = np.random.default_rng(cfg.seed)
    d = cfg.d_model
    p: dict[str, np.ndarray] = {"time.table": sinusoidal_table(cfg.T, d)}
    nn.add_linear(p, rng, "time.mlp", d, d)
    nn.add_linear(p, rng, "in", TOKEN_DIM, d)
    p["pos"] = (0.02 * rng.standard_normal((N_TOKENS, d))).astype(np.float32)
    for i in range(cfg.blocks):
        nn.add_linear(p, rng, f"blk{i}.time", d, d, gain=0.5)
        nn.add_norm(p, f"blk{i}.lnq", d)
        p[f"blk{i}.wq"] = nn.glorot(rng, d, d)
        p[f"blk{i}.wk"] = nn.glorot(rng, cfg.d_cond, d)
        p[f"blk{i}.wv"] = nn.glorot(rng, cfg.d_cond, d)
        p[f"blk{i}.wo"] = nn.glorot(rng, d, d, gain=0.5)
        nn.add_mixer(p, rng, f"blk{i}.mix", N_TOKENS, d, cfg.token_hidden, cfg.channel_hidden)
    nn.add_norm(p, "out.ln", d)
    nn.add_linear(p, rng, "out", d, TOKEN_DIM, gain=0.1)
    return DenoiserParams(weights=p, config=cfg)


def latent_to_tokens(z: Tensor) -> Tensor:
    """(B, 256) channel-major 4x8x8 -> (B, 16, 16) over 2x2 spatial cells."""
    b = z.shape[0]
    y = T.reshape(z, (b, 4, 4, 2, 4, 2))
    y = T.transpose(y, (0, 2, 4, 1, 3, 5))
    return T.reshape(y, (b, N_TOKENS, TOKEN_DIM))


def tokens_to_latent(x: Tensor) -> Tensor:
    b = x.shape[0]
    y = T.reshape(x, (b, 4, 4, 4, 2, 2))
    y = T.transpose(y, (0, 3, 1, 4, 2, 5))
    return T.reshape(y, (b, LATENT_DIM))


def _timesteps(t, b: int, T_max: int) -> np.ndarray:
    ts = np.broadcast_to(np.asarray(t, dtype=np.int64), (b,))
    if np.any(ts < 1) or np.any(ts > T_max):
        raise StepOutOfRange(f"denoiser timesteps must lie in 1..{T_max}")
    return ts


def eps_graph(z_t: Tensor, t, c: Tensor, p, cfg: DenoiserConfig) -> Tensor:
    """Noise prediction for a batch: z_t (B, 256), c (B, m, d_cond)."""
    b = z_t.shape[0]
    ts = _timesteps(t, b, cfg.T)
    onehot = Tensor(nn.one_hot(ts - 1, cfg.T, dtype=z_t.data.dtype))
    temb = T.silu(nn.linear(T.matmul(onehot, p["time.table"]), p, "time.mlp"))  # (B, d)
    spread = Tensor(np.ones((b, N_TOKENS, 1), dtype=z_t.data.dtype))
    h = T.add(nn.linear(latent_to_tokens(z_t), p, "in"), p["pos"])
    for i in range(cfg.blocks):
        tb = T.reshape(nn.linear(temb, p, f"blk{i}.time"), (b, 1, cfg.d_model))
        h = T.add(h, T.bmm(spread, tb))
        w = {k: p[f"blk{i}.{k}"] for k in ("wq", "wk", "wv", "wo")}
        h = T.add(h, cross_attention(nn.norm(h, p, f"blk{i}.lnq"), c, w, heads=cfg.heads))
        h = nn.mixer_block(h, p, f"blk{i}.mix")
    out = nn.linear(nn.norm(h, p, "out.ln"), p, "out")
    return tokens_to_latent(out)


def predict_eps(z_t, t, c, params: DenoiserParams):
    """eps_theta(z_t, t, c). Accepts a single latent (256,) with c (m, d_cond) or batches.

    Tensor inputs return a Tensor (differentiable); arrays return arrays.
    """
    as_tensor = isinstance(z_t, Tensor) or isinstance(c, Tensor)
    zt = z_t if isinstance(z_t, Tensor) else Tensor(np.asarray(z_t, dtype=np.float32))
    ct = c if isinstance(c, Tensor) else Tensor(np.asarray(c, dtype=np.float32))
    single = zt.ndim == 1
    if single:
        zt = T.reshape(zt, (1, zt.shape[0]))
        ct = T.reshape(ct, (1,) + ct.shape)
    if zt.ndim != 2 or zt.shape[1] != LATENT_DIM:
        raise ShapeMismatch(f"latent must be (B, {LATENT_DIM}), got {zt.shape}")
    if ct.ndim != 3 or ct.shape[0] != zt.shape[0] or ct.shape[2] != params.config.d_cond:
        raise ShapeMismatch(f"condition must be (B, m, {params.config.d_cond}), got {ct.shape}")
    out = eps_graph(zt, t, ct, nn.bind(params.weights), params.config)
    if single:
        out = T.reshape(out, (LATENT_DIM,))
    return out if as_tensor else out.data


def semantic_loss(eps_pred: Tensor, eps: Tensor) -> Tensor:
    """Per-element mean of ||eps - eps_pred||^2."""
    return T.mse(eps_pred, eps)


def train_denoiser(latents: np.ndarray, conditions: np.ndarray, params: DenoiserParams,
                   sched: DiffusionSchedule, hyper: DenoiserHyper | None = None,
                   log=None) -> tuple[DenoiserParams, list[float]]:
    """Minimize the eps-prediction objective with uniformly drawn steps; returns per-epoch mean loss."""
    hp = hyper or DenoiserHyper()
    z_all = np.asarray(latents, dtype=np.float32)
    c_all = np.asarray(conditions, dtype=np.float32)
    if len(z_all) == 0:
        raise EmptyDataset("no latents to train on")
    if len(c_all) != len(z_all):
        raise ShapeMismatch("latents and conditions differ in count")
    rng = np.random.default_rng(hp.seed)
    weights = {k: v.copy() for k, v in params.weights.items()}
    state = AdamState(lr=hp.lr)
    cfg = params.config
    sqrt_ab = np.sqrt(sched.alpha_bar).astype(np.float32)
    sqrt_1mab = np.sqrt(1.0 - sched.alpha_bar).astype(np.float32)
    curve: list[float] = []
    for epoch in range(hp.epochs):
        state.lr = hp.lr * 0.5 * (1.0 + np.cos(np.pi * epoch / max(hp.epochs, 1)))
        losses, counts = [], []
        for idx in nn.batches(len(z_all), hp.batch_size, rng):
            ts = rng.integers(1, sched.T + 1, size=len(idx))
            eps = rng.standard_normal((len(idx), LATENT_DIM)).astype(np.float32)
            zt = sqrt_ab[ts, None] * z_all[idx] + sqrt_1mab[ts, None] * eps
            zt_t, c_t, eps_t = Tensor(zt), Tensor(c_all[idx]), Tensor(eps)
            losses.append(nn.train_step(
                weights, lambda p: semantic_loss(eps_graph(zt_t, ts, c_t, p, cfg), eps_t), state))
            counts.append(len(idx))
        curve.append(float(np.average(losses, weights=counts)))
        if log:
            log(f"denoiser epoch {epoch + 1}/{hp.epochs} loss {curve[-1]:.4f}")
    return DenoiserParams(weights=weights, config=cfg), curve


# ---------------------------------------------------------------- sampling

def chain_timesteps(t_start: int, stride: int = 1) -> list[int]:
    """t_start, t_start - stride, ..., down to a positive step, then 0."""
    if stride < 1:
        raise BadRange("stride must be >= 1")
    if t_start == 0:
        return [0]
    return list(range(t_start, 0, -stride)) + [0]


def _gaussian(seed: int, counter: int, dim: int) -> np.ndarray:
    """Counter-based stream: Philox keyed on (seed, counter)."""
    key = np.array([int(seed) & 0xFFFFFFFFFFFFFFFF, int(counter)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key)).standard_normal(dim).astype(np.float32)


@dataclass
class ChainNoise:
    """Every random draw of one img2img run, so the chain can be replayed deterministically."""
    timesteps: list[int]
    eps0: np.ndarray  # (B, 256)
    steps: list[np.ndarray]  # one (B, 256) draw per transition; the last (to step 0) is unused

    def select(self, rows: Sequence[int] | np.ndarray) -> "ChainNoise":
        rows = np.asarray(rows)
        return ChainNoise(list(self.timesteps), self.eps0[rows], [s[rows] for s in self.steps])


def draw_chain_noise(seeds: Sequence[int], t_start: int, stride: int = 1, dim: int = LATENT_DIM) -> ChainNoise:
    ts = chain_timesteps(t_start, stride)
    eps0 = np.stack([_gaussian(s, 0, dim) for s in seeds])
    steps = [np.stack([_gaussian(s, k + 1, dim) for s in seeds]) for k in range(len(ts) - 1)]
    return ChainNoise(ts, eps0, steps)


def run_chain(z: Tensor, c: Tensor, noise: ChainNoise, sched: DiffusionSchedule, params: DenoiserParams,
              p=None) -> Tensor:
    """Noise ``z`` to the first step, then ancestral steps with frozen draws; differentiable in (z, c)."""
    ts = noise.timesteps
    if ts[0] == 0:
        return z
    if not 1 <= ts[0] <= sched.T:
        raise StepOutOfRange(f"t_start {ts[0]} outside 1..{sched.T}")
    p = nn.bind(params.weights) if p is None else p
    x = forward_noise(z, ts[0], Tensor(noise.eps0.astype(z.data.dtype, copy=False)), sched)
    for k in range(len(ts) - 1):
        t, s = ts[k], ts[k + 1]
        ab_t, ab_s = sched.alpha_bar[t], sched.alpha_bar[s]
        eps_hat = eps_graph(x, t, c, p, params.config)
        beta = 1.0 - ab_t / ab_s
        # posterior q(x_s | x_t, x0) with x0 = (x - sqrt(1-ab_t) eps_hat) / sqrt(ab_t)
        c_x0 = math.sqrt(ab_s) * beta / (1.0 - ab_t)
        c_xt = math.sqrt(ab_t / ab_s) * (1.0 - ab_s) / (1.0 - ab_t)
        a_x = c_x0 / math.sqrt(ab_t) + c_xt
        a_e = -c_x0 * math.sqrt(1.0 - ab_t) / math.sqrt(ab_t)
        x = T.add(T.scale(x, a_x), T.scale(eps_hat, a_e))
        if s > 0:
            var = (1.0 - ab_s) / (1.0 - ab_t) * beta
            x = T.add(x, Tensor((math.sqrt(var) * noise.steps[k]).astype(x.data.dtype, copy=False)))
    return x


def sample_img2img(z_decoded, c, t_start: int, sched: DiffusionSchedule, params: DenoiserParams,
                   seed, stride: int = 1) -> np.ndarray:
    """Partially noise ``z_decoded`` to ``t_start`` and denoise back to step 0 conditioned on ``c``.

    ``seed`` is an int (shared by a batch) or one seed per row; the result is
    a pure function of (z_decoded, c, params, seed).
    """
    if not 0 <= t_start <= sched.T:
        raise StepOutOfRange(f"t_start {t_start} outside 0..{sched.T}")
    z = np.asarray(z_decoded, dtype=np.float32)
    if t_start == 0:
        return z.copy()
    cc = np.asarray(c, dtype=np.float32)
    single = z.ndim == 1
    if single:
        z, cc = z[None], cc[None]
    seeds = [int(seed)] * len(z) if np.ndim(seed) == 0 else [int(s) for s in seed]
    noise = draw_chain_noise(seeds, t_start, stride)
    out = run_chain(Tensor(z), Tensor(cc), noise, sched, params).data
    return out[0] if single else out
