"""Two-stage reconstruction from voxel responses.

Stage 1 decodes the caption condition ``c`` and the latent ``z`` from voxels
and runs conditional img2img from ``z``. Stage 2 treats the whole generator
(strided denoising chain with frozen noises, then the autoencoder decoder) as
a differentiable function of ``(c, z)`` and runs Adam on the masked squared
distance between the image's encoder taps and the taps decoded from voxels.

Items never interact: every op in the chain is row-wise, so optimizing a
batch with a summed loss is identical to optimizing each item alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from mindkit import autoencoder as ae
from mindkit import contrastive as ce
from mindkit import diffusion as df
from mindkit import metrics as mt
from mindkit import nn
from mindkit import tensor as T
from mindkit.io import quantize
from mindkit.decode import DecoderSet, FeatureMask, aggregate_accuracy, item_accuracy
from mindkit.errors import (BadRange, DecoderMissing, EmptyAfterFilter, ModelMissing, ShapeMismatch,
                            TapMismatch)
from mindkit.tensor import AdamState, Tape, Tensor

Z_COUNTER = 1 << 40  # Philox counter reserved for the random-z ablation draw


@dataclass(frozen=True)
class ReconstructionConfig:
    t_start_frac: float = 0.8
    iterations: int = 180
    lr: float = 0.05
    lr_c: float | None = None
    lr_z: float | None = None
    taps: tuple[str, ...] = ce.TAP_NAMES
    threshold: float = 0.3
    seed: int = 0
    without_control: bool = False
    without_z: bool = False
    stride: int = 8
    snapshot_every: int = 30
    chunk: int = 64

    def validate(self) -> "ReconstructionConfig":
        if self.iterations < 0:
            raise BadRange("iteration count must be >= 0")
        if not 0.0 <= self.t_start_frac <= 1.0:
            raise BadRange("t_start fraction must lie in [0, 1]")
        if self.lr <= 0 or (self.lr_c is not None and self.lr_c <= 0) or (self.lr_z is not None and self.lr_z <= 0):
            raise BadRange("learning rates must be positive")
        if self.stride < 1 or self.chunk < 1 or self.snapshot_every < 1:
            raise BadRange("stride, chunk and snapshot interval must be >= 1")
        bad = [t for t in self.taps if t not in ce.TAP_NAMES]
        if bad or not self.taps:
            raise TapMismatch(f"taps must be a non-empty subset of {ce.TAP_NAMES}, got {self.taps}")
        return self

    def t_start(self, T_steps: int) -> int:
        return int(math.floor(self.t_start_frac * T_steps + 0.5))

    def to_json(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["taps"] = list(self.taps)
        return d

    @classmethod
    def from_json(cls, d: Mapping) -> "ReconstructionConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if "taps" in known:
            known["taps"] = tuple(known["taps"])
        return cls(**known).validate()


@dataclass
class Models:
    autoencoder: ae.AutoencoderParams
    encoder: ce.EncoderParams
    denoiser: df.DenoiserParams
    schedule: df.DiffusionSchedule = field(default_factory=df.make_schedule)


def item_seed(seed: int, item: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(item), 0x2EC]).generate_state(1, np.uint64)[0])


@dataclass
class Stage1Result:
    items: list[int]
    c: np.ndarray  # (B, K_KEEP, d_txt)
    z: np.ndarray  # (B, 256)
    image: np.ndarray  # (B, 32, 32, 3), the initial reconstruction
    noise: df.ChainNoise
    t_start: int


@dataclass
class ReconstructionState:
    """Per-item optimization record. ``trajectory[i]`` has one loss per completed iteration plus the start."""
    c: np.ndarray
    z: np.ndarray
    trajectory: list[list[float]]
    snapshots: dict[int, np.ndarray]  # iteration -> (B, 32, 32, 3)
    best_image: np.ndarray
    best_loss: np.ndarray
    best_iteration: np.ndarray
    status: list[str]


def _check_models(models: Models | None) -> Models:
    if models is None or any(m is None for m in (models.autoencoder, models.encoder, models.denoiser)):
        raise ModelMissing("autoencoder, encoder and denoiser must all be trained")
    return models


def _chunks(n: int, size: int) -> list[slice]:
    return [slice(i, min(i + size, n)) for i in range(0, n, size)]


def decode_condition(decoded: Mapping[str, np.ndarray], models: Models) -> np.ndarray:
    c = np.asarray(decoded["c"], dtype=np.float32)
    d_txt = models.encoder.config.d_txt
    if c.shape[-1] != ce.K_KEEP * d_txt:
        raise ShapeMismatch(f"decoded c has width {c.shape[-1]}, expected {ce.K_KEEP * d_txt}")
    return c.reshape(-1, ce.K_KEEP, d_txt)


def stage1(x_voxels, decoders: DecoderSet | None, models: Models | None, config: ReconstructionConfig,
           items: Sequence[int] | None = None, decoded: Mapping[str, np.ndarray] | None = None) -> Stage1Result:
    """Decoded (c, z) and the img2img reconstruction for every row of ``x_voxels``."""
    cfg = config.validate()
    models = _check_models(models)
    if decoded is None:
        if decoders is None or not {"c", "z"} <= set(decoders.spaces):
            raise DecoderMissing("decoders for c and z are required")
        decoded = decoders.predict(np.atleast_2d(x_voxels))
    c = decode_condition(decoded, models)
    n = len(c)
    items = list(range(n)) if items is None else [int(i) for i in items]
    seeds = [item_seed(cfg.seed, i) for i in items]
    if cfg.without_z:
        z = np.stack([df._gaussian(s, Z_COUNTER, ae.LATENT_DIM) for s in seeds]) if n else np.zeros((0, ae.LATENT_DIM), np.float32)
    else:
        z = np.asarray(decoded["z"], dtype=np.float32).reshape(n, ae.LATENT_DIM)
    t_start = cfg.t_start(models.schedule.T)
    noise = df.draw_chain_noise(seeds, t_start, cfg.stride)
    image = np.zeros((n,) + ae.IMAGE_SHAPE, dtype=np.float32)
    gen = _Generator(models, noise)
    for sl in _chunks(n, cfg.chunk):
        image[sl] = gen.image(Tensor(z[sl]), Tensor(c[sl]), sl).data
    return Stage1Result(items=items, c=c, z=z, image=image, noise=noise, t_start=t_start)


class _Generator:
    """(c, z) -> image through the frozen-noise chain and the autoencoder decoder."""

    def __init__(self, models: Models, noise: df.ChainNoise):
        self.models = models
        self.noise = noise
        self.p_den = nn.bind(models.denoiser.weights)
        self.p_ae = nn.bind(models.autoencoder.weights)
        self.p_enc = nn.bind(models.encoder.weights)

    def image(self, z: Tensor, c: Tensor, rows: slice) -> Tensor:
        m = self.models
        latent = df.run_chain(z, c, self.noise.select(np.arange(rows.start, rows.stop)), m.schedule, m.denoiser,
                              self.p_den)
        return ae.decode_graph(latent, self.p_ae, m.autoencoder.config.blocks, m.autoencoder.latent_scale)

    def taps(self, image: Tensor, names: Sequence[str]) -> dict[str, Tensor]:
        upto = max(int(n[3:]) for n in names)
        return ce.image_taps_graph(image, self.p_enc, self.models.encoder.config, upto=upto)


# ---------------------------------------------------------------- structure loss

def _mask_keep(mask, width: int) -> np.ndarray:
    keep = mask.keep if isinstance(mask, FeatureMask) else (
        np.ones(width, dtype=bool) if mask is None else np.asarray(mask, dtype=bool))
    if keep.shape != (width,):
        raise TapMismatch(f"mask width {keep.shape} does not match tap width {width}")
    return keep


def tap_distance(phi: Tensor, target, mask=None) -> Tensor:
    """Per-row sum over kept dims of (phi - target)^2; returns shape (B,).

    Target values outside the mask are ignored (decoders leave them NaN).
    """
    phi = phi if isinstance(phi, Tensor) else Tensor(phi)
    tgt = np.atleast_2d(np.asarray(target, dtype=phi.data.dtype))
    if phi.ndim == 1:
        phi = T.reshape(phi, (1, phi.shape[0]))
    if tgt.shape != phi.shape:
        raise TapMismatch(f"tap shape {phi.shape} vs target {tgt.shape}")
    keep = _mask_keep(mask, phi.shape[1])
    weights = keep.astype(phi.data.dtype)
    diff = T.mul(T.sub(phi, Tensor(np.where(keep, tgt, 0.0).astype(phi.data.dtype))), Tensor(weights))
    return T.sum(T.mul(diff, diff), axis=1)


def structure_terms(taps: Mapping[str, Tensor], targets: Mapping[str, np.ndarray],
                    masks: Mapping[str, object], names: Sequence[str]) -> Tensor:
    """Per-item loss (B,) summed over the named taps."""
    total = None
    for name in names:
        if name not in taps or name not in targets:
            raise TapMismatch(f"tap {name!r} missing from image taps or decoded targets")
        term = tap_distance(taps[name], targets[name], masks.get(name))
        total = term if total is None else T.add(total, term)
    return total


def structure_loss(image, targets: Mapping[str, np.ndarray], masks: Mapping[str, object], encoder: ce.EncoderParams,
                   taps: Sequence[str] = ce.TAP_NAMES, p=None) -> Tensor:
    """Scalar masked tap distance of ``image`` (B, 32, 32, 3) to decoded targets, summed over items."""
    img = image if isinstance(image, Tensor) else Tensor(np.asarray(image))
    if img.ndim == 3:
        img = T.reshape(img, (1,) + img.shape)
    p = nn.bind(encoder.weights) if p is None else p
    upto = max(int(n[3:]) for n in taps)
    phi = ce.image_taps_graph(img, p, encoder.config, upto=upto)
    return T.sum(structure_terms(phi, targets, masks, taps))


# ---------------------------------------------------------------- stage 2

def _optimize_chunk(models: Models, noise: df.ChainNoise, sl: slice, c: np.ndarray, z: np.ndarray,
                    image0: np.ndarray, targets: Mapping[str, np.ndarray], masks: Mapping[str, object],
                    cfg: ReconstructionConfig, iters: int, log=None) -> dict:
    gen = _Generator(models, noise)
    k = len(c)
    c, z = c.copy(), z.copy()
    best_c, best_z = c.copy(), z.copy()
    best_image = image0.copy()
    best_loss = np.full(k, np.inf)
    best_iter = np.zeros(k, dtype=np.int64)
    trajectory: list[list[float]] = [[] for _ in range(k)]
    status = ["ok"] * k
    snapshots: dict[int, np.ndarray] = {}
    alive = np.ones(k, dtype=bool)
    st_c = AdamState(lr=cfg.lr_c if cfg.lr_c is not None else cfg.lr)
    st_z = AdamState(lr=cfg.lr_z if cfg.lr_z is not None else cfg.lr)
    for it in range(iters + 1):
        tape = Tape()
        cl, zl = tape.leaf(c), tape.leaf(z)
        img = gen.image(zl, cl, sl)
        per_item = structure_terms(gen.taps(img, cfg.taps), targets, masks, cfg.taps)
        losses = per_item.data.astype(np.float64)
        finite = np.isfinite(losses)
        for j in np.nonzero(alive & ~finite)[0]:
            status[j] = f"nonfinite@{it}"
            alive[j] = False
            c[j], z[j] = best_c[j], best_z[j]
        for j in np.nonzero(alive)[0]:
            trajectory[j].append(float(losses[j]))
            if losses[j] < best_loss[j]:
                best_loss[j] = losses[j]
                best_iter[j] = it
                best_image[j] = img.data[j]
                best_c[j], best_z[j] = c[j], z[j]
        if it % cfg.snapshot_every == 0 or it == iters:
            snapshots[it] = img.data.copy()
        if it == iters or not alive.any():
            break
        if not finite.all():
            continue  # restored rows are re-evaluated before the next step
        g = tape.backward(T.sum(per_item), wrt=[cl, zl])
        (c_new,) = T.adam_step([cl], [g[cl]], st_c)
        (z_new,) = T.adam_step([zl], [g[zl]], st_z)
        c = np.where(alive[:, None, None], c_new.data, c)
        z = np.where(alive[:, None], z_new.data, z)
        if log and it % 30 == 0:
            log(f"stage2 items {sl.start}-{sl.stop - 1} iter {it} mean loss {float(np.mean(losses[alive])):.4f}")
    return {"c": best_c, "z": best_z, "trajectory": trajectory, "snapshots": snapshots, "best_image": best_image,
            "best_loss": best_loss, "best_iteration": best_iter, "status": status}


def _chunk_job(args):
    return _optimize_chunk(*args)


def stage2(s1: Stage1Result, targets: Mapping[str, np.ndarray], masks: Mapping[str, object], models: Models,
           config: ReconstructionConfig, log=None, jobs: int = 1) -> ReconstructionState:
    """Adam on (c, z) against the structure loss; keeps each item's lowest-loss snapshot.

    Items are processed in fixed chunks of ``config.chunk``; with ``jobs > 1``
    chunks run in worker processes and are merged in item order, so the
    result does not depend on ``jobs``.
    """
    cfg = config.validate()
    models = _check_models(models)
    n = len(s1.items)
    iters = 0 if cfg.without_control else cfg.iterations
    work = [(models, s1.noise, sl, s1.c[sl], s1.z[sl], s1.image[sl],
             {k: np.atleast_2d(targets[k])[sl] for k in cfg.taps}, masks, cfg, iters)
            for sl in _chunks(n, cfg.chunk)]
    if jobs > 1 and len(work) > 1:
        import multiprocessing as mp
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs, mp_context=mp.get_context("fork")) as pool:
            parts = list(pool.map(_chunk_job, work))
    else:
        parts = [_optimize_chunk(*w, log=log) for w in work]
    snaps: dict[int, np.ndarray] = {}
    for w, part in zip(work, parts):
        for it, im in part["snapshots"].items():
            snaps.setdefault(it, np.zeros_like(s1.image))[w[2]] = im

    def cat(key):
        return np.concatenate([p[key] for p in parts]) if parts else np.zeros((0,))

    return ReconstructionState(
        c=cat("c") if parts else s1.c.copy(), z=cat("z") if parts else s1.z.copy(),
        trajectory=[t for p in parts for t in p["trajectory"]], snapshots=snaps,
        best_image=cat("best_image") if parts else s1.image.copy(),
        best_loss=cat("best_loss") if parts else np.zeros(0),
        best_iteration=cat("best_iteration") if parts else np.zeros(0, np.int64),
        status=[st for p in parts for st in p["status"]])


# ---------------------------------------------------------------- pipeline

@dataclass
class PipelineResult:
    items: list[int]
    accuracy: np.ndarray  # aggregate decoding r of every test item
    stage1: Stage1Result | None
    state: ReconstructionState | None
    records: list[mt.MetricsRecord]
    config: ReconstructionConfig
    note: str = ""

    @property
    def images(self) -> np.ndarray:
        if self.state is None:
            return np.zeros((0,) + ae.IMAGE_SHAPE, np.float32)
        return self.state.best_image

    def initial_loss(self) -> np.ndarray:
        return np.array([t[0] for t in self.state.trajectory]) if self.state else np.zeros(0)

    def final_loss(self) -> np.ndarray:
        return self.state.best_loss.copy() if self.state else np.zeros(0)

    def last_loss(self) -> np.ndarray:
        return np.array([t[-1] for t in self.state.trajectory]) if self.state else np.zeros(0)


def select_items(accuracy: np.ndarray, threshold: float) -> np.ndarray:
    return np.nonzero(np.asarray(accuracy) >= threshold)[0]


def run_pipeline(x_voxels: np.ndarray, truth_images: np.ndarray, truth_features: Mapping[str, np.ndarray],
                 decoders: DecoderSet, models: Models, config: ReconstructionConfig,
                 item_ids: Sequence[int] | None = None, log=None,
                 reuse_stage1: Stage1Result | None = None, jobs: int = 1) -> PipelineResult:
    """Filter test items by decoding accuracy, reconstruct the rest and score them.

    ``reuse_stage1`` skips Stage 1 when a previous run with identical Stage-1
    settings already produced it.
    """
    cfg = config.validate()
    models = _check_models(models)
    x = np.atleast_2d(np.asarray(x_voxels))
    n = len(x)
    ids = list(range(n)) if item_ids is None else [int(i) for i in item_ids]
    decoded = decoders.predict(x)
    acc = aggregate_accuracy(item_accuracy(decoded, {k: truth_features[k] for k in decoded}))
    keep = select_items(acc, cfg.threshold)
    if keep.size == 0:
        if log:
            log(f"no test item reaches decoding accuracy {cfg.threshold}")
        return PipelineResult([], acc, None, None, [], cfg,
                              note=f"{EmptyAfterFilter.__name__}: no item with accuracy >= {cfg.threshold}")
    kept_ids = [ids[i] for i in keep]
    sub = {k: v[keep] for k, v in decoded.items()}
    s1 = reuse_stage1 if reuse_stage1 is not None else stage1(None, None, models, cfg, kept_ids, decoded=sub)
    if log:
        log(f"stage1 done for {len(kept_ids)} of {n} items (t_start {s1.t_start}, stride {cfg.stride})")
    masks = {k: decoders.spaces[k].mask for k in cfg.taps}
    state = stage2(s1, sub, masks, models, cfg, log=log, jobs=jobs)
    # scored on the 8-bit images that are written to disk
    records = mt.evaluate_images(kept_ids, quantize(state.best_image), np.asarray(truth_images)[keep], models.encoder)
    return PipelineResult(kept_ids, acc, s1, state, records, cfg)


def ablation_configs(base: ReconstructionConfig) -> dict[str, ReconstructionConfig]:
    return {"full": base, "without_control": replace(base, without_control=True),
            "without_z": replace(base, without_z=True)}
