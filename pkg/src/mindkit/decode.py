"""Voxel -> feature ridge decoders with cross-validated feature selection.

Arrays are samples-major throughout: voxels ``X`` are (N, D_x) and targets
``Y`` are (N, D_y). Solves run in float64.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import linalg

from mindkit import io
from mindkit.errors import BadFraction, DimensionMismatch, SingularSystem, TooFewSamples

LAMBDA_GRID = (0.1, 1.0, 10.0, 100.0)
KEEP_FRACTION = 0.25
K_FOLDS = 5


@dataclass
class RidgeDecoder:
    weight: np.ndarray  # (n_dims, D_x), acts on standardized voxels
    bias: np.ndarray  # (n_dims,)
    lam: float
    x_mean: np.ndarray  # (D_x,)
    x_std: np.ndarray  # (D_x,)
    dims: np.ndarray  # target indices this decoder predicts
    n_targets: int  # full target dimension
    standardized: bool = True

    @property
    def n_voxels(self) -> int:
        return self.weight.shape[1]

    @property
    def raw_weight(self) -> np.ndarray:
        """Weights acting on raw (unstandardized) voxels."""
        return self.weight / self.x_std[None, :]

    @property
    def raw_bias(self) -> np.ndarray:
        return self.bias - self.raw_weight @ self.x_mean


@dataclass
class FeatureMask:
    r: np.ndarray  # per-dimension CV Pearson r
    keep: np.ndarray  # bool
    fraction: float

    @property
    def kept(self) -> np.ndarray:
        return np.flatnonzero(self.keep)


def _as2d(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise DimensionMismatch(f"{name} must be 2-D (samples x dims), got {a.shape}")
    return a


def ridge_solve(X, Y, lam: float) -> np.ndarray:
    """Raw closed form W = Y^T X (X^T X + lam I)^-1 without centering; returns (D_y, D_x)."""
    X, Y = _as2d(X, "X"), _as2d(Y, "Y")
    if X.shape[0] != Y.shape[0]:
        raise DimensionMismatch(f"{X.shape[0]} voxel samples vs {Y.shape[0]} target samples")
    return _solve(X.T @ X, X.T @ Y, lam).T


def _solve(gram: np.ndarray, rhs: np.ndarray, lam: float) -> np.ndarray:
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    a = gram + lam * np.eye(gram.shape[0])
    if lam == 0 and np.linalg.matrix_rank(gram) < gram.shape[0]:
        raise SingularSystem("X X^T is rank deficient and lambda = 0")
    try:
        return linalg.cho_solve(linalg.cho_factor(a, lower=False, check_finite=True), rhs)
    except linalg.LinAlgError as exc:
        raise SingularSystem(str(exc)) from exc


def _standardize_stats(X: np.ndarray, standardize: bool) -> tuple[np.ndarray, np.ndarray]:
    if not standardize:
        return np.zeros(X.shape[1]), np.ones(X.shape[1])
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    return mu, np.where(sd > 0, sd, 1.0)


def fit_ridge(X, Y, lam: float, standardize: bool = True, dims: Sequence[int] | None = None) -> RidgeDecoder:
    """Ridge on z-scored voxels with centered targets; bias is the target mean.

    ``dims`` restricts the fit to a subset of target columns (the refit
    after feature selection).
    """
    X, Y = _as2d(X, "X"), _as2d(Y, "Y")
    if X.shape[0] != Y.shape[0]:
        raise DimensionMismatch(f"{X.shape[0]} voxel samples vs {Y.shape[0]} target samples")
    if X.shape[0] < 2:
        raise TooFewSamples("ridge needs at least two samples")
    n_targets = Y.shape[1]
    sel = np.arange(n_targets) if dims is None else np.asarray(dims, dtype=np.int64)
    Y = Y[:, sel]
    mu, sd = _standardize_stats(X, standardize)
    Xs = (X - mu) / sd
    ybar = Y.mean(axis=0)
    W = _solve(Xs.T @ Xs, Xs.T @ (Y - ybar), lam).T
    return RidgeDecoder(weight=W, bias=ybar, lam=float(lam), x_mean=mu, x_std=sd, dims=sel,
                        n_targets=n_targets, standardized=standardize)


def pearson_columns(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Column-wise Pearson r; a zero-variance column gives 0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ac = a - a.mean(axis=0)
    bc = b - b.mean(axis=0)
    num = (ac * bc).sum(axis=0)
    den = np.sqrt((ac * ac).sum(axis=0) * (bc * bc).sum(axis=0))
    out = np.zeros(num.shape)
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    return out


def pearson_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return pearson_columns(np.asarray(a).T, np.asarray(b).T)


def fold_indices(n: int, k_folds: int = K_FOLDS, seed: int = 0) -> list[np.ndarray]:
    """Seeded shuffle, then contiguous blocks."""
    if n < k_folds:
        raise TooFewSamples(f"{n} samples cannot fill {k_folds} folds")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, k_folds)]


def cv_accuracy_grid(X, Y, lams: Sequence[float], k_folds: int = K_FOLDS, seed: int = 0,
                     standardize: bool = True) -> dict[float, np.ndarray]:
    """Per-dimension out-of-fold Pearson r for every lambda (one eigendecomposition per fold)."""
    X, Y = _as2d(X, "X"), _as2d(Y, "Y")
    if X.shape[0] != Y.shape[0]:
        raise DimensionMismatch("sample counts differ")
    folds = fold_indices(X.shape[0], k_folds, seed)
    preds = {lam: np.zeros_like(Y) for lam in lams}
    for test in folds:
        train = np.setdiff1d(np.arange(X.shape[0]), test, assume_unique=True)
        mu, sd = _standardize_stats(X[train], standardize)
        Xtr, Xte = (X[train] - mu) / sd, (X[test] - mu) / sd
        ybar = Y[train].mean(axis=0)
        evals, evecs = np.linalg.eigh(Xtr.T @ Xtr)
        proj = evecs.T @ (Xtr.T @ (Y[train] - ybar))
        xte = Xte @ evecs
        for lam in lams:
            denom = evals + lam
            if np.any(denom <= 1e-12 * max(1.0, float(evals.max(initial=0.0)))):
                raise SingularSystem("fold system is singular at this lambda")
            preds[lam][test] = xte @ (proj / denom[:, None]) + ybar
    return {lam: pearson_columns(preds[lam], Y) for lam in lams}


def cv_accuracy(X, Y, lam: float, k_folds: int = K_FOLDS, seed: int = 0, standardize: bool = True) -> np.ndarray:
    """Per-dimension Pearson r between concatenated out-of-fold predictions and truth."""
    return cv_accuracy_grid(X, Y, [lam], k_folds, seed, standardize)[lam]


def keep_count(n: int, fraction: float) -> int:
    """round(fraction * n), halves rounded up."""
    return int(np.floor(fraction * n + 0.5))


def select_features(r, fraction: float = KEEP_FRACTION) -> FeatureMask:
    """Keep the highest-r dims; ties go to the lower index."""
    if not 0 < fraction <= 1:
        raise BadFraction(f"fraction must be in (0, 1], got {fraction}")
    r = np.asarray(r, dtype=np.float64)
    score = np.where(np.isnan(r), -np.inf, r)
    order = np.lexsort((np.arange(r.size), -score))
    keep = np.zeros(r.size, dtype=bool)
    keep[order[:keep_count(r.size, fraction)]] = True
    return FeatureMask(r=r, keep=keep, fraction=float(fraction))


def predict(decoder: RidgeDecoder, x, mask: FeatureMask | None = None) -> np.ndarray:
    """Decoded features at full target width; dims the decoder or mask drops are NaN."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x[None] if single else x
    if x2.shape[1] != decoder.n_voxels:
        raise DimensionMismatch(f"decoder expects {decoder.n_voxels} voxels, got {x2.shape[1]}")
    vals = ((x2 - decoder.x_mean) / decoder.x_std) @ decoder.weight.T + decoder.bias
    out = np.full((x2.shape[0], decoder.n_targets), np.nan)
    out[:, decoder.dims] = vals
    if mask is not None:
        if mask.keep.size != decoder.n_targets:
            raise DimensionMismatch("mask width differs from decoder target width")
        out[:, ~mask.keep] = np.nan
    return out[0] if single else out


# ---------------------------------------------------------------- per-space fitting

MASKED_SPACES = ("tap1", "tap2", "tap3")


@dataclass
class SpaceFit:
    decoder: RidgeDecoder
    lam: float
    cv_r: dict[float, float]  # lambda -> mean CV r (grid search record)
    mask: FeatureMask | None = None


@dataclass
class DecoderSet:
    spaces: dict[str, SpaceFit] = field(default_factory=dict)
    fold_seed: int = 0
    standardized: bool = True

    def predict(self, x) -> dict[str, np.ndarray]:
        return {k: predict(f.decoder, x, f.mask) for k, f in self.spaces.items()}


def fit_space(X, Y, masked: bool, lams: Sequence[float] = LAMBDA_GRID, fraction: float = KEEP_FRACTION,
              k_folds: int = K_FOLDS, seed: int = 0, standardize: bool = True) -> SpaceFit:
    """Grid-search lambda on mean CV r, optionally keep the top-r dims, refit on all samples."""
    grid = cv_accuracy_grid(X, Y, lams, k_folds, seed, standardize)
    means = {float(lam): float(np.mean(r)) for lam, r in grid.items()}
    best = max(lams, key=lambda lam: (means[float(lam)], -lam))
    mask = select_features(grid[best], fraction) if masked else None
    dims = mask.kept if mask is not None else None
    dec = fit_ridge(X, Y, best, standardize=standardize, dims=dims)
    return SpaceFit(decoder=dec, lam=float(best), cv_r=means, mask=mask)


def fit_decoders(X, targets: Mapping[str, np.ndarray], lams: Sequence[float] = LAMBDA_GRID,
                 fraction: float = KEEP_FRACTION, k_folds: int = K_FOLDS, seed: int = 0,
                 standardize: bool = True, masked_spaces: Sequence[str] = MASKED_SPACES, log=None) -> DecoderSet:
    out = DecoderSet(fold_seed=seed, standardized=standardize)
    for name in targets:
        fit = fit_space(X, targets[name], name in masked_spaces, lams, fraction, k_folds, seed, standardize)
        out.spaces[name] = fit
        if log:
            log(f"decoder {name}: lambda={fit.lam:g} mean CV r={fit.cv_r[fit.lam]:.3f}")
    return out


def item_accuracy(decoded: Mapping[str, np.ndarray], truth: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Per-item Pearson r between decoded and true feature vectors, per space, on available dims."""
    out = {}
    for k, pred in decoded.items():
        pred = np.atleast_2d(pred)
        ok = ~np.isnan(pred[0])
        out[k] = pearson_rows(pred[:, ok], np.atleast_2d(truth[k])[:, ok])
    return out


def aggregate_accuracy(per_space: Mapping[str, np.ndarray]) -> np.ndarray:
    """Mean across feature spaces of the per-item r."""
    return np.mean(np.stack([per_space[k] for k in sorted(per_space)]), axis=0)


# ---------------------------------------------------------------- persistence

def save_decoders(directory: str | Path, decs: DecoderSet) -> str:
    tensors: dict[str, np.ndarray] = {}
    meta: dict = {"fold_seed": decs.fold_seed, "standardized": decs.standardized, "spaces": {}}
    for name, fit in decs.spaces.items():
        d = fit.decoder
        tensors[f"{name}.weight"] = d.weight
        tensors[f"{name}.bias"] = d.bias
        tensors[f"{name}.x_mean"] = d.x_mean
        tensors[f"{name}.x_std"] = d.x_std
        entry = {"lambda": fit.lam, "cv_mean_r": {repr(k): v for k, v in fit.cv_r.items()},
                 "dims": d.dims.tolist(), "n_targets": d.n_targets}
        if fit.mask is not None:
            tensors[f"{name}.cv_r"] = fit.mask.r
            entry["mask_fraction"] = fit.mask.fraction
            entry["kept"] = fit.mask.kept.tolist()
        meta["spaces"][name] = entry
    return io.save_bundle(directory, tensors, meta)


def load_decoders(directory: str | Path) -> tuple[DecoderSet, str]:
    tensors, meta, digest = io.load_bundle(directory)
    out = DecoderSet(fold_seed=int(meta["fold_seed"]), standardized=bool(meta["standardized"]))
    for name, entry in meta["spaces"].items():
        # float32 on disk; decoders run in float64
        dec = RidgeDecoder(
            weight=tensors[f"{name}.weight"].astype(np.float64), bias=tensors[f"{name}.bias"].astype(np.float64),
            lam=float(entry["lambda"]), x_mean=tensors[f"{name}.x_mean"].astype(np.float64),
            x_std=tensors[f"{name}.x_std"].astype(np.float64), dims=np.asarray(entry["dims"], dtype=np.int64),
            n_targets=int(entry["n_targets"]), standardized=out.standardized)
        mask = None
        if "kept" in entry:
            keep = np.zeros(dec.n_targets, dtype=bool)
            keep[entry["kept"]] = True
            mask = FeatureMask(r=tensors[f"{name}.cv_r"].astype(np.float64), keep=keep,
                               fraction=float(entry["mask_fraction"]))
        cv = {float(k): float(v) for k, v in entry["cv_mean_r"].items()}
        out.spaces[name] = SpaceFit(decoder=dec, lam=dec.lam, cv_r=cv, mask=mask)
    return out, digest


def describe(decs: DecoderSet) -> str:
    return json.dumps({k: {"lambda": f.lam, "cv_r": f.cv_r} for k, f in decs.spaces.items()}, indent=2)
