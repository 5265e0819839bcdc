"""Image comparison measures: embedding cosine, windowed SSIM and pixel Pearson r."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from mindkit.errors import BadResolution, NonFinite

LUMA = (0.299, 0.587, 0.114)
SSIM_WINDOW = 8
SSIM_STRIDE = 4
SSIM_L = 1.0
SSIM_C1 = (0.01 * SSIM_L) ** 2
SSIM_C2 = (0.03 * SSIM_L) ** 2


def ssim_settings() -> dict:
    return {"window": SSIM_WINDOW, "stride": SSIM_STRIDE, "L": SSIM_L, "C1": SSIM_C1, "C2": SSIM_C2,
            "luma": list(LUMA), "window_kind": "uniform"}


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise BadResolution(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def luma(image: np.ndarray) -> np.ndarray:
    x = np.asarray(image, dtype=np.float64)
    if x.ndim == 2:
        return x
    if x.shape[-1] != 3:
        raise BadResolution(f"expected H x W x 3, got {x.shape}")
    return x[..., 0] * LUMA[0] + x[..., 1] * LUMA[1] + x[..., 2] * LUMA[2]


def ssim(a, b) -> float:
    """Mean SSIM over 8x8 uniform windows placed every 4 pixels on the luma channel.

    Every statistic is formed symmetrically in (a, b), so swapping the
    arguments gives a bitwise-equal result and ``ssim(x, x) == 1.0``.
    """
    a, b = _pair(a, b)
    ya, yb = luma(a), luma(b)
    if ya.shape[0] < SSIM_WINDOW or ya.shape[1] < SSIM_WINDOW:
        raise BadResolution(f"images smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    wa = sliding_window_view(ya, (SSIM_WINDOW, SSIM_WINDOW))[::SSIM_STRIDE, ::SSIM_STRIDE]
    wb = sliding_window_view(yb, (SSIM_WINDOW, SSIM_WINDOW))[::SSIM_STRIDE, ::SSIM_STRIDE]
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    da = wa - mu_a[..., None, None]
    db = wb - mu_b[..., None, None]
    var_a = (da * da).mean(axis=(-2, -1))
    var_b = (db * db).mean(axis=(-2, -1))
    cov = (da * db).mean(axis=(-2, -1))
    num = (2.0 * (mu_a * mu_b) + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    da = a - a.mean()
    db = b - b.mean()
    va = float(np.dot(da, da))
    vb = float(np.dot(db, db))
    if va <= 0.0 or vb <= 0.0:
        return 0.0
    return float(np.dot(da, db) / math.sqrt(va * vb))


def pixel_correlation(a, b, per_channel: bool = False) -> float:
    """Pearson r over all flattened values (RGB jointly); constant inputs give 0."""
    a, b = _pair(a, b)
    if not per_channel or a.ndim < 3:
        return _pearson(a.reshape(-1), b.reshape(-1))
    return float(np.mean([_pearson(a[..., k].reshape(-1), b[..., k].reshape(-1)) for k in range(a.shape[-1])]))


def cosine(u, v) -> float:
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    nu, nv = math.sqrt(float(np.dot(u, u))), math.sqrt(float(np.dot(v, v)))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(np.dot(u, v)) / (nu * nv)


def semantic_similarity(a, b, encoder, clip: bool = False) -> float:
    """Cosine between final-layer embeddings of two images under ``encoder``."""
    from mindkit.contrastive import image_embedding

    a, b = _pair(a, b)
    emb = image_embedding(np.stack([a, b]).astype(np.float32), encoder)
    value = cosine(emb[0], emb[1])
    return max(0.0, value) if clip else value


def semantic_similarity_batch(a: np.ndarray, b: np.ndarray, encoder, clip: bool = False) -> np.ndarray:
    from mindkit.contrastive import image_embedding

    a, b = _pair(a, b)
    ea = image_embedding(a.astype(np.float32), encoder)
    eb = image_embedding(b.astype(np.float32), encoder)
    out = np.array([cosine(x, y) for x, y in zip(ea, eb)])
    return np.maximum(out, 0.0) if clip else out


@dataclass(frozen=True)
class MetricsRecord:
    item: int | str
    clip_cosine: float
    ssim: float
    pcc: float

    def __post_init__(self) -> None:
        if not all(math.isfinite(v) for v in (self.clip_cosine, self.ssim, self.pcc)):
            raise NonFinite(f"non-finite metric for item {self.item}")


@dataclass(frozen=True)
class MetricsAggregate:
    count: int
    clip_cosine: float
    ssim: float
    pcc: float


def aggregate(records: Sequence[MetricsRecord]) -> MetricsAggregate:
    if not records:
        return MetricsAggregate(0, float("nan"), float("nan"), float("nan"))
    return MetricsAggregate(len(records), float(np.mean([r.clip_cosine for r in records])),
                            float(np.mean([r.ssim for r in records])), float(np.mean([r.pcc for r in records])))


def evaluate_images(items: Sequence, recon: np.ndarray, truth: np.ndarray, encoder,
                    clip: bool = False, per_channel: bool = False) -> list[MetricsRecord]:
    recon = np.asarray(recon)
    truth = np.asarray(truth)
    if recon.shape != truth.shape:
        raise BadResolution(f"reconstructions {recon.shape} vs ground truth {truth.shape}")
    cos = semantic_similarity_batch(recon, truth, encoder, clip) if len(recon) else np.zeros(0)
    return [MetricsRecord(item, float(cos[i]), ssim(recon[i], truth[i]),
                          pixel_correlation(recon[i], truth[i], per_channel))
            for i, item in enumerate(items)]


def write_metrics(directory: str | Path, records: Sequence[MetricsRecord], extra: dict | None = None,
                  label: str = "full") -> None:
    """``metrics.json`` (records, aggregate, SSIM settings) and a CLIP/SSIM/PCC ``metrics.csv``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    agg = aggregate(records)
    doc = {"records": [asdict(r) for r in records], "aggregate": asdict(agg),
           "ssim_settings": ssim_settings(), "label": label}
    if extra:
        doc.update(extra)
    (d / "metrics.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    with open(d / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["item", "CLIP", "SSIM", "PCC"])
        for r in records:
            w.writerow([r.item, f"{r.clip_cosine:.6f}", f"{r.ssim:.6f}", f"{r.pcc:.6f}"])
        w.writerow([f"mean(n={agg.count})", f"{agg.clip_cosine:.6f}", f"{agg.ssim:.6f}", f"{agg.pcc:.6f}"])


def read_metrics(directory: str | Path) -> dict:
    return json.loads((Path(directory) / "metrics.json").read_text())
