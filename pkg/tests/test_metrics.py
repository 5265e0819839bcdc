import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mindkit import metrics as mt
from mindkit.errors import BadResolution, NonFinite

img = arrays(np.float64, (16, 16, 3), elements=st.floats(0, 1))


def brute_pcc(a, b):
    a, b = a.reshape(-1), b.reshape(-1)
    n = a.size
    ma, mb = sum(a) / n, sum(b) / n
    cov = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    va = sum((x - ma) ** 2 for x in a)
    vb = sum((y - mb) ** 2 for y in b)
    return cov / (va * vb) ** 0.5


def brute_ssim(a, b, win=8, stride=4):
    ya, yb = mt.luma(a), mt.luma(b)
    vals = []
    for i in range(0, ya.shape[0] - win + 1, stride):
        for j in range(0, ya.shape[1] - win + 1, stride):
            pa, pb = ya[i:i + win, j:j + win], yb[i:i + win, j:j + win]
            ma, mb = pa.mean(), pb.mean()
            va, vb = pa.var(), pb.var()
            cov = ((pa - ma) * (pb - mb)).mean()
            vals.append((2 * ma * mb + mt.SSIM_C1) * (2 * cov + mt.SSIM_C2)
                        / ((ma ** 2 + mb ** 2 + mt.SSIM_C1) * (va + vb + mt.SSIM_C2)))
    return float(np.mean(vals))


def test_pcc_matches_brute_force(rng):
    a, b = rng.random((8, 8, 3)), rng.random((8, 8, 3))
    assert abs(mt.pixel_correlation(a, b) - brute_pcc(a, b)) <= 1e-6


def test_ssim_matches_window_oracle(rng):
    a, b = rng.random((32, 32, 3)), rng.random((32, 32, 3))
    assert mt.ssim(a, b) == pytest.approx(brute_ssim(a, b), abs=1e-12)


def test_ssim_window_count():
    # 8x8 windows every 4 px on 32x32 -> 7x7 windows
    assert len(range(0, 32 - 8 + 1, 4)) == 7


def test_ssim_rejects_small_or_mismatched():
    with pytest.raises(BadResolution):
        mt.ssim(np.zeros((4, 4, 3)), np.zeros((4, 4, 3)))
    with pytest.raises(BadResolution):
        mt.ssim(np.zeros((8, 8, 3)), np.zeros((16, 16, 3)))


def test_constant_images_have_zero_pcc():
    assert mt.pixel_correlation(np.ones((4, 4, 3)), np.random.default_rng(0).random((4, 4, 3))) == 0.0


def test_per_channel_pcc(rng):
    a = rng.random((8, 8, 3))
    assert mt.pixel_correlation(a, a, per_channel=True) == pytest.approx(1.0)


def test_semantic_similarity_identity_and_clip(models, rng):
    a = rng.random((32, 32, 3))
    assert mt.semantic_similarity(a, a, models.encoder) == pytest.approx(1.0, abs=1e-5)
    b = rng.random((2, 32, 32, 3))
    assert np.all(mt.semantic_similarity_batch(b, b[::-1], models.encoder, clip=True) >= 0)


def test_non_finite_record_rejected():
    with pytest.raises(NonFinite):
        mt.MetricsRecord(0, float("nan"), 0.5, 0.5)


def test_write_and_read(tmp_path):
    recs = [mt.MetricsRecord(0, 0.5, 0.25, 0.75), mt.MetricsRecord(1, 0.7, 0.35, 0.25)]
    mt.write_metrics(tmp_path, recs, extra={"x": 1})
    doc = mt.read_metrics(tmp_path)
    assert doc["aggregate"]["count"] == 2 and doc["aggregate"]["ssim"] == pytest.approx(0.3) and doc["x"] == 1
    assert doc["ssim_settings"]["window"] == 8
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == "item,CLIP,SSIM,PCC" and lines[-1].startswith("mean(n=2)")
    json.loads((tmp_path / "metrics.json").read_text())


@given(img)
def test_ssim_self_is_exactly_one(x):
    assert mt.ssim(x, x) == 1.0


@given(img, img)
def test_metrics_are_symmetric(a, b):
    assert mt.ssim(a, b) == mt.ssim(b, a)
    assert mt.pixel_correlation(a, b) == mt.pixel_correlation(b, a)


@given(img.filter(lambda x: np.ptp(x) > 1e-3), st.floats(0.1, 10), st.floats(-5, 5))
def test_pcc_of_positive_affine_pair_is_one(x, k, c):
    assert abs(mt.pixel_correlation(x, k * x + c) - 1.0) <= 1e-6


@given(arrays(np.float64, 8, elements=st.floats(-5, 5)).filter(lambda v: np.linalg.norm(v) > 1e-3))
def test_cosine_of_identical_vectors(v):
    assert abs(mt.cosine(v, v) - 1.0) <= 1e-5
