import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mindkit import decode as dc
from mindkit.errors import BadFraction, DimensionMismatch, SingularSystem, TooFewSamples


def planted(rng, n=400, dx=20, dy=5, noise=0.0):
    X = rng.standard_normal((n, dx))
    W = rng.standard_normal((dx, dy))
    b = rng.standard_normal(dy)
    return X, X @ W + b + noise * rng.standard_normal((n, dy)), W, b


def test_ridge_solve_oracle(rng):
    X, Y, _, _ = planted(rng, noise=0.5)
    lam = 3.0
    ref = np.linalg.solve(X.T @ X + lam * np.eye(X.shape[1]), X.T @ Y).T
    np.testing.assert_allclose(dc.ridge_solve(X, Y, lam), ref, rtol=1e-10)


def test_planted_model_recovered(rng):
    X, Y, W, b = planted(rng, n=2000)
    d = dc.fit_ridge(X, Y, 0.1)
    assert np.abs(d.raw_weight - W.T).max() < 1e-3
    assert np.abs(d.raw_bias - b).max() < 1e-3


def test_cv_r_near_one_without_noise(rng):
    X, Y, _, _ = planted(rng)
    assert dc.cv_accuracy(X, Y, 0.1).min() >= 0.999


def test_lambda_zero_singular():
    X = np.ones((10, 3))
    with pytest.raises(SingularSystem):
        dc.ridge_solve(X, np.ones((10, 1)), 0.0)


def test_errors(rng):
    with pytest.raises(DimensionMismatch):
        dc.fit_ridge(np.zeros((5, 2)), np.zeros((4, 1)), 1.0)
    with pytest.raises(TooFewSamples):
        dc.fold_indices(3, 5)
    with pytest.raises(BadFraction):
        dc.select_features(np.zeros(4), 0.0)


def test_folds_partition():
    folds = dc.fold_indices(23, 5, seed=3)
    allidx = np.concatenate(folds)
    assert sorted(allidx) == list(range(23)) and len(allidx) == 23


def brute_force_mask(r, fraction):
    order = sorted(range(len(r)), key=lambda i: (-(r[i] if np.isfinite(r[i]) else -np.inf), i))
    k = int(np.floor(fraction * len(r) + 0.5))
    return set(order[:k])


@given(arrays(np.float64, st.integers(1, 60), elements=st.sampled_from([0.1, 0.5, 0.5, 0.9, -0.2, np.nan])),
       st.sampled_from([0.25, 0.1, 0.5, 1.0]))
def test_mask_matches_brute_force_sort(r, fraction):
    m = dc.select_features(r, fraction)
    assert set(m.kept.tolist()) == brute_force_mask(r, fraction)
    assert m.keep.sum() == int(np.floor(fraction * len(r) + 0.5))


def test_keep_count_rounds_half_up():
    assert dc.keep_count(2, 0.25) == 1 and dc.keep_count(6, 0.25) == 2 and dc.keep_count(768, 0.25) == 192


def test_masked_predictions_match_unmasked_refit(rng):
    X, Y, _, _ = planted(rng, n=120, dy=12, noise=1.0)
    fit = dc.fit_space(X, Y, masked=True)
    x = rng.standard_normal((4, 20))
    a = dc.predict(fit.decoder, x, fit.mask)
    assert np.all(np.isnan(a[:, ~fit.mask.keep]))
    np.testing.assert_allclose(a[:, fit.mask.kept], dc.predict(dc.fit_ridge(X, Y, fit.lam), x)[:, fit.mask.kept],
                               atol=1e-10)


@given(st.integers(0, 10_000))
def test_ridge_minimizes_objective(seed):
    r = np.random.default_rng(seed)
    X, Y, _, _ = planted(r, n=30, dx=6, dy=2, noise=1.0)
    W = dc.ridge_solve(X, Y, 1.5)
    obj = lambda w: np.sum((X @ w.T - Y) ** 2) + 1.5 * np.sum(w * w)
    assert all(obj(W) <= obj(W + 1e-3 * r.standard_normal(W.shape)) for _ in range(10))


@given(st.integers(0, 10_000))
def test_cv_r_invariant_to_target_permutation(seed):
    r = np.random.default_rng(seed)
    X, Y, _, _ = planted(r, n=40, dx=6, dy=4, noise=1.0)
    p = r.permutation(4)
    np.testing.assert_allclose(dc.cv_accuracy(X, Y, 1.0)[p], dc.cv_accuracy(X, Y[:, p], 1.0), atol=1e-12)


def test_lambda_grid_picks_best_mean(rng):
    X, Y, _, _ = planted(rng, n=60, dx=40, dy=3, noise=3.0)
    fit = dc.fit_space(X, Y, masked=False)
    assert fit.cv_r[fit.lam] == max(fit.cv_r.values())


def test_save_load_roundtrip(tmp_path, rng):
    X, Y, _, _ = planted(rng, n=80, dy=8, noise=0.3)
    decs = dc.fit_decoders(X, {"z": Y, "tap1": Y * 2}, masked_spaces=("tap1",))
    h = dc.save_decoders(tmp_path / "d", decs)
    back, h2 = dc.load_decoders(tmp_path / "d")
    assert h == h2
    x = rng.standard_normal((3, 20))
    for k in ("z", "tap1"):
        np.testing.assert_allclose(back.predict(x)[k], decs.predict(x)[k], rtol=1e-5, atol=1e-5)


def test_item_accuracy_aggregate(rng):
    t = rng.standard_normal((5, 10))
    acc = dc.aggregate_accuracy(dc.item_accuracy({"a": t, "b": -t}, {"a": t, "b": t}))
    np.testing.assert_allclose(acc, 0.0, atol=1e-12)
