import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mindkit import checks
from mindkit import neurosim as ns
from mindkit.errors import StaleFeatureCache

spec_strategy = st.builds(
    ns.SceneSpec, st.sampled_from(ns.SHAPES), st.floats(0.3, 0.7), st.floats(0.3, 0.7), st.floats(0.12, 0.28),
    st.floats(0, 2 * math.pi), st.sampled_from(list(ns.FG_COLORS)), st.sampled_from(list(ns.BG_COLORS)))


@given(spec_strategy)
def test_render_uses_only_two_colors(spec):
    img = ns.render(spec)
    assert img.shape == (32, 32, 3) and img.dtype == np.float32
    colors = {tuple(p) for p in img.reshape(-1, 3)}
    fg = tuple(np.float32(c / 255.0) for c in ns.FG_COLORS[spec.fg])
    assert fg in colors and len(colors) <= 2


@given(spec_strategy)
def test_caption_tokens_are_in_vocabulary(spec):
    toks = ns.caption(spec)
    assert len(toks) == 6 and all(0 < t < len(ns.VOCAB) for t in toks)


def test_invalid_scene_rejected():
    with pytest.raises(ValueError):
        ns.render(ns.SceneSpec("hexagon", 0.5, 0.5, 0.2, 0.0, "red", "black"))


def test_generated_splits_are_disjoint_and_reproducible():
    a_train, a_test = ns.generate_scenes(11, 50, 20)
    b_train, b_test = ns.generate_scenes(11, 50, 20)
    assert a_train == b_train and a_test == b_test
    assert not {s.key() for s in a_train} & {s.key() for s in a_test}


def test_subject_seeds_distinct_and_stable():
    s = ns.subject_seeds(7, 4)
    assert len(set(s)) == 4 and s == ns.subject_seeds(7, 4)


def test_noiseless_response_calibrated_to_unit_sd(rng):
    feats = checks._toy_features(rng, 300, checks.TOY_BLOCKS)
    subj = ns.make_subject(1, checks.TOY_BLOCKS, feats, n_voxels=64)
    r = ns.noiseless_response(ns.concat_features(feats), subj)
    np.testing.assert_allclose(r.std(axis=0), 1.0, rtol=1e-4)


def test_sparsity_of_mixing(rng):
    feats = checks._toy_features(rng, 100, checks.TOY_BLOCKS)
    subj = ns.make_subject(2, checks.TOY_BLOCKS, feats, n_voxels=200, sparsity=0.25)
    assert np.all(subj.mixing[~subj.mask] == 0)
    assert abs(subj.mask.mean() - 0.25) < 0.02


def test_noise_scale_matches_sigma(rng):
    feats = checks._toy_features(rng, 10, checks.TOY_BLOCKS)
    subj = ns.make_subject(3, checks.TOY_BLOCKS, feats, n_voxels=5000, sigma=0.5)
    rec = ns.SceneRecord(None, None, [], {k: v[0] for k, v in feats.items()})
    v = ns.respond(rec, subj, 2, np.random.default_rng(0))
    base = ns.noiseless_response(ns.concat_features({k: v[0] for k, v in feats.items()}), subj)
    assert np.std(v.trials - base) == pytest.approx(0.5, rel=0.03)


def test_stale_feature_cache(rng):
    feats = checks._toy_features(rng, 10, checks.TOY_BLOCKS)
    subj = ns.make_subject(3, checks.TOY_BLOCKS, feats, n_voxels=5, weights_hash="abc")
    rec = ns.SceneRecord(None, None, [], {k: v[0] for k, v in feats.items()}, features_hash="old")
    with pytest.raises(StaleFeatureCache):
        ns.respond(rec, subj, 1, rng)


def test_trial_counts_bounds():
    with pytest.raises(ValueError):
        ns.VoxelRecord(np.zeros((4, 3)), 0)
    counts = ns.draw_trial_counts(2000, np.random.default_rng(0))
    assert set(np.unique(counts)) <= {1, 2, 3} and np.mean(counts == 3) > 0.8


@given(st.integers(1, 3), st.integers(0, 10_000))
def test_trial_average_is_the_mean(k, seed):
    t = np.random.default_rng(seed).standard_normal((k, 9)).astype(np.float32)
    assert np.array_equal(ns.average_trials(t), t.astype(np.float64).mean(0).astype(np.float32))


@given(st.floats(-4, 4), st.floats(-4, 4), st.integers(0, 1000))
def test_response_is_linear(a, b, seed):
    r = np.random.default_rng(seed)
    feats = checks._toy_features(r, 40, checks.TOY_BLOCKS)
    subj = ns.make_subject(seed, checks.TOY_BLOCKS, feats, n_voxels=16, sigma=0.0)
    f = ns.concat_features(feats).astype(np.float64)
    f1, f2 = f[0], f[1]
    lhs = ns.noiseless_response(a * f1 + b * f2, subj)
    rhs = a * ns.noiseless_response(f1, subj).astype(np.float64) + b * ns.noiseless_response(f2, subj)
    np.testing.assert_allclose(lhs, rhs, atol=1e-4 * (1 + abs(a) + abs(b)))


def test_decoding_degrades_with_noise():
    r = checks.sigma_sweep(5)
    assert all(x > y for x, y in zip(r, r[1:]))
