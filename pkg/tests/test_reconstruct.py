from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mindkit import checks
from mindkit import contrastive as ce
from mindkit import decode as dc
from mindkit import reconstruct as rc
from mindkit.errors import BadRange, DecoderMissing, ModelMissing, TapMismatch
from mindkit.tensor import Tensor


def brute_structure_loss(taps, targets, masks):
    total = 0.0
    for name in taps:
        phi, tgt, keep = taps[name].reshape(-1), targets[name].reshape(-1), masks[name]
        for d in range(phi.size):
            if keep[d]:
                total += (float(phi[d]) - float(tgt[d])) ** 2
    return total


def random_case(models, seed):
    r = np.random.default_rng(seed)
    image = r.random((1, 32, 32, 3)).astype(np.float32)
    taps = {k: v for k, v in ce.image_features(image, models.encoder).items() if k in ce.TAP_NAMES}
    targets = {k: v + r.standard_normal(v.shape).astype(np.float32) for k, v in taps.items()}
    masks = {k: r.random(768) < 0.25 for k in taps}
    return image, taps, targets, masks


def test_structure_loss_matches_brute_force(models):
    for seed in range(3):
        image, taps, targets, masks = random_case(models, seed)
        got = float(rc.structure_loss(image, targets, masks, models.encoder).data)
        assert got == pytest.approx(brute_structure_loss(taps, targets, masks), rel=1e-6)


def test_structure_loss_zero_at_own_taps(models):
    image, taps, _, masks = random_case(models, 9)
    assert float(rc.structure_loss(image, taps, masks, models.encoder).data) == 0.0


def test_nan_targets_outside_mask_are_ignored(models):
    image, taps, targets, masks = random_case(models, 4)
    holes = {k: np.where(masks[k], v, np.nan) for k, v in targets.items()}
    a = float(rc.structure_loss(image, targets, masks, models.encoder).data)
    assert float(rc.structure_loss(image, holes, masks, models.encoder).data) == a


def test_feature_mask_objects_accepted():
    phi = Tensor(np.ones((1, 4), np.float32))
    m = dc.FeatureMask(r=np.zeros(4), keep=np.array([True, False, True, False]), fraction=0.5)
    assert float(rc.tap_distance(phi, np.zeros((1, 4)), m).data[0]) == 2.0


def test_tap_mismatch():
    with pytest.raises(TapMismatch):
        rc.tap_distance(Tensor(np.ones((1, 4))), np.zeros((1, 5)))
    with pytest.raises(TapMismatch):
        rc.ReconstructionConfig(taps=("tap9",)).validate()


@pytest.mark.parametrize("kw", [{"iterations": -1}, {"t_start_frac": 1.5}, {"lr": 0.0}, {"stride": 0}])
def test_bad_config(kw):
    with pytest.raises(BadRange):
        rc.ReconstructionConfig(**kw).validate()


def test_t_start_rounding():
    assert rc.ReconstructionConfig().t_start(300) == 240
    assert rc.ReconstructionConfig(t_start_frac=0.5).t_start(3) == 2


def test_config_json_roundtrip():
    cfg = rc.ReconstructionConfig(lr=0.1, taps=("tap1", "tap3"), without_z=True)
    assert rc.ReconstructionConfig.from_json(cfg.to_json()) == cfg


def test_missing_models_and_decoders():
    with pytest.raises(ModelMissing):
        rc.stage1(np.zeros((1, 4)), None, None, rc.ReconstructionConfig())
    with pytest.raises(DecoderMissing):
        rc.stage1(np.zeros((1, 4)), None, checks.random_models(0), rc.ReconstructionConfig())


def _decoded(models, n, seed=0):
    r = np.random.default_rng(seed)
    return {"c": r.standard_normal((n, 192)).astype(np.float32), "z": r.standard_normal((n, 256)).astype(np.float32)}


def test_stage1_item_seeds_make_rows_independent(models):
    cfg = rc.ReconstructionConfig()
    dec = _decoded(models, 3)
    full = rc.stage1(None, None, models, cfg, items=[10, 11, 12], decoded=dec)
    one = rc.stage1(None, None, models, cfg, items=[11], decoded={k: v[1:2] for k, v in dec.items()})
    np.testing.assert_allclose(full.image[1], one.image[0], rtol=1e-5, atol=1e-6)


def test_without_z_replaces_latent(models):
    dec = _decoded(models, 2)
    s = rc.stage1(None, None, models, rc.ReconstructionConfig(without_z=True), decoded=dec)
    assert not np.allclose(s.z, dec["z"])
    assert np.array_equal(s.z, rc.stage1(None, None, models, rc.ReconstructionConfig(without_z=True), decoded=dec).z)


def _stage2(models, cfg, n=2):
    dec = _decoded(models, n)
    s1 = rc.stage1(None, None, models, cfg, decoded=dec)
    r = np.random.default_rng(5)
    tgt = ce.image_features(r.random((n, 32, 32, 3)).astype(np.float32), models.encoder)
    masks = {k: r.random(768) < 0.25 for k in ce.TAP_NAMES}
    return s1, rc.stage2(s1, tgt, masks, models, cfg)


def test_stage2_keeps_best_snapshot(models):
    cfg = rc.ReconstructionConfig(iterations=5, snapshot_every=2, lr=0.1)
    s1, st_ = _stage2(models, cfg)
    for i, traj in enumerate(st_.trajectory):
        assert len(traj) == 6 and st_.best_loss[i] == min(traj)
        assert traj[st_.best_iteration[i]] == st_.best_loss[i]
    assert sorted(st_.snapshots) == [0, 2, 4, 5]  # final iterate is always kept


def test_stage2_zero_iterations_returns_stage1(models):
    s1, st_ = _stage2(models, rc.ReconstructionConfig(iterations=0))
    assert np.array_equal(st_.best_image, s1.image)


def test_without_control_skips_optimization(models):
    s1, st_ = _stage2(models, rc.ReconstructionConfig(without_control=True))
    assert np.array_equal(st_.best_image, s1.image)
    assert all(len(t) == 1 for t in st_.trajectory)


def test_chunking_does_not_change_results(models):
    cfg = rc.ReconstructionConfig(iterations=2)
    _, a = _stage2(models, cfg, n=3)
    _, b = _stage2(models, replace(cfg, chunk=1), n=3)
    np.testing.assert_allclose(a.best_loss, b.best_loss, rtol=1e-5)


def test_composite_gradient(models):
    assert checks.composite_gradient_error(models, 0) <= 1e-3


def test_ablation_configs():
    cfgs = rc.ablation_configs(rc.ReconstructionConfig(seed=3))
    assert cfgs["without_control"].without_control and cfgs["without_z"].without_z
    assert all(c.seed == 3 for c in cfgs.values())


@given(st.lists(st.floats(-1, 1), min_size=1, max_size=20), st.floats(-1, 1))
def test_select_items_threshold(acc, thr):
    keep = rc.select_items(np.array(acc), thr)
    assert all(acc[i] >= thr for i in keep) and len(keep) == sum(a >= thr for a in acc)


def test_item_seed_distinct():
    assert len({rc.item_seed(0, i) for i in range(100)}) == 100
    assert rc.item_seed(0, 5) != rc.item_seed(1, 5)
