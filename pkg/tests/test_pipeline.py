import json
import shutil

import numpy as np
import pytest

from mindkit import checks
from mindkit import pipeline as pl
from mindkit.errors import BadRange, UpstreamMissing


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    checks.tiny_pipeline(root, seed=5)
    return pl.Workspace(root / "ds")


def test_data_config_validation():
    with pytest.raises(BadRange):
        pl.DataConfig(sigma=-1).validate()
    with pytest.raises(BadRange):
        pl.DataConfig(sparsity=0).validate()


def test_update_dataclass_nested_and_strict():
    cfg = pl.update_dataclass(pl.TrainConfig(), {"autoencoder": {"epochs": 3}})
    assert cfg.autoencoder.epochs == 3
    with pytest.raises(BadRange):
        pl.update_dataclass(pl.TrainConfig(), {"autoencoder": {"epochz": 3}})


def test_to_jsonable_roundtrip():
    doc = pl.to_jsonable(pl.TrainConfig())
    assert json.loads(json.dumps(doc)) == doc


def test_workspace_contents(tiny):
    assert tiny.images("train").shape == (checks.TINY_RUN["train"], 32, 32, 3)
    assert tiny.tokens("test").shape == (checks.TINY_RUN["test"], 8)
    feats = tiny.features()
    assert feats["test"]["c"].shape == (checks.TINY_RUN["test"], 192)
    assert feats["train"]["z"].shape[1] == 256 and feats["train"]["tap2"].shape[1] == 768
    vox = tiny.voxels(tiny.subjects()[0])
    assert vox["test.avg"].shape == (checks.TINY_RUN["test"], 512)


def test_voxel_averages_match_trials(tiny):
    vox = tiny.voxels(tiny.subjects()[0])
    trials, counts, avg = vox["train.trials"], vox["train.n_trials"].astype(int), vox["train.avg"]
    for i in range(5):
        np.testing.assert_allclose(avg[i], trials[i, :counts[i]].astype(np.float64).mean(0), rtol=1e-6)


def test_stale_feature_cache_detected(tiny, tmp_path):
    ws = pl.Workspace(shutil.copytree(tiny.root, tmp_path / "c"))
    man = ws.features_dir / "manifest.json"
    doc = json.loads(man.read_text())
    doc["meta"]["weights_hash"] = "0" * 64
    man.write_text(json.dumps(doc))
    with pytest.raises(UpstreamMissing):
        ws.features()


def test_decoders_must_match_voxels(tiny, tmp_path):
    ws = pl.Workspace(shutil.copytree(tiny.root, tmp_path / "c"))
    s = ws.subjects()[0]
    man = ws.voxels_dir(s) / "manifest.json"
    doc = json.loads(man.read_text())
    doc["hash"] = "f" * 64
    man.write_text(json.dumps(doc))
    with pytest.raises(UpstreamMissing):
        ws.decoders(s)


def test_build_dataset_is_deterministic(tmp_path):
    cfg = pl.DataConfig(n_train=30, n_test=5, subjects=2, seed=4)
    a = pl.build_dataset(tmp_path / "a", cfg)
    b = pl.build_dataset(tmp_path / "b", cfg)
    assert a == b
    assert a != pl.build_dataset(tmp_path / "c", pl.DataConfig(n_train=30, n_test=5, subjects=2, seed=5))
    assert len(pl.Workspace(tmp_path / "a").subjects()) == 2


def test_missing_manifest(tmp_path):
    with pytest.raises(UpstreamMissing):
        pl.Workspace(tmp_path).manifest()
