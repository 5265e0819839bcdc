import json
import shutil

import pytest

from mindkit import checks
from mindkit.cli import EXIT_CHECKS, EXIT_OK, EXIT_UPSTREAM, EXIT_USAGE, main
from mindkit.pipeline import Workspace


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    checks.tiny_pipeline(root, seed=3)
    ws = Workspace(root / "ds")
    return root, ws, str(ws.subjects()[0])


def run(*argv):
    return main([str(a) for a in argv])


def test_run_layout(tiny):
    root, ws, _ = tiny
    run_dir = root / "run"
    for name in ("metrics.json", "metrics.csv", "manifest.json", "timing.json"):
        assert (run_dir / name).exists()
    man = json.loads((run_dir / "manifest.json").read_text())
    assert man["kind"] == "reconstruction" and man["dataset_hash"] == ws.dataset_hash()
    items = man["items"]
    assert len(list((run_dir / "recon").glob("*.ppm"))) == len(items)
    traj = (run_dir / "trajectory" / f"{items[0]:05d}.csv").read_text().splitlines()
    assert traj[0] == "iteration,L_structure" and len(traj) == 1 + 1 + checks.TINY_RUN["steps"]


def test_manifest_has_no_clock_values(tiny):
    root, _, _ = tiny
    text = (root / "run" / "manifest.json").read_text()
    assert "time" not in text and "seconds" not in text
    assert "reconstruct" in json.loads((root / "run" / "timing.json").read_text())["durations_s"]


def test_evaluate_reproduces_metrics_from_ppm(tiny, tmp_path):
    root, _, _ = tiny
    assert run("evaluate", "--dataset", root / "ds", "--recon", root / "run", "--out", tmp_path) == EXIT_OK
    a = json.loads((root / "run" / "metrics.json").read_text())["aggregate"]
    b = json.loads((tmp_path / "metrics.json").read_text())["aggregate"]
    assert a == pytest.approx(b, abs=1e-6)


def test_report_outputs(tiny):
    root, _, subject = tiny
    assert (root / "report" / f"table2_subject{subject}.csv").read_text().startswith("method,seed,n,CLIP,SSIM,PCC")
    assert (root / "report" / f"montage_subject{subject}.ppm").exists()


def test_ablation_flags_and_jobs(tiny, tmp_path):
    root, _, subject = tiny
    ds = root / "ds"
    common = ["--dataset", ds, "--subject", subject, "--steps", 2, "--threshold", -1]
    assert run("reconstruct", *common, "--out", tmp_path / "wc", "--ablate", "without_control") == EXIT_OK
    assert json.loads((tmp_path / "wc" / "manifest.json").read_text())["label"] == "without_control"
    assert run("reconstruct", *common, "--out", tmp_path / "j2", "--jobs", 2) == EXIT_OK
    a = (root / "run" / "metrics.json").read_bytes()
    assert (tmp_path / "j2" / "metrics.json").read_bytes() == a


def test_empty_filter_is_not_an_error(tiny, tmp_path):
    root, _, subject = tiny
    assert run("reconstruct", "--dataset", root / "ds", "--subject", subject, "--out", tmp_path / "e",
               "--threshold", 1.01, "--steps", 1) == EXIT_OK
    doc = json.loads((tmp_path / "e" / "metrics.json").read_text())
    assert doc["aggregate"]["count"] == 0 and doc["run"]["note"].startswith("EmptyAfterFilter")


def test_usage_errors(tiny, tmp_path, monkeypatch):
    root, _, subject = tiny
    assert run("nonsense") == EXIT_USAGE
    assert run("reconstruct", "--dataset", root / "ds", "--subject", "12", "--out", tmp_path) == EXIT_USAGE
    assert run("reconstruct", "--dataset", root / "ds", "--subject", subject, "--out", tmp_path,
               "--jobs", 0) == EXIT_USAGE
    bad = tmp_path / "cfg.json"
    bad.write_text(json.dumps({"bogus": {}}))
    assert run("fit-decoders", "--dataset", root / "ds", "--config", bad) == EXIT_USAGE
    assert run("gen-data", "--out", tmp_path / "g", "--train", 0) == EXIT_USAGE
    monkeypatch.setenv("MINDKIT_THREADS", "zero")
    assert run("check", "--scope", "metrics", "--out", tmp_path) == EXIT_USAGE


def test_upstream_missing(tmp_path):
    assert run("gen-data", "--out", tmp_path / "d", "--train", 40, "--test", 6, "--subjects", 1) == EXIT_OK
    assert run("fit-decoders", "--dataset", tmp_path / "d") == EXIT_UPSTREAM
    assert run("evaluate", "--dataset", tmp_path / "d", "--recon", tmp_path / "nothing") == EXIT_UPSTREAM


def test_corrupted_artifacts_rejected():
    res = checks.REGISTRY["cli.hash_validation"][1](checks.SuiteContext(seed=1))
    assert res.passed, res.measured


def test_check_command(tmp_path, monkeypatch):
    assert run("check", "--scope", "metrics,tensor", "--out", tmp_path) == EXIT_OK
    doc = json.loads((tmp_path / "check-results.json").read_text())
    assert doc["passed"] and {r["name"].split(".")[0] for r in doc["results"]} == {"metrics", "tensor"}

    def broken(ctx):
        return checks.CheckResult("metrics.symmetry", False, seed=5)

    monkeypatch.setitem(checks.REGISTRY, "metrics.symmetry", ("metrics", broken))
    assert run("check", "--scope", "metrics", "--out", tmp_path) == EXIT_CHECKS


def test_dataset_copy_keeps_hash(tiny, tmp_path):
    root, ws, _ = tiny
    shutil.copytree(root / "ds", tmp_path / "copy")
    assert Workspace(tmp_path / "copy").verify_dataset() == ws.dataset_hash()
