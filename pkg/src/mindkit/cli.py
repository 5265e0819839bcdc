"""Command-line entry point: ``mindkit <command> ...``.

Exit codes: 0 success, 1 failed checks, 2 usage error, 3 missing or stale
upstream artifact, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from mindkit import decode as dc
from mindkit import io
from mindkit import metrics as mt
from mindkit import pipeline as pl
from mindkit import reconstruct as rc
from mindkit.errors import (BadRange, IOFailure, MindkitError, NonFinite, NonFiniteLoss, SingularSystem,
                            UpstreamMissing)

EXIT_OK, EXIT_CHECKS, EXIT_USAGE, EXIT_UPSTREAM, EXIT_NUMERIC = 0, 1, 2, 3, 4
ABLATIONS = ("none", "without_control", "without_z")

log = logging.getLogger("mindkit")


class UsageError(MindkitError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits with 2 as well; keep the message format uniform
        self.print_usage(sys.stderr)
        raise UsageError(message)


def thread_cap() -> int | None:
    raw = os.environ.get("MINDKIT_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError as exc:
        raise UsageError(f"MINDKIT_THREADS must be an integer, got {raw!r}") from exc
    if n < 1:
        raise UsageError("MINDKIT_THREADS must be >= 1")
    return n


# ---------------------------------------------------------------- config

def load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except ValueError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    unknown = set(doc) - {"data", "train", "decode", "reconstruct"}
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    return doc


def decode_settings(doc: dict) -> dict:
    d = {"lambdas": list(dc.LAMBDA_GRID), "fraction": dc.KEEP_FRACTION, "k_folds": dc.K_FOLDS, "fold_seed": 0,
         "standardize": True}
    extra = set(doc.get("decode", {})) - set(d)
    if extra:
        raise UsageError(f"unknown decode keys: {sorted(extra)}")
    d.update(doc.get("decode", {}))
    return d


def recon_config(doc: dict, args) -> rc.ReconstructionConfig:
    cfg = rc.ReconstructionConfig.from_json(doc.get("reconstruct", {}))
    over = {}
    if args.t_start_frac is not None:
        over["t_start_frac"] = args.t_start_frac
    if args.steps is not None:
        over["iterations"] = args.steps
    if args.seed is not None:
        over["seed"] = args.seed
    if args.stage2_stride is not None:
        over["stride"] = args.stage2_stride
    if args.threshold is not None:
        over["threshold"] = args.threshold
    if args.lr is not None:
        over["lr"] = args.lr
    if args.ablate == "without_control":
        over["without_control"] = True
    elif args.ablate == "without_z":
        over["without_z"] = True
    return replace(cfg, **over).validate()


def run_label(cfg: rc.ReconstructionConfig) -> str:
    if cfg.without_control and cfg.without_z:
        return "without_control+without_z"
    if cfg.without_control:
        return "without_control"
    return "without_z" if cfg.without_z else "full"


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    doc = load_config(args.config)
    cfg = pl.update_dataclass(pl.DataConfig(), doc.get("data"))
    over = {k: v for k, v in (("n_train", args.train), ("n_test", args.test), ("subjects", args.subjects),
                              ("seed", args.seed), ("sigma", args.sigma)) if v is not None}
    cfg = replace(cfg, **over)
    try:
        cfg.validate()
    except BadRange as exc:
        raise UsageError(str(exc)) from exc
    t0 = time.perf_counter()
    digest = pl.build_dataset(args.out, cfg, log=log.info)
    pl.write_timing(Path(args.out), {"gen-data": time.perf_counter() - t0})
    print(digest)
    return EXIT_OK


def cmd_train(args) -> int:
    doc = load_config(args.config)
    tcfg = pl.update_dataclass(pl.TrainConfig(), doc.get("train"))
    if args.epochs is not None:
        tcfg = replace(tcfg, autoencoder=replace(tcfg.autoencoder, epochs=args.epochs),
                       encoder=replace(tcfg.encoder, epochs=args.epochs),
                       denoiser=replace(tcfg.denoiser, epochs=args.epochs))
    stages = pl.MODEL_NAMES if args.stage == "all" else (args.stage,)
    hashes = pl.train_models(args.dataset, tcfg, stages, log=log.info)
    for k, v in hashes.items():
        print(f"{k} {v}")
    return EXIT_OK


def _subjects(ws: pl.Workspace, spec: str) -> list[int]:
    known = ws.subjects()
    if spec == "all":
        return known
    try:
        s = int(spec)
    except ValueError as exc:
        raise UsageError(f"--subject must be an integer seed or 'all', got {spec!r}") from exc
    if s not in known:
        raise UsageError(f"subject {s} is not in this dataset (known: {known})")
    return [s]


def cmd_fit_decoders(args) -> int:
    doc = load_config(args.config)
    d = decode_settings(doc)
    ws = pl.Workspace(args.dataset)
    ws.verify_dataset()
    for s in _subjects(ws, args.subject):
        t0 = time.perf_counter()
        digest = pl.fit_subject_decoders(args.dataset, s, d["lambdas"], d["fraction"], d["k_folds"], d["fold_seed"],
                                         d["standardize"], log=log.info)
        pl.write_timing(ws.decoders_dir(s), {"fit-decoders": time.perf_counter() - t0})
        print(f"{s} {digest}")
    return EXIT_OK


def write_run(out: Path, res: rc.PipelineResult, manifest: dict, truth: np.ndarray) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for sub in ("recon", "stage1", "trajectory"):
        (out / sub).mkdir(exist_ok=True)
    if res.state is not None:
        for i, item in enumerate(res.items):
            io.write_ppm(out / "recon" / f"{item:05d}.ppm", res.state.best_image[i])
            io.write_ppm(out / "stage1" / f"{item:05d}.ppm", res.stage1.image[i])
            pl.write_curve(out / "trajectory" / f"{item:05d}.csv", ["iteration", "L_structure"],
                           [[k, repr(v)] for k, v in enumerate(res.state.trajectory[i])])
    extra = {"run": {"label": manifest["label"], "subject": manifest["subject"], "items": res.items,
                     "initial_loss": [float(v) for v in res.initial_loss()],
                     "best_loss": [float(v) for v in res.final_loss()],
                     "last_loss": [float(v) for v in res.last_loss()],
                     "best_iteration": [] if res.state is None else [int(v) for v in res.state.best_iteration],
                     "status": [] if res.state is None else res.state.status,
                     "accuracy": [float(v) for v in res.accuracy], "note": res.note}}
    mt.write_metrics(out, res.records, extra, label=manifest["label"])
    pl._write_json(out / "manifest.json", manifest)


def cmd_reconstruct(args) -> int:
    doc = load_config(args.config)
    cfg = recon_config(doc, args)
    cap = thread_cap()
    jobs = max(1, args.jobs if cap is None else min(args.jobs, cap))
    ws = pl.Workspace(args.dataset)
    dhash = ws.verify_dataset()
    (subject,) = _subjects(ws, str(args.subject))
    t0 = time.perf_counter()
    models = ws.load_models()
    decs, dec_hash = ws.decoders(subject)
    feats = ws.features()["test"]
    vox = ws.voxels(subject)["test.avg"]
    truth = ws.images("test")
    res = rc.run_pipeline(vox, truth, feats, decs, models, cfg, log=log.info, jobs=jobs)
    label = run_label(cfg)
    manifest = {
        "kind": "reconstruction", "label": label, "subject": subject, "config": cfg.to_json(),
        "seeds": {"reconstruction": cfg.seed, "subject": subject, "fold": decs.fold_seed},
        "dataset_hash": dhash, "decoder_hash": dec_hash,
        "model_hashes": {n: ws.model_hash(n) for n in pl.MODEL_NAMES},
        "items": res.items,
    }
    write_run(Path(args.out), res, manifest, truth)
    pl.write_timing(Path(args.out), {"reconstruct": time.perf_counter() - t0})
    agg = mt.aggregate(res.records)
    if res.note:
        log.warning(res.note)
    print(f"{label} subject {subject}: n={agg.count} CLIP {agg.clip_cosine:.4f} SSIM {agg.ssim:.4f} PCC {agg.pcc:.4f}")
    return EXIT_OK


def _load_run(path: Path) -> dict:
    man = pl._read_json(path / "manifest.json", "reconstruct")
    if man.get("kind") != "reconstruction":
        raise UpstreamMissing("reconstruct", f"{path} is not a reconstruction run")
    return man


def cmd_evaluate(args) -> int:
    ws = pl.Workspace(args.dataset)
    dhash = ws.verify_dataset()
    run = Path(args.recon)
    man = _load_run(run)
    if man["dataset_hash"] != dhash:
        raise UpstreamMissing("reconstruct", "run was produced from a different dataset")
    encoder = ws.load_model("encoder")
    truth = ws.images("test")
    items = [int(i) for i in man["items"]]
    recon = np.stack([io.read_ppm(run / "recon" / f"{i:05d}.ppm") for i in items]) if items else truth[:0]
    records = mt.evaluate_images(items, recon, truth[items], encoder, clip=args.clip, per_channel=args.per_channel)
    out = Path(args.out) if args.out else run
    extra = {"evaluated_from": "ppm", "clip_negative": bool(args.clip), "per_channel_pcc": bool(args.per_channel)}
    mt.write_metrics(out, records, extra, label=man["label"])
    agg = mt.aggregate(records)
    print(f"{man['label']}: n={agg.count} CLIP {agg.clip_cosine:.4f} SSIM {agg.ssim:.4f} PCC {agg.pcc:.4f}")
    return EXIT_OK


def montage(columns: Sequence[np.ndarray], pad: int = 2) -> np.ndarray:
    """Rows = items, columns = image sources; white gutters."""
    rows, h, w = columns[0].shape[0], columns[0].shape[1], columns[0].shape[2]
    ncol = len(columns)
    out = np.ones((rows * (h + pad) + pad, ncol * (w + pad) + pad, 3), dtype=np.float32)
    for r in range(rows):
        for c, col in enumerate(columns):
            y, x = pad + r * (h + pad), pad + c * (w + pad)
            out[y:y + h, x:x + w] = col[r]
    return out


def cmd_report(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ws = pl.Workspace(args.dataset)
    truth = ws.images("test")
    by_subject: dict[int, list[tuple[Path, dict]]] = {}
    for r in args.runs:
        man = _load_run(Path(r))
        by_subject.setdefault(int(man["subject"]), []).append((Path(r), man))
    order = {"full": 0, "without_control": 1, "without_z": 2}
    for subject, runs in sorted(by_subject.items()):
        runs.sort(key=lambda rm: (order.get(rm[1]["label"], 9), str(rm[0])))
        rows = []
        for path, man in runs:
            agg = mt.read_metrics(path)["aggregate"]
            rows.append([man["label"], man["config"]["seed"], agg["count"], f"{agg['clip_cosine']:.6f}",
                         f"{agg['ssim']:.6f}", f"{agg['pcc']:.6f}"])
        pl.write_curve(out / f"table2_subject{subject}.csv", ["method", "seed", "n", "CLIP", "SSIM", "PCC"], rows)
        full = [(p, m) for p, m in runs if m["label"] == "full"]
        if full:
            path, man = full[0]
            items = [int(i) for i in man["items"]][:args.max_items]
            if items:
                cols = [truth[items],
                        np.stack([io.read_ppm(path / "recon" / f"{i:05d}.ppm") for i in items]),
                        np.stack([io.read_ppm(path / "stage1" / f"{i:05d}.ppm") for i in items])]
                io.write_ppm(out / f"montage_subject{subject}.ppm", montage(cols))
        print(f"subject {subject}: {len(runs)} runs -> table2_subject{subject}.csv")
    return EXIT_OK


def cmd_check(args) -> int:
    from mindkit import checks

    results = checks.run_invariant_suite(scope=args.scope, dataset=args.dataset, seed=args.seed)
    checks.write_results(Path(args.out), results)
    failed = [r for r in results if not r.passed]
    for r in results:
        status = "SKIP" if r.skipped else ("PASS" if r.passed else "FAIL")
        print(f"{status} {r.name}" + (f" (seed {r.seed}): {r.detail}" if not r.passed and r.detail else ""))
    return EXIT_CHECKS if failed else EXIT_OK


# ---------------------------------------------------------------- entry

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mindkit", description="Desk-scale voxel-to-image reconstruction pipeline.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="render scenes and write the dataset manifest")
    g.add_argument("--out", required=True)
    g.add_argument("--train", type=int)
    g.add_argument("--test", type=int)
    g.add_argument("--subjects", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--sigma", type=float)
    g.add_argument("--config")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train models; simulates features and voxels once all three exist")
    t.add_argument("--dataset", required=True)
    t.add_argument("--stage", choices=("all",) + pl.MODEL_NAMES, default="all")
    t.add_argument("--epochs", type=int, help="override the epoch count of every trained model")
    t.add_argument("--config")
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("fit-decoders", help="ridge decoders per subject")
    f.add_argument("--dataset", required=True)
    f.add_argument("--subject", default="all")
    f.add_argument("--config")
    f.set_defaults(func=cmd_fit_decoders)

    r = sub.add_parser("reconstruct", help="two-stage reconstruction of the filtered test split")
    r.add_argument("--dataset", required=True)
    r.add_argument("--subject", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--config")
    r.add_argument("--jobs", type=int, default=1)
    r.add_argument("--ablate", choices=ABLATIONS, default="none")
    r.add_argument("--t-start-frac", type=float)
    r.add_argument("--steps", type=int, help="Stage-2 iteration count")
    r.add_argument("--seed", type=int)
    r.add_argument("--stage2-stride", type=int)
    r.add_argument("--threshold", type=float)
    r.add_argument("--lr", type=float)
    r.set_defaults(func=cmd_reconstruct)

    e = sub.add_parser("evaluate", help="recompute metrics from a run's PPM outputs")
    e.add_argument("--dataset", required=True)
    e.add_argument("--recon", required=True)
    e.add_argument("--out")
    e.add_argument("--clip", action="store_true", help="clip negative cosines to 0")
    e.add_argument("--per-channel", action="store_true", help="average per-channel PCC instead of joint RGB")
    e.set_defaults(func=cmd_evaluate)

    rp = sub.add_parser("report", help="per-subject metric tables and image montages")
    rp.add_argument("--dataset", required=True)
    rp.add_argument("--runs", nargs="+", required=True)
    rp.add_argument("--out", required=True)
    rp.add_argument("--max-items", type=int, default=8)
    rp.set_defaults(func=cmd_report)

    c = sub.add_parser("check", help="run the invariant suite and write check-results.json")
    c.add_argument("--scope", default="all", help="module filter, e.g. tensor,decode")
    c.add_argument("--dataset", help="workspace for checks that need trained artifacts")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", default=".")
    c.set_defaults(func=cmd_check)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s",
                            stream=sys.stderr)
        thread_cap()
        if getattr(args, "jobs", 1) < 1:
            raise UsageError("--jobs must be >= 1")
        return args.func(args)
    except UsageError as exc:
        print(f"mindkit: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except UpstreamMissing as exc:
        print(f"mindkit: {exc}", file=sys.stderr)
        return EXIT_UPSTREAM
    except IOFailure as exc:
        print(f"mindkit: I/O failure: {exc}", file=sys.stderr)
        return EXIT_UPSTREAM
    except (NonFinite, NonFiniteLoss, SingularSystem, FloatingPointError) as exc:
        print(f"mindkit: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except MindkitError as exc:
        print(f"mindkit: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
