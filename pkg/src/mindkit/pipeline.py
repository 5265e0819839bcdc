"""On-disk workspace: dataset, trained models, features, voxels, decoders and runs.

Layout under a dataset directory ``D``::

    D/manifest.json              scene specs, captions, subject seeds, dataset hash
    D/images/{train,test}_NNNNN.ppm
    D/models/{autoencoder,encoder,denoiser}/   TNSR bundles + loss.csv
    D/features/                  per-split feature bundle, tagged with the weights hash
    D/voxels/<subject>/          trial responses for both splits
    D/decoders/<subject>/        ridge decoders

Every manifest is deterministic (no clocks); wall-clock data lives in
``timing.json`` next to it.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np

from mindkit import autoencoder as ae
from mindkit import contrastive as ce
from mindkit import decode as dc
from mindkit import diffusion as df
from mindkit import io
from mindkit import neurosim as ns
from mindkit.errors import BadRange, IOFailure, UpstreamMissing
from mindkit.reconstruct import Models

MODEL_NAMES = ("autoencoder", "encoder", "denoiser")
SPLITS = ("train", "test")


# ---------------------------------------------------------------- configuration

@dataclass
class DataConfig:
    n_train: int = 2000
    n_test: int = 200
    subjects: int = 4
    seed: int = 7
    sigma: float = 0.1
    n_voxels: int = 512
    sparsity: float = 0.25

    def validate(self) -> "DataConfig":
        if self.n_train < 1 or self.n_test < 1:
            raise BadRange("n_train and n_test must be >= 1")
        if self.subjects < 1 or self.n_voxels < 1:
            raise BadRange("need at least one subject and one voxel")
        if self.sigma < 0 or not 0 < self.sparsity <= 1:
            raise BadRange("sigma must be >= 0 and sparsity in (0, 1]")
        return self


@dataclass
class TrainConfig:
    autoencoder: ae.AEHyper = field(default_factory=ae.AEHyper)
    encoder: ce.ContrastiveHyper = field(default_factory=ce.ContrastiveHyper)
    denoiser: df.DenoiserHyper = field(default_factory=df.DenoiserHyper)
    ae_arch: ae.AEConfig = field(default_factory=ae.AEConfig)
    encoder_arch: ce.EncoderConfig = field(default_factory=ce.EncoderConfig)
    denoiser_arch: df.DenoiserConfig = field(default_factory=df.DenoiserConfig)


def to_jsonable(obj: Any) -> Any:
    if is_dataclass(obj):
        return {f.name: to_jsonable(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def update_dataclass(obj, overrides: Mapping[str, Any] | None):
    """Copy of ``obj`` with nested dict overrides applied; unknown keys are rejected."""
    if not overrides:
        return obj
    names = {f.name: f for f in fields(obj)}
    changes = {}
    for k, v in overrides.items():
        if k not in names:
            raise BadRange(f"unknown config key {k!r} for {type(obj).__name__}")
        cur = getattr(obj, k)
        changes[k] = update_dataclass(cur, v) if is_dataclass(cur) else (tuple(v) if isinstance(cur, tuple) else v)
    return replace(obj, **changes)


# ---------------------------------------------------------------- helpers

def _write_json(path: Path, doc: Mapping) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IOFailure(str(exc)) from exc


def _read_json(path: Path, stage: str) -> dict:
    if not path.exists():
        raise UpstreamMissing(stage, f"{path} not found")
    try:
        return json.loads(path.read_text())
    except ValueError as exc:
        raise IOFailure(f"{path}: {exc}") from exc


def write_timing(directory: Path, durations: Mapping[str, float]) -> None:
    _write_json(Path(directory) / "timing.json",
                {"finished_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
                 "durations_s": {k: round(v, 3) for k, v in durations.items()}})


def write_curve(path: Path, header: list[str], rows: list[list]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def image_name(split: str, index: int) -> str:
    return f"{split}_{index:05d}.ppm"


# ---------------------------------------------------------------- workspace

class Workspace:
    def __init__(self, root: str | Path):
        self.root = Path(root)

    # paths
    @property
    def manifest_path(self) -> Path:
        return self.root / "manifest.json"

    def model_dir(self, name: str) -> Path:
        return self.root / "models" / name

    @property
    def features_dir(self) -> Path:
        return self.root / "features"

    def voxels_dir(self, subject: int) -> Path:
        return self.root / "voxels" / str(subject)

    def decoders_dir(self, subject: int) -> Path:
        return self.root / "decoders" / str(subject)

    # dataset
    def manifest(self) -> dict:
        return _read_json(self.manifest_path, "gen-data")

    def subjects(self) -> list[int]:
        return [int(s) for s in self.manifest()["subjects"]]

    def images(self, split: str) -> np.ndarray:
        man = self.manifest()
        n = len(man["scenes"][split])
        if n == 0:
            return np.zeros((0,) + ae.IMAGE_SHAPE, np.float32)
        return np.stack([io.read_ppm(self.root / "images" / image_name(split, i)) for i in range(n)])

    def tokens(self, split: str) -> np.ndarray:
        return np.asarray(self.manifest()["captions"][split], dtype=np.int64)

    def dataset_hash(self) -> str:
        return self.manifest()["dataset_hash"]

    def verify_dataset(self) -> str:
        """Recompute the dataset hash from disk and compare it with the manifest."""
        man = self.manifest()
        digest = _dataset_digest(man["core"], self.root)
        if digest != man["dataset_hash"]:
            raise UpstreamMissing("gen-data", "dataset files do not match manifest hash")
        return digest

    # models
    def has_model(self, name: str) -> bool:
        return (self.model_dir(name) / "manifest.json").exists()

    def model_hash(self, name: str) -> str:
        if not self.has_model(name):
            raise UpstreamMissing("train", f"model {name!r} has not been trained")
        return _read_json(self.model_dir(name) / "manifest.json", "train")["hash"]

    def load_model(self, name: str):
        if not self.has_model(name):
            raise UpstreamMissing("train", f"model {name!r} has not been trained")
        tensors, meta, digest = io.load_bundle(self.model_dir(name))
        if io.hash_arrays(tensors) != digest:
            raise UpstreamMissing("train", f"model {name!r} weights do not match their manifest hash")
        if name == "autoencoder":
            scale = float(tensors.pop("latent_scale").reshape(()))
            return ae.AutoencoderParams(tensors, ae.AEConfig(**meta["config"]), scale)
        if name == "encoder":
            return ce.EncoderParams(tensors, ce.EncoderConfig(**meta["config"]))
        return df.DenoiserParams(tensors, df.DenoiserConfig(**meta["config"]))

    def load_models(self) -> Models:
        return Models(*(self.load_model(n) for n in MODEL_NAMES),
                      schedule=df.make_schedule(self.load_model("denoiser").config.T))

    def weights_hash(self) -> str:
        """Hash of the two models that define the feature spaces."""
        return io.sha256_bytes(self.model_hash("autoencoder").encode(), self.model_hash("encoder").encode())

    # features / voxels
    def features(self) -> dict[str, dict[str, np.ndarray]]:
        if not (self.features_dir / "manifest.json").exists():
            raise UpstreamMissing("train", "features have not been computed (train all three models)")
        tensors, meta, _ = io.load_bundle(self.features_dir)
        if meta.get("weights_hash") != self.weights_hash():
            raise UpstreamMissing("train", "feature cache is stale relative to the trained models")
        out: dict[str, dict[str, np.ndarray]] = {s: {} for s in SPLITS}
        for k, v in tensors.items():
            split, name = k.split(".", 1)
            out[split][name] = v
        return out

    def voxels(self, subject: int) -> dict[str, np.ndarray]:
        d = self.voxels_dir(subject)
        if not (d / "manifest.json").exists():
            raise UpstreamMissing("train", f"no voxel responses for subject {subject}")
        tensors, meta, _ = io.load_bundle(d)
        if meta.get("weights_hash") != self.weights_hash():
            raise UpstreamMissing("train", f"voxels of subject {subject} predate the current models")
        return tensors

    def decoders(self, subject: int) -> tuple[dc.DecoderSet, str]:
        d = self.decoders_dir(subject)
        if not (d / "manifest.json").exists():
            raise UpstreamMissing("fit-decoders", f"no decoders for subject {subject}")
        decs, digest = dc.load_decoders(d)
        meta = _read_json(d / "manifest.json", "fit-decoders")["meta"]
        if meta.get("voxels_hash") != _read_json(self.voxels_dir(subject) / "manifest.json", "train")["hash"]:
            raise UpstreamMissing("fit-decoders", f"decoders of subject {subject} predate its voxel data")
        return decs, digest


def _dataset_digest(core: Mapping, root: Path) -> str:
    chunks = [io.canonical_json(core)]
    for split in SPLITS:
        for i in range(len(core["scenes"][split])):
            try:
                chunks.append((root / "images" / image_name(split, i)).read_bytes())
            except OSError as exc:
                raise UpstreamMissing("gen-data", f"missing image {image_name(split, i)}") from exc
    return io.sha256_bytes(*chunks)


# ---------------------------------------------------------------- stages

def build_dataset(root: str | Path, config: DataConfig, log: Callable[[str], None] | None = None) -> str:
    """Scenes, captions, images and subject seeds; returns the dataset hash."""
    cfg = config.validate()
    ws = Workspace(root)
    train, test = ns.generate_scenes(cfg.seed, cfg.n_train, cfg.n_test)
    scenes = {"train": train, "test": test}
    core = {
        "config": asdict(cfg),
        "subjects": ns.subject_seeds(cfg.seed, cfg.subjects),
        "scenes": {s: [sp.to_json() for sp in scenes[s]] for s in SPLITS},
        "captions": {s: ns.captions_all(scenes[s]).tolist() for s in SPLITS},
    }
    for split in SPLITS:
        for i, spec in enumerate(scenes[split]):
            io.write_ppm(ws.root / "images" / image_name(split, i), ns.render(spec))
    digest = _dataset_digest(core, ws.root)
    _write_json(ws.manifest_path, {"kind": "dataset", "core": core, "subjects": core["subjects"],
                                   "scenes": core["scenes"], "captions": core["captions"], "dataset_hash": digest})
    if log:
        log(f"dataset: {cfg.n_train} train / {cfg.n_test} test scenes, subjects {core['subjects']}, hash {digest[:12]}")
    return digest


def _save_model(ws: Workspace, name: str, params, curve_header: list[str], curve_rows: list[list],
                hyper, dataset_hash: str) -> str:
    tensors = dict(params.weights)
    if name == "autoencoder":
        tensors["latent_scale"] = np.array(params.latent_scale, dtype=np.float32)
    meta = {"config": to_jsonable(params.config), "hyper": to_jsonable(hyper), "dataset_hash": dataset_hash}
    d = ws.model_dir(name)
    digest = io.save_bundle(d, tensors, meta)
    write_curve(d / "loss.csv", curve_header, curve_rows)
    return digest


def train_models(root: str | Path, config: TrainConfig, stages=MODEL_NAMES,
                 log: Callable[[str], None] | None = None) -> dict[str, str]:
    """Train the requested models in dependency order; returns {name: weights hash}."""
    ws = Workspace(root)
    dhash = ws.verify_dataset()
    x = ws.images("train")
    toks = ws.tokens("train")
    out: dict[str, str] = {}
    durations: dict[str, float] = {}
    for name in MODEL_NAMES:
        if name not in stages:
            continue
        t0 = time.perf_counter()
        if name == "autoencoder":
            params, curve = ae.train_autoencoder(x, ae.init_autoencoder(config.ae_arch), config.autoencoder, log)
            rows = [[i + 1, f"{v:.8f}"] for i, v in enumerate(curve)]
            out[name] = _save_model(ws, name, params, ["epoch", "loss"], rows, config.autoencoder, dhash)
        elif name == "encoder":
            held = (ws.images("test"), ws.tokens("test"))
            params, curve, acc = ce.train_contrastive(x, toks, ce.init_encoder(config.encoder_arch), config.encoder,
                                                      held, log)
            rows = [[i + 1, f"{v:.8f}", f"{a:.6f}"] for i, (v, a) in enumerate(zip(curve, acc))]
            out[name] = _save_model(ws, name, params, ["epoch", "loss", "heldout_top1"], rows, config.encoder, dhash)
        else:
            pa, pc = ws.load_model("autoencoder"), ws.load_model("encoder")
            arch = config.denoiser_arch
            if arch.d_cond != pc.config.d_txt:
                arch = replace(arch, d_cond=pc.config.d_txt)
            z = ae.encode(x, pa)
            c = ce.embed_text(toks, pc)[:, :ce.K_KEEP]
            sched = df.make_schedule(arch.T)
            params, curve = df.train_denoiser(z, c, df.init_denoiser(arch), sched, config.denoiser, log)
            rows = [[i + 1, f"{v:.8f}"] for i, v in enumerate(curve)]
            out[name] = _save_model(ws, name, params, ["epoch", "loss"], rows, config.denoiser, dhash)
        durations[name] = time.perf_counter() - t0
        write_timing(ws.model_dir(name), {name: durations[name]})
        if log:
            log(f"{name}: weights hash {out[name][:12]} ({durations[name]:.1f}s)")
    if all(ws.has_model(n) for n in MODEL_NAMES):
        simulate(root, log=log)
    return out


def compute_features(images: np.ndarray, tokens: np.ndarray, autoencoder: ae.AutoencoderParams,
                     encoder: ce.EncoderParams, batch: int = 256) -> dict[str, np.ndarray]:
    """Every decodable feature space for a set of scenes: c (flattened kept rows), z and the taps."""
    parts: dict[str, list[np.ndarray]] = {k: [] for k in ns.FEATURE_ORDER}
    for i in range(0, len(images), batch):
        xb, tb = images[i:i + batch], tokens[i:i + batch]
        f = ce.image_features(xb, encoder)
        parts["c"].append(ce.truncate_condition(ce.embed_text(tb, encoder)))
        parts["z"].append(ae.encode(xb, autoencoder))
        for k in ce.TAP_NAMES:
            parts[k].append(f[k])
    return {k: np.concatenate(v).astype(np.float32) for k, v in parts.items()}


def simulate(root: str | Path, log: Callable[[str], None] | None = None) -> str:
    """Feature cache plus voxel responses for every subject; returns the weights hash used."""
    ws = Workspace(root)
    man = ws.manifest()
    cfg = DataConfig(**man["core"]["config"])
    pa, pc = ws.load_model("autoencoder"), ws.load_model("encoder")
    whash = ws.weights_hash()
    feats = {s: compute_features(ws.images(s), ws.tokens(s), pa, pc) for s in SPLITS}
    io.save_bundle(ws.features_dir, {f"{s}.{k}": v for s in SPLITS for k, v in feats[s].items()},
                   {"weights_hash": whash, "order": list(ns.FEATURE_ORDER)})
    blocks = {k: feats["train"][k].shape[1] for k in ns.FEATURE_ORDER}
    for subject in ws.subjects():
        model = ns.make_subject(subject, blocks, feats["train"], cfg.n_voxels, cfg.sparsity, cfg.sigma, whash)
        tensors = {}
        for si, split in enumerate(SPLITS):
            f = ns.concat_features(feats[split])
            count_rng = np.random.default_rng(np.random.SeedSequence([subject, si, 0xC0]))
            counts = ns.draw_trial_counts(len(f), count_rng)
            rngs = [ns.scene_rng(subject, 10 + si, i) for i in range(len(f))]
            trials, avg = ns.respond_batch(f, model, counts, rngs)
            tensors[f"{split}.trials"] = trials
            tensors[f"{split}.avg"] = avg
            tensors[f"{split}.n_trials"] = counts.astype(np.float32)
        io.save_bundle(ws.voxels_dir(subject), tensors,
                       {"subject": subject, "weights_hash": whash, "sigma": cfg.sigma, "n_voxels": cfg.n_voxels,
                        "sparsity": cfg.sparsity, "mixing_hash": io.hash_arrays({"w": model.mixing})})
        if log:
            log(f"subject {subject}: simulated {cfg.n_voxels} voxels")
    return whash


def fit_subject_decoders(root: str | Path, subject: int, lams=dc.LAMBDA_GRID, fraction: float = dc.KEEP_FRACTION,
                         k_folds: int = dc.K_FOLDS, fold_seed: int = 0, standardize: bool = True,
                         log: Callable[[str], None] | None = None) -> str:
    ws = Workspace(root)
    feats = ws.features()["train"]
    vox = ws.voxels(subject)
    decs = dc.fit_decoders(vox["train.avg"], feats, lams, fraction, k_folds, fold_seed, standardize, log=log)
    digest = dc.save_decoders(ws.decoders_dir(subject), decs)
    # stamp the voxel provenance into the decoder manifest
    path = ws.decoders_dir(subject) / "manifest.json"
    man = json.loads(path.read_text())
    man["meta"]["voxels_hash"] = _read_json(ws.voxels_dir(subject) / "manifest.json", "train")["hash"]
    man["meta"]["subject"] = int(subject)
    _write_json(path, man)
    return digest
