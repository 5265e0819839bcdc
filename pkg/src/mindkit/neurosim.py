"""Synthetic stimuli and simulated voxel responses.

Scenes are single flat-colored shapes on a flat background, rasterized at
32x32 without anti-aliasing. Each scene carries a six-token caption (shape,
foreground color, background color, coarse position, coarse size, coarse
orientation). A subject is a sparse random linear read-out of the
concatenated model features plus Gaussian noise; repeated trials of the same
scene are averaged.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from mindkit.errors import StaleFeatureCache

IMAGE_SIZE = 32

SHAPES = ("circle", "square", "triangle", "diamond", "cross", "ring", "bar", "ell")
FG_COLORS = {
    "red": (220, 40, 40),
    "green": (40, 180, 60),
    "blue": (50, 90, 230),
    "yellow": (235, 215, 40),
    "cyan": (40, 205, 215),
    "magenta": (205, 50, 195),
    "orange": (245, 140, 30),
    "white": (240, 240, 240),
}
BG_COLORS = {
    "black": (15, 15, 15),
    "gray": (120, 120, 120),
    "navy": (20, 30, 95),
    "olive": (95, 95, 25),
    "maroon": (100, 20, 25),
    "teal": (15, 85, 85),
    "purple": (70, 30, 105),
    "brown": (105, 65, 35),
}

POS_RANGE = (0.3, 0.7)
SIZE_RANGE = (0.12, 0.28)  # bounding radius as a fraction of frame width
POS_BUCKETS = 3
SIZE_BUCKETS = 3
ORIENT_BUCKETS = 4

MAX_TOKENS = 8
PAD = "<pad>"


def _build_vocab() -> dict[str, int]:
    words = [PAD]
    words += [f"shape:{s}" for s in SHAPES]
    words += [f"fg:{c}" for c in FG_COLORS]
    words += [f"bg:{c}" for c in BG_COLORS]
    words += [f"pos:{i}{j}" for i in range(POS_BUCKETS) for j in range(POS_BUCKETS)]
    words += [f"size:{i}" for i in range(SIZE_BUCKETS)]
    words += [f"orient:{i}" for i in range(ORIENT_BUCKETS)]
    return {w: i for i, w in enumerate(words)}


VOCAB = _build_vocab()


@dataclass(frozen=True)
class SceneSpec:
    shape: str
    x: float
    y: float
    size: float
    orientation: float
    fg: str
    bg: str

    def validate(self) -> None:
        if self.shape not in SHAPES or self.fg not in FG_COLORS or self.bg not in BG_COLORS:
            raise ValueError(f"unknown category in {self}")
        lo, hi = POS_RANGE
        if not (lo <= self.x <= hi and lo <= self.y <= hi):
            raise ValueError("position outside declared range")
        if not (SIZE_RANGE[0] <= self.size <= SIZE_RANGE[1]):
            raise ValueError("size outside declared range")
        # margin check: the bounding circle must stay inside the frame
        if min(self.x, self.y) - self.size < 0 or max(self.x, self.y) + self.size > 1:
            raise ValueError("object leaves the frame")

    def key(self) -> tuple:
        return (self.shape, round(self.x, 9), round(self.y, 9), round(self.size, 9),
                round(self.orientation, 9), self.fg, self.bg)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: Mapping) -> "SceneSpec":
        return cls(**d)


@dataclass
class SceneRecord:
    spec: SceneSpec
    image: np.ndarray
    tokens: list[int]
    features: dict[str, np.ndarray] | None = None
    features_hash: str | None = None


@dataclass
class VoxelRecord:
    trials: np.ndarray  # (n_trials, D_x)
    subject_seed: int

    def __post_init__(self) -> None:
        if not 1 <= self.trials.shape[0] <= 3:
            raise ValueError("trial count must be in 1..3")

    @property
    def averaged(self) -> np.ndarray:
        return average_trials(self.trials)


@dataclass
class SubjectModel:
    seed: int
    mixing: np.ndarray  # (D_x, D_features)
    sigma: np.ndarray  # (D_x,)
    mask: np.ndarray  # (D_x, D_features) bool
    weights_hash: str = ""
    blocks: dict[str, int] = field(default_factory=dict)

    @property
    def n_voxels(self) -> int:
        return self.mixing.shape[0]


def average_trials(trials: np.ndarray) -> np.ndarray:
    return np.asarray(trials, dtype=np.float64).mean(axis=0).astype(np.float32)


def sample_scene(rng: np.random.Generator) -> SceneSpec:
    """Uniform draws over every declared range / category."""
    shape = SHAPES[int(rng.integers(len(SHAPES)))]
    x = float(rng.uniform(*POS_RANGE))
    y = float(rng.uniform(*POS_RANGE))
    size = float(rng.uniform(*SIZE_RANGE))
    orientation = float(rng.uniform(0.0, 2.0 * math.pi))
    fg = list(FG_COLORS)[int(rng.integers(len(FG_COLORS)))]
    bg = list(BG_COLORS)[int(rng.integers(len(BG_COLORS)))]
    return SceneSpec(shape, x, y, size, orientation, fg, bg)


def _inside(shape: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    au, av = np.abs(u), np.abs(v)
    if shape == "circle":
        return u * u + v * v <= 1.0
    if shape == "square":
        return np.maximum(au, av) <= 0.72
    if shape == "triangle":
        return (v >= -0.5) & (v <= 1.0 - math.sqrt(3.0) * au)
    if shape == "diamond":
        return au + av <= 1.0
    if shape == "cross":
        return ((au <= 0.3) & (av <= 0.95)) | ((av <= 0.3) & (au <= 0.95))
    if shape == "ring":
        r2 = u * u + v * v
        return (r2 <= 1.0) & (r2 >= 0.3)
    if shape == "bar":
        return (au <= 1.0) & (av <= 0.35)
    if shape == "ell":
        return ((au <= 0.8) & (v >= 0.3) & (v <= 0.8)) | ((u >= -0.8) & (u <= -0.3) & (av <= 0.8))
    raise ValueError(shape)


_CENTERS = (np.arange(IMAGE_SIZE, dtype=np.float64) + 0.5) / IMAGE_SIZE


def render(spec: SceneSpec) -> np.ndarray:
    """Rasterize to (32, 32, 3) float32 in [0, 1]; pixel-center sampling, no anti-aliasing."""
    spec.validate()
    py, px = np.meshgrid(_CENTERS, _CENTERS, indexing="ij")
    dx, dy = px - spec.x, py - spec.y
    c, s = math.cos(spec.orientation), math.sin(spec.orientation)
    u = (c * dx + s * dy) / spec.size
    v = (-s * dx + c * dy) / spec.size
    inside = _inside(spec.shape, u, v)
    if not inside.any():
        # guarantee a visible object: light the pixel nearest the center
        inside[min(int(spec.y * IMAGE_SIZE), IMAGE_SIZE - 1), min(int(spec.x * IMAGE_SIZE), IMAGE_SIZE - 1)] = True
    fg = np.array(FG_COLORS[spec.fg], dtype=np.float32) / 255.0
    bg = np.array(BG_COLORS[spec.bg], dtype=np.float32) / 255.0
    return np.where(inside[..., None], fg, bg).astype(np.float32)


def _bucket(value: float, lo: float, hi: float, n: int) -> int:
    return min(n - 1, max(0, int((value - lo) / (hi - lo) * n)))


def caption(spec: SceneSpec) -> list[int]:
    col = _bucket(spec.x, *POS_RANGE, POS_BUCKETS)
    row = _bucket(spec.y, *POS_RANGE, POS_BUCKETS)
    size = _bucket(spec.size, *SIZE_RANGE, SIZE_BUCKETS)
    orient = _bucket(spec.orientation % (2 * math.pi), 0.0, 2 * math.pi, ORIENT_BUCKETS)
    words = [f"shape:{spec.shape}", f"fg:{spec.fg}", f"bg:{spec.bg}",
             f"pos:{row}{col}", f"size:{size}", f"orient:{orient}"]
    return [VOCAB[w] for w in words]


def make_record(spec: SceneSpec) -> SceneRecord:
    return SceneRecord(spec=spec, image=render(spec), tokens=caption(spec))


FEATURE_ORDER = ("c", "z", "tap1", "tap2", "tap3")


def concat_features(features: Mapping[str, np.ndarray], order: Sequence[str] = FEATURE_ORDER) -> np.ndarray:
    """Concatenate feature blocks along the last axis in a fixed order."""
    return np.concatenate([np.asarray(features[k], dtype=np.float32) for k in order], axis=-1)


def make_subject(seed: int, blocks: Mapping[str, int], train_features: Mapping[str, np.ndarray],
                 n_voxels: int = 512, sparsity: float = 0.25, sigma: float = 0.1,
                 weights_hash: str = "") -> SubjectModel:
    """Random sparse linear read-out calibrated on training features.

    Every block gets an equal share of each voxel's signal and every voxel's
    noiseless response has unit standard deviation over ``train_features``;
    ``sigma`` is therefore noise relative to signal.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EB]))
    names = [k for k in FEATURE_ORDER if k in blocks]
    dims = [int(blocks[k]) for k in names]
    total = int(sum(dims))
    mask = rng.random((n_voxels, total)) < sparsity
    w = rng.standard_normal((n_voxels, total)) * mask
    col = 0
    for k, d in zip(names, dims):
        f = np.asarray(train_features[k], dtype=np.float64).reshape(-1, d)
        spread = float(f.std(axis=0).mean()) or 1.0
        active = np.maximum(mask[:, col:col + d].sum(axis=1, keepdims=True), 1)
        w[:, col:col + d] /= spread * np.sqrt(active) * np.sqrt(len(names))
        col += d
    feats = concat_features({k: np.asarray(train_features[k]).reshape(-1, blocks[k]) for k in names}, names)
    signal = feats.astype(np.float64) @ w.T
    sd = signal.std(axis=0)
    w /= np.where(sd > 0, sd, 1.0)[:, None]
    return SubjectModel(seed=int(seed), mixing=w.astype(np.float32),
                        sigma=np.full(n_voxels, float(sigma), dtype=np.float32), mask=mask,
                        weights_hash=weights_hash, blocks={k: int(blocks[k]) for k in names})


def noiseless_response(features: np.ndarray, subject: SubjectModel) -> np.ndarray:
    """Linear read-out of concatenated features, (..., D_f) -> (..., D_x)."""
    return (np.asarray(features, dtype=np.float64) @ subject.mixing.T.astype(np.float64)).astype(np.float32)


def respond(record: SceneRecord, subject: SubjectModel, n_trials: int, rng: np.random.Generator) -> VoxelRecord:
    if record.features is None:
        raise StaleFeatureCache("scene has no cached features")
    if subject.weights_hash and record.features_hash != subject.weights_hash:
        raise StaleFeatureCache(
            f"feature cache hash {record.features_hash!r} != subject weights hash {subject.weights_hash!r}")
    if not 1 <= n_trials <= 3:
        raise ValueError("n_trials must be in 1..3")
    f = concat_features({k: np.asarray(record.features[k]).reshape(-1) for k in subject.blocks}, list(subject.blocks))
    base = noiseless_response(f, subject)
    noise = rng.standard_normal((n_trials, subject.n_voxels)).astype(np.float32) * subject.sigma
    return VoxelRecord(trials=(base[None, :] + noise).astype(np.float32), subject_seed=subject.seed)


def respond_batch(features: np.ndarray, subject: SubjectModel, n_trials: np.ndarray,
                  rngs: Sequence[np.random.Generator]) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`respond` for many scenes; returns (trials padded to 3, averages)."""
    base = noiseless_response(features, subject)
    n = base.shape[0]
    trials = np.zeros((n, 3, subject.n_voxels), dtype=np.float32)
    avg = np.zeros((n, subject.n_voxels), dtype=np.float32)
    for i in range(n):
        k = int(n_trials[i])
        noise = rngs[i].standard_normal((k, subject.n_voxels)).astype(np.float32) * subject.sigma
        trials[i, :k] = base[i][None, :] + noise
        avg[i] = average_trials(trials[i, :k])
    return trials, avg


TRIAL_PROBS = (0.05, 0.10, 0.85)  # mostly three repeats, occasionally fewer


def draw_trial_counts(n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.choice(np.array([1, 2, 3]), size=n, p=np.array(TRIAL_PROBS))


def scene_rng(master_seed: int, split: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), int(split), int(index)]))


def subject_seeds(master_seed: int, n_subjects: int) -> list[int]:
    return [int(np.random.SeedSequence([int(master_seed), 99, k]).generate_state(1)[0]) for k in range(n_subjects)]


def generate_scenes(master_seed: int, n_train: int, n_test: int) -> tuple[list[SceneSpec], list[SceneSpec]]:
    """Train and shared-test scene specs, disjoint by scene identity."""
    train = [sample_scene(scene_rng(master_seed, 0, i)) for i in range(n_train)]
    seen = {s.key() for s in train}
    test: list[SceneSpec] = []
    i = 0
    while len(test) < n_test:
        s = sample_scene(scene_rng(master_seed, 1, i))
        i += 1
        if s.key() not in seen:
            seen.add(s.key())
            test.append(s)
    return train, test


def render_all(specs: Sequence[SceneSpec]) -> np.ndarray:
    return np.stack([render(s) for s in specs]) if specs else np.zeros((0, IMAGE_SIZE, IMAGE_SIZE, 3), np.float32)


def captions_all(specs: Sequence[SceneSpec]) -> np.ndarray:
    out = np.zeros((len(specs), MAX_TOKENS), dtype=np.int64)
    for i, s in enumerate(specs):
        toks = caption(s)
        out[i, :len(toks)] = toks
    return out


FeatureFn = Callable[[np.ndarray, np.ndarray], dict[str, np.ndarray]]
