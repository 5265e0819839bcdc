"""Executable invariant registry and the desk-scale ablation experiment.

Every invariant has exactly one registered check. Checks never raise on a
violated property; they return a :class:`CheckResult` whose ``seed`` points at
the first failing draw. Checks that need trained artifacts are skipped (not
failed) when no workspace is supplied.
"""

from __future__ import annotations

import json
import math
import shutil
import tempfile
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from mindkit import autoencoder as ae
from mindkit import contrastive as ce
from mindkit import decode as dc
from mindkit import diffusion as df
from mindkit import metrics as mt
from mindkit import neurosim as ns
from mindkit import nn
from mindkit import reconstruct as rc
from mindkit import tensor as T
from mindkit.errors import UpstreamMissing
from mindkit.tensor import Tape, Tensor


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: dict = field(default_factory=dict)
    tolerance: float | None = None
    seed: int | None = None
    skipped: bool = False
    detail: str = ""


@dataclass
class SuiteContext:
    seed: int = 0
    dataset: str | None = None
    n_seeds: int = 10
    _models: rc.Models | None = None

    def models(self) -> rc.Models:
        """Trained models when a workspace is given, otherwise small seeded random ones."""
        if self._models is None:
            if self.dataset:
                from mindkit.pipeline import Workspace

                self._models = Workspace(self.dataset).load_models()
            else:
                self._models = random_models(self.seed)
        return self._models


def random_models(seed: int = 0) -> rc.Models:
    return rc.Models(ae.init_autoencoder(ae.AEConfig(seed=seed)), ce.init_encoder(ce.EncoderConfig(seed=seed)),
                     df.init_denoiser(df.DenoiserConfig(seed=seed)), df.make_schedule())


REGISTRY: dict[str, tuple[str, Callable[[SuiteContext], CheckResult]]] = {}

# One entry per invariant declared for any module; the registry must match it exactly.
INVARIANT_MANIFEST = (
    "tensor.op_gradients", "tensor.softmax_rows", "tensor.backward_purity", "tensor.reshape_transpose_exact",
    "diffusion.schedule_monotone", "diffusion.forward_noise_variance", "diffusion.eps_loss_nonnegative",
    "diffusion.chain_purity",
    "autoencoder.roundtrip_shape", "autoencoder.decode_gradcheck", "autoencoder.latent_layout",
    "contrastive.tap_selection", "contrastive.features_pure", "contrastive.cosine_rescale",
    "neurosim.linearity", "neurosim.trial_average", "neurosim.sigma_monotone",
    "decode.ridge_optimality", "decode.cv_folds", "decode.mask_selection", "decode.degradation",
    "reconstruct.graph_determinism", "reconstruct.gradient_validity", "reconstruct.best_snapshot",
    "reconstruct.ablation_ordering",
    "metrics.symmetry", "metrics.rescale_invariance", "metrics.self_identity",
    "cli.pipeline_reproducible", "cli.hash_validation",
    "suite.deterministic", "suite.registry_coverage",
)


def check(name: str):
    module = name.split(".", 1)[0]

    def wrap(fn):
        if name in REGISTRY:
            raise ValueError(f"check {name!r} registered twice")
        REGISTRY[name] = (module, fn)
        return fn

    return wrap


def _rng(ctx: SuiteContext, salt: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([ctx.seed, salt]))


# ---------------------------------------------------------------- gradient battery

def _op_cases() -> dict[str, tuple[Callable, list[tuple[int, ...]]]]:
    """op kind -> (function of input tensors, input shapes)."""
    return {
        "matmul": (lambda a, b: T.matmul(a, b), [(2, 3, 4), (4, 5)]),
        "affine": (lambda x, w, b: T.affine(x, w, b), [(2, 3, 4), (4, 5), (5,)]),
        "bmm": (lambda a, b: T.bmm(a, b), [(2, 3, 4), (2, 4, 2)]),
        "add": (lambda a, b: T.add(a, b), [(3, 4), (4,)]),
        "sub": (lambda a, b: T.sub(a, b), [(3, 4), (3, 4)]),
        "mul": (lambda a, b: T.mul(a, b), [(3, 4), (4,)]),
        "scale": (lambda a: T.scale(a, 1.7), [(3, 4)]),
        "reshape": (lambda a: T.reshape(a, (2, 6)), [(3, 4)]),
        "transpose": (lambda a: T.transpose(a, (0, 2, 1)), [(2, 3, 4)]),
        "row_slice": (lambda a: T.row_slice(a, 1, 4, axis=1), [(3, 5)]),
        "concat": (lambda a, b: T.concat([a, b], axis=1), [(2, 3), (2, 2)]),
        "softmax": (lambda a: T.softmax(a), [(3, 5)]),
        "log_softmax": (lambda a: T.log_softmax(a), [(3, 5)]),
        "silu": (lambda a: T.silu(a), [(3, 4)]),
        "tanh": (lambda a: T.tanh(a), [(3, 4)]),
        "layer_norm": (lambda a: T.layer_norm(a), [(3, 6)]),
        "mse": (lambda a, b: T.mse(a, b), [(3, 4), (3, 4)]),
        "sum": (lambda a: T.sum(a, axis=1), [(3, 4)]),
        "l2norm": (lambda a: T.l2norm(a), [(3, 4)]),
        "normalize": (lambda a: T.normalize(a), [(3, 4)]),
        "cosine_similarity": (lambda a, b: T.cosine_similarity(a, b), [(3, 4), (3, 4)]),
    }


def op_gradient_errors(kind: str, seed: int) -> float:
    """Worst relative error over every input slot of one op at one seed (float64)."""
    fn, shapes = _op_cases()[kind]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x0B5, len(kind)]))
    inputs = [rng.standard_normal(s) for s in shapes]
    out_shape = np.shape(fn(*[Tensor(x) for x in inputs]).data)
    weight = Tensor(rng.standard_normal(out_shape)) if out_shape else None
    worst = 0.0
    for slot in range(len(inputs)):
        def f(x, slot=slot):
            args = [Tensor(v) for v in inputs]
            args[slot] = x
            y = fn(*args)
            return T.sum(T.mul(y, weight)) if weight is not None else y
        worst = max(worst, T.grad_check(f, inputs[slot]).max_rel_error)
    return worst


def op_gradient_battery(seeds: Sequence[int], tol: float = 1e-4) -> dict[str, dict]:
    out = {}
    for kind in _op_cases():
        errs = [op_gradient_errors(kind, s) for s in seeds]
        bad = [s for s, e in zip(seeds, errs) if not e <= tol]
        out[kind] = {"max_rel_error": float(max(errs)), "first_failing_seed": bad[0] if bad else None}
    return out


@check("tensor.op_gradients")
def _c_op_gradients(ctx: SuiteContext) -> CheckResult:
    res = op_gradient_battery(range(ctx.seed, ctx.seed + ctx.n_seeds))
    missing = sorted(set(T.OPS) - set(res))
    bad = {k: v for k, v in res.items() if v["first_failing_seed"] is not None}
    seed = min((v["first_failing_seed"] for v in bad.values()), default=None)
    return CheckResult("tensor.op_gradients", not bad and not missing,
                       {k: v["max_rel_error"] for k, v in res.items()}, 1e-4, seed,
                       detail=f"ops without a case: {missing}" if missing else "")


@check("tensor.softmax_rows")
def _c_softmax(ctx: SuiteContext) -> CheckResult:
    worst, inside = 0.0, True
    for s in range(ctx.n_seeds):
        x = np.random.default_rng([ctx.seed, s]).standard_normal((8, 17)).astype(np.float32) * 5
        y = T.softmax(Tensor(x)).data.astype(np.float64)
        worst = max(worst, float(np.abs(y.sum(axis=1) - 1).max()))
        inside &= bool(np.all((y > 0) & (y < 1)))
    return CheckResult("tensor.softmax_rows", worst <= 1e-6 and inside, {"max_row_error": worst, "in_open_unit": inside},
                       1e-6, ctx.seed)


@check("tensor.backward_purity")
def _c_purity(ctx: SuiteContext) -> CheckResult:
    rng = _rng(ctx, 3)
    tape = Tape()
    x = tape.leaf(rng.standard_normal((4, 5)).astype(np.float32))
    w = tape.leaf(rng.standard_normal((5, 3)).astype(np.float32))
    loss = T.sum(T.mul(T.tanh(T.matmul(x, w)), T.softmax(T.matmul(x, w))))
    g1 = tape.backward(loss, wrt=[x, w])
    g2 = tape.backward(loss, wrt=[x, w])
    same = all(np.array_equal(g1[t], g2[t]) for t in (x, w))
    return CheckResult("tensor.backward_purity", same, {"bitwise_equal": same}, 0.0, ctx.seed)


@check("tensor.reshape_transpose_exact")
def _c_reshape(ctx: SuiteContext) -> CheckResult:
    rng = _rng(ctx, 4)
    x0 = rng.standard_normal((3, 4, 5)).astype(np.float32)
    r = Tensor(rng.standard_normal((3, 4, 5)).astype(np.float32))

    def grad(fn):
        tape = Tape()
        x = tape.leaf(x0)
        return tape.backward(T.sum(T.mul(fn(x), r)), wrt=[x])[x]

    plain = grad(lambda x: x)
    routed = grad(lambda x: T.reshape(T.transpose(T.transpose(T.reshape(x, (12, 5)), (1, 0)), (1, 0)), (3, 4, 5)))
    same = bool(np.array_equal(plain, routed))
    return CheckResult("tensor.reshape_transpose_exact", same, {"bitwise_equal": same}, 0.0, ctx.seed)


# ---------------------------------------------------------------- diffusion

@check("diffusion.schedule_monotone")
def _c_schedule(ctx: SuiteContext) -> CheckResult:
    s = df.make_schedule()
    ok = bool(np.all(np.diff(s.alpha_bar) < 0)) and s.alpha_bar[0] == 1.0
    return CheckResult("diffusion.schedule_monotone", ok, {"alpha_bar_T": float(s.alpha_bar[-1])}, 0.0)


def forward_noise_moments(seed: int, n_draws: int = 10_000, dim: int = 16, steps: Sequence[int] | None = None) -> list[dict]:
    """Monte-Carlo mean/variance of forward_noise at fixed z, with 3-s.e. verdicts.

    Statistics are pooled over the ``dim`` coordinates: the mean error of
    (x - sqrt(abar) z) and the average per-coordinate sample variance.
    """
    sched = df.make_schedule()
    steps = steps or [1, sched.T // 2, sched.T]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD1F]))
    z = rng.standard_normal(dim)
    out = []
    for t in steps:
        eps = rng.standard_normal((n_draws, dim))
        x = df.forward_noise(np.broadcast_to(z, eps.shape).copy(), t, eps, sched)
        ab = sched.abar(t)
        dev = x - math.sqrt(ab) * z
        mean_err = float(dev.mean())
        se_mean = math.sqrt((1 - ab) / (n_draws * dim))
        var = float(x.var(axis=0, ddof=1).mean())
        se_var = (1 - ab) * math.sqrt(2.0 / ((n_draws - 1) * dim))
        out.append({"t": t, "mean_error": mean_err, "se_mean": se_mean, "variance": var, "expected_variance": 1 - ab,
                    "se_var": se_var, "mean_ok": abs(mean_err) <= 3 * se_mean,
                    "var_ok": abs(var - (1 - ab)) <= 3 * se_var})
    # marginal over unit-variance z: Var = abar Var(z) + 1 - abar = 1
    for t in steps:
        zz = rng.standard_normal((n_draws, dim))
        eps = rng.standard_normal((n_draws, dim))
        v = float(df.forward_noise(zz, t, eps, sched).var(axis=0, ddof=1).mean())
        se = math.sqrt(2.0 / ((n_draws - 1) * dim))
        out.append({"t": t, "marginal_variance": v, "se_var": se, "var_ok": abs(v - 1.0) <= 3 * se, "mean_ok": True})
    return out


@check("diffusion.forward_noise_variance")
def _c_forward(ctx: SuiteContext) -> CheckResult:
    rows = forward_noise_moments(ctx.seed)
    ok = all(r["mean_ok"] and r["var_ok"] for r in rows)
    return CheckResult("diffusion.forward_noise_variance", ok, {"rows": rows}, 3.0, ctx.seed)


@check("diffusion.eps_loss_nonnegative")
def _c_eps_loss(ctx: SuiteContext) -> CheckResult:
    ok = True
    for s in range(ctx.n_seeds):
        rng = np.random.default_rng([ctx.seed, 5, s])
        e = rng.standard_normal((4, 8)).astype(np.float32)
        p = e + rng.standard_normal((4, 8)).astype(np.float32) * (s % 3)
        loss = float(df.semantic_loss(Tensor(p), Tensor(e)).data)
        ok &= loss >= 0 and ((loss == 0) == np.array_equal(p, e))
    return CheckResult("diffusion.eps_loss_nonnegative", ok, {}, 0.0, ctx.seed)


@check("diffusion.chain_purity")
def _c_chain(ctx: SuiteContext) -> CheckResult:
    m = ctx.models()
    rng = _rng(ctx, 6)
    z = rng.standard_normal((2, ae.LATENT_DIM)).astype(np.float32)
    c = rng.standard_normal((2, ce.K_KEEP, m.denoiser.config.d_cond)).astype(np.float32)
    a = df.sample_img2img(z, c, 80, m.schedule, m.denoiser, seed=[1, 2], stride=8)
    b = df.sample_img2img(z, c, 80, m.schedule, m.denoiser, seed=[1, 2], stride=8)
    d = df.sample_img2img(z, c, 80, m.schedule, m.denoiser, seed=[3, 4], stride=8)
    ok = np.array_equal(a, b) and not np.array_equal(a, d)
    return CheckResult("diffusion.chain_purity", bool(ok), {"bitwise_equal": bool(np.array_equal(a, b))}, 0.0, ctx.seed)


# ---------------------------------------------------------------- autoencoder / encoder

@check("autoencoder.roundtrip_shape")
def _c_ae_shape(ctx: SuiteContext) -> CheckResult:
    m = ctx.models()
    x = _rng(ctx, 7).random((3,) + ae.IMAGE_SHAPE).astype(np.float32)
    y = ae.decode(ae.encode(x, m.autoencoder), m.autoencoder)
    return CheckResult("autoencoder.roundtrip_shape", y.shape == x.shape, {"shape": list(y.shape)})


@check("autoencoder.decode_gradcheck")
def _c_ae_grad(ctx: SuiteContext) -> CheckResult:
    m = ctx.models()
    rng = _rng(ctx, 8)
    z = rng.standard_normal((1, ae.LATENT_DIM))
    w = Tensor(rng.standard_normal((1,) + ae.IMAGE_SHAPE))
    p = nn.bind(m.autoencoder.weights)
    rep = T.grad_check(lambda zt: T.sum(T.mul(ae.decode_graph(zt, p, m.autoencoder.config.blocks,
                                                              m.autoencoder.latent_scale), w)), z, tol=1e-3)
    return CheckResult("autoencoder.decode_gradcheck", rep.passed, {"max_rel_error": rep.max_rel_error}, 1e-3, ctx.seed)


@check("autoencoder.latent_layout")
def _c_ae_layout(ctx: SuiteContext) -> CheckResult:
    m = ctx.models()
    x = _rng(ctx, 9).random((2,) + ae.IMAGE_SHAPE).astype(np.float32)
    p = nn.bind(m.autoencoder.weights)
    cfg = m.autoencoder.config
    h = T.silu(nn.linear(nn.patchify(Tensor(x), ae.PATCH), p, "enc.in"))
    for i in range(cfg.blocks):
        h = nn.mixer_block(h, p, f"enc.mix{i}")
    tokens = nn.linear(nn.norm(h, p, "enc.ln"), p, "enc.out").data * np.float32(m.autoencoder.latent_scale)
    z = ae.encode(x, m.autoencoder).reshape(2, ae.LATENT_CHANNELS, ae.GRID, ae.GRID)
    ok_enc = np.allclose(z, tokens.transpose(0, 2, 1).reshape(2, ae.LATENT_CHANNELS, ae.GRID, ae.GRID), rtol=0, atol=1e-6)
    zf = Tensor(z.reshape(2, -1))
    ok_tok = np.array_equal(df.tokens_to_latent(df.latent_to_tokens(zf)).data, zf.data)
    return CheckResult("autoencoder.latent_layout", bool(ok_enc and ok_tok),
                       {"channel_major": bool(ok_enc), "token_roundtrip": bool(ok_tok)}, 1e-6)


@check("contrastive.tap_selection")
def _c_taps(ctx: SuiteContext) -> CheckResult:
    m = ctx.models()
    cfg = m.encoder.config
    shallow = tuple(ce.TAP_BLOCKS) == tuple(range(1, cfg.blocks // 2 + 1))
    x = _rng(ctx, 10).random((2,) + ae.IMAGE_SHAPE).astype(np.float32)
    p = nn.bind(m.encoder.weights)
    taps, emb = ce.image_graph(Tensor(x), p, cfg)
    quick = ce.image_taps_graph(Tensor(x), p, cfg)
    same = all(np.array_equal(taps[k].data, quick[k].data) for k in ce.TAP_NAMES)
    # perturbing the last block moves the embedding but no tap
    w2 = dict(m.encoder.weights)
    last = f"img.blk{cfg.blocks}.ch1.w"
    w2[last] = w2[last] + 0.5
    taps2, emb2 = ce.image_graph(Tensor(x), nn.bind(w2), cfg)
    final_only = all(np.array_equal(taps[k].data, taps2[k].data) for k in ce.TAP_NAMES) and not np.array_equal(
        emb.data, emb2.data)
    ok = shallow and same and final_only
    return CheckResult("contrastive.tap_selection", bool(ok),
                       {"shallow_half": shallow, "fast_path_equal": same, "embedding_is_final": final_only})


@check("contrastive.features_pure")
def _c_features(ctx: SuiteContext) -> CheckResult:
    m = ctx.models()
    x = _rng(ctx, 11).random((3,) + ae.IMAGE_SHAPE).astype(np.float32)
    a, b = ce.image_features(x, m.encoder), ce.image_features(x, m.encoder)
    ok = all(np.array_equal(a[k], b[k]) for k in a)
    return CheckResult("contrastive.features_pure", ok, {"bitwise_equal": ok}, 0.0)


@check("contrastive.cosine_rescale")
def _c_cos_rescale(ctx: SuiteContext) -> CheckResult:
    worst = 0.0
    for s in range(ctx.n_seeds):
        rng = np.random.default_rng([ctx.seed, 12, s])
        u, v = rng.standard_normal(32), rng.standard_normal(32)
        k = float(rng.uniform(0.01, 100))
        worst = max(worst, abs(mt.cosine(u * k, v) - mt.cosine(u, v)), abs(mt.cosine(u, v * k) - mt.cosine(u, v)))
    return CheckResult("contrastive.cosine_rescale", worst <= 1e-12, {"max_abs_change": worst}, 1e-12, ctx.seed)


# ---------------------------------------------------------------- simulator / decoding

def _toy_features(rng: np.random.Generator, n: int, blocks: Mapping[str, int], rank: int = 12) -> dict[str, np.ndarray]:
    """Correlated low-rank features standing in for model outputs."""
    total = sum(blocks.values())
    f = rng.standard_normal((n, rank)) @ rng.standard_normal((rank, total)) + 0.1 * rng.standard_normal((n, total))
    out, col = {}, 0
    for k, d in blocks.items():
        out[k] = f[:, col:col + d].astype(np.float32)
        col += d
    return out


TOY_BLOCKS = {"c": 12, "z": 16, "tap1": 20, "tap2": 20, "tap3": 20}


@check("neurosim.linearity")
def _c_linearity(ctx: SuiteContext) -> CheckResult:
    rng = _rng(ctx, 13)
    feats = _toy_features(rng, 64, TOY_BLOCKS)
    subj = ns.make_subject(ctx.seed, TOY_BLOCKS, feats, n_voxels=40, sigma=0.0)
    f = ns.concat_features(feats).astype(np.float64)
    a, b = f[:10], f[10:20]
    r = lambda v: ns.noiseless_response(v, subj).astype(np.float64)
    scale_ = float(np.abs(r(a)).max())
    add_err = float(np.abs(r(a + b) - r(a) - r(b)).max()) / scale_
    hom_err = float(np.abs(r(2.5 * a) - 2.5 * r(a)).max()) / scale_
    rec = ns.SceneRecord(spec=None, image=None, tokens=[], features={k: v[0] for k, v in feats.items()})
    trials = ns.respond(rec, subj, 3, rng).trials
    noiseless = bool(np.array_equal(trials[0], trials[1]) and np.array_equal(trials[0], trials[2]))
    ok = add_err <= 1e-5 and hom_err <= 1e-5 and noiseless
    return CheckResult("neurosim.linearity", ok, {"additivity": add_err, "homogeneity": hom_err,
                                                   "sigma0_trials_identical": noiseless}, 1e-5, ctx.seed)


@check("neurosim.trial_average")
def _c_trials(ctx: SuiteContext) -> CheckResult:
    t = _rng(ctx, 14).standard_normal((3, 50)).astype(np.float32)
    ok = bool(np.array_equal(ns.average_trials(t), t.astype(np.float64).mean(axis=0).astype(np.float32)))
    return CheckResult("neurosim.trial_average", ok, {"exact": ok}, 0.0)


def sigma_sweep(seed: int, sigmas=(0.0, 0.1, 0.5, 1.0), use_cv: bool = False, features=None) -> list[float]:
    """Mean test-set Pearson r of ridge decoders as the simulator noise grows."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x516]))
    if features is None:
        feats = _toy_features(rng, 500, TOY_BLOCKS)
        blocks = TOY_BLOCKS
    else:
        feats, blocks = features, {k: v.shape[1] for k, v in features.items()}
    n = len(next(iter(feats.values())))
    tr, te = np.arange(int(0.8 * n)), np.arange(int(0.8 * n), n)
    out = []
    for sigma in sigmas:
        subj = ns.make_subject(seed, blocks, {k: v[tr] for k, v in feats.items()}, n_voxels=128, sigma=sigma)
        f = ns.concat_features(feats, list(blocks))
        counts = np.full(n, 3)
        _, avg = ns.respond_batch(f, subj, counts, [np.random.default_rng([seed, 7, i]) for i in range(n)])
        rs = []
        for k in blocks:
            if use_cv:
                fit = dc.fit_space(avg[tr], feats[k][tr], masked=False)
                pred = dc.predict(fit.decoder, avg[te])
            else:
                pred = dc.predict(dc.fit_ridge(avg[tr], feats[k][tr], 1.0), avg[te])
            rs.append(float(np.mean(dc.pearson_columns(pred, feats[k][te]))))
        out.append(float(np.mean(rs)))
    return out


@check("neurosim.sigma_monotone")
def _c_sigma(ctx: SuiteContext) -> CheckResult:
    r = sigma_sweep(ctx.seed)
    ok = all(a > b for a, b in zip(r, r[1:]))
    return CheckResult("neurosim.sigma_monotone", ok, {"mean_r": r}, None, ctx.seed)


@check("decode.ridge_optimality")
def _c_ridge_opt(ctx: SuiteContext) -> CheckResult:
    rng = _rng(ctx, 15)
    X = rng.standard_normal((60, 10))
    Y = X @ rng.standard_normal((10, 3)) + 0.3 * rng.standard_normal((60, 3))
    lam = 2.0
    W = dc.ridge_solve(X, Y, lam)
    obj = lambda w: float(np.sum((X @ w.T - Y) ** 2) + lam * np.sum(w * w))
    base = obj(W)
    worse = [obj(W + 1e-3 * rng.standard_normal(W.shape)) for _ in range(100)]
    ok = all(base <= v for v in worse)
    return CheckResult("decode.ridge_optimality", ok, {"objective": base, "min_perturbed": min(worse)}, 0.0, ctx.seed)


@check("decode.cv_folds")
def _c_folds(ctx: SuiteContext) -> CheckResult:
    folds = dc.fold_indices(103, 5, seed=ctx.seed)
    allidx = np.concatenate(folds)
    cover = sorted(allidx.tolist()) == list(range(103))
    rng = _rng(ctx, 16)
    X = rng.standard_normal((80, 12))
    Y = X @ rng.standard_normal((12, 6)) + rng.standard_normal((80, 6))
    perm = rng.permutation(6)
    r = dc.cv_accuracy(X, Y, 1.0, seed=ctx.seed)
    rp = dc.cv_accuracy(X, Y[:, perm], 1.0, seed=ctx.seed)
    perm_ok = bool(np.allclose(r[perm], rp, rtol=0, atol=1e-12))
    ok = cover and len(allidx) == 103 and perm_ok
    return CheckResult("decode.cv_folds", ok, {"disjoint_cover": cover, "permutation_invariant": perm_ok}, 1e-12)


@check("decode.mask_selection")
def _c_mask(ctx: SuiteContext) -> CheckResult:
    rng = _rng(ctx, 17)
    X = rng.standard_normal((70, 9))
    Y = X @ rng.standard_normal((9, 16)) + rng.standard_normal((70, 16))
    fit = dc.fit_space(X, Y, masked=True, seed=ctx.seed)
    full = dc.fit_ridge(X, Y, fit.lam)
    x = rng.standard_normal((5, 9))
    a = dc.predict(fit.decoder, x, fit.mask)[:, fit.mask.kept]
    b = dc.predict(full, x)[:, fit.mask.kept]
    ok = bool(np.allclose(a, b, rtol=0, atol=1e-10))
    return CheckResult("decode.mask_selection", ok, {"max_abs_diff": float(np.abs(a - b).max())}, 1e-10, ctx.seed)


@check("decode.degradation")
def _c_degradation(ctx: SuiteContext) -> CheckResult:
    r = sigma_sweep(ctx.seed + 1, use_cv=True)
    ok = all(a > b for a, b in zip(r, r[1:]))
    return CheckResult("decode.degradation", ok, {"mean_r": r}, None, ctx.seed + 1)


# ---------------------------------------------------------------- reconstruction

def _composite_setup(models: rc.Models, seed: int, taps=ce.TAP_NAMES, dtype=np.float64):
    """A random item: (c, z), frozen noise and decoded-looking targets."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0B]))
    c = rng.standard_normal((1, ce.K_KEEP, models.denoiser.config.d_cond)).astype(dtype)
    z = rng.standard_normal((1, ae.LATENT_DIM)).astype(dtype)
    noise = df.draw_chain_noise([seed], rc.ReconstructionConfig().t_start(models.schedule.T), 8)
    gen = rc._Generator(models, noise)
    base = gen.taps(gen.image(Tensor(z), Tensor(c), slice(0, 1)), taps)
    tgt, masks = {}, {}
    for k in taps:
        v = base[k].data
        tgt[k] = v + rng.standard_normal(v.shape) * v.std()
        masks[k] = rng.random(v.shape[1]) < 0.25
    return c, z, gen, tgt, masks


def composite_gradient_error(models: rc.Models, seed: int, n_coords: int = 6, eps: float = 1e-4,
                             taps=ce.TAP_NAMES) -> float:
    """Relative max-norm error of dL/d(c, z) on random coordinates plus one random direction.

    Finite differences are evaluated as extra batch rows that share the item's
    frozen noise, since rows never interact.
    """
    c, z, gen, tgt, masks = _composite_setup(models, seed, taps)
    tape = Tape()
    cl, zl = tape.leaf(c), tape.leaf(z)
    loss = rc.structure_terms(gen.taps(gen.image(zl, cl, slice(0, 1)), taps), tgt, masks, taps)
    g = tape.backward(T.sum(loss), wrt=[cl, zl])
    gc, gz = np.asarray(g[cl]), np.asarray(g[zl])
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF1D]))
    picks = [("c", int(i)) for i in rng.choice(c.size, n_coords, replace=False)]
    picks += [("z", int(i)) for i in rng.choice(z.size, n_coords, replace=False)]
    dc_, dz_ = rng.standard_normal(c.shape), rng.standard_normal(z.shape)
    dirs_c, dirs_z, analytic = [], [], []
    for space, i in picks:
        ec, ez = np.zeros_like(c), np.zeros_like(z)
        (ec if space == "c" else ez).reshape(-1)[i] = 1.0
        dirs_c.append(ec)
        dirs_z.append(ez)
        analytic.append((gc if space == "c" else gz).reshape(-1)[i])
    norm = math.sqrt(float(np.sum(dc_ ** 2) + np.sum(dz_ ** 2)))
    dirs_c.append(dc_ / norm)
    dirs_z.append(dz_ / norm)
    analytic.append(float(np.sum(gc * dc_) + np.sum(gz * dz_)) / norm)
    k = len(analytic)
    cc = np.concatenate([c + eps * d for d in dirs_c] + [c - eps * d for d in dirs_c])
    zz = np.concatenate([z + eps * d for d in dirs_z] + [z - eps * d for d in dirs_z])
    rows = 2 * k
    gen_rows = rc._Generator(models, gen.noise.select([0] * rows))
    tg_rows = {n: np.repeat(v, rows, axis=0) for n, v in tgt.items()}
    vals = rc.structure_terms(gen_rows.taps(gen_rows.image(Tensor(zz), Tensor(cc), slice(0, rows)), taps), tg_rows,
                              masks, taps).data
    numeric = (vals[:k] - vals[k:]) / (2 * eps)
    analytic = np.asarray(analytic)
    scale_ = max(float(np.abs(analytic).max()), float(np.abs(numeric).max()))
    return 0.0 if scale_ == 0 else float(np.abs(analytic - numeric).max() / scale_)


@check("reconstruct.gradient_validity")
def _c_composite(ctx: SuiteContext) -> CheckResult:
    m = ctx.models()
    seeds = list(range(ctx.seed, ctx.seed + max(2, ctx.n_seeds // 3)))
    errs = [composite_gradient_error(m, s, taps=("tap1",)) for s in seeds]
    bad = [s for s, e in zip(seeds, errs) if not e <= 1e-3]
    return CheckResult("reconstruct.gradient_validity", not bad, {"max_rel_error": max(errs)}, 1e-3,
                       bad[0] if bad else ctx.seed)


@check("reconstruct.graph_determinism")
def _c_graph(ctx: SuiteContext) -> CheckResult:
    c, z, gen, _, _ = _composite_setup(ctx.models(), ctx.seed, dtype=np.float32)
    a = gen.image(Tensor(z), Tensor(c), slice(0, 1)).data
    b = gen.image(Tensor(z), Tensor(c), slice(0, 1)).data
    ok = bool(np.array_equal(a, b))
    return CheckResult("reconstruct.graph_determinism", ok, {"bitwise_equal": ok}, 0.0, ctx.seed)


@check("reconstruct.best_snapshot")
def _c_best(ctx: SuiteContext) -> CheckResult:
    m = ctx.models()
    rng = _rng(ctx, 18)
    n = 3
    decoded = {"c": rng.standard_normal((n, ce.K_KEEP * m.encoder.config.d_txt)).astype(np.float32),
               "z": rng.standard_normal((n, ae.LATENT_DIM)).astype(np.float32)}
    cfg = rc.ReconstructionConfig(iterations=6, snapshot_every=2, seed=ctx.seed, lr=0.1)
    s1 = rc.stage1(None, None, m, cfg, decoded=decoded)
    taps = ce.image_features(rng.random((n,) + ae.IMAGE_SHAPE).astype(np.float32), m.encoder)
    masks = {k: rng.random(taps[k].shape[1]) < 0.25 for k in ce.TAP_NAMES}
    st = rc.stage2(s1, taps, masks, m, cfg)
    ok = True
    for i in range(n):
        traj = st.trajectory[i]
        ok &= st.best_loss[i] == min(traj) and len(traj) == cfg.iterations + 1
        ok &= all(st.best_loss[i] <= v for v in traj)
    return CheckResult("reconstruct.best_snapshot", bool(ok), {"best": st.best_loss.tolist()}, 0.0, ctx.seed)


# ---------------------------------------------------------------- metrics

@check("metrics.symmetry")
def _c_sym(ctx: SuiteContext) -> CheckResult:
    m = ctx.models()
    ok = True
    for s in range(min(ctx.n_seeds, 5)):
        rng = np.random.default_rng([ctx.seed, 19, s])
        a, b = rng.random((2,) + ae.IMAGE_SHAPE)
        ok &= mt.ssim(a, b) == mt.ssim(b, a) and mt.pixel_correlation(a, b) == mt.pixel_correlation(b, a)
        ok &= mt.semantic_similarity(a, b, m.encoder) == mt.semantic_similarity(b, a, m.encoder)
    return CheckResult("metrics.symmetry", bool(ok), {}, 0.0, ctx.seed)


@check("metrics.rescale_invariance")
def _c_rescale(ctx: SuiteContext) -> CheckResult:
    rng = _rng(ctx, 20)
    u, v = rng.standard_normal(32), rng.standard_normal(32)
    d = abs(mt.cosine(3.0 * u, 0.2 * v) - mt.cosine(u, v))
    return CheckResult("metrics.rescale_invariance", d <= 1e-12, {"abs_change": d}, 1e-12, ctx.seed)


@check("metrics.self_identity")
def _c_self(ctx: SuiteContext) -> CheckResult:
    ok = True
    for s in range(ctx.n_seeds):
        x = np.random.default_rng([ctx.seed, 21, s]).random(ae.IMAGE_SHAPE)
        ok &= mt.ssim(x, x) == 1.0 and abs(mt.pixel_correlation(x, x) - 1.0) <= 1e-12
    return CheckResult("metrics.self_identity", bool(ok), {}, 0.0, ctx.seed)


# ---------------------------------------------------------------- CLI

TINY_RUN = {"train": 96, "test": 8, "subjects": 1, "epochs": 1, "steps": 2}


def tiny_pipeline(root: Path, seed: int) -> dict[str, bytes | str]:
    """gen-data -> report at toy scale; returns the artifacts compared for reproducibility."""
    from mindkit.cli import main
    from mindkit.pipeline import Workspace

    ds, run, rep = root / "ds", root / "run", root / "report"
    codes = [main(["gen-data", "--out", str(ds), "--train", str(TINY_RUN["train"]), "--test", str(TINY_RUN["test"]),
                   "--subjects", str(TINY_RUN["subjects"]), "--seed", str(seed)])]
    codes.append(main(["train", "--dataset", str(ds), "--epochs", str(TINY_RUN["epochs"])]))
    codes.append(main(["fit-decoders", "--dataset", str(ds)]))
    subject = Workspace(ds).subjects()[0]
    codes.append(main(["reconstruct", "--dataset", str(ds), "--subject", str(subject), "--out", str(run),
                       "--steps", str(TINY_RUN["steps"]), "--threshold", "-1"]))
    codes.append(main(["report", "--dataset", str(ds), "--runs", str(run), "--out", str(rep)]))
    if any(codes):
        raise RuntimeError(f"pipeline step failed with exit codes {codes}")
    ws = Workspace(ds)
    out: dict[str, bytes | str] = {"dataset_hash": ws.dataset_hash(), "manifest": ws.manifest_path.read_bytes()}
    for n in ("autoencoder", "encoder", "denoiser"):
        out[f"weights:{n}"] = ws.model_hash(n)
    for p in sorted((run / "recon").glob("*.ppm")) + [run / "metrics.json", run / "metrics.csv"]:
        out[f"run:{p.relative_to(run)}"] = p.read_bytes()
    for p in sorted(rep.iterdir()):
        out[f"report:{p.name}"] = p.read_bytes()
    return out


@check("cli.pipeline_reproducible")
def _c_repro(ctx: SuiteContext) -> CheckResult:
    with tempfile.TemporaryDirectory() as tmp:
        a = tiny_pipeline(Path(tmp) / "a", ctx.seed)
        b = tiny_pipeline(Path(tmp) / "b", ctx.seed)
    diff = sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))
    return CheckResult("cli.pipeline_reproducible", not diff, {"artifacts": len(a), "differing": diff}, 0.0, ctx.seed)


@check("cli.hash_validation")
def _c_hashes(ctx: SuiteContext) -> CheckResult:
    from mindkit.cli import EXIT_UPSTREAM, main
    from mindkit.pipeline import Workspace

    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        tiny_pipeline(root / "a", ctx.seed)
        ds = root / "a" / "ds"
        subject = str(Workspace(ds).subjects()[0])
        codes = {}
        bad = root / "img"
        shutil.copytree(ds, bad)
        img = bad / "images" / "test_00000.ppm"
        raw = bytearray(img.read_bytes())
        raw[-1] ^= 0xFF
        img.write_bytes(bytes(raw))
        codes["corrupt_image"] = main(["fit-decoders", "--dataset", str(bad)])
        bad = root / "weights"
        shutil.copytree(ds, bad)
        wfile = sorted((bad / "models" / "denoiser").glob("*.tnsr"))[0]
        raw = bytearray(wfile.read_bytes())
        raw[-1] ^= 0x01
        wfile.write_bytes(bytes(raw))
        codes["corrupt_weights"] = main(["reconstruct", "--dataset", str(bad), "--subject", subject,
                                         "--out", str(root / "r"), "--steps", "1", "--threshold", "-1"])
        bad = root / "nodecoders"
        shutil.copytree(ds, bad)
        shutil.rmtree(bad / "decoders")
        codes["missing_decoders"] = main(["reconstruct", "--dataset", str(bad), "--subject", subject,
                                          "--out", str(root / "r2"), "--steps", "1"])
    ok = all(v == EXIT_UPSTREAM for v in codes.values())
    return CheckResult("cli.hash_validation", ok, codes, None, ctx.seed)


# ---------------------------------------------------------------- suite meta

@check("suite.deterministic")
def _c_suite_det(ctx: SuiteContext) -> CheckResult:
    names = ["tensor.softmax_rows", "diffusion.forward_noise_variance", "decode.ridge_optimality"]
    a = [asdict(REGISTRY[n][1](replace(ctx, _models=None))) for n in names]
    b = [asdict(REGISTRY[n][1](replace(ctx, _models=None))) for n in names]
    ok = json.dumps(a, sort_keys=True, default=str) == json.dumps(b, sort_keys=True, default=str)
    return CheckResult("suite.deterministic", ok, {"checks": names}, 0.0, ctx.seed)


@check("suite.registry_coverage")
def _c_coverage(ctx: SuiteContext) -> CheckResult:
    reg = list(REGISTRY)
    missing = sorted(set(INVARIANT_MANIFEST) - set(reg))
    extra = sorted(set(reg) - set(INVARIANT_MANIFEST))
    dup = len(INVARIANT_MANIFEST) != len(set(INVARIANT_MANIFEST))
    ok = not missing and not extra and not dup
    return CheckResult("suite.registry_coverage", ok, {"missing": missing, "unregistered": extra,
                                                       "duplicates_in_manifest": dup})


# ---------------------------------------------------------------- ablation experiment

@dataclass
class SeedRun:
    seed: int
    label: str
    n: int
    clip: float
    ssim: float
    pcc: float
    initial_loss: float
    final_loss: float
    last_loss: float
    improved_fraction: float
    best_is_min: bool
    seconds: float


@dataclass
class AblationReport:
    subject: int
    runs: list[SeedRun]

    def per_label(self, label: str) -> list[SeedRun]:
        return [r for r in self.runs if r.label == label]

    def summary(self, label: str, metric: str) -> tuple[float, float]:
        """Mean over seeds of the per-seed mean, and its standard error."""
        vals = np.array([getattr(r, metric) for r in self.per_label(label)], dtype=np.float64)
        se = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else float("inf")
        return float(vals.mean()), se

    def greater(self, label_hi: str, label_lo: str, metric: str) -> dict:
        """label_hi > label_lo with non-overlapping +-1 s.e. intervals."""
        m1, s1 = self.summary(label_hi, metric)
        m0, s0 = self.summary(label_lo, metric)
        return {"metric": metric, "hi": label_hi, "lo": label_lo, "hi_mean": m1, "hi_se": s1, "lo_mean": m0,
                "lo_se": s0, "holds": m1 - s1 > m0 + s0}

    def orderings(self) -> list[dict]:
        return [self.greater("full", "without_control", "ssim"), self.greater("full", "without_z", "pcc"),
                self.greater("full", "without_control", "clip"),
                self.greater("without_z", "full", "final_loss")]

    def table(self) -> list[list]:
        rows = []
        for label in ("full", "without_control", "without_z"):
            if self.per_label(label):
                row = [label]
                for metric in ("clip", "ssim", "pcc", "final_loss"):
                    m, s = self.summary(label, metric)
                    row += [m, s]
                rows.append(row)
        return rows

    def to_json(self) -> dict:
        return {"subject": self.subject, "runs": [asdict(r) for r in self.runs], "orderings": self.orderings(),
                "table": self.table()}


def _seed_run(seed: int, label: str, res: rc.PipelineResult, seconds: float) -> SeedRun:
    agg = mt.aggregate(res.records)
    init, best, last = res.initial_loss(), res.final_loss(), res.last_loss()
    mins = np.array([min(t) for t in res.state.trajectory]) if res.state else np.zeros(0)
    return SeedRun(seed, label, agg.count, agg.clip_cosine, agg.ssim, agg.pcc, float(init.mean()), float(best.mean()),
                   float(last.mean()), float(np.mean(best < init)) if len(init) else float("nan"),
                   bool(np.array_equal(best, mins)), seconds)


def run_ablation_experiment(dataset: str | Path, config: rc.ReconstructionConfig | None = None,
                            seeds: Sequence[int] = (0, 1, 2), subject: int | None = None,
                            labels: Sequence[str] = ("full", "without_control", "without_z"), jobs: int = 1,
                            log=None) -> AblationReport:
    """Full model and both ablations on the filtered test split for every reconstruction seed.

    ``without_control`` reuses the Stage-1 output of the ``full`` run with the
    same seed, since it is exactly that image.
    """
    from mindkit.pipeline import Workspace

    ws = Workspace(dataset)
    ws.verify_dataset()
    base = (config or rc.ReconstructionConfig()).validate()
    subject = ws.subjects()[0] if subject is None else int(subject)
    models = ws.load_models()
    decs, _ = ws.decoders(subject)
    feats = ws.features()["test"]
    vox = ws.voxels(subject)["test.avg"]
    truth = ws.images("test")
    runs: list[SeedRun] = []
    for seed in seeds:
        cfgs = rc.ablation_configs(replace(base, seed=int(seed)))
        done: dict[str, rc.PipelineResult] = {}
        for label in ("full", "without_control", "without_z"):
            if label not in labels:
                continue
            t0 = time.perf_counter()
            reuse = done["full"].stage1 if label == "without_control" and "full" in done else None
            res = rc.run_pipeline(vox, truth, feats, decs, models, cfgs[label], reuse_stage1=reuse, jobs=jobs)
            if res.state is None:
                raise UpstreamMissing("fit-decoders", res.note)
            done[label] = res
            runs.append(_seed_run(int(seed), label, res, time.perf_counter() - t0))
            if log:
                r = runs[-1]
                log(f"seed {seed} {label}: n={r.n} CLIP {r.clip:.4f} SSIM {r.ssim:.4f} PCC {r.pcc:.4f} "
                    f"L {r.initial_loss:.2f}->{r.final_loss:.2f} ({r.seconds:.0f}s)")
    return AblationReport(subject, runs)


# ---------------------------------------------------------------- driver

def run_invariant_suite(scope: str = "all", dataset: str | None = None, seed: int = 0,
                        n_seeds: int = 10) -> list[CheckResult]:
    """Run every registered check whose module is in ``scope`` (comma list or "all")."""
    wanted = None if scope in ("all", "", None) else {s.strip() for s in scope.split(",")}
    ctx = SuiteContext(seed=seed, dataset=dataset, n_seeds=n_seeds)
    results = []
    for name, (module, fn) in REGISTRY.items():
        if wanted is not None and module not in wanted and name not in wanted:
            continue
        if name == "reconstruct.ablation_ordering" and not dataset:
            results.append(CheckResult(name, True, skipped=True, detail="needs a trained workspace (--dataset)"))
            continue
        try:
            results.append(fn(ctx))
        except Exception as exc:  # a crashing check is a failing check
            results.append(CheckResult(name, False, detail=f"{type(exc).__name__}: {exc}", seed=seed))
    return results


@check("reconstruct.ablation_ordering")
def _c_ablation(ctx: SuiteContext) -> CheckResult:
    rep = run_ablation_experiment(ctx.dataset, seeds=(ctx.seed, ctx.seed + 1, ctx.seed + 2))
    ords = rep.orderings()
    return CheckResult("reconstruct.ablation_ordering", all(o["holds"] for o in ords), {"orderings": ords},
                       None, ctx.seed)


def write_results(directory: Path, results: Sequence[CheckResult]) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    doc = {"passed": all(r.passed for r in results), "n_checks": len(results),
           "n_failed": sum(not r.passed for r in results), "n_skipped": sum(r.skipped for r in results),
           "results": [asdict(r) for r in results]}
    path = directory / "check-results.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=float) + "\n")
    return path
