"""Small layer helpers over :mod:`mindkit.tensor`.

Parameters live in flat ``dict[str, np.ndarray]`` maps; :func:`bind` turns
them into tensors (tracked on a tape when training, constant otherwise).
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping

import numpy as np

from mindkit import tensor as T
from mindkit.tensor import AdamState, Tape, Tensor

Params = dict[str, np.ndarray]


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float = 1.0) -> np.ndarray:
    lim = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out)).astype(np.float32)


def add_linear(p: Params, rng: np.random.Generator, name: str, fan_in: int, fan_out: int,
               gain: float = 1.0, bias: bool = True) -> None:
    p[f"{name}.w"] = glorot(rng, fan_in, fan_out, gain)
    if bias:
        p[f"{name}.b"] = np.zeros(fan_out, dtype=np.float32)


def add_norm(p: Params, name: str, dim: int) -> None:
    p[f"{name}.g"] = np.ones(dim, dtype=np.float32)
    p[f"{name}.b"] = np.zeros(dim, dtype=np.float32)


def add_mixer(p: Params, rng: np.random.Generator, name: str, n_tokens: int, dim: int,
              token_hidden: int, channel_hidden: int) -> None:
    add_norm(p, f"{name}.ln1", dim)
    add_linear(p, rng, f"{name}.tok1", n_tokens, token_hidden)
    add_linear(p, rng, f"{name}.tok2", token_hidden, n_tokens, gain=0.5)
    add_norm(p, f"{name}.ln2", dim)
    add_linear(p, rng, f"{name}.ch1", dim, channel_hidden)
    add_linear(p, rng, f"{name}.ch2", channel_hidden, dim, gain=0.5)


def bind(params: Mapping[str, np.ndarray], tape: Tape | None = None) -> dict[str, Tensor]:
    if tape is None:
        return {k: Tensor(v) for k, v in params.items()}
    return {k: tape.leaf(v) for k, v in params.items()}


def linear(x: Tensor, p: Mapping[str, Tensor], name: str) -> Tensor:
    b = p.get(f"{name}.b")
    if b is None:
        return T.matmul(x, p[f"{name}.w"])
    return T.affine(x, p[f"{name}.w"], b)


def norm(x: Tensor, p: Mapping[str, Tensor], name: str) -> Tensor:
    return T.add(T.mul(T.layer_norm(x), p[f"{name}.g"]), p[f"{name}.b"])


def mixer_block(x: Tensor, p: Mapping[str, Tensor], name: str) -> Tensor:
    """Token-mixing then channel-mixing residual MLPs on (B, n, d)."""
    h = T.transpose(norm(x, p, f"{name}.ln1"), (0, 2, 1))
    h = linear(T.silu(linear(h, p, f"{name}.tok1")), p, f"{name}.tok2")
    x = T.add(x, T.transpose(h, (0, 2, 1)))
    h = linear(T.silu(linear(norm(x, p, f"{name}.ln2"), p, f"{name}.ch1")), p, f"{name}.ch2")
    return T.add(x, h)


def one_hot(ids: np.ndarray, n: int, dtype=np.float32) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    out = np.zeros(ids.shape + (n,), dtype=dtype)
    np.put_along_axis(out, ids[..., None], 1.0, axis=-1)
    return out


def patchify(x: Tensor, patch: int) -> Tensor:
    """(B, H, W, C) -> (B, (H/p)*(W/p), p*p*C), row-major over patch positions."""
    b, h, w, c = x.shape
    gh, gw = h // patch, w // patch
    y = T.reshape(x, (b, gh, patch, gw, patch, c))
    y = T.transpose(y, (0, 1, 3, 2, 4, 5))
    return T.reshape(y, (b, gh * gw, patch * patch * c))


def unpatchify(x: Tensor, patch: int, h: int, w: int, c: int) -> Tensor:
    b = x.shape[0]
    gh, gw = h // patch, w // patch
    y = T.reshape(x, (b, gh, gw, patch, patch, c))
    y = T.transpose(y, (0, 1, 3, 2, 4, 5))
    return T.reshape(y, (b, h, w, c))


def train_step(params: Params, loss_fn: Callable[[dict[str, Tensor]], Tensor],
               state: AdamState, names: Iterable[str] | None = None) -> float:
    """Single Adam step on ``params`` (updated in place); returns the loss value."""
    tape = Tape()
    bound = bind(params, tape)
    loss = loss_fn(bound)
    names = sorted(params) if names is None else list(names)
    leaves = [bound[k] for k in names]
    grads = tape.backward(loss, wrt=leaves)
    for k, t in zip(names, T.adam_step(leaves, grads, state)):
        params[k] = t.data
    return float(loss.data)


def batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]
