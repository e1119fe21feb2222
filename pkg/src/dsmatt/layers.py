"""Sublayer building blocks: LN, residual, FFN, attention, average attention."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .numcore import Rng, ShapeError, Tensor

NEG_INF = -1e9
LN_EPS = 1e-6


@dataclass
class LayerNormParams:
    g: Tensor
    b: Tensor
    eps: float = LN_EPS


@dataclass
class FfnParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class AttentionParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    heads: int = 1

    def __post_init__(self):
        d = self.wq.shape[0]
        if d % self.heads:
            raise ValueError(f"model width {d} is not divisible by {self.heads} heads")


@dataclass
class SAanParams:
    wv: Tensor
    wo: Tensor


@dataclass
class AanParams:
    """Original average attention: FFN over the running mean, then gates."""
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    wg: Tensor
    bg: Tensor


def layer_norm(z: Tensor, p: LayerNormParams) -> Tensor:
    """Standardize the last axis with the population variance, then ``* g + b``."""
    if z.shape[-1] < 2:
        raise ShapeError("layer_norm needs at least two features")
    mu = nc.mean(z, axis=-1, keepdims=True)
    c = nc.sub(z, mu)
    var = nc.mean(nc.square(c), axis=-1, keepdims=True)
    inv = nc.rsqrt(nc.add(var, p.eps))
    return nc.add(nc.mul(nc.mul(c, inv), p.g), p.b)


def layer_norm_vjp(r: np.ndarray, g: np.ndarray, delta_o: np.ndarray, eps: float = LN_EPS) -> np.ndarray:
    """Closed-form backward of :func:`layer_norm` with respect to its input.

    Applies ``(I - (1 1^T + rbar rbar^T) / d) / sigma`` to ``g * delta_o`` row
    by row, where ``rbar`` is the standardized input.
    """
    d = r.shape[-1]
    mu = r.mean(axis=-1, keepdims=True)
    sigma = np.sqrt(((r - mu) ** 2).mean(axis=-1, keepdims=True) + eps)
    rbar = (r - mu) / sigma
    u = g * delta_o
    return (u - u.sum(-1, keepdims=True) / d - rbar * (rbar * u).sum(-1, keepdims=True) / d) / sigma


def residual(z: Tensor, fz: Tensor) -> Tensor:
    if z.shape != fz.shape:
        raise ShapeError(f"residual shape mismatch: {z.shape} vs {fz.shape}")
    return nc.add(z, fz)


def ffn(x: Tensor, p: FfnParams) -> Tensor:
    hidden = nc.relu(nc.add(nc.matmul(x, p.w1), p.b1))
    return nc.add(nc.matmul(hidden, p.w2), p.b2)


def dropout(x: Tensor, rate: float, rng: Rng | None, mode: str = "eval") -> Tensor:
    """Inverted dropout in ``train`` mode, identity in ``eval`` mode."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode == "eval" or rate == 0.0:
        return x
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return nc.mul(x, Tensor(keep))


def positional_encoding(n: int, d: int) -> np.ndarray:
    """Sinusoids: even columns sin(pos / 10000^(2i/d)), odd columns the cosine."""
    if d % 2:
        raise ValueError(f"positional encoding needs an even width, got {d}")
    pos = np.arange(n, dtype=np.float64)[:, None]
    freq = np.power(10000.0, -np.arange(0, d, 2, dtype=np.float64) / d)
    pe = np.empty((n, d))
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq)
    return pe


def causal_mask(m: int) -> np.ndarray:
    """Additive (m, m) mask blocking attention to later positions."""
    return np.triu(np.full((m, m), NEG_INF), k=1)


def padding_mask(valid: np.ndarray) -> np.ndarray:
    """Additive (B, 1, 1, J) key mask from a boolean (B, J) validity array."""
    return np.where(valid, 0.0, NEG_INF)[:, None, None, :]


def split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, d = x.shape
    return nc.transpose(nc.reshape(x, (b, t, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    b, h, t, k = x.shape
    return nc.reshape(nc.transpose(x, (0, 2, 1, 3)), (b, t, h * k))


def _as_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return nc.reshape(x, (1,) + x.shape), True
    return x, False


def attend(q: Tensor, k: Tensor, v: Tensor, mask=None, dp_a: float = 0.0,
           rng: Rng | None = None, mode: str = "eval") -> Tensor:
    """Scaled dot-product over per-head tensors shaped (B, h, T, d/h)."""
    scores = nc.scale(nc.matmul(q, nc.swap_last(k)), 1.0 / np.sqrt(q.shape[-1]))
    if mask is not None:
        scores = nc.add(scores, mask)
    weights = dropout(nc.softmax(scores, axis=-1), dp_a, rng, mode)
    return nc.matmul(weights, v)


def attention_heads(zx: Tensor, zy: Tensor, p: AttentionParams, mask=None,
                    dp_a: float = 0.0, rng: Rng | None = None, mode: str = "eval") -> Tensor:
    """Concatenated head outputs before the ``W_o`` projection."""
    zx, squeeze = _as_batch(zx)
    zy, _ = _as_batch(zy)
    if mask is not None:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape[-1] != zy.shape[1] or (mask.ndim >= 2 and mask.shape[-2] not in (1, zx.shape[1])):
            raise ShapeError(f"mask shape {mask.shape} does not fit {zx.shape[1]} queries x {zy.shape[1]} keys")
    q = split_heads(nc.matmul(zx, p.wq), p.heads)
    k = split_heads(nc.matmul(zy, p.wk), p.heads)
    v = split_heads(nc.matmul(zy, p.wv), p.heads)
    out = merge_heads(attend(q, k, v, mask, dp_a, rng, mode))
    if squeeze:
        out = nc.reshape(out, out.shape[1:])
    return out


def attention(zx: Tensor, zy: Tensor, p: AttentionParams, mask=None,
              dp_a: float = 0.0, rng: Rng | None = None, mode: str = "eval") -> Tensor:
    """Multi-head ``softmax(Q K^T / sqrt(d/h)) V W_o`` with an additive mask."""
    return nc.matmul(attention_heads(zx, zy, p, mask, dp_a, rng, mode), p.wo)


def average_mask(m: int) -> np.ndarray:
    """Lower-triangular (m, m) matrix whose row t holds 1/t on columns 1..t."""
    if m < 1:
        raise ValueError(f"average mask needs m >= 1, got {m}")
    return np.tril(np.ones((m, m))) / np.arange(1, m + 1, dtype=np.float64)[:, None]


def cumulative_average(x: Tensor) -> Tensor:
    return nc.matmul(Tensor(average_mask(x.shape[-2])), x)


def saan(s: Tensor, p: SAanParams) -> Tensor:
    """Simplified average attention: ``(M_a (S W_v)) W_o``."""
    return nc.matmul(cumulative_average(nc.matmul(s, p.wv)), p.wo)


def aan_gate(s: Tensor, g: Tensor, p: AanParams) -> Tensor:
    d = s.shape[-1]
    gates = nc.sigmoid(nc.add(nc.matmul(nc.concat([s, g], axis=-1), p.wg), p.bg))
    i_gate = nc.getitem(gates, (..., slice(0, d)))
    f_gate = nc.getitem(gates, (..., slice(d, 2 * d)))
    return nc.add(nc.mul(i_gate, s), nc.mul(f_gate, g))


def aan_original(s: Tensor, p: AanParams) -> Tensor:
    """Average, FFN, then input/forget gating over ``[s; FFN(avg)]``."""
    avg = cumulative_average(s)
    g = ffn(avg, FfnParams(p.w1, p.b1, p.w2, p.b2))
    return aan_gate(s, g, p)


def merged_attention(s: Tensor, h: Tensor, saan_p: SAanParams, cross_p: AttentionParams,
                     mask=None, dp_a: float = 0.0, rng: Rng | None = None,
                     mode: str = "eval") -> Tensor:
    """SAAN branch plus encoder-decoder attention through one shared ``W_o``.

    The sum is taken before the shared projection, which equals summing the
    two projected branches.
    """
    avg = cumulative_average(nc.matmul(s, saan_p.wv))
    cross = attention_heads(s, h, cross_p, mask, dp_a, rng, mode)
    return nc.matmul(nc.add(avg, cross), cross_p.wo)
