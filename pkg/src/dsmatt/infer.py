"""Cached autoregressive decoding, beam search and a decode-speed benchmark."""
from __future__ import annotations

import math
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .layers import aan_gate, attend, ffn, layer_norm, merge_heads, padding_mask, split_heads
from .model import Transformer
from .numcore import Tensor
from .tasks import BOS, EOS, PAD


@dataclass
class LayerCache:
    """Per-layer decoding state.

    ``self_k``/``self_v`` grow by one position per step (baseline and
    ``matt_self``); ``mean`` is the running average used by ``matt`` and
    ``aan_original`` and stays (B, 1, d) whatever the step count.
    """
    cross_k: np.ndarray
    cross_v: np.ndarray
    self_k: np.ndarray | None = None
    self_v: np.ndarray | None = None
    mean: np.ndarray | None = None

    def select(self, idx: np.ndarray) -> "LayerCache":
        pick = lambda a: None if a is None else a[idx]
        return LayerCache(self.cross_k[idx], self.cross_v[idx], pick(self.self_k),
                          pick(self.self_v), pick(self.mean))


@dataclass
class DecodeState:
    model_id: int
    src_mask: np.ndarray
    layers: list[LayerCache]
    t: int = 0

    def select(self, idx) -> "DecodeState":
        """Reorder or replicate batch rows (beam bookkeeping)."""
        idx = np.asarray(idx)
        return DecodeState(self.model_id, self.src_mask[idx],
                           [c.select(idx) for c in self.layers], self.t)

    def state_size(self) -> int:
        """Scalars held in the self-side caches (cross caches excluded)."""
        total = 0
        for c in self.layers:
            for a in (c.self_k, c.self_v, c.mean):
                if a is not None:
                    total += a.size
        return total


def init_state(model: Transformer, src: np.ndarray) -> DecodeState:
    """Encode ``src`` once and precompute every layer's cross-attention K, V."""
    src = np.atleast_2d(np.asarray(src, dtype=np.int64))
    h = model.encode(src)
    prefix = "cross" if model.cfg.decoder == "baseline" else "matt"
    layers = []
    for l in range(1, model.cfg.layers + 1):
        p = model.attn(f"dec.{l}.{prefix}")
        k = split_heads(nc.matmul(h, p.wk), p.heads).data
        v = split_heads(nc.matmul(h, p.wv), p.heads).data
        layers.append(LayerCache(k, v))
    return DecodeState(id(model), padding_mask(src != PAD), layers)


def _self_attend(z: Tensor, cache: LayerCache, p) -> Tensor:
    k = split_heads(nc.matmul(z, p.wk), p.heads).data
    v = split_heads(nc.matmul(z, p.wv), p.heads).data
    cache.self_k = k if cache.self_k is None else np.concatenate([cache.self_k, k], axis=2)
    cache.self_v = v if cache.self_v is None else np.concatenate([cache.self_v, v], axis=2)
    q = split_heads(nc.matmul(z, p.wq), p.heads)
    return merge_heads(attend(q, Tensor(cache.self_k), Tensor(cache.self_v)))


def _cross_heads(z: Tensor, cache: LayerCache, p, src_mask) -> Tensor:
    q = split_heads(nc.matmul(z, p.wq), p.heads)
    return merge_heads(attend(q, Tensor(cache.cross_k), Tensor(cache.cross_v), src_mask))


def _running_mean(cache: LayerCache, x: np.ndarray, t: int) -> np.ndarray:
    # mean_t = ((t - 1) * mean_{t-1} + x_t) / t
    cache.mean = x if cache.mean is None else ((t - 1) * cache.mean + x) / t
    return cache.mean


def step(model: Transformer, state: DecodeState, tokens: np.ndarray):
    """Feed one token per row; returns (B, V) logits and the advanced state."""
    if state.model_id != id(model) or len(state.layers) != model.cfg.layers:
        raise ValueError("decode state was created for a different model")
    cfg = model.cfg
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1, 1)
    t = state.t + 1
    table = model.params["tgt_embed"]
    if tokens.min() < 0 or tokens.max() >= table.shape[0]:
        raise ValueError("token id out of range for tgt_embed")
    s = Tensor(table.data[tokens] * math.sqrt(cfg.dim) + model._pe[t - 1])
    pre_norm = cfg.layout == "pre_norm"

    def block(name, z, fn):
        ln = model.ln(f"{name}_ln")
        if pre_norm:
            return nc.add(z, fn(layer_norm(z, ln)))
        return layer_norm(nc.add(z, fn(z)), ln)

    for l, cache in enumerate(state.layers, start=1):
        pre = f"dec.{l}"
        if cfg.decoder == "baseline":
            sp, cp = model.attn(f"{pre}.self"), model.attn(f"{pre}.cross")
            s = block(f"{pre}.self", s, lambda z: nc.matmul(_self_attend(z, cache, sp), sp.wo))
            s = block(f"{pre}.cross", s,
                      lambda z: nc.matmul(_cross_heads(z, cache, cp, state.src_mask), cp.wo))
        else:
            cp = model.attn(f"{pre}.matt")

            def merged(z):
                ca = _cross_heads(z, cache, cp, state.src_mask)
                if cfg.decoder == "matt":
                    v = nc.matmul(z, model.params[f"{pre}.matt.saan_wv"]).data
                    return nc.matmul(nc.add(Tensor(_running_mean(cache, v, t)), ca), cp.wo)
                ca = nc.matmul(ca, cp.wo)
                if cfg.decoder == "matt_self":
                    sp = model.attn(f"{pre}.matt", "self_")
                    return nc.add(nc.matmul(_self_attend(z, cache, sp), sp.wo), ca)
                ap = model.aan_params(f"{pre}.matt")
                avg = Tensor(_running_mean(cache, z.data, t))
                g = ffn(avg, model.ffn_params(f"{pre}.matt", "aan_"))
                return nc.add(aan_gate(z, g, ap), ca)

            s = block(f"{pre}.matt", s, merged)
        fp = model.ffn_params(f"{pre}.ffn")
        s = block(f"{pre}.ffn", s, lambda z: ffn(z, fp))
    if pre_norm:
        s = layer_norm(s, model.ln("dec.final"))
    logits = model.project(s).data[:, 0, :]
    state.t = t
    return logits, state


def _log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def max_decode_len(src_len: int) -> int:
    return 2 * src_len + 8


def length_penalty(length: int, alpha: float) -> float:
    return ((5.0 + length) / 6.0) ** alpha


@dataclass
class Hypothesis:
    tokens: list[int]
    logprob: float = 0.0
    finished: bool = False
    score: float = field(default=0.0)

    def symbols(self) -> list[int]:
        return [t for t in self.tokens if t != EOS]


def greedy_decode(model: Transformer, src, max_len: int | None = None,
                  stop_at_eos: bool = True, alpha: float = 0.0) -> list[Hypothesis]:
    """Batched argmax decoding; each row stops at its first EOS."""
    src = np.atleast_2d(np.asarray(src, dtype=np.int64))
    n = src.shape[1]
    max_len = max_len or max_decode_len(n)
    state = init_state(model, src)
    b = src.shape[0]
    tokens = np.full(b, BOS)
    out = [[] for _ in range(b)]
    logp = np.zeros(b)
    done = np.zeros(b, dtype=bool)
    for _ in range(max_len):
        logits, state = step(model, state, tokens)
        lp = _log_softmax(logits)
        tokens = lp.argmax(axis=-1)
        for i in range(b):
            if not done[i]:
                out[i].append(int(tokens[i]))
                logp[i] += lp[i, tokens[i]]
                if stop_at_eos and tokens[i] == EOS:
                    done[i] = True
        if stop_at_eos and done.all():
            break
    hyps = []
    for i in range(b):
        h = Hypothesis(out[i], float(logp[i]), bool(done[i]))
        h.score = h.logprob / length_penalty(len(h.tokens), alpha)
        hyps.append(h)
    return hyps


def beam_search(model: Transformer, src, beam: int = 4, alpha: float = 0.6,
                max_len: int | None = None) -> Hypothesis:
    """Beam search for one source sentence with ((5+len)/6)^alpha normalization.

    EOS candidates are finalized only from the top ``beam`` ranks and the
    search ends once ``beam`` hypotheses have finished. The returned
    hypothesis is the best-scoring finished one, compared against the greedy
    hypothesis so that the result never scores below greedy.
    """
    if beam < 1:
        raise ValueError(f"beam must be >= 1, got {beam}")
    src = np.asarray(src, dtype=np.int64).reshape(1, -1)
    max_len = max_len or max_decode_len(src.shape[1])
    state = init_state(model, src)
    alive = [Hypothesis([], 0.0)]
    finished: list[Hypothesis] = []
    for _ in range(max_len):
        logits, state = step(model, state, np.array([h.tokens[-1] if h.tokens else BOS for h in alive]))
        cand = np.array([h.logprob for h in alive])[:, None] + _log_softmax(logits)
        flat = cand.reshape(-1)
        order = np.argsort(-flat, kind="stable")[: 2 * beam]
        vocab = cand.shape[1]
        next_alive, rows = [], []
        for rank, c in enumerate(order):
            row, tok = divmod(int(c), vocab)
            hyp = Hypothesis(alive[row].tokens + [tok], float(flat[c]))
            if tok == EOS:
                if rank < beam:
                    hyp.finished = True
                    hyp.score = hyp.logprob / length_penalty(len(hyp.tokens), alpha)
                    finished.append(hyp)
            elif len(next_alive) < beam:
                next_alive.append(hyp)
                rows.append(row)
        if len(finished) >= beam or not next_alive:
            break
        alive = next_alive
        state = state.select(np.array(rows))
    if not finished:
        for h in alive:
            h.score = h.logprob / length_penalty(len(h.tokens), alpha)
        finished = alive
    best = max(finished, key=lambda h: h.score)
    greedy = greedy_decode(model, src, max_len, alpha=alpha)[0]
    return greedy if greedy.score > best.score else best


# ---------------------------------------------------------------- benchmark

def decoder_step_macs(cfg, t: int, n: int) -> int:
    """Multiply-accumulates for one incremental decoder step at position ``t``.

    Counts matrix products and attention reductions for ``n`` source
    positions; cross-attention keys/values are cached and not counted.
    """
    d, f = cfg.dim, cfg.ffn_dim
    cross = 2 * d * d + 2 * n * d
    per_layer = 2 * d * f
    if cfg.decoder == "baseline":
        per_layer += 4 * d * d + 2 * t * d + cross
    elif cfg.decoder == "matt":
        per_layer += 3 * d * d + d + 2 * n * d
    elif cfg.decoder == "matt_self":
        per_layer += 4 * d * d + 2 * t * d + cross
    else:
        per_layer += 2 * d * cfg.aan_hidden + 4 * d * d + 2 * d + d + cross
    return cfg.layers * per_layer + d * cfg.tgt_vocab


@dataclass
class BenchRow:
    variant: str
    layers: int
    tokens_per_second: float
    speedup_vs_baseline: float
    params: int
    decoder_step_macs: int
    train_step_seconds: float | None = None


def time_decode(model: Transformer, src: np.ndarray, steps: int, reps: int = 5, warmup: int = 3) -> float:
    """Median wall-clock seconds to encode and decode ``steps`` tokens per row."""
    times = []
    for i in range(warmup + reps):
        t0 = time.perf_counter()
        greedy_decode(model, src, max_len=steps, stop_at_eos=False)
        if i >= warmup:
            times.append(time.perf_counter() - t0)
    return statistics.median(times)


def bench_decode(models: dict[str, Transformer], src: np.ndarray, steps: int | None = None,
                 reps: int = 5, warmup: int = 3) -> list[BenchRow]:
    """Decode the same batch with every model (fastest of ``reps`` interleaved runs).

    Speedups are relative to ``baseline``.
    """
    from .model import count_params

    src = np.atleast_2d(src)
    steps = steps or max_decode_len(src.shape[1])
    # round-robin over variants so load drift hits all of them alike; keep the fastest rep
    best = {name: math.inf for name in models}
    for i in range(warmup + reps):
        for name, m in models.items():
            t0 = time.perf_counter()
            greedy_decode(m, src, max_len=steps, stop_at_eos=False)
            if i >= warmup:
                best[name] = min(best[name], time.perf_counter() - t0)
    tps = {name: src.shape[0] * steps / t for name, t in best.items()}
    ref = tps.get("baseline", next(iter(tps.values())))
    rows = []
    for name, m in models.items():
        macs = decoder_step_macs(m.cfg, steps, src.shape[1])
        rows.append(BenchRow(name, m.cfg.layers, tps[name], tps[name] / ref,
                             count_params(m.params), macs))
    return rows
