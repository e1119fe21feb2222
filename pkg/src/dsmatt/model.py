"""Encoder-decoder Transformer assembled from :mod:`dsmatt.layers`.

Parameter names follow ``stack.layer.sublayer.matrix`` (for example
``dec.3.cross.wq``); layers are numbered from 1 within each stack.
"""
from __future__ import annotations

import fnmatch
import json
import math
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import initkit
from . import numcore as nc
from .layers import (
    AanParams, AttentionParams, FfnParams, LayerNormParams, SAanParams, aan_original,
    attention, causal_mask, dropout, ffn, layer_norm, merged_attention, padding_mask,
    positional_encoding, residual,
)
from .numcore import Rng, Tensor
from .tasks import Batch

LAYOUTS = ("post_norm", "pre_norm")
DECODERS = ("baseline", "matt", "matt_self", "aan_original")
MAX_POSITIONS = 512


@dataclass
class ModelConfig:
    layers: int = 6
    dim: int = 64
    ffn_dim: int = 256
    heads: int = 4
    src_vocab: int = 64
    tgt_vocab: int = 64
    layout: str = "post_norm"
    decoder: str = "baseline"
    init: str = "glorot"
    alpha: float = 1.0
    sigma: float = 0.02
    dp_r: float = 0.0
    dp_a: float = 0.0
    share_target_softmax: bool = True
    ds_encoder: bool = True
    ds_decoder: bool = True
    aan_ffn_dim: int | None = None
    ln_eps: float = 1e-6

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError(f"layers must be >= 1, got {self.layers}")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.dim % 2:
            raise ValueError(f"dim must be even for sinusoidal positions, got {self.dim}")
        if self.layout not in LAYOUTS:
            raise ValueError(f"layout must be one of {LAYOUTS}, got {self.layout!r}")
        if self.decoder not in DECODERS:
            raise ValueError(f"decoder must be one of {DECODERS}, got {self.decoder!r}")
        if self.init not in initkit.POLICIES:
            raise ValueError(f"init must be one of {initkit.POLICIES}, got {self.init!r}")
        for rate in ("dp_r", "dp_a"):
            if not 0.0 <= getattr(self, rate) < 1.0:
                raise ValueError(f"{rate} must lie in [0, 1)")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")

    @property
    def aan_hidden(self) -> int:
        return self.aan_ffn_dim or self.dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class Parameters(Mapping):
    """Named parameter tensors; an alias name resolves to another entry's storage."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}
        self.aliases: dict[str, str] = {}
        self.init_meta: dict[str, tuple[str, float]] = {}

    def add(self, name: str, tensor: Tensor, meta: tuple[str, float] | None = None) -> Tensor:
        if name in self._tensors or name in self.aliases:
            raise KeyError(f"duplicate parameter name {name!r}")
        tensor.requires_grad = True
        tensor.name = name
        self._tensors[name] = tensor
        if meta is not None:
            self.init_meta[name] = meta
        return tensor

    def alias(self, name: str, target: str) -> None:
        self.aliases[name] = target

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[self.aliases.get(name, name)]

    def __iter__(self):
        yield from self._tensors
        yield from self.aliases

    def __len__(self) -> int:
        return len(self._tensors) + len(self.aliases)

    def unique(self) -> dict[str, Tensor]:
        """Parameters with distinct storage, keyed by their owning name."""
        return dict(self._tensors)


def count_params(params: Mapping, *patterns: str) -> int:
    """Scalar count over distinct storage, optionally filtered by glob patterns."""
    seen, total = set(), 0
    for name in params:
        if patterns and not any(fnmatch.fnmatchcase(name, p) for p in patterns):
            continue
        t = params[name]
        if id(t) in seen:
            continue
        seen.add(id(t))
        total += t.size
    return total


# ---------------------------------------------------------------- building

def _weight(params: Parameters, rng: Rng, cfg: ModelConfig, name: str,
            d_in: int, d_out: int, depth: int | None, depth_scaled: bool) -> None:
    policy = cfg.init
    if policy == "ds_init" and not (depth_scaled and depth is not None):
        policy = "glorot"
    spec = initkit.InitSpec(policy, d_in, d_out, layer_depth=depth or 1,
                            alpha=cfg.alpha, sigma=cfg.sigma)
    params.add(name, initkit.sample(rng, spec), (policy, initkit.sampling_bound(spec)))


def _zeros(params: Parameters, name: str, n: int) -> None:
    params.add(name, Tensor(np.zeros(n)))


def _ln(params: Parameters, name: str, d: int) -> None:
    params.add(f"{name}.g", Tensor(np.ones(d)))
    params.add(f"{name}.b", Tensor(np.zeros(d)))


def _attn(params, rng, cfg, prefix, depth, scaled, with_out=True, tag=""):
    d = cfg.dim
    for m in ("wq", "wk", "wv") + (("wo",) if with_out else ()):
        _weight(params, rng, cfg, f"{prefix}.{tag}{m}", d, d, depth, scaled)


def _ffn(params, rng, cfg, prefix, depth, scaled, hidden=None, tag=""):
    d, f = cfg.dim, hidden or cfg.ffn_dim
    _weight(params, rng, cfg, f"{prefix}.{tag}w1", d, f, depth, scaled)
    _zeros(params, f"{prefix}.{tag}b1", f)
    _weight(params, rng, cfg, f"{prefix}.{tag}w2", f, d, depth, scaled)
    _zeros(params, f"{prefix}.{tag}b2", d)


def decoder_sublayers(decoder: str) -> tuple[str, ...]:
    return ("self", "cross", "ffn") if decoder == "baseline" else ("matt", "ffn")


def build(cfg: ModelConfig, rng: Rng) -> Parameters:
    """Sample a full parameter set; layer-l weights use depth l under DS-Init."""
    p = Parameters()
    d = cfg.dim
    _weight(p, rng, cfg, "src_embed", cfg.src_vocab, d, None, False)
    _weight(p, rng, cfg, "tgt_embed", cfg.tgt_vocab, d, None, False)
    if cfg.share_target_softmax:
        p.alias("softmax", "tgt_embed")
    else:
        _weight(p, rng, cfg, "softmax", cfg.tgt_vocab, d, None, False)

    for l in range(1, cfg.layers + 1):
        pre = f"enc.{l}"
        _attn(p, rng, cfg, f"{pre}.self", l, cfg.ds_encoder)
        _ln(p, f"{pre}.self_ln", d)
        _ffn(p, rng, cfg, f"{pre}.ffn", l, cfg.ds_encoder)
        _ln(p, f"{pre}.ffn_ln", d)

    for l in range(1, cfg.layers + 1):
        pre, sc = f"dec.{l}", cfg.ds_decoder
        if cfg.decoder == "baseline":
            _attn(p, rng, cfg, f"{pre}.self", l, sc)
            _ln(p, f"{pre}.self_ln", d)
            _attn(p, rng, cfg, f"{pre}.cross", l, sc)
            _ln(p, f"{pre}.cross_ln", d)
        else:
            if cfg.decoder == "matt":
                _weight(p, rng, cfg, f"{pre}.matt.saan_wv", d, d, l, sc)
                p.alias(f"{pre}.matt.saan_wo", f"{pre}.matt.wo")
            elif cfg.decoder == "matt_self":
                _attn(p, rng, cfg, f"{pre}.matt", l, sc, tag="self_")
            else:
                _ffn(p, rng, cfg, f"{pre}.matt", l, sc, hidden=cfg.aan_hidden, tag="aan_")
                _weight(p, rng, cfg, f"{pre}.matt.aan_wg", 2 * d, 2 * d, l, sc)
                _zeros(p, f"{pre}.matt.aan_bg", 2 * d)
            _attn(p, rng, cfg, f"{pre}.matt", l, sc)
            _ln(p, f"{pre}.matt_ln", d)
        _ffn(p, rng, cfg, f"{pre}.ffn", l, sc)
        _ln(p, f"{pre}.ffn_ln", d)

    if cfg.layout == "pre_norm":
        _ln(p, "enc.final", d)
        _ln(p, "dec.final", d)
    return p


# ---------------------------------------------------------------- forward

@dataclass
class Context:
    """Per-call switches threaded through the forward pass."""
    mode: str = "eval"
    rng: Rng | None = None
    probe: bool = False
    records: list = field(default_factory=list)


class Transformer:
    """A configuration bound to a parameter set."""

    def __init__(self, cfg: ModelConfig, params: Parameters):
        self.cfg = cfg
        self.params = params
        self._pe = positional_encoding(MAX_POSITIONS, cfg.dim)

    @classmethod
    def create(cls, cfg: ModelConfig, seed: int = 0) -> "Transformer":
        return cls(cfg, build(cfg, Rng(seed)))

    # parameter views
    def ln(self, name: str) -> LayerNormParams:
        p = self.params
        return LayerNormParams(p[f"{name}.g"], p[f"{name}.b"], self.cfg.ln_eps)

    def attn(self, prefix: str, tag: str = "") -> AttentionParams:
        p = self.params
        return AttentionParams(p[f"{prefix}.{tag}wq"], p[f"{prefix}.{tag}wk"],
                               p[f"{prefix}.{tag}wv"], p[f"{prefix}.{tag}wo"], self.cfg.heads)

    def ffn_params(self, prefix: str, tag: str = "") -> FfnParams:
        p = self.params
        return FfnParams(p[f"{prefix}.{tag}w1"], p[f"{prefix}.{tag}b1"],
                         p[f"{prefix}.{tag}w2"], p[f"{prefix}.{tag}b2"])

    def aan_params(self, prefix: str) -> AanParams:
        p = self.params
        return AanParams(p[f"{prefix}.aan_w1"], p[f"{prefix}.aan_b1"], p[f"{prefix}.aan_w2"],
                         p[f"{prefix}.aan_b2"], p[f"{prefix}.aan_wg"], p[f"{prefix}.aan_bg"])

    def saan_params(self, prefix: str) -> SAanParams:
        return SAanParams(self.params[f"{prefix}.saan_wv"], self.params[f"{prefix}.wo"])

    # building blocks
    def embed(self, table: str, ids: np.ndarray, ctx: Context) -> Tensor:
        ids = np.asarray(ids)
        vocab = self.params[table].shape[0]
        if ids.min() < 0 or ids.max() >= vocab:
            raise ValueError(f"token id out of range for {table} (vocab {vocab})")
        x = nc.scale(nc.embed(self.params[table], ids), math.sqrt(self.cfg.dim))
        x = nc.add(x, self._pe[: ids.shape[-1]])
        return dropout(x, self.cfg.dp_r, ctx.rng, ctx.mode)

    def block(self, name: str, z: Tensor, fn, ctx: Context) -> Tensor:
        """One residual sublayer in the configured layout."""
        ln = self.ln(f"{name}_ln")
        if self.cfg.layout == "pre_norm":
            return residual(z, dropout(fn(layer_norm(z, ln)), self.cfg.dp_r, ctx.rng, ctx.mode))
        r = residual(z, dropout(fn(z), self.cfg.dp_r, ctx.rng, ctx.mode))
        o = layer_norm(r, ln)
        if ctx.probe:
            nc.probe(f"{name}.z", z)
            nc.probe(f"{name}.r", r)
            nc.probe(f"{name}.o", o)
            ctx.records.append(name)
        return o

    def encode(self, src: np.ndarray, ctx: Context | None = None) -> Tensor:
        ctx = ctx or Context()
        cfg = self.cfg
        src = np.atleast_2d(src)
        mask = padding_mask(src != 0)
        h = self.embed("src_embed", src, ctx)
        for l in range(1, cfg.layers + 1):
            att = self.attn(f"enc.{l}.self")
            h = self.block(f"enc.{l}.self", h,
                           lambda z: attention(z, z, att, mask, cfg.dp_a, ctx.rng, ctx.mode), ctx)
            fp = self.ffn_params(f"enc.{l}.ffn")
            h = self.block(f"enc.{l}.ffn", h, lambda z: ffn(z, fp), ctx)
        if cfg.layout == "pre_norm":
            h = layer_norm(h, self.ln("enc.final"))
        return h

    def merged_branch(self, prefix: str, s: Tensor, h: Tensor, self_mask, src_mask,
                      ctx: Context) -> Tensor:
        """Self-side branch plus cross attention for the merged decoder variants."""
        cfg = self.cfg
        cross = self.attn(prefix)
        if cfg.decoder == "matt":
            return merged_attention(s, h, self.saan_params(prefix), cross, src_mask,
                                    cfg.dp_a, ctx.rng, ctx.mode)
        ca = attention(s, h, cross, src_mask, cfg.dp_a, ctx.rng, ctx.mode)
        if cfg.decoder == "matt_self":
            sa = attention(s, s, self.attn(prefix, "self_"), self_mask, cfg.dp_a, ctx.rng, ctx.mode)
        else:
            sa = aan_original(s, self.aan_params(prefix))
        return nc.add(sa, ca)

    def decode_hidden(self, tgt_in: np.ndarray, h: Tensor, src_valid: np.ndarray,
                      ctx: Context | None = None) -> Tensor:
        ctx = ctx or Context()
        cfg = self.cfg
        tgt_in = np.atleast_2d(tgt_in)
        self_mask = causal_mask(tgt_in.shape[1])
        src_mask = padding_mask(np.atleast_2d(src_valid))
        s = self.embed("tgt_embed", tgt_in, ctx)
        for l in range(1, cfg.layers + 1):
            pre = f"dec.{l}"
            if cfg.decoder == "baseline":
                sp, cp = self.attn(f"{pre}.self"), self.attn(f"{pre}.cross")
                s = self.block(f"{pre}.self", s,
                               lambda z: attention(z, z, sp, self_mask, cfg.dp_a, ctx.rng, ctx.mode), ctx)
                s = self.block(f"{pre}.cross", s,
                               lambda z: attention(z, h, cp, src_mask, cfg.dp_a, ctx.rng, ctx.mode), ctx)
            else:
                s = self.block(f"{pre}.matt", s,
                               lambda z: self.merged_branch(f"{pre}.matt", z, h, self_mask, src_mask, ctx), ctx)
            fp = self.ffn_params(f"{pre}.ffn")
            s = self.block(f"{pre}.ffn", s, lambda z: ffn(z, fp), ctx)
        if cfg.layout == "pre_norm":
            s = layer_norm(s, self.ln("dec.final"))
        return s

    def project(self, s: Tensor) -> Tensor:
        return nc.matmul(s, nc.swap_last(self.params["softmax"]))

    def decode_train(self, tgt_in: np.ndarray, h: Tensor, src_valid: np.ndarray,
                     ctx: Context | None = None) -> Tensor:
        """Teacher-forced logits of shape (B, m, V)."""
        return self.project(self.decode_hidden(tgt_in, h, src_valid, ctx))

    def forward(self, batch: Batch, ctx: Context | None = None) -> Tensor:
        ctx = ctx or Context()
        h = self.encode(batch.src, ctx)
        return self.decode_train(batch.tgt_in, h, batch.src_valid, ctx)

    def layer_names(self, stack: str) -> list[str]:
        return [f"{stack}.{l}" for l in range(1, self.cfg.layers + 1)]


# ---------------------------------------------------------------- checkpoints

@dataclass
class CheckpointBundle:
    """Parameters, Adam moments and step counter as plain arrays."""
    config: dict
    step: int
    params: dict[str, np.ndarray]
    aliases: dict[str, str] = field(default_factory=dict)
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: Transformer, step: int = 0, moments=None, extra=None) -> "CheckpointBundle":
        return cls(model.cfg.to_dict(), step,
                   {k: t.data.copy() for k, t in model.params.unique().items()},
                   dict(model.params.aliases),
                   {k: (m.copy(), v.copy()) for k, (m, v) in (moments or {}).items()},
                   dict(extra or {}))

    def to_model(self) -> Transformer:
        cfg = ModelConfig.from_dict(self.config)
        p = Parameters()
        for k, arr in self.params.items():
            p.add(k, Tensor(arr.copy()))
        for k, target in self.aliases.items():
            p.alias(k, target)
        return Transformer(cfg, p)


def save_checkpoint(bundle: CheckpointBundle, path) -> Path:
    """Write an uncompressed ``.npz`` archive.

    Each member is a ``.npy`` array stored little-endian float64 in C order:
    ``param/<name>``, ``adam_m/<name>``, ``adam_v/<name>``. The member
    ``meta`` holds UTF-8 JSON with the config echo, step counter and aliases.
    """
    path = Path(path)
    arrays = {f"param/{k}": np.ascontiguousarray(v, dtype="<f8") for k, v in bundle.params.items()}
    for k, (m, v) in bundle.moments.items():
        arrays[f"adam_m/{k}"] = np.ascontiguousarray(m, dtype="<f8")
        arrays[f"adam_v/{k}"] = np.ascontiguousarray(v, dtype="<f8")
    meta = {"config": bundle.config, "step": bundle.step, "aliases": bundle.aliases,
            "extra": bundle.extra}
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path) -> CheckpointBundle:
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        params, ms, vs = {}, {}, {}
        for key in z.files:
            kind, _, name = key.partition("/")
            if kind == "param":
                params[name] = z[key].astype(np.float64)
            elif kind == "adam_m":
                ms[name] = z[key].astype(np.float64)
            elif kind == "adam_v":
                vs[name] = z[key].astype(np.float64)
    moments = {k: (ms[k], vs[k]) for k in ms}
    return CheckpointBundle(meta["config"], meta["step"], params, meta["aliases"], moments,
                            meta.get("extra", {}))
