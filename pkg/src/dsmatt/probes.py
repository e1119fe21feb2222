"""Gradient-flow instrumentation around residual + layer-norm blocks.

For every post-norm block ``o = LN(r)``, ``r = z + f(z)`` the probes capture
the loss gradient arriving at ``z``, ``r`` and ``o`` and report

    beta_ln = |d_r| / |d_o|,  beta_rc = |d_z| / |d_r|,  beta = beta_ln * beta_rc

together with the pooled variance of the entries of ``r``.
"""
from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .losses import label_smoothed_loss
from .model import Context, Transformer, decoder_sublayers
from .numcore import Gradients, Tape
from .tasks import Batch


class UnsupportedLayout(ValueError):
    pass


class DegenerateSignal(ArithmeticError):
    pass


@dataclass(frozen=True)
class ProbeRecord:
    stack: str
    layer: int
    sublayer: str
    norm_o: float
    norm_r: float
    norm_z: float
    var_r: float

    @property
    def beta_ln(self) -> float:
        return self.norm_r / self.norm_o

    @property
    def beta_rc(self) -> float:
        return self.norm_z / self.norm_r

    @property
    def beta(self) -> float:
        return self.beta_ln * self.beta_rc


@dataclass
class CellStats:
    beta_ln: float
    beta_rc: float
    beta: float
    var_r: float


@dataclass
class RatioReport:
    records: list[ProbeRecord]
    grad_norms: dict[tuple[str, int], float] = field(default_factory=dict)
    loss: float = float("nan")

    def cells(self) -> dict[tuple[str, str], CellStats]:
        """Per-(stack, sublayer) means over layers, in first-seen order."""
        groups: dict[tuple[str, str], list[ProbeRecord]] = defaultdict(list)
        for r in self.records:
            groups[(r.stack, r.sublayer)].append(r)
        return {k: CellStats(float(np.mean([r.beta_ln for r in v])),
                             float(np.mean([r.beta_rc for r in v])),
                             float(np.mean([r.beta for r in v])),
                             float(np.mean([r.var_r for r in v])))
                for k, v in groups.items()}


class ProbedModel:
    """A post-norm model whose forward pass registers z/r/o probes per block."""

    def __init__(self, model: Transformer):
        self.model = model
        cfg = model.cfg
        self.blocks: list[tuple[str, int, str]] = []
        for l in range(1, cfg.layers + 1):
            self.blocks += [("enc", l, "self"), ("enc", l, "ffn")]
        for l in range(1, cfg.layers + 1):
            self.blocks += [("dec", l, k) for k in decoder_sublayers(cfg.decoder)]

    @property
    def probe_names(self) -> list[str]:
        return [f"{s}.{l}.{k}" for s, l, k in self.blocks]

    def run(self, batch: Batch, eps_ls: float = 0.1, loss_scale: float = 1.0):
        """One deterministic forward/backward; returns (tape, gradients, loss)."""
        ctx = Context(mode="eval", probe=True)
        with Tape() as tape:
            logits = self.model.forward(batch, ctx)
            loss = label_smoothed_loss(logits, batch.tgt_out, eps_ls, batch.tgt_valid, loss_scale)
        return tape, nc.backward(tape, loss), loss.item()


def attach_probes(model: Transformer) -> ProbedModel:
    if model.cfg.layout != "post_norm":
        raise UnsupportedLayout(
            f"ratio probes need the post_norm layout (RC followed by LN), got {model.cfg.layout}")
    return ProbedModel(model)


def layer_norms_from(model: Transformer, grads: Gradients, layers=None) -> dict[tuple[str, int], float]:
    """L2 norm of the concatenated parameter gradients of each layer."""
    cfg = model.cfg
    layers = layers or range(1, cfg.layers + 1)
    acc = defaultdict(float)
    wanted = {f"{s}.{l}." : (s, l) for s in ("enc", "dec") for l in layers}
    for name, t in model.params.unique().items():
        parts = name.split(".", 2)
        if len(parts) < 3 or not parts[1].isdigit():
            continue
        key = wanted.get(f"{parts[0]}.{parts[1]}.")
        if key is None:
            continue
        g = grads.get(t)
        if g is not None:
            acc[key] += float(np.vdot(g, g))
    return {(s, l): math.sqrt(acc[(s, l)]) for s in ("enc", "dec") for l in layers}


def _records(probed: ProbedModel, tape: Tape, grads: Gradients, batch: Batch) -> list[ProbeRecord]:
    valid = {"enc": batch.src_valid, "dec": batch.tgt_valid}
    out = []
    for (stack, layer, kind), name in zip(probed.blocks, probed.probe_names):
        d_o = grads.probes[f"{name}.o"]
        d_r = grads.probes[f"{name}.r"]
        d_z = grads.probes[f"{name}.z"]
        no = float(np.linalg.norm(d_o))
        if no == 0.0:
            raise DegenerateSignal(f"zero error signal at the output of {name}")
        r = tape.probes[f"{name}.r"].data[valid[stack]]
        out.append(ProbeRecord(stack, layer, kind, no, float(np.linalg.norm(d_r)),
                               float(np.linalg.norm(d_z)), float(r.var())))
    return out


def measure_ratios(probed: ProbedModel, batch: Batch, eps_ls: float = 0.1) -> RatioReport:
    """Probe records plus per-layer gradient norms from one forward/backward.

    Dropout is off; ``Var(r)`` pools every entry of ``r`` at non-padding
    positions.
    """
    tape, grads, loss = probed.run(batch, eps_ls)
    return RatioReport(_records(probed, tape, grads, batch),
                       layer_norms_from(probed.model, grads), loss)


def layer_gradient_norms(probed: ProbedModel | Transformer, batch: Batch, eps_ls: float = 0.1,
                         loss_scale: float = 1.0) -> dict[tuple[str, int], float]:
    model = probed.model if isinstance(probed, ProbedModel) else probed
    ctx = Context(mode="eval")
    with Tape() as tape:
        logits = model.forward(batch, ctx)
        loss = label_smoothed_loss(logits, batch.tgt_out, eps_ls, batch.tgt_valid, loss_scale)
    return layer_norms_from(model, nc.backward(tape, loss))


class DynamicsLog:
    """Windowed gradient norms of the first and last layer of each stack."""

    def __init__(self, layers: int, window: int = 50):
        self.layers = layers
        self.window = window
        self._sums: dict[tuple[int, str, int], float] = defaultdict(float)
        self._counts: dict[int, int] = defaultdict(int)
        self.steps = 0

    @property
    def tracked(self) -> tuple[int, ...]:
        return tuple(sorted({1, self.layers}))

    def record(self, norms: dict[tuple[str, int], float]) -> None:
        w = self.steps // self.window
        for stack in ("enc", "dec"):
            for layer in self.tracked:
                self._sums[(w, stack, layer)] += norms[(stack, layer)]
        self._counts[w] += 1
        self.steps += 1

    def observe(self, model: Transformer, grads: Gradients) -> None:
        self.record(layer_norms_from(model, grads, self.tracked))

    def rows(self) -> list[tuple[int, str, int, float]]:
        return [(w, s, l, v / self._counts[w]) for (w, s, l), v in sorted(self._sums.items())]

    def __len__(self) -> int:
        return len(self._counts)

    def write_csv(self, path) -> Path:
        return write_csv(path, ("window", "stack", "layer", "norm"), self.rows())


def training_dynamics_log(layers: int, window: int = 50) -> DynamicsLog:
    return DynamicsLog(layers, window)


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([f"{v:.10g}" if isinstance(v, float) else v for v in row])
    return path


RATIO_HEADER = ("policy", "stack", "sublayer", "beta_ln", "beta_rc", "beta", "var_r")
GRADNORM_HEADER = ("policy", "stack", "layer", "norm")


def ratio_rows(policy: str, report: RatioReport):
    return [(policy, s, k, c.beta_ln, c.beta_rc, c.beta, c.var_r)
            for (s, k), c in report.cells().items()]


def gradnorm_rows(policy: str, report: RatioReport):
    return [(policy, s, l, n) for (s, l), n in sorted(report.grad_norms.items())]
