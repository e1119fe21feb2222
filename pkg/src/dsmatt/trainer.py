"""Adam + inverse-sqrt warmup training on synthetic tasks, with checkpointing."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .losses import label_smoothed_loss
from .model import CheckpointBundle, Context, Parameters, Transformer, save_checkpoint
from .numcore import Rng, Tape
from .probes import DynamicsLog, write_csv
from .tasks import Batch, SyntheticTask, batch_stream, collate

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    steps: int = 2000
    warmup: int = 400
    lr_scale: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    batch_tokens: int = 512
    label_smoothing: float = 0.1
    clip_norm: float | None = None
    seed: int = 1
    checkpoint_every: int = 500
    keep_checkpoints: int = 5
    eval_every: int = 100
    eval_size: int = 200
    target_acc: float | None = None
    dynamics_window: int = 50

    def __post_init__(self):
        if self.warmup < 1:
            raise ValueError(f"warmup must be >= 1, got {self.warmup}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError(f"label smoothing must lie in [0, 1), got {self.label_smoothing}")
        if self.batch_tokens < 1:
            raise ValueError(f"batch_tokens must be >= 1, got {self.batch_tokens}")


class TrainingDiverged(RuntimeError):
    pass


def lr_schedule(step: int, d: int, warmup: int, scale: float = 1.0) -> float:
    """``scale * d^-0.5 * min(step^-0.5, step * warmup^-1.5)``."""
    if step < 1:
        raise ValueError(f"schedule is defined from step 1, got {step}")
    return scale * d ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def moments(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        return {k: (self.m[k], self.v[k]) for k in self.m}


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))


def adam_step(params: dict, grads: dict[str, np.ndarray], state: OptimizerState, lr: float,
              cfg: TrainConfig) -> float:
    """Bias-corrected Adam update applied in place; returns the pre-clip grad norm."""
    norm = global_norm(grads)
    factor = 1.0
    if cfg.clip_norm is not None and norm > cfg.clip_norm:
        factor = cfg.clip_norm / norm
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        g = g * factor
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
    return norm


def token_accuracy(logits: np.ndarray, batch: Batch) -> float:
    valid = batch.tgt_valid
    return float((logits.argmax(-1) == batch.tgt_out)[valid].mean())


def evaluate(model: Transformer, batch: Batch) -> float:
    """Teacher-forced token accuracy with dropout off."""
    return token_accuracy(model.forward(batch).data, batch)


def loss_and_grads(model: Transformer, batch: Batch, eps_ls: float, ctx: Context):
    with Tape() as tape:
        logits = model.forward(batch, ctx)
        loss = label_smoothed_loss(logits, batch.tgt_out, eps_ls, batch.tgt_valid)
    return loss.item(), logits.data, nc.backward(tape, loss)


@dataclass
class TrainResult:
    metrics: list[tuple[int, float, float, float, float]]
    evals: list[tuple[int, float]]
    checkpoints: list[CheckpointBundle]
    dynamics: DynamicsLog
    steps_run: int
    reached_target_at: int | None = None

    def write_metrics(self, path) -> Path:
        return write_csv(path, ("step", "loss", "token_acc", "lr", "grad_norm"), self.metrics)

    def write_evals(self, path) -> Path:
        return write_csv(path, ("step", "eval_token_acc"), self.evals)


def train(model: Transformer, task: SyntheticTask, cfg: TrainConfig, out_dir=None,
          on_step=None) -> TrainResult:
    """Run ``cfg.steps`` updates (or until ``cfg.target_acc`` is reached on held-out data).

    Checkpoints are kept in memory (last ``keep_checkpoints``) and written to
    ``out_dir`` when one is given, together with metrics.csv, evals.csv and
    dynamics.csv.
    """
    root = Rng(cfg.seed)
    data_rng, drop_rng, eval_rng = root.child(1), root.child(2), root.child(3)
    held_out = collate(task.sample(eval_rng, cfg.eval_size))
    stream = batch_stream(task, cfg.batch_tokens, data_rng)
    params = model.params.unique()
    state = OptimizerState()
    dyn = DynamicsLog(model.cfg.layers, cfg.dynamics_window)
    metrics, evals, ckpts = [], [], []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    reached = None
    step = 0
    for step in range(1, cfg.steps + 1):
        batch = next(stream)
        ctx = Context(mode="train", rng=drop_rng)
        loss, logits, grads = loss_and_grads(model, batch, cfg.label_smoothing, ctx)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss {loss} at step {step} (lr {lr_schedule(step, model.cfg.dim, cfg.warmup, cfg.lr_scale):.3g})")
        named = {k: grads.get(t) for k, t in params.items() if grads.get(t) is not None}
        dyn.observe(model, grads)
        lr = lr_schedule(step, model.cfg.dim, cfg.warmup, cfg.lr_scale)
        gnorm = adam_step(params, named, state, lr, cfg)
        metrics.append((step, loss, token_accuracy(logits, batch), lr, gnorm))
        if on_step is not None:
            on_step(step, metrics[-1])
        if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            bundle = CheckpointBundle.from_model(model, step, state.moments())
            ckpts = (ckpts + [bundle])[-cfg.keep_checkpoints:]
            if out is not None:
                save_checkpoint(bundle, out / f"ckpt_{step:06d}.npz")
        if cfg.eval_every and step % cfg.eval_every == 0:
            acc = evaluate(model, held_out)
            evals.append((step, acc))
            log.info("step %d loss %.4f eval acc %.4f", step, loss, acc)
            if cfg.target_acc is not None and acc >= cfg.target_acc:
                reached = step
                break
    if not ckpts or ckpts[-1].step != step:
        bundle = CheckpointBundle.from_model(model, step, state.moments())
        ckpts = (ckpts + [bundle])[-cfg.keep_checkpoints:]
        if out is not None:
            save_checkpoint(bundle, out / f"ckpt_{step:06d}.npz")
    result = TrainResult(metrics, evals, ckpts, dyn, step, reached)
    if out is not None:
        result.write_metrics(out / "metrics.csv")
        result.write_evals(out / "evals.csv")
        dyn.write_csv(out / "dynamics.csv")
    return result


def average_checkpoints(bundles: list[CheckpointBundle]) -> Parameters:
    """Element-wise mean of parameters; optimizer moments are dropped."""
    if not bundles:
        raise ValueError("need at least one checkpoint to average")
    ref = bundles[0]
    for b in bundles[1:]:
        if b.params.keys() != ref.params.keys():
            raise ValueError("checkpoints disagree on parameter names")
        for k, arr in b.params.items():
            if arr.shape != ref.params[k].shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {ref.params[k].shape}")
    p = Parameters()
    for k in ref.params:
        # sorting per element makes the sum independent of bundle order
        stacked = np.sort(np.stack([b.params[k] for b in bundles]), axis=0)
        p.add(k, nc.Tensor(stacked.sum(axis=0) / len(bundles)))
    for k, target in ref.aliases.items():
        p.alias(k, target)
    return p


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
