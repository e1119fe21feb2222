"""Command-line entry point: ``dsmatt {train,analyze,decode,bench,avg}``.

Configuration comes from a flat ``key=value`` file (``#`` starts a comment)
and ``--key value`` overrides. Exit codes: 0 ok, 2 config error, 3 runtime
error.
"""
from __future__ import annotations

import argparse
import logging
import statistics
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .infer import beam_search, bench_decode, greedy_decode
from .model import CheckpointBundle, Context, ModelConfig, Transformer, load_checkpoint, save_checkpoint
from .numcore import Rng
from .probes import (GRADNORM_HEADER, RATIO_HEADER, UnsupportedLayout, attach_probes,
                     gradnorm_rows, measure_ratios, ratio_rows, write_csv)
from .tasks import EOS, FIRST_SYMBOL, SyntheticTask, fixed_batch
from .trainer import (OptimizerState, TrainConfig, TrainingDiverged, adam_step, average_checkpoints,
                      loss_and_grads, lr_schedule, train)

log = logging.getLogger("dsmatt")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

LAYOUT_NAMES = {"post": "post_norm", "pre": "pre_norm"}
DECODER_NAMES = {"baseline": "baseline", "matt": "matt", "matt_self": "matt_self", "aan": "aan_original"}
INIT_NAMES = {"glorot": "glorot", "ds": "ds_init", "fixed": "fixed_sigma"}


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _choice(table):
    def parse(text):
        if text not in table:
            raise ValueError(f"expected one of {sorted(table)}, got {text!r}")
        return table[text]
    return parse


def _opt_float(text: str):
    return None if text.lower() in ("none", "off", "") else float(text)


# key -> (parser, default); a default of REQUIRED must be supplied
REQUIRED = object()
SCHEMA = {
    "layers": (int, REQUIRED),
    "dim": (int, 64),
    "ffn_dim": (int, 256),
    "heads": (int, 4),
    "layout": (_choice(LAYOUT_NAMES), "post_norm"),
    "decoder": (_choice(DECODER_NAMES), "baseline"),
    "init": (_choice(INIT_NAMES), "glorot"),
    "alpha": (float, 1.0),
    "sigma": (float, 0.02),
    "dp_r": (float, 0.0),
    "dp_a": (float, 0.0),
    "share_softmax": (_bool, True),
    "ds_encoder": (_bool, True),
    "ds_decoder": (_bool, True),
    "warmup": (int, 400),
    "lr_scale": (float, 1.0),
    "batch_tokens": (int, 512),
    "label_smoothing": (float, 0.1),
    "clip_norm": (_opt_float, None),
    "steps": (int, 2000),
    "checkpoint_every": (int, 500),
    "keep_checkpoints": (int, 5),
    "eval_every": (int, 100),
    "target_acc": (_opt_float, None),
    "seed": (int, 1),
    "task": (str, "copy"),
    "vocab": (int, 64),
    "min_len": (int, 1),
    "max_len": (int, 12),
    "beam": (int, 4),
    "len_penalty": (float, 0.6),
    "probe_tokens": (int, 3000),
    "bench_batch": (int, 8),
    "bench_reps": (int, 5),
    "out": (str, "runs"),
}


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"config key {key!r}: {message}")
        self.key = key


@dataclass
class RunConfig:
    values: dict

    def __getattr__(self, key):
        try:
            return self.values[key]
        except KeyError:
            raise AttributeError(key) from None

    def model_config(self, **over) -> ModelConfig:
        v = self.values
        kw = dict(layers=v["layers"], dim=v["dim"], ffn_dim=v["ffn_dim"], heads=v["heads"],
                  src_vocab=v["vocab"], tgt_vocab=v["vocab"], layout=v["layout"],
                  decoder=v["decoder"], init=v["init"], alpha=v["alpha"], sigma=v["sigma"],
                  dp_r=v["dp_r"], dp_a=v["dp_a"], share_target_softmax=v["share_softmax"],
                  ds_encoder=v["ds_encoder"], ds_decoder=v["ds_decoder"])
        kw.update(over)
        return ModelConfig(**kw)

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(steps=v["steps"], warmup=v["warmup"], lr_scale=v["lr_scale"],
                           batch_tokens=v["batch_tokens"], label_smoothing=v["label_smoothing"],
                           clip_norm=v["clip_norm"], seed=v["seed"],
                           checkpoint_every=v["checkpoint_every"],
                           keep_checkpoints=v["keep_checkpoints"], eval_every=v["eval_every"],
                           target_acc=v["target_acc"])

    def task(self) -> SyntheticTask:
        return SyntheticTask(self.values["task"], self.values["vocab"],
                             self.values["min_len"], self.values["max_len"])


def read_config_file(path) -> dict[str, str]:
    raw = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(line, f"line {lineno} is not key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        raw[key] = value
    return raw


def parse_overrides(tokens: list[str]) -> dict[str, str]:
    raw, i = {}, 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise ConfigError(tok, "overrides must look like --key value")
        key = tok[2:].replace("-", "_")
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(key, "missing value")
            value = tokens[i + 1]
            i += 2
        raw[key] = value
    return raw


def resolve(raw: dict[str, str], required=("layers",)) -> RunConfig:
    """Validate raw strings against the schema; unknown keys are rejected."""
    for key in raw:
        if key not in SCHEMA:
            raise ConfigError(key, "unknown key")
    values = {}
    for key, (parse, default) in SCHEMA.items():
        if key in raw:
            try:
                values[key] = parse(raw[key])
            except ValueError as exc:
                raise ConfigError(key, str(exc)) from None
        elif default is REQUIRED:
            if key in required:
                raise ConfigError(key, "required key is missing")
            values[key] = None
        else:
            values[key] = default
    if values["task"] not in ("copy", "reverse", "sort"):
        raise ConfigError("task", f"expected copy|reverse|sort, got {values['task']!r}")
    return RunConfig(values)


def load_run_config(config_path, overrides: list[str], required=("layers",)) -> RunConfig:
    raw = read_config_file(config_path) if config_path else {}
    raw.update(parse_overrides(overrides))
    cfg = resolve(raw, required)
    try:
        if cfg.layers is not None:
            cfg.model_config()
        cfg.train_config()
        cfg.task()
    except ValueError as exc:
        raise ConfigError("config", str(exc)) from None
    return cfg


# ---------------------------------------------------------------- commands

def cmd_train(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    model = Transformer.create(cfg.model_config(), cfg.seed)
    result = train(model, cfg.task(), cfg.train_config(), out_dir=out)
    final = result.metrics[-1]
    print(f"trained {result.steps_run} steps: loss {final[1]:.4f}, token acc {final[2]:.4f}; wrote {out}")
    return EXIT_OK


def cmd_analyze(cfg: RunConfig) -> int:
    if cfg.layout != "post_norm":
        print("analyze: unsupported layout 'pre': ratio probes need the post-norm layout",
              file=sys.stderr)
        return EXIT_CONFIG
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    batch = fixed_batch(cfg.task(), Rng(cfg.seed).child(7), cfg.probe_tokens)
    ratios, norms = [], []
    for policy in ("glorot", "ds_init"):
        model = Transformer.create(cfg.model_config(init=policy), cfg.seed)
        report = measure_ratios(attach_probes(model), batch, cfg.label_smoothing)
        ratios += ratio_rows(policy, report)
        norms += gradnorm_rows(policy, report)
    write_csv(out / "ratios.csv", RATIO_HEADER, ratios)
    write_csv(out / "gradnorms.csv", GRADNORM_HEADER, norms)
    print(f"analyzed {batch.ntokens} target tokens; wrote {out / 'ratios.csv'} and {out / 'gradnorms.csv'}")
    return EXIT_OK


def _parse_ids(line: str) -> list[int]:
    return [int(tok) for tok in line.split()]


def cmd_decode(cfg: RunConfig, checkpoint, input_path, output_path=None) -> int:
    bundle = load_checkpoint(checkpoint)
    model = bundle.to_model()
    if cfg.layers is not None:
        mine = cfg.model_config()
        for key in ("layers", "dim", "heads", "src_vocab", "tgt_vocab", "decoder", "layout"):
            if getattr(mine, key) != getattr(model.cfg, key):
                raise ConfigError(key, f"checkpoint has {getattr(model.cfg, key)!r}, config has {getattr(mine, key)!r}")
    vocab = model.cfg.src_vocab
    lines_out = []
    for lineno, line in enumerate(Path(input_path).read_text().splitlines(), start=1):
        ids = _parse_ids(line)
        if not ids:
            lines_out.append("")
            continue
        bad = [t for t in ids if not FIRST_SYMBOL <= t < vocab]
        if bad:
            raise ValueError(f"line {lineno}: ids {bad} outside the model's symbol range [{FIRST_SYMBOL}, {vocab})")
        if cfg.beam == 1:
            hyp = greedy_decode(model, np.array(ids))[0]
        else:
            hyp = beam_search(model, np.array(ids), cfg.beam, cfg.len_penalty)
        lines_out.append(" ".join(str(t) for t in hyp.tokens if t != EOS))
    text = "".join(line + "\n" for line in lines_out)
    if output_path:
        Path(output_path).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def train_step_seconds(model: Transformer, batch, reps: int = 3) -> float:
    params = model.params.unique()
    state, times = OptimizerState(), []
    tcfg = TrainConfig()
    for i in range(reps + 1):
        t0 = time.perf_counter()
        _, _, grads = loss_and_grads(model, batch, 0.1, Context(mode="eval"))
        named = {k: grads.get(t) for k, t in params.items() if grads.get(t) is not None}
        adam_step(params, named, state, lr_schedule(i + 1, model.cfg.dim, 4000), tcfg)
        if i:
            times.append(time.perf_counter() - t0)
    return statistics.median(times)


def cmd_bench(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    task = cfg.task()
    rng = Rng(cfg.seed).child(11)
    # full-length random rows so every variant decodes the same amount of work
    src = rng.integers(3, task.vocab, (cfg.bench_batch, task.max_len))
    models = {name: Transformer.create(cfg.model_config(decoder=name), cfg.seed)
              for name in ("baseline", "matt", "matt_self", "aan_original")}
    rows = bench_decode(models, src, reps=cfg.bench_reps)
    batch = fixed_batch(task, Rng(cfg.seed).child(12), 256)
    header = ("variant", "layers", "tokens_per_second", "speedup_vs_baseline", "params",
              "decoder_step_macs", "train_step_seconds")
    table = []
    for r in rows:
        r.train_step_seconds = train_step_seconds(Transformer.create(cfg.model_config(decoder=r.variant), cfg.seed), batch)
        table.append((r.variant, r.layers, r.tokens_per_second, r.speedup_vs_baseline,
                      r.params, r.decoder_step_macs, r.train_step_seconds))
        print(f"{r.variant:13s} {r.tokens_per_second:10.1f} tok/s  x{r.speedup_vs_baseline:.2f}  params {r.params}")
    write_csv(out / "bench.csv", header, table)
    return EXIT_OK


def cmd_avg(checkpoints: list[str], output: str) -> int:
    bundles = [load_checkpoint(p) for p in checkpoints]
    params = average_checkpoints(bundles)
    ref = bundles[-1]
    avg = CheckpointBundle(ref.config, ref.step, {k: t.data for k, t in params.unique().items()},
                           dict(params.aliases), extra={"averaged": list(map(str, checkpoints))})
    save_checkpoint(avg, output)
    print(f"averaged {len(bundles)} checkpoints into {output}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dsmatt", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("train", "analyze", "bench"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="key=value config file")
    p = sub.add_parser("decode")
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output")
    p = sub.add_parser("avg")
    p.add_argument("checkpoints", nargs="+")
    p.add_argument("--output", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        if args.command == "avg":
            if rest:
                parser.error(f"unrecognized arguments: {' '.join(rest)}")
            return cmd_avg(args.checkpoints, args.output)
        required = () if args.command in ("decode",) else ("layers",)
        cfg = load_run_config(args.config, rest, required)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "analyze":
            return cmd_analyze(cfg)
        if args.command == "bench":
            return cmd_bench(cfg)
        return cmd_decode(cfg, args.checkpoint, args.input, args.output)
    except ConfigError as exc:
        print(f"dsmatt {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (UnsupportedLayout, TrainingDiverged, ValueError, OSError) as exc:
        print(f"dsmatt {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
