"""Acceptance criteria, one test each.

Run with ``pytest tests/test_acceptance.py -v``; a pass/fail line per
criterion is printed in the terminal summary. Criteria 8 and 10 train
12-layer models and take several minutes on one CPU.
"""
import math
import time
from pathlib import Path

import numpy as np
import pytest

from dsmatt import initkit
from dsmatt import layers as L
from dsmatt import numcore as nc
from dsmatt.infer import bench_decode, decoder_step_macs, greedy_decode, init_state, step
from dsmatt.initkit import InitSpec
from dsmatt.losses import label_smoothed_loss
from dsmatt.model import ModelConfig, Transformer, count_params
from dsmatt.numcore import Rng, Tensor, grad_check
from dsmatt.probes import (GRADNORM_HEADER, RATIO_HEADER, attach_probes, gradnorm_rows,
                           measure_ratios, ratio_rows, write_csv)
from dsmatt.tasks import BOS, SyntheticTask, collate, fixed_batch
from dsmatt.trainer import TrainConfig, train

VARIANTS = ("baseline", "matt", "matt_self", "aan_original")
DEEP = dict(layers=12, dim=64, ffn_dim=256, heads=4, src_vocab=64, tgt_vocab=64)
COPY = SyntheticTask("copy", 64, 1, 12)
PROBE_SEED, MODEL_SEED = 7, 0

# end-to-end run: 12 layers, d=64, copy task over 61 symbols, lengths 1..12
E2E_TRAIN = dict(steps=5000, warmup=400, lr_scale=0.3, batch_tokens=256, eval_every=100,
                 eval_size=200, checkpoint_every=500, seed=1, target_acc=0.999)
E2E_HELD_OUT_SEED = 99


def probe_batch():
    return fixed_batch(COPY, Rng(PROBE_SEED), 3000)


def ratio_reports():
    batch = probe_batch()
    out = {}
    for policy in ("glorot", "ds_init"):
        model = Transformer.create(ModelConfig(**DEEP, init=policy), MODEL_SEED)
        out[policy] = measure_ratios(attach_probes(model), batch)
    return batch, out


def write_ratio_csvs(reports, directory: Path):
    directory.mkdir(parents=True, exist_ok=True)
    write_csv(directory / "ratios.csv", RATIO_HEADER,
              [row for p, r in reports.items() for row in ratio_rows(p, r)])
    write_csv(directory / "gradnorms.csv", GRADNORM_HEADER,
              [row for p, r in reports.items() for row in gradnorm_rows(p, r)])


@pytest.fixture(scope="module")
def reports(tmp_path_factory):
    t0 = time.perf_counter()
    batch, reps = ratio_reports()
    elapsed = time.perf_counter() - t0
    write_ratio_csvs(reps, tmp_path_factory.getbasetemp() / "analyze_1")
    return batch, reps, elapsed


def e2e_run(out_dir: Path):
    model = Transformer.create(ModelConfig(**DEEP, decoder="matt", init="ds_init"), MODEL_SEED)
    return model, train(model, COPY, TrainConfig(**E2E_TRAIN), out_dir=out_dir)


@pytest.fixture(scope="module")
def e2e(tmp_path_factory):
    out = tmp_path_factory.getbasetemp() / "e2e_1"
    t0 = time.perf_counter()
    model, result = e2e_run(out)
    return model, result, out, time.perf_counter() - t0


# ---------------------------------------------------------------- 1

def _w(rng, *shape, std=1.0):
    return Tensor(rng.normal(std, shape))


def sublayer_checks(d=32, heads=4):
    """(name, max relative error) for every input and parameter of each sublayer."""
    rng = Rng(11)
    x, h = _w(rng, 1, 3, d), _w(rng, 1, 4, d)
    proj = _w(rng, 1, 3, d)
    results = []

    def check(name, f, tensors):
        worst = max(grad_check(lambda t: nc.sum(nc.mul(f(), proj)), t) for t in tensors)
        results.append((name, worst))

    ln = L.LayerNormParams(Tensor(1 + 0.2 * rng.normal(1.0, d)), Tensor(0.2 * rng.normal(1.0, d)))
    check("layer_norm", lambda: L.layer_norm(x, ln), [x, ln.g, ln.b])
    ff = L.FfnParams(_w(rng, d, 2 * d, std=0.2), _w(rng, 2 * d, std=0.1), _w(rng, 2 * d, d, std=0.2), _w(rng, d, std=0.1))
    check("ffn", lambda: L.ffn(x, ff), [x, ff.w1, ff.b1, ff.w2, ff.b2])
    att = L.AttentionParams(*(_w(rng, d, d, std=d ** -0.5) for _ in range(4)), heads=heads)
    mask = L.causal_mask(3)
    check("self_attention", lambda: L.attention(x, x, att, mask), [x, att.wq, att.wk, att.wv, att.wo])
    check("cross_attention", lambda: L.attention(x, h, att), [x, h, att.wq, att.wk, att.wv, att.wo])
    sa = L.SAanParams(_w(rng, d, d, std=d ** -0.5), att.wo)
    check("saan", lambda: L.saan(x, sa), [x, sa.wv, sa.wo])
    check("merged_attention", lambda: L.merged_attention(x, h, sa, att), [x, h, sa.wv, att.wq, att.wk, att.wv, att.wo])
    aan = L.AanParams(_w(rng, d, d, std=0.2), _w(rng, d, std=0.1), _w(rng, d, d, std=0.2), _w(rng, d, std=0.1),
                      _w(rng, 2 * d, 2 * d, std=0.1), _w(rng, 2 * d, std=0.1))
    check("aan_original", lambda: L.aan_original(x, aan), [x, aan.w1, aan.b1, aan.w2, aan.b2, aan.wg, aan.bg])
    return results


def model_checks(d=32, heads=4, samples=3):
    out = []
    task = SyntheticTask("copy", 13, 1, 4)
    batch = collate(task.sample(Rng(5), 2))
    pick = np.random.default_rng(0)
    for layout in ("post_norm", "pre_norm"):
        for variant in VARIANTS:
            cfg = ModelConfig(layers=2, dim=d, ffn_dim=2 * d, heads=heads, src_vocab=13, tgt_vocab=13,
                              layout=layout, decoder=variant)
            m = Transformer.create(cfg, 3)
            f = lambda _: label_smoothed_loss(m.forward(batch), batch.tgt_out, 0.1, batch.tgt_valid)
            worst = 0.0
            for t in m.params.unique().values():
                idx = [tuple(int(pick.integers(s)) for s in t.shape) for _ in range(samples)]
                worst = max(worst, grad_check(f, t, indices=idx))
            out.append((f"{layout}/{variant}", worst))
    return out


def test_criterion_1_gradient_correctness(acceptance_report):
    t0 = time.perf_counter()
    results = sublayer_checks() + model_checks()
    elapsed = time.perf_counter() - t0
    worst_name, worst = max(results, key=lambda r: r[1])
    ok = worst < 1e-4 and elapsed < 60
    acceptance_report(1, ok, f"{len(results)} gradient checks at d=32, worst rel err {worst:.2e} "
                             f"({worst_name}), {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- 2

def test_criterion_2_beta_product_identity(reports, acceptance_report):
    _, reps, _ = reports
    extra = []
    batch = fixed_batch(COPY, Rng(3), 200)
    for variant in VARIANTS[1:]:
        m = Transformer.create(ModelConfig(**{**DEEP, "layers": 3}, decoder=variant), 1)
        extra += measure_ratios(attach_probes(m), batch).records
    records = [r for rep in reps.values() for r in rep.records] + extra
    worst = max(abs(r.beta - r.beta_ln * r.beta_rc) for r in records)
    ok = worst <= 1e-9
    acceptance_report(2, ok, f"{len(records)} probe records, max |beta - beta_ln*beta_rc| = {worst:.1e}")
    assert ok


# ---------------------------------------------------------------- 3

def test_criterion_3_ratio_directions(reports, acceptance_report):
    batch, reps, _ = reports
    g, ds = reps["glorot"].cells(), reps["ds_init"].cells()
    checks = {
        "glorot beta_ln < 1 (all cells)": all(c.beta_ln < 1 for c in g.values()),
        "glorot beta_rc > 1 (self, ffn)": all(c.beta_rc > 1 for (s, k), c in g.items() if k in ("self", "ffn")),
        "glorot dec cross beta < dec self beta": g[("dec", "cross")].beta < g[("dec", "self")].beta,
        "ds beta in [0.8, 1.3]": all(0.8 <= c.beta <= 1.3 for c in ds.values()),
        "ds var_r < glorot var_r": all(ds[k].var_r < g[k].var_r for k in g),
    }
    for k in g:
        print(f"  {k[0]} {k[1]:5s} glorot beta_ln={g[k].beta_ln:.3f} beta_rc={g[k].beta_rc:.3f} "
              f"beta={g[k].beta:.3f} var={g[k].var_r:.3f} | ds beta={ds[k].beta:.3f} var={ds[k].var_r:.3f}")
    failed = [k for k, v in checks.items() if not v]
    ok = not failed
    acceptance_report(3, ok, f"{batch.ntokens} target tokens; dec cross beta glorot "
                             f"{g[('dec', 'cross')].beta:.3f} -> ds {ds[('dec', 'cross')].beta:.3f}, "
                             f"var_r {g[('dec', 'cross')].var_r:.3f} -> {ds[('dec', 'cross')].var_r:.3f}"
                             + (f"; failed: {failed}" if failed else ""))
    assert ok


# ---------------------------------------------------------------- 4

def test_criterion_4_layer_gradient_norms(reports, acceptance_report):
    _, reps, elapsed = reports
    g, ds = reps["glorot"].grad_norms, reps["ds_init"].grad_norms
    rg = g[("dec", 1)] / g[("dec", 12)]
    rd = ds[("dec", 1)] / ds[("dec", 12)]
    ok = rg < 0.5 and rd >= 2 * rg and elapsed < 120
    acceptance_report(4, ok, f"dec layer1/layer12 norm ratio glorot {rg:.3f}, ds_init {rd:.3f} "
                             f"({rd / rg:.1f}x); both measurements {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- 5

def test_criterion_5_ds_init_statistics(acceptance_report):
    worst_var, worst_bound = 0.0, 0.0
    for depth in (1, 2, 4, 8, 12):
        spec = InitSpec("ds_init", 1000, 1000, layer_depth=depth, alpha=1.0)
        x = initkit.ds_init_sample(Rng(100 + depth), spec).data
        gamma = math.sqrt(6 / 2000)
        target = gamma ** 2 / (3 * depth)
        worst_var = max(worst_var, abs(x.var() / target - 1))
        ratio = initkit.ds_init_bound(1000, 1000, depth) / initkit.ds_init_bound(1000, 1000, 1)
        worst_bound = max(worst_bound, abs(ratio - 1 / math.sqrt(depth)))
    ok = worst_var < 0.02 and worst_bound <= 1e-15
    acceptance_report(5, ok, f"10^6 samples per depth: worst variance deviation {100 * worst_var:.2f}%, "
                             f"bound ratio error {worst_bound:.1e}")
    assert ok


# ---------------------------------------------------------------- 6

def test_criterion_6_matt_savings(acceptance_report):
    d = 64
    base = Transformer.create(ModelConfig(**DEEP, decoder="baseline"), 0)
    matt = Transformer.create(ModelConfig(**DEEP, decoder="matt"), 0)
    pats = lambda l: (f"dec.{l}.self.w*", f"dec.{l}.cross.w*", f"dec.{l}.matt.w*", f"dec.{l}.matt.saan_w*")
    cb = {count_params(base.params, *pats(l)) for l in range(1, 13)}
    cm = {count_params(matt.params, *pats(l)) for l in range(1, 13)}
    macs = [(decoder_step_macs(base.cfg, t, 12), decoder_step_macs(matt.cfg, t, 12)) for t in range(1, 65)]
    ok = cb == {8 * d * d} and cm == {5 * d * d} and all(m < b for b, m in macs)
    acceptance_report(6, ok, f"attention params per decoder layer {sorted(cb)} vs {sorted(cm)} "
                             f"(8d^2={8 * d * d}, 5d^2={5 * d * d}); step MACs at t=1 {macs[0][0]} vs {macs[0][1]}")
    assert ok


# ---------------------------------------------------------------- 7

def cache_error(seed: int, variant: str, layout: str, steps: int = 64) -> float:
    cfg = ModelConfig(layers=2, dim=32, ffn_dim=64, heads=4, src_vocab=20, tgt_vocab=20,
                      decoder=variant, layout=layout)
    m = Transformer.create(cfg, seed)
    rng = Rng(1000 + seed)
    src = rng.integers(3, 20, (1, 10))
    tgt = np.concatenate([[BOS], rng.integers(3, 20, steps - 1)])[None]
    state = init_state(m, src)
    h = m.encode(src)
    worst = 0.0
    for t in range(steps):
        logits, state = step(m, state, tgt[:, t])
        # full recompute over the prefix of length t+1
        full = m.decode_train(tgt[:, :t + 1], h, src != 0).data[:, -1]
        worst = max(worst, float(np.max(np.abs(logits - full))))
    return worst


def test_criterion_7_cache_equivalence(acceptance_report):
    worst = 0.0
    for seed in range(20):
        for variant in VARIANTS:
            layout = "post_norm" if seed % 2 == 0 else "pre_norm"
            worst = max(worst, cache_error(seed, variant, layout))
    ok = worst < 1e-9
    acceptance_report(7, ok, f"4 variants x 20 seeds x prefixes 1..64: max |incremental - full| = {worst:.1e}")
    assert ok


# ---------------------------------------------------------------- 8

def exact_match(model, seed=E2E_HELD_OUT_SEED, n=200):
    pairs = COPY.sample(Rng(seed), n)
    hyps = greedy_decode(model, collate(pairs).src)
    return float(np.mean([h.symbols() == list(tgt) for h, (_, tgt) in zip(hyps, pairs)]))


def test_criterion_8_end_to_end_training(e2e, acceptance_report, tmp_path_factory):
    model, result, _, elapsed = e2e
    best_step = next((s for s, a in result.evals if a >= 0.99), None)
    em = exact_match(model)
    # informational: Glorot post-norm baseline with the same step budget
    base = Transformer.create(ModelConfig(**DEEP, decoder="baseline", init="glorot"), MODEL_SEED)
    budget = dict(E2E_TRAIN, steps=result.steps_run, target_acc=None)
    ref = train(base, COPY, TrainConfig(**budget), out_dir=tmp_path_factory.getbasetemp() / "e2e_glorot")
    traj = ", ".join(f"{s}:{a:.3f}" for s, a in ref.evals[4::5])
    print(f"  ds_init+matt evals: {', '.join(f'{s}:{a:.3f}' for s, a in result.evals[4::5])}")
    print(f"  glorot baseline evals ({result.steps_run} steps): {traj}")
    ok = best_step is not None and best_step <= 5000 and em >= 0.99
    acceptance_report(8, ok, f"12-layer ds_init+matt: eval token acc >= 0.99 at step {best_step}, "
                             f"stopped at {result.steps_run} (acc {result.evals[-1][1]:.4f}), greedy exact match "
                             f"{em:.3f} on 200 held-out, {elapsed:.0f}s; glorot baseline same budget final acc "
                             f"{ref.evals[-1][1]:.4f} (informational)")
    assert ok


# ---------------------------------------------------------------- 9

def test_criterion_9_decode_throughput_ordering(acceptance_report):
    models = {v: Transformer.create(ModelConfig(**DEEP, decoder=v), 0)
              for v in ("baseline", "matt", "aan_original")}
    # 16 rows of length 24 (56 decode steps): long enough for the growing self-attention
    # cache to matter next to per-op overhead
    src = Rng(21).integers(3, 64, (16, 24))
    rows = {r.variant: r for r in bench_decode(models, src, reps=5, warmup=3)}
    tps = {k: r.tokens_per_second for k, r in rows.items()}
    ok = tps["matt"] > tps["aan_original"] > tps["baseline"]
    acceptance_report(9, ok, "tokens/s " + ", ".join(f"{k} {v:.0f} ({rows[k].speedup_vs_baseline:.2f}x)"
                                                     for k, v in tps.items()))
    assert ok


# ---------------------------------------------------------------- 10

def _same_files(a: Path, b: Path, names) -> list[str]:
    return [n for n in names if (a / n).read_bytes() != (b / n).read_bytes()]


def test_criterion_10_determinism(reports, e2e, acceptance_report, tmp_path_factory):
    base = tmp_path_factory.getbasetemp()
    _, reps2 = ratio_reports()
    write_ratio_csvs(reps2, base / "analyze_2")
    diff = _same_files(base / "analyze_1", base / "analyze_2", ["ratios.csv", "gradnorms.csv"])
    _, result, out1, _ = e2e
    out2 = base / "e2e_2"
    e2e_run(out2)
    names = ["metrics.csv", "evals.csv", "dynamics.csv"] + sorted(p.name for p in out1.glob("ckpt_*.npz"))
    diff += _same_files(out1, out2, names)
    ok = not diff
    acceptance_report(10, ok, f"repeated criteria 3/4 (ratios.csv, gradnorms.csv) and 8 "
                              f"({len(names)} files incl. checkpoints): "
                              + ("identical" if ok else f"differ: {diff}"))
    assert ok


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-v"]))
