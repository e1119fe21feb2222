"""
Merged attention: one sublayer where the baseline decoder has two
==================================================================

The merged sublayer adds a causal running average of ``S W_v`` to the
encoder-decoder attention heads and projects the sum with one shared
``W_o``. This script checks the structure, the parameter saving, the
constant-size decoding state, and how decoding speed compares.
"""
import numpy as np

from dsmatt import ModelConfig, Rng, Transformer, count_params
from dsmatt import layers as L
from dsmatt.infer import bench_decode, decoder_step_macs, init_state, step
from dsmatt.numcore import Tensor
from dsmatt.tasks import BOS

d = 64
rng = Rng(0)

# %% The branch sum goes through one shared projection
cross = L.AttentionParams(*(Tensor(rng.normal(d ** -0.5, (d, d))) for _ in range(4)), heads=4)
saan = L.SAanParams(Tensor(rng.normal(d ** -0.5, (d, d))), cross.wo)
s, h = Tensor(rng.normal(1.0, (5, d))), Tensor(rng.normal(1.0, (7, d)))
merged = L.merged_attention(s, h, saan, cross).data
separate = L.saan(s, saan).data + L.attention(s, h, cross).data
print(f"merged vs sum of branches: max diff {np.abs(merged - separate).max():.1e}")

# %% Parameter counts per decoder layer
models = {v: Transformer.create(ModelConfig(layers=12, dim=d, ffn_dim=4 * d, heads=4, decoder=v), 0)
          for v in ("baseline", "matt", "matt_self", "aan_original")}
for name, m in models.items():
    attn = count_params(m.params, "dec.1.self.w*", "dec.1.cross.w*", "dec.1.matt.*")
    print(f"{name:13s} decoder layer 1 attention-side params {attn:6d} ({attn / d**2:.2f} d^2), "
          f"model total {count_params(m.params)}")

# %% Decoding state
src = rng.integers(3, 64, (1, 10))
for name in ("baseline", "matt"):
    m, state = models[name], init_state(models[name], src)
    sizes = []
    for t in range(20):
        _, state = step(m, state, np.array([BOS if t == 0 else 5]))
        sizes.append(state.state_size())
    print(f"{name:9s} self-side cache after 1, 10, 20 steps: {sizes[0]}, {sizes[9]}, {sizes[19]} scalars")

# %% Work per step and wall clock
for name, m in models.items():
    print(f"{name:13s} multiply-accumulates at step 20: {decoder_step_macs(m.cfg, 20, 12):,}")
rows = bench_decode(models, rng.integers(3, 64, (16, 24)), reps=3)
for r in rows:
    print(f"{r.variant:13s} {r.tokens_per_second:8.0f} tokens/s  speedup {r.speedup_vs_baseline:.2f}x")
