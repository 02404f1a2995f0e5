"""
Averaging independently faulted copies
======================================

Run the toy decoder clean, faulted, and with several redundancy policies,
and compare the logit error against the clean model. Runs share keys, so
every policy sees the same replica 0 and differences are paired.
"""

import numpy as np

from cimfault import (
    CleanProvider,
    ModelConfig,
    NoiseSpec,
    RedundancySpec,
    SafSpec,
    forward,
    init_toy_weights,
    make_provider,
    shallow_redundancy,
)
from cimfault.harness import compare_outputs, run_key

cfg = ModelConfig()
weights = init_toy_weights(cfg, seed=0)
tokens = np.random.default_rng(1).integers(0, cfg.vocab, size=24)
clean = forward(tokens, weights, CleanProvider(), cfg)

policies = {
    "none": RedundancySpec.none(),
    "attention x4": RedundancySpec.attention(4),
    "ffn x4": RedundancySpec.ffn(4),
    "shallow x4": shallow_redundancy(cfg),
}

# %%
# 20 fault draws per policy at sigma = 0.02, p = 0.01.
n_runs = 20
for name, red in policies.items():
    errs = []
    for r in range(n_runs):
        provider = make_provider(NoiseSpec(0.02), SafSpec(0.01), run_key(0, r), red)
        errs.append(compare_outputs(clean, forward(tokens, weights, provider, cfg)).rel_logit_err)
    print(f"{name:>13}: rel logit err {np.mean(errs):.4f} +- {np.std(errs, ddof=1):.4f}")

# %%
# On a single linear layer the averaged error shrinks like 1/sqrt(k).
from cimfault import FaultedProvider, RngKey  # noqa: E402
from cimfault.model import linear  # noqa: E402

W = weights.layers[0].wq
x = np.random.default_rng(2).standard_normal((1, cfg.d_model)).astype(np.float32)
y0 = linear(x, W)
err = np.array([
    [linear(x, FaultedProvider(NoiseSpec(0.02), SafSpec(0.0), RngKey(3, ("draw", d))).matrix("wq", W, 0, r)) - y0
     for r in range(4)]
    for d in range(500)
])[:, :, 0, :]
for k in (1, 2, 4):
    print(f"k={k}: error std ratio {err[:, :k].mean(axis=1).std() / err[:, 0].std():.3f}"
          f" (1/sqrt(k) = {k ** -0.5:.3f})")
