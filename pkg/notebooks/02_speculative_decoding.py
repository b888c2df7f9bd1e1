"""
Speculative decoding is lossless
================================

A draft proposes gamma tokens, the target scores them in one pass, and
modified rejection sampling keeps a prefix. On tiny bigram pairs we can
enumerate every accept/reject event and compare the output distribution
with plain sampling from the target.
"""
import numpy as np

from specdraft.dist import tvd
from specdraft.model import BigramLM
from specdraft.oracle import exact_ar_dist, exact_expected_tau, exact_sd_dist, max_abs_diff
from specdraft.specdec import BlockConfig, SpeedupConfig, block_efficiency, mbsu, sd_generate

rng = np.random.default_rng(7)
V = 3
target = BigramLM.from_probs(rng.dirichlet(np.full(V, 0.3), size=V))
draft = BigramLM.from_probs(rng.dirichlet(np.full(V, 0.3), size=V))

ar = exact_ar_dist(target, [0], 3)
sd = exact_sd_dist(target, draft, [0], gamma=2, length=3)
print("sequences:", len(ar), " largest gap:", max_abs_diff(ar, sd))

# one block at gamma = 1 emits 2 - tvd(p, q) tokens on average
p, q = draft.probs[0], target.probs[0]
print("E[tau] at gamma=1:", exact_expected_tau(target, draft, [0], 1), " 2 - tvd:", 2 - tvd(p, q))

# a closer draft accepts more; block efficiency tells the story
for mix in (0.0, 0.5, 0.9, 1.0):
    d = BigramLM.from_probs((1 - mix) * draft.probs + mix * target.probs)
    stats = []
    for s in range(200):
        stats += sd_generate(target, d, [0], BlockConfig(3), 40, seed=s).stats
    tau = block_efficiency(stats)
    print(f"mix={mix:.1f} tau={tau:.3f} mbsu(c=0.0164)={mbsu(tau, SpeedupConfig(0.0164), 3):.3f}")
