"""
Distributions, sampling transforms and distances
================================================

Everything in the library passes probability vectors around as plain
float64 arrays. This script walks through the transforms applied before
sampling and the two distances the losses are built on.
"""
import numpy as np

from specdraft.dist import (KLDirection, SamplingConfig, apply_temperature, kld, make_dist,
                            make_rng, residual_dist, sample_many, top_p_filter, transform, tvd,
                            tvd_via_min)

logits = np.array([2.0, 1.0, 0.5, -1.0])

# temperature sharpens (T < 1) or flattens (T > 1); T = 0 is a one-hot argmax
for T in (0.0, 0.5, 1.0, 2.0):
    print(f"T={T:<4}", np.round(apply_temperature(logits, T), 4))

# nucleus filtering keeps the smallest top set reaching the requested mass
p = apply_temperature(logits, 1.0)
print("top-p 0.8:", np.round(top_p_filter(p, 0.8), 4))
print("T=0.6, top-p 0.9:", np.round(transform(logits, SamplingConfig(0.6, 0.9)), 4))

# TVD two ways, and KLD in both directions
q = make_dist([1, 3, 3, 1])
print("tvd", tvd(p, q), "1 - sum min", tvd_via_min(p, q))
print("kld forward", kld(p, q, KLDirection.FORWARD), "backward", kld(p, q, KLDirection.BACKWARD))

# the residual distribution used on rejection: normalized max(q - p, 0)
print("residual", np.round(residual_dist(p, q), 4))

# empirical frequencies from a counter-based stream
draws = sample_many(p, make_rng(0), 200_000)[0]
print("empirical", np.round(np.bincount(draws, minlength=4) / draws.size, 4))
print("exact    ", np.round(p, 4))
