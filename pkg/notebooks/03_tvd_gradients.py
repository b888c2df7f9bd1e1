"""
TVD as a policy gradient
========================

The gradient of TVD through the softmax equals the full-support
expectation of a REINFORCE estimator whose reward is 1 where the target
puts more mass than the draft. TVD++ centres and scales that reward.
"""
import numpy as np

from specdraft.dist import make_rng, softmax, tvd
from specdraft.losses import (reward, score_function_expectation, tvd_loss_and_grad,
                              tvd_reinforce_grad, tvdpp_grad)

rng = np.random.default_rng(3)
z = rng.normal(0, 1.5, 8)
q = rng.dirichlet(np.ones(8))
p = softmax(z)

exact = tvd_loss_and_grad(z, q).dlogits[0]
expect = score_function_expectation(p[None], -reward(p, q)[None])[0]
print("max |analytic - expectation|:", np.abs(exact - expect).max())

# sampled estimators: both unbiased up to scale, variance differs
reps, n = 500, 256
Z, Q = np.tile(z, (reps, 1)), np.tile(q, (reps, 1))
rf = tvd_reinforce_grad(Z, Q, n, make_rng(0), weights=np.ones(reps)).dlogits
pp, st = tvdpp_grad(Z, Q, "sampled", n, make_rng(0), population="position",
                    weights=np.ones(reps), return_stats=True)
pp = pp.dlogits
print("REINFORCE mean error:", np.abs(rf.mean(0) - exact).max())
print("raw variance      REINFORCE %.2e  TVD++ %.2e" % (rf.var(0).sum(), pp.var(0).sum()))
rel = lambda g: g.var(0).sum() / (g.mean(0) @ g.mean(0))
print("relative variance REINFORCE %.2e  TVD++ %.2e" % (rel(rf), rel(pp)))

# gradient descent on the logits alone drives TVD down
for name, fn in [("tvd", lambda v: tvd_loss_and_grad(v, q)), ("tvd++", lambda v: tvdpp_grad(v, q))]:
    v = z.copy()
    for _ in range(200):
        v -= 0.5 * fn(v).dlogits[0]
    print(f"{name}: tvd {tvd(p, q):.4f} -> {tvd(softmax(v), q):.4f}")
