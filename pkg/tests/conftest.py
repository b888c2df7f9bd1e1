import time

import numpy as np
import pytest

from specdraft.model import BigramLM, ToyLMConfig, TransformerLM

ACCEPTANCE_LINES = []


class ScriptedRng:
    """Stands in for a Generator, replaying fixed uniforms."""

    def __init__(self, draws):
        self.draws = list(draws)

    def random(self, size=None):
        assert size is None
        return self.draws.pop(0)


def random_dist(rng, V, conc=1.0):
    return rng.dirichlet(np.full(V, conc))


def random_bigram(rng, V, conc=0.7):
    return BigramLM.from_probs(rng.dirichlet(np.full(V, conc), size=V))


@pytest.fixture
def small_cfg():
    return ToyLMConfig(vocab_size=12, context_len=10, layers=2, heads=2, hidden_dim=16,
                       intermediate_dim=24)


@pytest.fixture
def small_transformer(small_cfg):
    m = TransformerLM.init(small_cfg, seed=3)
    # a non-trivial head so gradients through the body are not tiny
    m.params["lm_head"] = np.random.default_rng(4).normal(0, 0.5, m.params["lm_head"].shape)
    return m


@pytest.fixture(scope="session")
def toy_experiment():
    """Train the default toy target, then 3 seeds x 3 losses of the pipeline.

    Shared by the desk-scale acceptance criteria and the directional
    pipeline checks; takes several minutes.
    """
    from specdraft.pipeline import (ToySetup, default_tasks, eval_sweep, finetune,
                                    held_out_tvd, heldout_sequences, prepare_draft,
                                    train_target)

    t0 = time.perf_counter()
    setup = ToySetup()
    target = train_target(setup.target_config, seed=0, steps=setup.target_steps).model
    tasks = default_tasks(n_prompts=setup.n_eval_prompts)
    held = heldout_sequences(target, setup.n_heldout)
    out = {"setup": setup, "target": target, "seeds": {}, "random_draft_tau": {}}
    for seed in (0, 1, 2):
        run = prepare_draft(setup, target, seed)
        res = {"base_ckpt": run.base,
               "base": eval_sweep([run.base], target, tasks, setup.gammas, (seed,)),
               "base_tvd": held_out_tvd(run.base.model, target, held),
               "final": {}, "final_tvd": {}, "ckpt0_tvd": {}}
        for loss in setup.losses:
            cks = finetune(run.base, target, run.dataset, run.corpus, loss, setup.finetune_steps,
                           setup.mix_ratio, setup.batch_size, n_checkpoints=setup.n_checkpoints,
                           seed=seed + 500)
            res["ckpt0_tvd"][loss] = held_out_tvd(cks[0].model, target, held)
            res["final_tvd"][loss] = held_out_tvd(cks[-1].model, target, held)
            res["final"][loss] = eval_sweep([cks[-1]], target, tasks, setup.gammas, (seed,),
                                            loss_kind=loss)
        rand = TransformerLM.init(setup.draft_config, seed=seed + 100)
        out["random_draft_tau"][seed] = eval_sweep([rand], target, tasks[:1], (3,), (seed,))[0].tau
        out["seeds"][seed] = res
    out["elapsed"] = time.perf_counter() - t0
    return out


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def tie_free_instance(rng, V, gap=1e-3, scale=1.5):
    """Random draft logits and target q with every |p(x) - q(x)| above ``gap``."""
    from specdraft.dist import softmax
    while True:
        z = rng.normal(0, scale, V)
        q = rng.dirichlet(np.ones(V))
        if np.min(np.abs(softmax(z) - q)) > gap:
            return z, q


def estimator_moments(z, q, n, reps, seed):
    """Per-coordinate mean and variance of the sampled TVD++ and REINFORCE
    estimators over ``reps`` independent draws of ``n`` samples each.

    Rows are independent replicas, so TVD++ normalizes per row.
    """
    from specdraft.dist import make_rng
    from specdraft.losses import tvd_reinforce_grad, tvdpp_grad
    Z = np.tile(z, (reps, 1))
    Q = np.tile(q, (reps, 1))
    w = np.ones(reps)
    pp = tvdpp_grad(Z, Q, "sampled", n, make_rng(seed), population="position", weights=w).dlogits
    rf = tvd_reinforce_grad(Z, Q, n, make_rng(seed), weights=w).dlogits
    return (pp.mean(0), pp.var(0, ddof=1)), (rf.mean(0), rf.var(0, ddof=1))


def fd_check(model, tokens, dlogits, step=1e-4, floor=1e-6):
    """Worst relative error of backward() against central differences, per tensor."""
    grads = model.backward(tokens, dlogits)
    worst = {}
    for name, P in model.params.items():
        errs = []
        for idx in np.ndindex(*P.shape):
            old = P[idx]
            P[idx] = old + step
            fp = float(np.sum(model.forward(tokens) * dlogits))
            P[idx] = old - step
            fm = float(np.sum(model.forward(tokens) * dlogits))
            P[idx] = old
            fd = (fp - fm) / (2 * step)
            an = grads[name][idx]
            errs.append(abs(fd - an) / max(abs(fd), abs(an), floor))
        worst[name] = max(errs)
    return worst
