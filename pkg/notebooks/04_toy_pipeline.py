"""
The three phases on a toy pair
==============================

Train a small target, pretrain a draft on corpus text only, let the
target answer seed prompts, then distill with each loss and watch block
efficiency on held-out prompts. The sizes here are cut down so the
script finishes in a few minutes; the test suite runs the full toy setup.
"""
import time

import numpy as np

from specdraft import synthetic
from specdraft.model import ToyLMConfig, TransformerLM
from specdraft.pipeline import (default_tasks, eval_sweep, finetune, generate_distillation_dataset,
                                held_out_tvd, heldout_sequences, make_synthetic_corpus, pretrain,
                                train_target)
from specdraft.vocab import decode

t0 = time.time()
target = train_target(ToyLMConfig(hidden_dim=64, intermediate_dim=176, layers=2, heads=4),
                      steps=400).model
print(f"target ready ({time.time() - t0:.0f}s)")

corpus = make_synthetic_corpus(0, 100, 256)
print("corpus sample:", decode(corpus.chunks[0][:80]))
draft_cfg = ToyLMConfig(layers=2, heads=2, hidden_dim=32, intermediate_dim=88)
base = pretrain(TransformerLM.init(draft_cfg, seed=100), corpus, 300, seed=200)
print(f"draft pretrained, loss {np.mean(base.history[-20:]):.3f}")

prompts = synthetic.make_prompts("qa", 24, 300)
ds = generate_distillation_dataset(target, prompts, seed=400)
print(f"{len(ds)} distillation samples, e.g.", repr(decode(ds[1].tokens)))

tasks = default_tasks(n_prompts=8)
held = heldout_sequences(target, 16)
base_tau = eval_sweep([base], target, tasks[:1], (3,))[0].tau
print(f"base: tau {base_tau:.3f}, held-out tvd {held_out_tvd(base.model, target, held):.3f}")
for loss in ("kld", "tvd", "tvdpp"):
    cks = finetune(base, target, ds, corpus, loss, steps=300, n_checkpoints=3, seed=500)
    taus = [r.tau for r in eval_sweep(cks, target, tasks[:1], (3,))]
    print(f"{loss:6s} tau by checkpoint {np.round(taus, 3)}, "
          f"held-out tvd {held_out_tvd(cks[-1].model, target, held):.3f}")
print(f"done in {time.time() - t0:.0f}s")
