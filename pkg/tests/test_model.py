import math

import numpy as np
import pytest

from conftest import fd_check
from specdraft.checkpoint import Checkpoint, from_bytes, load_checkpoint, save_checkpoint, to_bytes
from specdraft.dist import SamplingConfig, make_rng, softmax
from specdraft.errors import TrainingError, ValidationError
from specdraft.model import (DRAFT_CONFIG, TARGET_CONFIG, BigramLM, ToyLMConfig, TransformerLM,
                             backward, ce_loss_and_grad, count_params, forward, generate,
                             next_token_dist, param_shapes, sgd_step)


def test_param_count_formula():
    for cfg in (TARGET_CONFIG, DRAFT_CONFIG, ToyLMConfig(vocab_size=5, context_len=3, layers=1,
                                                          heads=1, hidden_dim=2, intermediate_dim=3)):
        assert count_params(cfg) == sum(int(np.prod(s)) for _, s in param_shapes(cfg))
        assert TransformerLM.init(cfg).n_params == count_params(cfg)
    assert count_params(DRAFT_CONFIG) / count_params(TARGET_CONFIG) < 0.05


def test_config_validation():
    with pytest.raises(ValidationError):
        ToyLMConfig(hidden_dim=10, heads=4)
    with pytest.raises(ValidationError):
        ToyLMConfig(vocab_size=1)
    with pytest.raises(ValidationError):
        ToyLMConfig(context_len=1)


def test_forward_rejects_overlong(small_transformer):
    with pytest.raises(ValidationError):
        forward(small_transformer, np.zeros(11, dtype=int))


def test_forward_deterministic(small_cfg):
    toks = [1, 5, 3, 7, 2]
    a = forward(TransformerLM.init(small_cfg, seed=11), toks)
    b = forward(TransformerLM.init(small_cfg, seed=11), toks)
    assert a.tobytes() == b.tobytes()


def test_causality(small_transformer):
    rng = np.random.default_rng(0)
    toks = rng.integers(0, 12, size=9)
    base = forward(small_transformer, toks)
    for t in range(8):
        mutated = toks.copy()
        mutated[t + 1:] = rng.integers(0, 12, size=8 - t)
        np.testing.assert_array_equal(forward(small_transformer, mutated)[:t + 1], base[:t + 1])


def test_batched_forward_matches_single(small_transformer):
    toks = np.array([[1, 2, 3, 4], [5, 6, 7, 8]])
    out = forward(small_transformer, toks)
    for b in range(2):
        np.testing.assert_allclose(out[b], forward(small_transformer, toks[b]), atol=1e-13)


def test_backward_zero_dlogits(small_transformer):
    g = backward(small_transformer, [1, 2, 3], np.zeros((3, 12)))
    assert all(np.all(v == 0) for v in g.values())


def test_backward_shape_mismatch(small_transformer):
    with pytest.raises(ValidationError):
        backward(small_transformer, [1, 2, 3], np.zeros((2, 12)))


def test_transformer_backward_matches_finite_differences(small_transformer):
    rng = np.random.default_rng(1)
    toks = rng.integers(0, 12, size=(2, 6))
    dl = rng.normal(size=(2, 6, 12))
    worst = fd_check(small_transformer, toks, dl)
    assert max(worst.values()) <= 1e-4, worst


def test_bigram_logits_are_log_counts():
    counts = np.array([[1.0, 3.0], [2.0, 2.0]])
    m = BigramLM.from_counts(counts)
    np.testing.assert_allclose(forward(m, [0, 1, 0]), np.log(counts / counts.sum(1, keepdims=True))[[0, 1, 0]])


def test_uniform_bigram_gives_uniform_dists():
    m = BigramLM.uniform(5)
    np.testing.assert_allclose(m.position_dists([0, 3, 4]), np.full((3, 5), 0.2))


def test_bigram_next_token_dist_is_stored_row():
    rng = np.random.default_rng(2)
    P = rng.dirichlet(np.ones(4), size=4)
    m = BigramLM.from_probs(P)
    for last in range(4):
        assert next_token_dist(m, [0, last]).tobytes() == P[last].tobytes()


def test_bigram_ce_gradient_is_p_minus_onehot():
    rng = np.random.default_rng(3)
    m = BigramLM(BigramLM.uniform(4).config, {"table": rng.normal(size=(4, 4))})
    toks = [2, 1]
    rep = ce_loss_and_grad(m, toks)
    g = backward(m, toks, rep.dlogits)["table"]
    expected = np.zeros((4, 4))
    expected[2] = softmax(m.params["table"][2]) - np.eye(4)[1]
    np.testing.assert_allclose(g, expected, atol=1e-15)


def test_ce_uniform_logits():
    rep = ce_loss_and_grad(BigramLM.uniform(7), [0, 3, 5, 1])
    assert rep.loss == pytest.approx(math.log(7), abs=1e-12)


def test_ce_one_hot_correct_model_has_near_zero_loss():
    table = np.full((3, 3), -50.0)
    table[0, 1] = table[1, 2] = table[2, 0] = 50.0
    m = BigramLM(BigramLM.uniform(3).config, {"table": table})
    assert ce_loss_and_grad(m, [0, 1, 2, 0]).loss < 1e-30


def test_ce_dlogits_matches_finite_differences(small_transformer):
    toks = [3, 1, 4, 1, 5, 9, 2]
    logits = forward(small_transformer, toks)
    rep = ce_loss_and_grad(small_transformer, toks)

    def loss(z):
        p = softmax(z[:-1])
        return -np.mean(np.log(p[np.arange(6), toks[1:]]))

    h = 1e-6
    fd = np.zeros_like(logits)
    for idx in np.ndindex(*logits.shape):
        zp, zm = logits.copy(), logits.copy()
        zp[idx] += h
        zm[idx] -= h
        fd[idx] = (loss(zp) - loss(zm)) / (2 * h)
    assert np.max(np.abs(fd - rep.dlogits)) / np.max(np.abs(rep.dlogits)) <= 1e-6
    np.testing.assert_allclose(rep.dlogits.sum(axis=-1), 0, atol=1e-9)


def test_sgd_step_examples(small_transformer):
    g = {k: np.ones_like(v) for k, v in small_transformer.params.items()}
    same = sgd_step(small_transformer, g, 0.0)
    for k in g:
        np.testing.assert_array_equal(same.params[k], small_transformer.params[k])

    m = BigramLM(BigramLM.uniform(2).config, {"table": np.zeros((2, 2))})
    g = {"table": np.array([[0.3, 0.0], [0.0, 0.0]])}
    assert sgd_step(m, g, 0.5, clip_norm=None).params["table"][0, 0] == pytest.approx(-0.15)

    g = {"table": np.array([[3.0, 4.0], [0.0, 0.0]])}  # norm 5
    upd = m.params["table"] - sgd_step(m, g, 0.1, clip_norm=1.0).params["table"]
    assert np.linalg.norm(upd) == pytest.approx(0.1 * 1.0)


def test_sgd_step_nonfinite_reports_step():
    m = BigramLM.uniform(2)
    with pytest.raises(TrainingError) as exc:
        sgd_step(m, {"table": np.full((2, 2), np.nan)}, 0.1, step=17)
    assert exc.value.step == 17


def test_next_token_dist_configs(small_transformer):
    ctx = [1, 2, 3]
    z = forward(small_transformer, ctx)[-1]
    greedy = next_token_dist(small_transformer, ctx, SamplingConfig(0.0))
    assert greedy[np.argmax(z)] == 1 and greedy.sum() == 1
    np.testing.assert_allclose(next_token_dist(small_transformer, ctx), softmax(z))
    d = next_token_dist(small_transformer, ctx, SamplingConfig(0.6, 0.9))
    assert d.sum() == pytest.approx(1) and np.count_nonzero(d) <= 12


def test_checkpoint_round_trip_is_bit_exact(tmp_path, small_transformer):
    ck = Checkpoint(small_transformer, 42, make_rng(5).bit_generator.state, "tvdpp", [1.5, 0.5])
    path = save_checkpoint(ck, tmp_path / "m.ckpt")
    back = load_checkpoint(path)
    assert back.step == 42 and back.loss_kind == "tvdpp" and back.history == [1.5, 0.5]
    toks = [1, 2, 3, 4, 5]
    assert forward(back.model, toks).tobytes() == forward(small_transformer, toks).tobytes()
    rng = make_rng(0)
    rng.bit_generator.state = back.rng_state
    assert rng.random() == make_rng(5).random()
    assert to_bytes(back) == to_bytes(ck)


def test_checkpoint_bigram_with_zero_rows(tmp_path):
    m = BigramLM.from_probs([[1.0, 0.0], [0.5, 0.5]])
    back = from_bytes(to_bytes(Checkpoint(m)))
    np.testing.assert_array_equal(back.model.probs, m.probs)


def test_checkpoint_errors(tmp_path):
    with pytest.raises(FileNotFoundError, match="missing.ckpt"):
        load_checkpoint(tmp_path / "missing.ckpt")
    with pytest.raises(ValidationError):
        from_bytes(b"garbage!" + bytes(20))


def test_generate_stops_at_eos():
    P = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
    out = generate(BigramLM.from_probs(P), [1], SamplingConfig(), 10, make_rng(0), eos=0)
    assert out == [2, 0]
