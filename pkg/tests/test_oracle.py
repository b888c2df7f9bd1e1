import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_bigram
from specdraft.dist import SamplingConfig, tvd
from specdraft.errors import InstanceTooLarge, ValidationError
from specdraft.model import BigramLM
from specdraft.oracle import exact_ar_dist, exact_expected_tau, exact_sd_dist, max_abs_diff
from specdraft.specdec import BlockConfig, block_efficiency, sd_generate


def test_ar_one_hot_bigram():
    P = np.array([[0, 1, 0], [0, 0, 1], [1, 0, 0]], dtype=float)
    assert exact_ar_dist(BigramLM.from_probs(P), [0], 3) == {(1, 2, 0): 1.0}


def test_ar_uniform_bigram():
    d = exact_ar_dist(BigramLM.uniform(2), [0], 2)
    assert d == {(0, 0): 0.25, (0, 1): 0.25, (1, 0): 0.25, (1, 1): 0.25}


def test_ar_hand_enumeration():
    P = np.array([[0.5, 0.25, 0.25], [0.1, 0.6, 0.3], [0.0, 0.2, 0.8]])
    d = exact_ar_dist(BigramLM.from_probs(P), [2], 2)
    hand = {(1, 0): 0.2 * 0.1, (1, 1): 0.2 * 0.6, (1, 2): 0.2 * 0.3,
            (2, 1): 0.8 * 0.2, (2, 2): 0.8 * 0.8}
    assert set(d) == set(hand)
    for k in hand:
        assert d[k] == pytest.approx(hand[k], abs=1e-15)


def test_sd_draft_equals_target():
    m = random_bigram(np.random.default_rng(0), 3)
    for g in (1, 2, 3):
        assert max_abs_diff(exact_sd_dist(m, m, [1], g, 3), exact_ar_dist(m, [1], 3)) < 1e-15


def test_sd_disjoint_one_hot_follows_target():
    target = BigramLM.from_probs(np.array([[0, 1.0], [1.0, 0]]))
    draft = BigramLM.from_probs(np.array([[1.0, 0], [0, 1.0]]))
    assert exact_sd_dist(target, draft, [0], 2, 3) == {(1, 0, 1): 1.0}
    assert exact_expected_tau(target, draft, [0], 2) == 1.0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 4), st.integers(1, 3), st.integers(1, 2))
def test_sd_is_lossless(seed, V, length, gamma):
    rng = np.random.default_rng(seed)
    t, d = random_bigram(rng, V), random_bigram(rng, V)
    prompt = [int(rng.integers(V))]
    sd = exact_sd_dist(t, d, prompt, gamma, length)
    assert abs(sum(sd.values()) - 1) < 1e-9
    assert max_abs_diff(sd, exact_ar_dist(t, prompt, length)) < 1e-9


def test_sd_lossless_under_sampling_transforms():
    rng = np.random.default_rng(1)
    t, d = random_bigram(rng, 4), random_bigram(rng, 4)
    s = SamplingConfig(0.7, 0.8)
    sd = exact_sd_dist(t, d, [2], 2, 3, s, SamplingConfig(1.3))
    assert max_abs_diff(sd, exact_ar_dist(t, [2], 3, s)) < 1e-9


def test_gamma_one_closed_form():
    rng = np.random.default_rng(2)
    for _ in range(50):
        t, d = random_bigram(rng, 5), random_bigram(rng, 5)
        x = int(rng.integers(5))
        tau = exact_expected_tau(t, d, [x], 1)
        assert tau == pytest.approx(2 - tvd(d.probs[x], t.probs[x]), abs=1e-12)


def test_draft_equals_target_tau():
    m = random_bigram(np.random.default_rng(3), 4)
    assert exact_expected_tau(m, m, [0], 3) == pytest.approx(4, abs=1e-12)


def test_monte_carlo_tau_matches_exact():
    rng = np.random.default_rng(4)
    t, d = random_bigram(rng, 4), random_bigram(rng, 4)
    exact = exact_expected_tau(t, d, [1], 2)
    # one block per run: max_tokens = gamma + 1 never cuts the first block short
    em = np.array([sd_generate(t, d, [1], BlockConfig(2), 3, seed=s).stats[0].tokens_emitted
                   for s in range(20_000)])
    se = em.std(ddof=1) / np.sqrt(em.size)
    assert abs(em.mean() - exact) <= 4 * se


def test_tau_monotone_in_tvd():
    # q fixed, p moves away from q along a line: tau = 2 - tvd decreases
    q = np.array([0.6, 0.3, 0.1])
    far = np.array([0.0, 0.1, 0.9])
    target = BigramLM.from_probs(np.tile(q, (3, 1)))
    prev_tvd, prev_tau = -1, 3
    for a in np.linspace(0, 1, 11):
        p = (1 - a) * q + a * far
        tau = exact_expected_tau(target, BigramLM.from_probs(np.tile(p, (3, 1))), [0], 1)
        assert tvd(p, q) >= prev_tvd and tau <= prev_tau + 1e-15
        prev_tvd, prev_tau = tvd(p, q), tau


def test_size_refusal():
    with pytest.raises(InstanceTooLarge):
        exact_ar_dist(BigramLM.uniform(10), [0], 6)
    with pytest.raises(InstanceTooLarge):
        exact_sd_dist(BigramLM.uniform(10), BigramLM.uniform(10), [0], 2, 6)
    with pytest.raises(InstanceTooLarge):
        exact_expected_tau(BigramLM.uniform(20), BigramLM.uniform(20), [0], 4)


def test_rejects_transformers(small_transformer):
    with pytest.raises(ValidationError):
        exact_ar_dist(small_transformer, [0], 2)
    with pytest.raises(ValidationError):
        exact_sd_dist(BigramLM.uniform(3), BigramLM.uniform(4), [0], 1, 2)
