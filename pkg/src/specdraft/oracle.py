"""Exact enumeration oracles for tabular (bigram) model pairs.

Sequence distributions are dicts mapping a tuple of generated tokens to its
probability. Only ``BigramLM`` models are accepted so every conditional is
an exact stored row.
"""
import numpy as np

from .dist import SamplingConfig, residual_dist
from .errors import InstanceTooLarge, ValidationError
from .model import BigramLM

MAX_OUTCOMES = 10**5


def _check(models, length=None):
    for m in models:
        if not isinstance(m, BigramLM):
            raise ValidationError("oracles accept bigram models only")
    V = models[0].config.vocab_size
    if any(m.config.vocab_size != V for m in models):
        raise ValidationError("vocabulary sizes differ")
    if length is not None and V ** length > MAX_OUTCOMES:
        raise InstanceTooLarge(f"vocab^len = {V}^{length} exceeds {MAX_OUTCOMES}")
    return V


def _row(model, last, sampling):
    return model.position_dists([last], sampling)[0]


def exact_ar_dist(target, prompt, length, sampling=SamplingConfig()):
    """Distribution over the next ``length`` tokens under plain sampling."""
    _check([target], length)
    out = {}

    def walk(seq, prob):
        if len(seq) == length:
            out[tuple(seq)] = out.get(tuple(seq), 0.0) + prob
            return
        last = seq[-1] if seq else prompt[-1]
        row = _row(target, last, sampling)
        for x in np.flatnonzero(row > 0):
            walk(seq + [int(x)], prob * row[x])

    walk([], 1.0)
    return out


def exact_sd_dist(target, draft, prompt, gamma, length, target_sampling=SamplingConfig(),
                  draft_sampling=SamplingConfig()):
    """Distribution of the first ``length`` tokens emitted by SD.

    Integrates every proposal, acceptance and rejection event of every block
    analytically. Once ``length`` tokens are fixed the remaining events are
    summed out (their probabilities total one).
    """
    _check([target, draft], length)
    if gamma < 1:
        raise ValidationError("gamma must be >= 1")
    out = {}

    def emit(seq, prob):
        key = tuple(seq[:length])
        out[key] = out.get(key, 0.0) + prob

    def block(seq, prob):
        if len(seq) >= length:
            emit(seq, prob)
            return
        last = seq[-1] if seq else prompt[-1]
        propose(seq, [], last, prob)

    def propose(seq, accepted, last, prob):
        # `last` is the token the next draft/target rows condition on
        if len(seq) + len(accepted) >= length:
            emit(seq + accepted, prob)
            return
        if len(accepted) == gamma:
            q = _row(target, last, target_sampling)
            for y in np.flatnonzero(q > 0):
                block(seq + accepted + [int(y)], prob * q[y])
            return
        p = _row(draft, last, draft_sampling)
        q = _row(target, last, target_sampling)
        res = None
        for x in np.flatnonzero(p > 0):
            a = min(1.0, q[x] / p[x])
            if a > 0:
                propose(seq, accepted + [int(x)], int(x), prob * p[x] * a)
            if a < 1:
                if res is None:
                    res = residual_dist(p, q)
                w = prob * p[x] * (1.0 - a)
                for y in np.flatnonzero(res > 0):
                    block(seq + accepted + [int(y)], w * res[y])

    block([], 1.0)
    return out


def exact_expected_tau(target, draft, prompt, gamma, target_sampling=SamplingConfig(),
                       draft_sampling=SamplingConfig()):
    """E[tokens emitted] by the first SD block: 1 + sum_k P(first k accepted)."""
    V = _check([target, draft])
    if V ** gamma > MAX_OUTCOMES:
        raise InstanceTooLarge(f"vocab^gamma = {V}^{gamma} exceeds {MAX_OUTCOMES}")
    total = 1.0

    def walk(last, depth, prob):
        nonlocal total
        if depth == gamma:
            return
        p = _row(draft, last, draft_sampling)
        q = _row(target, last, target_sampling)
        for x in np.flatnonzero(p > 0):
            a = min(1.0, q[x] / p[x])
            if a > 0:
                total += prob * p[x] * a
                walk(int(x), depth + 1, prob * p[x] * a)

    walk(prompt[-1], 0, 1.0)
    return total


def max_abs_diff(a, b):
    """Largest per-sequence probability gap between two SeqDists."""
    keys = set(a) | set(b)
    return max(abs(a.get(k, 0.0) - b.get(k, 0.0)) for k in keys)
