"""Categorical distributions over a token vocabulary.

Distributions are plain 1-D ``float64`` numpy arrays. Batched helpers accept
``(..., vocab)`` arrays and operate on the last axis.
"""
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ResidualMassError, ValidationError

PROB_TOL = 1e-9


class KLDirection(str, Enum):
    FORWARD = "forward"  # sum q log(q/p), teacher first
    BACKWARD = "backward"  # sum p log(p/q)


@dataclass(frozen=True)
class SamplingConfig:
    temperature: float = 1.0
    top_p: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not np.isfinite(self.temperature) or self.temperature < 0:
            raise ValidationError(f"temperature must be >= 0, got {self.temperature}")
        if not 0 < self.top_p <= 1:
            raise ValidationError(f"top_p must be in (0, 1], got {self.top_p}")

    @property
    def greedy(self):
        return self.temperature == 0


def make_rng(seed):
    """Counter-based deterministic generator (Philox) for ``seed``."""
    return np.random.Generator(np.random.Philox(int(seed)))


def check_dist(d, name="dist"):
    d = np.asarray(d, dtype=np.float64)
    if d.ndim < 1 or d.shape[-1] == 0:
        raise ValidationError(f"{name} must be a non-empty vector")
    if not np.all(np.isfinite(d)) or np.any(d < 0):
        raise ValidationError(f"{name} has negative or non-finite entries")
    if np.any(np.abs(d.sum(axis=-1) - 1.0) > PROB_TOL):
        raise ValidationError(f"{name} does not sum to 1 within {PROB_TOL}")
    return d


def _check_pair(p, q):
    p = check_dist(p, "p")
    q = check_dist(q, "q")
    if p.shape != q.shape:
        raise ValidationError(f"shape mismatch: {p.shape} vs {q.shape}")
    return p, q


def make_dist(weights):
    """Normalize non-negative ``weights`` into a distribution."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise ValidationError("weights must be a non-empty vector")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ValidationError("weights must be finite and non-negative")
    total = w.sum()
    if total <= 0:
        raise ValidationError("at least one weight must be positive")
    return w / total


def softmax(logits, axis=-1):
    z = np.asarray(logits, dtype=np.float64)
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def apply_temperature(logits, temperature):
    """Softmax of ``logits / temperature``; ``temperature == 0`` is greedy.

    Greedy returns a one-hot at the argmax, ties going to the lowest index.
    Works on the last axis of batched input.
    """
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValidationError("logits must be finite")
    if temperature < 0 or not np.isfinite(temperature):
        raise ValidationError(f"temperature must be >= 0, got {temperature}")
    if temperature == 0:
        out = np.zeros_like(z)
        idx = np.argmax(z, axis=-1)  # first occurrence on ties
        np.put_along_axis(out, np.expand_dims(idx, -1), 1.0, axis=-1)
        return out
    return softmax(z / temperature)


def top_p_filter(d, top_p):
    """Keep the smallest high-probability prefix with mass >= ``top_p``.

    Tokens are ranked by descending probability with ties to the lowest
    index; the token that crosses the threshold is kept.
    """
    if not 0 < top_p <= 1:
        raise ValidationError(f"top_p must be in (0, 1], got {top_p}")
    d = check_dist(d)
    if top_p == 1:
        return d.copy()
    if d.ndim > 1:
        return np.stack([top_p_filter(row, top_p) for row in d.reshape(-1, d.shape[-1])]).reshape(d.shape)
    order = np.argsort(-d, kind="stable")
    cum = np.cumsum(d[order])
    k = int(np.searchsorted(cum, top_p - 1e-12, side="left")) + 1
    k = min(k, d.size)
    out = np.zeros_like(d)
    keep = order[:k]
    out[keep] = d[keep]
    return out / out.sum()


def transform(logits, sampling):
    """Temperature then top-p, the decode-time transform used everywhere."""
    d = apply_temperature(logits, sampling.temperature)
    if sampling.top_p < 1 and not sampling.greedy:
        d = top_p_filter(d, sampling.top_p)
    return d


def transform_probs(probs, sampling):
    """Same as :func:`transform` but starting from exact probabilities.

    Zero-probability entries stay exactly zero, which matters for tabular
    models whose rows are stored as probabilities.
    """
    probs = check_dist(probs)
    t = sampling.temperature
    if t == 0:
        out = np.zeros_like(probs)
        np.put_along_axis(out, np.expand_dims(np.argmax(probs, axis=-1), -1), 1.0, axis=-1)
        return out
    if t == 1:
        d = probs.copy()
    else:
        with np.errstate(divide="ignore"):
            logp = np.log(probs) / t
        logp = logp - np.max(logp, axis=-1, keepdims=True)
        d = np.exp(logp)
        d = d / d.sum(axis=-1, keepdims=True)
    if sampling.top_p < 1:
        d = top_p_filter(d, sampling.top_p)
    return d


def tvd(p, q):
    """Total variation distance, 0.5 * sum |q - p|, over the last axis."""
    p, q = _check_pair(p, q)
    return 0.5 * np.abs(q - p).sum(axis=-1)


def tvd_via_min(p, q):
    """The equivalent form 1 - sum min(p, q)."""
    p, q = _check_pair(p, q)
    return 1.0 - np.minimum(p, q).sum(axis=-1)


def kld(p, q, direction=KLDirection.FORWARD):
    """KL divergence between draft ``p`` and teacher ``q``.

    Forward direction is sum q log(q/p). Returns ``inf`` when the leading
    distribution has mass where the other has none.
    """
    p, q = _check_pair(p, q)
    direction = KLDirection(direction)
    a, b = (q, p) if direction is KLDirection.FORWARD else (p, q)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(a > 0, a * (np.log(a) - np.log(b)), 0.0)
    return terms.sum(axis=-1)


def residual_dist(p, q):
    """Normalized max(q - p, 0), sampled after a rejection."""
    p, q = _check_pair(p, q)
    r = np.maximum(q - p, 0.0)
    mass = r.sum()
    if mass <= 0:
        raise ResidualMassError("residual distribution has zero mass (p == q)")
    return r / mass


def sample_from_uniform(d, u):
    """Inverse-CDF lookup of ``u`` in token-index order."""
    d = np.asarray(d, dtype=np.float64)
    cdf = np.cumsum(d)
    idx = int(np.searchsorted(cdf, u, side="right"))
    if idx >= d.size:
        # u fell into the rounding slack above cdf[-1]
        idx = int(np.flatnonzero(d > 0)[-1])
    return idx


def sample(d, rng):
    """Draw one token id from ``d`` using one uniform from ``rng``."""
    d = check_dist(d)
    return sample_from_uniform(d, rng.random())


def sample_many(d, rng, n):
    """Draw ``n`` tokens per row of a ``(rows, vocab)`` array.

    Returns an integer array of shape ``(rows, n)``.
    """
    d = np.atleast_2d(np.asarray(d, dtype=np.float64))
    cdf = np.cumsum(d, axis=-1)
    cdf[:, -1] = np.inf  # absorb rounding slack
    u = rng.random((d.shape[0], n))
    out = np.empty((d.shape[0], n), dtype=np.int64)
    for i in range(d.shape[0]):
        out[i] = np.searchsorted(cdf[i], u[i], side="right")
    # a zero-probability tail token can only be hit through the slack
    for i in range(d.shape[0]):
        last = np.flatnonzero(d[i] > 0)[-1]
        np.minimum(out[i], last, out=out[i])
    return out
