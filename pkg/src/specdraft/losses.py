"""White-box distillation objectives on draft logits.

Every function takes ``draft_logits`` and teacher probabilities ``q`` as
``(positions, vocab)`` arrays and returns a :class:`GradReport` whose
``dlogits`` is the gradient of the positional mean (or of the weighted sum
when ``weights`` is given) with respect to the draft logits.

The TVD-family "loss" field is always the exact weighted TVD, since the
policy-gradient estimators have no scalar primal of their own.
"""
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .dist import KLDirection, sample_many, softmax
from .errors import InfiniteLossError, ValidationError
from .model import GradReport, ce_from_logits

SIGMA_GUARD = 1e-8


class LossKind(str, Enum):
    KLD = "kld"
    TVD = "tvd"
    TVDPP = "tvdpp"
    CE = "ce"


@dataclass(frozen=True)
class AdvantageStats:
    mu: float
    sigma: float
    n: int


@dataclass(frozen=True)
class LossConfig:
    kind: LossKind = LossKind.TVDPP
    kl_direction: KLDirection = KLDirection.FORWARD
    tvdpp_mode: str = "full_support"  # or "sampled"
    tvdpp_population: str = "batch"  # or "position"
    tvdpp_sign: str = "descent"  # or "literal" (Eq. 1 as printed)
    n_samples: int = 64
    pretrain_loss: str = "distill"  # or "ce"

    def __post_init__(self):
        object.__setattr__(self, "kind", LossKind(self.kind))
        object.__setattr__(self, "kl_direction", KLDirection(self.kl_direction))
        if self.tvdpp_mode not in ("full_support", "sampled"):
            raise ValidationError(f"bad tvdpp_mode {self.tvdpp_mode!r}")
        if self.tvdpp_population not in ("batch", "position"):
            raise ValidationError(f"bad tvdpp_population {self.tvdpp_population!r}")
        if self.tvdpp_sign not in ("descent", "literal"):
            raise ValidationError(f"bad tvdpp_sign {self.tvdpp_sign!r}")
        if self.pretrain_loss not in ("distill", "ce"):
            raise ValidationError(f"bad pretrain_loss {self.pretrain_loss!r}")


def _prep(draft_logits, q, weights):
    z = np.atleast_2d(np.asarray(draft_logits, dtype=np.float64))
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    if z.shape != q.shape:
        raise ValidationError(f"shape mismatch: logits {z.shape} vs q {q.shape}")
    n = z.shape[0]
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (n,):
        raise ValidationError("weights must have one entry per position")
    return z, q, w


def reward(p, q):
    """Indicator reward r(x) = 1 iff q(x) > p(x), strictly."""
    return (np.asarray(q) > np.asarray(p)).astype(np.float64)


def advantage_stats(r):
    r = np.asarray(r, dtype=np.float64)
    return AdvantageStats(float(r.mean()), float(r.std()), int(r.size))


def _tvd_rows(p, q):
    return 0.5 * np.abs(q - p).sum(axis=-1)


def kld_loss_and_grad(draft_logits, q, direction=KLDirection.FORWARD, weights=None):
    z, q, w = _prep(draft_logits, q, weights)
    p = softmax(z)
    direction = KLDirection(direction)
    with np.errstate(divide="ignore", invalid="ignore"):
        if direction is KLDirection.FORWARD:
            terms = np.where(q > 0, q * (np.log(q) - np.log(p)), 0.0)
            rows = terms.sum(axis=-1)
            d = p - q
        else:
            logratio = np.where(p > 0, np.log(p) - np.log(q), 0.0)
            rows = (p * logratio).sum(axis=-1)
            d = p * (logratio - rows[:, None])
    if not np.all(np.isfinite(rows)):
        raise InfiniteLossError(f"{direction.value} KLD is infinite at some position")
    return GradReport(float((w * rows).sum()), d * w[:, None])


def tvd_loss_and_grad(draft_logits, q, weights=None):
    """Exact TVD and its gradient through the softmax.

    With r(x) = [q(x) > p(x)] and A = sum_x p(x) r(x), the gradient of
    1 - sum_x min(p(x), q(x)) w.r.t. logit z_x is p(x) (A - r(x)).
    """
    z, q, w = _prep(draft_logits, q, weights)
    p = softmax(z)
    r = reward(p, q)
    A = (p * r).sum(axis=-1, keepdims=True)
    return GradReport(float((w * _tvd_rows(p, q)).sum()), p * (A - r) * w[:, None])


def score_function_expectation(p, f):
    """sum_x p(x) f(x) grad_z log p(x), with grad_z log p(x) = e_x - p.

    ``f`` has the shape of ``p``; returns the per-position gradient.
    """
    p = np.atleast_2d(p)
    out = np.zeros_like(p)
    V = p.shape[-1]
    for x in range(V):
        score = -p.copy()
        score[:, x] += 1.0
        out += (p[:, x] * f[:, x])[:, None] * score
    return out


def _sampled_score(p, tokens, coef):
    """(1/n) sum_i coef_i (e_{x_i} - p) for each row."""
    N, n = tokens.shape
    acc = np.zeros_like(p)
    np.add.at(acc, (np.repeat(np.arange(N), n), tokens.reshape(-1)), coef.reshape(-1))
    return acc / n - p * coef.mean(axis=1, keepdims=True)


def tvd_reinforce_grad(draft_logits, q, n_samples, rng, weights=None):
    """Monte Carlo estimate of the TVD gradient from draft samples.

    Each position draws ``n_samples`` tokens from p and averages
    grad log p(x_i) * (-r(x_i)).
    """
    if n_samples < 1:
        raise ValidationError("n_samples must be >= 1")
    z, q, w = _prep(draft_logits, q, weights)
    p = softmax(z)
    r = reward(p, q)
    x = sample_many(p, rng, n_samples)
    rx = np.take_along_axis(r, x, axis=1)
    g = _sampled_score(p, x, -rx)
    return GradReport(float((w * _tvd_rows(p, q)).sum()), g * w[:, None])


def _normalize(r, population):
    if population == "batch":
        mu, sigma = r.mean(), r.std()
        return (r - mu) / max(sigma, SIGMA_GUARD), AdvantageStats(float(mu), float(sigma), r.size)
    mu = r.mean(axis=1, keepdims=True)
    sigma = r.std(axis=1, keepdims=True)
    return (r - mu) / np.maximum(sigma, SIGMA_GUARD), AdvantageStats(float(mu.mean()), float(sigma.mean()), r.size)


def tvdpp_grad(draft_logits, q, mode="full_support", n_samples=None, rng=None,
               population="batch", sign="descent", weights=None, return_stats=False):
    """TVD gradient with normalized advantages (r - mu) / sigma.

    ``full_support``: rewards over every position and every vocabulary token
    form the population for mu and sigma; the gradient is the exact
    p-weighted expectation of grad log p(x) * (-a(x)).
    ``sampled``: ``n_samples`` draft samples per position form the
    population and the gradient is their average.

    ``sign="literal"`` flips to +a(x), the sign printed alongside the
    estimator; it ascends TVD.
    """
    z, q, w = _prep(draft_logits, q, weights)
    p = softmax(z)
    r = reward(p, q)
    s = -1.0 if sign == "descent" else 1.0
    if mode == "full_support":
        a, stats = _normalize(r, population)
        abar = (p * a).sum(axis=-1, keepdims=True)
        g = s * p * (a - abar)
    elif mode == "sampled":
        if n_samples is None or n_samples < 1 or rng is None:
            raise ValidationError("sampled mode needs n_samples >= 1 and an rng")
        x = sample_many(p, rng, n_samples)
        rx = np.take_along_axis(r, x, axis=1)
        a, stats = _normalize(rx, population)
        g = _sampled_score(p, x, s * a)
    else:
        raise ValidationError(f"bad mode {mode!r}")
    report = GradReport(float((w * _tvd_rows(p, q)).sum()), g * w[:, None])
    return (report, stats) if return_stats else report


def distill_loss_and_grad(draft_logits, q, cfg, rng=None, weights=None):
    kind = LossKind(cfg.kind)
    if kind is LossKind.KLD:
        return kld_loss_and_grad(draft_logits, q, cfg.kl_direction, weights)
    if kind is LossKind.TVD:
        return tvd_loss_and_grad(draft_logits, q, weights)
    if kind is LossKind.TVDPP:
        return tvdpp_grad(draft_logits, q, cfg.tvdpp_mode, cfg.n_samples, rng,
                          cfg.tvdpp_population, cfg.tvdpp_sign, weights)
    raise ValidationError(f"{kind.value!r} is not a distillation loss")


@dataclass
class BatchGrad:
    loss: float
    grads: dict
    n_distill: int
    n_pretrain: int


def split_counts(batch_size, mix_ratio=(9, 1)):
    """Distill/pretrain sequence counts for one batch under ``mix_ratio``."""
    a, b = mix_ratio
    if batch_size < 1 or a < 0 or b < 0 or a + b == 0:
        raise ValidationError("batch_size must be >= 1 and mix_ratio non-negative and non-zero")
    n_distill = -(-batch_size * a // (a + b))
    return n_distill, batch_size - n_distill


def _pad(seqs):
    T = max(len(s) for s in seqs)
    out = np.zeros((len(seqs), T), dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out


def mixed_batch_grad(draft, target, distill_batch, pretrain_batch, loss_cfg, rng=None, q_cache=None):
    """Parameter gradient of one mixed finetuning batch.

    Each sequence carries weight 1/B spread evenly over its next-token
    positions. Distillation positions take q live from ``target`` (or from
    ``q_cache``, keyed by the token tuple); TVD++ statistics pool every
    distillation position in the batch. Pretrain sequences use the
    distillation loss too unless ``loss_cfg.pretrain_loss == "ce"``.
    """
    distill_batch = [list(s) for s in distill_batch]
    pretrain_batch = [list(s) for s in pretrain_batch]
    seqs = distill_batch + pretrain_batch
    if not seqs:
        raise ValidationError("empty batch")
    if any(len(s) < 2 for s in seqs):
        raise ValidationError("every sequence needs at least two tokens")
    B = len(seqs)
    tokens = _pad(seqs)
    logits, cache = draft.forward_with_cache(tokens)
    dlogits = np.zeros_like(logits)

    use_ce = [False] * len(distill_batch) + [loss_cfg.pretrain_loss == "ce"] * len(pretrain_batch)
    rows, qs, wts, ce_rows, ce_tg, ce_w = [], [], [], [], [], []
    need_q = [i for i, c in enumerate(use_ce) if not c]
    q_by_seq = {}
    missing = []
    for i in need_q:
        key = tuple(seqs[i])
        if q_cache is not None and key in q_cache:
            q_by_seq[i] = q_cache[key]
        else:
            missing.append(i)
    if missing:
        tq = target.position_dists(_pad([seqs[i] for i in missing]))
        for j, i in enumerate(missing):
            q_by_seq[i] = tq[j, :len(seqs[i])]
            if q_cache is not None:
                q_cache[tuple(seqs[i])] = q_by_seq[i]
    for i, s in enumerate(seqs):
        L = len(s) - 1
        idx = [(i, t) for t in range(L)]
        w = np.full(L, 1.0 / (B * L))
        if use_ce[i]:
            ce_rows += idx
            ce_tg += s[1:]
            ce_w.append(w)
        else:
            rows += idx
            qs.append(q_by_seq[i][:L])
            wts.append(w)

    loss = 0.0
    if rows:
        bi, ti = map(np.array, zip(*rows))
        w = np.concatenate(wts)
        rep = distill_loss_and_grad(logits[bi, ti], np.concatenate(qs), loss_cfg, rng, w)
        dlogits[bi, ti] += rep.dlogits
        loss += rep.loss
    if ce_rows:
        bi, ti = map(np.array, zip(*ce_rows))
        w = np.concatenate(ce_w)
        l, d = ce_from_logits(logits[bi, ti], np.array(ce_tg), w / w.sum())
        share = w.sum()
        dlogits[bi, ti] += d * share
        loss += l * share
    grads = draft.backward_from_cache(cache, dlogits)
    return BatchGrad(loss, grads, len(distill_batch), len(pretrain_batch))
