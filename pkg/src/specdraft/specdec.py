"""Speculative decoding engine and its metrics.

A block: the draft proposes ``gamma`` tokens autoregressively, one target
forward scores every proposal, and modified rejection sampling keeps a
prefix. Each block emits ``accepted + 1`` tokens: a residual sample on
rejection or a bonus sample from the target when all proposals pass.

RNG discipline per block: one uniform per examined proposal during
drafting, one uniform per acceptance test, and one for the final
correction/bonus sample.
"""
import json
import time
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from .dist import SamplingConfig, make_rng, residual_dist, sample
from .errors import ValidationError
from .model import generate

METRIC_FIELDS = ("task", "loss_kind", "checkpoint", "gamma", "tau", "mbsu",
                 "token_rate_ratio", "accept_rate", "seed")


@dataclass(frozen=True)
class BlockConfig:
    gamma: int = 3
    draft_sampling: SamplingConfig = SamplingConfig()
    target_sampling: SamplingConfig = SamplingConfig()

    def __post_init__(self):
        if self.gamma < 1:
            raise ValidationError("gamma must be >= 1")

    @classmethod
    def same(cls, gamma, sampling):
        return cls(gamma, sampling, sampling)


@dataclass
class BlockStats:
    proposed: int
    accepted: int
    bonus_emitted: bool
    tokens_emitted: int
    partial: bool = False


class MBSUFormula(str, Enum):
    DEFAULT = "tau_over_cgamma_plus_1"
    LITERAL = "literal_paper"


@dataclass(frozen=True)
class SpeedupConfig:
    c: float
    formula: MBSUFormula = MBSUFormula.DEFAULT

    def __post_init__(self):
        if not 0 < self.c < 1:
            raise ValidationError(f"c must be in (0, 1), got {self.c}")
        object.__setattr__(self, "formula", MBSUFormula(self.formula))


def propose(draft, context, cfg, rng):
    """Sample up to ``gamma`` draft tokens; stops early at ``context_len``.

    Returns ``(tokens, dists, partial)``.
    """
    seq = [int(t) for t in context]
    if not seq:
        raise ValidationError("context must be non-empty")
    tokens, dists = [], []
    for _ in range(cfg.gamma):
        if len(seq) >= draft.config.context_len:
            return tokens, dists, True
        d = draft.position_dists(seq, cfg.draft_sampling)[-1]
        x = sample(d, rng)
        tokens.append(x)
        dists.append(d)
        seq.append(x)
    return tokens, dists, False


def accept_probability(p_x, q_x):
    return min(1.0, q_x / p_x)


def verify(target_dists, draft_dists, tokens, rng):
    """Modified rejection sampling over one block.

    ``target_dists`` has one more row than ``tokens``: row ``i`` scores
    proposal ``i`` and the last row supplies the bonus distribution.
    Returns ``(accepted_prefix, emitted_tokens, BlockStats)``.
    """
    g = len(tokens)
    if len(draft_dists) != g or len(target_dists) != g + 1:
        raise ValidationError("need gamma draft dists and gamma + 1 target dists")
    accepted = []
    for i, x in enumerate(tokens):
        p, q = draft_dists[i], target_dists[i]
        if p[x] <= 0:
            raise ValidationError(f"proposal {i} (token {x}) has zero draft probability")
        u = rng.random()
        if u < accept_probability(p[x], q[x]):
            accepted.append(x)
            continue
        y = sample(residual_dist(p, q), rng)
        return accepted, accepted + [y], BlockStats(g, len(accepted), False, len(accepted) + 1)
    y = sample(target_dists[g], rng)
    return accepted, accepted + [y], BlockStats(g, g, True, g + 1)


@dataclass
class GenerationResult:
    sequence: list
    stats: list
    target_calls: int = 0
    draft_calls: int = 0
    elapsed: float = 0.0

    def __iter__(self):
        # unpacks as (sequence, stats)
        return iter((self.sequence, self.stats))


def sd_generate(target, draft, prompt, cfg, max_tokens, seed, eos=None):
    """Generate up to ``max_tokens`` new tokens with speculative decoding.

    Exactly one target forward runs per block. Generation stops at
    ``max_tokens``, at ``eos`` or when the context window is full.
    """
    if max_tokens < 1:
        raise ValidationError("max_tokens must be >= 1")
    rng = make_rng(seed)
    ctx = [int(t) for t in prompt]
    if not ctx:
        raise ValidationError("prompt must be non-empty")
    limit = min(target.config.context_len, draft.config.context_len)
    out, stats = [], []
    calls_t = calls_d = 0
    t0 = time.perf_counter()
    while len(out) < max_tokens and len(ctx) < limit:
        room = BlockConfig(min(cfg.gamma, limit - len(ctx)), cfg.draft_sampling, cfg.target_sampling)
        tokens, dists, _ = propose(draft, ctx, room, rng)
        calls_d += len(tokens)
        # one target pass scores every proposal plus the bonus position
        tq = target.position_dists(ctx + tokens, cfg.target_sampling)[len(ctx) - 1:]
        calls_t += 1
        _, emitted, st = verify(tq, dists, tokens, rng)
        st.partial = room.gamma < cfg.gamma
        stats.append(st)
        for y in emitted:
            if len(out) >= max_tokens:
                break
            out.append(y)
            ctx.append(y)
            if eos is not None and y == eos:
                return GenerationResult(out, stats, calls_t, calls_d, time.perf_counter() - t0)
    return GenerationResult(out, stats, calls_t, calls_d, time.perf_counter() - t0)


def block_efficiency(stats):
    """Mean tokens emitted per block (tau)."""
    if not stats:
        raise ValidationError("no blocks")
    return float(np.mean([s.tokens_emitted for s in stats]))


def accept_rate(stats):
    proposed = sum(s.proposed for s in stats)
    return sum(s.accepted for s in stats) / proposed if proposed else 0.0


def mbsu(tau, cfg, gamma):
    """Memory-bound speed-up for block efficiency ``tau``.

    Default: tau / (c * gamma + 1). ``literal_paper`` evaluates the
    printed c * tau / (c * gamma + 1).
    """
    if not 1 <= tau <= gamma + 1 + 1e-12:
        raise ValidationError(f"tau={tau} outside [1, gamma + 1]")
    denom = cfg.c * gamma + 1.0
    if cfg.formula is MBSUFormula.LITERAL:
        return cfg.c * tau / denom
    return tau / denom


def cost_model_ratio(stats, c, n_tokens):
    """SD tokens per cost unit relative to AR (1 token per unit).

    Each block costs one target forward plus ``c`` per draft forward.
    """
    units = sum(1.0 + c * s.proposed for s in stats)
    return n_tokens / units


def token_rate_ratio(target, draft, prompts, cfg, mode="cost_model", c=None, max_tokens=32,
                     seed=0, eos=None):
    """SD token rate over autoregressive token rate on the same prompts."""
    if c is None:
        c = draft.n_params / target.n_params
    n_sd = units = 0.0
    t_sd = t_ar = 0.0
    n_ar = 0
    for k, prompt in enumerate(prompts):
        res = sd_generate(target, draft, prompt, cfg, max_tokens, seed + k, eos)
        n_sd += len(res.sequence)
        units += sum(1.0 + c * s.proposed for s in res.stats)
        t_sd += res.elapsed
        if mode == "wallclock":
            t0 = time.perf_counter()
            ar = generate(target, prompt, cfg.target_sampling, max_tokens, make_rng(seed + k), eos)
            t_ar += time.perf_counter() - t0
            n_ar += len(ar)
    if n_sd == 0:
        raise ValidationError("no tokens generated")
    if mode == "cost_model":
        return n_sd / units
    if mode == "wallclock":
        if n_ar == 0:
            raise ValidationError("no tokens generated")
        return (n_sd / t_sd) / (n_ar / t_ar)
    raise ValidationError(f"bad mode {mode!r}")


@dataclass
class MetricsRecord:
    task: str
    loss_kind: str
    checkpoint: int
    gamma: int
    tau: float
    mbsu: float
    token_rate_ratio: float
    accept_rate: float
    seed: int

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=False)

    @classmethod
    def from_dict(cls, d):
        missing = set(METRIC_FIELDS) - set(d)
        extra = set(d) - set(METRIC_FIELDS)
        if missing or extra:
            raise ValidationError(f"bad metrics record: missing={sorted(missing)} extra={sorted(extra)}")
        return cls(**{k: d[k] for k in METRIC_FIELDS})


def evaluate_blocks(target, draft, prompts, cfg, max_tokens, seed, c, eos=None,
                    formula=MBSUFormula.DEFAULT):
    """Run SD over ``prompts`` and pool the block statistics.

    Returns ``(tau, mbsu, token_rate_ratio, accept_rate)`` with the cost
    model used for the token-rate ratio.
    """
    stats, n_tokens = [], 0
    for k, prompt in enumerate(prompts):
        res = sd_generate(target, draft, prompt, cfg, max_tokens, seed * 100003 + k, eos)
        stats += res.stats
        n_tokens += len(res.sequence)
    tau = block_efficiency(stats)
    speed = mbsu(tau, SpeedupConfig(c, formula), cfg.gamma)
    return tau, speed, cost_model_ratio(stats, c, n_tokens), accept_rate(stats)


def write_metrics(records, path):
    with open(path, "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_metrics(path):
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(MetricsRecord.from_dict(json.loads(line)))
            except (json.JSONDecodeError, TypeError, ValidationError) as exc:
                raise ValidationError(f"{path}:{lineno}: malformed metrics line ({exc})") from exc
    return out
