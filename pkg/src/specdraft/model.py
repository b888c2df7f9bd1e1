"""Toy autoregressive language models with hand-written backpropagation.

Two kinds share one interface:

* ``TransformerLM``: token + learned position embeddings, pre-norm blocks of
  causal multi-head attention and a SiLU-gated MLP, RMS normalization, and
  an untied output head. Everything is float64 numpy.
* ``BigramLM``: a single ``(vocab, vocab)`` logit table. Its conditionals can
  be stored as exact probabilities, which the exact-enumeration oracles need.

Models are treated as immutable: :func:`sgd_step` returns a new model.
"""
from dataclasses import asdict, dataclass

import numpy as np

from .dist import SamplingConfig, sample, softmax, transform, transform_probs
from .errors import TrainingError, ValidationError

RMS_EPS = 1e-6


@dataclass(frozen=True)
class ToyLMConfig:
    vocab_size: int = 64
    context_len: int = 256
    layers: int = 4
    heads: int = 4
    hidden_dim: int = 128
    intermediate_dim: int = 352
    activation: str = "silu"

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValidationError("vocab_size must be >= 2")
        if self.context_len < 2:
            raise ValidationError("context_len must be >= 2")
        if self.heads < 1 or self.hidden_dim % self.heads:
            raise ValidationError("hidden_dim must be divisible by heads")
        if self.activation != "silu":
            raise ValidationError(f"unsupported activation {self.activation!r}")

    def to_dict(self):
        return asdict(self)


# Table 1 shape template scaled down to desk size.
TARGET_CONFIG = ToyLMConfig()
DRAFT_CONFIG = ToyLMConfig(layers=2, heads=2, hidden_dim=32, intermediate_dim=88)


@dataclass
class GradReport:
    loss: float
    dlogits: np.ndarray


def param_shapes(config, kind="transformer"):
    """Ordered ``(name, shape)`` list; the declaration order used on disk."""
    V, H, I = config.vocab_size, config.hidden_dim, config.intermediate_dim
    if kind == "bigram":
        return [("table", (V, V))]
    if kind != "transformer":
        raise ValidationError(f"unknown model kind {kind!r}")
    shapes = [("tok_emb", (V, H)), ("pos_emb", (config.context_len, H))]
    for i in range(config.layers):
        pre = f"layers.{i}."
        shapes += [
            (pre + "attn_norm", (H,)),
            (pre + "wq", (H, H)),
            (pre + "wk", (H, H)),
            (pre + "wv", (H, H)),
            (pre + "wo", (H, H)),
            (pre + "mlp_norm", (H,)),
            (pre + "w_gate", (H, I)),
            (pre + "w_up", (H, I)),
            (pre + "w_down", (I, H)),
        ]
    shapes += [("final_norm", (H,)), ("lm_head", (H, V))]
    return shapes


def count_params(config, kind="transformer"):
    """Closed-form parameter count."""
    V, H, I, C, L = (config.vocab_size, config.hidden_dim, config.intermediate_dim,
                     config.context_len, config.layers)
    if kind == "bigram":
        return V * V
    per_layer = 4 * H * H + 3 * H * I + 2 * H
    return V * H + C * H + L * per_layer + H + H * V


class ToyLM:
    kind = None

    def __init__(self, config, params):
        self.config = config
        expected = param_shapes(config, self.kind)
        if [n for n, _ in expected] != list(params):
            raise ValidationError("parameter names do not match the config")
        for name, shape in expected:
            if params[name].shape != shape:
                raise ValidationError(f"{name}: expected shape {shape}, got {params[name].shape}")
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}

    @property
    def n_params(self):
        return sum(p.size for p in self.params.values())

    def with_params(self, params):
        return type(self)(self.config, params)

    def _check_tokens(self, tokens):
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim not in (1, 2) or tokens.shape[-1] == 0:
            raise ValidationError("tokens must be a non-empty 1-D or 2-D sequence")
        if tokens.shape[-1] > self.config.context_len:
            raise ValidationError(
                f"sequence length {tokens.shape[-1]} exceeds context_len {self.config.context_len}")
        if tokens.min() < 0 or tokens.max() >= self.config.vocab_size:
            raise ValidationError("token id out of range")
        return tokens

    def forward(self, tokens):
        return self.forward_with_cache(tokens)[0]

    def backward(self, tokens, dlogits):
        logits, cache = self.forward_with_cache(tokens)
        dlogits = np.asarray(dlogits, dtype=np.float64)
        if dlogits.shape != logits.shape:
            raise ValidationError(f"dlogits shape {dlogits.shape} != logits shape {logits.shape}")
        return self.backward_from_cache(cache, dlogits)

    def position_dists(self, tokens, sampling=SamplingConfig()):
        """Post-transform next-token distribution at every position."""
        return transform(self.forward(tokens), sampling)

    def zeros_like_params(self):
        return {k: np.zeros_like(v) for k, v in self.params.items()}


class BigramLM(ToyLM):
    kind = "bigram"

    def __init__(self, config, params, probs=None):
        super().__init__(config, params)
        self._probs = probs

    @classmethod
    def uniform(cls, vocab_size, context_len=256):
        cfg = ToyLMConfig(vocab_size=vocab_size, context_len=context_len, layers=0, heads=1,
                          hidden_dim=1, intermediate_dim=1)
        return cls(cfg, {"table": np.zeros((vocab_size, vocab_size))})

    @classmethod
    def from_probs(cls, probs, context_len=256):
        """Tabular model whose rows are exactly ``probs``."""
        probs = np.asarray(probs, dtype=np.float64)
        V = probs.shape[0]
        if probs.shape != (V, V) or np.any(probs < 0) or np.any(np.abs(probs.sum(1) - 1) > 1e-9):
            raise ValidationError("probs must be a row-stochastic square matrix")
        cfg = ToyLMConfig(vocab_size=V, context_len=context_len, layers=0, heads=1,
                          hidden_dim=1, intermediate_dim=1)
        with np.errstate(divide="ignore"):
            table = np.log(probs)
        return cls(cfg, {"table": table}, probs=probs.copy())

    @classmethod
    def from_counts(cls, counts, context_len=256):
        counts = np.asarray(counts, dtype=np.float64)
        return cls.from_probs(counts / counts.sum(axis=1, keepdims=True), context_len)

    @property
    def probs(self):
        if self._probs is None:
            self._probs = softmax(self.params["table"])
        return self._probs

    def with_params(self, params):
        return BigramLM(self.config, params)

    def forward_with_cache(self, tokens):
        tokens = self._check_tokens(tokens)
        return self.params["table"][tokens], tokens

    def backward_from_cache(self, tokens, dlogits):
        grad = np.zeros_like(self.params["table"])
        np.add.at(grad, tokens.reshape(-1), dlogits.reshape(-1, dlogits.shape[-1]))
        return {"table": grad}

    def position_dists(self, tokens, sampling=SamplingConfig()):
        tokens = self._check_tokens(tokens)
        return transform_probs(self.probs[tokens], sampling)


class TransformerLM(ToyLM):
    kind = "transformer"

    @classmethod
    def init(cls, config, seed=0, init_scale=1.0):
        rng = np.random.default_rng(seed)
        out_scale = 1.0 / np.sqrt(2 * max(config.layers, 1))
        params = {}
        for name, shape in param_shapes(config):
            if name.endswith("norm"):
                params[name] = np.ones(shape)
            elif name in ("tok_emb", "pos_emb"):
                params[name] = rng.normal(0, 0.5, shape)
            elif name == "lm_head":
                params[name] = rng.normal(0, 0.02, shape)
            else:
                std = init_scale / np.sqrt(shape[0])
                if name.endswith(("wo", "w_down")):
                    std *= out_scale
                params[name] = rng.normal(0, std, shape)
        return cls(config, params)

    def forward_with_cache(self, tokens):
        tokens = self._check_tokens(tokens)
        squeeze = tokens.ndim == 1
        tok = tokens[None] if squeeze else tokens
        B, T = tok.shape
        cfg, P = self.config, self.params
        nh, hd = cfg.heads, cfg.hidden_dim // cfg.heads
        scale = 1.0 / np.sqrt(hd)
        mask = np.triu(np.full((T, T), -np.inf), k=1)

        x = P["tok_emb"][tok] + P["pos_emb"][:T]
        layers = []
        for i in range(cfg.layers):
            pre = f"layers.{i}."
            h, nc1 = _rmsnorm(x, P[pre + "attn_norm"])
            q = _heads(h @ P[pre + "wq"], nh)
            k = _heads(h @ P[pre + "wk"], nh)
            v = _heads(h @ P[pre + "wv"], nh)
            att = softmax(q @ k.transpose(0, 1, 3, 2) * scale + mask)
            o = _merge(att @ v)
            x = x + o @ P[pre + "wo"]
            h2, nc2 = _rmsnorm(x, P[pre + "mlp_norm"])
            a = h2 @ P[pre + "w_gate"]
            b = h2 @ P[pre + "w_up"]
            sig = 1.0 / (1.0 + np.exp(-a))
            m = a * sig * b
            x = x + m @ P[pre + "w_down"]
            layers.append((h, nc1, q, k, v, att, o, h2, nc2, a, b, sig, m))
        hf, ncf = _rmsnorm(x, P["final_norm"])
        logits = hf @ P["lm_head"]
        cache = (tok, squeeze, layers, hf, ncf)
        return (logits[0] if squeeze else logits), cache

    def backward_from_cache(self, cache, dlogits):
        tok, squeeze, layers, hf, ncf = cache
        if squeeze:
            dlogits = dlogits[None]
        cfg, P = self.config, self.params
        nh, hd = cfg.heads, cfg.hidden_dim // cfg.heads
        scale = 1.0 / np.sqrt(hd)
        B, T = tok.shape
        g = self.zeros_like_params()

        g["lm_head"] = _flat(hf).T @ _flat(dlogits)
        dhf = dlogits @ P["lm_head"].T
        dx, g["final_norm"] = _rmsnorm_back(dhf, P["final_norm"], ncf)
        for i in reversed(range(cfg.layers)):
            pre = f"layers.{i}."
            h, nc1, q, k, v, att, o, h2, nc2, a, b, sig, m = layers[i]
            # MLP
            g[pre + "w_down"] = _flat(m).T @ _flat(dx)
            dm = dx @ P[pre + "w_down"].T
            silu = a * sig
            da = dm * b * (sig + a * sig * (1.0 - sig))
            db = dm * silu
            g[pre + "w_gate"] = _flat(h2).T @ _flat(da)
            g[pre + "w_up"] = _flat(h2).T @ _flat(db)
            dh2 = da @ P[pre + "w_gate"].T + db @ P[pre + "w_up"].T
            dxn, g[pre + "mlp_norm"] = _rmsnorm_back(dh2, P[pre + "mlp_norm"], nc2)
            dx = dx + dxn
            # attention
            g[pre + "wo"] = _flat(o).T @ _flat(dx)
            do = _heads(dx @ P[pre + "wo"].T, nh)
            datt = do @ v.transpose(0, 1, 3, 2)
            dv = att.transpose(0, 1, 3, 2) @ do
            ds = att * (datt - np.sum(datt * att, axis=-1, keepdims=True)) * scale
            dq = _merge(ds @ k)
            dk = _merge(ds.transpose(0, 1, 3, 2) @ q)
            dv = _merge(dv)
            hf_ = _flat(h)
            g[pre + "wq"] = hf_.T @ _flat(dq)
            g[pre + "wk"] = hf_.T @ _flat(dk)
            g[pre + "wv"] = hf_.T @ _flat(dv)
            dh = dq @ P[pre + "wq"].T + dk @ P[pre + "wk"].T + dv @ P[pre + "wv"].T
            dxn, g[pre + "attn_norm"] = _rmsnorm_back(dh, P[pre + "attn_norm"], nc1)
            dx = dx + dxn
        np.add.at(g["tok_emb"], tok.reshape(-1), _flat(dx))
        g["pos_emb"][:T] = dx.sum(axis=0)
        return g


def _flat(x):
    return x.reshape(-1, x.shape[-1])


def _heads(x, nh):
    B, T, H = x.shape
    return x.reshape(B, T, nh, H // nh).transpose(0, 2, 1, 3)


def _merge(x):
    B, nh, T, hd = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, nh * hd)


def _rmsnorm(x, gain):
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    y = x * inv
    return y * gain, (y, inv)


def _rmsnorm_back(dout, gain, cache):
    y, inv = cache
    dgain = np.sum(_flat(dout * y), axis=0)
    dy = dout * gain
    dx = inv * (dy - y * np.mean(dy * y, axis=-1, keepdims=True))
    return dx, dgain


def load_model(kind, config, params):
    cls = {"transformer": TransformerLM, "bigram": BigramLM}.get(kind)
    if cls is None:
        raise ValidationError(f"unknown model kind {kind!r}")
    return cls(config, params)


# Module-level operations.

def forward(model, tokens):
    """Per-position logits; position ``t`` sees only ``tokens[:t+1]``."""
    return model.forward(tokens)


def backward(model, tokens, dlogits):
    """Gradient of ``sum_t <logits[t], dlogits[t]>`` w.r.t. every parameter."""
    return model.backward(tokens, dlogits)


def next_token_dist(model, context, sampling=SamplingConfig()):
    context = np.asarray(context, dtype=np.int64)
    if context.ndim != 1 or context.size == 0:
        raise ValidationError("context must be a non-empty 1-D sequence")
    return model.position_dists(context, sampling)[-1]


def ce_from_logits(logits, targets, weights=None):
    """Mean next-token cross-entropy over rows of ``logits``.

    ``weights`` (one per row, summing to 1) overrides the uniform mean.
    """
    n = logits.shape[0]
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64)
    p = softmax(logits)
    logp = np.log(np.maximum(p[np.arange(n), targets], 1e-300))
    d = p.copy()
    d[np.arange(n), targets] -= 1.0
    return float(-(w * logp).sum()), d * w[:, None]


def ce_loss_and_grad(model, tokens):
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size < 2:
        raise ValidationError("need a sequence of at least two tokens")
    logits = model.forward(tokens)
    loss, d = ce_from_logits(logits[:-1], tokens[1:])
    dlogits = np.zeros_like(logits)
    dlogits[:-1] = d
    return GradReport(loss, dlogits)


def grad_norm(grads):
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def sgd_step(model, grads, lr, clip_norm=1.0, step=None):
    """``params - lr * clip(grads)`` with global-norm clipping."""
    if list(grads) != list(model.params):
        raise ValidationError("gradient names do not match parameters")
    norm = grad_norm(grads)
    if not np.isfinite(norm):
        raise TrainingError("non-finite gradient", step)
    scale = 1.0
    if clip_norm is not None and norm > clip_norm:
        scale = clip_norm / norm
    new = {}
    for k, p in model.params.items():
        if grads[k].shape != p.shape:
            raise ValidationError(f"{k}: gradient shape mismatch")
        new[k] = p - (lr * scale) * grads[k]
    return model.with_params(new)


def generate(model, prompt, sampling, max_new_tokens, rng, eos=None):
    """Plain autoregressive sampling; one forward per emitted token."""
    seq = list(int(t) for t in prompt)
    out = []
    for _ in range(max_new_tokens):
        if len(seq) >= model.config.context_len:
            break
        tok = sample(next_token_dist(model, seq, sampling), rng)
        seq.append(tok)
        out.append(tok)
        if eos is not None and tok == eos:
            break
    return out
