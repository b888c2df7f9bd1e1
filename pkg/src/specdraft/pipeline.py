"""The three training phases at desk scale, plus evaluation sweeps.

1. ``pretrain``: next-token cross-entropy on a chunked corpus.
2. ``generate_distillation_dataset``: the target answers seed prompts under
   several temperatures.
3. ``finetune``: mixed batches of distillation and pretraining sequences,
   with the target computing q live.

``train_target`` builds the toy target that everything aligns to; it is
setup, not one of the phases.
"""
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import synthetic
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .dist import SamplingConfig, make_rng, tvd
from .errors import TrainingError, ValidationError
from .losses import LossConfig, LossKind, mixed_batch_grad, split_counts
from .model import (DRAFT_CONFIG, TARGET_CONFIG, ToyLM, TransformerLM, ce_from_logits,
                    generate, sgd_step)
from .specdec import BlockConfig, MBSUFormula, MetricsRecord, evaluate_blocks
from .vocab import EOS, VOCAB_SIZE, encode

CORPUS_MAGIC = b"SDCORP\0\0"
CORPUS_VERSION = 1
DEFAULT_TEMPS = (0.0, 0.3, 0.7, 1.0)
DEFAULT_TOP_P = 0.95


# --- corpus -----------------------------------------------------------------

@dataclass
class Corpus:
    chunks: np.ndarray  # (n_chunks, chunk_len) int64
    source: str = "synthetic"
    vocab_size: int = VOCAB_SIZE

    @property
    def chunk_len(self):
        return self.chunks.shape[1]

    def __len__(self):
        return self.chunks.shape[0]


def chunk_sequences(seqs, chunk_len, eos=EOS):
    """Append EOS to each sequence, concatenate, cut into full chunks.

    The trailing partial chunk is dropped.
    """
    stream = []
    for s in seqs:
        stream.extend(s)
        if not s or s[-1] != eos:
            stream.append(eos)
    n = len(stream) // chunk_len
    return np.asarray(stream[:n * chunk_len], dtype=np.int64).reshape(n, chunk_len)


def make_synthetic_corpus(seed, n_chunks, chunk_len=256, context_len=256):
    if n_chunks < 1:
        raise ValidationError("n_chunks must be >= 1")
    if chunk_len > context_len:
        raise ValidationError("chunk_len must not exceed context_len")
    rng = np.random.default_rng(seed)
    texts, total = [], 0
    # sentences average ~30 characters; overshoot then trim
    while total < n_chunks * chunk_len:
        batch = synthetic.corpus_texts(rng, 64)
        texts += batch
        total += sum(len(t) + 1 for t in batch)
    chunks = chunk_sequences([encode(t) for t in texts], chunk_len)
    return Corpus(chunks[:n_chunks])


def write_corpus(corpus, path):
    """Header ``magic, version, vocab_size, chunk_len, n_chunks`` (uint32 LE)
    followed by the tokens as little-endian uint16."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    hdr = CORPUS_MAGIC + struct.pack("<IIII", CORPUS_VERSION, corpus.vocab_size,
                                     corpus.chunk_len, len(corpus))
    path.write_bytes(hdr + corpus.chunks.astype("<u2").tobytes())
    return path


def read_corpus(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"corpus not found: {path}")
    buf = path.read_bytes()
    if buf[:8] != CORPUS_MAGIC:
        raise ValidationError(f"{path}: not a corpus file")
    version, vocab, chunk_len, n = struct.unpack_from("<IIII", buf, 8)
    if version != CORPUS_VERSION:
        raise ValidationError(f"{path}: unsupported corpus version {version}")
    toks = np.frombuffer(buf, dtype="<u2", offset=24).astype(np.int64)
    if toks.size != n * chunk_len:
        raise ValidationError(f"{path}: truncated token stream")
    return Corpus(toks.reshape(n, chunk_len), "file", vocab)


# --- training ---------------------------------------------------------------

@dataclass(frozen=True)
class LinearWarmupDecay:
    peak: float
    warmup: int
    total: int
    floor: float = 0.0

    def __call__(self, step):
        if step < self.warmup:
            return self.peak * (step + 1) / self.warmup
        span = max(self.total - self.warmup, 1)
        frac = min(max((step - self.warmup) / span, 0.0), 1.0)
        return self.peak + (self.floor - self.peak) * frac


def _windows(chunks, rng, batch_size, seq_len):
    rows = rng.integers(0, chunks.shape[0], size=batch_size)
    starts = rng.integers(0, chunks.shape[1] - seq_len + 1, size=batch_size)
    return np.stack([chunks[r, s:s + seq_len] for r, s in zip(rows, starts)])


def _ce_step(model, batch, lr, clip, step):
    logits, cache = model.forward_with_cache(batch)
    B, T, V = logits.shape
    loss, d = ce_from_logits(logits[:, :-1].reshape(-1, V), batch[:, 1:].reshape(-1))
    if not np.isfinite(loss):
        raise TrainingError("non-finite loss", step)
    dlogits = np.zeros_like(logits)
    dlogits[:, :-1] = d.reshape(B, T - 1, V)
    return sgd_step(model, model.backward_from_cache(cache, dlogits), lr, clip, step), loss


def _as_checkpoint(obj):
    return obj if isinstance(obj, Checkpoint) else Checkpoint(obj)


def pretrain(draft, corpus, steps, lr_schedule=None, batch_size=8, seq_len=64, seed=0,
             clip_norm=1.0, checkpoint_every=None, checkpoint_dir=None):
    """Next-token cross-entropy training on random corpus windows.

    ``draft`` may be a model or a Checkpoint to resume from. Returns the
    final Checkpoint; its ``history`` holds per-step losses.
    """
    ckpt = _as_checkpoint(draft)
    if steps == 0:
        return ckpt
    seq_len = min(seq_len or corpus.chunk_len, corpus.chunk_len)
    lr_schedule = lr_schedule or LinearWarmupDecay(3.0, max(steps // 20, 1), steps)
    rng = make_rng(seed)
    if ckpt.rng_state is not None:
        rng.bit_generator.state = ckpt.rng_state
    model, history = ckpt.model, list(ckpt.history)
    for i in range(steps):
        step = ckpt.step + i
        model, loss = _ce_step(model, _windows(corpus.chunks, rng, batch_size, seq_len),
                               lr_schedule(i), clip_norm, step)
        history.append(loss)
        if checkpoint_every and checkpoint_dir and (i + 1) % checkpoint_every == 0:
            save_checkpoint(Checkpoint(model, step + 1, rng.bit_generator.state, "ce", history),
                            Path(checkpoint_dir) / f"pretrain_{step + 1:06d}.ckpt")
    return Checkpoint(model, ckpt.step + steps, rng.bit_generator.state, "ce", history)


def train_target(config=TARGET_CONFIG, seed=0, steps=800, batch_size=8, seq_len=64, n_docs=6000,
                 lr_schedule=None, clip_norm=1.0):
    """Train the toy target on corpus text plus both prompt families."""
    rng = np.random.default_rng(seed)
    chunks = chunk_sequences(synthetic.target_training_texts(rng, n_docs), seq_len)
    model = TransformerLM.init(config, seed=seed)
    return pretrain(model, Corpus(chunks), steps, lr_schedule or LinearWarmupDecay(3.0, 50, steps),
                    batch_size, seq_len, seed=seed + 1, clip_norm=clip_norm)


# --- distillation data ------------------------------------------------------

@dataclass
class DistillSample:
    prompt: list
    response: list
    gen_temperature: float
    gen_top_p: float
    seed: int

    @property
    def tokens(self):
        return list(self.prompt) + list(self.response)


def _sample_seed(seed, *idx):
    return int(np.random.SeedSequence([seed, *idx]).generate_state(1, np.uint64)[0] >> 1)


def _as_tokens(p):
    return encode(p) if isinstance(p, str) else [int(t) for t in p]


def generate_distillation_dataset(target, seed_prompts, temps=DEFAULT_TEMPS, top_p=DEFAULT_TOP_P,
                                  per_prompt=1, seed=0, max_new_tokens=48, eos=EOS):
    """Sample target responses for every prompt x temperature.

    Greedy (T=0) yields one response per prompt regardless of
    ``per_prompt``. Each sample records the seed that reproduces it.
    """
    if not seed_prompts:
        raise ValidationError("no seed prompts")
    out = []
    for i, p in enumerate(seed_prompts):
        prompt = _as_tokens(p)
        for j, t in enumerate(temps):
            for k in range(1 if t == 0 else per_prompt):
                s = _sample_seed(seed, i, j, k)
                cfg = SamplingConfig(float(t), top_p, s)
                resp = generate(target, prompt, cfg, max_new_tokens, make_rng(s), eos)
                out.append(DistillSample(prompt, resp, float(t), top_p, s))
    return out


def regenerate(target, sample_, max_new_tokens=48, eos=EOS):
    cfg = SamplingConfig(sample_.gen_temperature, sample_.gen_top_p, sample_.seed)
    return generate(target, sample_.prompt, cfg, max_new_tokens, make_rng(sample_.seed), eos)


def write_distill_dataset(samples, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(asdict(s)) + "\n")
    return path


def read_distill_dataset(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"distillation dataset not found: {path}")
    with open(path) as fh:
        return [DistillSample(**json.loads(line)) for line in fh if line.strip()]


def read_prompt_file(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"prompt file not found: {path}")
    # one prompt per line; "\n" inside a prompt is written as the two characters \ n
    prompts = [ln.replace("\\n", "\n") for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not prompts:
        raise ValidationError(f"{path}: empty prompt file")
    return prompts


def write_prompt_file(prompts, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(p.replace("\n", "\\n") + "\n" for p in prompts), encoding="utf-8")
    return path


# --- finetuning -------------------------------------------------------------

def held_out_tvd(draft, target, seqs):
    """Mean over sequences of the mean next-token TVD(p_draft, q_target)."""
    vals = []
    for s in seqs:
        s = _as_tokens(s)
        vals.append(float(np.mean(tvd(draft.position_dists(s[:-1]), target.position_dists(s[:-1])))))
    return float(np.mean(vals))


def finetune(draft_ckpt, target, distill_ds, pretrain_corpus, loss_kind="tvdpp", steps=600,
             mix_ratio=(9, 1), batch_size=10, lr_schedule=None, n_checkpoints=8, seed=0,
             pretrain_seq_len=64, clip_norm=1.0, checkpoint_dir=None):
    """Distillation finetuning with the target in the loop.

    Returns ``[checkpoint_0, ...]``: the starting draft followed by
    ``n_checkpoints`` evenly spaced snapshots (just the start when
    ``steps == 0``).
    """
    loss_cfg = loss_kind if isinstance(loss_kind, LossConfig) else LossConfig(kind=loss_kind)
    if loss_cfg.kind is LossKind.CE:
        raise ValidationError("finetune needs a distillation loss (kld, tvd, tvdpp)")
    tag = loss_cfg.kind.value
    if not distill_ds:
        raise ValidationError("empty distillation dataset")
    start = _as_checkpoint(draft_ckpt)
    model = start.model
    first = Checkpoint(model, 0, None, tag, [])
    out = [first]
    if checkpoint_dir:
        save_checkpoint(first, Path(checkpoint_dir) / "ckpt_000.ckpt")
    if steps == 0:
        return out
    n_d, n_p = split_counts(batch_size, mix_ratio)
    lr_schedule = lr_schedule or LinearWarmupDecay(3.0, max(steps // 30, 1), steps)
    rng = make_rng(seed)
    seqs = [s.tokens for s in distill_ds]
    seq_len = min(pretrain_seq_len, pretrain_corpus.chunk_len)
    marks = {int(round(steps * (k + 1) / n_checkpoints)) for k in range(n_checkpoints)}
    q_cache, history = {}, []
    for step in range(steps):
        d_batch = [seqs[i] for i in rng.integers(0, len(seqs), size=n_d)]
        p_batch = list(_windows(pretrain_corpus.chunks, rng, n_p, seq_len)) if n_p else []
        bg = mixed_batch_grad(model, target, d_batch, p_batch, loss_cfg, rng, q_cache)
        if not np.isfinite(bg.loss):
            raise TrainingError("non-finite loss", step)
        model = sgd_step(model, bg.grads, lr_schedule(step), clip_norm, step)
        history.append(bg.loss)
        if step + 1 in marks:
            ck = Checkpoint(model, step + 1, rng.bit_generator.state, tag, list(history))
            out.append(ck)
            if checkpoint_dir:
                save_checkpoint(ck, Path(checkpoint_dir) / f"ckpt_{len(out) - 1:03d}.ckpt")
    return out


# --- evaluation -------------------------------------------------------------

@dataclass
class Task:
    name: str
    prompts: list
    sampling: SamplingConfig
    max_tokens: int = 48


def default_tasks(seed=10_000, n_prompts=16):
    """Held-out ``qa`` prompts sampled at T=0.6/top-p 0.9; ``sum`` greedy."""
    qa = [encode(p) for p in synthetic.make_prompts("qa", n_prompts, seed)]
    sm = [encode(p) for p in synthetic.make_prompts("sum", n_prompts, seed + 1)]
    return [Task("qa", qa, SamplingConfig(0.6, 0.9)),
            Task("sum", sm, SamplingConfig(0.0, 1.0))]


def eval_sweep(checkpoints, target, tasks, gammas=(3, 5), seeds=(0,), c=None, loss_kind=None,
               formula=MBSUFormula.DEFAULT, eos=EOS):
    """One MetricsRecord per checkpoint x task x gamma x seed.

    ``checkpoints`` holds Checkpoint objects, bare models or paths to
    checkpoint files.
    """
    if not checkpoints:
        raise ValidationError("no checkpoints")
    if not tasks:
        raise ValidationError("no tasks")
    records = []
    for ck in checkpoints:
        if isinstance(ck, ToyLM):
            ck = Checkpoint(ck)
        elif not isinstance(ck, Checkpoint):
            ck = load_checkpoint(ck)
        draft = ck.model
        cc = c if c is not None else draft.n_params / target.n_params
        for task in tasks:
            for g in gammas:
                cfg = BlockConfig.same(g, task.sampling)
                for s in seeds:
                    tau, sp, ratio, acc = evaluate_blocks(target, draft, task.prompts, cfg,
                                                          task.max_tokens, s, cc, eos, formula)
                    records.append(MetricsRecord(task.name, loss_kind or ck.loss_kind, ck.step, g,
                                                 tau, sp, ratio, acc, s))
    return records


# --- end-to-end toy experiment ---------------------------------------------

@dataclass
class ToySetup:
    """Defaults for the desk-scale experiment used by tests and notebooks."""
    target_config: object = TARGET_CONFIG
    draft_config: object = DRAFT_CONFIG
    target_steps: int = 800
    corpus_chunks: int = 200
    chunk_len: int = 256
    pretrain_steps: int = 600
    n_seed_prompts: int = 48
    temps: tuple = DEFAULT_TEMPS
    top_p: float = DEFAULT_TOP_P
    finetune_steps: int = 600
    mix_ratio: tuple = (9, 1)
    batch_size: int = 10
    n_checkpoints: int = 8
    n_eval_prompts: int = 16
    n_heldout: int = 32
    losses: tuple = ("kld", "tvd", "tvdpp")
    gammas: tuple = (3, 5)


@dataclass
class DraftRun:
    seed: int
    base: Checkpoint
    dataset: list
    corpus: Corpus
    finetuned: dict = field(default_factory=dict)  # loss -> list of checkpoints


def prepare_draft(setup, target, seed):
    """Pretrain a draft and build its distillation dataset for one seed."""
    corpus = make_synthetic_corpus(seed, setup.corpus_chunks, setup.chunk_len,
                                   setup.draft_config.context_len)
    draft = TransformerLM.init(setup.draft_config, seed=seed + 100)
    base = pretrain(draft, corpus, setup.pretrain_steps, seed=seed + 200)
    prompts = synthetic.make_prompts("qa", setup.n_seed_prompts, seed + 300)
    ds = generate_distillation_dataset(target, prompts, setup.temps, setup.top_p, seed=seed + 400)
    return DraftRun(seed, base, ds, corpus)


def heldout_sequences(target, n, seed=20_000):
    prompts = synthetic.make_prompts("qa", n, seed)
    ds = generate_distillation_dataset(target, prompts, temps=(0.7,), top_p=DEFAULT_TOP_P, seed=seed)
    return [s.tokens for s in ds]
