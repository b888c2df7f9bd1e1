"""Synthetic text sources standing in for real corpora and instructions.

Corpus source
    A hidden Markov chain over a fixed lexicon of 48 lowercase words. The
    hidden state is the current word; each word has four successors with
    probabilities (0.5, 0.25, 0.15, 0.1). A sentence starts from a uniformly
    chosen word, runs 4-9 words separated by spaces and ends with ".". The
    lexicon and the successor table come from a fixed structure seed, so
    only the sampling depends on the caller's seed.

Prompt families
    ``qa`` (in-distribution chat task): ``"Q: w1 w2 w3?\\nA:"``. The reference
    answer continues the chain from the successor of the last prompt word,
    written in UPPERCASE, 3-5 words, ending with ".".
    ``sum`` (structurally different task): ``"S: <sentence> <sentence>\\nT:"``.
    The reference answer restates the first word of each sentence in
    UPPERCASE followed by one chain successor of the last one, ending "."

Drafts only ever see the corpus during pretraining; the target is trained on
corpus plus both families, so the answer regime is what distillation must
transfer.
"""
import numpy as np

from .vocab import encode

STRUCTURE_SEED = 20240422
N_WORDS = 48
SUCC_PROBS = np.array([0.5, 0.25, 0.15, 0.1])
_LETTERS = "abcdefghijklmnopqrstuvwxyz"


def _build_structure():
    rng = np.random.default_rng(STRUCTURE_SEED)
    words = set()
    while len(words) < N_WORDS:
        n = int(rng.integers(2, 7))
        words.add("".join(rng.choice(list(_LETTERS), size=n)))
    words = sorted(words)
    succ = np.stack([rng.choice(N_WORDS, size=4, replace=False) for _ in range(N_WORDS)])
    return words, succ


LEXICON, SUCCESSORS = _build_structure()


def _walk(rng, start, n):
    out = [start]
    for _ in range(n - 1):
        out.append(int(SUCCESSORS[out[-1]][rng.choice(4, p=SUCC_PROBS)]))
    return out


def sentence(rng):
    w = _walk(rng, int(rng.integers(N_WORDS)), int(rng.integers(4, 10)))
    return " ".join(LEXICON[i] for i in w) + "."


def corpus_texts(rng, n):
    return [sentence(rng) for _ in range(n)]


def qa_example(rng):
    """Return ``(prompt, reference_answer)`` for the ``qa`` family."""
    w = _walk(rng, int(rng.integers(N_WORDS)), int(rng.integers(3, 6)))
    prompt = "Q: " + " ".join(LEXICON[i] for i in w) + "?\nA:"
    start = int(SUCCESSORS[w[-1]][rng.choice(4, p=SUCC_PROBS)])
    ans = _walk(rng, start, int(rng.integers(3, 6)))
    return prompt, " " + " ".join(LEXICON[i].upper() for i in ans) + "."


def sum_example(rng):
    """Return ``(prompt, reference_answer)`` for the ``sum`` family."""
    a = _walk(rng, int(rng.integers(N_WORDS)), int(rng.integers(3, 6)))
    b = _walk(rng, int(rng.integers(N_WORDS)), int(rng.integers(3, 6)))
    text = " ".join(LEXICON[i] for i in a) + ". " + " ".join(LEXICON[i] for i in b) + "."
    prompt = "S: " + text + "\nT:"
    tail = int(SUCCESSORS[b[0]][rng.choice(4, p=SUCC_PROBS)])
    ans = [a[0], b[0], tail]
    return prompt, " " + " ".join(LEXICON[i].upper() for i in ans) + "."


FAMILIES = {"qa": qa_example, "sum": sum_example}


def make_prompts(family, n, seed):
    rng = np.random.default_rng(seed)
    return [FAMILIES[family](rng)[0] for _ in range(n)]


def target_training_texts(rng, n, corpus_frac=0.4):
    """Mixed documents for the toy target: corpus sentences and Q/A pairs."""
    out = []
    for _ in range(n):
        u = rng.random()
        if u < corpus_frac:
            out.append(sentence(rng) + " " + sentence(rng))
        else:
            fam = qa_example if u < corpus_frac + (1 - corpus_frac) * 0.6 else sum_example
            prompt, ans = fam(rng)
            out.append(prompt + ans)
    return [encode(t, add_eos=True) for t in out]
