"""Fixed 64-symbol character vocabulary shared by draft and target."""

EOS = 0
UNK = 1
_CHARS = " abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ.,?!:;\n-'"
SYMBOLS = ["<eos>", "<unk>"] + list(_CHARS)
VOCAB_SIZE = len(SYMBOLS)
_INDEX = {c: i for i, c in enumerate(SYMBOLS) if len(c) == 1}

assert VOCAB_SIZE == 64


def encode(text, add_eos=False):
    ids = [_INDEX.get(c, UNK) for c in text]
    if add_eos:
        ids.append(EOS)
    return ids


def decode(ids):
    return "".join("" if i == EOS else ("?" if i == UNK else SYMBOLS[i]) for i in ids)
