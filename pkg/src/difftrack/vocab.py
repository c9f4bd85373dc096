"""Shared caption vocabulary.

The synthetic scene generator and the text tokenizer must agree on the word
list, so it lives here rather than in either module.
"""

COLORS = ["red", "green", "blue", "yellow", "magenta", "cyan", "orange", "white"]
SHAPES = ["square", "circle", "triangle"]
FILLER = [
    "the", "a", "an", "moving", "among", "between", "with", "and",
    "target", "object", "alone", "plain", "on", "dark", "background",
]

PAD_ID = 0
OOV_ID = 1
PAD_TOKEN = "<pad>"
OOV_TOKEN = "<oov>"

TEXT_LEN = 16


def build_vocab() -> dict:
    """Word -> id map. Ids 0/1 are reserved for PAD/OOV; plurals included."""
    words = list(COLORS) + SHAPES + [s + "s" for s in SHAPES] + FILLER
    vocab = {PAD_TOKEN: PAD_ID, OOV_TOKEN: OOV_ID}
    for w in words:
        if w not in vocab:
            vocab[w] = len(vocab)
    return vocab


VOCAB = build_vocab()
VOCAB_SIZE = len(VOCAB)
