"""Character-level tokenizer with a fixed 72-entry vocabulary.

Layout of the id space:

- ``0..3``   specials PAD, BOS, EOS, IMG
- ``4..41``  characters: space, comma, digits ``0-9``, letters ``a-z``
- ``42..71`` reserved (never produced by ``encode``)

``encode`` never adds specials; the sequence builder in ``taskgen`` places BOS,
the IMG placeholders and the trailing EOS of an answer. ``decode`` stops at
the first EOS, skips PAD/BOS/IMG and renders reserved ids as ``~`` so model
output of any kind can be turned into text.
"""

from __future__ import annotations

import string

from .errors import EncodeError

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
IMG_ID = 3

SPECIALS = {"<pad>": PAD_ID, "<bos>": BOS_ID, "<eos>": EOS_ID, "<img>": IMG_ID}
CHARACTERS = " ," + string.digits + string.ascii_lowercase
VOCAB_SIZE = 72

RESERVED_GLYPH = "~"


class Tokenizer:
    """Bidirectional map between vocabulary characters and token ids."""

    def __init__(self) -> None:
        offset = len(SPECIALS)
        self._char_to_id = {ch: offset + i for i, ch in enumerate(CHARACTERS)}
        self._id_to_char = {i: ch for ch, i in self._char_to_id.items()}
        self.vocab_size = VOCAB_SIZE

    def encode(self, text: str) -> list[int]:
        ids = []
        for position, ch in enumerate(text):
            token = self._char_to_id.get(ch)
            if token is None:
                raise EncodeError(f"character {ch!r} at offset {position} is not in the vocabulary")
            ids.append(token)
        return ids

    def decode(self, tokens: list[int]) -> str:
        chars = []
        for token in tokens:
            if token == EOS_ID:
                break
            if token in (PAD_ID, BOS_ID, IMG_ID):
                continue
            chars.append(self._id_to_char.get(token, RESERVED_GLYPH))
        return "".join(chars)

    def token_id(self, ch: str) -> int:
        return self.encode(ch)[0]


TOKENIZER = Tokenizer()


def encode(text: str) -> list[int]:
    return TOKENIZER.encode(text)


def decode(tokens: list[int]) -> str:
    return TOKENIZER.decode(tokens)
