"""Vocabulary and fixed-length caption storage.

Captions are stored in 18 slots: a boundary PAD, up to 16 content tokens
padded with PAD, and a closing boundary PAD.  PAD doubles as the start and
end marker during decoding.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import VocabularyError

PAD = "<pad>"
UNK = "<unk>"
MAX_CONTENT = 16
STORED_LENGTH = MAX_CONTENT + 2


class Vocabulary:
    """Bidirectional word/index map with reserved PAD (0) and UNK (1)."""

    def __init__(self, words: Sequence[str]):
        words = list(words)
        if len(set(words)) != len(words):
            raise ValueError("duplicate words in vocabulary")
        if PAD in words or UNK in words:
            raise ValueError("reserved tokens may not appear as corpus words")
        self.itos = [PAD, UNK] + words
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    pad_index = 0
    unk_index = 1

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, word: str) -> bool:
        return word in self.stoi

    def index(self, word: str) -> int:
        return self.stoi.get(word, self.unk_index)

    def word(self, index: int) -> str:
        if not 0 <= index < len(self.itos):
            raise VocabularyError(f"token index {index} outside vocabulary of size {len(self)}")
        return self.itos[index]

    def check(self, index: int) -> int:
        if not 0 <= int(index) < len(self.itos):
            raise VocabularyError(f"token index {index} outside vocabulary of size {len(self)}")
        return int(index)

    @property
    def words(self) -> list[str]:
        return self.itos[2:]

    @classmethod
    def build(cls, texts: Iterable[str], min_count: int = 5) -> "Vocabulary":
        """Keep words occurring strictly more than ``min_count`` times."""
        counts = Counter(w for text in texts for w in text.split())
        kept = [w for w, c in counts.items() if c > min_count and w not in (PAD, UNK)]
        kept.sort(key=lambda w: (-counts[w], w))
        return cls(kept)


@dataclass(frozen=True)
class Caption:
    tokens: tuple[int, ...]
    role: str = "reference"

    def __post_init__(self):
        if len(self.tokens) != STORED_LENGTH:
            raise ValueError(f"captions are stored in {STORED_LENGTH} slots, got {len(self.tokens)}")
        if self.tokens[0] != Vocabulary.pad_index or self.tokens[-1] != Vocabulary.pad_index:
            raise ValueError("boundary slots must hold PAD")

    @classmethod
    def from_content(cls, content: Sequence[int], role: str = "reference") -> "Caption":
        content = [int(t) for t in content][:MAX_CONTENT]
        if Vocabulary.pad_index in content:
            content = content[: content.index(Vocabulary.pad_index)]
        body = content + [Vocabulary.pad_index] * (MAX_CONTENT - len(content))
        return cls(tuple([Vocabulary.pad_index] + body + [Vocabulary.pad_index]), role)

    @property
    def content(self) -> list[int]:
        body = list(self.tokens[1:-1])
        if Vocabulary.pad_index in body:
            body = body[: body.index(Vocabulary.pad_index)]
        return body

    def __len__(self) -> int:
        return len(self.content)


def encode_caption(text: str, vocab: Vocabulary, role: str = "reference") -> Caption:
    """Truncate to 16 words, map to indices (UNK for unknown), pad to 18 slots."""
    words = text.split()[:MAX_CONTENT]
    return Caption.from_content([vocab.index(w) for w in words], role)


def decode_caption(caption: Caption | Sequence[int], vocab: Vocabulary) -> str:
    content = caption.content if isinstance(caption, Caption) else Caption.from_content(caption).content
    return " ".join(vocab.word(t) for t in content)
