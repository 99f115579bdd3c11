"""Word-sequence transcripts and their character encoding.

The recognizer emits characters over a 28-symbol alphabet: index 0 is the
CTC blank, 1..26 are lowercase letters, 27 is the inter-word space.
"""

from __future__ import annotations

from dataclasses import dataclass

BLANK_ID = 0
CHARACTERS = "abcdefghijklmnopqrstuvwxyz "
VOCAB_SIZE = len(CHARACTERS) + 1  # 28 including blank
_CHAR_TO_ID = {ch: i + 1 for i, ch in enumerate(CHARACTERS)}
_ID_TO_CHAR = {i + 1: ch for i, ch in enumerate(CHARACTERS)}


@dataclass(frozen=True)
class Transcript:
    """Immutable sequence of words; may be empty when produced by a decoder."""

    words: tuple

    def __post_init__(self):
        object.__setattr__(self, "words", tuple(self.words))
        for word in self.words:
            if not word:
                raise ValueError("transcript words must be nonempty")
            for ch in word:
                if ch == " " or ch not in _CHAR_TO_ID:
                    raise ValueError(f"character {ch!r} not in the recognizer alphabet")

    @classmethod
    def from_text(cls, text):
        return cls(words=tuple(text.split()))

    @property
    def text(self):
        return " ".join(self.words)

    def char_ids(self):
        """Label ids of the spelled-out transcript, spaces between words."""
        return [_CHAR_TO_ID[ch] for ch in self.text]

    def __len__(self):
        return len(self.words)

    def __bool__(self):
        return bool(self.words)

    def __str__(self):
        return self.text


def ids_to_text(ids):
    """Inverse of char_ids for already-collapsed, blank-free label ids."""
    return "".join(_ID_TO_CHAR[i] for i in ids)
