"""Byte-level fallback tokenizer: one token per UTF-8 byte plus a few specials."""

from __future__ import annotations

from typing import NamedTuple


class Token(NamedTuple):
    id: int
    text: str


class ByteTokenizer:
    BOS = 256
    END_OF_THOUGHT = 257
    PAD = 258
    vocab_size = 259

    _SPECIAL_TEXT = {BOS: "", END_OF_THOUGHT: "", PAD: ""}

    def encode(self, text: str) -> list[int]:
        return list(text.encode("utf-8"))

    def decode(self, ids) -> str:
        return bytes(i for i in ids if i < 256).decode("utf-8", errors="replace")

    def token(self, i: int) -> Token:
        if i >= 256:
            return Token(i, self._SPECIAL_TEXT.get(i, ""))
        # a lone byte of a multi-byte character decodes to U+FFFD; chains are
        # re-decoded as a whole when text matters
        return Token(i, bytes([i]).decode("latin-1"))

    def tokens(self, text: str) -> list[Token]:
        return [self.token(i) for i in self.encode(text)]

    def fit(self, text: str, length: int) -> list[Token]:
        """Encode ``text`` into exactly ``length`` tokens, padding with spaces or truncating."""
        ids = self.encode(text)[:length]
        ids += [ord(" ")] * (length - len(ids))
        return [self.token(i) for i in ids]
