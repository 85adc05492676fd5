"""Byte-level toy tokenizer.

Id layout: 0 = end of sequence, 1 = pad, 2..257 = byte values 0..255.
Ids from 258 up to the vocabulary size are valid model outputs that no text maps to.
"""

from __future__ import annotations

END_ID = 0
PAD_ID = 1
BYTE_OFFSET = 2
BYTE_VOCAB = BYTE_OFFSET + 256


def encode(text: str | bytes) -> list[int]:
    data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    return [b + BYTE_OFFSET for b in data]


def decode_bytes(tokens: list[int]) -> bytes:
    out = bytearray()
    for tok in tokens:
        if tok == END_ID:
            break
        if BYTE_OFFSET <= tok < BYTE_VOCAB:
            out.append(tok - BYTE_OFFSET)
    return bytes(out)


def decode(tokens: list[int]) -> str:
    """Render ids as text; non-byte ids are dropped and invalid UTF-8 is replaced."""
    return decode_bytes(tokens).decode("utf-8", errors="replace")


def strip_terminator(tokens: list[int]) -> list[int]:
    """Cut the sequence at the first end token."""
    for idx, tok in enumerate(tokens):
        if tok == END_ID:
            return list(tokens[:idx])
    return list(tokens)
