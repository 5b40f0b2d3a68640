"""Tokenization and normalization helpers shared across modules.

Everything here is deliberately simple: lowercase word tokens split on
whitespace/punctuation. The entity dictionary is expected to enumerate
inflections, so no stemming is applied anywhere.
"""

from __future__ import annotations

import re

_WORD = re.compile(r"\w+")


def tokenize(text: str) -> list[str]:
    """Lowercase word tokens, punctuation and whitespace dropped."""
    return _WORD.findall(text.lower())


def token_spans(text: str) -> list[tuple[int, int]]:
    """(start, end) offsets of each word token in the original text."""
    return [m.span() for m in _WORD.finditer(text)]


def normalize(text: str) -> str:
    """Canonical comparison form: lowercased tokens joined by single spaces."""
    return " ".join(tokenize(text))


def collapse_ws(text: str) -> str:
    """Collapse runs of whitespace to single spaces and strip the ends."""
    return " ".join(text.split())
