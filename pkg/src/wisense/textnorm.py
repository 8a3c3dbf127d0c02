"""Shared text normalization: lowercase, split on whitespace and punctuation.

Single implementation used by the text encoder vocabulary, all automated
metrics, and caption handling, so every component sees identical tokens.
"""

from __future__ import annotations

import re

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def detokenize(tokens) -> str:
    return " ".join(tokens)
