"""Fallback token counting.

Backends that report usage are authoritative.  When usage is missing,
prompts and completions are counted as runs of word characters plus
individual punctuation marks.  The count is subadditive under
concatenation, which keeps prompt-length bounds compositional.  Reports
label which counting method produced their numbers.
"""

from __future__ import annotations

import re

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")

TOKENIZER_NAME = "word-punct-fallback"


def approx_token_count(text: str) -> int:
    return len(_TOKEN_RE.findall(text))
