"""Answer normalization and tolerant equivalence checks.

Covers the answer shapes the solving loop actually produces: integers,
decimals, plain ``a/b`` fractions, and ``\\frac{a}{b}`` forms.  Anything
else is compared as whitespace-collapsed text.  Numeric comparisons run
in exact rational arithmetic, so equivalence is symmetric, reflexive,
and collapses to strict equality at tolerance zero.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction

DEFAULT_TOLERANCE = 1e-6

_DELIMITER_PAIRS = (("\\(", "\\)"), ("\\[", "\\]"), ("$", "$"))

_FRAC_RE = re.compile(r"^([+-]?)\\[dt]?frac\{(-?\d+)\}\{(-?\d+)\}$")
_RATIO_RE = re.compile(r"^([+-]?\d+)\s*/\s*(\d+)$")
_INT_RE = re.compile(r"^[+-]?\d+$")
_DECIMAL_RE = re.compile(r"^[+-]?(?:\d+\.\d*|\.\d+)(?:[eE][+-]?\d+)?$|^[+-]?\d+[eE][+-]?\d+$")


class AnswerKind(str, Enum):
    RATIONAL = "rational"
    DECIMAL = "decimal"
    TEXT = "text"


@dataclass(frozen=True, slots=True)
class CanonicalAnswer:
    kind: AnswerKind
    text: str
    value: Fraction | None = None

    def __str__(self) -> str:
        return self.text


def _strip_math(raw: str) -> str:
    text = raw.strip()
    changed = True
    while changed:
        changed = False
        for open_d, close_d in _DELIMITER_PAIRS:
            min_len = len(open_d) + len(close_d)
            if open_d == close_d:
                min_len -= 1
            if text.startswith(open_d) and text.endswith(close_d) and len(text) > min_len:
                text = text[len(open_d):len(text) - len(close_d)].strip()
                changed = True
    return text


def normalize(answer_text: str) -> CanonicalAnswer:
    """Reduce an answer string to a canonical, comparable form.

    Idempotent over its own text form: normalize(str(normalize(x)))
    equals normalize(x).
    """
    text = _strip_math(answer_text)

    m = _FRAC_RE.match(text)
    if m:
        sign, num, den = m.groups()
        if int(den) != 0:
            value = Fraction(int(num), int(den))
            if sign == "-":
                value = -value
            return CanonicalAnswer(AnswerKind.RATIONAL, str(value), value)

    m = _RATIO_RE.match(text)
    if m and int(m.group(2)) != 0:
        value = Fraction(int(m.group(1)), int(m.group(2)))
        return CanonicalAnswer(AnswerKind.RATIONAL, str(value), value)

    if _INT_RE.match(text):
        value = Fraction(int(text))
        return CanonicalAnswer(AnswerKind.RATIONAL, str(value), value)

    if _DECIMAL_RE.match(text):
        parsed = float(text)
        if math.isfinite(parsed):
            # Exact binary value of the literal; repr(float) round-trips.
            return CanonicalAnswer(AnswerKind.DECIMAL, repr(parsed), Fraction(parsed))

    collapsed = " ".join(text.split())
    return CanonicalAnswer(AnswerKind.TEXT, collapsed)


def equivalent(a: str, b: str, tol: float = DEFAULT_TOLERANCE) -> bool:
    """Whether two answer strings agree, numerically when possible.

    Rational-vs-rational comparisons are exact.  Comparisons involving a
    decimal use relative tolerance tol:
    ``|x - y| <= tol * max(|x|, |y|)``.
    """
    if tol < 0:
        raise ValueError("tolerance must be >= 0")
    ca = normalize(a)
    cb = normalize(b)
    if ca.kind is AnswerKind.TEXT or cb.kind is AnswerKind.TEXT:
        return ca.kind is cb.kind and ca.text == cb.text
    assert ca.value is not None and cb.value is not None
    if ca.kind is AnswerKind.RATIONAL and cb.kind is AnswerKind.RATIONAL:
        return ca.value == cb.value
    bound = Fraction(tol) * max(abs(ca.value), abs(cb.value))
    return abs(ca.value - cb.value) <= bound
