"""Independent reference implementation of the string-rewrite semantics.

Deliberately written on a different substrate than the main engine:
patterns are compiled to regular expressions and matching relies on
`re`'s leftmost non-overlapping scan.  Used only to cross-check
`strings.apply_transformation`; never called by training or evaluation.
"""

from __future__ import annotations

import re

from .strings import CONSONANT, VOWEL, StringsError, Transformation

_CLASS_RE = {VOWEL: "[aeiou]", CONSONANT: "[bcdfghjklmnpqrstvwxyz]"}


def _pattern_regex(pattern):
    return "".join(_CLASS_RE.get(a, re.escape(a)) for a in pattern)


def oracle_apply(t: Transformation, s: str, max_output_len: int = 48) -> str:
    if t.kind == "insert_at":
        if t.index > len(s) + 1:
            raise StringsError(f"insert_at index {t.index} out of range")
        out = s[:t.index - 1] + t.text + s[t.index - 1:]
    else:
        regex = re.compile(_pattern_regex(t.pattern))
        if t.kind == "replace":
            out = regex.sub(t.text.replace("\\", ""), s)
        elif t.kind == "insert_before":
            out = regex.sub(lambda m: t.text + m.group(0), s)
        else:
            out = regex.sub(lambda m: m.group(0) + t.text, s)
    if len(out) > max_output_len:
        raise StringsError(f"output length {len(out)} exceeds cap")
    return out
