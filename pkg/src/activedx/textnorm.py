"""Shared text normalization and token-overlap scoring.

Used by the entity linker, the documented-results oracle, and the eval
matcher so that all three agree on what counts as "the same name".
"""

from __future__ import annotations

import re
from typing import Iterable

_NON_ALNUM = re.compile(r"[^a-z0-9]+")
_COMPOUND = re.compile(r"[,/]")


def normalize(text: str) -> str:
    """Lowercase, map punctuation runs to single spaces, collapse whitespace."""
    return _NON_ALNUM.sub(" ", text.lower()).strip()


def token_set(text: str) -> frozenset[str]:
    norm = normalize(text)
    return frozenset(norm.split()) if norm else frozenset()


def overlap_score(a: str, b: str) -> float:
    """Symmetric token-overlap ratio: |A & B| / min(|A|, |B|).

    1.0 when either side's token set is contained in the other's, 0.0 when
    either side normalizes to nothing.
    """
    ta, tb = token_set(a), token_set(b)
    if not ta or not tb:
        return 0.0
    return len(ta & tb) / min(len(ta), len(tb))


def split_compound(text: str) -> list[str]:
    """Split a compound name on commas and slashes, dropping empty pieces."""
    return [part.strip() for part in _COMPOUND.split(text) if part.strip()]


def dedupe_normalized(items: Iterable[str]) -> list[str]:
    """Order-preserving dedup by normalized form; keeps the first spelling."""
    seen: set[str] = set()
    out: list[str] = []
    for item in items:
        key = normalize(item)
        if not key or key in seen:
            continue
        seen.add(key)
        out.append(item.strip())
    return out
