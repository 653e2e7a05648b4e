"""Glob patterns over slash-separated names.

Only two wildcards exist: ``*`` matches any run of characters that does not
contain ``/`` and ``?`` matches exactly one character other than ``/``.
"""
from __future__ import annotations

import re
from functools import lru_cache

SEP = "/"


def is_literal(pattern: str) -> bool:
    return "*" not in pattern and "?" not in pattern


@lru_cache(maxsize=4096)
def _compile(pattern: str) -> re.Pattern:
    out = []
    for ch in pattern:
        if ch == "*":
            out.append("[^/]*")
        elif ch == "?":
            out.append("[^/]")
        else:
            out.append(re.escape(ch))
    return re.compile("".join(out) + r"\Z", re.DOTALL)


def glob_match(pattern: str, name: str) -> bool:
    """True if the literal ``name`` is matched by ``pattern``."""
    return _compile(pattern).match(name) is not None


def _closure(pattern: str, states: set[int]) -> frozenset[int]:
    # a star may match the empty run, so it can be skipped
    out = set(states)
    stack = list(states)
    while stack:
        i = stack.pop()
        if i < len(pattern) and pattern[i] == "*" and i + 1 not in out:
            out.add(i + 1)
            stack.append(i + 1)
    return frozenset(out)


def _step(pattern: str, states: frozenset[int], ch: str) -> frozenset[int]:
    nxt = set()
    for i in states:
        if i >= len(pattern):
            continue
        tok = pattern[i]
        if tok == "*":
            if ch != SEP:
                nxt.add(i)
        elif tok == "?":
            if ch != SEP:
                nxt.add(i + 1)
        elif tok == ch:
            nxt.add(i + 1)
    return _closure(pattern, nxt)


@lru_cache(maxsize=4096)
def patterns_intersect(a: str, b: str) -> bool:
    """True iff some literal name is matched by both patterns.

    Explores the product of the two patterns' automata. The alphabet is
    reduced to the literal characters of either pattern, the separator, and
    one stand-in for every other character.
    """
    if not a or not b:
        raise ValueError("patterns must be nonempty")
    if is_literal(a):
        return glob_match(b, a)
    if is_literal(b):
        return glob_match(a, b)
    literals = {c for c in a + b if c not in "*?"}
    other = "\x00"
    while other in literals:
        other = chr(ord(other) + 1)
    alphabet = sorted(literals | {SEP, other})

    start = (_closure(a, {0}), _closure(b, {0}))
    seen = {start}
    frontier = [start]
    while frontier:
        sa, sb = frontier.pop()
        if len(a) in sa and len(b) in sb:
            return True
        for ch in alphabet:
            na, nb = _step(a, sa, ch), _step(b, sb, ch)
            if na and nb and (na, nb) not in seen:
                seen.add((na, nb))
                frontier.append((na, nb))
    return False
