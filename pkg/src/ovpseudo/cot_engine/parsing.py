"""Parsers for raw MLLM answers."""

from __future__ import annotations

import re

from ..annotations import Answer, TernaryVerdict
from ..labels import Grounding, normalize_label

MAX_LABEL_WORDS = 2

_ANSWER_LINE = re.compile(r"^\s*answer\s*:(.*)$", re.IGNORECASE)
_REASONING_LINE = re.compile(r"^\s*reasoning\s*:(.*)$", re.IGNORECASE)
_TERNARY = re.compile(r"\b(yes|no|unsure)\b", re.IGNORECASE)
_GROUNDING = re.compile(r"\b(foreground|background)\b", re.IGNORECASE)
_EDGE_PUNCT = "\"'`.,;:!?*()[]{}"


class ParseError(ValueError):
    """An answer that fits none of the expected forms; ``raw`` keeps the text."""

    def __init__(self, message: str, raw: str):
        super().__init__(message)
        self.raw = raw


def answer_text(raw: str) -> str:
    """Text of the ``Answer:`` line, or the first non-empty line when there is none."""
    lines = raw.splitlines()
    for i, line in enumerate(lines):
        m = _ANSWER_LINE.match(line)
        if m is None:
            continue
        value = m.group(1).strip()
        if value:
            return value
        # "Answer:" alone, value on a following line
        for nxt in lines[i + 1:]:
            if _REASONING_LINE.match(nxt):
                break
            if nxt.strip():
                return nxt.strip()
        return ""
    for line in lines:
        if line.strip() and not _REASONING_LINE.match(line):
            return line.strip()
    return ""


def reasoning_text(raw: str) -> str | None:
    lines = raw.splitlines()
    for i, line in enumerate(lines):
        m = _REASONING_LINE.match(line)
        if m is None:
            continue
        value = m.group(1).strip()
        if not value:
            rest = [ln.strip() for ln in lines[i + 1:] if ln.strip()]
            value = " ".join(rest)
        if not value or value.lower() in ("none", "n/a", "<your_reasoning>"):
            return None
        return value
    return None


def parse_verdict(raw: str) -> TernaryVerdict:
    m = _TERNARY.search(answer_text(raw))
    if m is None:
        raise ParseError("no Yes/No/Unsure answer", raw)
    answer = Answer(m.group(1).capitalize())
    if answer is Answer.UNSURE:
        return TernaryVerdict(answer, reasoning_text(raw))
    return TernaryVerdict(answer)


def parse_label(raw: str, max_words: int = MAX_LABEL_WORDS) -> str:
    label = normalize_label(answer_text(raw)).strip(_EDGE_PUNCT + " ")
    label = normalize_label(label)
    if not label:
        raise ParseError("empty label", raw)
    if len(label.split()) > max_words:
        raise ParseError(f"label has more than {max_words} words: {label!r}", raw)
    return label


def parse_grounding(raw: str) -> Grounding:
    m = _GROUNDING.search(answer_text(raw))
    if m is None:
        raise ParseError("no Foreground/Background answer", raw)
    return Grounding(m.group(1).capitalize())
