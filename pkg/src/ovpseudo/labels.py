"""Label vocabulary shared by the pipeline, anchors and reports."""

from __future__ import annotations

from enum import Enum


class Grounding(str, Enum):
    FOREGROUND = "Foreground"
    BACKGROUND = "Background"


def normalize_label(text: str) -> str:
    """Lowercase, trim, collapse internal whitespace."""
    return " ".join(text.lower().split())
