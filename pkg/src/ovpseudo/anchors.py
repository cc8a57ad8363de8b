"""Semantic anchors: frequency filtering of pseudo-labels and the open-world base set."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

from .annotations import Annotation, Dataset
from .io import atomic_write_text
from .labels import Grounding, normalize_label

LabelHistogram = Counter


class ThresholdMode(str, Enum):
    MIN = "MIN"  # minimum ground-truth count over base classes
    ALL = "ALL"  # keep every label


@dataclass(frozen=True)
class SemanticAnchorSet:
    foreground: frozenset = frozenset()
    background: frozenset = frozenset()
    outliers: frozenset = frozenset()
    threshold: int = 0

    def __post_init__(self):
        for name in ("foreground", "background", "outliers"):
            object.__setattr__(self, name, frozenset(getattr(self, name)))
        if (self.foreground & self.background) or (self.foreground & self.outliers) \
                or (self.background & self.outliers):
            raise ValueError("anchor sets must be pairwise disjoint")

    def to_json(self) -> dict:
        return {
            "threshold": self.threshold,
            "foreground": sorted(self.foreground),
            "background": sorted(self.background),
            "outliers": sorted(self.outliers),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SemanticAnchorSet":
        return cls(
            frozenset(obj["foreground"]),
            frozenset(obj["background"]),
            frozenset(obj["outliers"]),
            int(obj["threshold"]),
        )

    def write(self, path) -> None:
        atomic_write_text(path, json.dumps(self.to_json(), indent=2) + "\n")


def aggregate_grounding(votes: Mapping[str, Mapping[str, int]]) -> dict[str, Grounding]:
    """Per-label majority over occurrence verdicts; ties go to Background.

    ``votes`` maps label -> {"Foreground": n, "Background": m}. Labels with
    no votes at all (every grounding answer failed to parse) are left out.
    """
    out = {}
    for label, v in votes.items():
        fg = int(v.get(Grounding.FOREGROUND.value, 0))
        bg = int(v.get(Grounding.BACKGROUND.value, 0))
        if fg + bg == 0:
            continue
        out[label] = Grounding.FOREGROUND if fg > bg else Grounding.BACKGROUND
    return out


def min_base_threshold(dataset: Dataset) -> int:
    """Smallest ground-truth annotation count among base classes that occur."""
    counts = Counter(a.category for a in dataset.annotations
                     if not a.is_pseudo and a.category in dataset.base_classes)
    if not counts:
        raise ValueError("dataset has no base-class ground-truth annotations")
    return min(counts.values())


def resolve_threshold(mode: ThresholdMode | str, dataset: Dataset | None = None) -> int:
    mode = mode if isinstance(mode, ThresholdMode) else ThresholdMode(str(mode).upper())
    if mode is ThresholdMode.ALL:
        return 0
    if dataset is None:
        raise ValueError("MIN threshold mode needs the ground-truth dataset")
    return min_base_threshold(dataset)


def filter_anchors(hist: Mapping[str, int], grounding: Mapping[str, Grounding | str],
                   threshold: int) -> SemanticAnchorSet:
    """Split labels into foreground / background anchors and outliers.

    Labels missing from ``grounding`` are excluded from all three sets.
    """
    fg, bg, out = set(), set(), set()
    for label, count in hist.items():
        verdict = grounding.get(label)
        if verdict is None:
            continue
        if count < threshold:
            out.add(label)
        elif Grounding(verdict) is Grounding.FOREGROUND:
            fg.add(label)
        else:
            bg.add(label)
    return SemanticAnchorSet(frozenset(fg), frozenset(bg), frozenset(out), int(threshold))


def merge_open_world_base(base: Iterable[str], anchors: SemanticAnchorSet) -> set[str]:
    """Base classes plus foreground anchors; a label equal to a base name after normalization adds nothing."""
    merged = set(base)
    taken = {normalize_label(b) for b in merged}
    for label in sorted(anchors.foreground):
        if normalize_label(label) not in taken:
            merged.add(label)
            taken.add(normalize_label(label))
    return merged


def cbl_plus_plus_filter(annotations: Sequence[Annotation], novel_classes: Iterable[str]) -> list[Annotation]:
    """Drop pseudo annotations whose label names a ground-truth novel class."""
    novel = {normalize_label(c) for c in novel_classes}
    return [a for a in annotations
            if not (a.is_pseudo and normalize_label(a.category) in novel)]


# ---------------------------------------------------------------------------
# statistics


@dataclass
class StatsReport:
    classes: int = 0
    annotations: int = 0
    unsure: int = 0
    benchmarks: dict = field(default_factory=dict)

    NOTE = "benchmark annotation counts include every pseudo annotation whose label matches, not only anchors"

    def to_json(self) -> dict:
        return {
            "note": self.NOTE,
            "total": {"classes": self.classes, "annotations": self.annotations, "unsure": self.unsure},
            "benchmarks": {k: dict(v) for k, v in sorted(self.benchmarks.items())},
        }

    def to_table(self) -> str:
        header = ["", "#Classes", "#Annotations", "#Unsure"]
        rows = [["Total", f"{self.classes:,}", f"{self.annotations:,}", f"{self.unsure:,}"]]
        for name, b in sorted(self.benchmarks.items()):
            rows.append([f"{name} ({b['vocabulary']:,} classes)", f"{b['classes']:,}",
                         f"{b['annotations']:,}", "-"])
        widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]

        def fmt(r):
            return "  ".join(c.ljust(widths[0]) if i == 0 else c.rjust(widths[i])
                             for i, c in enumerate(r))

        lines = [f"# {self.NOTE}", fmt(header), fmt(["-" * w for w in widths])]
        lines += [fmt(r) for r in rows]
        return "\n".join(lines) + "\n"


def stats_report(histogram: Mapping[str, int], unsure: int,
                 vocabularies: Mapping[str, Iterable[str]] | None = None) -> StatsReport:
    """Pseudo-label statistics overall and per benchmark vocabulary (exact match after normalization)."""
    hist = Counter({normalize_label(k): 0 for k in histogram})
    for k, v in histogram.items():
        hist[normalize_label(k)] += int(v)
    hist = Counter({k: v for k, v in hist.items() if v > 0})
    report = StatsReport(classes=len(hist), annotations=sum(hist.values()), unsure=int(unsure))
    for name, vocab in (vocabularies or {}).items():
        names = {normalize_label(c) for c in vocab}
        covered = names & hist.keys()
        report.benchmarks[name] = {
            "vocabulary": len(names),
            "classes": len(covered),
            "annotations": sum(hist[c] for c in covered),
        }
    return report


def merge_histograms(histograms: Iterable[Mapping[str, int]]) -> Counter:
    total: Counter = Counter()
    for h in histograms:
        total.update(h)
    return total
