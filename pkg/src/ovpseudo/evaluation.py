"""Box AP50 evaluation with crowded / occluded subsets and pseudo-label scoring."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .annotations import Annotation, BBox, Dataset, is_crowded, is_occluded, iou_matrix
from .kernels import greedy_assign

IOU_THRESHOLD = 0.5
RECALL_THRESHOLDS = np.arange(101) / 100.0


class Subset(str, Enum):
    ALL = "all"
    CROWDED = "crowded"
    OCCLUDED = "occluded"


class APMethod(str, Enum):
    COCO101 = "101"  # 101-point interpolation
    ENVELOPE = "envelope"  # exact area under the precision envelope


class OccludedMode(str, Enum):
    IGNORE = "ignore"  # non-occluded GTs become ignore regions
    DROP = "drop"  # non-occluded GTs removed; detections on them count as false positives


@dataclass(frozen=True)
class Detection:
    image_id: int
    category: str
    bbox: BBox
    score: float
    id: int = 0

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError("detection score must be finite")


@dataclass(frozen=True)
class Match:
    detection: int  # index into the score-sorted detection list
    gt: int | None  # index into the GT list, None when unmatched
    ignored: bool = False


@dataclass
class EvalReport:
    per_class: dict = field(default_factory=dict)  # category -> AP in [0, 1]
    mean_ap: float | None = None
    tp: int = 0
    fp: int = 0
    fn: int = 0
    n_gt: int = 0
    n_images: int = 0
    subset: str = Subset.ALL.value
    empty: bool = False

    def to_json(self) -> dict:
        return {
            "subset": self.subset,
            "empty": self.empty,
            "AP50": None if self.mean_ap is None else round(100.0 * self.mean_ap, 1),
            "per_class": {k: round(100.0 * v, 1) for k, v in sorted(self.per_class.items())},
            "counts": {"tp": self.tp, "fp": self.fp, "fn": self.fn, "gt": self.n_gt, "images": self.n_images},
        }

    def to_table(self) -> str:
        ap = "empty" if self.mean_ap is None else f"{100.0 * self.mean_ap:.1f}"
        lines = [f"subset={self.subset}  AP50={ap}  TP={self.tp} FP={self.fp} FN={self.fn} GT={self.n_gt}"]
        width = max((len(k) for k in self.per_class), default=5)
        for k, v in sorted(self.per_class.items()):
            lines.append(f"  {k.ljust(width)}  {100.0 * v:5.1f}")
        return "\n".join(lines) + "\n"


def sort_detections(detections: Iterable[Detection]) -> list[Detection]:
    return sorted(detections, key=lambda d: (-d.score, d.id))


def greedy_match(detections: Sequence[Detection], gts: Sequence[Annotation],
                 iou_threshold: float = IOU_THRESHOLD, ignore: Sequence[bool] | None = None) -> list[Match]:
    """Match score-sorted detections to same-image, same-class ground truth.

    Each detection takes the unmatched GT of its class with the highest IoU
    at or above the threshold; each GT is matched at most once. GTs flagged
    in ``ignore`` act as ignore regions: a detection landing only on one is
    marked ignored instead of counting as a false positive.
    """
    ignore = [False] * len(gts) if ignore is None else list(ignore)
    groups_d: dict = defaultdict(list)
    groups_g: dict = defaultdict(list)
    for i, d in enumerate(detections):
        groups_d[(d.image_id, d.category)].append(i)
    for j, g in enumerate(gts):
        groups_g[(g.image_id, g.category)].append(j)
    result: list[Match | None] = [None] * len(detections)
    for key, det_idx in groups_d.items():
        gt_idx = groups_g.get(key, [])
        if not gt_idx:
            for i in det_idx:
                result[i] = Match(i, None)
            continue
        ious = iou_matrix([detections[i].bbox for i in det_idx], [gts[j].bbox for j in gt_idx])
        match, det_ignored = greedy_assign(ious, np.array([ignore[j] for j in gt_idx], bool), iou_threshold)
        for row, i in enumerate(det_idx):
            m = int(match[row])
            result[i] = Match(i, gt_idx[m] if m >= 0 else None, bool(det_ignored[row]))
    return result


def average_precision(tp_flags: Sequence[bool], n_gt: int, method: APMethod | str = APMethod.COCO101) -> float:
    """AP from TP/FP flags of score-ordered (non-ignored) detections."""
    if n_gt <= 0:
        raise ValueError("AP is undefined without ground truth")
    flags = np.asarray(tp_flags, dtype=bool)
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    if APMethod(method) is APMethod.COCO101:
        idx = np.searchsorted(recall, RECALL_THRESHOLDS, side="left")
        picked = [float(envelope[i]) if i < len(envelope) else 0.0 for i in idx]
        return math.fsum(picked) / len(RECALL_THRESHOLDS)
    prev = np.concatenate(([0.0], recall[:-1]))
    return math.fsum(((recall - prev) * envelope).tolist())


def ap50(detections: Sequence[Detection], gts: Sequence[Annotation], class_set: Iterable[str],
         iou_threshold: float = IOU_THRESHOLD, method: APMethod | str = APMethod.COCO101,
         ignore: Sequence[bool] | None = None, subset: str = Subset.ALL.value) -> EvalReport:
    """Per-class AP and its mean over ``class_set`` (classes without GT are left out)."""
    classes = set(class_set)
    if not classes:
        raise ValueError("empty class set")
    ignore = [False] * len(gts) if ignore is None else list(ignore)
    dets = sort_detections(d for d in detections if d.category in classes)
    keep_g = [j for j, g in enumerate(gts) if g.category in classes]
    gts_c = [gts[j] for j in keep_g]
    ign_c = [ignore[j] for j in keep_g]
    matches = greedy_match(dets, gts_c, iou_threshold, ign_c)

    report = EvalReport(subset=subset)
    report.n_images = len({g.image_id for g in gts_c})
    n_gt = defaultdict(int)
    for g, ig in zip(gts_c, ign_c):
        if not ig:
            n_gt[g.category] += 1
    flags = defaultdict(list)
    for d, m in zip(dets, matches):
        if m.ignored:
            continue
        flags[d.category].append(m.gt is not None)
    for c in sorted(classes):
        if n_gt[c] == 0:
            continue
        report.per_class[c] = average_precision(flags[c], n_gt[c], method)
        tp = sum(flags[c])
        report.tp += tp
        report.fp += len(flags[c]) - tp
        report.fn += n_gt[c] - tp
    report.fp += sum(len(v) - sum(v) for c, v in flags.items() if n_gt[c] == 0)
    report.n_gt = sum(n_gt.values())
    if report.per_class:
        report.mean_ap = math.fsum(report.per_class.values()) / len(report.per_class)
    else:
        report.empty = True
    return report


def crowded_images(dataset: Dataset, threshold: int = 8) -> set[int]:
    by_image = defaultdict(list)
    for a in dataset.ground_truth():
        by_image[a.image_id].append(a)
    return {iid for iid, anns in by_image.items() if is_crowded(anns, threshold)}


def occluded_flags(dataset: Dataset, class_set: Iterable[str], threshold: float = 0.5,
                   occluder_classes: set[str] | None = None) -> dict[int, bool]:
    """annotation id -> occluded, for ground truth in ``class_set``."""
    classes = set(class_set)
    by_image = defaultdict(list)
    for a in dataset.ground_truth():
        by_image[a.image_id].append(a)
    out = {}
    for anns in by_image.values():
        for a in anns:
            if a.category in classes and a.bbox.area > 0:
                out[a.id] = is_occluded(a, [o for o in anns if o is not a], threshold, occluder_classes)
    return out


def subset_eval(detections: Sequence[Detection], dataset: Dataset, subset: Subset | str,
                class_set: Iterable[str], crowded_threshold: int = 8, occluded_threshold: float = 0.5,
                occluded_mode: OccludedMode | str = OccludedMode.IGNORE,
                occluder_classes: set[str] | None = None, iou_threshold: float = IOU_THRESHOLD,
                method: APMethod | str = APMethod.COCO101) -> EvalReport:
    subset = Subset(subset)
    classes = set(class_set)
    gts = dataset.ground_truth()
    if subset is Subset.ALL:
        return ap50(detections, gts, classes, iou_threshold, method, subset=subset.value)
    if subset is Subset.CROWDED:
        images = crowded_images(dataset, crowded_threshold)
        if not images:
            return EvalReport(subset=subset.value, empty=True)
        return ap50([d for d in detections if d.image_id in images],
                    [g for g in gts if g.image_id in images], classes, iou_threshold, method,
                    subset=subset.value)
    flags = occluded_flags(dataset, classes, occluded_threshold, occluder_classes)
    if not any(flags.values()):
        return EvalReport(subset=subset.value, empty=True)
    target = [g for g in gts if g.category in classes]
    if OccludedMode(occluded_mode) is OccludedMode.IGNORE:
        ignore = [not flags.get(g.id, False) for g in target]
        return ap50(detections, target, classes, iou_threshold, method, ignore=ignore, subset=subset.value)
    return ap50(detections, [g for g in target if flags.get(g.id, False)], classes, iou_threshold, method,
                subset=subset.value)


def pseudo_as_detections(annotations: Iterable[Annotation]) -> list[Detection]:
    return [Detection(a.image_id, a.category, a.bbox, 1.0, a.id) for a in annotations if a.is_pseudo]


def pseudo_label_quality(pseudo: Iterable[Annotation], dataset: Dataset, class_set: Iterable[str] | None = None,
                         subsets: Sequence[Subset | str] = tuple(Subset), **kwargs) -> dict[str, EvalReport]:
    """AP50 of pseudo annotations (score 1.0, id order) against ground truth, per subset."""
    classes = set(dataset.novel_classes if class_set is None else class_set)
    dets = pseudo_as_detections(pseudo)
    return {Subset(s).value: subset_eval(dets, dataset, s, classes, **kwargs) for s in subsets}


def load_detections(path, dataset: Dataset) -> list[Detection]:
    """COCO results file: ``[{image_id, category_id, bbox, score}, ...]``; ids follow file order."""
    rows = json.loads(Path(path).read_text())
    if not isinstance(rows, list):
        raise ValueError(f"{path}: detections must be a JSON list")
    names = {cid: name for name, cid in dataset.category_ids().items()}
    out = []
    for i, r in enumerate(rows):
        cid = int(r["category_id"])
        if cid not in names:
            raise ValueError(f"{path}: detection {i} has unknown category_id {cid}")
        out.append(Detection(int(r["image_id"]), names[cid], BBox.from_list(r["bbox"]), float(r["score"]), i))
    return out


def gt_as_results(dataset: Dataset) -> list[dict]:
    """Ground truth rendered as a COCO results list with score 1.0."""
    ids = dataset.category_ids()
    return [{"image_id": a.image_id, "category_id": ids[a.category], "bbox": a.bbox.to_list(), "score": 1.0}
            for a in dataset.ground_truth()]
