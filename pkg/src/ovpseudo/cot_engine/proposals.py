"""SAM mask proposals: file I/O and whole-instance selection."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from ..annotations import InstanceMask
from ..io import write_jsonl, read_jsonl
from ..kernels import mask_intersections

DEDUP_IOU = 0.9


class Level(str, Enum):
    WHOLE = "whole"
    PART = "part"
    SUBPART = "subpart"

    @classmethod
    def parse(cls, value: str) -> "Level":
        key = value.strip().lower().replace("-", "").replace("_", "")
        return cls(key)


@dataclass(frozen=True)
class MaskProposal:
    mask: InstanceMask
    level: Level
    score: float

    def to_json(self, image_id: int) -> dict:
        return {
            "image_id": image_id,
            "level": self.level.value,
            "mask": self.mask.to_rle(),
            "score": self.score,
        }


def load_proposals(path) -> dict[int, list[MaskProposal]]:
    """Group proposal lines by image, keeping file order as the proposal index."""
    out: dict[int, list[MaskProposal]] = defaultdict(list)
    for rec in read_jsonl(path):
        seg = rec.get("mask", rec.get("segmentation"))
        if seg is None:
            raise ValueError(f"{path}: proposal without 'mask'")
        out[int(rec["image_id"])].append(MaskProposal(
            mask=InstanceMask.from_rle(seg),
            level=Level.parse(rec["level"]),
            score=float(rec.get("score", 0.0)),
        ))
    return dict(out)


def write_proposals(path, proposals: dict[int, Sequence[MaskProposal]]) -> None:
    write_jsonl(path, (p.to_json(iid) for iid in sorted(proposals) for p in proposals[iid]))


def mask_iou_matrix(masks: Sequence[InstanceMask]) -> np.ndarray:
    if not masks:
        return np.zeros((0, 0))
    flat = np.stack([m.bits.ravel() for m in masks])
    inter = mask_intersections(flat).astype(np.float64)
    area = np.diag(inter)
    union = area[:, None] + area[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def select_whole_indices(proposals: Sequence[MaskProposal], iou_threshold: float = DEDUP_IOU) -> list[int]:
    """Indices of whole-level, non-empty proposals left after near-duplicate removal.

    Candidates are visited by descending stability score (index breaks ties);
    one whose mask IoU with an already kept mask exceeds ``iou_threshold``
    is dropped. The result is in proposal order.
    """
    cand = [i for i, p in enumerate(proposals) if p.level is Level.WHOLE and p.mask.area > 0]
    if not cand:
        return []
    ious = mask_iou_matrix([proposals[i].mask for i in cand])
    order = sorted(range(len(cand)), key=lambda k: (-proposals[cand[k]].score, cand[k]))
    kept: list[int] = []
    for k in order:
        if all(ious[k, j] <= iou_threshold for j in kept):
            kept.append(k)
    return sorted(cand[k] for k in kept)


def select_whole_masks(proposals: Sequence[MaskProposal], iou_threshold: float = DEDUP_IOU) -> list[MaskProposal]:
    return [proposals[i] for i in select_whole_indices(proposals, iou_threshold)]
