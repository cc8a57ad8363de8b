"""Data model and box geometry, plus COCO-format ingestion and emission."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import rle
from .io import atomic_write_text
from .kernels import union_area_in

PROVENANCE_KEY = "provenance"
VERDICT_KEY = "verdict"


class CocoError(ValueError):
    """Base class for COCO ingestion failures."""


class MalformedJSONError(CocoError):
    pass


class MissingKeyError(CocoError):
    def __init__(self, key: str, where: str):
        super().__init__(f"missing required key {key!r} in {where}")
        self.key = key


class DanglingImageError(CocoError):
    def __init__(self, annotation_id, image_id):
        super().__init__(f"annotation {annotation_id} refers to unknown image_id {image_id}")
        self.annotation_id = annotation_id
        self.image_id = image_id


class UnknownCategoryError(CocoError):
    pass


class DuplicateIdError(CocoError):
    pass


class Provenance(str, Enum):
    GROUND_TRUTH = "ground_truth"
    PSEUDO = "pseudo"


class Answer(str, Enum):
    YES = "Yes"
    NO = "No"
    UNSURE = "Unsure"


@dataclass(frozen=True)
class TernaryVerdict:
    """Parsed object-presence answer. Reasoning is only kept for ``Unsure``."""

    answer: Answer
    reasoning: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "answer", Answer(self.answer))
        if self.reasoning is not None and self.answer is not Answer.UNSURE:
            raise ValueError("reasoning is only recorded for Unsure verdicts")

    def to_json(self) -> dict:
        return {"answer": self.answer.value, "reasoning": self.reasoning}

    @classmethod
    def from_json(cls, obj: dict) -> "TernaryVerdict":
        return cls(Answer(obj["answer"]), obj.get("reasoning"))


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in pixels, COCO ``[x, y, w, h]`` layout."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("x", "y", "w", "h"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"non-finite box field {name}")
        if self.w < 0 or self.h < 0:
            raise ValueError(f"negative box size ({self.w}, {self.h})")

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def x1(self) -> float:
        return self.x + self.w

    @property
    def y1(self) -> float:
        return self.y + self.h

    def corners(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.x + self.w, self.y + self.h)

    def to_list(self) -> list:
        return [_num(self.x), _num(self.y), _num(self.w), _num(self.h)]

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "BBox":
        x, y, w, h = values
        return cls(x, y, w, h)


def _num(v):
    # integral floats serialize as ints so emitted files stay stable
    if isinstance(v, float) and v.is_integer():
        return int(v)
    return v


@dataclass(frozen=True, eq=False)
class InstanceMask:
    """Binary raster in image coordinates, stored as an (height, width) bool array."""

    bits: np.ndarray

    def __post_init__(self):
        bits = np.array(self.bits, dtype=bool)
        if bits.ndim != 2:
            raise ValueError("mask raster must be 2-D")
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def area(self) -> int:
        return int(self.bits.sum())

    def __eq__(self, other):
        if not isinstance(other, InstanceMask):
            return NotImplemented
        return self.bits.shape == other.bits.shape and bool(np.array_equal(self.bits, other.bits))

    def __hash__(self):
        return hash((self.bits.shape, self.bits.tobytes()))

    def to_rle(self) -> dict:
        return rle.encode(self.bits)

    @classmethod
    def from_rle(cls, obj: dict) -> "InstanceMask":
        return cls(rle.decode(obj))


@dataclass
class Annotation:
    id: int
    image_id: int
    category: str
    bbox: BBox
    mask: InstanceMask | None = None
    provenance: Provenance = Provenance.GROUND_TRUTH
    verdict: TernaryVerdict | None = None

    def __post_init__(self):
        self.provenance = Provenance(self.provenance)
        if self.mask is not None and self.bbox != tight_bbox(self.mask):
            raise ValueError(f"annotation {self.id}: bbox does not match its mask")

    @property
    def is_pseudo(self) -> bool:
        return self.provenance is Provenance.PSEUDO


@dataclass(frozen=True)
class ImageInfo:
    id: int
    width: int
    height: int
    file_name: str


@dataclass
class Dataset:
    images: list[ImageInfo] = field(default_factory=list)
    annotations: list[Annotation] = field(default_factory=list)
    base_classes: set[str] = field(default_factory=set)
    novel_classes: set[str] = field(default_factory=set)
    # name -> COCO category id; not part of equality, ids are file-level detail
    categories: dict[str, int] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        overlap = self.base_classes & self.novel_classes
        if overlap:
            raise ValueError(f"classes both base and novel: {sorted(overlap)}")

    def image(self, image_id: int) -> ImageInfo:
        for im in self.images:
            if im.id == image_id:
                return im
        raise KeyError(image_id)

    def annotations_by_image(self) -> dict[int, list[Annotation]]:
        out: dict[int, list[Annotation]] = {im.id: [] for im in self.images}
        for ann in self.annotations:
            out.setdefault(ann.image_id, []).append(ann)
        return out

    def ground_truth(self) -> list[Annotation]:
        return [a for a in self.annotations if not a.is_pseudo]

    def category_ids(self) -> dict[str, int]:
        """Category ids for every name in use; unseen names get fresh ids in sorted order."""
        ids = dict(self.categories)
        names = {a.category for a in self.annotations} | self.base_classes | self.novel_classes
        next_id = max(ids.values(), default=0) + 1
        for name in sorted(names - ids.keys()):
            ids[name] = next_id
            next_id += 1
        return ids


# ---------------------------------------------------------------------------
# geometry


def iou(a: BBox, b: BBox) -> float:
    ix = min(a.x1, b.x1) - max(a.x, b.x)
    iy = min(a.y1, b.y1) - max(a.y, b.y)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def iou_matrix(a: Sequence[BBox], b: Sequence[BBox]) -> np.ndarray:
    """Pairwise IoU, rows for ``a`` and columns for ``b``."""
    if not a or not b:
        return np.zeros((len(a), len(b)))
    A = np.array([bx.corners() for bx in a], dtype=np.float64)
    B = np.array([bx.corners() for bx in b], dtype=np.float64)
    ix = np.minimum(A[:, None, 2], B[None, :, 2]) - np.maximum(A[:, None, 0], B[None, :, 0])
    iy = np.minimum(A[:, None, 3], B[None, :, 3]) - np.maximum(A[:, None, 1], B[None, :, 1])
    inter = np.where((ix > 0) & (iy > 0), ix * iy, 0.0)
    area_a = (A[:, 2] - A[:, 0]) * (A[:, 3] - A[:, 1])
    area_b = (B[:, 2] - B[:, 0]) * (B[:, 3] - B[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return out


def coverage_fraction(target: BBox, others: Iterable[BBox]) -> float:
    """Fraction of ``target`` covered by the union of ``others``."""
    if target.area <= 0:
        raise ValueError("coverage of a zero-area box is undefined")
    boxes = np.array([o.corners() for o in others], dtype=np.float64).reshape(-1, 4)
    return union_area_in(target.corners(), boxes) / target.area


def mask_coverage_fraction(target: InstanceMask, others: Iterable[InstanceMask]) -> float:
    if target.area == 0:
        raise ValueError("coverage of an empty mask is undefined")
    union = np.zeros_like(target.bits)
    for m in others:
        union |= m.bits
    return float((union & target.bits).sum()) / target.area


def is_crowded(image_annotations: Sequence[Annotation], threshold: int = 8) -> bool:
    if len({a.image_id for a in image_annotations}) > 1:
        raise ValueError("annotations span more than one image")
    return len(image_annotations) > threshold


def is_occluded(
    target: Annotation,
    others: Iterable[Annotation],
    threshold: float = 0.5,
    occluder_classes: set[str] | None = None,
) -> bool:
    """True iff ground-truth boxes among ``others`` cover more than ``threshold`` of the target.

    ``occluder_classes`` restricts which categories count as occluders
    (``None`` means every ground-truth box).
    """
    boxes = [
        o.bbox
        for o in others
        if o is not target
        and not o.is_pseudo
        and (occluder_classes is None or o.category in occluder_classes)
    ]
    if not boxes:
        return False
    return coverage_fraction(target.bbox, boxes) > threshold


def tight_bbox(mask: InstanceMask) -> BBox:
    rows = np.flatnonzero(mask.bits.any(axis=1))
    cols = np.flatnonzero(mask.bits.any(axis=0))
    if rows.size == 0:
        raise ValueError("tight_bbox of an empty mask")
    y0, y1 = int(rows[0]), int(rows[-1])
    x0, x1 = int(cols[0]), int(cols[-1])
    return BBox(x0, y0, x1 - x0 + 1, y1 - y0 + 1)


# ---------------------------------------------------------------------------
# COCO I/O


def load_category_split(path) -> tuple[set[str], set[str]]:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise MalformedJSONError(f"{path}: {e}") from e
    for key in ("base", "novel"):
        if key not in obj:
            raise MissingKeyError(key, str(path))
    base, novel = set(obj["base"]), set(obj["novel"])
    if base & novel:
        raise CocoError(f"{path}: classes both base and novel: {sorted(base & novel)}")
    return base, novel


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise MissingKeyError(key, where)
    return obj[key]


def _polygon_mask(polygons, height: int, width: int) -> np.ndarray:
    from PIL import Image, ImageDraw

    canvas = Image.new("1", (width, height), 0)
    draw = ImageDraw.Draw(canvas)
    for poly in polygons:
        if len(poly) >= 6:
            draw.polygon([float(v) for v in poly], fill=1)
    return np.array(canvas, dtype=bool)


def from_coco_dict(obj: dict, split: tuple[set[str], set[str]] | None = None,
                   load_masks: bool = True) -> Dataset:
    """Build a :class:`Dataset` from a parsed COCO dictionary.

    The base/novel split comes from ``split`` when given, otherwise from a
    per-category ``"split"`` key (``base``/``seen`` or ``novel``/``unseen``).
    With ``load_masks`` every segmentation is rasterized and the box is
    re-derived from the raster.
    """
    if not isinstance(obj, dict):
        raise MalformedJSONError("top-level COCO value must be an object")
    for key in ("images", "annotations", "categories"):
        _require(obj, key, "COCO file")

    categories: dict[str, int] = {}
    id_to_name: dict[int, str] = {}
    base: set[str] = set()
    novel: set[str] = set()
    for cat in obj["categories"]:
        cid = int(_require(cat, "id", "category"))
        name = _require(cat, "name", f"category {cid}")
        categories[name] = cid
        id_to_name[cid] = name
        tag = str(cat.get("split", "")).lower()
        if tag in ("base", "seen"):
            base.add(name)
        elif tag in ("novel", "unseen"):
            novel.add(name)
    if split is not None:
        base, novel = set(split[0]), set(split[1])

    images = []
    sizes = {}
    for im in obj["images"]:
        iid = int(_require(im, "id", "image"))
        info = ImageInfo(
            id=iid,
            width=int(_require(im, "width", f"image {iid}")),
            height=int(_require(im, "height", f"image {iid}")),
            file_name=str(im.get("file_name", "")),
        )
        images.append(info)
        sizes[iid] = (info.height, info.width)

    annotations = []
    seen_ids = set()
    for raw in obj["annotations"]:
        aid = int(_require(raw, "id", "annotation"))
        where = f"annotation {aid}"
        image_id = int(_require(raw, "image_id", where))
        if image_id not in sizes:
            raise DanglingImageError(aid, image_id)
        if aid in seen_ids:
            raise DuplicateIdError(f"duplicate annotation id {aid}")
        seen_ids.add(aid)
        cid = int(_require(raw, "category_id", where))
        if cid not in id_to_name:
            raise UnknownCategoryError(f"{where}: unknown category_id {cid}")
        bbox = BBox.from_list([float(v) for v in _require(raw, "bbox", where)])
        mask = None
        seg = raw.get("segmentation")
        if load_masks and seg:
            h, w = sizes[image_id]
            if isinstance(seg, dict):
                bits = rle.decode(seg)
            else:
                bits = _polygon_mask(seg, h, w)
            if bits.any():
                mask = InstanceMask(bits)
                bbox = tight_bbox(mask)
        verdict = raw.get(VERDICT_KEY)
        annotations.append(Annotation(
            id=aid,
            image_id=image_id,
            category=id_to_name[cid],
            bbox=bbox,
            mask=mask,
            provenance=Provenance(raw.get(PROVENANCE_KEY, Provenance.GROUND_TRUTH.value)),
            verdict=TernaryVerdict.from_json(verdict) if verdict else None,
        ))
    return Dataset(images, annotations, base, novel, categories)


def parse_coco(path, split=None, load_masks: bool = True) -> Dataset:
    """Read a COCO JSON file; ``split`` may be a (base, novel) pair or a split-file path."""
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise MalformedJSONError(f"{path}: {e}") from e
    if isinstance(split, (str, Path)):
        split = load_category_split(split)
    return from_coco_dict(obj, split=split, load_masks=load_masks)


def to_coco_dict(dataset: Dataset) -> dict:
    ids = dataset.category_ids()
    cats = []
    for name, cid in sorted(ids.items(), key=lambda kv: kv[1]):
        entry = {"id": cid, "name": name}
        if name in dataset.base_classes:
            entry["split"] = "base"
        elif name in dataset.novel_classes:
            entry["split"] = "novel"
        cats.append(entry)
    images = [
        {"id": im.id, "width": im.width, "height": im.height, "file_name": im.file_name}
        for im in dataset.images
    ]
    anns = []
    for a in dataset.annotations:
        entry = {
            "id": a.id,
            "image_id": a.image_id,
            "category_id": ids[a.category],
            "bbox": a.bbox.to_list(),
            "area": a.mask.area if a.mask is not None else _num(a.bbox.area),
            "iscrowd": 0,
        }
        if a.mask is not None:
            entry["segmentation"] = a.mask.to_rle()
        if a.is_pseudo:
            entry[PROVENANCE_KEY] = Provenance.PSEUDO.value
        if a.verdict is not None:
            entry[VERDICT_KEY] = a.verdict.to_json()
        anns.append(entry)
    return {"images": images, "annotations": anns, "categories": cats}


def emit_coco(dataset: Dataset, path) -> None:
    atomic_write_text(path, json.dumps(to_coco_dict(dataset), indent=1) + "\n")
