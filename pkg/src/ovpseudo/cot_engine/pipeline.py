"""Per-image orchestration of verify -> label -> ground over SAM proposals."""

from __future__ import annotations

import logging
import time
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Mapping, Sequence

import numpy as np

from ..anchors import aggregate_grounding
from ..annotations import Annotation, Answer, Dataset, ImageInfo, Provenance, TernaryVerdict, tight_bbox
from ..labels import Grounding
from .. import preprocess
from .backends import Backend, BackendError, BackendRequest, BackendResponse, Transcript
from .parsing import ParseError, parse_grounding, parse_label, parse_verdict
from .prompts import Step, load_template
from .proposals import DEDUP_IOU, MaskProposal, select_whole_indices

log = logging.getLogger(__name__)


class Status(str, Enum):
    FILTERED = "filtered"  # not whole-level, near-duplicate, or empty mask
    EMITTED = "emitted"
    NO = "no"
    UNSURE = "unsure"
    PARSE_ERROR = "parse_error"  # step-2 answer unusable, proposal dropped


@dataclass
class PipelineConfig:
    mode: preprocess.Mode = preprocess.Mode.SOFT
    ksize: int = preprocess.DEFAULT_KSIZE
    sigma: float = preprocess.DEFAULT_SIGMA
    blur_scope: preprocess.BlurScope = preprocess.BlurScope.FRAME
    dedup_iou: float = DEDUP_IOU
    max_retries: int = 2
    retry_backoff: float = 0.0
    max_in_flight: int = 1
    first_annotation_id: int | None = None


@dataclass
class ProposalOutcome:
    image_id: int
    index: int
    status: Status
    label: str | None = None
    grounding: Grounding | None = None
    reasoning: str | None = None
    unsure_source: str | None = None
    mask: object = None


@dataclass
class PipelineOutput:
    annotations: list[Annotation] = field(default_factory=list)
    histogram: Counter = field(default_factory=Counter)
    grounding_votes: dict = field(default_factory=dict)
    unsure_log: list[dict] = field(default_factory=list)
    counts: dict = field(default_factory=dict)
    per_image: dict = field(default_factory=dict)

    @property
    def background_labels(self) -> set[str]:
        return {k for k, v in aggregate_grounding(self.grounding_votes).items()
                if v is Grounding.BACKGROUND}

    def histogram_json(self) -> dict:
        return {
            "histogram": dict(sorted(self.histogram.items())),
            "grounding": {k: dict(sorted(v.items())) for k, v in sorted(self.grounding_votes.items())},
            "background_labels": sorted(self.background_labels),
        }


def empty_counts() -> dict:
    return {"proposals": 0, **{s.value: 0 for s in Status}}


def step1_verify(backend: Backend, crop: np.ndarray) -> TernaryVerdict:
    """Ask whether the crop holds an object. Raises ParseError on an unusable answer."""
    request = BackendRequest(Step.VERIFY, load_template(Step.VERIFY).render(), crop)
    return parse_verdict(backend.complete(request).text)


def step2_label(backend: Backend, crop: np.ndarray) -> str:
    """Zero-shot category name, normalized; at most two words."""
    request = BackendRequest(Step.LABEL, load_template(Step.LABEL).render(), crop)
    return parse_label(backend.complete(request).text)


def step3_ground(backend: Backend, crop: np.ndarray, label: str) -> Grounding:
    request = BackendRequest(Step.GROUND, load_template(Step.GROUND).render(label), crop)
    return parse_grounding(backend.complete(request).text)


class RetryingBackend:
    """Wraps a backend with bounded retries and transcript logging for one proposal."""

    def __init__(self, backend: Backend, max_retries: int = 2, backoff: float = 0.0,
                 transcript: Transcript | None = None, context: dict | None = None):
        self.backend = backend
        self.backend_id = getattr(backend, "backend_id", "?")
        self.max_retries = max(0, max_retries)
        self.backoff = backoff
        self.transcript = transcript
        self.context = context or {}

    def complete(self, request: BackendRequest) -> BackendResponse:
        attempts = 1 + self.max_retries
        last: BackendError | None = None
        for attempt in range(attempts):
            try:
                response = self.backend.complete(request)
            except BackendError as e:
                last = e
                log.warning("backend %s failed on %s (attempt %d/%d): %s",
                            self.backend_id, self.context, attempt + 1, attempts, e)
                if self.transcript is not None:
                    self.transcript.record(request, None, attempt=attempt, error=str(e), **self.context)
                if not e.retryable:
                    break
                if self.backoff > 0 and attempt + 1 < attempts:
                    time.sleep(self.backoff * (2 ** attempt))
                continue
            if self.transcript is not None:
                self.transcript.record(request, response, attempt=attempt, **self.context)
            return response
        raise last


def process_proposal(backend: Backend, image_id: int, index: int, crop: np.ndarray,
                     config: PipelineConfig, transcript: Transcript | None = None) -> ProposalOutcome:
    """Run the three steps on one crop and classify the result."""
    ctx = {"image_id": image_id, "proposal_index": index}
    wrapped = RetryingBackend(backend, config.max_retries, config.retry_backoff, transcript, ctx)
    out = ProposalOutcome(image_id, index, Status.UNSURE)
    try:
        try:
            verdict = step1_verify(wrapped, crop)
        except ParseError as e:
            log.info("unparseable verdict for %s, treating as Unsure: %r", ctx, e.raw)
            out.unsure_source = "parse_error"
            out.reasoning = f"unparseable response: {e.raw}"
            return out
        if verdict.answer is Answer.NO:
            out.status = Status.NO
            return out
        if verdict.answer is Answer.UNSURE:
            out.unsure_source = "model"
            out.reasoning = verdict.reasoning
            return out
        try:
            label = step2_label(wrapped, crop)
        except ParseError as e:
            log.info("dropping proposal %s: %s", ctx, e)
            out.status = Status.PARSE_ERROR
            return out
        try:
            grounding = step3_ground(wrapped, crop, label)
        except ParseError:
            log.info("unparseable grounding for %s label %r; label gets no vote", ctx, label)
            grounding = None
    except BackendError as e:
        out.unsure_source = "backend_error"
        out.reasoning = f"backend failure: {e}"
        return out
    out.status = Status.EMITTED
    out.label = label
    out.grounding = grounding
    return out


def _default_loader(images_root) -> Callable[[ImageInfo], np.ndarray]:
    from pathlib import Path

    root = Path(images_root) if images_root is not None else None

    def load(info: ImageInfo) -> np.ndarray:
        path = Path(info.file_name)
        if root is not None:
            path = root / path
        return preprocess.read_image(path)

    return load


def run_pipeline(
    dataset: Dataset,
    proposals: Mapping[int, Sequence[MaskProposal]],
    backend: Backend,
    config: PipelineConfig | None = None,
    image_loader: Callable[[ImageInfo], np.ndarray] | None = None,
    images_root=None,
    transcript: Transcript | None = None,
) -> PipelineOutput:
    """Generate pseudo annotations for every proposal.

    Images are processed by ascending id and proposals in file order; with
    ``max_in_flight > 1`` backend calls overlap but results are reassembled
    in that order, so the output does not depend on completion order.
    """
    config = config or PipelineConfig()
    loader = image_loader or _default_loader(images_root)
    known = {im.id: im for im in dataset.images}
    missing = sorted(set(proposals) - known.keys())
    if missing:
        raise KeyError(f"proposals reference unknown image ids {missing}")

    pool = ThreadPoolExecutor(config.max_in_flight) if config.max_in_flight > 1 else None
    outcomes: list[ProposalOutcome] = []
    result = PipelineOutput(counts=empty_counts())
    try:
        for image_id in sorted(proposals):
            props = list(proposals[image_id])
            counts = empty_counts()
            counts["proposals"] = len(props)
            keep = select_whole_indices(props, config.dedup_iou)
            counts[Status.FILTERED.value] = len(props) - len(keep)
            image_outcomes: list[ProposalOutcome] = []
            if keep:
                img = loader(known[image_id])
                background = None
                if config.mode is preprocess.Mode.SOFT and config.blur_scope is preprocess.BlurScope.FRAME:
                    background = preprocess.gray_blur(img, config.ksize, config.sigma)
                jobs = []
                for idx in keep:
                    mask = props[idx].mask
                    crop = preprocess.make_crop(img, tight_bbox(mask), mask, config.mode, config.ksize,
                                                config.sigma, config.blur_scope, background)
                    jobs.append((idx, mask, crop))
                if pool is None:
                    done = [process_proposal(backend, image_id, idx, crop, config, transcript)
                            for idx, _, crop in jobs]
                else:
                    futures = [pool.submit(process_proposal, backend, image_id, idx, crop, config, transcript)
                               for idx, _, crop in jobs]
                    done = [f.result() for f in futures]
                for (idx, mask, _), oc in zip(jobs, done):
                    oc.mask = mask
                    image_outcomes.append(oc)
            for oc in image_outcomes:
                counts[oc.status.value] += 1
            result.per_image[image_id] = counts
            for k, v in counts.items():
                result.counts[k] += v
            outcomes.extend(image_outcomes)
    finally:
        if pool is not None:
            pool.shutdown()

    next_id = config.first_annotation_id
    if next_id is None:
        next_id = max((a.id for a in dataset.annotations), default=0) + 1
    votes: dict[str, Counter] = defaultdict(Counter)
    for oc in outcomes:
        if oc.status is Status.EMITTED:
            result.annotations.append(Annotation(
                id=next_id,
                image_id=oc.image_id,
                category=oc.label,
                bbox=tight_bbox(oc.mask),
                mask=oc.mask,
                provenance=Provenance.PSEUDO,
                verdict=TernaryVerdict(Answer.YES),
            ))
            next_id += 1
            result.histogram[oc.label] += 1
            votes[oc.label]  # labels whose grounding never parsed still get an (empty) entry
            if oc.grounding is not None:
                votes[oc.label][oc.grounding.value] += 1
        elif oc.status is Status.UNSURE:
            result.unsure_log.append({
                "image_id": oc.image_id,
                "proposal_index": oc.index,
                "reasoning": oc.reasoning,
                "source": oc.unsure_source,
            })
    result.grounding_votes = {k: dict(v) for k, v in votes.items()}
    return result


def merge_outputs(outputs: Sequence[PipelineOutput]) -> PipelineOutput:
    """Combine shards (e.g. disjoint image sets); annotation ids are kept as-is."""
    merged = PipelineOutput(counts=empty_counts())
    votes: dict[str, Counter] = defaultdict(Counter)
    for out in outputs:
        merged.annotations.extend(out.annotations)
        merged.histogram.update(out.histogram)
        merged.unsure_log.extend(out.unsure_log)
        for k, v in out.counts.items():
            merged.counts[k] = merged.counts.get(k, 0) + v
        merged.per_image.update(out.per_image)
        for label, v in out.grounding_votes.items():
            votes[label].update(v)
    merged.annotations.sort(key=lambda a: (a.image_id, a.id))
    merged.unsure_log.sort(key=lambda r: (r["image_id"], r["proposal_index"]))
    merged.grounding_votes = {k: dict(v) for k, v in votes.items()}
    return merged
