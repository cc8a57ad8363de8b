"""Three-step MLLM pseudo-labeling: verify object presence, name it, ground it."""

from ..annotations import Answer, TernaryVerdict
from ..labels import Grounding
from .backends import (
    Backend,
    BackendError,
    BackendRequest,
    BackendResponse,
    HTTPBackend,
    MockBackend,
    Transcript,
    crop_sha256,
)
from .parsing import ParseError, parse_grounding, parse_label, parse_verdict
from .pipeline import (
    PipelineConfig,
    PipelineOutput,
    RetryingBackend,
    Status,
    merge_outputs,
    process_proposal,
    run_pipeline,
    step1_verify,
    step2_label,
    step3_ground,
)
from .prompts import GOLDEN_SHA256, PromptTemplate, Step, load_template
from .proposals import Level, MaskProposal, load_proposals, select_whole_masks, write_proposals

__all__ = [
    "Answer", "TernaryVerdict", "Grounding",
    "Backend", "BackendError", "BackendRequest", "BackendResponse", "HTTPBackend", "MockBackend",
    "Transcript", "crop_sha256",
    "ParseError", "parse_grounding", "parse_label", "parse_verdict",
    "PipelineConfig", "PipelineOutput", "RetryingBackend", "Status", "merge_outputs",
    "process_proposal", "run_pipeline", "step1_verify", "step2_label", "step3_ground",
    "GOLDEN_SHA256", "PromptTemplate", "Step", "load_template",
    "Level", "MaskProposal", "load_proposals", "select_whole_masks", "write_proposals",
]
