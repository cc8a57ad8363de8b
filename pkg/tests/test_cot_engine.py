import json

import httpx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ovpseudo import preprocess as P
from ovpseudo.annotations import Answer, InstanceMask, parse_coco
from ovpseudo.cot_engine import (
    BackendError, BackendRequest, BackendResponse, HTTPBackend, MockBackend, ParseError, PipelineConfig,
    Step, Transcript, crop_sha256, load_proposals, load_template, parse_grounding, parse_label, parse_verdict,
    process_proposal, run_pipeline,
)
from ovpseudo.cot_engine.prompts import IMAGE_SLOT, LABEL_SLOT, sha256_text
from ovpseudo.cot_engine.proposals import Level, MaskProposal, select_whole_indices
from ovpseudo.labels import Grounding

FROZEN = {
    "verify": "0907fe4a7e322072a83c78accda6d42fbbe2afc5b79deb33f67a0bbb71879a91",
    "label": "a3272dcfa54935632838c2c9e3a854790e94472eb90bef710af3b7bf740cf151",
    "ground": "3193f8f949efea6b7108bf495eecac12a510b3689787c31e7815b26c1b2af8fc",
}


# ---------------------------------------------------------------------------
# prompts


@pytest.mark.parametrize("step", ["verify", "label"])
def test_rendered_prompt_hash(step):
    t = load_template(step)
    assert sha256_text(t.render()) == FROZEN[step]
    assert t.slots == (IMAGE_SLOT,)


def test_ground_prompt_substitutes_both_label_slots():
    t = load_template("ground")
    assert t.sha256 == FROZEN["ground"]
    assert t.text.count(LABEL_SLOT) == 2
    out = t.render("traffic cone")
    assert '"traffic cone"' in out and "Object: traffic cone\n" in out
    assert LABEL_SLOT not in out and IMAGE_SLOT in out
    with pytest.raises(ValueError):
        t.render()


def test_templates_keep_trailing_double_spaces():
    for step in Step:
        text = load_template(step).text
        assert any(line.endswith("  ") for line in text.split("\n"))
        assert not text.endswith("\n")


# ---------------------------------------------------------------------------
# parsing


@pytest.mark.parametrize("raw,answer,reason", [
    ("Yes", Answer.YES, None),
    ("Answer: No\nReasoning: None", Answer.NO, None),
    ("answer: unsure\nreasoning: the object is cut off", Answer.UNSURE, "the object is cut off"),
    ("Answer:\nUnsure\nReasoning:\nonly a corner shows", Answer.UNSURE, "only a corner shows"),
    ("Answer: Unsure\nReasoning: <YOUR_REASONING>", Answer.UNSURE, None),
    ("**Yes.**", Answer.YES, None),
])
def test_parse_verdict(raw, answer, reason):
    v = parse_verdict(raw)
    assert v.answer is answer and v.reasoning == reason


@pytest.mark.parametrize("raw", ["", "I cannot tell", "Answer: maybe"])
def test_parse_verdict_errors_keep_raw(raw):
    with pytest.raises(ParseError) as e:
        parse_verdict(raw)
    assert e.value.raw == raw


@pytest.mark.parametrize("raw,label", [
    ("Skateboard", "skateboard"),
    ("Answer: Traffic  Cone.", "traffic cone"),
    ('"Zebra"', "zebra"),
])
def test_parse_label(raw, label):
    assert parse_label(raw) == label


@pytest.mark.parametrize("raw", ["", "a big red bus", "..."])
def test_parse_label_rejects(raw):
    with pytest.raises(ParseError):
        parse_label(raw)


def test_parse_grounding():
    assert parse_grounding("Answer: Background") is Grounding.BACKGROUND
    assert parse_grounding("foreground.") is Grounding.FOREGROUND
    with pytest.raises(ParseError):
        parse_grounding("somewhere")


@settings(max_examples=100, deadline=None)
@given(st.text(max_size=40))
def test_parsers_never_raise_other_errors(text):
    for fn in (parse_verdict, parse_label, parse_grounding):
        try:
            fn(text)
        except ParseError:
            pass


# ---------------------------------------------------------------------------
# backends


def _crop(seed=0):
    return np.random.default_rng(seed).integers(0, 256, size=(4, 5, 3), dtype=np.uint8)


def test_crop_hash_depends_on_shape_and_content():
    a = _crop()
    assert crop_sha256(a) == crop_sha256(a.copy())
    assert crop_sha256(a) != crop_sha256(a.reshape(5, 4, 3))
    assert crop_sha256(a) != crop_sha256(_crop(1))


def test_mock_backend_hit_miss_and_conflict():
    c = _crop()
    mb = MockBackend([{"step": "verify", "crop_sha256": crop_sha256(c), "response_text": "Yes"}])
    assert mb.complete(BackendRequest(Step.VERIFY, "p", c)).text == "Yes"
    with pytest.raises(BackendError) as e:
        mb.complete(BackendRequest(Step.LABEL, "p", c))
    assert not e.value.retryable
    with pytest.raises(ValueError):
        MockBackend([{"step": "verify", "crop_sha256": "x", "response_text": "Yes"},
                     {"step": "verify", "crop_sha256": "x", "response_text": "No"}])


def _http(handler):
    return HTTPBackend("http://mllm.test/v1", client=httpx.Client(transport=httpx.MockTransport(handler)),
                       params={"temperature": 0})


def test_http_backend_payload_and_reply():
    seen = {}

    def handler(request):
        seen.update(json.loads(request.content))
        return httpx.Response(200, json={"text": "Answer: Yes"})

    r = _http(handler).complete(BackendRequest(Step.VERIFY, "prompt text", _crop()))
    assert r.text == "Answer: Yes"
    assert seen["step"] == "verify" and seen["prompt"] == "prompt text" and seen["temperature"] == 0
    assert seen["image"]


@pytest.mark.parametrize("status,retryable", [(500, True), (429, True), (400, False)])
def test_http_backend_status_codes(status, retryable):
    b = _http(lambda request: httpx.Response(status))
    with pytest.raises(BackendError) as e:
        b.complete(BackendRequest(Step.VERIFY, "p", _crop()))
    assert e.value.retryable is retryable


def test_http_backend_malformed_reply():
    b = _http(lambda request: httpx.Response(200, json={"answer": "Yes"}))
    with pytest.raises(BackendError):
        b.complete(BackendRequest(Step.VERIFY, "p", _crop()))


class Flaky:
    backend_id = "flaky"

    def __init__(self, failures, replies):
        self.failures = failures
        self.replies = replies
        self.calls = 0

    def complete(self, request):
        self.calls += 1
        if self.failures > 0:
            self.failures -= 1
            raise BackendError("boom")
        return BackendResponse(self.replies[request.step], 0.0, self.backend_id)


REPLIES = {Step.VERIFY: "Yes", Step.LABEL: "Dog", Step.GROUND: "Foreground"}


def test_retry_then_success(tmp_path):
    b = Flaky(2, REPLIES)
    t = Transcript(tmp_path / "t.jsonl")
    oc = process_proposal(b, 1, 0, _crop(), PipelineConfig(max_retries=2), t)
    assert oc.status.value == "emitted" and oc.label == "dog"
    lines = [json.loads(x) for x in (tmp_path / "t.jsonl").read_text().splitlines()]
    assert [x["attempt"] for x in lines] == [0, 1, 2, 0, 0]
    assert lines[0]["response_text"] is None and lines[2]["response_text"] == "Yes"


def test_retries_exhausted_becomes_unsure():
    oc = process_proposal(Flaky(10, REPLIES), 1, 0, _crop(), PipelineConfig(max_retries=1))
    assert oc.status.value == "unsure" and oc.unsure_source == "backend_error"


def test_transcript_replay(tmp_path):
    t = Transcript(tmp_path / "t.jsonl")
    process_proposal(Flaky(0, REPLIES), 1, 0, _crop(), PipelineConfig(), t)
    oc = process_proposal(t.replay_backend(), 1, 0, _crop(), PipelineConfig())
    assert oc.label == "dog" and oc.grounding is Grounding.FOREGROUND


# ---------------------------------------------------------------------------
# proposals


def _rect(x, y, w, h, shape=(10, 10)):
    m = np.zeros(shape, bool)
    m[y:y + h, x:x + w] = True
    return InstanceMask(m)


def test_select_whole_keeps_higher_score_of_duplicates():
    props = [
        MaskProposal(_rect(0, 0, 5, 5), Level.WHOLE, 0.5),
        MaskProposal(_rect(0, 0, 5, 5), Level.WHOLE, 0.9),
        MaskProposal(_rect(6, 6, 2, 2), Level.PART, 0.99),
        MaskProposal(InstanceMask(np.zeros((10, 10), bool)), Level.WHOLE, 0.8),
    ]
    assert select_whole_indices(props) == [1]


def test_select_whole_threshold_is_strict():
    # IoU exactly 0.9 is kept
    a = _rect(0, 0, 10, 10, (10, 10))
    b = _rect(0, 0, 9, 10, (10, 10))
    props = [MaskProposal(a, Level.WHOLE, 0.9), MaskProposal(b, Level.WHOLE, 0.8)]
    assert select_whole_indices(props) == [0, 1]
    assert select_whole_indices(props, 0.89) == [0]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 6), st.integers(1, 4), st.integers(1, 4),
                          st.sampled_from(list(Level)), st.floats(0, 1)), max_size=7))
def test_selected_masks_pairwise_below_threshold(rects):
    from ovpseudo.cot_engine.proposals import mask_iou_matrix

    props = [MaskProposal(_rect(x, y, w, h), lvl, s) for x, y, w, h, lvl, s in rects]
    keep = select_whole_indices(props)
    assert all(props[i].level is Level.WHOLE for i in keep)
    m = mask_iou_matrix([props[i].mask for i in keep])
    off = m[~np.eye(len(keep), dtype=bool)]
    assert (off <= 0.9).all()


def test_level_parse_is_tolerant():
    assert Level.parse(" Sub-Part ") is Level.SUBPART


# ---------------------------------------------------------------------------
# pipeline on the mock corpus


@pytest.fixture
def mock_run(data_dir):
    d = data_dir / "mock_corpus"
    ds = parse_coco(d / "gt.json")
    props = load_proposals(d / "proposals.jsonl")
    backend = MockBackend.from_manifest(d / "manifest.jsonl")
    expected = json.loads((d / "expected.json").read_text())
    return ds, props, backend, d, expected


def test_pipeline_matches_expected(mock_run):
    ds, props, backend, d, expected = mock_run
    out = run_pipeline(ds, props, backend, images_root=d / "images")
    assert out.counts == expected["counts"]
    got = [{"id": a.id, "image_id": a.image_id, "category": a.category, "bbox": a.bbox.to_list()}
           for a in out.annotations]
    assert got == expected["pseudo"]
    for a in out.annotations:
        assert a.is_pseudo and a.verdict.answer is Answer.YES
        x, y, w, h = a.bbox.to_list()
        assert a.mask.area == w * h  # rectangle proposals
    assert dict(out.histogram) == expected["histogram"]
    assert out.grounding_votes == expected["grounding"]
    assert [{k: r[k] for k in ("image_id", "proposal_index", "source")} for r in out.unsure_log] == \
        [{k: r[k] for k in ("image_id", "proposal_index", "source")} for r in expected["unsure"]]
    assert out.unsure_log[0]["reasoning"] == expected["unsure"][0]["reasoning"]
    assert out.background_labels == {"sky"}


def test_pipeline_per_image_conservation(mock_run):
    ds, props, backend, d, expected = mock_run
    out = run_pipeline(ds, props, backend, images_root=d / "images")
    for iid, c in out.per_image.items():
        assert c["proposals"] == expected["per_image_proposals"][str(iid)]
        assert c["filtered"] + c["emitted"] + c["no"] + c["unsure"] + c["parse_error"] == c["proposals"]


@pytest.mark.parametrize("mode", ["hard", "raw"])
def test_box_filling_masks_make_modes_coincide(mock_run, mode):
    # the corpus masks are rectangles that fill their boxes, so no pixel is
    # composited and every mode yields the same crop (and the same answers)
    ds, props, backend, d, _ = mock_run
    soft = run_pipeline(ds, props, backend, images_root=d / "images")
    other = run_pipeline(ds, props, backend, PipelineConfig(mode=P.Mode(mode)), images_root=d / "images")
    assert other.annotations == soft.annotations and other.counts == soft.counts


def test_crop_mode_changes_hash_for_non_rectangular_mask(data_dir):
    import json as _json
    from PIL import Image

    from ovpseudo.annotations import BBox

    g = data_dir / "golden"
    img = P.read_image(g / "image.png")
    mask = InstanceMask(np.asarray(Image.open(g / "mask.png")) > 0)
    box = BBox(*_json.loads((g / "meta.json").read_text())["box"])
    hashes = {crop_sha256(P.make_crop(img, box, mask, m)) for m in P.Mode}
    assert len(hashes) == 3


def test_parallel_equals_serial(mock_run):
    ds, props, backend, d, _ = mock_run
    a = run_pipeline(ds, props, backend, images_root=d / "images")
    b = run_pipeline(ds, props, backend, PipelineConfig(max_in_flight=4), images_root=d / "images")
    assert a.annotations == b.annotations and a.counts == b.counts and a.unsure_log == b.unsure_log


def test_unknown_image_in_proposals(mock_run):
    ds, props, backend, d, _ = mock_run
    with pytest.raises(KeyError):
        run_pipeline(ds, {99: props[1]}, backend, images_root=d / "images")
