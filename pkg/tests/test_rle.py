import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ovpseudo import rle


def test_runs_are_column_major():
    m = np.array([[0, 1], [1, 1]], bool)
    # column-major flattening: 0, 1, 1, 1
    assert rle.runs_from_mask(m) == [1, 3]


def test_runs_start_with_zero_count_when_first_pixel_set():
    assert rle.runs_from_mask(np.ones((1, 3), bool)) == [0, 3]


@pytest.mark.parametrize("counts,text", [
    ([0, 3], "03"),
    ([5], "5"),
    ([1, 1, 1], "111"),
    ([100], "T3"),  # 100 = 4 + 3*32: low 5 bits with continuation (36), then 3
])
def test_compact_strings_hand_derived(counts, text):
    assert rle.counts_to_string(counts) == text
    assert rle.string_to_counts(text) == counts


def test_delta_coding_after_third_run():
    counts = [2, 5, 3, 5]
    s = rle.counts_to_string(counts)
    # fourth value is stored as 5 - 5 = 0
    assert s[3] == "0"
    assert rle.string_to_counts(s) == counts


@settings(max_examples=200, deadline=None)
@given(arrays(np.bool_, st.tuples(st.integers(1, 12), st.integers(1, 12))))
def test_encode_decode_roundtrip(mask):
    obj = rle.encode(mask)
    assert obj["size"] == list(mask.shape)
    assert np.array_equal(rle.decode(obj), mask)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 10**6), min_size=1, max_size=30))
def test_counts_string_roundtrip(counts):
    assert rle.string_to_counts(rle.counts_to_string(counts)) == counts


def test_decode_accepts_list_counts():
    m = rle.decode({"size": [2, 2], "counts": [1, 2, 1]})
    assert m.T.ravel().tolist() == [False, True, True, False]
