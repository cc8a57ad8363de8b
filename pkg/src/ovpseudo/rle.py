"""COCO run-length encoding of binary masks.

COCO flattens masks in column-major order and stores alternating run
lengths starting with a run of zeros. The compact string form packs each
count (delta-coded against the count two places back, from the third on)
into 5-bit groups offset by ASCII 48.
"""

from __future__ import annotations

import numpy as np


def runs_from_mask(mask: np.ndarray) -> list[int]:
    flat = np.asarray(mask, dtype=np.uint8).ravel(order="F")
    if flat.size == 0:
        return []
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    counts = np.diff(bounds).tolist()
    if flat[0] == 1:
        counts.insert(0, 0)
    return counts


def mask_from_runs(counts, height: int, width: int) -> np.ndarray:
    counts = [int(c) for c in counts]
    if sum(counts) != height * width:
        raise ValueError(f"RLE counts sum to {sum(counts)}, expected {height * width}")
    values = np.zeros(len(counts), dtype=np.uint8)
    values[1::2] = 1
    flat = np.repeat(values, counts)
    return flat.reshape((height, width), order="F").astype(bool)


def counts_to_string(counts: list[int]) -> str:
    out = []
    for i, c in enumerate(counts):
        x = int(c)
        if i > 2:
            x -= int(counts[i - 2])
        more = True
        while more:
            ch = x & 0x1F
            x >>= 5
            more = (x != -1) if (ch & 0x10) else (x != 0)
            if more:
                ch |= 0x20
            out.append(chr(ch + 48))
    return "".join(out)


def string_to_counts(s: str | bytes) -> list[int]:
    if isinstance(s, bytes):
        s = s.decode("ascii")
    counts: list[int] = []
    p = 0
    while p < len(s):
        x = 0
        k = 0
        more = True
        while more:
            if p >= len(s):
                raise ValueError("truncated RLE string")
            c = ord(s[p]) - 48
            x |= (c & 0x1F) << (5 * k)
            more = bool(c & 0x20)
            p += 1
            k += 1
            if not more and (c & 0x10):
                x |= -1 << (5 * k)
        if len(counts) > 2:
            x += counts[-2]
        counts.append(x)
    return counts


def encode(mask: np.ndarray) -> dict:
    """Encode an (H, W) boolean mask as a compact COCO RLE object."""
    mask = np.asarray(mask)
    h, w = mask.shape
    return {"size": [int(h), int(w)], "counts": counts_to_string(runs_from_mask(mask))}


def decode(rle: dict) -> np.ndarray:
    """Decode a COCO RLE object (string or list counts) to an (H, W) bool array."""
    h, w = (int(v) for v in rle["size"])
    counts = rle["counts"]
    if isinstance(counts, (str, bytes)):
        counts = string_to_counts(counts)
    return mask_from_runs(counts, h, w)
