"""Contrastive background learning objective on precomputed embeddings.

Bag-level InfoNCE between bag-of-regions text embeddings and image
embeddings, with grounded background concepts appended as extra negatives
in every softmax denominator. Similarities are cosine; all arithmetic is
float64. The loss is the negative log-likelihood
``-1/2 * sum_k (log p_tv[k] + log p_vt[k])``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .io import read_jsonl, write_jsonl

# Object-free prompts per generic background type. Encode them with the text
# encoder, then average per type to get one prototype each.
BACKGROUND_PROMPTS: dict[str, tuple[str, ...]] = {
    "sky": (
        "clear sky background, no objects",
        "a photo of an empty cloudy sky",
        "plain blue sky with nothing in it",
    ),
    "water surface": (
        "calm water surface background, no objects",
        "a photo of an empty lake surface",
        "rippling sea water with nothing on it",
    ),
    "vegetation": (
        "dense grass background, no objects",
        "a photo of leaves and bushes only",
        "green vegetation texture with nothing in front",
    ),
    "paved ground": (
        "empty asphalt road background, no objects",
        "a photo of a bare paved sidewalk",
        "concrete pavement texture with nothing on it",
    ),
    "plain wall": (
        "plain white wall background, no objects",
        "a photo of an empty painted wall",
        "blank interior wall with nothing hanging",
    ),
}


@dataclass(frozen=True)
class Temperatures:
    tau_bag: float = 30.0
    tau_bg: float = 5.0
    tau_cls: float = 30.0
    tau_individual: float = 30.0

    def __post_init__(self):
        for name in ("tau_bag", "tau_bg", "tau_cls", "tau_individual"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"{name} must be positive and finite, got {v}")


@dataclass
class Bag:
    text_embedding: np.ndarray
    image_embedding: np.ndarray
    region_count: int = 1

    def __post_init__(self):
        self.text_embedding = _vector(self.text_embedding)
        self.image_embedding = _vector(self.image_embedding)
        if self.text_embedding.shape != self.image_embedding.shape:
            raise ValueError("text and image embeddings of a bag differ in dimension")


@dataclass
class BackgroundBank:
    """Background concept embeddings, optionally with a learnable prior.

    ``prior`` starts as the concept mean and, when set, is used as one more
    negative next to the fixed concepts.
    """

    labels: list[str] = field(default_factory=list)
    vectors: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    prior: np.ndarray | None = None

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim == 1 and self.vectors.size == 0:
            self.vectors = self.vectors.reshape(0, 0)
        if self.vectors.ndim != 2 or len(self.labels) != self.vectors.shape[0]:
            raise ValueError("labels and vectors must pair up one to one")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("background vectors must be finite")
        if self.prior is not None:
            self.prior = _vector(self.prior)

    @classmethod
    def empty(cls) -> "BackgroundBank":
        return cls([], np.zeros((0, 0)))

    @property
    def size(self) -> int:
        return self.vectors.shape[0]

    @property
    def mean(self) -> np.ndarray:
        return mean_background(self.vectors)

    def with_prior(self) -> "BackgroundBank":
        """Copy with the learnable prior initialized from the concept mean."""
        return replace(self, vectors=self.vectors.copy(), prior=self.mean.copy())

    def negatives(self) -> np.ndarray:
        if self.prior is None:
            return self.vectors
        if self.size == 0:
            return self.prior[None, :]
        return np.vstack([self.vectors, self.prior[None, :]])

    def add(self, label: str, vector) -> "BackgroundBank":
        v = _vector(vector)
        vecs = v[None, :] if self.size == 0 else np.vstack([self.vectors, v[None, :]])
        return replace(self, labels=[*self.labels, label], vectors=vecs)


def _vector(v) -> np.ndarray:
    arr = np.array(v, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise ValueError("embeddings must be finite")
    return arr


def _unit_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    if np.any(norms == 0):
        raise ValueError("cosine similarity of a zero vector")
    return x / norms[:, None], norms


def cosine(a, b) -> float:
    a, b = _vector(a), _vector(b)
    if a.shape != b.shape:
        raise ValueError("dimension mismatch")
    na, nb = math.sqrt(float(a @ a)), math.sqrt(float(b @ b))
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity of a zero vector")
    return float(np.clip((a @ b) / (na * nb), -1.0, 1.0))


def mean_background(vectors) -> np.ndarray:
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[0] == 0:
        raise ValueError("mean of an empty background set")
    return vectors.sum(axis=0) / vectors.shape[0]


def _logsumexp_rows(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1)
    return m + np.log(np.exp(z - m[:, None]).sum(axis=1))


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _stack(bags: Sequence[Bag]) -> tuple[np.ndarray, np.ndarray]:
    if len(bags) == 0:
        raise ValueError("need at least one bag")
    T = np.stack([b.text_embedding for b in bags])
    V = np.stack([b.image_embedding for b in bags])
    return T, V


def _negatives(bank: BackgroundBank | None, d: int) -> np.ndarray:
    if bank is None:
        return np.zeros((0, d))
    B = bank.negatives()
    if B.shape[0] and B.shape[1] != d:
        raise ValueError(f"background dimension {B.shape[1]} != embedding dimension {d}")
    return B.reshape(-1, d)


# ---------------------------------------------------------------------------
# array-level core


def _cbl_logits(T, V, B, tau_bag, tau_bg):
    """Row-wise logits: text->image (+background) and image->text (+background)."""
    Tn, _ = _unit_rows(T)
    Vn, _ = _unit_rows(V)
    S_tv = Tn @ Vn.T
    if B.shape[0]:
        Bn, _ = _unit_rows(B)
        S_tb, S_vb = Tn @ Bn.T, Vn @ Bn.T
    else:
        S_tb = S_vb = np.zeros((T.shape[0], 0))
    z_tv = np.hstack([tau_bag * S_tv, tau_bg * S_tb])
    z_vt = np.hstack([tau_bag * S_tv.T, tau_bg * S_vb])
    return z_tv, z_vt


def cbl_log_probs(T, V, B, tau_bag, tau_bg) -> tuple[np.ndarray, np.ndarray]:
    """``(log p_tv, log p_vt)`` for every bag, max-subtracted."""
    z_tv, z_vt = _cbl_logits(T, V, B, tau_bag, tau_bg)
    diag = np.arange(T.shape[0])
    return z_tv[diag, diag] - _logsumexp_rows(z_tv), z_vt[diag, diag] - _logsumexp_rows(z_vt)


def _infonce(A, Bm, tau) -> float:
    """Symmetric InfoNCE over matched rows of A and Bm, no extra negatives."""
    An, _ = _unit_rows(A)
    Bn, _ = _unit_rows(Bm)
    z = tau * (An @ Bn.T)
    d = np.diag(z)
    log_ab = d - _logsumexp_rows(z)
    log_ba = d - _logsumexp_rows(z.T)
    return float(-0.5 * (log_ab.sum() + log_ba.sum()))


# ---------------------------------------------------------------------------
# public operations


def bag_probabilities(bags: Sequence[Bag], bank: BackgroundBank | None, temps: Temperatures):
    T, V = _stack(bags)
    B = _negatives(bank, T.shape[1])
    lt, lv = cbl_log_probs(T, V, B, temps.tau_bag, temps.tau_bg)
    return np.exp(lt), np.exp(lv)


def p_tv(k: int, bags, bank, temps) -> float:
    return float(bag_probabilities(bags, bank, temps)[0][k])


def p_vt(k: int, bags, bank, temps) -> float:
    return float(bag_probabilities(bags, bank, temps)[1][k])


def cbl_bag_loss(bags: Sequence[Bag], bank: BackgroundBank | None, temps: Temperatures) -> float:
    T, V = _stack(bags)
    B = _negatives(bank, T.shape[1])
    lt, lv = cbl_log_probs(T, V, B, temps.tau_bag, temps.tau_bg)
    return float(-0.5 * (lt.sum() + lv.sum()))


def baseline_bag_loss(bags: Sequence[Bag], temps: Temperatures) -> float:
    """Bag alignment loss without background negatives."""
    T, V = _stack(bags)
    return _infonce(T, V, temps.tau_bag)


def individual_loss(teacher: Sequence, student: Sequence, temps: Temperatures) -> float:
    """Region-level symmetric InfoNCE between teacher and student embeddings."""
    if len(teacher) != len(student):
        raise ValueError("teacher and student lists differ in length")
    if len(teacher) == 0:
        raise ValueError("need at least one region")
    G = np.stack([_vector(t) for t in teacher])
    S = np.stack([_vector(s) for s in student])
    if G.shape != S.shape:
        raise ValueError("dimension mismatch")
    return _infonce(G, S, temps.tau_individual)


def classification_prob(text_embedding, category_embeddings: Sequence, tau_cls: float) -> np.ndarray:
    """Softmax over scaled cosine similarities to each category embedding."""
    if len(category_embeddings) == 0:
        raise ValueError("need at least one category")
    t = _vector(text_embedding)
    C = np.stack([_vector(c) for c in category_embeddings])
    if C.shape[1] != t.shape[0]:
        raise ValueError("dimension mismatch")
    Cn, _ = _unit_rows(C)
    tn, _ = _unit_rows(t[None, :])
    return _softmax_rows(tau_cls * (tn @ Cn.T))[0]


# ---------------------------------------------------------------------------
# gradients


@dataclass
class CBLGradients:
    text: np.ndarray  # (G, d)
    image: np.ndarray  # (G, d)
    background: np.ndarray  # (M', d), rows follow bank.negatives()


def _through_normalization(g_unit, unit, norms):
    radial = np.einsum("ij,ij->i", g_unit, unit)
    return (g_unit - unit * radial[:, None]) / norms[:, None]


def cbl_grad_arrays(T, V, B, tau_bag, tau_bg):
    G = T.shape[0]
    Tn, tnorm = _unit_rows(T)
    Vn, vnorm = _unit_rows(V)
    S_tv = Tn @ Vn.T
    has_bg = B.shape[0] > 0
    if has_bg:
        Bn, bnorm = _unit_rows(B)
        S_tb, S_vb = Tn @ Bn.T, Vn @ Bn.T
    else:
        S_tb = S_vb = np.zeros((G, 0))
    P = _softmax_rows(np.hstack([tau_bag * S_tv, tau_bg * S_tb]))
    Q = _softmax_rows(np.hstack([tau_bag * S_tv.T, tau_bg * S_vb]))
    P_g, P_b = P[:, :G], P[:, G:]
    Q_g, Q_b = Q[:, :G], Q[:, G:]
    eye = np.eye(G)
    dS_tv = -0.5 * tau_bag * (2.0 * eye - P_g - Q_g.T)
    dS_tb = 0.5 * tau_bg * P_b
    dS_vb = 0.5 * tau_bg * Q_b
    gT = dS_tv @ Vn
    gV = dS_tv.T @ Tn
    if has_bg:
        gT = gT + dS_tb @ Bn
        gV = gV + dS_vb @ Bn
        gB = _through_normalization(dS_tb.T @ Tn + dS_vb.T @ Vn, Bn, bnorm)
    else:
        gB = np.zeros_like(B)
    return (_through_normalization(gT, Tn, tnorm),
            _through_normalization(gV, Vn, vnorm),
            gB)


def grad_cbl_bag_loss(bags: Sequence[Bag], bank: BackgroundBank | None, temps: Temperatures) -> CBLGradients:
    """Analytic gradient of :func:`cbl_bag_loss` for every embedding."""
    T, V = _stack(bags)
    B = _negatives(bank, T.shape[1])
    gT, gV, gB = cbl_grad_arrays(T, V, B, temps.tau_bag, temps.tau_bg)
    return CBLGradients(gT, gV, gB)


def _loss_arrays(T, V, B, temps):
    lt, lv = cbl_log_probs(T, V, B, temps.tau_bag, temps.tau_bg)
    return float(-0.5 * (lt.sum() + lv.sum()))


def finite_difference_grads(T, V, B, temps: Temperatures, h: float = 1e-5):
    """Central-difference gradient of the loss with respect to T, V and B."""
    out = []
    for which in range(3):
        arrays = [T.copy(), V.copy(), B.copy()]
        target = arrays[which]
        g = np.zeros_like(target)
        for idx in np.ndindex(*target.shape):
            orig = target[idx]
            target[idx] = orig + h
            up = _loss_arrays(*arrays, temps)
            target[idx] = orig - h
            down = _loss_arrays(*arrays, temps)
            target[idx] = orig
            g[idx] = (up - down) / (2 * h)
        out.append(g)
    return tuple(out)


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> float:
    """max |a - n| / max(|a|, |n|, floor) over all entries.

    The floor keeps entries that are zero up to rounding from dominating.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


@dataclass
class GradCheckReport:
    loss: float
    grad_norms: dict
    max_rel_err: dict

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)


def gradcheck(bags: Sequence[Bag], bank: BackgroundBank | None, temps: Temperatures,
              h: float = 1e-5) -> GradCheckReport:
    T, V = _stack(bags)
    B = _negatives(bank, T.shape[1])
    gT, gV, gB = cbl_grad_arrays(T, V, B, temps.tau_bag, temps.tau_bg)
    nT, nV, nB = finite_difference_grads(T, V, B, temps, h)
    return GradCheckReport(
        loss=_loss_arrays(T, V, B, temps),
        grad_norms={"text": float(np.linalg.norm(gT)), "image": float(np.linalg.norm(gV)),
                    "background": float(np.linalg.norm(gB))},
        max_rel_err={"text": max_relative_error(gT, nT), "image": max_relative_error(gV, nV),
                     "background": max_relative_error(gB, nB)},
    )


def gradient_descent_background(bank: BackgroundBank, bags: Sequence[Bag], temps: Temperatures,
                                steps: int, lr: float, train: str = "prior"):
    """Plain gradient descent on background embeddings, bags held fixed.

    ``train="prior"`` (default) optimizes the mean-initialized prior while the
    concepts stay fixed negatives; ``train="concepts"`` moves the concepts.
    Returns ``(new_bank, loss_trace)`` where the trace has ``steps + 1``
    entries, the first one before any update. The input bank is not mutated.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if train not in ("prior", "concepts"):
        raise ValueError(f"unknown train target {train!r}")
    T, V = _stack(bags)
    if train == "prior":
        work = bank.with_prior() if bank.prior is None else replace(bank, prior=bank.prior.copy())
    else:
        work = replace(bank, vectors=bank.vectors.copy())
    if work.negatives().shape[0] == 0:
        raise ValueError("no background embeddings to train")
    trace = []
    for _ in range(steps + 1):
        B = work.negatives()
        trace.append(_loss_arrays(T, V, B, temps))
        if len(trace) > steps:
            break
        _, _, gB = cbl_grad_arrays(T, V, B, temps.tau_bag, temps.tau_bg)
        if train == "prior":
            work.prior = work.prior - lr * gB[-1]
        else:
            work.vectors = work.vectors - lr * gB[: work.size]
    return work, trace


# ---------------------------------------------------------------------------
# embedding files


def load_embeddings(path) -> list[tuple[str, np.ndarray]]:
    """Read ``{"id", "dim", "vector"}`` lines; every vector must share one dimension."""
    out = []
    dim = None
    for rec in read_jsonl(path):
        vec = _vector(rec["vector"])
        if int(rec.get("dim", len(vec))) != len(vec):
            raise ValueError(f"{path}: id {rec['id']!r} declares dim {rec['dim']} but has {len(vec)} values")
        if dim is None:
            dim = len(vec)
        elif len(vec) != dim:
            raise ValueError(f"{path}: id {rec['id']!r} has dim {len(vec)}, expected {dim}")
        out.append((str(rec["id"]), vec))
    return out


def write_embeddings(path, items: Iterable[tuple[str, np.ndarray]]) -> None:
    write_jsonl(path, ({"id": k, "dim": int(len(v)), "vector": [float(x) for x in v]} for k, v in items))


def load_bags(text_path, image_path) -> list[Bag]:
    """Pair text and image embeddings by id, in text-file order."""
    text = load_embeddings(text_path)
    image = dict(load_embeddings(image_path))
    if set(image) != {k for k, _ in text}:
        raise ValueError("text and image embedding files must carry the same ids")
    return [Bag(t, image[k]) for k, t in text]


def load_background_bank(path) -> BackgroundBank:
    items = load_embeddings(path)
    if not items:
        return BackgroundBank.empty()
    return BackgroundBank([k for k, _ in items], np.stack([v for _, v in items]))


def build_background_bank(prompt_embeddings: Mapping[str, Sequence]) -> BackgroundBank:
    """One prototype per background type: the mean of its prompt embeddings."""
    labels, protos = [], []
    for label in prompt_embeddings:
        vecs = np.stack([_vector(v) for v in prompt_embeddings[label]])
        labels.append(label)
        protos.append(mean_background(vecs))
    if not labels:
        return BackgroundBank.empty()
    return BackgroundBank(labels, np.stack(protos))


def group_prompt_embeddings(items: Iterable[tuple[str, np.ndarray]], sep: str = "#") -> dict[str, list]:
    """Group ``"<type>#<n>"`` ids by type, keeping first-seen order."""
    groups: dict[str, list] = {}
    for key, vec in items:
        groups.setdefault(key.split(sep, 1)[0], []).append(vec)
    return groups


def data_path(name: str) -> Path:
    return Path(__file__).with_name("data") / name
