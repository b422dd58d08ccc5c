"""Evidence for predicted codes.

Text evidence uses path influence through the Text-CNN. A path runs from one
embedding entry through a convolution edge into a filter whose max-pool picked
that window, through the ReLU (gain 1 when active, 0 otherwise) and the dense
edge to the code logit. Its score is the input value times every edge weight
on the way; a word's score sums its paths. Because the network is piecewise
linear this equals gradient times input, which is how it is computed.

Tabular evidence fits a weighted ridge surrogate around one instance by
switching its active bits off at random.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from medcoder.tabular import FeatureSchema, TABLE_OF_BLOCK
from medcoder.text import PAD_ID, raw_tokens, tokenize
from medcoder.textcnn import TextModel, pad_batch

logger = logging.getLogger(__name__)

REPORT_VERSION = 1


@dataclass(frozen=True)
class PhraseEvidence:
    text: str
    start: int
    end: int
    score: float
    rank: int


@dataclass(frozen=True)
class FeatureEvidence:
    feature_id: str
    table: str
    weight: float
    rank: int


@dataclass
class SurrogateConfig:
    samples: int = 1000
    sigma: float = 0.25
    ridge: float = 1.0
    top_k: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.samples < 10:
            raise ValueError("surrogate needs at least 10 samples")
        if self.sigma <= 0:
            raise ValueError("kernel width sigma must be positive")
        if self.ridge < 0:
            raise ValueError("ridge penalty must be non-negative")


def _float64_net(net):
    twin = copy.deepcopy(net).double()
    twin.eval()
    return twin


def word_influence(model: TextModel, token_ids: Sequence[int], target: int | str,
                   tfidf_vector=None, net=None) -> np.ndarray:
    """Path-influence score of every token position for one code logit.

    ``net`` may pass a pre-converted float64 copy of ``model.net`` to avoid
    copying it on every call.
    """
    if not model.trained:
        raise ValueError("word_influence needs a trained text model")
    j = model.codes.index(target) if isinstance(target, str) else int(target)
    if not 0 <= j < model.C:
        raise ValueError(f"target code index {j} out of range")
    if len(token_ids) == 0:
        return np.zeros(0)
    net = net if net is not None else _float64_net(model.net)
    ids, lengths = pad_batch([list(token_ids)], net.max_width)
    embedded = net.embedding(ids).detach().requires_grad_(True)
    tf = None
    if net.n_tfidf:
        if tfidf_vector is None:
            raise ValueError("this model needs the document's TF-IDF vector")
        tf = torch.as_tensor(np.asarray(tfidf_vector, dtype=np.float64)[None, :])
    with torch.enable_grad():
        logit = net.logits_from_embedded(embedded, lengths, tf)[0, j]
        (grad,) = torch.autograd.grad(logit, embedded)
    scores = (grad * embedded).sum(dim=-1)[0, :len(token_ids)]
    return scores.detach().numpy()


def assemble_phrases(scores: Sequence[float], spans: Sequence[tuple[int, int]], text: str | None = None,
                     top_k: int | None = 3, floor: float = 0.0) -> list[PhraseEvidence]:
    """Group maximal runs of non-zero scores and rank them by their peak score.

    Scores with ``|s| <= floor`` count as zero. Ties keep the earlier phrase
    first. ``top_k=None`` returns every phrase.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) != len(spans):
        raise ValueError("scores and spans must be aligned")
    support = np.abs(scores) > floor
    runs, start = [], None
    for t, on in enumerate(support):
        if on and start is None:
            start = t
        elif not on and start is not None:
            runs.append((start, t))
            start = None
    if start is not None:
        runs.append((start, len(scores)))
    ranked = sorted(runs, key=lambda r: (-scores[r[0]:r[1]].max(), r[0]))
    if top_k is not None:
        ranked = ranked[:top_k]
    out = []
    for rank, (a, b) in enumerate(ranked, 1):
        lo, hi = spans[a][0], spans[b - 1][1]
        out.append(PhraseEvidence(text="" if text is None else text[lo:hi], start=int(lo), end=int(hi),
                                  score=float(scores[a:b].max()), rank=rank))
    return out


def explain_text(model: TextModel, text: str, target: int | str, top_k: int = 3, relative_floor: float = 0.1,
                 net=None) -> list[PhraseEvidence]:
    """Top phrases for one code; scores within ``relative_floor`` of zero, relative to the peak |score|, are dropped."""
    doc = tokenize(text, model.vocab, model.config.max_tokens)
    if not doc.token_ids:
        return []
    tf = None if model.tfidf is None else model.tfidf.transform([text])[0]
    scores = word_influence(model, doc.token_ids, target, tf, net=net)
    scores = np.where(np.asarray(doc.token_ids) == PAD_ID, 0.0, scores)
    peak = float(np.abs(scores).max()) if scores.size else 0.0
    return assemble_phrases(scores, doc.spans, text, top_k, floor=relative_floor * peak)


def kernel_weights(distances, width: int, sigma: float) -> np.ndarray:
    """``exp(-(d / width)^2 / sigma^2)`` for Hamming distances ``d``."""
    d = np.asarray(distances, dtype=np.float64) / max(width, 1)
    return np.exp(-(d ** 2) / sigma ** 2)


def weighted_ridge(Z: np.ndarray, y: np.ndarray, w: np.ndarray, penalty: float) -> tuple[np.ndarray, float]:
    """Minimize ``sum_i w_i (y_i - b - z_i . beta)^2 + penalty * |beta|^2``; returns ``(beta, b)``."""
    z_mean = (w @ Z) / w.sum()
    y_mean = float(w @ y) / w.sum()
    Zc = Z - z_mean
    A = Zc.T @ (Zc * w[:, None]) + penalty * np.eye(Z.shape[1])
    coef = np.linalg.solve(A, Zc.T @ (w * (y - y_mean))) if penalty > 0 else \
        np.linalg.lstsq(A, Zc.T @ (w * (y - y_mean)), rcond=None)[0]
    return coef, y_mean - float(z_mean @ coef)


def explain_tabular(predict: Callable[[np.ndarray], np.ndarray], vector, schema: FeatureSchema | Sequence[str],
                    config: SurrogateConfig | None = None) -> list[FeatureEvidence]:
    """Local surrogate weights for the active bits of ``vector``.

    ``predict`` maps an (n, width) 0/1 matrix to n target-code probabilities.
    The first sample is the instance itself; the rest switch each active bit
    off independently with probability one half.
    """
    config = config or SurrogateConfig()
    ids = schema.ids if isinstance(schema, FeatureSchema) else list(schema)
    x = np.asarray(vector, dtype=np.uint8)
    active = np.flatnonzero(x)
    if active.size == 0:
        logger.warning("instance has no active features; no tabular evidence")
        return []
    rng = np.random.default_rng(config.seed)
    keep = rng.random((config.samples, active.size)) >= 0.5
    keep[0] = True
    Xs = np.repeat(x[None, :], config.samples, axis=0)
    Xs[:, active] = keep
    y = np.asarray(predict(Xs), dtype=np.float64).reshape(-1)
    w = kernel_weights((~keep).sum(axis=1), active.size, config.sigma)
    coef, _ = weighted_ridge(keep.astype(np.float64), y, w, config.ridge)
    coef = np.where(np.abs(coef) < 1e-12, 0.0, coef)
    order = sorted(range(active.size), key=lambda i: (-abs(coef[i]), active[i]))[:config.top_k]
    return [FeatureEvidence(feature_id=ids[active[i]], table=TABLE_OF_BLOCK.get(ids[active[i]].split(":", 1)[0], "?"),
                            weight=float(coef[i]), rank=r) for r, i in enumerate(order, 1)]


def jaccard_ids(a, b) -> float:
    """Set Jaccard; two empty sets score 1."""
    A, B = set(a), set(b)
    if not A and not B:
        return 1.0
    return len(A & B) / len(A | B)


def overlap_ratio(a: str, b: str) -> float:
    """Shared token types over the smaller snippet's token types."""
    ta, tb = set(raw_tokens(a)), set(raw_tokens(b))
    if not ta or not tb:
        return 0.0
    return len(ta & tb) / min(len(ta), len(tb))


def max_matching(adjacency: list[list[int]], n_right: int) -> int:
    """Size of a maximum bipartite matching (augmenting paths)."""
    match_right = [-1] * n_right

    def augment(u: int, seen: list[bool]) -> bool:
        for v in adjacency[u]:
            if not seen[v]:
                seen[v] = True
                if match_right[v] < 0 or augment(match_right[v], seen):
                    match_right[v] = u
                    return True
        return False

    return sum(augment(u, [False] * n_right) for u in range(len(adjacency)))


def jaccard_text(a: Sequence[str], b: Sequence[str], threshold: float = 0.5) -> float:
    """Jaccard over snippets where two snippets match when their overlap ratio reaches ``threshold``.

    Each snippet matches at most one on the other side; the largest such
    one-to-one matching is used.
    """
    if not 0 < threshold <= 1:
        raise ValueError("overlap threshold must lie in (0, 1]")
    if not a and not b:
        return 1.0
    adjacency = [[j for j, y in enumerate(b) if overlap_ratio(x, y) >= threshold] for x in a]
    m = max_matching(adjacency, len(b))
    return m / (len(a) + len(b) - m)


def jaccard(a, b, threshold: float | None = None) -> float:
    """Feature-id Jaccard when ``threshold`` is None, snippet Jaccard otherwise."""
    return jaccard_ids(a, b) if threshold is None else jaccard_text(list(a), list(b), threshold)


def evidence_entry(admission_id: str, code: str, probability: float, phrases: Sequence[PhraseEvidence],
                   features: Sequence[FeatureEvidence]) -> dict:
    tables: dict[str, list[dict]] = {}
    for f in features:
        tables.setdefault(f.table, []).append(asdict(f))
    return {"admission_id": admission_id, "code": code, "probability": float(probability),
            "phrases": [asdict(p) for p in phrases], "features": tables}


def write_report(entries: Sequence[dict], path: str | Path) -> None:
    doc = {"schema_version": REPORT_VERSION, "evidence": list(entries)}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def score_annotations(entries: Sequence[dict], annotations: Sequence[dict], threshold: float = 0.5) -> dict:
    """Mean text and tabular Jaccard against annotations keyed by (admission, code)."""
    by_key = {(e["admission_id"], e["code"]): e for e in entries}
    text_scores, tab_scores = [], []
    for ann in annotations:
        e = by_key.get((ann["admission_id"], ann["code_id"]))
        phrases = [p["text"] for p in e["phrases"]] if e else []
        feats = [f["feature_id"] for fs in (e["features"].values() if e else []) for f in fs]
        text_scores.append(jaccard_text(phrases, ann.get("text_snippets", []), threshold))
        tab_scores.append(jaccard_ids(feats, ann.get("feature_ids", [])))
    return {"n": len(annotations),
            "text_jaccard": float(np.mean(text_scores)) if text_scores else None,
            "tabular_jaccard": float(np.mean(tab_scores)) if tab_scores else None}
