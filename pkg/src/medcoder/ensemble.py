"""Weighted fusion of per-modality probabilities.

``P = sum_k alpha_k * P_k``. A predictor that is unavailable for an admission
hands its weight to the designated fallback (text) predictor, so the weights in
use always sum to one.
"""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from medcoder.metrics import f1_scores

logger = logging.getLogger(__name__)

SIMPLEX_TOL = 1e-9
SCHEMA_VERSION = 1


@dataclass(frozen=True)
class EnsembleWeights:
    predictors: tuple[str, ...]
    alphas: tuple[float, ...]
    fallback: str

    def __post_init__(self):
        object.__setattr__(self, "predictors", tuple(self.predictors))
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))
        if len(self.predictors) != len(self.alphas) or not self.predictors:
            raise ValueError("need one weight per predictor and at least one predictor")
        if len(set(self.predictors)) != len(self.predictors):
            raise ValueError(f"duplicate predictor ids in {self.predictors}")
        if self.fallback not in self.predictors:
            raise ValueError(f"fallback {self.fallback!r} is not a registered predictor")
        if any(a < 0 or not np.isfinite(a) for a in self.alphas) or abs(sum(self.alphas) - 1.0) > SIMPLEX_TOL:
            raise ValueError(f"weights {self.alphas} are not on the probability simplex")

    def __getitem__(self, predictor: str) -> float:
        return self.alphas[self.predictors.index(predictor)]

    def effective(self, available: Mapping[str, bool]) -> dict[str, float]:
        """Weights after moving every missing predictor's share to the fallback."""
        if not available.get(self.fallback, False):
            raise ValueError(f"fallback predictor {self.fallback!r} is unavailable")
        out = {p: 0.0 for p in self.predictors}
        for p, a in zip(self.predictors, self.alphas):
            out[p if available.get(p, False) else self.fallback] += a
        return out

    def to_dict(self) -> dict:
        return {"weights": dict(zip(self.predictors, self.alphas)), "order": list(self.predictors),
                "fallback": self.fallback}

    @classmethod
    def from_dict(cls, d: dict) -> "EnsembleWeights":
        return cls(tuple(d["order"]), tuple(d["weights"][p] for p in d["order"]), d["fallback"])


@dataclass
class ModalityPrediction:
    """Probabilities of one predictor; ``available`` may be a flag or a per-row mask."""

    predictor: str
    probabilities: np.ndarray
    available: np.ndarray | bool = True

    def __post_init__(self):
        self.probabilities = np.asarray(self.probabilities, dtype=np.float64)
        n = 1 if self.probabilities.ndim == 1 else len(self.probabilities)
        mask = np.broadcast_to(np.asarray(self.available, dtype=bool), (n,)).copy()
        self.available = mask
        if mask.any():
            rows = self.probabilities.reshape(n, -1)[mask]
            if not np.all((rows >= 0) & (rows <= 1)):
                raise ValueError(f"{self.predictor} probabilities must lie in [0, 1]")


def _rows(prediction: ModalityPrediction) -> np.ndarray:
    return np.atleast_2d(prediction.probabilities)


def fuse(predictions: Sequence[ModalityPrediction], weights: EnsembleWeights) -> np.ndarray:
    """Fused probabilities, shape ``(C,)`` for single vectors or ``(N, C)``."""
    by_id = {p.predictor: p for p in predictions}
    if weights.fallback not in by_id:
        raise ValueError(f"fallback predictor {weights.fallback!r} is unavailable")
    single = by_id[weights.fallback].probabilities.ndim == 1
    base = _rows(by_id[weights.fallback])
    n, c = base.shape
    fallback_mask = by_id[weights.fallback].available
    if not fallback_mask.all():
        raise ValueError(f"fallback predictor {weights.fallback!r} is unavailable for some rows")
    fused = np.zeros((n, c))
    fallback_alpha = np.zeros(n)
    for name, alpha in zip(weights.predictors, weights.alphas):
        pred = by_id.get(name)
        if name == weights.fallback or pred is None:
            fallback_alpha += alpha
            continue
        probs = _rows(pred)
        if probs.shape != (n, c):
            raise ValueError(f"{name} probabilities have shape {probs.shape}, expected {(n, c)}")
        mask = pred.available
        fused[mask] += alpha * probs[mask]
        fallback_alpha[~mask] += alpha
    fused += fallback_alpha[:, None] * base
    np.clip(fused, 0.0, 1.0, out=fused)
    return fused[0] if single else fused


def simplex_grid(k: int, step: float) -> list[tuple[float, ...]]:
    """All weight vectors with coordinates in multiples of ``step`` summing to one, ascending."""
    if k < 1:
        raise ValueError("need at least one predictor")
    n = round(1.0 / step)
    if step <= 0 or abs(n * step - 1.0) > 1e-9:
        raise ValueError(f"grid step {step} must divide 1")
    out = []
    for head in itertools.product(range(n + 1), repeat=k - 1):
        if sum(head) <= n:
            counts = head + (n - sum(head),)
            out.append(tuple(c / n for c in counts))
    return out


def micro_f1_at(probabilities, labels, thresholds=0.5) -> float:
    return float(f1_scores(np.asarray(probabilities) >= thresholds, labels)[1])


def score_candidates(predictions: Sequence[ModalityPrediction], labels, candidates, fallback: str):
    names = [p.predictor for p in predictions]
    return [micro_f1_at(fuse(predictions, EnsembleWeights(names, w, fallback)), labels) for w in candidates]


def tune_weights(predictions: Sequence[ModalityPrediction], labels, fallback: str,
                 step: float = 0.05) -> EnsembleWeights:
    """Grid search on the simplex for the best validation micro-F1 at 0.5.

    Ties prefer a larger fallback weight, then the earliest candidate in
    ascending lexicographic order.
    """
    names = [p.predictor for p in predictions]
    Y = np.asarray(labels)
    if Y.size == 0 or len(Y) == 0:
        raise ValueError("validation set is empty")
    if fallback not in names:
        raise ValueError(f"fallback {fallback!r} is not among {names}")
    if len(names) == 1:
        return EnsembleWeights(tuple(names), (1.0,), fallback)
    candidates = simplex_grid(len(names), step)
    scores = score_candidates(predictions, Y, candidates, fallback)
    f = names.index(fallback)
    best = max(range(len(candidates)), key=lambda i: (scores[i], candidates[i][f], -i))
    logger.info("ensemble grid: %d candidates, best micro-F1 %.4f at %s", len(candidates), scores[best],
                dict(zip(names, candidates[best])))
    return EnsembleWeights(tuple(names), candidates[best], fallback)


def decide(probabilities, thresholds=0.5) -> np.ndarray:
    """Boolean decisions ``P >= threshold`` (per code thresholds broadcast over rows)."""
    return np.asarray(probabilities) >= np.asarray(thresholds)


def tune_thresholds(probabilities, labels, candidates: Sequence[float] | None = None,
                    max_rounds: int = 10) -> np.ndarray:
    """Per-code thresholds by coordinate ascent on micro-F1, starting from 0.5.

    Only strict improvements are accepted, so the result never scores below
    the global 0.5 threshold on the data it was tuned on.
    """
    P = np.asarray(probabilities, dtype=np.float64)
    Y = np.asarray(labels)
    if candidates is None:
        candidates = np.round(np.arange(0.05, 0.951, 0.05), 10)
    candidates = [float(t) for t in candidates if 0.0 < t < 1.0]
    thresholds = np.full(P.shape[1], 0.5)
    best = micro_f1_at(P, Y, thresholds)
    for _ in range(max_rounds):
        improved = False
        for j in range(P.shape[1]):
            for t in candidates:
                trial = thresholds.copy()
                trial[j] = t
                score = micro_f1_at(P, Y, trial)
                if score > best + 1e-12:
                    best, thresholds, improved = score, trial, True
        if not improved:
            break
    return thresholds


@dataclass
class EnsembleModel:
    """Tuned weights plus per-code decision thresholds."""

    weights: EnsembleWeights
    codes: list[str]
    thresholds: list[float] = field(default_factory=list)
    grid_step: float = 0.05

    def __post_init__(self):
        if not self.thresholds:
            self.thresholds = [0.5] * len(self.codes)
        if len(self.thresholds) != len(self.codes):
            raise ValueError("one threshold per code required")
        if any(not 0.0 < t < 1.0 for t in self.thresholds):
            raise ValueError("thresholds must lie in (0, 1)")

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, **self.weights.to_dict(),
                "thresholds": dict(zip(self.codes, self.thresholds)), "codes": self.codes,
                "grid_step": self.grid_step}

    @classmethod
    def from_dict(cls, d: dict) -> "EnsembleModel":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported ensemble version {d.get('schema_version')}")
        return cls(EnsembleWeights.from_dict(d), list(d["codes"]),
                   [float(d["thresholds"][c]) for c in d["codes"]], float(d["grid_step"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "EnsembleModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
