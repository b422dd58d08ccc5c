"""Multi-label F1 and ROC AUC with micro and macro averaging."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

logger = logging.getLogger(__name__)


def _f1(tp: float, fp: float, fn: float) -> float:
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2 * tp / denom


def f1_scores(decisions, labels):
    """Return ``(macro_f1, micro_f1, per_code_f1)``.

    A code's F1 is 0 when its precision and recall are both 0 (including the
    case with no positives and no predictions).
    """
    D = np.asarray(decisions).astype(bool)
    Y = np.asarray(labels).astype(bool)
    if D.shape != Y.shape or D.ndim != 2:
        raise ValueError(f"decisions {D.shape} and labels {Y.shape} must be equal 2-D shapes")
    tp = (D & Y).sum(axis=0).astype(np.float64)
    fp = (D & ~Y).sum(axis=0).astype(np.float64)
    fn = (~D & Y).sum(axis=0).astype(np.float64)
    per_code = np.array([_f1(a, b, c) for a, b, c in zip(tp, fp, fn)])
    micro = _f1(tp.sum(), fp.sum(), fn.sum())
    macro = float(per_code.mean()) if per_code.size else 0.0
    return macro, micro, per_code


def binary_auc(scores, labels) -> float:
    """Rank-statistic AUC; tied scores count one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auc_scores(probabilities, labels):
    """Return ``(macro_auc, micro_auc, per_code_auc)``.

    Codes lacking either class get NaN and are left out of the macro mean.
    Micro AUC pools every (admission, code) pair into a single ranking.
    """
    P = np.asarray(probabilities, dtype=np.float64)
    Y = np.asarray(labels).astype(bool)
    if P.shape != Y.shape or P.ndim != 2:
        raise ValueError(f"probabilities {P.shape} and labels {Y.shape} must be equal 2-D shapes")
    per_code = np.array([binary_auc(P[:, j], Y[:, j]) for j in range(P.shape[1])])
    defined = ~np.isnan(per_code)
    if not defined.any():
        raise ValueError("no code has both positive and negative examples")
    if not defined.all():
        logger.warning("AUC undefined for %d codes; excluded from macro AUC", int((~defined).sum()))
    return float(per_code[defined].mean()), binary_auc(P.ravel(), Y.ravel()), per_code


@dataclass
class MetricReport:
    macro_f1: float
    micro_f1: float
    macro_auc: float
    micro_auc: float
    codes: list[str]
    per_code_f1: list[float]
    per_code_auc: list[float | None]
    test_positives: list[int]
    train_positives: list[int] = field(default_factory=list)
    n_admissions: int = 0
    schema_version: int = 1

    @classmethod
    def compute(cls, probabilities, decisions, labels, codes, train_positives=None) -> "MetricReport":
        Y = np.asarray(labels)
        macro_f1, micro_f1, f1s = f1_scores(decisions, Y)
        macro_auc, micro_auc, aucs = auc_scores(probabilities, Y)
        return cls(
            macro_f1=float(macro_f1), micro_f1=float(micro_f1),
            macro_auc=float(macro_auc), micro_auc=float(micro_auc),
            codes=list(codes),
            per_code_f1=[float(x) for x in f1s],
            per_code_auc=[None if np.isnan(x) else float(x) for x in aucs],
            test_positives=[int(x) for x in Y.sum(axis=0)],
            train_positives=[int(x) for x in (train_positives if train_positives is not None else [])],
            n_admissions=int(Y.shape[0]),
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls(**json.loads(text))

    def table(self) -> str:
        """Per-code AUC and F1, codes ordered by training sample size (descending)."""
        order = list(range(len(self.codes)))
        if self.train_positives:
            order.sort(key=lambda j: (-self.train_positives[j], j))
        lines = [f"{'code':<10} {'train_n':>8} {'test_n':>7} {'AUC':>7} {'F1':>7}"]
        for j in order:
            auc = self.per_code_auc[j]
            train_n = self.train_positives[j] if self.train_positives else 0
            lines.append(f"{self.codes[j]:<10} {train_n:>8d} {self.test_positives[j]:>7d} "
                         f"{'n/a' if auc is None else format(auc, '.4f'):>7} {self.per_code_f1[j]:>7.4f}")
        lines.append("")
        lines.append(f"macro-F1 {self.macro_f1:.4f}  micro-F1 {self.micro_f1:.4f}  "
                     f"macro-AUC {self.macro_auc:.4f}  micro-AUC {self.micro_auc:.4f}")
        return "\n".join(lines) + "\n"
