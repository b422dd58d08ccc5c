"""Binary tabular features and one-vs-all weighted decision trees.

Each admission becomes a 0/1 vector over four blocks:

* ``lab:<test>``   1 when strictly more abnormal than normal flags were recorded
* ``chart:<name>`` 1 when the latest value lies outside the configured range
* ``med:<drug>``   1 when the drug was prescribed
* ``bio:<org>``    1 when any culture for the organism was positive

Missing events count as normal / not prescribed / negative.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from medcoder import kernels
from medcoder.corpus import AdmissionRecord

logger = logging.getLogger(__name__)

BLOCKS = ("lab", "chart", "med", "bio")
TABLE_OF_BLOCK = {"lab": "LAB", "chart": "CHART", "med": "MED", "bio": "BIO"}
DEFAULT_CHART_RANGES = {
    "heart_rate": (60.0, 100.0),
    "sbp": (90.0, 120.0),
    "dbp": (60.0, 80.0),
    "bmi": (18.5, 25.0),
}
SCHEMA_VERSION = 1


@dataclass(frozen=True)
class FeatureSchema:
    lab: tuple[str, ...]
    chart: tuple[str, ...]
    med: tuple[str, ...]
    bio: tuple[str, ...]
    chart_ranges: dict = field(default_factory=lambda: dict(DEFAULT_CHART_RANGES))
    med_min_frequency: int = 50

    @property
    def ids(self) -> list[str]:
        return [f"{block}:{name}" for block in BLOCKS for name in getattr(self, block)]

    @property
    def width(self) -> int:
        return sum(len(getattr(self, b)) for b in BLOCKS)

    def block_of(self, feature_id: str) -> str:
        return TABLE_OF_BLOCK[feature_id.split(":", 1)[0]]

    def restrict(self, blocks: Sequence[str]) -> "FeatureSchema":
        unknown = set(blocks) - set(BLOCKS)
        if unknown:
            raise ValueError(f"unknown feature blocks {sorted(unknown)}")
        return FeatureSchema(**{b: (getattr(self, b) if b in blocks else ()) for b in BLOCKS},
                             chart_ranges=self.chart_ranges, med_min_frequency=self.med_min_frequency)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["chart_ranges"] = {k: list(v) for k, v in self.chart_ranges.items()}
        d["schema_version"] = SCHEMA_VERSION
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSchema":
        return cls(
            lab=tuple(d["lab"]), chart=tuple(d["chart"]), med=tuple(d["med"]), bio=tuple(d["bio"]),
            chart_ranges={k: (float(v[0]), float(v[1])) for k, v in d["chart_ranges"].items()},
            med_min_frequency=int(d["med_min_frequency"]),
        )


def fit_schema(records: Sequence[AdmissionRecord], chart_ranges: dict | None = None,
               med_min_frequency: int = 50) -> FeatureSchema:
    """Freeze the feature id order from training records.

    Drug frequency is the number of training prescription rows naming it.
    """
    if not records:
        raise ValueError("cannot fit a feature schema on zero records")
    ranges = dict(DEFAULT_CHART_RANGES if chart_ranges is None else chart_ranges)
    for name, (lo, hi) in ranges.items():
        if lo > hi:
            raise ValueError(f"chart range for {name} has low {lo} > high {hi}")
    labs, orgs = set(), set()
    drugs: Counter[str] = Counter()
    for r in records:
        labs.update(t for t, _ in r.lab_events)
        orgs.update(o for o, _ in r.micro_events)
        drugs.update(r.medications)
    meds = sorted(d for d, n in drugs.items() if n >= med_min_frequency)
    return FeatureSchema(lab=tuple(sorted(labs)), chart=tuple(ranges), med=tuple(meds),
                         bio=tuple(sorted(orgs)),
                         chart_ranges={k: (float(v[0]), float(v[1])) for k, v in ranges.items()},
                         med_min_frequency=med_min_frequency)


def majority_abnormal(flags: Sequence[str]) -> int:
    """1 iff abnormal flags strictly outnumber normal ones."""
    abnormal = sum(1 for f in flags if f == "abnormal")
    return int(abnormal > len(flags) - abnormal)


def vectorize(record: AdmissionRecord, schema: FeatureSchema) -> np.ndarray:
    """Binary feature vector in schema order; ids unknown to the schema are ignored."""
    flags: dict[str, list[str]] = {}
    for test, flag in record.lab_events:
        flags.setdefault(test, []).append(flag)
    latest: dict[str, float] = {}
    for name, value in record.chart_events:
        latest[name] = value
    meds = set(record.medications)
    positive = {org for org, result in record.micro_events if result == "positive"}

    bits = [majority_abnormal(flags.get(t, ())) for t in schema.lab]
    for name in schema.chart:
        lo, hi = schema.chart_ranges[name]
        v = latest.get(name)
        bits.append(int(v is not None and not lo <= v <= hi))
    bits += [int(d in meds) for d in schema.med]
    bits += [int(o in positive) for o in schema.bio]
    return np.asarray(bits, dtype=np.uint8)


def vectorize_many(records: Sequence[AdmissionRecord], schema: FeatureSchema) -> np.ndarray:
    X = np.zeros((len(records), schema.width), dtype=np.uint8)
    for i, r in enumerate(records):
        X[i] = vectorize(r, schema)
    return X


@dataclass
class TabularConfig:
    blocks: tuple[str, ...] = BLOCKS
    max_depth: int = 12
    min_leaf_weight: float = 5.0
    med_min_frequency: int = 50
    chart_ranges: dict | None = None

    def __post_init__(self):
        self.blocks = tuple(self.blocks)
        if not self.blocks or set(self.blocks) - set(BLOCKS):
            raise ValueError(f"blocks must be a non-empty subset of {BLOCKS}")
        if self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")
        if self.min_leaf_weight < 0:
            raise ValueError("min_leaf_weight must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TabularConfig":
        return cls(**d)


def class_weights(y: np.ndarray) -> tuple[float, float]:
    """``total / (2 * count)`` for (negative, positive); an absent class gets 0."""
    n = len(y)
    pos = int(y.sum())
    neg = n - pos
    return (n / (2.0 * neg) if neg else 0.0, n / (2.0 * pos) if pos else 0.0)


def gini(pos: float, neg: float) -> float:
    total = pos + neg
    if total <= 0:
        return 0.0
    return 1.0 - (pos * pos + neg * neg) / (total * total)


def split_gains(pos1, neg1, pos_total: float, neg_total: float, min_leaf_weight: float) -> np.ndarray:
    """Weighted Gini decrease for splitting on each feature; -inf where a child is too light."""
    pos1 = np.asarray(pos1, dtype=np.float64)
    neg1 = np.asarray(neg1, dtype=np.float64)
    pos0, neg0 = pos_total - pos1, neg_total - neg1
    w1, w0 = pos1 + neg1, pos0 + neg0

    def g(p, n, w):
        return np.where(w > 0, 1.0 - (p * p + n * n) / np.where(w > 0, w * w, 1.0), 0.0)

    parent = (pos_total + neg_total) * gini(pos_total, neg_total)
    gains = parent - (w1 * g(pos1, neg1, w1) + w0 * g(pos0, neg0, w0))
    ok = (w1 >= min_leaf_weight) & (w0 >= min_leaf_weight) & (w1 > 0) & (w0 > 0)
    return np.where(ok, gains, -np.inf)


def fit_tree(X: np.ndarray, y: np.ndarray, weights: np.ndarray, max_depth: int = 12,
             min_leaf_weight: float = 5.0) -> list[dict]:
    """Grow one tree greedily; returns a flat node list, root first.

    Internal nodes ``{"feature": j, "zero": i, "one": k}`` send bit 0 to ``zero``.
    Leaves ``{"probability": p, "positive_weight": a, "negative_weight": b}``.
    Ties between equal gains go to the lowest feature index.
    """
    X = np.ascontiguousarray(X, dtype=np.uint8)
    y = np.ascontiguousarray(y, dtype=np.uint8)
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    nodes: list[dict] = []

    def leaf(pos: float, neg: float) -> dict:
        total = pos + neg
        return {"probability": pos / total if total > 0 else 0.0, "positive_weight": pos, "negative_weight": neg}

    def grow(rows: np.ndarray, depth: int) -> int:
        idx = len(nodes)
        nodes.append({})
        w = weights[rows]
        is_pos = y[rows].astype(bool)
        pos, neg = float(w[is_pos].sum()), float(w[~is_pos].sum())
        if depth >= max_depth or pos <= 0 or neg <= 0 or X.shape[1] == 0:
            nodes[idx] = leaf(pos, neg)
            return idx
        pos1, neg1 = kernels.split_counts(X, weights, y, rows.astype(np.intp))
        gains = split_gains(pos1, neg1, pos, neg, min_leaf_weight)
        j = int(np.argmax(gains))
        if not np.isfinite(gains[j]) or gains[j] <= 1e-12:
            nodes[idx] = leaf(pos, neg)
            return idx
        bit = X[rows, j].astype(bool)
        zero = grow(rows[~bit], depth + 1)
        one = grow(rows[bit], depth + 1)
        nodes[idx] = {"feature": j, "zero": zero, "one": one}
        return idx

    grow(np.arange(len(y), dtype=np.intp), 0)
    return nodes


def tree_predict(nodes: list[dict], X: np.ndarray) -> np.ndarray:
    X = np.asarray(X)
    out = np.empty(len(X), dtype=np.float64)
    for i, x in enumerate(X):
        k = 0
        while "feature" in nodes[k]:
            k = nodes[k]["one"] if x[nodes[k]["feature"]] else nodes[k]["zero"]
        out[i] = nodes[k]["probability"]
    return out


def tree_depth(nodes: list[dict], k: int = 0) -> int:
    if "feature" not in nodes[k]:
        return 0
    return 1 + max(tree_depth(nodes, nodes[k]["zero"]), tree_depth(nodes, nodes[k]["one"]))


@dataclass
class TreeEnsembleModel:
    """One tree per code over a frozen feature schema."""

    schema: FeatureSchema
    codes: list[str]
    trees: list[list[dict]]
    weights: list[tuple[float, float]]
    config: TabularConfig = field(default_factory=TabularConfig)

    @property
    def C(self) -> int:
        return len(self.codes)

    def predict_proba(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X))
        if X.shape[1] != self.schema.width:
            raise ValueError(f"feature width {X.shape[1]} does not match schema width {self.schema.width}")
        return np.stack([tree_predict(t, X) for t in self.trees], axis=1)

    def predict_records(self, records: Sequence[AdmissionRecord]) -> np.ndarray:
        return self.predict_proba(vectorize_many(records, self.schema))

    def to_dict(self) -> dict:
        ids = self.schema.ids
        trees = []
        for nodes in self.trees:
            trees.append([dict(n, feature_id=ids[n["feature"]]) if "feature" in n else n for n in nodes])
        return {
            "schema_version": SCHEMA_VERSION,
            "codes": self.codes,
            "config": self.config.to_dict(),
            "feature_schema": self.schema.to_dict(),
            "class_weights": [{"negative": a, "positive": b} for a, b in self.weights],
            "trees": trees,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TreeEnsembleModel":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported tabular model version {d.get('schema_version')}")
        trees = [[{k: v for k, v in n.items() if k != "feature_id"} for n in t] for t in d["trees"]]
        return cls(schema=FeatureSchema.from_dict(d["feature_schema"]), codes=list(d["codes"]),
                   trees=trees, weights=[(w["negative"], w["positive"]) for w in d["class_weights"]],
                   config=TabularConfig.from_dict(d["config"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "TreeEnsembleModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def fit_trees(X, Y, codes: Sequence[str], schema: FeatureSchema, config: TabularConfig | None = None,
              sample_weights=None) -> TreeEnsembleModel:
    """Fit one balanced-weight tree per code column of ``Y``.

    ``sample_weights`` overrides the balanced rule with a (N, C) matrix.
    """
    config = config or TabularConfig()
    X = np.ascontiguousarray(X, dtype=np.uint8)
    Y = np.asarray(Y).astype(np.uint8)
    if X.ndim != 2 or Y.ndim != 2 or len(X) != len(Y):
        raise ValueError(f"feature matrix {X.shape} and label matrix {Y.shape} disagree")
    if len(X) < 2:
        raise ValueError("need at least two examples to fit trees")
    if X.shape[1] != schema.width:
        raise ValueError(f"feature width {X.shape[1]} does not match schema width {schema.width}")
    if Y.shape[1] != len(codes):
        raise ValueError(f"label width {Y.shape[1]} does not match {len(codes)} codes")
    trees, weights = [], []
    for j, code in enumerate(codes):
        y = np.ascontiguousarray(Y[:, j])
        w_neg, w_pos = class_weights(y)
        if w_neg == 0 or w_pos == 0:
            logger.warning("code %s has only one class in training; fitting a constant leaf", code)
        if sample_weights is None:
            w = np.where(y == 1, w_pos, w_neg)
        else:
            w = np.asarray(sample_weights, dtype=np.float64)[:, j]
        trees.append(fit_tree(X, y, w, config.max_depth, config.min_leaf_weight))
        weights.append((w_neg, w_pos))
    return TreeEnsembleModel(schema=schema, codes=list(codes), trees=trees, weights=weights, config=config)


def train_tabular(records: Sequence[AdmissionRecord], codes: Sequence[str],
                  config: TabularConfig | None = None) -> TreeEnsembleModel:
    """Fit the schema on ``records`` (restricted to ``config.blocks``) and grow the trees."""
    config = config or TabularConfig()
    schema = fit_schema(records, config.chart_ranges, config.med_min_frequency).restrict(config.blocks)
    X = vectorize_many(records, schema)
    Y = np.array([r.labels for r in records], dtype=np.uint8).reshape(len(records), -1)
    model = fit_trees(X, Y, codes, schema, config)
    logger.info("tabular model: %d features %s, tree depths %s", schema.width, config.blocks,
                [tree_depth(t) for t in model.trees])
    return model


def predict_tabular(model: TreeEnsembleModel, vector) -> np.ndarray:
    """Per-code probabilities for one binary feature vector."""
    v = np.asarray(vector)
    if v.ndim != 1:
        raise ValueError("predict_tabular takes a single feature vector")
    return model.predict_proba(v[None, :])[0]
