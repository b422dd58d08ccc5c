"""Tokenization, vocabulary and TF-IDF features for clinical notes.

Normalization is deliberately simple: lowercase, split on anything that is
not a letter or digit, and collapse each run of digits to ``NUM``.
"""

from __future__ import annotations

import json
import logging
import math
import re
from collections import Counter
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

PAD, UNK, NUM = "<pad>", "<unk>", "NUM"
PAD_ID, UNK_ID, NUM_ID = 0, 1, 2
VOCAB_VERSION = 1

_TOKEN_RE = re.compile(r"[^\W\d_]+|\d+")

STOPWORDS = frozenset("""
a about above after again against all also am an and any are as at be because been before being
below between both but by can could did do does doing down during each few for from further had
has have having he her here hers him his how i if in into is it its itself just may more most
must no nor not now of off on once only or other our out over own same she should so some such
than that the their them then there these they this those through to too under until up upon
very was we were what when where which while who whom why will with within without would you
your often usually when each elsewhere least two five
""".split())


def normalize(surface: str) -> str:
    return NUM if surface.isdigit() else surface.lower()


def raw_tokens(text: str) -> list[str]:
    return [normalize(m.group()) for m in _TOKEN_RE.finditer(text)]


def token_spans(text: str) -> list[tuple[str, int, int]]:
    return [(normalize(m.group()), m.start(), m.end()) for m in _TOKEN_RE.finditer(text)]


@dataclass(frozen=True)
class TokenizedDocument:
    tokens: tuple[str, ...]
    token_ids: tuple[int, ...]
    spans: tuple[tuple[int, int], ...]

    def __len__(self) -> int:
        return len(self.token_ids)

    def detokenize(self) -> str:
        return " ".join(self.tokens)


class Vocabulary:
    """Token to id mapping with reserved PAD, UNK and NUM ids.

    Tokens are ordered by descending training frequency, then alphabetically,
    so two builds on the same corpus give identical ids.
    """

    def __init__(self, tokens: Sequence[str], frequencies: Sequence[int], min_frequency: int):
        self.itos = [PAD, UNK, NUM] + list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        self.frequencies = [0, 0, 0] + list(frequencies)
        self.min_frequency = min_frequency

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def lookup(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    def to_dict(self) -> dict:
        return {
            "schema_version": VOCAB_VERSION,
            "min_frequency": self.min_frequency,
            "tokens": [{"token": t, "id": i, "frequency": f}
                       for i, (t, f) in enumerate(zip(self.itos, self.frequencies))],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        if d.get("schema_version") != VOCAB_VERSION:
            raise ValueError(f"unsupported vocabulary version {d.get('schema_version')}")
        entries = sorted(d["tokens"], key=lambda e: e["id"])
        return cls([e["token"] for e in entries[3:]], [e["frequency"] for e in entries[3:]], d["min_frequency"])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def build_vocabulary(documents: Iterable[str], min_frequency: int = 10) -> Vocabulary:
    counts: Counter[str] = Counter()
    n_docs = 0
    for doc in documents:
        counts.update(raw_tokens(doc))
        n_docs += 1
    if n_docs == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    counts.pop(NUM, None)
    kept = sorted((t for t, c in counts.items() if c >= min_frequency), key=lambda t: (-counts[t], t))
    return Vocabulary(kept, [counts[t] for t in kept], min_frequency)


def tokenize(text: str, vocab: Vocabulary, max_tokens: int | None = None) -> TokenizedDocument:
    items = token_spans(text)
    if max_tokens is not None:
        items = items[:max_tokens]
    return TokenizedDocument(
        tokens=tuple(t for t, _, _ in items),
        token_ids=tuple(vocab.lookup(t) for t, _, _ in items),
        spans=tuple((s, e) for _, s, e in items),
    )


def combine_notes(notes: Sequence[str]) -> str:
    """Join an admission's notes in file (chronological) order."""
    return "\n\n".join(notes)


def _ngram_counts(tokens: Sequence[str], max_n: int) -> Counter:
    counts: Counter[str] = Counter()
    for n in range(1, max_n + 1):
        for i in range(len(tokens) - n + 1):
            counts[" ".join(tokens[i:i + n])] += 1
    return counts


class TfidfModel:
    """TF-IDF over a fixed term list with idf ``log((1 + N) / (1 + df)) + 1``.

    Terms may be multi-word; a term's frequency is the number of times its
    token sequence occurs. Output rows are L2-normalized unless all-zero.
    """

    def __init__(self, terms: Sequence[str]):
        terms = list(dict.fromkeys(terms))
        if not terms:
            raise ValueError("term list is empty")
        self.terms = terms
        self.max_n = max(len(t.split()) for t in terms)
        self.idf: np.ndarray | None = None

    def _tf(self, documents: Iterable[str]) -> np.ndarray:
        rows = []
        for doc in documents:
            counts = _ngram_counts(raw_tokens(doc), self.max_n)
            rows.append([counts.get(t, 0) for t in self.terms])
        return np.asarray(rows, dtype=np.float64).reshape(-1, len(self.terms))

    def fit(self, documents: Sequence[str]) -> "TfidfModel":
        tf = self._tf(documents)
        df = (tf > 0).sum(axis=0)
        self.idf = np.log((1.0 + len(tf)) / (1.0 + df)) + 1.0
        return self

    def transform(self, documents: Sequence[str], normalize: bool = True) -> np.ndarray:
        if self.idf is None:
            raise RuntimeError("TfidfModel.transform called before fit")
        weights = self._tf(documents) * self.idf
        if normalize:
            norms = np.linalg.norm(weights, axis=1, keepdims=True)
            weights = np.divide(weights, norms, out=np.zeros_like(weights), where=norms > 0)
        return weights

    def to_dict(self) -> dict:
        return {"terms": self.terms, "idf": None if self.idf is None else self.idf.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "TfidfModel":
        model = cls(d["terms"])
        model.idf = None if d["idf"] is None else np.asarray(d["idf"], dtype=np.float64)
        return model


def compute_tfidf(documents: Sequence[str], terms: Sequence[str], normalize: bool = True) -> np.ndarray:
    """Fit idf on ``documents`` and return their TF-IDF matrix (documents x terms)."""
    return TfidfModel(terms).fit(documents).transform(documents, normalize=normalize)


def load_guidelines(code_ids: Sequence[str], directory: str | Path | None = None) -> dict[str, str]:
    """Read ``<code>.txt`` guideline texts; lines starting with ``#`` are dropped."""
    if directory is None:
        base = resources.files("medcoder.data").joinpath("guidelines")
    else:
        base = Path(directory)
    texts = {}
    for code in code_ids:
        entry = base.joinpath(f"{code}.txt")
        if not entry.is_file():
            logger.warning("no guideline text for %s; it contributes no keywords", code)
            continue
        lines = entry.read_text(encoding="utf-8").splitlines()
        texts[code] = "\n".join(line for line in lines if not line.lstrip().startswith("#"))
    return texts


def extract_guideline_keywords(guidelines: dict[str, str], top_k: int = 10, max_n: int = 2,
                               code_order: Sequence[str] | None = None) -> list[str]:
    """Top-``top_k`` TF-IDF terms of each code's guideline, unioned in code order.

    Candidate terms are 1..``max_n``-grams without stopwords or numbers.
    """
    if top_k <= 0 or not guidelines:
        return []
    order = [c for c in (code_order or guidelines) if c in guidelines]
    docs = [raw_tokens(guidelines[c]) for c in order]
    counts = [_ngram_counts(toks, max_n) for toks in docs]
    candidates = sorted({
        g for c in counts for g in c
        if not any(tok in STOPWORDS or tok == NUM or len(tok) < 2 for tok in g.split())
    })
    if not candidates:
        return []
    keep = set(candidates)
    df = Counter(g for c in counts for g in c if g in keep)
    n = len(docs)
    terms: list[str] = []
    for c in counts:
        scored = [(c[g] * (math.log((1 + n) / (1 + df[g])) + 1.0), g) for g in c if g in df]
        scored.sort(key=lambda x: (-x[0], x[1]))
        for _, g in scored[:top_k]:
            if g not in terms:
                terms.append(g)
    return terms


def save_terms(terms: Sequence[str], path: str | Path) -> None:
    Path(path).write_text("".join(t + "\n" for t in terms), encoding="utf-8")


def load_terms(path: str | Path) -> list[str]:
    return [line.strip() for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
