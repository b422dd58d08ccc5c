"""Diagnosis-phrase ranking against code descriptions.

Phrases and code descriptions are embedded into one space by a shared
encoder (character CNN + word embedding per token, one bidirectional LSTM
layer, max-pooling over time) trained with a triplet hinge loss. At
inference each diagnosis phrase is compared with every code description;
distances are min-max normalized across codes and turned into scores with
``1 - normalized distance``, then averaged over the admission's phrases.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from medcoder.checkpoint import load_checkpoint, save_checkpoint
from medcoder.kernels import levenshtein_many
from medcoder.text import NUM, raw_tokens
from medcoder.textcnn import masked_max_pool

logger = logging.getLogger(__name__)

PAD_ID, UNK_ID = 0, 1


@dataclass
class RankerConfig:
    char_embedding_dim: int = 50
    char_widths: tuple[int, ...] = (2, 3, 4)
    char_filters: int = 25
    word_embedding_dim: int = 50
    hidden_units: int = 100
    margin: float = 1.0
    ngram_range: tuple[int, int] = (2, 5)
    negatives_per_anchor: int = 5
    epochs: int = 200
    batch_size: int = 32
    learning_rate: float = 1e-3
    max_token_chars: int = 24
    seed: int = 0
    pretrained_embeddings: str | None = None

    def __post_init__(self):
        self.char_widths = tuple(int(k) for k in self.char_widths)
        self.ngram_range = tuple(int(n) for n in self.ngram_range)
        if self.margin <= 0:
            raise ValueError(f"margin must be positive, got {self.margin}")
        if self.ngram_range[0] < 1 or self.ngram_range[0] > self.ngram_range[1]:
            raise ValueError(f"bad n-gram range {self.ngram_range}")
        if self.negatives_per_anchor < 1 or self.epochs < 1 or self.hidden_units < 1:
            raise ValueError("negatives_per_anchor, epochs and hidden_units must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "RankerConfig":
        return cls(**d)


def phrase_key(text: str) -> str:
    return " ".join(raw_tokens(text))


@dataclass
class SynonymCorpus:
    """Per code: description, positive strings, mined negatives, optional held-out strings."""

    descriptions: dict[str, str]
    positives: dict[str, list[str]]
    negatives: dict[str, list[str]] = field(default_factory=dict)
    heldout: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        for code, negs in self.negatives.items():
            pos = {phrase_key(p) for p in self.positives.get(code, [])} | {phrase_key(self.descriptions[code])}
            clash = [n for n in negs if phrase_key(n) in pos]
            if clash:
                raise ValueError(f"{code}: strings both positive and negative: {clash}")

    @property
    def codes(self) -> list[str]:
        return list(self.descriptions)

    def to_dict(self) -> dict:
        return {"schema_version": 1, "codes": {
            c: {"description": self.descriptions[c], "positives": self.positives.get(c, []),
                "negatives": self.negatives.get(c, []), "heldout": self.heldout.get(c, [])}
            for c in self.descriptions}}

    @classmethod
    def from_dict(cls, d: dict) -> "SynonymCorpus":
        codes = d["codes"]
        return cls(
            descriptions={c: v["description"] for c, v in codes.items()},
            positives={c: list(v.get("positives", [])) for c, v in codes.items()},
            negatives={c: list(v.get("negatives", [])) for c, v in codes.items() if v.get("negatives")},
            heldout={c: list(v.get("heldout", [])) for c, v in codes.items() if v.get("heldout")},
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "SynonymCorpus":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    @classmethod
    def bundled(cls) -> "SynonymCorpus":
        """The 5-code fixture shipped with the package (train positives + held-out synonyms)."""
        text = resources.files("medcoder.data").joinpath("synonyms_5code.json").read_text(encoding="utf-8")
        return cls.from_dict(json.loads(text))


def triplet_loss(anchor, positive, negative, margin: float = 1.0):
    """Mean of ``max(d(a, p) - d(a, n) + margin, 0)`` with Euclidean ``d``.

    Rows are triplets. Numpy input returns a float; torch input returns a
    differentiable scalar tensor.
    """
    as_float = not torch.is_tensor(anchor)
    A = torch.as_tensor(anchor, dtype=torch.float64) if as_float else anchor
    Pp = torch.as_tensor(positive, dtype=A.dtype)
    Nn = torch.as_tensor(negative, dtype=A.dtype)
    if A.shape != Pp.shape or A.shape != Nn.shape:
        raise ValueError(f"embedding shapes differ: {tuple(A.shape)}, {tuple(Pp.shape)}, {tuple(Nn.shape)}")
    if A.ndim == 1:
        A, Pp, Nn = A[None], Pp[None], Nn[None]
    d_ap = torch.linalg.vector_norm(A - Pp, dim=-1)
    d_an = torch.linalg.vector_norm(A - Nn, dim=-1)
    loss = torch.clamp(d_ap - d_an + margin, min=0.0).mean()
    return float(loss) if as_float else loss


def candidate_ngrams(texts: Iterable[str], ngram_range=(2, 5)) -> list[str]:
    """Sorted distinct token n-grams (no numbers) drawn from ``texts``."""
    lo, hi = ngram_range
    seen: set[str] = set()
    for text in texts:
        toks = raw_tokens(text)
        for n in range(lo, hi + 1):
            for i in range(len(toks) - n + 1):
                gram = toks[i:i + n]
                if NUM not in gram:
                    seen.add(" ".join(gram))
    return sorted(seen)


def _contains(haystack: list[str], needle: list[str]) -> bool:
    n = len(needle)
    return n > 0 and any(haystack[i:i + n] == needle for i in range(len(haystack) - n + 1))


def mine_negatives(descriptions: dict[str, str], candidates: Sequence[str], k: int = 5,
                   positives: dict[str, Sequence[str]] | None = None) -> dict[str, list[str]]:
    """For each code, the ``k`` candidates closest in edit distance to its description.

    Candidates that contain, or are contained in, the description or one of
    the code's positives are skipped. Ties break lexicographically.
    """
    positives = positives or {}
    cands = sorted({phrase_key(c) for c in candidates if phrase_key(c)})
    if not cands:
        raise ValueError("no candidate strings to mine negatives from")
    out = {}
    for code, desc in descriptions.items():
        anchor = phrase_key(desc)
        blocked = [anchor.split()] + [phrase_key(p).split() for p in positives.get(code, [])]
        blocked = [b for b in blocked if b]
        allowed = [c for c in cands
                   if not any(_contains(c.split(), b) or _contains(b, c.split()) for b in blocked)]
        if not allowed:
            raise ValueError(f"no admissible negative candidates for {code}")
        if k > len(allowed):
            logger.warning("%s: only %d negative candidates for k=%d", code, len(allowed), k)
        dist = levenshtein_many(anchor, allowed)
        order = sorted(range(len(allowed)), key=lambda i: (int(dist[i]), allowed[i]))
        out[code] = [allowed[i] for i in order[:k]]
    return out


def build_synonym_corpus(descriptions: dict[str, str], positives: dict[str, Sequence[str]],
                         config: RankerConfig | None = None, heldout: dict[str, Sequence[str]] | None = None,
                         extra_candidates: Sequence[str] = ()) -> SynonymCorpus:
    """Training corpus whose negatives for a code are mined from the other codes' strings.

    Candidates are those full strings plus their n-grams in ``config.ngram_range``,
    and likewise for ``extra_candidates`` (e.g. note text).
    """
    config = config or RankerConfig()
    own = {c: [descriptions[c]] + list(positives.get(c, [])) for c in descriptions}
    extra = list(extra_candidates)
    negatives = {}
    for code, desc in descriptions.items():
        texts = [t for other, ts in own.items() if other != code for t in ts] + extra
        # full strings are passed raw; mine_negatives keys them exactly once
        candidates = candidate_ngrams(texts, config.ngram_range) + texts
        negatives.update(mine_negatives({code: desc}, candidates, config.negatives_per_anchor,
                                        {code: positives.get(code, [])}))
    return SynonymCorpus(dict(descriptions), {c: list(positives.get(c, [])) for c in descriptions}, negatives,
                         {c: list(v) for c, v in (heldout or {}).items()})


class PhraseEncoder(nn.Module):
    def __init__(self, n_words: int, n_chars: int, config: RankerConfig):
        super().__init__()
        self.config = config
        self.char_emb = nn.Embedding(n_chars, config.char_embedding_dim, padding_idx=PAD_ID)
        self.char_convs = nn.ModuleList(
            nn.Conv1d(config.char_embedding_dim, config.char_filters, k) for k in config.char_widths
        )
        self.word_emb = nn.Embedding(n_words, config.word_embedding_dim, padding_idx=PAD_ID)
        token_dim = config.word_embedding_dim + config.char_filters * len(config.char_widths)
        self.lstm = nn.LSTM(token_dim, config.hidden_units, batch_first=True, bidirectional=True)

    @property
    def output_dim(self) -> int:
        return 2 * self.config.hidden_units

    def char_features(self, chars: torch.Tensor, char_lengths: torch.Tensor) -> torch.Tensor:
        """(N_tokens, L) character ids -> (N_tokens, filters * widths)."""
        x = self.char_emb(chars).transpose(1, 2)
        feats = [torch.relu(masked_max_pool(conv(x), char_lengths, k)[0])
                 for conv, k in zip(self.char_convs, self.config.char_widths)]
        return torch.cat(feats, dim=1)

    def forward(self, words, chars, lengths, char_lengths):
        """words (B, T), chars (B, T, L), lengths (B,), char_lengths (B, T) -> (B, 2H)."""
        B, T, L = chars.shape
        cf = self.char_features(chars.reshape(B * T, L), char_lengths.reshape(B * T).clamp(min=1))
        tokens = torch.cat([self.word_emb(words), cf.reshape(B, T, -1)], dim=-1)
        packed = pack_padded_sequence(tokens, lengths.cpu(), batch_first=True, enforce_sorted=False)
        out, _ = self.lstm(packed)
        out, _ = pad_packed_sequence(out, batch_first=True, total_length=T)
        mask = torch.arange(T)[None, :] >= lengths[:, None]
        return out.masked_fill(mask[:, :, None], float("-inf")).max(dim=1).values


def scores_from_embeddings(phrase_embeddings, code_embeddings) -> np.ndarray:
    """Average over phrases of ``1 - minmax(distance to each code)``.

    A phrase whose distances to all codes are equal contributes 0.5 to
    every code.
    """
    X = np.atleast_2d(np.asarray(phrase_embeddings, dtype=np.float64))
    Cm = np.asarray(code_embeddings, dtype=np.float64)
    if X.shape[0] == 0:
        raise ValueError("need at least one diagnosis phrase")
    D = np.linalg.norm(X[:, None, :] - Cm[None, :, :], axis=-1)
    scores = np.empty_like(D)
    for i, row in enumerate(D):
        lo, hi = row.min(), row.max()
        scores[i] = 0.5 if hi == lo else 1.0 - (row - lo) / (hi - lo)
    return scores.mean(axis=0)


@dataclass
class DiagnosisRanker:
    config: RankerConfig
    codes: list[str]
    descriptions: list[str]
    words: list[str]
    chars: list[str]
    net: PhraseEncoder
    _code_cache: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self._word_index = {w: i for i, w in enumerate(self.words)}
        self._char_index = {c: i for i, c in enumerate(self.chars)}

    def _batch(self, phrases: Sequence[str]):
        toks = [raw_tokens(p) for p in phrases]
        if any(not t for t in toks):
            raise ValueError("phrase is empty after tokenization")
        T = max(len(t) for t in toks)
        maxc = self.config.max_token_chars
        L = max(max(self.config.char_widths), max(min(len(w), maxc) for t in toks for w in t))
        words = np.zeros((len(toks), T), dtype=np.int64)
        chars = np.zeros((len(toks), T, L), dtype=np.int64)
        char_lengths = np.zeros((len(toks), T), dtype=np.int64)
        for i, t in enumerate(toks):
            for j, w in enumerate(t):
                words[i, j] = self._word_index.get(w, UNK_ID)
                w = w[:maxc]
                chars[i, j, :len(w)] = [self._char_index.get(ch, UNK_ID) for ch in w]
                char_lengths[i, j] = len(w)
        return (torch.from_numpy(words), torch.from_numpy(chars),
                torch.tensor([len(t) for t in toks]), torch.from_numpy(char_lengths))

    def embed(self, phrases: Sequence[str]) -> torch.Tensor:
        return self.net(*self._batch(phrases))

    def encode(self, phrases: Sequence[str]) -> np.ndarray:
        self.net.eval()
        with torch.no_grad():
            return self.embed(list(phrases)).double().numpy()

    def code_embeddings(self) -> np.ndarray:
        if self._code_cache is None:
            self._code_cache = self.encode(self.descriptions)
        return self._code_cache

    def char_vector(self, token: str) -> np.ndarray:
        w = token.lower()[: self.config.max_token_chars]
        L = max(len(w), max(self.config.char_widths))
        ids = torch.zeros((1, L), dtype=torch.long)
        ids[0, :len(w)] = torch.tensor([self._char_index.get(ch, UNK_ID) for ch in w])
        self.net.eval()
        with torch.no_grad():
            return self.net.char_features(ids, torch.tensor([max(len(w), 1)]))[0].double().numpy()

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        meta = {"schema_version": 1, "kind": "diagnosis_ranker", "config": asdict(self.config),
                "codes": self.codes, "descriptions": self.descriptions,
                "words": self.words, "chars": self.chars}
        tensors = {k: v.detach().cpu().numpy() for k, v in self.net.state_dict().items()}
        save_checkpoint(directory / "ranker.ckpt", meta, tensors)

    @classmethod
    def load(cls, directory: str | Path) -> "DiagnosisRanker":
        meta, tensors = load_checkpoint(Path(directory) / "ranker.ckpt")
        config = RankerConfig.from_dict(meta["config"])
        net = PhraseEncoder(len(meta["words"]), len(meta["chars"]), config)
        net.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
        net.eval()
        return cls(config, meta["codes"], meta["descriptions"], meta["words"], meta["chars"], net)


def encode(model: DiagnosisRanker, phrase: str) -> np.ndarray:
    return model.encode([phrase])[0]


def rank_codes(model: DiagnosisRanker, diagnosis_phrases: Sequence[str]) -> np.ndarray:
    """Per-code scores in [0, 1] for one admission's diagnosis phrases."""
    phrases = [p for p in diagnosis_phrases if raw_tokens(p)]
    if not phrases:
        raise ValueError("need at least one non-empty diagnosis phrase")
    return scores_from_embeddings(model.encode(phrases), model.code_embeddings())


def top1_accuracy(model: DiagnosisRanker, labelled: dict[str, Sequence[str]]) -> float:
    phrases, truth = [], []
    for code, items in labelled.items():
        for p in items:
            phrases.append(p)
            truth.append(model.codes.index(code))
    if not phrases:
        return 0.0
    D = np.linalg.norm(model.encode(phrases)[:, None, :] - model.code_embeddings()[None], axis=-1)
    return float(np.mean(D.argmin(axis=1) == np.array(truth)))


def _load_pretrained(path: str, words: Sequence[str], dim: int) -> dict[int, np.ndarray]:
    index = {w: i for i, w in enumerate(words)}
    found = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.rstrip().split(" ")
            if len(parts) != dim + 1 or parts[0] not in index:
                continue
            found[index[parts[0]]] = np.asarray(parts[1:], dtype=np.float32)
    logger.info("loaded %d pretrained vectors from %s", len(found), path)
    return found


def train_ranker(config: RankerConfig, corpus: SynonymCorpus, validation: dict[str, Sequence[str]] | None = None):
    """Train the phrase encoder on (description, positive, negative) triplets.

    Each epoch visits every (code, positive) pair once with a uniformly drawn
    negative of that code. The epoch with the best top-1 accuracy on
    ``validation`` (defaults to the training positives) is kept. Returns
    ``(model, log)``.
    """
    codes = corpus.codes
    for code in codes:
        if not corpus.positives.get(code) or not corpus.negatives.get(code):
            raise ValueError(f"{code} needs at least one positive and one negative")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)

    texts = list(corpus.descriptions.values())
    for code in codes:
        texts += corpus.positives[code] + corpus.negatives[code]
    vocab_words = sorted({t for s in texts for t in raw_tokens(s)})
    words = ["<pad>", "<unk>"] + vocab_words
    chars = ["<pad>", "<unk>"] + sorted({ch for w in vocab_words for ch in w[: config.max_token_chars]})
    net = PhraseEncoder(len(words), len(chars), config)
    if config.pretrained_embeddings:
        with torch.no_grad():
            for i, vec in _load_pretrained(config.pretrained_embeddings, words, config.word_embedding_dim).items():
                net.word_emb.weight[i] = torch.from_numpy(vec)
    model = DiagnosisRanker(config, codes, [corpus.descriptions[c] for c in codes], words, chars, net)
    validation = validation or {c: corpus.positives[c] for c in codes}

    pairs = [(c, p) for c in codes for p in corpus.positives[c]]
    optimizer = torch.optim.Adam(net.parameters(), lr=config.learning_rate)
    log, best_key, best_state = [], None, None
    for epoch in range(1, config.epochs + 1):
        net.train()
        model._code_cache = None
        order = rng.permutation(len(pairs))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = [pairs[i] for i in order[start:start + config.batch_size]]
            anchors = [corpus.descriptions[c] for c, _ in batch]
            pos = [p for _, p in batch]
            neg = [corpus.negatives[c][int(rng.integers(0, len(corpus.negatives[c])))] for c, _ in batch]
            emb = model.embed(anchors + pos + neg)
            n = len(batch)
            loss = triplet_loss(emb[:n], emb[n:2 * n], emb[2 * n:], config.margin)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item() * n
        model._code_cache = None
        acc = top1_accuracy(model, validation)
        entry = {"epoch": epoch, "triplet_loss": total / len(pairs), "val_top1": acc}
        log.append(entry)
        key = (acc, -entry["triplet_loss"])
        if best_key is None or key > best_key:
            best_key, best_state = key, copy.deepcopy(net.state_dict())
    net.load_state_dict(best_state)
    net.eval()
    model._code_cache = None
    logger.info("ranker trained: best val top-1 %.3f", best_key[0])
    return model, log
