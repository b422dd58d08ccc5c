"""Multi-label Text-CNN over clinical notes, trained with label smoothing.

When a guideline term list is supplied the network becomes the
Text-TF-IDF-CNN variant: the note's TF-IDF vector over those terms is
concatenated to the max-pooled convolution features just before the
fully-connected output layer.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from medcoder.checkpoint import load_checkpoint, save_checkpoint
from medcoder.errors import DataError
from medcoder.metrics import f1_scores
from medcoder.text import PAD_ID, TfidfModel, Vocabulary, build_vocabulary, tokenize

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


@dataclass
class TextModelConfig:
    embedding_dim: int = 256
    kernel_widths: tuple[int, ...] = (2, 3, 4)
    feature_maps: int = 128
    dropout: float = 0.1
    l2: float = 1e-4
    learning_rate: float = 1e-3
    batch_size: int = 32
    smoothing_alpha: float = 0.3
    tfidf_side_channel: bool = True
    epochs: int = 10
    seed: int = 0
    min_frequency: int = 10
    max_tokens: int = 2500
    guideline_top_k: int = 10
    fixed_epsilon: float | None = None

    def __post_init__(self):
        self.kernel_widths = tuple(int(k) for k in self.kernel_widths)
        for name in ("dropout", "l2", "learning_rate"):
            value = getattr(self, name)
            if not 0.0 <= value < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {value}")
        if self.smoothing_alpha < 0:
            raise ValueError("smoothing_alpha must be >= 0 (0 disables smoothing)")
        if min(self.embedding_dim, self.feature_maps, self.batch_size, self.epochs, self.max_tokens) <= 0:
            raise ValueError("dimensions, batch size, epochs and max_tokens must be positive")
        if not self.kernel_widths or min(self.kernel_widths) <= 0:
            raise ValueError("kernel widths must be positive")
        if self.fixed_epsilon is not None and not 0.0 <= self.fixed_epsilon <= 1.0:
            raise ValueError("fixed_epsilon must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "TextModelConfig":
        return cls(**d)


def smooth_labels(labels, epsilon: float, C: int) -> np.ndarray:
    """Blend hard labels with the uniform prior: ``(1 - eps) * I + eps / C``."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must lie in [0, 1], got {epsilon}")
    if C < 1:
        raise ValueError("C must be at least 1")
    I = np.asarray(labels, dtype=np.float64)
    if not np.isin(I, (0.0, 1.0)).all():
        raise ValueError("labels must be 0/1")
    return (1.0 - epsilon) * I + epsilon / C


def sample_epsilon(alpha: float, rng: np.random.Generator) -> float:
    if alpha <= 0:
        raise ValueError(f"Beta parameter must be positive, got {alpha}")
    return float(rng.beta(alpha, alpha))


def ce_loss(probabilities, targets):
    """Mean binary cross-entropy over all N x C entries.

    Accepts numpy arrays (returns a float) or torch tensors (returns a
    differentiable scalar tensor). Probabilities are clamped to
    ``[1e-7, 1 - 1e-7]`` before taking logs.
    """
    as_float = not torch.is_tensor(probabilities)
    P = torch.as_tensor(probabilities, dtype=torch.float64) if as_float else probabilities
    T = torch.as_tensor(targets, dtype=P.dtype, device=P.device)
    if P.shape != T.shape:
        raise ValueError(f"shape mismatch: probabilities {tuple(P.shape)} vs targets {tuple(T.shape)}")
    P = P.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    loss = -(T * torch.log(P) + (1.0 - T) * torch.log(1.0 - P)).mean()
    return float(loss) if as_float else loss


def masked_max_pool(conv_out: torch.Tensor, lengths: torch.Tensor, width: int):
    """Max over valid window starts of ``conv_out`` (B, F, S).

    A window is valid when it lies inside the real tokens; inputs shorter
    than ``width`` keep only the first window. Returns ``(values, argmax)``.
    """
    S = conv_out.shape[-1]
    n_valid = torch.clamp(lengths - width + 1, min=1)
    mask = torch.arange(S, device=conv_out.device)[None, :] >= n_valid[:, None]
    masked = conv_out.masked_fill(mask[:, None, :], float("-inf"))
    return masked.max(dim=-1)


class TextCNN(nn.Module):
    def __init__(self, vocab_size: int, n_codes: int, config: TextModelConfig, n_tfidf: int = 0):
        super().__init__()
        self.config = config
        self.n_tfidf = n_tfidf
        self.embedding = nn.Embedding(vocab_size, config.embedding_dim, padding_idx=PAD_ID)
        self.convs = nn.ModuleList(
            nn.Conv1d(config.embedding_dim, config.feature_maps, k) for k in config.kernel_widths
        )
        self.dropout = nn.Dropout(config.dropout)
        self.fc = nn.Linear(config.feature_maps * len(config.kernel_widths) + n_tfidf, n_codes)

    @property
    def max_width(self) -> int:
        return max(self.config.kernel_widths)

    def pooled_features(self, embedded: torch.Tensor, lengths: torch.Tensor):
        """Per-filter ReLU(max over valid windows); also returns argmax positions per width."""
        x = embedded.transpose(1, 2)
        feats, argmaxes = [], []
        for conv, k in zip(self.convs, self.config.kernel_widths):
            values, idx = masked_max_pool(conv(x), lengths, k)
            feats.append(torch.relu(values))
            argmaxes.append(idx)
        return torch.cat(feats, dim=1), argmaxes

    def logits_from_embedded(self, embedded, lengths, tfidf=None):
        feats, _ = self.pooled_features(embedded, lengths)
        if self.n_tfidf:
            if tfidf is None or tfidf.shape[-1] != self.n_tfidf:
                raise ValueError(f"model expects a TF-IDF block of width {self.n_tfidf}")
            feats = torch.cat([feats, tfidf.to(feats.dtype)], dim=1)
        elif tfidf is not None:
            raise ValueError("model has no TF-IDF side channel")
        return self.fc(self.dropout(feats))

    def forward(self, ids: torch.Tensor, lengths: torch.Tensor, tfidf: torch.Tensor | None = None):
        """Return logits (B, C). Sigmoid of each is the code probability."""
        if ids.shape[1] < self.max_width:
            ids = nn.functional.pad(ids, (0, self.max_width - ids.shape[1]), value=PAD_ID)
        return self.logits_from_embedded(self.embedding(ids), lengths, tfidf)


def pad_batch(sequences: Sequence[Sequence[int]], min_len: int = 1):
    lengths = [len(s) for s in sequences]
    if min(lengths, default=0) < 1:
        raise ValueError("documents must contain at least one token")
    T = max(max(lengths), min_len)
    ids = np.full((len(sequences), T), PAD_ID, dtype=np.int64)
    for i, s in enumerate(sequences):
        ids[i, :len(s)] = s
    return torch.from_numpy(ids), torch.tensor(lengths, dtype=torch.long)


@dataclass
class TextModel:
    """A trained network plus everything needed to featurize raw notes."""

    config: TextModelConfig
    codes: list[str]
    vocab: Vocabulary
    net: TextCNN
    tfidf: TfidfModel | None = None
    trained: bool = False

    @property
    def C(self) -> int:
        return len(self.codes)

    def encode(self, texts: Sequence[str]) -> list[list[int]]:
        docs = []
        for t in texts:
            ids = list(tokenize(t, self.vocab, self.config.max_tokens).token_ids)
            docs.append(ids or [PAD_ID])
        return docs

    def tfidf_features(self, texts: Sequence[str]) -> np.ndarray | None:
        return None if self.tfidf is None else self.tfidf.transform(texts)

    def predict_proba(self, texts: Sequence[str], batch_size: int = 64) -> np.ndarray:
        docs = self.encode(texts)
        side = self.tfidf_features(texts)
        out = []
        self.net.eval()
        dtype = next(self.net.parameters()).dtype
        with torch.no_grad():
            for start in range(0, len(docs), batch_size):
                ids, lengths = pad_batch(docs[start:start + batch_size], self.net.max_width)
                tf = None if side is None else torch.as_tensor(side[start:start + batch_size], dtype=dtype)
                out.append(torch.sigmoid(self.net(ids, lengths, tf)).double().numpy())
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.C))

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        meta = {
            "schema_version": 1,
            "kind": "text_cnn",
            "config": asdict(self.config),
            "codes": self.codes,
            "vocab_size": len(self.vocab),
            "tfidf": None if self.tfidf is None else self.tfidf.to_dict(),
        }
        tensors = {k: v.detach().cpu().numpy() for k, v in self.net.state_dict().items()}
        save_checkpoint(directory / "text_model.ckpt", meta, tensors)
        self.vocab.save(directory / "vocab.json")

    @classmethod
    def load(cls, directory: str | Path) -> "TextModel":
        directory = Path(directory)
        meta, tensors = load_checkpoint(directory / "text_model.ckpt")
        config = TextModelConfig.from_dict(meta["config"])
        vocab = Vocabulary.load(directory / "vocab.json")
        tfidf = None if meta["tfidf"] is None else TfidfModel.from_dict(meta["tfidf"])
        net = TextCNN(meta["vocab_size"], len(meta["codes"]), config, 0 if tfidf is None else len(tfidf.terms))
        net.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
        net.eval()
        return cls(config, list(meta["codes"]), vocab, net, tfidf, trained=True)


def forward(model: TextModel, token_ids: Sequence[int], tfidf_vector=None) -> np.ndarray:
    """Probability vector for one tokenized document."""
    if len(token_ids) < 1:
        raise ValueError("document must contain at least one token")
    ids, lengths = pad_batch([list(token_ids)], model.net.max_width)
    dtype = next(model.net.parameters()).dtype
    tf = None if tfidf_vector is None else torch.as_tensor(np.asarray(tfidf_vector)[None, :], dtype=dtype)
    model.net.eval()
    with torch.no_grad():
        return torch.sigmoid(model.net(ids, lengths, tf))[0].double().numpy()


def l2_penalty(net: TextCNN) -> torch.Tensor:
    return sum((conv.weight ** 2).sum() for conv in net.convs) + (net.fc.weight ** 2).sum()


def train_text_model(config: TextModelConfig, codes: Sequence[str], train_texts: Sequence[str], train_labels,
                     val_texts: Sequence[str] | None = None, val_labels=None,
                     terms: Sequence[str] | None = None, vocab: Vocabulary | None = None):
    """Train a Text-CNN and return ``(model, log)``.

    The vocabulary and TF-IDF statistics are fitted on ``train_texts`` only.
    Epsilon is redrawn from Beta(alpha, alpha) for every mini-batch. The
    epoch with the best validation micro-F1 at threshold 0.5 is kept (ties
    go to the lower validation loss).
    """
    if len(train_texts) == 0:
        raise ValueError("training set is empty")
    Y = np.asarray(train_labels, dtype=np.float64)
    C = len(codes)
    if Y.shape != (len(train_texts), C):
        raise ValueError(f"label matrix {Y.shape} does not match {len(train_texts)} texts x {C} codes")

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)

    vocab = vocab or build_vocabulary(train_texts, config.min_frequency)
    tfidf = None
    if config.tfidf_side_channel and terms:
        tfidf = TfidfModel(terms).fit(train_texts)
    net = TextCNN(len(vocab), C, config, 0 if tfidf is None else len(tfidf.terms))
    model = TextModel(config, list(codes), vocab, net, tfidf)

    docs = model.encode(train_texts)
    side = model.tfidf_features(train_texts)
    has_val = val_texts is not None and len(val_texts) > 0
    optimizer = torch.optim.Adam(net.parameters(), lr=config.learning_rate)

    log = []
    best_key, best_state = None, None
    for epoch in range(1, config.epochs + 1):
        net.train()
        order = rng.permutation(len(docs))
        total, total_ce, eps_used = 0.0, 0.0, []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            ids, lengths = pad_batch([docs[i] for i in idx], net.max_width)
            tf = None if side is None else torch.as_tensor(side[idx], dtype=torch.float32)
            if config.fixed_epsilon is not None:
                eps = config.fixed_epsilon
            elif config.smoothing_alpha > 0:
                eps = sample_epsilon(config.smoothing_alpha, rng)
            else:
                eps = 0.0
            eps_used.append(eps)
            target = torch.as_tensor(smooth_labels(Y[idx], eps, C), dtype=torch.float32)
            probs = torch.sigmoid(net(ids, lengths, tf))
            ce = ce_loss(probs, target)
            loss = ce + config.l2 * l2_penalty(net)
            if not torch.isfinite(loss):
                raise DataError(f"non-finite training loss at epoch {epoch} (ce={float(ce)}, eps={eps})")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item() * len(idx)
            total_ce += ce.item() * len(idx)
        entry = {
            "epoch": epoch,
            "train_loss": total / len(docs),
            "train_ce": total_ce / len(docs),
            "epsilon_mean": float(np.mean(eps_used)),
        }
        if has_val:
            P = model.predict_proba(val_texts)
            Yv = np.asarray(val_labels)
            macro, micro, _ = f1_scores(P >= 0.5, Yv)
            entry.update(val_loss=ce_loss(P, Yv), val_micro_f1=micro, val_macro_f1=macro)
            key = (micro, -entry["val_loss"])
        else:
            key = (epoch, 0.0)
        log.append(entry)
        logger.info("text epoch %d %s", epoch, json.dumps(entry, sort_keys=True))
        if best_key is None or key > best_key:
            best_key, best_state = key, copy.deepcopy(net.state_dict())
    net.load_state_dict(best_state)
    net.eval()
    model.trained = True
    return model, log


def write_log(log: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for entry in log:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
