"""Toy models and brute-force oracles shared by unit and acceptance tests."""

from __future__ import annotations

import itertools
import math

import numpy as np
import torch

from medcoder.text import build_vocabulary
from medcoder.text import PAD_ID
from medcoder.textcnn import TextCNN, TextModel, TextModelConfig, ce_loss, pad_batch


def toy_text_model(vocab_size=20, dim=8, C=3, widths=(2,), maps=4, seed=0, zero_bias=False, n_tfidf=0):
    """A random float64 TextCNN wrapped as a trained TextModel."""
    torch.manual_seed(seed)
    cfg = TextModelConfig(embedding_dim=dim, kernel_widths=widths, feature_maps=maps, dropout=0.0,
                          tfidf_side_channel=n_tfidf > 0, min_frequency=1)
    net = TextCNN(vocab_size, C, cfg, n_tfidf).double()
    with torch.no_grad():
        for p in net.parameters():
            p.copy_(torch.randn_like(p))
        net.embedding.weight[0].zero_()
        if zero_bias:
            for conv in net.convs:
                conv.bias.zero_()
            net.fc.bias.zero_()
    net.eval()
    words = ["tok" + "".join(chr(97 + int(c)) for c in str(i)) for i in range(vocab_size - 3)]
    vocab = build_vocabulary([" ".join(words)], 1)
    return TextModel(cfg, [f"C{j}" for j in range(C)], vocab, net, None, trained=True)


def _window_max(E, W, b, ids, k):
    """(pre-activation max, argmax start) of every filter of one width, by explicit loops."""
    L = len(ids)
    padded = list(ids) + [0] * max(0, k - L)
    n_windows = max(L - k + 1, 1)
    out = []
    for f in range(W.shape[0]):
        best, arg = -math.inf, -1
        for s in range(n_windows):
            v = b[f]
            for o in range(k):
                for d in range(W.shape[1]):
                    v += W[f, d, o] * E[padded[s + o], d]
            if v > best:
                best, arg = v, s
        out.append((best, arg))
    return out


def _layers(net):
    E = net.embedding.weight.detach().numpy()
    return E, [(c.weight.detach().numpy(), c.bias.detach().numpy(), k)
               for c, k in zip(net.convs, net.config.kernel_widths)]


def pooled_oracle(net, ids):
    E, layers = _layers(net)
    return np.array([max(v, 0.0) for W, b, k in layers for v, _ in _window_max(E, W, b, ids, k)])


def path_enumeration_oracle(net, ids, target):
    """Sum over every embedding-entry -> conv edge -> selected filter -> logit path."""
    E, layers = _layers(net)
    fc = net.fc.weight.detach().numpy()
    scores = np.zeros(len(ids))
    filt = 0
    for W, b, k in layers:
        for f, (pre, s) in enumerate(_window_max(E, W, b, ids, k)):
            if pre > 0:
                for o in range(k):
                    t = s + o
                    if t < len(ids):
                        for d in range(W.shape[1]):
                            scores[t] += E[ids[t], d] * W[f, d, o] * fc[target, filt + f]
        filt += W.shape[0]
    return scores


def ce_oracle(P, T, clamp=1e-7):
    total, n = 0.0, 0
    for p_row, t_row in zip(P, T):
        for p, t in zip(p_row, t_row):
            p = min(max(p, clamp), 1 - clamp)
            total += -(t * math.log(p) + (1 - t) * math.log(1 - p))
            n += 1
    return total / n


def triplet_oracle(A, Pp, N, margin):
    total = 0.0
    for a, p, n in zip(A, Pp, N):
        dp = math.sqrt(sum((x - y) ** 2 for x, y in zip(a, p)))
        dn = math.sqrt(sum((x - y) ** 2 for x, y in zip(a, n)))
        total += max(dp - dn + margin, 0.0)
    return total / len(A)


def f1_oracle(D, Y):
    per = []
    TP = FP = FN = 0
    for j in range(len(D[0])):
        tp = fp = fn = 0
        for i in range(len(D)):
            if D[i][j] and Y[i][j]:
                tp += 1
            elif D[i][j]:
                fp += 1
            elif Y[i][j]:
                fn += 1
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        per.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
        TP, FP, FN = TP + tp, FP + fp, FN + fn
    prec = TP / (TP + FP) if TP + FP else 0.0
    rec = TP / (TP + FN) if TP + FN else 0.0
    micro = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return sum(per) / len(per), micro, per


def auc_pairs_oracle(s, y):
    pos = [a for a, b in zip(s, y) if b]
    neg = [a for a, b in zip(s, y) if not b]
    if not pos or not neg:
        return float("nan")
    hits = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return hits / (len(pos) * len(neg))


def fuse_oracle(probs, alphas, available, fallback):
    eff = list(alphas)
    for k, ok in enumerate(available):
        if not ok:
            eff[fallback] += eff[k]
            eff[k] = 0.0
    return [sum(eff[k] * probs[k][j] for k in range(len(probs)) if available[k]) for j in range(len(probs[0]))]


def matching_oracle(a, b, match):
    """Largest one-to-one matching by trying every injection of the smaller side."""
    small, large, swapped = (a, b, False) if len(a) <= len(b) else (b, a, True)
    best = 0
    for perm in itertools.permutations(range(len(large)), len(small)):
        m = sum(1 for i, j in enumerate(perm) if (match(large[j], small[i]) if swapped else match(small[i], large[j])))
        best = max(best, m)
    return best


def jaccard_text_oracle(a, b, ratio, threshold):
    if not a and not b:
        return 1.0
    m = matching_oracle(a, b, lambda x, y: ratio(x, y) >= threshold)
    return m / (len(a) + len(b) - m)


def gini_split_oracle(X, y, w, min_leaf=0.0):
    """Best (feature, gain) by scoring every split with explicit loops."""
    def gini(rows):
        p = sum(w[i] for i in rows if y[i])
        n = sum(w[i] for i in rows if not y[i])
        t = p + n
        return (t, 0.0 if t == 0 else 1 - (p / t) ** 2 - (n / t) ** 2)

    all_rows = list(range(len(y)))
    T, G = gini(all_rows)
    best = (None, -math.inf)
    for j in range(len(X[0])):
        ones = [i for i in all_rows if X[i][j]]
        zeros = [i for i in all_rows if not X[i][j]]
        t1, g1 = gini(ones)
        t0, g0 = gini(zeros)
        if t1 <= 0 or t0 <= 0 or t1 < min_leaf or t0 < min_leaf:
            continue
        gain = T * G - (t1 * g1 + t0 * g0)
        if gain > best[1] + 1e-12:
            best = (j, gain)
    return best


def interpret_serialized_tree(doc_tree, ids, x_by_id):
    """Walk a serialized tree using feature ids only (not integer indices)."""
    k = 0
    while "feature_id" in doc_tree[k]:
        node = doc_tree[k]
        k = node["one"] if x_by_id.get(node["feature_id"], 0) else node["zero"]
    return doc_tree[k]["probability"]


def gradient_check_errors(n_coords=50, h=1e-4, seed=11):
    """(parameter, index, relative error) of autograd vs central differences on the toy model."""
    net = toy_text_model(vocab_size=20, dim=8, C=3, widths=(2,), maps=4, seed=seed).net
    docs = [[3, 7, 12, 5, 19], [4, 4, 8], [10, 15, 6, 17]]
    target = torch.tensor([[1.0, 0.0, 1.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]], dtype=torch.float64)
    ids, lengths = pad_batch(docs, net.max_width)

    def loss():
        return ce_loss(torch.sigmoid(net(ids, lengths)), target)

    net.zero_grad()
    loss().backward()
    params = dict(net.named_parameters())
    rng = np.random.default_rng(0)
    coords = []
    for name, p in params.items():
        for flat in rng.choice(p.numel(), size=min(p.numel(), 20), replace=False):
            idx = np.unravel_index(int(flat), p.shape)
            if not (name == "embedding.weight" and idx[0] == PAD_ID):
                coords.append((name, idx))
    errors = []
    for name, idx in coords[:n_coords]:
        p = params[name]
        analytic = float(p.grad[idx])
        with torch.no_grad():
            orig = float(p[idx])
            p[idx] = orig + h
            up = float(loss())
            p[idx] = orig - h
            down = float(loss())
            p[idx] = orig
        numeric = (up - down) / (2 * h)
        scale = max(abs(analytic), abs(numeric))
        err = abs(analytic - numeric) / scale if scale > 1e-8 else abs(analytic - numeric)
        errors.append((name, idx, err))
    return errors


ACCEPTANCE: list[str] = []


class criterion:
    """Record one acceptance line: PASS when the block finishes, FAIL when it raises."""

    def __init__(self, name: str):
        self.name = name
        self.detail = ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        ACCEPTANCE.append(f"{status}  {self.name}" + (f"  ({self.detail})" if self.detail else ""))
        return False
