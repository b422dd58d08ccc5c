from __future__ import annotations

import json
import logging

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from medcoder.explain import (
    SurrogateConfig,
    assemble_phrases,
    evidence_entry,
    explain_tabular,
    explain_text,
    jaccard,
    jaccard_ids,
    jaccard_text,
    kernel_weights,
    overlap_ratio,
    score_annotations,
    weighted_ridge,
    word_influence,
    write_report,
)
from medcoder.tabular import FeatureSchema
from medcoder.textcnn import TextModel, forward, pad_batch

from helpers import jaccard_text_oracle, path_enumeration_oracle, toy_text_model


def _logit(model, ids, j):
    t, lengths = pad_batch([ids], model.net.max_width)
    with torch.no_grad():
        return float(model.net(t, lengths)[0, j])


# ---- path influence ------------------------------------------------------

def test_toy_model_matches_path_enumeration():
    model = toy_text_model(vocab_size=8, dim=3, C=2, widths=(2,), maps=2, seed=0)
    rng = np.random.default_rng(0)
    for _ in range(20):
        ids = rng.integers(3, 8, size=4).tolist()
        for j in range(2):
            assert np.allclose(word_influence(model, ids, j), path_enumeration_oracle(model.net, ids, j), atol=1e-6)


@pytest.mark.parametrize("widths", [(2,), (2, 3), (1, 2, 4)])
def test_conservation_with_zero_bias(widths):
    model = toy_text_model(vocab_size=20, dim=6, C=3, widths=widths, maps=5, seed=1, zero_bias=True)
    rng = np.random.default_rng(1)
    for length in (1, 3, 9):
        ids = rng.integers(3, 20, size=length).tolist()
        for j in range(3):
            assert word_influence(model, ids, j).sum() == pytest.approx(_logit(model, ids, j), abs=1e-6)


def test_linear_exactness():
    # width-1 kernel, one token: the single path per embedding entry is input x weights
    model = toy_text_model(vocab_size=10, dim=4, C=2, widths=(1,), maps=3, seed=2)
    E = model.net.embedding.weight.detach().numpy()
    W = model.net.convs[0].weight.detach().numpy()[:, :, 0]
    b = model.net.convs[0].bias.detach().numpy()
    fc = model.net.fc.weight.detach().numpy()
    for tok in range(3, 10):
        active = (W @ E[tok] + b) > 0
        for j in range(2):
            expected = sum(E[tok, d] * W[f, d] * fc[j, f] for f in range(3) if active[f] for d in range(4))
            assert word_influence(model, [tok], j)[0] == pytest.approx(expected, abs=1e-9)


def test_unselected_word_scores_zero():
    model = toy_text_model(vocab_size=20, dim=4, C=1, widths=(2,), maps=1, seed=3)
    ids = list(range(3, 15))
    scores = word_influence(model, ids, 0)
    oracle = path_enumeration_oracle(model.net, ids, 0)
    silent = np.flatnonzero(oracle == 0)
    assert len(silent) >= len(ids) - 2
    assert np.all(scores[silent] == 0.0)


def test_untrained_model_rejected():
    model = toy_text_model()
    untrained = TextModel(model.config, model.codes, model.vocab, model.net, None, trained=False)
    with pytest.raises(ValueError):
        word_influence(untrained, [3, 4], 0)


def test_target_by_code_id_and_range():
    model = toy_text_model(C=3)
    assert np.array_equal(word_influence(model, [3, 4, 5], "C1"), word_influence(model, [3, 4, 5], 1))
    with pytest.raises(ValueError):
        word_influence(model, [3, 4], 7)


def test_tfidf_channel_has_no_word_paths():
    model = toy_text_model(vocab_size=20, dim=4, C=2, widths=(2,), maps=3, seed=4, zero_bias=True, n_tfidf=2)
    ids = [3, 9, 12, 5]
    tf = np.array([0.6, 0.8])
    scores = word_influence(model, ids, 1, tfidf_vector=tf)
    side = float(model.net.fc.weight[1, -2:].detach().numpy() @ tf)
    t, lengths = pad_batch([ids], 2)
    with torch.no_grad():
        logit = float(model.net(t, lengths, torch.as_tensor(tf[None]))[0, 1])
    assert scores.sum() == pytest.approx(logit - side, abs=1e-6)
    with pytest.raises(ValueError):
        word_influence(model, ids, 1)


def test_explain_text_returns_spans():
    model = toy_text_model(vocab_size=20, dim=4, C=2, widths=(2,), maps=4, seed=6)
    text = "toka, tokb tokc! tokd tokbe tokf"
    phrases = explain_text(model, text, 0, top_k=3, relative_floor=0.0)
    assert 1 <= len(phrases) <= 3
    for p in phrases:
        assert text[p.start:p.end] == p.text
    assert [p.rank for p in phrases] == list(range(1, len(phrases) + 1))
    assert explain_text(model, "", 0) == []


# ---- phrases -------------------------------------------------------------

def test_phrase_example():
    spans = [(i * 2, i * 2 + 1) for i in range(5)]
    out = assemble_phrases([0, 3, 2, 0, 5], spans, "a b c d e", top_k=None)
    assert [(p.text, p.score, p.rank) for p in out] == [("e", 5.0, 1), ("b c", 3.0, 2)]
    assert assemble_phrases([0, 3, 2, 0, 5], spans, "a b c d e", top_k=1)[0].text == "e"


def test_phrase_all_zero_and_saturation():
    spans = [(0, 1), (2, 3)]
    assert assemble_phrases([0, 0], spans) == []
    assert len(assemble_phrases([1, 0], spans, top_k=10)) == 1


def test_phrase_ties_keep_earlier():
    spans = [(i, i + 1) for i in range(5)]
    out = assemble_phrases([2, 0, 2, 0, 2], spans, top_k=None)
    assert [p.start for p in out] == [0, 2, 4]


def test_phrase_rejects_misaligned():
    with pytest.raises(ValueError):
        assemble_phrases([1, 2], [(0, 1)])


@given(st.lists(st.sampled_from([0.0, 0.0, 1.0, -2.0, 3.5]), max_size=30))
@settings(max_examples=200)
def test_phrase_maximality(scores):
    spans = [(2 * i, 2 * i + 1) for i in range(len(scores))]
    out = sorted(assemble_phrases(scores, spans, top_k=None), key=lambda p: p.start)
    assert len(out) == sum(1 for i, s in enumerate(scores) if s != 0 and (i == 0 or scores[i - 1] == 0))
    for a, b in zip(out, out[1:]):
        assert b.start - a.end > 1  # a zero-score word lies between
    ranked = sorted(out, key=lambda p: p.rank)
    assert all(x.score >= y.score for x, y in zip(ranked, ranked[1:]))


# ---- tabular surrogate ---------------------------------------------------

def test_surrogate_recovers_linear_ranking():
    w = np.array([0.05, -0.4, 0.0, 0.25, 0.6, -0.1, 0.3, 0.0, 0.15])
    x = np.array([1, 1, 0, 1, 1, 1, 0, 1, 1], dtype=np.uint8)
    ids = [f"lab:t{k}" for k in range(9)]
    out = explain_tabular(lambda X: X @ w, x, ids, SurrogateConfig(samples=1000, seed=0, top_k=20))
    active = np.flatnonzero(x)
    expected = sorted(active, key=lambda k: (-abs(w[k]), k))
    assert [f.feature_id for f in out] == [ids[k] for k in expected]
    assert all(f.table == "LAB" for f in out)


def test_surrogate_constant_model():
    x = np.ones(6, dtype=np.uint8)
    out = explain_tabular(lambda X: np.full(len(X), 0.37), x, [f"med:d{k}" for k in range(6)],
                          SurrogateConfig(seed=1))
    assert all(abs(f.weight) <= 1e-6 for f in out)


def test_surrogate_zero_active(caplog):
    with caplog.at_level(logging.WARNING, logger="medcoder.explain"):
        assert explain_tabular(lambda X: X.sum(1), np.zeros(4), ["lab:a", "lab:b", "lab:c", "lab:d"]) == []
    assert "no active features" in caplog.text


def test_surrogate_is_seeded():
    rng = np.random.default_rng(0)
    w = rng.normal(size=8)
    x = np.ones(8, dtype=np.uint8)
    schema = FeatureSchema(lab=("a", "b"), chart=("bmi",), med=("m1", "m2", "m3"), bio=("o1", "o2"))

    def f(X):
        return 1 / (1 + np.exp(-(X @ w)))

    a = explain_tabular(f, x, schema, SurrogateConfig(seed=3))
    assert a == explain_tabular(f, x, schema, SurrogateConfig(seed=3))
    assert {e.table for e in a} <= {"LAB", "CHART", "MED", "BIO"}


@given(st.floats(0.01, 5.0), st.integers(1, 40))
def test_kernel_locality(sigma, width):
    d = np.arange(width + 1)
    for s in (sigma, sigma / 10):
        k = kernel_weights(d, width, s)
        assert np.all(np.diff(k) <= 0) and k[0] == 1.0


def test_weighted_ridge_matches_normal_equations(rng):
    Z = rng.integers(0, 2, size=(50, 4)).astype(float)
    y = rng.normal(size=50)
    w = rng.uniform(0.1, 1.0, size=50)
    coef, b = weighted_ridge(Z, y, w, 1.0)
    A = np.hstack([np.ones((50, 1)), Z])
    reg = np.diag([0.0, 1, 1, 1, 1])
    full = np.linalg.solve(A.T @ (A * w[:, None]) + reg, A.T @ (w * y))
    assert np.allclose(np.r_[b, coef], full, atol=1e-10)


@pytest.mark.parametrize("kw", [{"samples": 5}, {"sigma": 0.0}, {"ridge": -1.0}])
def test_surrogate_config_validation(kw):
    with pytest.raises(ValueError):
        SurrogateConfig(**kw)


# ---- jaccard -------------------------------------------------------------

def test_jaccard_examples():
    assert jaccard({"a", "b", "c"}, {"b", "c", "d"}) == 0.5
    assert jaccard({"a", "b"}, {"a", "b"}) == 1.0
    assert jaccard([], []) == 1.0
    assert jaccard_text([], []) == 1.0
    assert jaccard(["chest pain", "fever"], ["severe chest pain"], threshold=0.5) == pytest.approx(0.5)


def test_overlap_ratio():
    assert overlap_ratio("acute kidney injury", "kidney injury") == 1.0
    assert overlap_ratio("acute kidney", "renal failure") == 0.0
    assert overlap_ratio("", "x") == 0.0


def test_jaccard_text_threshold_validation():
    with pytest.raises(ValueError):
        jaccard_text(["a"], ["a"], threshold=0.0)


def test_matching_beats_greedy_order():
    # greedy in input order would pair "a b" with "a b c" and strand "a x"
    A = ["a b", "b c"]
    B = ["a b c", "a x"]
    assert jaccard_text(A, B, 0.5) == 1.0 == jaccard_text_oracle(A, B, overlap_ratio, 0.5)


snippet = st.lists(st.sampled_from("abcdef"), min_size=1, max_size=3).map(" ".join)


@given(st.lists(snippet, max_size=4), st.lists(snippet, max_size=4), st.sampled_from([0.3, 0.5, 1.0]))
@settings(max_examples=150, deadline=None)
def test_jaccard_text_matches_exhaustive_oracle(a, b, threshold):
    value = jaccard_text(a, b, threshold)
    assert value == pytest.approx(jaccard_text_oracle(a, b, overlap_ratio, threshold), abs=1e-12)
    assert 0.0 <= value <= 1.0
    assert value == jaccard_text(b, a, threshold)


@given(st.sets(st.sampled_from("abcdefgh")), st.sets(st.sampled_from("abcdefgh")))
def test_jaccard_ids_symmetric_and_bounded(a, b):
    assert jaccard_ids(a, b) == jaccard_ids(b, a)
    assert 0.0 <= jaccard_ids(a, b) <= 1.0


# ---- reporting -----------------------------------------------------------

def test_report_and_annotation_scoring(tmp_path):
    from medcoder.explain import FeatureEvidence, PhraseEvidence

    entry = evidence_entry("adm1", "I10", 0.91, [PhraseEvidence("essential hypertension", 10, 32, 2.5, 1)],
                           [FeatureEvidence("lab:k", "LAB", 0.3, 1), FeatureEvidence("med:x", "MED", -0.1, 2)])
    write_report([entry], tmp_path / "ev.json")
    doc = json.loads((tmp_path / "ev.json").read_text())
    assert doc["schema_version"] == 1
    assert doc["evidence"][0]["features"]["LAB"][0]["feature_id"] == "lab:k"
    annotations = [{"admission_id": "adm1", "code_id": "I10", "text_snippets": ["hypertension essential"],
                    "feature_ids": ["lab:k"]},
                   {"admission_id": "adm2", "code_id": "I10", "text_snippets": ["x"], "feature_ids": []}]
    scores = score_annotations(doc["evidence"], annotations)
    assert scores["n"] == 2
    assert scores["text_jaccard"] == pytest.approx((1.0 + 0.0) / 2)
    assert scores["tabular_jaccard"] == pytest.approx((0.5 + 1.0) / 2)


def test_forward_consistent_with_logit():
    model = toy_text_model(seed=8)
    ids = [3, 4, 5, 6]
    assert forward(model, ids)[0] == pytest.approx(1 / (1 + np.exp(-_logit(model, ids, 0))))
