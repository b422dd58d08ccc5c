from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from medcoder.ensemble import (
    EnsembleModel,
    EnsembleWeights,
    ModalityPrediction,
    decide,
    fuse,
    micro_f1_at,
    score_candidates,
    simplex_grid,
    tune_thresholds,
    tune_weights,
)

from helpers import fuse_oracle

NAMES = ("text", "ranker", "tabular")


def preds(*probs, available=(True, True, True)):
    return [ModalityPrediction(n, p, a) for n, p, a in zip(NAMES, probs, available)]


def test_fuse_all_available():
    w = EnsembleWeights(NAMES, (0.5, 0.3, 0.2), "text")
    assert fuse(preds([0.8], [0.6], [0.5]), w)[0] == pytest.approx(0.68, abs=1e-12)


def test_fuse_reallocates_missing():
    w = EnsembleWeights(NAMES, (0.5, 0.3, 0.2), "text")
    out = fuse(preds([0.8], [0.6], [0.5], available=(True, True, False)), w)
    assert out[0] == pytest.approx(0.74, abs=1e-12)
    assert fuse(preds([0.8], [0.6]), w)[0] == pytest.approx(0.74, abs=1e-12)  # absent entirely
    assert w.effective({"text": True, "ranker": True, "tabular": False}) == pytest.approx(
        {"text": 0.7, "ranker": 0.3, "tabular": 0.0})


def test_fuse_single_fallback_is_identity():
    w = EnsembleWeights(NAMES, (0.2, 0.5, 0.3), "text")
    p = np.array([0.13, 0.99, 0.0, 0.5])
    assert np.array_equal(fuse([ModalityPrediction("text", p)], w), p)


def test_fuse_per_row_availability():
    w = EnsembleWeights(("text", "tabular"), (0.6, 0.4), "text")
    text = np.array([[0.2, 0.9], [0.4, 0.1]])
    tab = np.array([[1.0, 0.0], [0.0, 0.0]])
    out = fuse([ModalityPrediction("text", text), ModalityPrediction("tabular", tab, [True, False])], w)
    assert np.allclose(out[0], 0.6 * text[0] + 0.4 * tab[0])
    assert np.allclose(out[1], text[1])


def test_fuse_requires_fallback():
    w = EnsembleWeights(NAMES, (0.5, 0.3, 0.2), "text")
    with pytest.raises(ValueError):
        fuse([ModalityPrediction("ranker", [0.4])], w)
    with pytest.raises(ValueError):
        fuse(preds([0.8], [0.6], [0.5], available=(False, True, True)), w)


@pytest.mark.parametrize("alphas", [(0.5, 0.3, 0.3), (1.2, -0.1, -0.1), (0.5, 0.5)])
def test_weights_must_be_on_simplex(alphas):
    with pytest.raises(ValueError):
        EnsembleWeights(NAMES, alphas, "text")


def test_weights_need_registered_fallback():
    with pytest.raises(ValueError):
        EnsembleWeights(NAMES, (0.5, 0.3, 0.2), "notes")


def test_probabilities_validated():
    with pytest.raises(ValueError):
        ModalityPrediction("text", [1.2])


weight_vectors = st.lists(st.integers(0, 20), min_size=3, max_size=3).filter(sum).map(
    lambda c: tuple(x / sum(c) for x in c))


@given(weight_vectors, st.lists(st.booleans(), min_size=2, max_size=2),
       st.lists(st.lists(st.floats(0, 1), min_size=4, max_size=4), min_size=3, max_size=3))
@settings(max_examples=200)
def test_fuse_properties(alphas, other_available, probs):
    available = [True] + other_available
    w = EnsembleWeights(NAMES, alphas, "text")
    out = fuse(preds(*probs, available=available), w)
    assert np.allclose(out, fuse_oracle(probs, alphas, available, 0), atol=1e-12)
    eff = w.effective(dict(zip(NAMES, available)))
    assert abs(sum(eff.values()) - 1.0) <= 1e-9
    used = [p for p, a in zip(probs, available) if a]
    lo, hi = np.min(used, axis=0), np.max(used, axis=0)
    assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)
    if all(available):
        assert np.allclose(out, sum(a * np.array(p) for a, p in zip(alphas, probs)), atol=1e-12)


def test_simplex_grid_examples():
    assert simplex_grid(2, 0.5) == [(0.0, 1.0), (0.5, 0.5), (1.0, 0.0)]
    assert len(simplex_grid(3, 0.05)) == 231
    assert simplex_grid(1, 0.25) == [(1.0,)]
    for w in simplex_grid(3, 0.25):
        assert abs(sum(w) - 1) <= 1e-12 and min(w) >= 0
    with pytest.raises(ValueError):
        simplex_grid(2, 0.3)


def _perfect_vs_random(n=200, C=4, seed=0):
    rng = np.random.default_rng(seed)
    Y = (rng.random((n, C)) < 0.3).astype(int)
    perfect = np.where(Y == 1, 0.9, 0.1)
    noise = rng.random((n, C))
    return Y, [ModalityPrediction("text", noise), ModalityPrediction("oracle", perfect)]


def test_tune_prefers_perfect_predictor():
    Y, (noise, perfect) = _perfect_vs_random()
    p = [ModalityPrediction("text", perfect.probabilities), ModalityPrediction("noise", noise.probabilities)]
    assert tune_weights(p, Y, "text")["text"] >= 0.95


def test_tie_break_with_random_fallback():
    # every weight >= 0.6 on the perfect predictor scores F1 = 1, so the
    # fallback-favouring tie-break keeps the smallest such weight
    Y, p = _perfect_vs_random()
    w = tune_weights(p, Y, "text")
    assert micro_f1_at(fuse(p, w), Y) == 1.0
    assert w["oracle"] == pytest.approx(0.6)


def test_tune_is_optimal_over_grid():
    Y, p = _perfect_vs_random(seed=3)
    for step in (0.25, 0.05):
        w = tune_weights(p, Y, "text", step=step)
        best = micro_f1_at(fuse(p, w), Y)
        scores = score_candidates(p, Y, simplex_grid(2, step), "text")
        assert all(best >= s for s in scores)


def test_tune_full_enumeration_step_quarter():
    Y, p = _perfect_vs_random(seed=5)
    cands = simplex_grid(2, 0.25)
    scores = [micro_f1_at(sum(a * m.probabilities for a, m in zip(c, p)), Y) for c in cands]
    top = max(scores)
    tied = [c for c, s in zip(cands, scores) if s == top]
    expected = max(tied, key=lambda c: (c[0], -cands.index(c)))
    assert tune_weights(p, Y, "text", step=0.25).alphas == expected


def test_tie_prefers_fallback():
    Y = np.array([[1, 0], [0, 1]])
    same = np.array([[0.9, 0.1], [0.1, 0.9]])
    w = tune_weights([ModalityPrediction("text", same), ModalityPrediction("tabular", same)], Y, "text")
    assert w.alphas == (1.0, 0.0)


def test_tune_single_predictor():
    w = tune_weights([ModalityPrediction("text", [[0.2]])], [[1]], "text")
    assert w.alphas == (1.0,)


def test_tune_rejects_empty_validation():
    with pytest.raises(ValueError):
        tune_weights([ModalityPrediction("text", np.zeros((0, 2)))], np.zeros((0, 2)), "text")


def test_decide_examples():
    assert decide([0.7, 0.4], 0.5).tolist() == [True, False]
    assert not decide([0.1, 0.2], [0.5, 0.5]).any()
    assert decide([[0.5, 0.3]], [0.5, 0.2]).tolist() == [[True, True]]


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_threshold_tuning_dominates(seed):
    rng = np.random.default_rng(seed)
    Y = (rng.random((40, 3)) < 0.3).astype(int)
    P = np.clip(Y * 0.4 + rng.random((40, 3)) * 0.6, 0, 1)
    th = tune_thresholds(P, Y)
    assert micro_f1_at(P, Y, th) >= micro_f1_at(P, Y, 0.5)
    assert np.all((th > 0) & (th < 1))


def test_model_json_round_trip(tmp_path):
    model = EnsembleModel(EnsembleWeights(NAMES, (0.6, 0.15, 0.25), "text"), ["A", "B"], [0.35, 0.6], 0.05)
    model.save(tmp_path / "e.json")
    assert EnsembleModel.load(tmp_path / "e.json") == model


def test_model_rejects_bad_thresholds():
    w = EnsembleWeights(("text",), (1.0,), "text")
    with pytest.raises(ValueError):
        EnsembleModel(w, ["A"], [1.0])
    with pytest.raises(ValueError):
        EnsembleModel(w, ["A", "B"], [0.5])
