"""Tests for t3kit.metrics"""

import json
import math
import os

import pytest
import torch

from t3kit import metrics
from t3kit.heads import ActionPrediction


def test_tokenize():
    assert metrics.tokenize("Attach the Syringe!") == ["attach", "the", "syringe"]
    assert metrics.tokenize("  ") == []


def test_recognition_accuracy_hierarchy():
    preds = [(0, 1), (2, 3), (2, 0), (5, 5)]
    targets = [(0, 1), (2, 4), (1, 0), (5, 5)]
    score = metrics.recognition_accuracy(preds, targets)
    assert score.acc_action == 0.5
    assert score.acc_verb == 0.75
    assert score.acc_noun == 0.75
    assert score.acc_action <= min(score.acc_verb, score.acc_noun)


def test_recognition_accuracy_perfect_and_predictions():
    preds = [ActionPrediction(1, 2, None, torch.zeros(1))] * 3
    score = metrics.recognition_accuracy(preds, [(1, 2)] * 3)
    assert tuple(score) == (1.0, 1.0, 1.0)
    assert tuple(metrics.recognition_accuracy([], [])) == (0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        metrics.recognition_accuracy(preds, [(1, 2)])


def test_bleu_unigram_half():
    score = metrics.answer_bleu(["attach syringe"], ["attach needle"])
    assert math.isclose(score.b1, 0.5)


def test_bleu_identical_is_one():
    cands = ["the needle is attached", "it is closed now"]
    score = metrics.answer_bleu(cands, cands)
    assert math.isclose(score.b1, 1.0) and math.isclose(score.b4, 1.0)


def test_bleu_brevity_penalty():
    score = metrics.bleu([["a"]], [["a", "b"]], max_order=1)
    assert math.isclose(score, math.exp(1 - 2))


def test_bleu_empty_and_zero_precision():
    assert metrics.bleu([[]], [["a"]]) == 0.0
    # unigrams exist but none match
    score = metrics.answer_bleu(["yes"], ["no"])
    assert 0 < score.b1 < 1e-6
    assert 0 < score.b4 < 1e-6


@pytest.mark.parametrize(
    "answers",
    [
        ["state 3"],
        ["yes", "state 3", "open"],
        ["yes", "state 3", "open the box now please"],
    ],
)
def test_bleu_identical_short_answers(answers):
    # orders longer than every answer are skipped rather than smoothed
    score = metrics.answer_bleu(answers, answers)
    assert score.b1 == pytest.approx(1.0)
    assert score.b4 == pytest.approx(1.0)


def test_bleu_partial_match_short_answers():
    # 4 unigrams, 3 matched; 2 bigrams, 1 matched; no trigrams or 4-grams
    score = metrics.bleu([["a", "b"], ["c", "d"]], [["a", "b"], ["c", "x"]], 4)
    assert score == pytest.approx(math.sqrt(3 / 4 * 1 / 2))


def test_bleu_clipping():
    stats = metrics.bleu_statistics([["the", "the", "the"]], [["the", "cat"]], 1)
    assert stats.correct == (1,)
    assert stats.total == (3,)


def test_bleu_matches_sacrebleu():
    sacrebleu = pytest.importorskip("sacrebleu")
    cands = [
        "the cat sat on the mat today",
        "a needle is attached to the syringe",
        "open the lid of the box slowly",
    ]
    refs = [
        "the cat sat on a mat today",
        "the needle is attached to the syringe now",
        "open the lid of the box",
    ]
    toks = [metrics.tokenize(x) for x in cands], [metrics.tokenize(x) for x in refs]
    for n in (1, 4):
        ref = sacrebleu.metrics.BLEU(
            tokenize="none", smooth_method="none", max_ngram_order=n
        ).corpus_score(cands, [refs])
        assert math.isclose(metrics.bleu(*toks, max_order=n), ref.score / 100, rel_tol=1e-6)


def test_vqa_accuracy():
    assert metrics.vqa_accuracy(["State 1", "state 2"], ["state 1", "state 3"]) == 0.5
    assert metrics.vqa_accuracy([], []) == 0.0


def test_aggregate():
    sets = [torch.tensor([0.2, 0.8]), torch.tensor([0.6, 0.4])]
    assert torch.allclose(metrics.aggregate(sets), torch.tensor([0.4, 0.6]))
    assert torch.allclose(metrics.aggregate(torch.stack(sets)), torch.tensor([0.4, 0.6]))
    with pytest.raises(ValueError, match="nothing"):
        metrics.aggregate([])
    with pytest.raises(ValueError, match="shape"):
        metrics.aggregate([torch.ones(2), torch.ones(3)])
    with pytest.raises(ValueError, match="non-negative"):
        metrics.aggregate([torch.tensor([-0.1, 1.1])])


def test_aggregate_single_set_is_identity():
    p = torch.tensor([[0.1, 0.9]])
    assert torch.equal(metrics.aggregate(p), p[0])


def test_write_score_report(temp_dir):
    out = os.path.join(temp_dir, "out")
    metrics.write_score_report({"acc_action": 0.5, "acc_verb": 1}, out)
    with open(os.path.join(out, "scores.json")) as f:
        assert json.load(f) == {"acc_action": 0.5, "acc_verb": 1.0}
    with open(os.path.join(out, "scores.txt")) as f:
        text = f.read()
    assert "acc_action" in text and "0.5000" in text
