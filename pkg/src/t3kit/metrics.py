# Copyright 2024 t3kit developers
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#    http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Recognition accuracies, answer BLEU and accuracy, and probability aggregation"""

from __future__ import annotations

import json
import math
import os
import re

from collections import Counter, OrderedDict
from typing import Iterable, List, NamedTuple, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch

from . import config

__all__ = [
    "aggregate",
    "answer_bleu",
    "bleu",
    "bleu_statistics",
    "BleuScore",
    "BleuStatistics",
    "compute_bleu",
    "format_score_table",
    "ngram_counts",
    "recognition_accuracy",
    "RecognitionScore",
    "tokenize",
    "vqa_accuracy",
    "write_score_report",
]

_PUNCT = re.compile(r"[^\w\s]")


def tokenize(text: str) -> List[str]:
    """Lowercase words split on whitespace, punctuation dropped"""
    return _PUNCT.sub(" ", text.lower()).split()


class RecognitionScore(NamedTuple):
    acc_action: float
    acc_verb: float
    acc_noun: float


def _pair(x) -> Tuple[int, int]:
    if hasattr(x, "verb"):
        return int(x.verb), int(x.noun)
    v, n = x[:2]
    return int(v), int(n)


def recognition_accuracy(
    preds: Sequence, targets: Sequence[Tuple[int, int]]
) -> RecognitionScore:
    """Fractions of clips with the verb right, the noun right, or both

    `preds` may hold :class:`t3kit.heads.ActionPrediction` or ``(verb, noun)`` pairs.
    An empty evaluation scores zero.

    Raises
    ------
    ValueError
        If `preds` and `targets` differ in length
    """
    if len(preds) != len(targets):
        raise ValueError(f"{len(preds)} predictions for {len(targets)} targets")
    if not len(preds):
        return RecognitionScore(0.0, 0.0, 0.0)
    p = np.array([_pair(x) for x in preds], dtype=np.int64)
    t = np.array([_pair(x) for x in targets], dtype=np.int64)
    verb, noun = p[:, 0] == t[:, 0], p[:, 1] == t[:, 1]
    return RecognitionScore(
        float((verb & noun).mean()), float(verb.mean()), float(noun.mean())
    )


def ngram_counts(tokens: Sequence[str], order: int) -> Counter:
    """Counts of the n-grams of exactly length `order`"""
    return Counter(
        tuple(tokens[i : i + order]) for i in range(len(tokens) - order + 1)
    )


class BleuStatistics(NamedTuple):
    """Sufficient statistics of corpus BLEU for orders ``1, ..., n``"""

    correct: Tuple[int, ...]
    total: Tuple[int, ...]
    sys_len: int
    ref_len: int


def bleu_statistics(
    candidates: Sequence[Sequence[str]],
    references: Sequence[Sequence[str]],
    max_order: int = 4,
) -> BleuStatistics:
    """Clipped n-gram matches, candidate n-gram counts, and lengths over a corpus"""
    if len(candidates) != len(references):
        raise ValueError(
            f"{len(candidates)} candidates for {len(references)} references"
        )
    correct, total = [0] * max_order, [0] * max_order
    sys_len = ref_len = 0
    for cand, ref in zip(candidates, references):
        sys_len += len(cand)
        ref_len += len(ref)
        for n in range(1, max_order + 1):
            cand_ngrams = ngram_counts(cand, n)
            ref_ngrams = ngram_counts(ref, n)
            correct[n - 1] += sum(
                min(count, ref_ngrams[ngram]) for ngram, count in cand_ngrams.items()
            )
            total[n - 1] += max(len(cand) - n + 1, 0)
    return BleuStatistics(tuple(correct), tuple(total), sys_len, ref_len)


def compute_bleu(stats: BleuStatistics) -> float:
    """BLEU in ``[0, 1]`` from sufficient statistics

    Uniform weights over the orders the candidates are long enough to have. An order
    with n-grams but no matches contributes ``log(t3kit.config.BLEU_EPSILON)`` instead
    of negative infinity.
    """
    if stats.sys_len == 0:
        return 0.0
    log_sum, orders = 0.0, 0
    for correct, total in zip(stats.correct, stats.total):
        if not total:
            continue
        orders += 1
        log_sum += math.log(correct / total or config.BLEU_EPSILON)
    bp = 1.0
    if stats.sys_len < stats.ref_len:
        bp = math.exp(1 - stats.ref_len / stats.sys_len)
    return min(1.0, bp * math.exp(log_sum / orders))


def bleu(
    candidates: Sequence[Sequence[str]],
    references: Sequence[Sequence[str]],
    max_order: int = 4,
) -> float:
    """Corpus BLEU of tokenized candidates against one tokenized reference each"""
    return compute_bleu(bleu_statistics(candidates, references, max_order))


class BleuScore(NamedTuple):
    b1: float
    b4: float


def answer_bleu(candidates: Sequence[str], references: Sequence[str]) -> BleuScore:
    """B@1 and B@4 of answer strings after :func:`tokenize`"""
    cands = [tokenize(x) for x in candidates]
    refs = [tokenize(x) for x in references]
    return BleuScore(bleu(cands, refs, 1), bleu(cands, refs, 4))


def vqa_accuracy(candidates: Sequence[str], references: Sequence[str]) -> float:
    """Fraction of answers equal to their reference after :func:`tokenize`"""
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} answers for {len(references)} references")
    if not len(candidates):
        return 0.0
    return float(
        np.mean([tokenize(c) == tokenize(r) for c, r in zip(candidates, references)])
    )


def aggregate(
    prob_sets: Union[Iterable[torch.Tensor], torch.Tensor]
) -> torch.Tensor:
    """Elementwise mean of probability vectors

    Raises
    ------
    ValueError
        If there are no vectors, widths differ, or an entry is negative
    """
    if not isinstance(prob_sets, torch.Tensor):
        prob_sets = list(prob_sets)
        if not prob_sets:
            raise ValueError("nothing to aggregate")
        widths = {tuple(p.shape) for p in prob_sets}
        if len(widths) != 1:
            raise ValueError(f"probability vectors differ in shape: {sorted(widths)}")
        prob_sets = torch.stack(prob_sets)
    if prob_sets.size(0) == 0:
        raise ValueError("nothing to aggregate")
    if (prob_sets < 0).any():
        raise ValueError("probabilities must be non-negative")
    return prob_sets.mean(0)


def format_score_table(scores: dict) -> str:
    """A two-column plain-text table of named scores"""
    df = pd.DataFrame(
        {"metric": list(scores), "value": [float(v) for v in scores.values()]}
    )
    return df.to_string(index=False, float_format=lambda x: f"{x:.4f}")


def write_score_report(scores: dict, out_dir: Union[str, os.PathLike]) -> None:
    """Write ``scores.json`` and ``scores.txt`` to `out_dir`"""
    os.makedirs(out_dir, exist_ok=True)
    scores = OrderedDict((k, float(v)) for k, v in scores.items())
    with open(os.path.join(out_dir, "scores.json"), "w") as fp:
        json.dump(scores, fp, indent=2)
    with open(os.path.join(out_dir, "scores.txt"), "w") as fp:
        fp.write(format_score_table(scores) + "\n")
