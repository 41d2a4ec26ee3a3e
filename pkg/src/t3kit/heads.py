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

"""Classification heads over clip embeddings and their decoding to (verb, noun)

Head modes:

``single_verb`` / ``single_noun``
    One linear layer over verbs (nouns). Single-task learning trains one complete
    system per mode and concatenates their scores as ``[verb scores, noun scores]``.
``multi``
    Two linear layers on one encoder; scores are ``[verb scores, noun scores]``.
``adg``
    One linear layer over the actions of an :class:`ActionDictionary`. Decoding maps
    the winning action back to its pair.

Clip targets are ``(B, 3)`` long tensors of ``(verb, noun, action)`` ids. The action
column is ``-1`` when a pair is not an action; only ``adg`` reads that column.
"""

from __future__ import annotations

from typing import List, NamedTuple, Optional

import param
import torch

from torch import nn
from torch.nn import functional as F

from .action_dictionary import ActionDictionary

__all__ = [
    "ActionPrediction",
    "count_parameters",
    "decode",
    "HEAD_MODES",
    "head_probabilities",
    "make_targets",
    "supervised_loss",
    "system_param_count",
    "TaskHead",
]

HEAD_MODES = ("single_verb", "single_noun", "multi", "adg")

_logger = param.get_logger(name="t3kit.heads")


class ActionPrediction(NamedTuple):
    """One decoded prediction

    `action` is :obj:`None` when the predicted pair is not in the dictionary.
    """

    verb: int
    noun: int
    action: Optional[int]
    scores: torch.Tensor


def _check_mode(mode):
    if mode not in HEAD_MODES:
        raise ValueError(f"head mode must be one of {HEAD_MODES}, got '{mode}'")


class TaskHead(nn.Module):
    """A linear classification head in one of :obj:`HEAD_MODES`

    Parameters
    ----------
    mode
    embed_dim
    dictionary
        Supplies the class counts ``k``, ``h``, and ``g``
    """

    def __init__(self, mode: str, embed_dim: int, dictionary: ActionDictionary):
        super().__init__()
        _check_mode(mode)
        self.mode = mode
        self.embed_dim = embed_dim
        self.num_verbs = dictionary.num_verbs
        self.num_nouns = dictionary.num_nouns
        self.num_actions = dictionary.num_actions
        if mode == "single_verb":
            self.verb = nn.Linear(embed_dim, self.num_verbs)
        elif mode == "single_noun":
            self.noun = nn.Linear(embed_dim, self.num_nouns)
        elif mode == "multi":
            self.verb = nn.Linear(embed_dim, self.num_verbs)
            self.noun = nn.Linear(embed_dim, self.num_nouns)
        else:
            self.action = nn.Linear(embed_dim, self.num_actions)

    @property
    def out_features(self) -> int:
        return {
            "single_verb": self.num_verbs,
            "single_noun": self.num_nouns,
            "multi": self.num_verbs + self.num_nouns,
            "adg": self.num_actions,
        }[self.mode]

    def forward(self, embedding: torch.Tensor) -> torch.Tensor:
        if embedding.size(-1) != self.embed_dim:
            raise ValueError(
                f"expected embeddings of width {self.embed_dim}, got "
                f"{tuple(embedding.shape)}"
            )
        if self.mode == "single_verb":
            return self.verb(embedding)
        elif self.mode == "single_noun":
            return self.noun(embedding)
        elif self.mode == "multi":
            return torch.cat([self.verb(embedding), self.noun(embedding)], -1)
        return self.action(embedding)

    def supervised_loss(
        self, logits: torch.Tensor, targets: torch.Tensor
    ) -> torch.Tensor:
        return supervised_loss(logits, targets, self.mode, self.num_verbs)

    def extra_repr(self) -> str:
        return f"mode={self.mode}"


def _check_ids(ids, count, kind):
    if ids.numel() and (ids.min() < 0 or ids.max() >= count):
        raise ValueError(
            f"{kind} targets must lie in [0, {count}), got range "
            f"[{int(ids.min())}, {int(ids.max())}]"
        )


def supervised_loss(
    logits: torch.Tensor, targets: torch.Tensor, mode: str, num_verbs: int
) -> torch.Tensor:
    """Mean cross-entropy of a batch of head outputs against clip targets

    ``multi`` mode returns the unweighted sum of the verb and noun cross-entropies.

    Raises
    ------
    ValueError
        If a target id is outside its label space (including an absent action in
        ``adg`` mode)
    """
    _check_mode(mode)
    targets = targets.long()
    if mode == "single_verb":
        _check_ids(targets[:, 0], logits.size(-1), "verb")
        return F.cross_entropy(logits, targets[:, 0])
    elif mode == "single_noun":
        _check_ids(targets[:, 1], logits.size(-1), "noun")
        return F.cross_entropy(logits, targets[:, 1])
    elif mode == "multi":
        verb, noun = logits[:, :num_verbs], logits[:, num_verbs:]
        _check_ids(targets[:, 0], verb.size(-1), "verb")
        _check_ids(targets[:, 1], noun.size(-1), "noun")
        return F.cross_entropy(verb, targets[:, 0]) + F.cross_entropy(
            noun, targets[:, 1]
        )
    _check_ids(targets[:, 2], logits.size(-1), "action")
    return F.cross_entropy(logits, targets[:, 2])


def head_probabilities(logits: torch.Tensor, mode: str, num_verbs: int) -> torch.Tensor:
    """Softmax head outputs into probabilities

    For the ``[verb, noun]`` layouts (``multi`` or concatenated single-task scores, mode
    ``"multi"`` or ``"single"``) each block is normalized separately.
    """
    if mode in ("multi", "single"):
        return torch.cat(
            [
                logits[..., :num_verbs].softmax(-1),
                logits[..., num_verbs:].softmax(-1),
            ],
            -1,
        )
    return logits.softmax(-1)


def decode(
    scores: torch.Tensor, dictionary: ActionDictionary, mode: str
) -> List[ActionPrediction]:
    """Decode a batch of logits or probabilities into predictions

    Parameters
    ----------
    scores
        ``(B, g)`` in ``adg`` mode. ``(B, k + h)`` in ``multi`` mode or ``single`` mode
        (the concatenated outputs of the two single-task systems)
    dictionary
    mode
        ``"adg"``, ``"multi"``, or ``"single"``

    Ties in argmax go to the lowest index.
    """
    if scores.dim() == 1:
        scores = scores.unsqueeze(0)
    k, h = dictionary.num_verbs, dictionary.num_nouns
    preds = []
    if mode == "adg":
        if scores.size(-1) != dictionary.num_actions:
            raise ValueError(
                f"expected {dictionary.num_actions} action scores, got "
                f"{scores.size(-1)}"
            )
        for row, a in zip(scores, scores.argmax(-1).tolist()):
            v, n = dictionary.action_to_pair(a)
            preds.append(ActionPrediction(v, n, a, row))
    elif mode in ("multi", "single"):
        if scores.size(-1) != k + h:
            raise ValueError(
                f"expected {k + h} verb + noun scores, got {scores.size(-1)}"
            )
        verbs = scores[:, :k].argmax(-1).tolist()
        nouns = scores[:, k:].argmax(-1).tolist()
        for row, v, n in zip(scores, verbs, nouns):
            a = dictionary.pair_to_action(v, n)
            if a is None:
                _logger.debug(f"decoded pair ({v}, {n}) is not an action")
            preds.append(ActionPrediction(v, n, a, row))
    else:
        raise ValueError(f"cannot decode mode '{mode}'. Expected adg, multi, or single")
    return preds


def make_targets(pairs, dictionary: ActionDictionary) -> torch.Tensor:
    """Build ``(B, 3)`` clip targets from (verb, noun) pairs"""
    rows = []
    for v, n in pairs:
        a = dictionary.pair_to_action(v, n)
        rows.append((int(v), int(n), -1 if a is None else a))
    return torch.tensor(rows, dtype=torch.long).view(-1, 3)


def count_parameters(module: nn.Module) -> int:
    """Number of trainable parameters of a module"""
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def system_param_count(
    mode: str,
    encoder_params: int,
    embed_dim: int,
    dictionary: ActionDictionary,
) -> int:
    """Trainable parameters of a whole recognition system

    ``single`` counts two encoders, one with a verb head and one with a noun head.
    ``multi`` counts one encoder with both heads, ``adg`` one encoder with an action
    head.
    """
    k, h, g = dictionary.num_verbs, dictionary.num_nouns, dictionary.num_actions

    def linear(out):
        return embed_dim * out + out

    if mode == "single":
        return 2 * encoder_params + linear(k) + linear(h)
    elif mode == "multi":
        return encoder_params + linear(k) + linear(h)
    elif mode == "adg":
        return encoder_params + linear(g)
    raise ValueError(f"mode must be single, multi, or adg, got '{mode}'")
