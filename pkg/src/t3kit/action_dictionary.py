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

"""Verb and noun label spaces, and the dictionary of actions between them

An action is a (verb, noun) pair. Rather than classify verbs and nouns separately, a
dictionary-guided classifier predicts one of the `g` actions seen in training and maps
the prediction back to its pair. Only pairs in the dictionary are actions, so
:func:`pair_to_action` may come up empty.
"""

from __future__ import annotations

import os
import warnings

from types import MappingProxyType
from typing import Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import pandas as pd

__all__ = [
    "ActionDictionary",
    "action_to_pair",
    "build_dictionary",
    "collect_pairs",
    "DICTIONARY_COLUMNS",
    "DictionaryError",
    "pair_to_action",
    "read_dictionary_csv",
    "write_dictionary_csv",
]

DICTIONARY_COLUMNS = (
    "verb_class",
    "verb",
    "noun_class",
    "noun",
    "action_class",
    "action",
)
"""Header of a dictionary CSV file, in order"""

Pair = Tuple[int, int]


class DictionaryError(ValueError):
    """Raised when pairs or names cannot form a valid action dictionary"""


class ActionDictionary(object):
    """A bijection between action ids and (verb id, noun id) pairs

    Do not construct directly; use :func:`build_dictionary` or
    :func:`read_dictionary_csv`. Instances are immutable.

    Attributes
    ----------
    forward : tuple
        ``forward[a]`` is the ``(verb, noun)`` pair of action `a`
    inverse : mapping
        Read-only map from pair to action id
    num_verbs : int
    num_nouns : int
    num_actions : int
    verb_names : tuple
    noun_names : tuple
    action_names : tuple
    """

    __slots__ = (
        "_forward",
        "_inverse",
        "_num_verbs",
        "_num_nouns",
        "_verb_names",
        "_noun_names",
        "_action_names",
    )

    def __init__(
        self,
        forward: Tuple[Pair, ...],
        num_verbs: int,
        num_nouns: int,
        verb_names: Tuple[str, ...],
        noun_names: Tuple[str, ...],
        action_names: Tuple[str, ...],
    ):
        object.__setattr__(self, "_forward", forward)
        object.__setattr__(
            self, "_inverse", MappingProxyType({p: a for a, p in enumerate(forward)})
        )
        object.__setattr__(self, "_num_verbs", num_verbs)
        object.__setattr__(self, "_num_nouns", num_nouns)
        object.__setattr__(self, "_verb_names", verb_names)
        object.__setattr__(self, "_noun_names", noun_names)
        object.__setattr__(self, "_action_names", action_names)

    def __setattr__(self, name, value):
        raise AttributeError(f"{type(self).__name__} is immutable")

    @property
    def forward(self) -> Tuple[Pair, ...]:
        return self._forward

    @property
    def inverse(self) -> Mapping[Pair, int]:
        return self._inverse

    @property
    def num_verbs(self) -> int:
        return self._num_verbs

    @property
    def num_nouns(self) -> int:
        return self._num_nouns

    @property
    def num_actions(self) -> int:
        return len(self._forward)

    @property
    def verb_names(self) -> Tuple[str, ...]:
        return self._verb_names

    @property
    def noun_names(self) -> Tuple[str, ...]:
        return self._noun_names

    @property
    def action_names(self) -> Tuple[str, ...]:
        return self._action_names

    def __len__(self) -> int:
        return len(self._forward)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ActionDictionary):
            return NotImplemented
        return (
            self._forward == other._forward
            and self._num_verbs == other._num_verbs
            and self._num_nouns == other._num_nouns
            and self._verb_names == other._verb_names
            and self._noun_names == other._noun_names
            and self._action_names == other._action_names
        )

    def __hash__(self) -> int:
        return hash((self._forward, self._num_verbs, self._num_nouns))

    def __repr__(self) -> str:
        return (
            f"ActionDictionary(num_verbs={self.num_verbs}, "
            f"num_nouns={self.num_nouns}, num_actions={self.num_actions})"
        )

    def action_to_pair(self, a: int) -> Pair:
        """The (verb, noun) pair of action `a`

        Raises
        ------
        IndexError
            If `a` is not in ``[0, num_actions)``
        """
        a = int(a)
        if not 0 <= a < len(self._forward):
            raise IndexError(
                f"action id {a} out of range for {len(self._forward)} actions"
            )
        return self._forward[a]

    def pair_to_action(self, v: int, n: int) -> Optional[int]:
        """The action id of pair ``(v, n)``, or :obj:`None` if it is not an action

        Raises
        ------
        IndexError
            If `v` or `n` are outside their label spaces
        """
        v, n = int(v), int(n)
        if not 0 <= v < self._num_verbs:
            raise IndexError(f"verb id {v} out of range for {self._num_verbs} verbs")
        if not 0 <= n < self._num_nouns:
            raise IndexError(f"noun id {n} out of range for {self._num_nouns} nouns")
        return self._inverse.get((v, n), None)


def _check_names(names, count, kind) -> Tuple[str, ...]:
    if names is None:
        return tuple(f"{kind}{i}" for i in range(count))
    names = tuple(str(x) for x in names)
    if len(names) != count:
        raise DictionaryError(f"expected {count} {kind} names, got {len(names)}")
    seen = dict()
    for i, name in enumerate(names):
        if name in seen:
            raise DictionaryError(
                f"{kind} name '{name}' shared by ids {seen[name]} and {i}"
            )
        seen[name] = i
    return names


def build_dictionary(
    pairs: Iterable[Pair],
    num_verbs: Optional[int] = None,
    num_nouns: Optional[int] = None,
    verb_names: Optional[Sequence[str]] = None,
    noun_names: Optional[Sequence[str]] = None,
    action_names: Optional[Sequence[str]] = None,
) -> ActionDictionary:
    """Build an action dictionary from an ordered list of unique (verb, noun) pairs

    Action ``i`` is the ``i``-th pair.

    Parameters
    ----------
    pairs
    num_verbs
        Size of the verb label space. Defaults to one more than the largest verb id
        in `pairs`
    num_nouns
        Likewise for nouns
    verb_names
        One unique name per verb id. Defaults to ``"verb0"``, ``"verb1"``, ...
    noun_names
        Likewise for nouns
    action_names
        One name per action. Defaults to ``"<verb name> <noun name>"``

    Raises
    ------
    DictionaryError
        If a pair repeats, an id falls outside its label space, or names are
        inconsistent
    """
    forward = []
    seen = dict()
    for i, pair in enumerate(pairs):
        try:
            v, n = pair
        except (TypeError, ValueError):
            raise DictionaryError(f"entry {i} ({pair!r}) is not a (verb, noun) pair")
        pair = (int(v), int(n))
        if pair in seen:
            raise DictionaryError(
                f"duplicate pair {pair} at positions {seen[pair]} and {i}"
            )
        if pair[0] < 0 or pair[1] < 0:
            raise DictionaryError(f"pair {pair} at position {i} has a negative id")
        seen[pair] = i
        forward.append(pair)
    if num_verbs is None:
        num_verbs = max((v for v, _ in forward), default=-1) + 1
    if num_nouns is None:
        num_nouns = max((n for _, n in forward), default=-1) + 1
    for i, (v, n) in enumerate(forward):
        if v >= num_verbs:
            raise DictionaryError(
                f"pair {(v, n)} at position {i} references verb {v}, but there are "
                f"only {num_verbs} verbs"
            )
        if n >= num_nouns:
            raise DictionaryError(
                f"pair {(v, n)} at position {i} references noun {n}, but there are "
                f"only {num_nouns} nouns"
            )
    verb_names = _check_names(verb_names, num_verbs, "verb")
    noun_names = _check_names(noun_names, num_nouns, "noun")
    if action_names is None:
        action_names = tuple(f"{verb_names[v]} {noun_names[n]}" for v, n in forward)
    else:
        action_names = tuple(str(x) for x in action_names)
        if len(action_names) != len(forward):
            raise DictionaryError(
                f"expected {len(forward)} action names, got {len(action_names)}"
            )
    return ActionDictionary(
        tuple(forward), num_verbs, num_nouns, verb_names, noun_names, action_names
    )


def action_to_pair(d: ActionDictionary, a: int) -> Pair:
    """Alias of :func:`ActionDictionary.action_to_pair`"""
    return d.action_to_pair(a)


def pair_to_action(d: ActionDictionary, v: int, n: int) -> Optional[int]:
    """Alias of :func:`ActionDictionary.pair_to_action`"""
    return d.pair_to_action(v, n)


def collect_pairs(labels: Iterable[Pair]) -> List[Pair]:
    """Unique (verb, noun) pairs of a label stream in order of first appearance"""
    seen, pairs = set(), []
    for v, n in labels:
        pair = (int(v), int(n))
        if pair not in seen:
            seen.add(pair)
            pairs.append(pair)
    return pairs


def _names_from_column(df, id_col, name_col, kind, count):
    names = dict()
    for id_, name in zip(df[id_col], df[name_col]):
        name = str(name)
        prev = names.setdefault(int(id_), name)
        if prev != name:
            warnings.warn(
                f"{kind} {id_} is named both '{prev}' and '{name}'. Keeping '{prev}'"
            )
    return [names.get(i, f"{kind}{i}") for i in range(count)]


def read_dictionary_csv(
    path: Union[str, os.PathLike],
    num_verbs: Optional[int] = None,
    num_nouns: Optional[int] = None,
) -> ActionDictionary:
    """Read a dictionary from a CSV with columns :obj:`DICTIONARY_COLUMNS`

    Rows are actions in order; the ``action_class`` column must count up from zero.
    Verb and noun ids which no action references get placeholder names.

    Raises
    ------
    DictionaryError
    OSError
    """
    try:
        df = pd.read_csv(path, dtype={"verb": str, "noun": str, "action": str})
    except FileNotFoundError as e:
        raise FileNotFoundError(f"no dictionary file '{path}'") from e
    missing = [c for c in DICTIONARY_COLUMNS if c not in df.columns]
    if missing:
        raise DictionaryError(f"'{path}' missing columns {missing}")
    actions = df["action_class"].astype(int).tolist()
    if actions != list(range(len(df))):
        raise DictionaryError(
            f"'{path}': action_class must be 0, 1, ..., {len(df) - 1} in row order"
        )
    verbs = df["verb_class"].astype(int)
    nouns = df["noun_class"].astype(int)
    if num_verbs is None:
        num_verbs = int(verbs.max()) + 1 if len(df) else 0
    if num_nouns is None:
        num_nouns = int(nouns.max()) + 1 if len(df) else 0
    return build_dictionary(
        zip(verbs.tolist(), nouns.tolist()),
        num_verbs,
        num_nouns,
        _names_from_column(df, "verb_class", "verb", "verb", num_verbs),
        _names_from_column(df, "noun_class", "noun", "noun", num_nouns),
        df["action"].tolist(),
    )


def write_dictionary_csv(d: ActionDictionary, path: Union[str, os.PathLike]) -> None:
    """Write a dictionary in the format of :func:`read_dictionary_csv`"""
    rows = [
        (v, d.verb_names[v], n, d.noun_names[n], a, d.action_names[a])
        for a, (v, n) in enumerate(d.forward)
    ]
    pd.DataFrame(rows, columns=DICTIONARY_COLUMNS).to_csv(path, index=False)
