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

"""Co-attention visual question answering over per-frame object features

The model follows the encoder-decoder layout of modular co-attention networks. The
question flow stacks ``L`` self-attention layers over LSTM-encoded words. The frame
flow stacks ``L`` layers of self-attention over object features, each followed by
guided attention whose keys and values are the final question states. Both flows are
pooled to a single vector by a scored softmax (:class:`AttentionPool`). With
frame-question cross-attention (:class:`FQCA`) enabled, each pooled vector then
attends over the other modality's token sequence. The pooled vectors are summed and
mapped to one score per answer, trained with binary cross-entropy.

Masks are boolean with :obj:`True` marking valid (unpadded) positions.
"""

from __future__ import annotations

import math

from typing import Iterable, List, NamedTuple, Optional, Sequence, Tuple

import torch

from torch import nn
from torch.nn import functional as F

from .config import ANSWER_BLOCK_SIZE
from .metrics import tokenize
from .params import MCANParams

__all__ = [
    "AnswerVocab",
    "AttentionPool",
    "FQCA",
    "GuidedAttentionLayer",
    "inference_partition",
    "MCANModel",
    "MultiHeadAttention",
    "ObjectFeatureSet",
    "pad_objects",
    "PAD",
    "QARecord",
    "QuestionSequence",
    "representative_frames",
    "SelfAttentionLayer",
    "subsample_frames",
    "TokenVocab",
    "UNK",
    "vqa_loss",
]

PAD, UNK = 0, 1
_MASK_FILL = -1e9


class QARecord(NamedTuple):
    """One annotated question about one frame of a video"""

    video_id: str
    frame_idx: int
    question: str
    answer: str


class ObjectFeatureSet(NamedTuple):
    """Object features of one frame, ``(N_o, feature_dim)``"""

    features: torch.Tensor
    frame_idx: int = 0


class QuestionSequence(NamedTuple):
    """A question as ids ``(B, N_s)``, embeddings ``(B, N_s, word_dim)``, LSTM states
    ``(B, N_s, dim)``, and a validity mask ``(B, N_s)``"""

    token_ids: torch.Tensor
    embedded: torch.Tensor
    encoded: torch.Tensor
    mask: torch.Tensor


class TokenVocab(object):
    """Question words to ids. Id 0 is padding, id 1 is unknown"""

    def __init__(self, words: Iterable[str] = tuple()):
        self.words = ["<pad>", "<unk>"]
        self.ids = dict()
        for word in words:
            if word not in self.ids and word not in ("<pad>", "<unk>"):
                self.ids[word] = len(self.words)
                self.words.append(word)

    @classmethod
    def from_questions(cls, questions: Iterable[str]) -> "TokenVocab":
        return cls(w for q in questions for w in tokenize(q))

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, question: str, max_tokens: Optional[int] = None) -> List[int]:
        """Token ids of a question, unknown words as :obj:`UNK`, padded to
        `max_tokens` if set (and truncated past it)"""
        ids = [self.ids.get(w, UNK) for w in tokenize(question)] or [UNK]
        if max_tokens is not None:
            ids = ids[:max_tokens] + [PAD] * max(0, max_tokens - len(ids))
        return ids


class AnswerVocab(object):
    """A bijection between answer texts and dense ids, ordered by text"""

    def __init__(self, answers: Iterable[str]):
        self.answers = tuple(sorted(set(answers)))
        if len(self.answers) < 2:
            raise ValueError("need at least two distinct answers")
        self.ids = {a: i for i, a in enumerate(self.answers)}

    def __len__(self) -> int:
        return len(self.answers)

    def __getitem__(self, answer_id: int) -> str:
        return self.answers[answer_id]

    def index(self, answer: str) -> int:
        try:
            return self.ids[answer]
        except KeyError:
            raise KeyError(f"answer '{answer}' not in vocabulary") from None


def representative_frames(
    num_frames: int, block_size: int = ANSWER_BLOCK_SIZE
) -> List[int]:
    """The last frame of each block of `block_size` frames (including a partial one)"""
    if num_frames < 1:
        return []
    reps = list(range(block_size - 1, num_frames, block_size))
    if num_frames % block_size:
        reps.append(num_frames - 1)
    return reps


def subsample_frames(
    records: Iterable[QARecord],
    num_frames: dict,
    block_size: int = ANSWER_BLOCK_SIZE,
) -> List[QARecord]:
    """Keep the annotations on representative frames

    Parameters
    ----------
    records
    num_frames
        Maps video id to its frame count
    block_size
    """
    keep = dict()
    out = []
    for record in records:
        video_id = record.video_id
        if video_id not in keep:
            reps = representative_frames(num_frames[video_id], block_size)
            keep[video_id] = set(reps)
        if record.frame_idx in keep[video_id]:
            out.append(record)
    return out


def inference_partition(
    num_frames: int, block_size: int = ANSWER_BLOCK_SIZE
) -> List[Tuple[int, range]]:
    """Pair each representative frame with the frames it answers for

    ``inference_partition(30) == [(14, range(0, 15)), (29, range(15, 30))]``
    """
    if num_frames < 1:
        raise ValueError(f"num_frames must be positive, got {num_frames}")
    return [
        (rep, range(start, rep + 1))
        for start, rep in zip(
            range(0, num_frames, block_size),
            representative_frames(num_frames, block_size),
        )
    ]


def pad_objects(
    feature_sets: Sequence[torch.Tensor], max_objects: int
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Stack ``(N_o_i, D)`` matrices into ``(B, max_objects, D)`` with a mask

    Sets longer than `max_objects` are truncated.
    """
    if not feature_sets:
        raise ValueError("no feature sets")
    dim = feature_sets[0].size(-1)
    out = feature_sets[0].new_zeros(len(feature_sets), max_objects, dim)
    mask = torch.zeros(len(feature_sets), max_objects, dtype=torch.bool)
    for i, x in enumerate(feature_sets):
        if x.dim() != 2 or x.size(1) != dim:
            raise ValueError(
                f"feature set {i} has shape {tuple(x.shape)}, not (N, {dim})"
            )
        n = min(x.size(0), max_objects)
        out[i, :n] = x[:n]
        mask[i, :n] = True
    return out, mask


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with separate query/key/value projections

    Returns the merged output and the ``(B, heads, T_q, T_k)`` attention weights (before
    dropout). Masked keys get weight zero.
    """

    def __init__(self, dim: int, heads: int, dropout: float = 0.0):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.merge = nn.Linear(dim, dim)
        self.dropout = nn.Dropout(dropout)

    def _split(self, x):
        b, t, _ = x.shape
        return x.view(b, t, self.heads, self.dim // self.heads).transpose(1, 2)

    def forward(
        self,
        query: torch.Tensor,
        key: torch.Tensor,
        value: torch.Tensor,
        key_mask: Optional[torch.Tensor] = None,
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        q = self._split(self.q(query))
        k = self._split(self.k(key))
        v = self._split(self.v(value))
        scores = q @ k.transpose(-2, -1) / math.sqrt(q.size(-1))
        if key_mask is not None:
            if key_mask.shape != key.shape[:2]:
                raise ValueError(
                    f"key mask {tuple(key_mask.shape)} does not match keys "
                    f"{tuple(key.shape[:2])}"
                )
            scores = scores.masked_fill(~key_mask[:, None, None, :], _MASK_FILL)
        att = scores.softmax(-1)
        out = (self.dropout(att) @ v).transpose(1, 2)
        out = out.reshape(query.size(0), query.size(1), self.dim)
        return self.merge(out), att


class _FeedForward(nn.Sequential):
    def __init__(self, dim: int, mult: int, dropout: float):
        super().__init__(
            nn.Linear(dim, dim * mult),
            nn.ReLU(),
            nn.Dropout(dropout),
            nn.Linear(dim * mult, dim),
        )


class SelfAttentionLayer(nn.Module):
    """Post-norm self-attention then feed-forward"""

    def __init__(self, dim: int, heads: int, ffn_mult: int = 4, dropout: float = 0.1):
        super().__init__()
        self.att = MultiHeadAttention(dim, heads, dropout)
        self.ffn = _FeedForward(dim, ffn_mult, dropout)
        self.norm1, self.norm2 = nn.LayerNorm(dim), nn.LayerNorm(dim)
        self.drop1, self.drop2 = nn.Dropout(dropout), nn.Dropout(dropout)

    def forward(self, x, mask=None):
        a, w = self.att(x, x, x, mask)
        x = self.norm1(x + self.drop1(a))
        x = self.norm2(x + self.drop2(self.ffn(x)))
        return x, [w]


class GuidedAttentionLayer(nn.Module):
    """Self-attention over `x`, guided attention from `x` to `y`, then feed-forward"""

    def __init__(self, dim: int, heads: int, ffn_mult: int = 4, dropout: float = 0.1):
        super().__init__()
        self.self_att = MultiHeadAttention(dim, heads, dropout)
        self.guided_att = MultiHeadAttention(dim, heads, dropout)
        self.ffn = _FeedForward(dim, ffn_mult, dropout)
        self.norm1, self.norm2, self.norm3 = (nn.LayerNorm(dim) for _ in range(3))
        self.drop1, self.drop2, self.drop3 = (nn.Dropout(dropout) for _ in range(3))

    def forward(self, x, y, x_mask=None, y_mask=None):
        a, w_self = self.self_att(x, x, x, x_mask)
        x = self.norm1(x + self.drop1(a))
        a, w_guided = self.guided_att(x, y, y, y_mask)
        x = self.norm2(x + self.drop2(a))
        x = self.norm3(x + self.drop3(self.ffn(x)))
        return x, [w_self, w_guided]


class AttentionPool(nn.Module):
    """Collapse ``(B, T, dim)`` to ``(B, dim)`` with softmaxed per-token MLP scores

    ``alpha = softmax(MLP(X))`` over unmasked positions; the output is ``alpha^T X``.
    """

    def __init__(self, dim: int, hidden: int = 512, dropout: float = 0.1):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(dim, hidden), nn.ReLU(), nn.Dropout(dropout), nn.Linear(hidden, 1)
        )

    def weights(self, x: torch.Tensor, mask: Optional[torch.Tensor] = None):
        scores = self.mlp(x).squeeze(-1)
        if mask is not None:
            scores = scores.masked_fill(~mask, _MASK_FILL)
        return scores.softmax(-1)

    def forward(self, x: torch.Tensor, mask: Optional[torch.Tensor] = None):
        return (self.weights(x, mask).unsqueeze(-1) * x).sum(1)


class FQCA(nn.Module):
    """Cross-attention of a pooled vector over the other modality's tokens

    With ``raw' = skip(raw)`` projected to width ``dim`` and ``C = [tilde; raw']``,

    ``out = tilde + fc1(fc0(tilde) + norm(MHA(tilde, C, C)))``
    """

    def __init__(self, dim: int, raw_dim: int, heads: int, dropout: float = 0.0):
        super().__init__()
        self.skip = nn.Linear(raw_dim, dim)
        self.att = MultiHeadAttention(dim, heads, dropout)
        self.fc0 = nn.Linear(dim, dim)
        self.norm = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, dim)

    def forward(
        self,
        tilde: torch.Tensor,
        raw: torch.Tensor,
        raw_mask: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        query = tilde.unsqueeze(1)
        context = torch.cat([query, self.skip(raw)], 1)
        mask = None
        if raw_mask is not None:
            mask = torch.cat(
                [raw_mask.new_ones(raw_mask.size(0), 1, dtype=torch.bool), raw_mask], 1
            )
        a, _ = self.att(query, context, context, mask)
        return tilde + self.fc1(self.fc0(tilde) + self.norm(a.squeeze(1)))


class MCANModel(nn.Module):
    """Co-attention flows over objects and question, pooled and fused into answer scores

    Parameters
    ----------
    params
    vocab_size
    num_answers

    Notes
    -----
    FQCA modules are built after every baseline module, so a model with
    ``params.fqca`` off initializes identically to the baseline part of one with it
    on under the same seed. :attr:`use_fqca` toggles the cross-attention at run time.
    """

    def __init__(self, params: MCANParams, vocab_size: int, num_answers: int):
        super().__init__()
        if num_answers < 2:
            raise ValueError(f"need at least two answers, got {num_answers}")
        dim, heads = params.dim, params.heads
        self.params = params
        self.embed = nn.Embedding(vocab_size, params.word_dim, padding_idx=PAD)
        self.lstm = nn.LSTM(params.word_dim, dim, batch_first=True)
        self.obj_proj = nn.Linear(params.feature_dim, dim)
        self.question_layers = nn.ModuleList(
            SelfAttentionLayer(dim, heads, params.ffn_mult, params.dropout)
            for _ in range(params.layers)
        )
        self.frame_layers = nn.ModuleList(
            GuidedAttentionLayer(dim, heads, params.ffn_mult, params.dropout)
            for _ in range(params.layers)
        )
        self.pool_question = AttentionPool(dim, params.flat_mlp_dim, params.dropout)
        self.pool_frame = AttentionPool(dim, params.flat_mlp_dim, params.dropout)
        self.classifier = nn.Linear(dim, num_answers)
        self.use_fqca = params.fqca
        if params.fqca:
            if params.fqca_source == "flow":
                frame_raw, question_raw = dim, dim
            else:
                frame_raw, question_raw = params.feature_dim, params.word_dim
            # question vector attends to frame tokens, and vice versa
            self.fqca_question = FQCA(dim, frame_raw, heads)
            self.fqca_frame = FQCA(dim, question_raw, heads)

    def encode_question(self, token_ids: torch.Tensor) -> QuestionSequence:
        if token_ids.dim() == 1:
            token_ids = token_ids.unsqueeze(0)
        if token_ids.size(1) < 1:
            raise ValueError("empty question")
        embedded = self.embed(token_ids)
        encoded, _ = self.lstm(embedded)
        return QuestionSequence(token_ids, embedded, encoded, token_ids != PAD)

    def flows(
        self,
        features: torch.Tensor,
        obj_mask: Optional[torch.Tensor],
        question: QuestionSequence,
    ) -> Tuple[torch.Tensor, torch.Tensor, List[torch.Tensor]]:
        """Run both flows. Returns ``(F_L, Q_L, attention weights)``"""
        if obj_mask is not None and obj_mask.shape != features.shape[:2]:
            raise ValueError(
                f"object mask {tuple(obj_mask.shape)} does not match features "
                f"{tuple(features.shape)}"
            )
        weights = []
        q = question.encoded
        for layer in self.question_layers:
            q, w = layer(q, question.mask)
            weights += w
        f = self.obj_proj(features)
        for layer in self.frame_layers:
            f, w = layer(f, q, obj_mask, question.mask)
            weights += w
        return f, q, weights

    def forward(
        self,
        features: torch.Tensor,
        obj_mask: Optional[torch.Tensor],
        token_ids: torch.Tensor,
    ) -> torch.Tensor:
        """Answer logits ``(B, N)``. Scores are their sigmoid"""
        question = self.encode_question(token_ids)
        f, q, _ = self.flows(features, obj_mask, question)
        q_tilde = self.pool_question(q, question.mask)
        f_tilde = self.pool_frame(f, obj_mask)
        if self.use_fqca:
            if self.params.fqca_source == "flow":
                frame_raw, question_raw = f, q
            else:
                frame_raw, question_raw = features, question.embedded
            q_tilde, f_tilde = (
                self.fqca_question(q_tilde, frame_raw, obj_mask),
                self.fqca_frame(f_tilde, question_raw, question.mask),
            )
        return self.classifier(q_tilde + f_tilde)

    def scores(self, features, obj_mask, token_ids) -> torch.Tensor:
        return torch.sigmoid(self(features, obj_mask, token_ids))


def vqa_loss(logits: torch.Tensor, answers: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy of answer logits against one-hot answer ids"""
    answers = answers.long()
    if answers.numel() and (answers.min() < 0 or answers.max() >= logits.size(-1)):
        raise ValueError(f"answer ids must lie in [0, {logits.size(-1)})")
    target = F.one_hot(answers, logits.size(-1)).to(logits)
    return F.binary_cross_entropy_with_logits(logits, target)
