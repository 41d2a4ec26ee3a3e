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

"""Attention-contrastive distillation from a frozen teacher into a student encoder

A batch of stitched images passes through a frozen teacher encoder and a trainable
student encoder. Each set of batch embeddings is recalibrated by a multi-head
self-attention over the batch (:class:`EmbeddingAttention`), and the student is pulled
towards the teacher's embedding of the same image and away from past teacher
embeddings held in a :class:`NegativeQueue` (:func:`infonce_loss`). The supervised
head is trained on the student's raw embeddings with cross-entropy, and the two
objectives are summed with weights ``alpha`` and ``beta``.

The teacher receives no updates of any kind.
"""

from __future__ import annotations

import copy

from typing import NamedTuple, Optional, Tuple, Union

import param
import torch

from torch import nn
from torch.nn import functional as F

from .heads import TaskHead
from .params import MomaParams

__all__ = [
    "build_encoder",
    "ConvEncoder",
    "DistillLossReport",
    "EmbeddingAttention",
    "infonce_loss",
    "MomaDistiller",
    "NegativeQueue",
    "parameter_checksum",
]

_logger = param.get_logger(name="t3kit.moma")


class ConvEncoder(nn.Module):
    """Four strided conv blocks, global average pooling, and a linear projection

    Block ``i`` has ``width * 2 ** i`` channels and halves the spatial size.
    """

    def __init__(self, embed_dim: int = 256, width: int = 16):
        super().__init__()
        self.embed_dim = embed_dim
        layers, in_ = [], 3
        for i in range(4):
            out = width * 2**i
            layers += [
                nn.Conv2d(in_, out, 3, stride=2, padding=1),
                nn.GroupNorm(min(8, out), out),
                nn.SiLU(),
            ]
            in_ = out
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.proj = nn.Linear(in_, embed_dim)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.proj(self.pool(self.features(images)).flatten(1))


def build_encoder(params: MomaParams, seed: Optional[int] = None) -> ConvEncoder:
    """Construct an encoder, its initial weights drawn under `seed` if set"""
    if seed is None:
        return ConvEncoder(params.embed_dim, params.encoder_width)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return ConvEncoder(params.embed_dim, params.encoder_width)


class EmbeddingAttention(nn.Module):
    """Residual multi-head self-attention over the rows of a batch, then L2 norm

    Each of the ``B`` embeddings of a ``(B, d)`` batch is one token:
    ``out = normalize(x + MHSA(x, x, x))``.
    """

    def __init__(self, embed_dim: int, num_heads: int = 4):
        super().__init__()
        self.attn = nn.MultiheadAttention(embed_dim, num_heads, batch_first=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 2 or x.size(0) < 1:
            raise ValueError(f"expected a (B, d) batch with B >= 1, got {x.shape}")
        tokens = x.unsqueeze(0)
        out, _ = self.attn(tokens, tokens, tokens, need_weights=False)
        return F.normalize(x + out.squeeze(0), dim=-1)


class NegativeQueue(nn.Module):
    """A first-in-first-out ring buffer of ``capacity`` embeddings of width ``dim``

    The buffer and its fill/head counters are module buffers, so they follow the
    module through :func:`torch.nn.Module.to` and ``state_dict``.
    """

    def __init__(self, capacity: int, dim: int):
        super().__init__()
        if capacity < 1:
            raise ValueError(f"capacity must be positive, got {capacity}")
        self.capacity, self.dim = capacity, dim
        self.register_buffer("store", torch.zeros(capacity, dim))
        self.register_buffer("fill_", torch.zeros((), dtype=torch.long))
        self.register_buffer("head_", torch.zeros((), dtype=torch.long))

    @property
    def fill(self) -> int:
        return int(self.fill_)

    @property
    def head(self) -> int:
        """Index of the slot the next row is written to"""
        return int(self.head_)

    def __len__(self) -> int:
        return self.fill

    @torch.no_grad()
    def enqueue(self, rows: torch.Tensor) -> None:
        """Append rows, evicting the oldest past capacity"""
        if rows.dim() != 2 or rows.size(1) != self.dim:
            raise ValueError(
                f"expected rows of width {self.dim}, got shape {tuple(rows.shape)}"
            )
        rows = rows.detach().to(self.store)
        m = rows.size(0)
        if m >= self.capacity:
            self.store.copy_(rows[-self.capacity :])
            self.head_.fill_(0)
            self.fill_.fill_(self.capacity)
            return
        pos = (self.head + torch.arange(m, device=self.store.device)) % self.capacity
        self.store[pos] = rows
        self.head_.fill_((self.head + m) % self.capacity)
        self.fill_.fill_(min(self.fill + m, self.capacity))

    def contents(self) -> torch.Tensor:
        """The stored rows, oldest first"""
        if self.fill < self.capacity:
            return self.store[: self.fill]
        return torch.cat([self.store[self.head :], self.store[: self.head]])

    def extra_repr(self) -> str:
        return f"capacity={self.capacity}, dim={self.dim}, fill={self.fill}"


def _check_unit_norm(x: torch.Tensor, which: str, atol: float = 1e-5):
    norms = x.norm(dim=-1)
    if not torch.allclose(norms, torch.ones_like(norms), atol=atol, rtol=0):
        raise ValueError(f"{which} embeddings are not unit-normalized")


def infonce_loss(
    student: torch.Tensor,
    teacher: torch.Tensor,
    negatives: Union[NegativeQueue, torch.Tensor],
    temperature: float = 0.07,
    check_normalized: bool = True,
) -> torch.Tensor:
    """Contrastive loss of student embeddings against teacher positives and negatives

    For row ``i``, with ``s_pos = <student_i, teacher_i>`` and ``s_j`` the similarity
    of ``student_i`` to negative ``j``, the loss is

    ``-log(exp(s_pos / tau) / (exp(s_pos / tau) + sum_j exp(s_j / tau)))``

    averaged over rows. The positive is part of the denominator.

    Raises
    ------
    ValueError
        If there are no negatives, shapes disagree, or (when `check_normalized`) an
        input row is not unit length
    """
    if isinstance(negatives, NegativeQueue):
        negatives = negatives.contents()
    if negatives.dim() != 2 or negatives.size(0) == 0:
        raise ValueError("infonce_loss needs at least one negative")
    if student.shape != teacher.shape:
        raise ValueError(
            f"student {tuple(student.shape)} and teacher {tuple(teacher.shape)} "
            "shapes differ"
        )
    if negatives.size(1) != student.size(1):
        raise ValueError(
            f"negatives have width {negatives.size(1)}, embeddings {student.size(1)}"
        )
    if check_normalized:
        _check_unit_norm(student, "student")
        _check_unit_norm(teacher, "teacher")
        _check_unit_norm(negatives, "negative")
    l_pos = (student * teacher).sum(-1, keepdim=True)
    l_neg = student @ negatives.to(student).T
    logits = torch.cat([l_pos, l_neg], 1) / temperature
    target = torch.zeros(logits.size(0), dtype=torch.long, device=logits.device)
    return F.cross_entropy(logits, target)


class DistillLossReport(NamedTuple):
    """Loss components of one step. ``total = alpha * ce + beta * infonce``"""

    ce: float
    infonce: float
    total: float
    alpha: float
    beta: float


class MomaDistiller(nn.Module):
    """A frozen teacher and a trainable student, joined by attention and a queue

    Parameters
    ----------
    teacher
        Frozen on construction
    head
    params
    student
        Defaults to a copy of `teacher`
    """

    def __init__(
        self,
        teacher: ConvEncoder,
        head: TaskHead,
        params: MomaParams,
        student: Optional[ConvEncoder] = None,
    ):
        super().__init__()
        self.params = params
        self.teacher = teacher
        self.teacher.requires_grad_(False)
        self.teacher.eval()
        if student is None:
            student = copy.deepcopy(teacher)
        self.student = student.requires_grad_(True)
        self.head = head
        d = teacher.embed_dim
        self.student_attention = EmbeddingAttention(d, params.attention_heads)
        self.teacher_attention = EmbeddingAttention(d, params.attention_heads)
        self.queue = NegativeQueue(params.queue_length, d)

    def train(self, mode: bool = True) -> "MomaDistiller":
        super().train(mode)
        self.teacher.eval()
        return self

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """Head logits of the student. Batch attention is not used at inference"""
        return self.head(self.student(images))

    @torch.no_grad()
    def teacher_embeddings(self, images: torch.Tensor) -> torch.Tensor:
        return self.teacher(images)

    def losses(
        self, images: torch.Tensor, targets: torch.Tensor
    ) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
        """Compute ``(total, ce, infonce, attended teacher embeddings)``

        Does not step or enqueue.
        """
        student = self.student(images)
        ce = self.head.supervised_loss(self.head(student), targets)
        teacher = self.teacher_attention(self.teacher_embeddings(images))
        nce = infonce_loss(
            self.student_attention(student),
            teacher,
            self.queue,
            self.params.temperature,
        )
        total = self.params.alpha * ce + self.params.beta * nce
        return total, ce, nce, teacher

    def warm_up(self, images: torch.Tensor) -> None:
        """Enqueue the attended teacher embeddings of `images` if the queue is empty"""
        if self.queue.fill:
            return
        with torch.no_grad():
            self.queue.enqueue(self.teacher_attention(self.teacher_embeddings(images)))
        _logger.debug(f"warmed up negative queue with {self.queue.fill} rows")

    def train_step(
        self,
        images: torch.Tensor,
        targets: torch.Tensor,
        optimizer: torch.optim.Optimizer,
    ) -> DistillLossReport:
        """One optimizer step on the joint objective, then enqueue teacher embeddings"""
        self.train()
        self.warm_up(images)
        total, ce, nce, teacher = self.losses(images, targets)
        optimizer.zero_grad()
        total.backward()
        optimizer.step()
        self.queue.enqueue(teacher.detach())
        alpha, beta = self.params.alpha, self.params.beta
        ce, nce = ce.detach().item(), nce.detach().item()
        return DistillLossReport(ce, nce, alpha * ce + beta * nce, alpha, beta)

    def trainable_parameters(self):
        return (p for p in self.parameters() if p.requires_grad)


def parameter_checksum(module: nn.Module) -> float:
    """A float64 checksum over every parameter and buffer of `module`"""
    total = torch.zeros((), dtype=torch.float64)
    for i, t in enumerate(module.state_dict().values()):
        total += (t.detach().double().flatten() * (i + 1)).sum()
        total += t.detach().double().abs().sum()
    return float(total)
