#!/usr/bin/env python3
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
"""
Attention-Based Distillation

The attention distillation module (ADM) scores every (teacher feature,
student feature) pair from globally pooled query/key vectors; the softmax
over student features weights per-pair distances between channel-pooled
maps. Output distillation is a plain L1 between student and teacher SR.
"""

# Standard library imports
import logging
import math

from dataclasses import dataclass, fields
from typing import Dict, List, NamedTuple, Sequence, Tuple

# Third-party imports
import torch
import torch.nn as nn
import torch.nn.functional as F

# Local imports
from backbone import check_same_shape
from dsrlab_errors import ShapeError
from losses import check_finite, rms_distance

logger = logging.getLogger(__name__)

ROLES = ("teacher-encoder", "student-encoder", "teacher-depth", "student-depth")
# one factor of the position product must start off zero or neither ever moves
POSITION_INIT_STD = 1e-2


@dataclass
class FeatureSet:
    """Ordered feature maps tapped from one network branch"""
    features: List[torch.Tensor]
    role: str

    def __post_init__(self):
        if not self.features:
            raise ShapeError(f"feature set {self.role!r} is empty")
        if self.role not in ROLES:
            raise ShapeError(f"unknown feature set role {self.role!r}")

    def __len__(self) -> int:
        return len(self.features)

    @property
    def channels(self) -> List[int]:
        return [f.shape[1] for f in self.features]

    @property
    def sizes(self) -> List[Tuple[int, int]]:
        return [tuple(f.shape[-2:]) for f in self.features]


@dataclass(frozen=True)
class DistillWeights:
    rec: float = 1.0
    kd: float = 0.5
    ad: float = 0.1

    @classmethod
    def from_config(cls, section: Dict) -> 'DistillWeights':
        return cls(**{f.name: float(section[f.name]) for f in fields(cls) if f.name in section})

    def restricted(self, terms: Sequence[str]) -> 'DistillWeights':
        return DistillWeights(**{f.name: getattr(self, f.name) if f.name in terms else 0.0 for f in fields(self)})


class BranchDistillLoss(NamedTuple):
    loss: torch.Tensor
    alpha: torch.Tensor


class AttentionDistillLoss(NamedTuple):
    total: torch.Tensor
    encoder: torch.Tensor
    depth: torch.Tensor
    alpha_encoder: torch.Tensor
    alpha_depth: torch.Tensor


def attention_from_scores(scores: torch.Tensor, embed_dim: int) -> torch.Tensor:
    """Scaled softmax over the last (student) axis"""
    return torch.softmax(scores / math.sqrt(embed_dim), dim=-1)


class AttentionDistillationModule(nn.Module):
    """
    Query/key projections for one branch

    One query transform per teacher feature, one key transform and one
    pairing transform per student feature, and learned position embeddings.
    Teacher embeddings start at zero and student embeddings at small random
    values, so the positional term is zero at initialization but still
    receives gradients. Linear maps are 1x1 convolutions on pooled vectors.
    """

    def __init__(self, teacher_channels: Sequence[int], student_channels: Sequence[int], embed_dim: int = 64):
        super().__init__()
        if embed_dim < 1:
            raise ShapeError(f"embed_dim must be positive, got {embed_dim}")
        self.embed_dim = embed_dim
        self.teacher_channels = list(teacher_channels)
        self.student_channels = list(student_channels)
        self.query = nn.ModuleList(nn.Conv2d(c, embed_dim, kernel_size=1) for c in teacher_channels)
        self.key = nn.ModuleList(nn.Conv2d(c, embed_dim, kernel_size=1) for c in student_channels)
        self.pair = nn.ModuleList(nn.Conv2d(embed_dim, embed_dim, kernel_size=1, bias=False)
                                  for _ in student_channels)
        self.teacher_position = nn.Parameter(torch.zeros(len(teacher_channels), embed_dim))
        self.student_position = nn.Parameter(torch.zeros(len(student_channels), embed_dim))
        nn.init.normal_(self.student_position, std=POSITION_INIT_STD)

    def _check(self, teacher: FeatureSet, student: FeatureSet) -> None:
        if teacher.channels != self.teacher_channels or student.channels != self.student_channels:
            raise ShapeError(
                f"ADM built for channels {self.teacher_channels}/{self.student_channels}, "
                f"got {teacher.channels}/{student.channels}"
            )

    def scores(self, teacher: FeatureSet, student: FeatureSet) -> torch.Tensor:
        """Unscaled logits, (batch, M, N)"""
        self._check(teacher, student)
        queries = torch.stack([
            F.relu(w(F.adaptive_avg_pool2d(f, 1))).flatten(1) for w, f in zip(self.query, teacher.features)
        ], dim=1)                                                            # (B, M, c)
        keys = torch.stack([
            pair(F.relu(w(F.adaptive_avg_pool2d(f, 1)))).flatten(1)
            for w, pair, f in zip(self.key, self.pair, student.features)
        ], dim=1)                                                            # (B, N, c)
        positions = self.teacher_position @ self.student_position.transpose(0, 1)
        return queries @ keys.transpose(1, 2) + positions

    def forward(self, teacher: FeatureSet, student: FeatureSet) -> torch.Tensor:
        return attention_from_scores(self.scores(teacher, student), self.embed_dim)


def attention_weights(teacher: FeatureSet, student: FeatureSet, adm: AttentionDistillationModule) -> torch.Tensor:
    """alpha of shape (batch, M, N); every row sums to one"""
    return adm(teacher, student)


def channel_pool(f: torch.Tensor) -> torch.Tensor:
    """Per-pixel L2 norm across channels divided by the channel count, (N, 1, H, W)"""
    if f.dim() != 4 or f.shape[1] < 1:
        raise ShapeError(f"channel_pool expects N x C x H x W, got {tuple(f.shape)}")
    return torch.linalg.vector_norm(f, ord=2, dim=1, keepdim=True) / f.shape[1]


def resize_pooled(pooled: torch.Tensor, size: Tuple[int, int]) -> torch.Tensor:
    if tuple(pooled.shape[-2:]) == tuple(size):
        return pooled
    return F.interpolate(pooled, size=tuple(size), mode='bilinear', align_corners=False)


def resize_student(f_s: torch.Tensor, size: Tuple[int, int]) -> torch.Tensor:
    """Channel-pool a student feature, then bilinearly resize it to size"""
    if size[0] < 1 or size[1] < 1:
        raise ShapeError(f"target size must be positive, got {size}")
    return resize_pooled(channel_pool(f_s), size)


def branch_distill_loss(teacher: FeatureSet, student: FeatureSet,
                        adm: AttentionDistillationModule) -> BranchDistillLoss:
    """Sum over (m, n) of alpha[m, n] times the distance of the pooled maps, averaged over the batch"""
    alpha = attention_weights(teacher, student, adm)
    batch = alpha.shape[0]
    total = alpha.new_zeros(())
    for b in range(batch):
        for m, f_t in enumerate(teacher.features):
            pooled_t = channel_pool(f_t[b:b + 1])
            for n, f_s in enumerate(student.features):
                pooled_s = resize_student(f_s[b:b + 1], pooled_t.shape[-2:])
                total = total + alpha[b, m, n] * rms_distance(pooled_t, pooled_s)
    return BranchDistillLoss(loss=total / batch, alpha=alpha)


def attention_distill_loss(enc_t: FeatureSet, enc_s: FeatureSet, dep_t: FeatureSet, dep_s: FeatureSet,
                           adm_encoder: AttentionDistillationModule,
                           adm_depth: AttentionDistillationModule) -> AttentionDistillLoss:
    """Half the sum of the encoder-branch and depth-branch losses"""
    encoder = branch_distill_loss(enc_t, enc_s, adm_encoder)
    depth = branch_distill_loss(dep_t, dep_s, adm_depth)
    return AttentionDistillLoss(
        total=0.5 * (encoder.loss + depth.loss),
        encoder=encoder.loss,
        depth=depth.loss,
        alpha_encoder=encoder.alpha,
        alpha_depth=depth.alpha,
    )


def output_distill_loss(sr_student: torch.Tensor, sr_teacher: torch.Tensor) -> torch.Tensor:
    check_same_shape(sr_student, sr_teacher, "output_distill_loss")
    return F.l1_loss(sr_student, sr_teacher)


def student_objective(l_rec, l_kd, l_ad, weights: DistillWeights = DistillWeights()):
    """lambda_rec * l_rec + lambda_kd * l_kd + lambda_ad * l_ad"""
    check_finite({"rec": l_rec, "kd": l_kd, "ad": l_ad})
    return weights.rec * l_rec + weights.kd * l_kd + weights.ad * l_ad


def row_entropy(alpha: torch.Tensor) -> torch.Tensor:
    """Entropy (nats) of every attention row, averaged over the batch: (M,)"""
    alpha = alpha.detach()
    entropy = -(alpha * torch.log(alpha.clamp_min(1e-12))).sum(dim=-1)
    return entropy.mean(dim=0) if entropy.dim() > 1 else entropy
