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
#!/usr/bin/env python3
"""
Tests for the attention distillation module and the student objective
"""

import math
import os
import sys

import pytest
import torch

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from distill import (AttentionDistillationModule, DistillWeights, FeatureSet, attention_distill_loss,
                     attention_from_scores, attention_weights, branch_distill_loss, channel_pool,
                     output_distill_loss, resize_pooled, resize_student, row_entropy, student_objective)
from dsrlab_errors import NonFiniteLoss, ShapeError


def _features(channels, sizes, role, seed=0):
    generator = torch.Generator().manual_seed(seed)
    return FeatureSet([torch.rand(2, c, *size, generator=generator, dtype=torch.float64)
                       for c, size in zip(channels, sizes)], role)


def test_single_pair_attention_is_one():
    adm = AttentionDistillationModule([4], [2], embed_dim=8).double()
    alpha = attention_weights(_features([4], [(8, 8)], "teacher-encoder"),
                              _features([2], [(4, 4)], "student-encoder"), adm)
    assert alpha.shape == (2, 1, 1)
    assert torch.equal(alpha, torch.ones(2, 1, 1, dtype=torch.float64))


def test_softmax_hand_arithmetic():
    c = 16
    z = 0.7
    equal = attention_from_scores(torch.tensor([[[z, z]]], dtype=torch.float64), c)
    torch.testing.assert_close(equal, torch.tensor([[[0.5, 0.5]]], dtype=torch.float64))
    skewed = attention_from_scores(torch.tensor([[[z + math.sqrt(c) * math.log(3), z]]], dtype=torch.float64), c)
    torch.testing.assert_close(skewed, torch.tensor([[[0.75, 0.25]]], dtype=torch.float64))


def test_attention_rows_sum_to_one():
    adm = AttentionDistillationModule([4, 4, 4], [2, 2], embed_dim=8).double()
    teacher = _features([4, 4, 4], [(16, 16), (8, 8), (4, 4)], "teacher-depth")
    student = _features([2, 2], [(16, 16), (8, 8)], "student-depth", seed=1)
    alpha = attention_weights(teacher, student, adm)
    assert alpha.shape == (2, 3, 2)
    torch.testing.assert_close(alpha.sum(dim=-1), torch.ones(2, 3, dtype=torch.float64))
    assert (alpha >= 0).all()


def test_position_term_starts_at_zero_and_learns():
    torch.manual_seed(0)
    adm = AttentionDistillationModule([4], [2, 2], embed_dim=8).double()
    assert torch.equal(adm.teacher_position, torch.zeros(1, 8, dtype=torch.float64))
    assert 0 < adm.student_position.abs().max() < 0.1
    positions = adm.teacher_position @ adm.student_position.transpose(0, 1)
    assert torch.equal(positions, torch.zeros(1, 2, dtype=torch.float64))

    teacher = _features([4], [(8, 8)], "teacher-depth")
    student = _features([2, 2], [(8, 8), (4, 4)], "student-depth", seed=1)
    alpha = attention_weights(teacher, student, adm)
    alpha[..., 0].sum().backward()
    assert adm.teacher_position.grad.abs().max() > 0


def test_attention_rejects_channel_mismatch():
    adm = AttentionDistillationModule([4], [2], embed_dim=8).double()
    with pytest.raises(ShapeError):
        attention_weights(_features([3], [(8, 8)], "teacher-encoder"), _features([2], [(8, 8)], "student-encoder"),
                          adm)


def test_attention_gradcheck():
    torch.manual_seed(0)
    adm = AttentionDistillationModule([3, 3], [2, 2], embed_dim=4).double()
    student = _features([2, 2], [(4, 4), (2, 2)], "student-encoder", seed=2)
    fixed = torch.rand(1, 3, 4, 4, dtype=torch.float64)
    teacher_feature = torch.rand(1, 3, 4, 4, dtype=torch.float64, requires_grad=True)

    def alpha_of(f):
        teacher = FeatureSet([f, fixed], "teacher-encoder")
        return adm(teacher, FeatureSet([s[:1] for s in student.features], "student-encoder"))

    assert torch.autograd.gradcheck(alpha_of, (teacher_feature,))


def test_channel_pool_examples():
    f = torch.tensor([[[[-2.0, 3.0]]]])
    torch.testing.assert_close(channel_pool(f), torch.tensor([[[[2.0, 3.0]]]]))
    pixel = torch.tensor([3.0, 4.0]).view(1, 2, 1, 1)
    assert float(channel_pool(pixel)) == pytest.approx(2.5)
    assert (channel_pool(torch.randn(2, 5, 4, 4)) >= 0).all()


def test_resize_student_identity_and_constants():
    f = torch.rand(1, 3, 6, 6)
    torch.testing.assert_close(resize_student(f, (6, 6)), channel_pool(f))
    constant = torch.full((1, 1, 4, 4), 0.3)
    torch.testing.assert_close(resize_pooled(constant, (9, 7)), torch.full((1, 1, 9, 7), 0.3))


def test_resize_matches_bilinear_closed_form_on_interior():
    ramp = torch.arange(4, dtype=torch.float64).repeat(4, 1).view(1, 1, 4, 4)
    out = resize_pooled(ramp, (8, 8))
    for x in range(1, 7):
        expected = (x + 0.5) / 2 - 0.5
        torch.testing.assert_close(out[0, 0, 3, x], torch.tensor(expected, dtype=torch.float64))


def test_branch_loss_single_pair_constant_offset():
    adm = AttentionDistillationModule([1], [1], embed_dim=4).double()
    teacher = FeatureSet([torch.ones(1, 1, 8, 8, dtype=torch.float64)], "teacher-encoder")
    student = FeatureSet([torch.full((1, 1, 4, 4), 0.5, dtype=torch.float64)], "student-encoder")
    result = branch_distill_loss(teacher, student, adm)
    assert float(result.loss) == pytest.approx(0.5, abs=1e-12)


def test_branch_loss_zero_when_all_pooled_maps_agree():
    adm = AttentionDistillationModule([2, 2], [2, 2], embed_dim=4).double()
    same = torch.full((2, 2, 8, 8), 0.4, dtype=torch.float64)
    teacher = FeatureSet([same, same.clone()], "teacher-depth")
    student = FeatureSet([same[..., :4, :4].clone(), same.clone()], "student-depth")
    assert float(branch_distill_loss(teacher, student, adm).loss) == pytest.approx(0.0, abs=1e-12)


def test_attention_distill_loss_is_half_sum():
    torch.manual_seed(0)
    adm_e = AttentionDistillationModule([2, 2], [2], embed_dim=4).double()
    adm_d = AttentionDistillationModule([2, 2], [2], embed_dim=4).double()
    enc_t = _features([2, 2], [(8, 8), (4, 4)], "teacher-encoder", seed=1)
    enc_s = _features([2], [(8, 8)], "student-encoder", seed=2)
    dep_t = _features([2, 2], [(8, 8), (4, 4)], "teacher-depth", seed=3)
    dep_s = _features([2], [(8, 8)], "student-depth", seed=4)
    result = attention_distill_loss(enc_t, enc_s, dep_t, dep_s, adm_e, adm_d)
    assert torch.equal(result.total, 0.5 * (result.encoder + result.depth))
    assert result.alpha_encoder.shape == (2, 2, 1)


def test_output_distill_loss():
    sr_t = torch.rand(1, 3, 8, 8)
    assert float(output_distill_loss(sr_t, sr_t)) == 0.0
    assert float(output_distill_loss(sr_t + 0.2, sr_t)) == pytest.approx(0.2, abs=1e-6)
    sr_s = torch.rand(1, 3, 8, 8)
    assert float(output_distill_loss(sr_s, sr_t)) == float(output_distill_loss(sr_t, sr_s))
    with pytest.raises(ShapeError):
        output_distill_loss(sr_s, torch.rand(1, 3, 4, 4))


def test_student_objective_weights():
    assert DistillWeights() == DistillWeights(rec=1.0, kd=0.5, ad=0.1)
    assert student_objective(0.0, 0.0, 0.0) == 0.0
    assert student_objective(0.2, 0.1, 0.05) == pytest.approx(0.255)
    with pytest.raises(NonFiniteLoss):
        student_objective(0.2, float('inf'), 0.0)


def test_restricted_distill_weights():
    assert DistillWeights().restricted(("rec", "ad")) == DistillWeights(rec=1.0, kd=0.0, ad=0.1)


def test_row_entropy_of_uniform_rows():
    alpha = torch.full((2, 3, 4), 0.25)
    torch.testing.assert_close(row_entropy(alpha), torch.full((3,), math.log(4)))


def test_feature_set_rejects_unknown_role():
    with pytest.raises(ShapeError):
        FeatureSet([torch.zeros(1, 1, 2, 2)], "critic")


def test_output_distill_gradcheck():
    sr_teacher = torch.rand(1, 3, 4, 4, dtype=torch.float64)
    sr_student = torch.rand(1, 3, 4, 4, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda s: output_distill_loss(s, sr_teacher), (sr_student,))
