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
Ablation trend checks, and the toy-preset ablation that has to satisfy them
"""

import json
import os
import sys

import pytest

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from dsrlab import ablation_trends, dispatch
from dsrlab_constants import RunFiles, TrainModes
from dsrlab_errors import ConfigError

TREND_NAMES = ["sr_over_bicubic", "depth_gt_over_rec_only", "depth_net_near_depth_gt", "distill_over_plain",
               "teacher_unchanged"]


def _summary(**psnr):
    values = {
        TrainModes.TEACHER_REC_ONLY: 30.0,
        TrainModes.TEACHER_DEPTH_GT: 30.4,
        TrainModes.TEACHER_REC_DEP: 30.3,
        TrainModes.STUDENT_PLAIN: 29.5,
        TrainModes.STUDENT_KD: 29.6,
        TrainModes.STUDENT_AD: 29.6,
        TrainModes.STUDENT_DISTILL: 29.8,
    }
    values.update({mode.replace("_", "-"): value for mode, value in psnr.items()})
    return [{"mode": mode, "psnr": value, "bicubic_psnr": 29.0} for mode, value in values.items()]


def _failed(trends):
    return sorted(name for name, check in trends.items() if not check["holds"])


def test_trends_hold_on_ordered_rows():
    trends = ablation_trends(_summary(), min_gain_db=0.3, tolerance_db=0.3)
    assert list(trends) == TREND_NAMES
    assert _failed(trends) == []
    assert trends["sr_over_bicubic"]["value"] == pytest.approx(1.3)
    assert trends["depth_net_near_depth_gt"]["value"] == pytest.approx(0.1)


def test_rec_only_beating_depth_gt_fails():
    trends = ablation_trends(_summary(teacher_rec_only=30.5), min_gain_db=0.3, tolerance_db=0.3)
    assert _failed(trends) == ["depth_gt_over_rec_only"]


def test_depth_net_far_from_depth_gt_fails_either_way():
    below = ablation_trends(_summary(teacher_rec_dep=30.05), min_gain_db=0.3, tolerance_db=0.3)
    assert "depth_net_near_depth_gt" in _failed(below)
    above = ablation_trends(_summary(teacher_rec_dep=30.8), min_gain_db=0.3, tolerance_db=0.3)
    assert _failed(above) == ["depth_net_near_depth_gt"]


def test_small_bicubic_gain_fails():
    trends = ablation_trends(_summary(teacher_rec_dep=29.2, teacher_depth_gt=29.2, teacher_rec_only=29.1),
                             min_gain_db=0.3, tolerance_db=0.3)
    assert _failed(trends) == ["sr_over_bicubic"]


def test_plain_student_beating_distillation_fails():
    trends = ablation_trends(_summary(student_distill=29.4), min_gain_db=0.3, tolerance_db=0.3)
    assert _failed(trends) == ["distill_over_plain"]


def test_modified_teacher_fails():
    trends = ablation_trends(_summary(), min_gain_db=0.3, tolerance_db=0.3, teacher_intact=False)
    assert _failed(trends) == ["teacher_unchanged"]


def test_trends_need_every_grid_row():
    rows = [row for row in _summary() if row["mode"] != TrainModes.TEACHER_DEPTH_GT]
    with pytest.raises(ConfigError):
        ablation_trends(rows, min_gain_db=0.3, tolerance_db=0.3)


@pytest.mark.acceptance
def test_toy_preset_ablation_reproduces_the_trends(tmp_path):
    code = dispatch(["ablate", "--out", str(tmp_path), "--preset", "toy", "--set", "loss.extractor=identity"])
    assert code == 0
    payload = json.loads((tmp_path / RunFiles.ABLATION_JSON).read_text())
    assert sorted({row["seed"] for row in payload["runs"]}) == [0, 1, 2]
    failed = {name: check for name, check in payload["trends"].items() if not check["holds"]}
    assert failed == {}
