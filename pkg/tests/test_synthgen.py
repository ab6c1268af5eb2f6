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
Tests for the pipe scene renderer, bicubic resampling and the dataset format
"""

import json
import math
import os
import sys

from fractions import Fraction

import numpy as np
import pytest
import torch
import torch.nn.functional as F

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from dsrlab_constants import DatasetFiles
from dsrlab_errors import CorruptDataset, InvalidScale, InvalidScene, MissingManifest, ShapeError
from synthgen import (SampleTensorDataset, SceneParams, bicubic_resample, dataset_read, dataset_write,
                      generate_dataset, generate_records, ray_cylinder_depth, render_frame, resize_weights,
                      split_records, synthesize_sample)


def _centered(radius=0.5, **kwargs):
    return SceneParams(pipe_radius=radius, camera_position=(0.0, 0.0, 2.0), texture_seed=11, **kwargs)


def _cubic(x, a=-0.5):
    x = abs(x)
    if x <= 1:
        return (a + 2) * x ** 3 - (a + 3) * x ** 2 + 1
    if x <= 2:
        return a * x ** 3 - 5 * a * x ** 2 + 8 * a * x - 4 * a
    return 0.0


def _shrink_oracle(signal, factor):
    """Antialiased bicubic shrink of a 1-D signal by an integer factor, one tap at a time"""
    n = len(signal)
    out = []
    for x in range(1, n // factor + 1):
        u = x * factor + 0.5 * (1 - factor)
        taps = range(math.floor(u - 2 * factor), math.ceil(u + 2 * factor) + 1)
        weights = [_cubic((u - j) / factor) / factor for j in taps]
        values = [signal[min(max(j, 1), n) - 1] for j in taps]
        out.append(sum(w * v for w, v in zip(weights, values)) / sum(weights))
    return np.array(out)


def test_render_frame_contract():
    """A 448x320 request gives a 448x320x3 image in [0, 1] and positive depth"""
    image, depth = render_frame(_centered(), width=320, height=448)
    assert image.shape == (448, 320, 3)
    assert depth.shape == (448, 320, 1)
    assert image.min() >= 0.0 and image.max() <= 1.0
    assert (depth > 0).all()


def test_render_frame_depth_is_radially_symmetric_on_axis():
    _, depth = render_frame(_centered(), width=40, height=32)
    np.testing.assert_allclose(depth[..., 0], depth[::-1, ::-1, 0], rtol=1e-6)


def test_ray_cylinder_depth_at_45_degrees():
    direction = np.array([[1.0, 0.0, 1.0]]) / math.sqrt(2.0)
    z_distance, t = ray_cylinder_depth((0.0, 0.0, 0.0), direction, (0.0, 0.0, 1.0), radius=0.3, far_clip=8.0)
    assert z_distance[0] == pytest.approx(0.3, abs=1e-12)
    assert t[0] == pytest.approx(0.3 * math.sqrt(2.0), abs=1e-12)


def test_ray_along_axis_is_clipped_to_far_plane():
    z_distance, t = ray_cylinder_depth((0.0, 0.0, 0.0), np.array([[0.0, 0.0, 1.0]]), (0.0, 0.0, 1.0),
                                       radius=0.3, far_clip=8.0)
    assert math.isinf(t[0])
    assert z_distance[0] == 8.0


def test_camera_outside_pipe_is_rejected():
    params = SceneParams(pipe_radius=0.3, camera_position=(0.5, 0.0, 0.0))
    with pytest.raises(InvalidScene):
        render_frame(params, width=8, height=8)


def test_scene_params_dict_round_trip():
    params = SceneParams.from_seed(5, 2)
    params.validate()
    assert SceneParams.from_dict(params.to_dict()) == params


def test_synthesize_sample_dimensions():
    record = synthesize_sample(_centered(), hr_size=(64, 48))
    assert record.hr.shape == (64, 48, 3)
    assert record.ref.shape == (64, 48, 3)
    assert record.lr.shape == (16, 12, 3)
    assert record.ref_down.shape == (16, 12, 3)
    assert record.depth_lr_gt.shape == (16, 12, 1)
    assert record.depth_refdown_gt.shape == (16, 12, 1)


def test_zero_camera_step_reference_equals_hr():
    record = synthesize_sample(_centered(), camera_step=0.0, hr_size=(32, 32))
    assert np.array_equal(record.ref, record.hr)
    assert np.array_equal(record.ref_down, record.lr)


def test_hr_size_must_divide_by_scale():
    with pytest.raises(ShapeError):
        synthesize_sample(_centered(), hr_size=(30, 32))


def test_bicubic_preserves_constant_images():
    image = np.full((12, 8, 3), 0.37)
    for scale in (Fraction(1, 4), Fraction(1, 2), 2, 4):
        out = bicubic_resample(image, scale)
        np.testing.assert_allclose(out, 0.37, atol=1e-12)


def test_bicubic_scale_one_is_identity():
    image = np.random.default_rng(0).random((9, 7, 3))
    out = bicubic_resample(image, 1)
    assert np.array_equal(out, image)


def test_bicubic_ramp_matches_kernel_sum_oracle():
    ramp = np.tile(np.arange(8, dtype=np.float64) / 7.0, (8, 1))
    out = bicubic_resample(ramp, Fraction(1, 4))
    expected_row = _shrink_oracle(ramp[0], 4)
    assert out.shape == (2, 2)
    np.testing.assert_allclose(out, np.tile(expected_row, (2, 1)), atol=1e-12)


def test_bicubic_shrink_filters_the_whole_footprint():
    stripes = np.tile((np.arange(32) % 4 == 0).astype(np.float64), (8, 1))
    out = bicubic_resample(stripes, Fraction(1, 4))
    # interior columns see every phase of the period-4 pattern with equal weight
    np.testing.assert_allclose(out[:, 2:6], 0.25, atol=1e-9)
    plain = F.interpolate(torch.from_numpy(stripes)[None, None], size=(2, 8), mode='bicubic',
                          align_corners=False)[0, 0].numpy()
    assert np.abs(plain[:, 2:6] - 0.25).min() > 0.1


def test_bicubic_rejects_non_integral_target():
    with pytest.raises(InvalidScale):
        bicubic_resample(np.zeros((10, 10)), Fraction(1, 4))


def test_bicubic_on_tensors_keeps_leading_dims():
    x = torch.rand(2, 3, 8, 8, dtype=torch.float64)
    assert bicubic_resample(x, 4, clip=False).shape == (2, 3, 32, 32)


def test_resize_weight_rows_sum_to_one():
    for in_len, out_len in ((8, 2), (4, 16), (10, 10), (7, 3)):
        weights = resize_weights(in_len, out_len)
        torch.testing.assert_close(weights.sum(dim=1), torch.ones(out_len, dtype=torch.float64))


def test_dataset_round_trip(tmp_path):
    records = generate_records(3, seed=1, hr_size=(32, 24))
    manifest = dataset_write(records, tmp_path / "data")
    assert manifest["num_samples"] == 3
    assert [s["id"] for s in manifest["samples"]] == ["00000", "00001", "00002"]
    loaded = dataset_read(tmp_path / "data")
    assert loaded == records


def test_dataset_read_without_manifest(tmp_path):
    with pytest.raises(MissingManifest):
        dataset_read(tmp_path)


def test_rewriting_a_smaller_dataset_drops_stale_samples(tmp_path):
    dataset_write(generate_records(3, seed=1, hr_size=(32, 24)), tmp_path)
    smaller = generate_records(1, seed=2, hr_size=(32, 24))
    manifest = dataset_write(smaller, tmp_path)
    assert manifest["num_samples"] == 1
    assert sorted(p.name for p in (tmp_path / DatasetFiles.SAMPLES_DIR).iterdir()) == ["00000"]
    assert dataset_read(tmp_path) == smaller


def test_dataset_read_detects_tampering(tmp_path):
    records = generate_records(1, seed=2, hr_size=(32, 24))
    dataset_write(records, tmp_path)
    target = tmp_path / DatasetFiles.SAMPLES_DIR / "00000" / DatasetFiles.DEPTH_LR
    data = bytearray(target.read_bytes())
    data[0] ^= 0xFF
    target.write_bytes(bytes(data))
    with pytest.raises(CorruptDataset):
        dataset_read(tmp_path)


def test_generate_dataset_is_bitwise_reproducible(tmp_path):
    generate_dataset(2, 7, tmp_path / "a", hr_size=(32, 24))
    generate_dataset(2, 7, tmp_path / "b", hr_size=(32, 24))
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    manifest = json.loads((tmp_path / "a" / DatasetFiles.MANIFEST).read_text())
    assert manifest["seed"] == 7


def test_worker_count_does_not_change_records():
    single = generate_records(2, seed=4, hr_size=(32, 24), workers=1)
    pooled = generate_records(2, seed=4, hr_size=(32, 24), workers=2)
    assert single == pooled


def test_split_records_holds_out_the_tail():
    records = list(range(10))
    train, held_out = split_records(records, 0.2)
    assert train == list(range(8))
    assert held_out == [8, 9]
    assert split_records(records[:3], 0.1) == ([0, 1], [2])
    assert split_records(records, 0.0) == (records, [])


def test_tensor_dataset_is_channel_first():
    record = synthesize_sample(_centered(), hr_size=(32, 24))
    item = SampleTensorDataset([record])[0]
    assert item["hr"].shape == (3, 32, 24)
    assert item["lr"].shape == (3, 8, 6)
    assert item["depth_lr"].shape == (1, 8, 6)
    assert item["hr"].dtype == torch.float32
