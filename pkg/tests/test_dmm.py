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
Tests for depth fusion and the two-stage block/patch matching
"""

import json
import math
import os
import sys

import pytest
import torch
import torch.nn.functional as F

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from backbone import EncoderConfig, FeaturePyramid
from dmm import (DepthEncoder, DepthMatchingModule, FusionSet, MatchConfig, MatchResult, coarse_block_select,
                 depth_encode, dmm_forward, dump_matches, extract_patches, fine_match, fuse, gather_weight_fold,
                 normalized_cosine)
from dsrlab_errors import ConfigError, CorruptMatch, ShapeError

TOY_ENCODER = EncoderConfig(base_channels=4, res_blocks_per_stage=1)


def _distinct(channels, height, width, seed=0):
    """Random features; with continuous values every patch is distinct"""
    generator = torch.Generator().manual_seed(seed)
    return torch.rand(1, channels, height, width, generator=generator, dtype=torch.float64) + 0.1


def _brute_force_match(b_lr, b_ref, cfg):
    """Per-patch argmax over explicitly enumerated patches, first maximum wins"""
    k_blocks = b_lr.shape[0]
    index = torch.zeros(k_blocks, b_lr.shape[2] * b_lr.shape[3], dtype=torch.long)
    score = torch.zeros(index.shape, dtype=b_lr.dtype)
    p_all = extract_patches(b_lr, cfg.patch, cfg.stride, cfg.padding)
    q_all = extract_patches(b_ref, cfg.patch, cfg.stride, cfg.padding)
    for k in range(k_blocks):
        for i in range(p_all.shape[2]):
            best, best_j = -math.inf, 0
            for j in range(q_all.shape[2]):
                r = float(normalized_cosine(p_all[k, :, i], q_all[k, :, j], cfg.eps))
                if r > best:
                    best, best_j = r, j
            index[k, i] = best_j
            score[k, i] = best
    return index, score


def test_normalized_cosine_examples():
    assert float(normalized_cosine(torch.tensor([1.0, 0.0]), torch.tensor([1.0, 1.0]))) == \
        pytest.approx(1 / math.sqrt(2), abs=1e-6)
    assert float(normalized_cosine(torch.zeros(3), torch.tensor([1.0, 2.0, 3.0]))) == 0.0
    assert float(normalized_cosine(torch.tensor([2.0, 1.0]), torch.tensor([4.0, 2.0]))) == pytest.approx(1.0)


def test_normalized_cosine_rejects_length_mismatch():
    with pytest.raises(ShapeError):
        normalized_cosine(torch.ones(2), torch.ones(3))


def test_match_config_validation():
    with pytest.raises(ConfigError):
        MatchConfig(patch=2)
    with pytest.raises(ConfigError):
        MatchConfig(stride=5, patch=3)


def test_depth_encode_grids():
    encoder = DepthEncoder(TOY_ENCODER)
    pyramid = depth_encode(encoder, torch.rand(1, 1, 112, 80))
    assert pyramid.f4.shape[-2:] == (112, 80)
    assert pyramid.f2.shape[-2:] == (56, 40)
    assert pyramid.f1.shape[-2:] == (28, 20)


def test_depth_encode_rejects_rgb():
    with pytest.raises(ShapeError):
        depth_encode(DepthEncoder(TOY_ENCODER), torch.rand(1, 3, 16, 16))


def test_fuse_doubles_the_grid():
    fusion = FusionSet(4)
    out = fuse(fusion, torch.rand(1, 4, 28, 20), torch.rand(1, 4, 28, 20))
    assert out.shape == (1, 4, 56, 40)


def test_fuse_rejects_grid_mismatch():
    with pytest.raises(ShapeError):
        fuse(FusionSet(4), torch.rand(1, 4, 28, 20), torch.rand(1, 4, 14, 10))


def test_coarse_select_identity():
    cfg = MatchConfig(block_h=4, block_w=4)
    f = _distinct(3, 8, 12)
    pyramid = {s: _distinct(3, 8 * s, 12 * s, seed=s) for s in (1, 2, 4)}
    selection = coarse_block_select(f, f.clone(), pyramid, cfg)
    assert selection.block_grid == (2, 3)
    assert torch.equal(selection.ref_origins, selection.lr_origins)
    assert torch.allclose(selection.center_scores, torch.ones(6, dtype=torch.float64))
    triples = selection.triples()
    assert len(triples) == 6
    b_lr, b_ref, ref_blocks = triples[4]
    assert torch.equal(b_lr, f[0, :, 4:8, 4:8])
    assert torch.equal(ref_blocks[2], pyramid[2][0, :, 8:16, 8:16])


def test_coarse_select_ties_take_lowest_index():
    cfg = MatchConfig(block_h=2, block_w=2)
    f_lr = _distinct(2, 4, 4)
    f_ref = torch.ones(1, 2, 4, 4, dtype=torch.float64)
    pyramid = {s: torch.zeros(1, 2, 4 * s, 4 * s, dtype=torch.float64) for s in (1, 2, 4)}
    selection = coarse_block_select(f_lr, f_ref, pyramid, cfg)
    # every Ref↓ patch is identical: the first center (0, 0) wins, clamped to the top-left block
    assert torch.equal(selection.ref_origins, torch.zeros(4, 2, dtype=torch.long))


def test_coarse_select_rejects_non_dividing_blocks():
    cfg = MatchConfig(block_h=3, block_w=3)
    f = _distinct(2, 8, 8)
    pyramid = {s: _distinct(2, 8 * s, 8 * s) for s in (1, 2, 4)}
    with pytest.raises(ShapeError):
        coarse_block_select(f, f, pyramid, cfg)


def test_fine_match_identity():
    cfg = MatchConfig(block_h=4, block_w=4)
    blocks = _distinct(3, 4, 4).expand(2, 3, 4, 4).contiguous()
    result = fine_match(blocks, blocks.clone(), cfg)
    assert result.patch_grid == (4, 4)
    assert torch.equal(result.index, torch.arange(16).expand(2, 16))
    assert torch.allclose(result.score, torch.ones(2, 16, dtype=torch.float64))


def test_fine_match_agrees_with_brute_force():
    cfg = MatchConfig(block_h=4, block_w=5)
    b_lr = torch.cat([_distinct(2, 4, 5, seed=s) for s in range(3)])
    b_ref = torch.cat([_distinct(2, 4, 5, seed=10 + s) for s in range(3)])
    result = fine_match(b_lr, b_ref, cfg)
    index, score = _brute_force_match(b_lr, b_ref, cfg)
    assert torch.equal(result.index, index)
    torch.testing.assert_close(result.score, score)
    assert ((result.score >= -1) & (result.score <= 1)).all()


def test_gather_fold_identity_reconstruction():
    cfg = MatchConfig(patch=1, block_h=2, block_w=2)
    ref_blocks = {s: _distinct(3, 2 * s, 2 * s, seed=s).expand(4, 3, 2 * s, 2 * s).contiguous() for s in (1, 2, 4)}
    match = MatchResult(index=torch.arange(4).expand(4, 4).contiguous(),
                        score=torch.ones(4, 4, dtype=torch.float64), patch_grid=(2, 2))
    out = gather_weight_fold(ref_blocks, match, cfg, block_grid=(2, 2))
    for s in (1, 2, 4):
        block = ref_blocks[s][0]
        expected = block.repeat(1, 2, 2).unsqueeze(0)
        torch.testing.assert_close(out[s], expected)


def test_gather_fold_two_patch_scatter_oracle():
    cfg = MatchConfig(patch=1, block_h=1, block_w=2)
    ref = torch.tensor([[[[3.0, 5.0]]]], dtype=torch.float64)     # (K=1, C=1, 1, 2)
    match = MatchResult(index=torch.tensor([[1, 1]]), score=torch.tensor([[0.5, 0.5]], dtype=torch.float64),
                        patch_grid=(1, 2))
    out = gather_weight_fold({1: ref}, match, cfg, block_grid=(1, 1))

    accumulated = torch.zeros(2, dtype=torch.float64)
    counts = torch.zeros(2, dtype=torch.float64)
    for i, j in enumerate(match.index[0].tolist()):
        accumulated[i] += ref[0, 0, 0, j]
        counts[i] += 1
    expected = 0.5 * accumulated / counts
    torch.testing.assert_close(out[1][0, 0, 0], expected)
    torch.testing.assert_close(out[1][0, 0, 0], torch.tensor([2.5, 2.5], dtype=torch.float64))


def test_gather_fold_rejects_out_of_range_index():
    cfg = MatchConfig(patch=1, block_h=1, block_w=2)
    match = MatchResult(index=torch.tensor([[0, 2]]), score=torch.ones(1, 2, dtype=torch.float64), patch_grid=(1, 2))
    with pytest.raises(CorruptMatch):
        gather_weight_fold({1: torch.zeros(1, 1, 1, 2, dtype=torch.float64)}, match, cfg, block_grid=(1, 1))


def test_dmm_forward_shapes():
    torch.manual_seed(0)
    dmm = DepthMatchingModule(TOY_ENCODER, MatchConfig(block_h=8, block_w=8))
    lr_feats = FeaturePyramid(f1=torch.rand(1, 4, 4, 4), f2=torch.rand(1, 4, 8, 8), f4=torch.rand(1, 4, 16, 16))
    refdown_feats = FeaturePyramid(f1=torch.rand(1, 4, 4, 4), f2=torch.rand(1, 4, 8, 8), f4=torch.rand(1, 4, 16, 16))
    ref_feats = FeaturePyramid(f1=torch.rand(1, 4, 16, 16), f2=torch.rand(1, 4, 32, 32), f4=torch.rand(1, 4, 64, 64))
    with torch.no_grad():
        out = dmm_forward(dmm, lr_feats, refdown_feats, ref_feats, torch.rand(1, 1, 16, 16), torch.rand(1, 1, 16, 16))
    assert out.fused_lr.shape == (1, 4, 16, 16)
    assert out.matched[1].shape == (1, 4, 16, 16)
    assert out.matched[2].shape == (1, 4, 32, 32)
    assert out.matched[4].shape == (1, 4, 64, 64)
    assert len(out.selections) == 1 and out.matches[0].index.shape == (4, 64)


def test_identical_lr_and_refdown_reassemble_the_reference():
    cfg = MatchConfig(patch=1, block_h=4, block_w=4)
    f = _distinct(3, 8, 8)
    pyramid = {s: _distinct(3, 8 * s, 8 * s, seed=s) for s in (1, 2, 4)}
    selection = coarse_block_select(f, f.clone(), pyramid, cfg)
    match = fine_match(selection.lr_blocks, selection.refdown_blocks, cfg)
    out = gather_weight_fold(selection.ref_blocks, match, cfg, selection.block_grid)
    for s in (1, 2, 4):
        torch.testing.assert_close(out[s], pyramid[s])


def test_dump_matches_writes_block_files(tmp_path):
    cfg = MatchConfig(block_h=4, block_w=4)
    f = _distinct(2, 8, 8)
    pyramid = {s: _distinct(2, 8 * s, 8 * s) for s in (1, 2, 4)}
    selection = coarse_block_select(f, f, pyramid, cfg)
    match = fine_match(selection.lr_blocks, selection.refdown_blocks, cfg)
    dump_matches(selection, match, tmp_path, fused_lr=f)
    assert sorted(p.name for p in tmp_path.glob("match_k*.json")) == [f"match_k{k}.json" for k in range(4)]
    payload = json.loads((tmp_path / "match_k3.json").read_text())
    assert payload["lr_origin"] == [4, 4]
    assert len(payload["index"]) == 16
    assert (tmp_path / "fused_lr.f32").stat().st_size == 2 * 8 * 8 * 4


def _oracle_patches(x, patch, stride, padding):
    """(C, H, W) -> (L, C*patch*patch) by explicit window slicing"""
    if padding:
        x = torch.nn.functional.pad(x.unsqueeze(0), (padding,) * 4, mode='replicate')[0]
    _, height, width = x.shape
    windows = []
    for y in range(0, height - patch + 1, stride):
        for x0 in range(0, width - patch + 1, stride):
            windows.append(x[:, y:y + patch, x0:x0 + patch].reshape(-1))
    return torch.stack(windows)


def _oracle_best(queries, candidates):
    scores = torch.nn.functional.cosine_similarity(queries.unsqueeze(1), candidates.unsqueeze(0), dim=2)
    return scores.argmax(dim=1), scores.max(dim=1).values


def test_matching_agrees_with_oracle_on_random_instances():
    generator = torch.Generator().manual_seed(1234)

    def draw(*choices):
        return choices[int(torch.randint(len(choices), (1,), generator=generator))]

    for _ in range(1000):
        patch = draw(1, 3)
        dy, dx = draw(2, 4), draw(2, 4, 8)
        height, width = dy * draw(1, 2, 4), dx * draw(1, 2)
        channels = draw(2, 5, 8)
        cfg = MatchConfig(patch=patch, block_h=dy, block_w=dx)
        f_lr = torch.rand(1, channels, height, width, generator=generator, dtype=torch.float64) - 0.3
        f_ref = torch.rand(1, channels, height, width, generator=generator, dtype=torch.float64) - 0.3

        selection = coarse_block_select(f_lr, f_ref, {1: f_ref}, cfg)
        half = patch // 2
        lr_windows = _oracle_patches(f_lr[0], patch, 1, half)
        centers = [(by * dy + dy // 2) * width + (bx * dx + dx // 2)
                   for by in range(height // dy) for bx in range(width // dx)]
        best, score = _oracle_best(lr_windows[centers], _oracle_patches(f_ref[0], patch, 1, half))
        ref_y = (best // width - dy // 2).clamp(0, height - dy)
        ref_x = (best % width - dx // 2).clamp(0, width - dx)
        assert torch.equal(selection.ref_origins, torch.stack([ref_y, ref_x], dim=1))
        torch.testing.assert_close(selection.center_scores, score, rtol=1e-5, atol=1e-12)

        match = fine_match(selection.lr_blocks, selection.refdown_blocks, cfg)
        for k in range(selection.lr_blocks.shape[0]):
            best, score = _oracle_best(_oracle_patches(selection.lr_blocks[k], patch, cfg.stride, cfg.padding),
                                       _oracle_patches(selection.refdown_blocks[k], patch, cfg.stride, cfg.padding))
            assert torch.equal(match.index[k], best)
            torch.testing.assert_close(match.score[k], score, rtol=1e-5, atol=1e-12)


def test_fuse_gradcheck():
    torch.manual_seed(0)
    fusion = FusionSet(2).double()
    d_feat = torch.rand(1, 2, 3, 3, dtype=torch.float64, requires_grad=True)
    f_feat = torch.rand(1, 2, 3, 3, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda d, f: fuse(fusion, d, f), (d_feat, f_feat))


def test_gather_fold_gradcheck_with_frozen_indices():
    cfg = MatchConfig(patch=3, block_h=3, block_w=3)
    generator = torch.Generator().manual_seed(5)
    index = torch.randint(9, (2, 9), generator=generator)
    ref_1 = torch.rand(2, 2, 3, 3, generator=generator, dtype=torch.float64, requires_grad=True)
    ref_2 = torch.rand(2, 2, 6, 6, generator=generator, dtype=torch.float64, requires_grad=True)
    score = torch.rand(2, 9, generator=generator, dtype=torch.float64, requires_grad=True)

    def folded(a, b, r):
        out = gather_weight_fold({1: a, 2: b}, MatchResult(index=index, score=r, patch_grid=(3, 3)), cfg, (1, 2))
        return out[1], out[2]

    assert torch.autograd.gradcheck(folded, (ref_1, ref_2, score))


def _blocks(k_blocks, channels, size, seed):
    generator = torch.Generator().manual_seed(seed)
    return torch.rand(k_blocks, channels, size, size, generator=generator, dtype=torch.float64) - 0.5


def test_permuting_reference_patches_permutes_the_index():
    cfg = MatchConfig(patch=1, block_h=4, block_w=4)
    b_lr, b_ref = _blocks(3, 5, 4, seed=1), _blocks(3, 5, 4, seed=2)
    perm = torch.randperm(16, generator=torch.Generator().manual_seed(3))
    # with 1x1 patches a shuffle of the pixels is a shuffle of the patches
    shuffled = b_ref.flatten(2)[:, :, perm].reshape(b_ref.shape)
    before = fine_match(b_lr, b_ref, cfg)
    after = fine_match(b_lr, shuffled, cfg)
    assert torch.equal(perm[after.index], before.index)
    assert torch.allclose(after.score, before.score, atol=1e-12)
    assert torch.allclose(after.score.flatten().sort().values, before.score.flatten().sort().values, atol=1e-12)


@pytest.mark.parametrize("lr_factor,ref_factor", [(2.0, 0.25), (1024.0, 0.125), (3.7, 0.013)])
def test_matching_ignores_feature_magnitude(lr_factor, ref_factor):
    cfg = MatchConfig(patch=3, block_h=4, block_w=4)
    f_lr, f_refdown = _distinct(4, 8, 8, seed=4), _distinct(4, 8, 8, seed=5)
    pyramid = {1: _distinct(4, 8, 8, seed=6)}
    coarse = coarse_block_select(f_lr, f_refdown, pyramid, cfg)
    scaled = coarse_block_select(lr_factor * f_lr, ref_factor * f_refdown, pyramid, cfg)
    assert torch.equal(scaled.ref_origins, coarse.ref_origins)
    assert torch.allclose(scaled.center_scores, coarse.center_scores, atol=1e-12)

    b_lr, b_ref = _blocks(2, 4, 6, seed=7), _blocks(2, 4, 6, seed=8)
    fine = fine_match(b_lr, b_ref, cfg)
    scaled_fine = fine_match(lr_factor * b_lr, ref_factor * b_ref, cfg)
    assert torch.equal(scaled_fine.index, fine.index)
    assert torch.allclose(scaled_fine.score, fine.score, atol=1e-12)


def test_perturbation_below_the_margin_keeps_the_argmax():
    cfg = MatchConfig(patch=3, block_h=8, block_w=8)
    b_lr, b_ref = _blocks(4, 6, 8, seed=9), _blocks(4, 6, 8, seed=10)
    noise = 1e-5 * torch.randn(b_lr.shape, generator=torch.Generator().manual_seed(11), dtype=torch.float64)

    p = extract_patches(b_lr, cfg.patch, cfg.stride, cfg.padding)
    q = F.normalize(extract_patches(b_ref, cfg.patch, cfg.stride, cfg.padding), dim=1)
    top2 = torch.bmm(F.normalize(p, dim=1).transpose(1, 2), q).topk(2, dim=2).values
    margin = top2[..., 0] - top2[..., 1]
    # a relative change r moves every cosine by at most 2r, so a gap above 4r survives
    ratio = extract_patches(noise, cfg.patch, cfg.stride, cfg.padding).norm(dim=1) / p.norm(dim=1)
    safe = margin > 4 * ratio + 1e-9
    assert safe.float().mean() > 0.5

    before = fine_match(b_lr, b_ref, cfg)
    after = fine_match(b_lr + noise, b_ref, cfg)
    assert torch.equal(after.index[safe], before.index[safe])
