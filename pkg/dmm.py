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
Depth Matching Module

Depth encoder, depth information fusion and depth-based reference image
matching (DRIMM). Matching is exhaustive: every block of the fused LR map
picks its best Ref↓ block by the cosine score of the block's center patch,
then every patch inside the block picks its best patch inside that Ref↓
block. The winning Ref patches are gathered at scales 1, 2 and 4, weighted
by the upsampled score map and folded back with overlaps averaged.

Argmax ties always resolve to the lowest linear index.
"""

# Standard library imports
import json
import logging

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

# Third-party imports
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

# Local imports
from backbone import PYRAMID_SCALES, Encoder, EncoderConfig, FeaturePyramid, check_same_shape, conv3x3
from dsrlab_constants import Defaults
from dsrlab_errors import ConfigError, CorruptMatch, ShapeError
from synthgen import bicubic_resample

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MatchConfig:
    """Block and patch geometry of the matching stage"""
    patch: int = 3
    block_w: int = 8
    block_h: int = 8
    stride: int = 1
    eps: float = Defaults.MATCH_EPS
    coarse_search_stride: int = 1

    def __post_init__(self):
        if self.patch < 1 or self.patch % 2 == 0:
            raise ConfigError(f"patch must be a positive odd integer, got {self.patch}")
        if self.stride < 1 or self.stride > self.patch or self.coarse_search_stride < 1:
            raise ConfigError(f"invalid strides in {self}")
        if self.block_w < 1 or self.block_h < 1:
            raise ConfigError(f"block size must be positive, got {self.block_h}x{self.block_w}")
        if not self.eps > 0:
            raise ConfigError(f"eps must be > 0, got {self.eps}")

    @property
    def padding(self) -> int:
        """Edge padding that keeps patch centers on the grid"""
        return (self.patch - self.stride) // 2

    def patch_grid(self, height: int, width: int) -> Tuple[int, int]:
        """Number of patch positions along each axis of a height x width block"""
        span_h = height + 2 * self.padding - self.patch
        span_w = width + 2 * self.padding - self.patch
        if span_h < 0 or span_w < 0 or span_h % self.stride or span_w % self.stride:
            raise ShapeError(
                f"patch {self.patch} / stride {self.stride} does not tile a {height}x{width} block"
            )
        return span_h // self.stride + 1, span_w // self.stride + 1

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class CoarseSelection:
    """Per-block crops chosen by coarse_block_select for one sample"""
    lr_origins: torch.Tensor          # (K, 2) top-left (y, x) of each LR block
    ref_origins: torch.Tensor         # (K, 2) top-left (y, x) of the chosen Ref↓ block
    lr_blocks: torch.Tensor           # (K, C, dy, dx)
    refdown_blocks: torch.Tensor      # (K, C, dy, dx)
    ref_blocks: Dict[int, torch.Tensor]   # s -> (K, C, s*dy, s*dx)
    center_scores: torch.Tensor       # (K,) cosine score of the winning center match
    block_grid: Tuple[int, int]       # (H/dy, W/dx)

    def triples(self) -> List[Tuple[torch.Tensor, torch.Tensor, Dict[int, torch.Tensor]]]:
        """(B_LR, B_Ref↓, {B_Ref^s}) per block"""
        return [
            (self.lr_blocks[k], self.refdown_blocks[k], {s: b[k] for s, b in self.ref_blocks.items()})
            for k in range(self.lr_blocks.shape[0])
        ]


@dataclass
class MatchResult:
    """Index and score maps of every block; index in [0, J-1], score in [-1, 1]"""
    index: torch.Tensor       # (K, I) long
    score: torch.Tensor       # (K, I)
    patch_grid: Tuple[int, int]


# ----------------------------------------------------------------------------
# Depth encoder and fusion
# ----------------------------------------------------------------------------

class DepthEncoder(Encoder):
    """Encoder whose first convolution consumes a single depth channel"""

    def __init__(self, cfg: EncoderConfig):
        super().__init__(cfg, in_channels=1)

    def forward(self, depth: torch.Tensor) -> FeaturePyramid:
        if depth.dim() != 4 or depth.shape[1] != 1:
            raise ShapeError(f"depth encoder expects N x 1 x H x W, got {tuple(depth.shape)}")
        return super().forward(depth)


def depth_encode(encoder: DepthEncoder, depth: torch.Tensor) -> FeaturePyramid:
    """Depth feature pyramid on the same grids as the image encoder"""
    return encoder(depth)


class FusionSet(nn.Module):
    """concat -> conv3x3/s1 -> ReLU -> deconv3x3/s2 -> ReLU; doubles the grid"""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = conv3x3(2 * channels, channels)
        self.deconv = nn.ConvTranspose2d(channels, channels, kernel_size=3, stride=2, padding=1, output_padding=1)

    def forward(self, d_feat: torch.Tensor, f_feat: torch.Tensor) -> torch.Tensor:
        if d_feat.shape[-2:] != f_feat.shape[-2:]:
            raise ShapeError(
                f"fusion inputs on different grids: {tuple(d_feat.shape[-2:])} vs {tuple(f_feat.shape[-2:])}"
            )
        x = F.relu(self.conv(torch.cat([d_feat, f_feat], dim=1)))
        return F.relu(self.deconv(x))


def fuse(fusion: FusionSet, d_feat: torch.Tensor, f_feat: torch.Tensor) -> torch.Tensor:
    return fusion(d_feat, f_feat)


class DepthFusion(nn.Module):
    """
    One fusion set per pyramid level, composed coarse to fine. The 1x
    output is added to the 2x features, the 2x output to the 4x features,
    and the 4x output is average-pooled back onto the matching grid.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.adjust = nn.ModuleDict({str(s): nn.Conv2d(channels, channels, kernel_size=1) for s in PYRAMID_SCALES})
        self.sets = nn.ModuleDict({str(s): FusionSet(channels) for s in PYRAMID_SCALES})

    def forward(self, depth_feats: FeaturePyramid, feats: FeaturePyramid) -> torch.Tensor:
        carry = None
        for s in PYRAMID_SCALES:
            f = self.adjust[str(s)](feats[s])
            if carry is not None:
                f = f + carry
            carry = self.sets[str(s)](depth_feats[s], f)
        return F.avg_pool2d(carry, kernel_size=2)


# ----------------------------------------------------------------------------
# Matching
# ----------------------------------------------------------------------------

def normalized_cosine(p: torch.Tensor, q: torch.Tensor, eps: float = Defaults.MATCH_EPS) -> torch.Tensor:
    """Cosine similarity of two vectors; a zero vector scores 0"""
    if p.shape != q.shape:
        raise ShapeError(f"cosine of vectors with shapes {tuple(p.shape)} and {tuple(q.shape)}")
    p = F.normalize(p.flatten(), dim=0, eps=eps)
    q = F.normalize(q.flatten(), dim=0, eps=eps)
    return torch.dot(p, q).clamp(-1.0, 1.0)


def extract_patches(x: torch.Tensor, patch: int, stride: int, padding: int) -> torch.Tensor:
    """(N, C, H, W) -> (N, C*patch*patch, L) with replicated borders"""
    if padding:
        x = F.pad(x, (padding, padding, padding, padding), mode='replicate')
    return F.unfold(x, kernel_size=patch, stride=stride)


def _unit_patches(x: torch.Tensor, cfg: MatchConfig, stride: int, padding: int) -> torch.Tensor:
    return F.normalize(extract_patches(x, cfg.patch, stride, padding), dim=1, eps=cfg.eps)


def coarse_block_select(f_lr: torch.Tensor, f_refdown: torch.Tensor, ref_pyramid: Dict[int, torch.Tensor],
                        cfg: MatchConfig) -> CoarseSelection:
    """
    Pick one Ref↓ block per LR block

    Args:
        f_lr: (1, C, H, W) fused LR features on the matching grid
        f_refdown: (1, C, H, W) fused Ref↓ features on the same grid
        ref_pyramid: s -> (1, C, s*H, s*W) Ref encoder features
        cfg: matching geometry; block_h/block_w must divide H/W

    Returns:
        CoarseSelection with the LR, Ref↓ and scaled Ref crops of every block
    """
    check_same_shape(f_lr, f_refdown, "coarse_block_select inputs")
    if f_lr.dim() != 4 or f_lr.shape[0] != 1:
        raise ShapeError(f"coarse_block_select works on one sample, got {tuple(f_lr.shape)}")
    _, channels, height, width = f_lr.shape
    dy, dx = cfg.block_h, cfg.block_w
    if height % dy or width % dx:
        raise ShapeError(f"blocks {dy}x{dx} do not divide the matching grid {height}x{width}")
    for s, level in ref_pyramid.items():
        if tuple(level.shape[-2:]) != (s * height, s * width):
            raise ShapeError(f"reference level {s} is {tuple(level.shape[-2:])}, expected {(s * height, s * width)}")

    n_by, n_bx = height // dy, width // dx
    by = torch.arange(n_by).repeat_interleave(n_bx)
    bx = torch.arange(n_bx).repeat(n_by)
    centers = (by * dy + dy // 2) * width + (bx * dx + dx // 2)

    half = cfg.patch // 2
    lr_patches = _unit_patches(f_lr, cfg, stride=1, padding=half)[0]              # (CPP, H*W)
    search = cfg.coarse_search_stride
    ref_patches = _unit_patches(f_refdown, cfg, stride=search, padding=half)[0]   # (CPP, J)
    search_w = (width + 2 * half - cfg.patch) // search + 1

    scores = (lr_patches[:, centers].transpose(0, 1) @ ref_patches).clamp(-1.0, 1.0)
    best = scores.argmax(dim=1)
    best_score = torch.gather(scores, 1, best.unsqueeze(1)).squeeze(1)
    center_y = (best // search_w) * search
    center_x = (best % search_w) * search
    ref_y = (center_y - dy // 2).clamp(0, height - dy)
    ref_x = (center_x - dx // 2).clamp(0, width - dx)

    lr_blocks, refdown_blocks = [], []
    ref_blocks = {s: [] for s in ref_pyramid}
    for k in range(by.numel()):
        y0, x0 = int(by[k]) * dy, int(bx[k]) * dx
        ry, rx = int(ref_y[k]), int(ref_x[k])
        lr_blocks.append(f_lr[0, :, y0:y0 + dy, x0:x0 + dx])
        refdown_blocks.append(f_refdown[0, :, ry:ry + dy, rx:rx + dx])
        for s, level in ref_pyramid.items():
            ref_blocks[s].append(level[0, :, s * ry:s * (ry + dy), s * rx:s * (rx + dx)])

    return CoarseSelection(
        lr_origins=torch.stack([by * dy, bx * dx], dim=1),
        ref_origins=torch.stack([ref_y, ref_x], dim=1),
        lr_blocks=torch.stack(lr_blocks),
        refdown_blocks=torch.stack(refdown_blocks),
        ref_blocks={s: torch.stack(blocks) for s, blocks in ref_blocks.items()},
        center_scores=best_score,
        block_grid=(n_by, n_bx),
    )


def fine_match(b_lr: torch.Tensor, b_refdown: torch.Tensor, cfg: MatchConfig) -> MatchResult:
    """
    Best Ref↓ patch for every LR patch inside each block

    Args:
        b_lr: (K, C, dy, dx) LR blocks
        b_refdown: (K, C, dy, dx) selected Ref↓ blocks
        cfg: patch size and stride

    Returns:
        MatchResult with index (K, I) and score (K, I)
    """
    check_same_shape(b_lr, b_refdown, "fine_match blocks")
    grid = cfg.patch_grid(*b_lr.shape[-2:])
    p = _unit_patches(b_lr, cfg, cfg.stride, cfg.padding)          # (K, CPP, I)
    q = _unit_patches(b_refdown, cfg, cfg.stride, cfg.padding)     # (K, CPP, J)
    scores = torch.bmm(p.transpose(1, 2), q).clamp(-1.0, 1.0)       # (K, I, J)
    index = scores.argmax(dim=2)
    score = torch.gather(scores, 2, index.unsqueeze(2)).squeeze(2)
    return MatchResult(index=index, score=score, patch_grid=grid)


def _tile(blocks: torch.Tensor, block_grid: Tuple[int, int]) -> torch.Tensor:
    """(K, C, h, w) blocks in raster order -> (1, C, n_by*h, n_bx*w)"""
    n_by, n_bx = block_grid
    k, c, h, w = blocks.shape
    if k != n_by * n_bx:
        raise ShapeError(f"{k} blocks cannot tile a {n_by}x{n_bx} grid")
    tiled = blocks.reshape(n_by, n_bx, c, h, w).permute(2, 0, 3, 1, 4)
    return tiled.reshape(1, c, n_by * h, n_bx * w)


def gather_weight_fold(ref_blocks: Dict[int, torch.Tensor], match: MatchResult, cfg: MatchConfig,
                       block_grid: Tuple[int, int]) -> Dict[int, torch.Tensor]:
    """
    Assemble aligned reference features from the matched patches

    For each scale s the N-th (s-scaled) patch of every Ref block is placed at
    its LR slot, overlapping contributions are averaged, and the block is
    multiplied by the bicubic-upsampled score map.

    Args:
        ref_blocks: s -> (K, C, s*dy, s*dx)
        match: index/score maps from fine_match
        cfg: patch geometry used for matching
        block_grid: (rows, cols) of blocks in the LR map

    Returns:
        s -> (1, C, s*H, s*W) aligned reference features
    """
    grid_h, grid_w = match.patch_grid
    out = {}
    for s, blocks in ref_blocks.items():
        k, channels, height, width = blocks.shape
        kernel, step, pad = s * cfg.patch, s * cfg.stride, s * cfg.padding
        patches = extract_patches(blocks, kernel, step, pad)        # (K, C*kk, J)
        n_patches = patches.shape[2]
        if match.index.numel() and (int(match.index.min()) < 0 or int(match.index.max()) >= n_patches):
            raise CorruptMatch(
                f"match index range [{int(match.index.min())}, {int(match.index.max())}] "
                f"outside [0, {n_patches - 1}]"
            )
        index = match.index.unsqueeze(1).expand(k, patches.shape[1], match.index.shape[1])
        gathered = torch.gather(patches, 2, index)
        padded_size = (height + 2 * pad, width + 2 * pad)
        summed = F.fold(gathered, padded_size, kernel_size=kernel, stride=step)
        counts = F.fold(torch.ones_like(gathered), padded_size, kernel_size=kernel, stride=step)
        assembled = (summed / counts)[..., pad:pad + height, pad:pad + width]

        score = match.score.reshape(k, 1, grid_h, grid_w)
        weight = bicubic_resample(score, size=(height, width), clip=False)
        out[s] = _tile(assembled * weight, block_grid)
    return out


def match_and_fold(fused_lr: torch.Tensor, fused_refdown: torch.Tensor, ref_pyramid: Dict[int, torch.Tensor],
                   cfg: MatchConfig) -> Tuple[Dict[int, torch.Tensor], List[CoarseSelection], List[MatchResult]]:
    """Coarse selection, fine matching and gather/fold for a batch, one sample at a time"""
    outputs = {s: [] for s in ref_pyramid}
    selections, matches = [], []
    for i in range(fused_lr.shape[0]):
        pyramid_i = {s: level[i:i + 1] for s, level in ref_pyramid.items()}
        selection = coarse_block_select(fused_lr[i:i + 1], fused_refdown[i:i + 1], pyramid_i, cfg)
        match = fine_match(selection.lr_blocks, selection.refdown_blocks, cfg)
        folded = gather_weight_fold(selection.ref_blocks, match, cfg, selection.block_grid)
        for s in outputs:
            outputs[s].append(folded[s])
        selections.append(selection)
        matches.append(match)
    return {s: torch.cat(levels) for s, levels in outputs.items()}, selections, matches


@dataclass
class DMMOutput:
    """Decoder-ready tensors plus the intermediate products used by logging and distillation"""
    fused_lr: torch.Tensor
    fused_refdown: torch.Tensor
    matched: Dict[int, torch.Tensor]
    depth_feats: FeaturePyramid
    selections: List[CoarseSelection]
    matches: List[MatchResult]


class DepthMatchingModule(nn.Module):
    """Depth encoder + fusion (shared by LR and Ref↓) + DRIMM"""

    def __init__(self, encoder_cfg: EncoderConfig, match_cfg: MatchConfig):
        super().__init__()
        self.match_cfg = match_cfg
        self.depth_encoder = DepthEncoder(encoder_cfg)
        self.fusion = DepthFusion(encoder_cfg.base_channels)

    def forward(self, lr_feats: FeaturePyramid, refdown_feats: FeaturePyramid, ref_feats: FeaturePyramid,
                depth_lr: torch.Tensor, depth_refdown: torch.Tensor) -> DMMOutput:
        depth_lr_feats = depth_encode(self.depth_encoder, depth_lr)
        depth_refdown_feats = depth_encode(self.depth_encoder, depth_refdown)
        fused_lr = self.fusion(depth_lr_feats, lr_feats)
        fused_refdown = self.fusion(depth_refdown_feats, refdown_feats)
        matched, selections, matches = match_and_fold(fused_lr, fused_refdown, ref_feats.as_dict(), self.match_cfg)
        return DMMOutput(
            fused_lr=fused_lr,
            fused_refdown=fused_refdown,
            matched=matched,
            depth_feats=depth_lr_feats,
            selections=selections,
            matches=matches,
        )


def dmm_forward(dmm: DepthMatchingModule, lr_feats: FeaturePyramid, refdown_feats: FeaturePyramid,
                ref_feats: FeaturePyramid, depth_lr: torch.Tensor, depth_refdown: torch.Tensor) -> DMMOutput:
    return dmm(lr_feats, refdown_feats, ref_feats, depth_lr, depth_refdown)


# ----------------------------------------------------------------------------
# Debug dumps
# ----------------------------------------------------------------------------

def _write_f32(path: Path, tensor: torch.Tensor) -> None:
    path.write_bytes(np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype='<f4').tobytes(order='C'))


def dump_matches(selection: CoarseSelection, match: MatchResult, out_dir,
                 fused_lr: Optional[torch.Tensor] = None, fused_refdown: Optional[torch.Tensor] = None) -> Path:
    """
    Write match_k{k}.json per block (block coordinates, index and score maps)
    and raw float32 dumps of the fused features for offline cross-checks
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for k in range(match.index.shape[0]):
        payload = {
            "block": k,
            "lr_origin": [int(v) for v in selection.lr_origins[k]],
            "refdown_origin": [int(v) for v in selection.ref_origins[k]],
            "block_size": list(selection.lr_blocks.shape[-2:]),
            "patch_grid": list(match.patch_grid),
            "center_score": float(selection.center_scores[k]),
            "index": match.index[k].tolist(),
            "score": match.score[k].detach().cpu().tolist(),
        }
        (out / f"match_k{k}.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding='utf-8')

    shapes = {}
    for name, tensor in (("fused_lr", fused_lr), ("fused_refdown", fused_refdown)):
        if tensor is not None:
            _write_f32(out / f"{name}.f32", tensor)
            shapes[name] = list(tensor.shape)
    if shapes:
        (out / "features.json").write_text(json.dumps(shapes, indent=2, sort_keys=True) + "\n", encoding='utf-8')
    logger.debug(f"Dumped {match.index.shape[0]} block matches to {out}")
    return out
