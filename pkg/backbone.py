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
Backbone Networks

The trainable networks outside the depth matching module: the depth
extraction U-Net, the three-stage feature encoder (also used as depth
encoder with a single input channel), the SR decoder and the relativistic
discriminator. Tensors are NCHW.
"""

# Standard library imports
import logging

from dataclasses import asdict, dataclass
from typing import Dict, List, Tuple

# Third-party imports
import torch
import torch.nn as nn
import torch.nn.functional as F

# Local imports
from dsrlab_errors import ConfigError, ShapeError
from synthgen import bicubic_resample

logger = logging.getLogger(__name__)

PYRAMID_SCALES = (1, 2, 4)


@dataclass(frozen=True)
class EncoderConfig:
    """Encoder and depth encoder width/depth"""
    base_channels: int = 64
    res_blocks_per_stage: int = 4
    stages: int = 3

    def __post_init__(self):
        if self.stages != 3:
            raise ConfigError(f"encoder stages are fixed at 3, got {self.stages}")
        if not 1 <= self.res_blocks_per_stage <= 8:
            raise ConfigError(f"res_blocks_per_stage must be in 1..8, got {self.res_blocks_per_stage}")
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be positive, got {self.base_channels}")

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass(frozen=True)
class DepthNetConfig:
    """Depth extraction U-Net"""
    unet_depth: int = 4
    base_channels: int = 32

    def __post_init__(self):
        if self.unet_depth < 1 or self.base_channels < 1:
            raise ConfigError(f"invalid depth net config {self}")

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class FeaturePyramid:
    """Encoder stage outputs; f_s lives on s times the coarsest grid"""
    f1: torch.Tensor
    f2: torch.Tensor
    f4: torch.Tensor

    def __getitem__(self, scale: int) -> torch.Tensor:
        return {1: self.f1, 2: self.f2, 4: self.f4}[scale]

    def stages(self) -> List[torch.Tensor]:
        """Features in the order the encoder produces them (finest first)"""
        return [self.f4, self.f2, self.f1]

    def as_dict(self) -> Dict[int, torch.Tensor]:
        return {1: self.f1, 2: self.f2, 4: self.f4}


def check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    """Raise ShapeError unless a and b have identical shapes"""
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape {tuple(a.shape)} does not match {tuple(b.shape)}")


def conv3x3(in_channels: int, out_channels: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(in_channels, out_channels, kernel_size=3, stride=stride, padding=1)


class ResidualBlock(nn.Module):
    """conv3x3 -> ReLU -> conv3x3, plus identity"""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = conv3x3(channels, channels)
        self.conv2 = conv3x3(channels, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.conv2(F.relu(self.conv1(x)))


def _stage(in_channels: int, out_channels: int, stride: int, blocks: int) -> nn.Sequential:
    layers = [conv3x3(in_channels, out_channels, stride), nn.ReLU()]
    layers += [ResidualBlock(out_channels) for _ in range(blocks)]
    return nn.Sequential(*layers)


class Encoder(nn.Module):
    """
    Three feature extraction stages, each a convolution followed by
    res_blocks_per_stage residual blocks

    Stage 1 keeps the input grid (f4), stages 2 and 3 halve it (f2, f1).
    """

    def __init__(self, cfg: EncoderConfig, in_channels: int = 3):
        super().__init__()
        self.cfg = cfg
        self.in_channels = in_channels
        c = cfg.base_channels
        self.stage1 = _stage(in_channels, c, 1, cfg.res_blocks_per_stage)
        self.stage2 = _stage(c, c, 2, cfg.res_blocks_per_stage)
        self.stage3 = _stage(c, c, 2, cfg.res_blocks_per_stage)

    def forward(self, img: torch.Tensor) -> FeaturePyramid:
        if img.dim() != 4 or img.shape[1] != self.in_channels:
            raise ShapeError(f"encoder expects N x {self.in_channels} x H x W, got {tuple(img.shape)}")
        height, width = img.shape[-2:]
        if height % 4 or width % 4:
            raise ShapeError(f"encoder input {height}x{width} is not divisible by 4")
        f4 = self.stage1(img)
        f2 = self.stage2(f4)
        f1 = self.stage3(f2)
        return FeaturePyramid(f1=f1, f2=f2, f4=f4)


def encode(encoder: Encoder, img: torch.Tensor) -> FeaturePyramid:
    """Three-scale feature pyramid of img"""
    return encoder(img)


class DepthNet(nn.Module):
    """
    Encoder-decoder with skip connections mapping an RGB image to a
    strictly positive single-channel depth map of the same size
    """

    def __init__(self, cfg: DepthNetConfig):
        super().__init__()
        self.cfg = cfg
        widths = [min(cfg.base_channels * 2 ** i, cfg.base_channels * 8) for i in range(cfg.unet_depth + 1)]
        self.stem = nn.Sequential(conv3x3(3, widths[0]), nn.ReLU(), conv3x3(widths[0], widths[0]), nn.ReLU())
        self.down = nn.ModuleList(
            nn.Sequential(conv3x3(widths[i], widths[i + 1], stride=2), nn.ReLU(),
                          conv3x3(widths[i + 1], widths[i + 1]), nn.ReLU())
            for i in range(cfg.unet_depth)
        )
        self.up = nn.ModuleList(
            nn.ConvTranspose2d(widths[i + 1], widths[i], kernel_size=2, stride=2)
            for i in reversed(range(cfg.unet_depth))
        )
        self.merge = nn.ModuleList(
            nn.Sequential(conv3x3(2 * widths[i], widths[i]), nn.ReLU())
            for i in reversed(range(cfg.unet_depth))
        )
        self.head = nn.Conv2d(widths[0], 1, kernel_size=3, padding=1)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        factor = 2 ** self.cfg.unet_depth
        if img.shape[-2] % factor or img.shape[-1] % factor:
            raise ShapeError(f"depth net input {tuple(img.shape[-2:])} is not divisible by {factor}")
        x = self.stem(img)
        skips = [x]
        for block in self.down:
            x = block(x)
            skips.append(x)
        skips.pop()
        for up, merge in zip(self.up, self.merge):
            x = merge(torch.cat([up(x), skips.pop()], dim=1))
        return F.softplus(self.head(x))


def depth_extract(net: DepthNet, lr: torch.Tensor, ref_down: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Depth maps of LR and Ref↓ from the same network"""
    check_same_shape(lr, ref_down, "depth_extract inputs")
    return net(lr), net(ref_down)


class Upsample2x(nn.Module):
    """Sub-pixel convolution doubling the grid"""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = conv3x3(channels, 4 * channels)
        self.shuffle = nn.PixelShuffle(2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(self.shuffle(self.conv(x)))


class Decoder(nn.Module):
    """
    Three stages over the 1x, 2x and 4x grids: concatenate the matched
    reference level, project, run residual blocks, then upsample (first two
    stages) or project to RGB (last). The bicubic x4 LR is added back.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        c = cfg.base_channels
        self.merge = nn.ModuleList(conv3x3(2 * c, c) for _ in PYRAMID_SCALES)
        self.blocks = nn.ModuleList(
            nn.Sequential(*[ResidualBlock(c) for _ in range(cfg.res_blocks_per_stage)]) for _ in PYRAMID_SCALES
        )
        self.upsample = nn.ModuleList(Upsample2x(c) for _ in PYRAMID_SCALES[:-1])
        self.to_rgb = conv3x3(c, 3)

    def forward(self, fused_lr: torch.Tensor, matched: Dict[int, torch.Tensor], lr: torch.Tensor) -> torch.Tensor:
        height, width = fused_lr.shape[-2:]
        if tuple(lr.shape[-2:]) != (height, width):
            raise ShapeError(f"LR grid {tuple(lr.shape[-2:])} differs from fused grid {(height, width)}")
        for scale in PYRAMID_SCALES:
            expected = (scale * height, scale * width)
            if tuple(matched[scale].shape[-2:]) != expected:
                raise ShapeError(
                    f"matched level {scale} is {tuple(matched[scale].shape[-2:])}, expected {expected}"
                )
        x = fused_lr
        for i, scale in enumerate(PYRAMID_SCALES):
            x = F.relu(self.merge[i](torch.cat([x, matched[scale]], dim=1)))
            x = self.blocks[i](x)
            if i < len(self.upsample):
                x = self.upsample[i](x)
        return self.to_rgb(x) + bicubic_resample(lr, 4, clip=False)


def decode(decoder: Decoder, fused_lr: torch.Tensor, matched: Dict[int, torch.Tensor],
           lr: torch.Tensor) -> torch.Tensor:
    """SR image at four times the LR grid"""
    return decoder(fused_lr, matched, lr)


class Discriminator(nn.Module):
    """
    Relativistic discriminator: a shared critic C scores each image and
    D(a, b) = sigmoid(C(a) - C(b))
    """

    def __init__(self, channels: int = 32):
        super().__init__()
        widths = [3, channels, 2 * channels, 4 * channels, 8 * channels, 8 * channels]
        layers = []
        for c_in, c_out in zip(widths[:-1], widths[1:]):
            layers += [nn.Conv2d(c_in, c_out, kernel_size=3, stride=2, padding=1), nn.LeakyReLU(0.2)]
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(widths[-1], 1)

    def critic(self, x: torch.Tensor) -> torch.Tensor:
        """Scalar realism score per image"""
        pooled = self.features(x).mean(dim=(2, 3))
        return self.head(pooled).squeeze(1)

    def logit(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        check_same_shape(a, b, "discriminator inputs")
        return self.critic(a) - self.critic(b)

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logit(a, b))


def discriminate(disc: Discriminator, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Probability that a is more realistic than b"""
    return disc(a, b)
