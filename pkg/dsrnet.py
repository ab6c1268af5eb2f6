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
DSRNet Generator

Composes depth extraction, the shared image encoder, the depth matching
module and the decoder into the super-resolution generator. The same class
builds teacher and student networks; they differ only in ModelConfig.
"""

# Standard library imports
import logging

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

# Third-party imports
import torch
import torch.nn as nn

# Local imports
from backbone import DepthNet, DepthNetConfig, Decoder, Encoder, EncoderConfig, decode, depth_extract, encode
from dmm import DepthMatchingModule, DMMOutput, MatchConfig, dmm_forward
from dsrlab_constants import Defaults, DepthSources
from dsrlab_errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture of one generator; echoed into arch.json"""
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    depth: DepthNetConfig = field(default_factory=DepthNetConfig)
    match: MatchConfig = field(default_factory=MatchConfig)
    disc_channels: int = 32
    depth_source: str = DepthSources.NET
    scale: int = Defaults.SCALE

    def __post_init__(self):
        if self.depth_source not in DepthSources.ALL:
            raise ConfigError(f"depth_source must be one of {DepthSources.ALL}, got {self.depth_source!r}")
        if self.scale != Defaults.SCALE:
            raise ConfigError(f"the generator upsamples by exactly {Defaults.SCALE}, got scale {self.scale}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "encoder": self.encoder.to_dict(),
            "depth": self.depth.to_dict(),
            "match": self.match.to_dict(),
            "disc_channels": self.disc_channels,
            "depth_source": self.depth_source,
            "scale": self.scale,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ModelConfig':
        try:
            return cls(
                encoder=EncoderConfig(**data["encoder"]),
                depth=DepthNetConfig(**data["depth"]),
                match=MatchConfig(**data["match"]),
                disc_channels=int(data["disc_channels"]),
                depth_source=data["depth_source"],
                scale=int(data["scale"]),
            )
        except (KeyError, TypeError) as e:
            raise ConfigError(f"Invalid model configuration: {e}") from e

    @classmethod
    def from_sections(cls, model: Dict[str, Any], match: Dict[str, Any], student: Optional[Dict[str, Any]] = None,
                      depth_source: str = DepthSources.NET) -> 'ModelConfig':
        """Build from the config file sections; student overrides width and block count"""
        encoder_section = student if student is not None else model
        return cls(
            encoder=EncoderConfig(
                base_channels=int(encoder_section["base_channels"]),
                res_blocks_per_stage=int(encoder_section["res_blocks_per_stage"]),
            ),
            depth=DepthNetConfig(
                unet_depth=int(model["unet_depth"]),
                base_channels=int(model["depth_base_channels"]),
            ),
            match=MatchConfig(**match),
            disc_channels=int(model["disc_channels"]),
            depth_source=depth_source,
        )


@dataclass
class SRForward:
    """Everything one generator forward pass produces"""
    sr: torch.Tensor
    depth_lr: torch.Tensor
    depth_refdown: torch.Tensor
    enc_feats: List[torch.Tensor]
    dep_feats: List[torch.Tensor]
    dmm: DMMOutput


class DSRNet(nn.Module):
    """Depth-guided reference-based super-resolution generator"""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.depth_net = DepthNet(cfg.depth)
        self.encoder = Encoder(cfg.encoder)
        self.dmm = DepthMatchingModule(cfg.encoder, cfg.match)
        self.decoder = Decoder(cfg.encoder)

    def _matching_depth(self, lr: torch.Tensor, ref_down: torch.Tensor, depth_lr_gt: Optional[torch.Tensor],
                        depth_refdown_gt: Optional[torch.Tensor]) -> Tuple[torch.Tensor, ...]:
        source = self.cfg.depth_source
        if source == DepthSources.NET:
            depth_lr, depth_refdown = depth_extract(self.depth_net, lr, ref_down)
            return depth_lr, depth_refdown, depth_lr, depth_refdown

        # the depth net is off the gradient path in these modes
        with torch.no_grad():
            depth_lr, depth_refdown = depth_extract(self.depth_net, lr, ref_down)
        if source == DepthSources.GT:
            if depth_lr_gt is None or depth_refdown_gt is None:
                raise ShapeError("depth_source 'gt' needs depth_lr_gt and depth_refdown_gt")
            return depth_lr, depth_refdown, depth_lr_gt, depth_refdown_gt
        return depth_lr, depth_refdown, torch.zeros_like(depth_lr), torch.zeros_like(depth_refdown)

    def forward(self, lr: torch.Tensor, ref: torch.Tensor, ref_down: torch.Tensor,
                depth_lr_gt: Optional[torch.Tensor] = None,
                depth_refdown_gt: Optional[torch.Tensor] = None) -> SRForward:
        scale = self.cfg.scale
        if tuple(ref.shape[-2:]) != (scale * lr.shape[-2], scale * lr.shape[-1]):
            raise ShapeError(f"Ref {tuple(ref.shape[-2:])} is not {scale}x LR {tuple(lr.shape[-2:])}")
        depth_lr, depth_refdown, dmm_lr, dmm_refdown = self._matching_depth(lr, ref_down, depth_lr_gt,
                                                                            depth_refdown_gt)
        lr_feats = encode(self.encoder, lr)
        refdown_feats = encode(self.encoder, ref_down)
        # Ref's f1 sits on the LR f4 grid, which is where matching happens
        ref_feats = encode(self.encoder, ref)
        dmm_out = dmm_forward(self.dmm, lr_feats, refdown_feats, ref_feats, dmm_lr, dmm_refdown)
        sr = decode(self.decoder, dmm_out.fused_lr, dmm_out.matched, lr)
        return SRForward(
            sr=sr,
            depth_lr=depth_lr,
            depth_refdown=depth_refdown,
            enc_feats=lr_feats.stages(),
            dep_feats=dmm_out.depth_feats.stages(),
            dmm=dmm_out,
        )

    def dummy_inputs(self, height: int, width: int) -> Tuple[torch.Tensor, ...]:
        """Inputs for an LR grid of height x width, used for FLOP counting and smoke runs"""
        scale = self.cfg.scale
        lr = torch.zeros(1, 3, height, width)
        ref = torch.zeros(1, 3, scale * height, scale * width)
        depth = torch.ones(1, 1, height, width)
        return lr, ref, lr.clone(), depth, depth.clone()

    def feature_channels(self) -> List[int]:
        """Channel count of each encoder stage output"""
        return [self.cfg.encoder.base_channels] * self.cfg.encoder.stages
