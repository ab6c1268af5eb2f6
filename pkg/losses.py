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
Teacher Losses

Depth reconstruction, pixel reconstruction, perceptual and relativistic
adversarial losses plus their weighted total. Every L1/L2 term is
mean-reduced over elements. The perceptual feature extractor is a frozen
VGG19 slice whose weights live in the DSRLAB_CACHE directory.
"""

# Standard library imports
import hashlib
import logging
import math

from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Dict, Iterable, NamedTuple, Optional, Union

# Third-party imports
import requests
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.models import vgg19

# Local imports
from backbone import check_same_shape
from dsrlab_constants import Defaults, Vgg19Weights
from dsrlab_errors import FeatureExtractorUnavailable, NonFiniteLoss, RangeError

logger = logging.getLogger(__name__)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
DOWNLOAD_TIMEOUT = 60

Number = Union[float, torch.Tensor]


@dataclass(frozen=True)
class LossWeights:
    """Coefficients of the teacher objective"""
    dep: float = 1.0
    rec: float = 1.0
    per: float = 1e-2
    adv: float = 5e-3
    g: float = 1.0
    d: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not value >= 0:
                raise RangeError(f"loss weight {f.name} must be >= 0, got {value}")

    @classmethod
    def from_config(cls, section: Dict) -> 'LossWeights':
        return cls(**{f.name: float(section[f.name]) for f in fields(cls) if f.name in section})

    def restricted(self, terms: Iterable[str]) -> 'LossWeights':
        """Copy with every objective term outside terms zeroed"""
        active = set(terms)
        data = asdict(self)
        for name in ("dep", "rec", "per", "adv"):
            if name not in active:
                data[name] = 0.0
        return LossWeights(**data)


@dataclass
class LossComponents:
    """Unweighted loss terms"""
    dep: Number = 0.0
    rec: Number = 0.0
    per: Number = 0.0
    adv: Number = 0.0

    def as_dict(self) -> Dict[str, float]:
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}


class AdversarialLosses(NamedTuple):
    g: torch.Tensor
    d: torch.Tensor
    adv: torch.Tensor


def depth_loss(d_lr: torch.Tensor, d_refdown: torch.Tensor, gt_lr: torch.Tensor,
               gt_refdown: torch.Tensor) -> torch.Tensor:
    """Mean absolute depth error of the LR map plus that of the Ref↓ map"""
    check_same_shape(d_lr, gt_lr, "depth_loss LR pair")
    check_same_shape(d_refdown, gt_refdown, "depth_loss Ref↓ pair")
    return (d_lr - gt_lr).abs().mean() + (d_refdown - gt_refdown).abs().mean()


def reconstruction_loss(sr: torch.Tensor, hr: torch.Tensor) -> torch.Tensor:
    check_same_shape(sr, hr, "reconstruction_loss")
    return F.l1_loss(sr, hr)


def rms_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Root of the mean squared difference, with a zero gradient at zero distance"""
    check_same_shape(a, b, "rms_distance")
    mean_square = (a - b).pow(2).mean()
    positive = mean_square > 0
    safe = torch.where(positive, mean_square, torch.ones_like(mean_square))
    return torch.where(positive, torch.sqrt(safe), torch.zeros_like(mean_square))


def perceptual_loss(sr: torch.Tensor, hr: torch.Tensor, fx: Callable[[torch.Tensor], torch.Tensor]) -> torch.Tensor:
    """L2 distance between extractor features, mean-reduced"""
    check_same_shape(sr, hr, "perceptual_loss")
    return rms_distance(fx(sr), fx(hr))


def adversarial_from_scores(d_real_fake: torch.Tensor, d_fake_real: torch.Tensor,
                            weights: LossWeights) -> AdversarialLosses:
    """
    Relativistic generator/discriminator losses from D(hr, sr) and D(sr, hr)

    Probabilities are clamped to [1e-7, 1 - 1e-7] before the logarithm.
    """
    lo, hi = Defaults.LOG_CLAMP, 1.0 - Defaults.LOG_CLAMP
    real_fake = d_real_fake.clamp(lo, hi)
    fake_real = d_fake_real.clamp(lo, hi)
    loss_g = -torch.log(1 - real_fake).mean() - torch.log(fake_real).mean()
    loss_d = -torch.log(real_fake).mean() - torch.log(1 - fake_real).mean()
    return AdversarialLosses(g=loss_g, d=loss_d, adv=weights.g * loss_g + weights.d * loss_d)


def adversarial_losses(d: Callable[[torch.Tensor, torch.Tensor], torch.Tensor], hr: torch.Tensor,
                       sr: torch.Tensor, weights: LossWeights) -> AdversarialLosses:
    """(L_G, L_D, L_adv) for a relativistic discriminator d(a, b)"""
    check_same_shape(hr, sr, "adversarial_losses")
    return adversarial_from_scores(d(hr, sr), d(sr, hr), weights)


def check_finite(components: Dict[str, Number]) -> None:
    """Raise NonFiniteLoss naming the first NaN/inf component"""
    for name, value in components.items():
        finite = bool(torch.isfinite(value).all()) if torch.is_tensor(value) else math.isfinite(value)
        if not finite:
            raise NonFiniteLoss(f"loss component {name} is not finite: {float(value)}")


def total_loss(components: LossComponents, weights: LossWeights) -> Number:
    """Weighted sum of the four teacher terms"""
    check_finite({f.name: getattr(components, f.name) for f in fields(components)})
    return (weights.dep * components.dep + weights.rec * components.rec
            + weights.per * components.per + weights.adv * components.adv)


# ----------------------------------------------------------------------------
# Feature extractors
# ----------------------------------------------------------------------------

class IdentityExtractor(nn.Module):
    """Pass-through extractor; perceptual_loss degenerates to pixel RMS distance"""

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x


def _sha256_prefix(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()[:len(Vgg19Weights.HASH_PREFIX)]


def fetch_vgg19_weights(cache_dir: Path, session: Optional[requests.Session] = None) -> Path:
    """
    Return the cached VGG19 weight file, downloading it when absent

    Args:
        cache_dir: directory holding vgg19-dcbb9e9d.pth
        session: optional requests session (tests inject one)

    Returns:
        Path of the verified weight file

    Raises:
        FeatureExtractorUnavailable: download failed or the hash does not match
    """
    cache_dir = Path(cache_dir)
    target = cache_dir / Vgg19Weights.FILE_NAME
    if not target.exists():
        cache_dir.mkdir(parents=True, exist_ok=True)
        partial = target.with_suffix('.part')
        session = session or requests.Session()
        logger.info(f"Downloading VGG19 weights to {target}")
        try:
            with session.get(Vgg19Weights.URL, stream=True, timeout=DOWNLOAD_TIMEOUT) as response:
                response.raise_for_status()
                with open(partial, 'wb') as f:
                    for chunk in response.iter_content(chunk_size=1 << 20):
                        f.write(chunk)
        except requests.exceptions.RequestException as e:
            partial.unlink(missing_ok=True)
            raise FeatureExtractorUnavailable(f"Could not download VGG19 weights: {e}") from e
        if _sha256_prefix(partial) != Vgg19Weights.HASH_PREFIX:
            partial.unlink(missing_ok=True)
            raise FeatureExtractorUnavailable(
                f"Downloaded weights do not match hash prefix {Vgg19Weights.HASH_PREFIX}"
            )
        partial.replace(target)

    if _sha256_prefix(target) != Vgg19Weights.HASH_PREFIX:
        raise FeatureExtractorUnavailable(f"{target} does not match hash prefix {Vgg19Weights.HASH_PREFIX}")
    return target


class VGGFeatureExtractor(nn.Module):
    """Frozen VGG19 features up to one ReLU tap, applied to ImageNet-normalized input"""

    def __init__(self, layer: str = "relu3_4", cache_dir: Optional[Path] = None,
                 state_dict: Optional[Dict[str, torch.Tensor]] = None):
        super().__init__()
        if layer not in Vgg19Weights.TAPS:
            raise FeatureExtractorUnavailable(f"Unknown VGG19 tap {layer!r}; known: {sorted(Vgg19Weights.TAPS)}")
        network = vgg19(weights=None)
        if state_dict is None:
            if cache_dir is None:
                raise FeatureExtractorUnavailable("VGG19 needs a cache directory or an explicit state_dict")
            weights_path = fetch_vgg19_weights(Path(cache_dir))
            state_dict = torch.load(weights_path, map_location='cpu', weights_only=True)
        network.load_state_dict(state_dict)
        self.layer = layer
        self.features = network.features[:Vgg19Weights.TAPS[layer] + 1]
        self.register_buffer('mean', torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer('std', torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))
        for param in self.features.parameters():
            param.requires_grad = False
        self.eval()

    def train(self, mode: bool = True) -> 'VGGFeatureExtractor':
        # always in inference mode
        return super().train(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.features((x - self.mean) / self.std)


def build_feature_extractor(kind: str, layer: str = "relu3_4", cache_dir: Optional[Path] = None) -> nn.Module:
    """'vgg19' or 'identity'"""
    if kind == "identity":
        return IdentityExtractor()
    if kind == "vgg19":
        return VGGFeatureExtractor(layer=layer, cache_dir=cache_dir)
    raise FeatureExtractorUnavailable(f"Unknown feature extractor {kind!r}")
