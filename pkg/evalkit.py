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
Evaluation Kit

PSNR/SSIM metrics, parameter and multiply-accumulate counting, the
LR/SR/HR delta arithmetic, dataset evaluation against the bicubic baseline
and report emission (report.json, report.csv, report.html).
"""

# Standard library imports
import csv
import json
import logging
import math
import time

from dataclasses import dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple

# Third-party imports
import markdown
import numpy as np
import torch
import torch.nn as nn
from skimage.metrics import peak_signal_noise_ratio, structural_similarity
from tabulate import tabulate

# Local imports
from dsrlab_constants import Defaults, RunFiles
from dsrlab_errors import ShapeError, UnsupportedLayer
from dsrnet import DSRNet, ModelConfig
from synthgen import SampleRecord, bicubic_resample
from trainer import build_generator, load_checkpoint

logger = logging.getLogger(__name__)

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
REPORT_COLUMNS = ["method", "PSNR", "SSIM", "FLOPs(G)", "Params(M)"]
COUNTED_LAYERS = (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)
HTML_TEMPLATE = """<!DOCTYPE html>
<html>
<head><meta charset="utf-8"><title>{title}</title></head>
<body>
<h1>{title}</h1>
{body}
</body>
</html>
"""


def _as_numpy(img) -> np.ndarray:
    """HxWxC (or HxW) float64 array from a numpy array or a CHW / 1xCHW tensor"""
    if torch.is_tensor(img):
        array = img.detach().cpu().double()
        if array.dim() == 4:
            if array.shape[0] != 1:
                raise ShapeError(f"metrics take one image at a time, got batch {array.shape[0]}")
            array = array[0]
        return array.permute(1, 2, 0).numpy() if array.dim() == 3 else array.numpy()
    return np.asarray(img, dtype=np.float64)


def _check_pair(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape {a.shape} does not match {b.shape}")


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1]; identical images give inf"""
    a, b = _as_numpy(a), _as_numpy(b)
    _check_pair(a, b, "psnr")
    if np.mean((a - b) ** 2) == 0:
        return math.inf
    return float(peak_signal_noise_ratio(a, b, data_range=1.0))


def to_luma(img: np.ndarray) -> np.ndarray:
    """ITU-R 601 luma of an HxWx3 image; 2-D input is returned unchanged"""
    return img if img.ndim == 2 else img @ LUMA_WEIGHTS


def ssim(a, b) -> float:
    """Mean SSIM on luma: 11x11 Gaussian window (sigma 1.5), K1 0.01, K2 0.03, L 1"""
    a, b = _as_numpy(a), _as_numpy(b)
    _check_pair(a, b, "ssim")
    if min(a.shape[0], a.shape[1]) < SSIM_WINDOW:
        raise ShapeError(f"image {a.shape[:2]} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    return float(structural_similarity(
        to_luma(a), to_luma(b),
        data_range=1.0, gaussian_weights=True, sigma=SSIM_SIGMA, use_sample_covariance=False,
        K1=0.01, K2=0.03,
    ))


# ----------------------------------------------------------------------------
# Model statistics
# ----------------------------------------------------------------------------

class ModelStats(NamedTuple):
    params: int
    macs: int

    @property
    def params_m(self) -> float:
        return self.params / 1e6

    @property
    def flops_g(self) -> float:
        """Reported FLOPs are multiply-accumulates"""
        return self.macs / 1e9


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def _layer_macs(module: nn.Module, inputs: Tuple[torch.Tensor, ...], output: torch.Tensor) -> int:
    if isinstance(module, nn.Conv2d):
        kh, kw = module.kernel_size
        return output.numel() * (module.in_channels // module.groups) * kh * kw
    if isinstance(module, nn.ConvTranspose2d):
        kh, kw = module.kernel_size
        return inputs[0].numel() * (module.out_channels // module.groups) * kh * kw
    return output.numel() * module.in_features


def model_stats(model: nn.Module, input_size: Tuple[int, int] = Defaults.FLOPS_INPUT,
                inputs: Optional[Sequence[torch.Tensor]] = None) -> ModelStats:
    """
    Exact parameter count and multiply-accumulates of one forward pass

    Args:
        model: network to measure
        input_size: LR (height, width) used when the model offers dummy_inputs
        inputs: explicit forward inputs, batch size 1

    Returns:
        ModelStats(params, macs)

    Raises:
        UnsupportedLayer: a parameterized leaf that is not Conv2d/ConvTranspose2d/Linear
    """
    for name, module in model.named_modules():
        if isinstance(module, COUNTED_LAYERS):
            continue
        if any(True for _ in module.parameters(recurse=False)):
            raise UnsupportedLayer(f"cannot count MACs of {name or 'model'} ({type(module).__name__})")

    if inputs is None:
        if hasattr(model, "dummy_inputs"):
            inputs = model.dummy_inputs(*input_size)
        else:
            inputs = (torch.zeros(1, 3, *input_size),)

    total = [0]

    def hook(module, module_inputs, output):
        total[0] += _layer_macs(module, module_inputs, output)

    handles = [m.register_forward_hook(hook) for m in model.modules() if isinstance(m, COUNTED_LAYERS)]
    try:
        was_training = model.training
        model.eval()
        with torch.no_grad():
            model(*inputs)
        model.train(was_training)
    finally:
        for handle in handles:
            handle.remove()
    return ModelStats(params=count_parameters(model), macs=int(total[0]))


# ----------------------------------------------------------------------------
# Delta metrics
# ----------------------------------------------------------------------------

class DeltaMetrics(NamedTuple):
    """Degradation from downsampling, recovery by SR and the remaining gap to HR"""
    lr: Decimal
    sr: Decimal
    hr: Decimal

    def rounded(self, places: int = 2) -> Tuple[float, float, float]:
        quantum = Decimal(1).scaleb(-places)
        return tuple(float(v.quantize(quantum, rounding=ROUND_HALF_EVEN)) for v in self)


def delta_metrics(lr_score: float, sr_score: float, hr_score: float) -> DeltaMetrics:
    """(lr - hr, sr - lr, hr - sr) in exact decimal arithmetic; the three always sum to zero"""
    lr, sr, hr = (Decimal(repr(float(v))) for v in (lr_score, sr_score, hr_score))
    return DeltaMetrics(lr=lr - hr, sr=sr - lr, hr=hr - sr)


# ----------------------------------------------------------------------------
# Dataset evaluation
# ----------------------------------------------------------------------------

def _mean(values: Sequence[float]) -> float:
    if not values:
        return math.nan
    if any(math.isinf(v) for v in values):
        return math.inf
    return sum(values) / len(values)


def _json_number(value: float):
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    if math.isnan(value):
        return "nan"
    return value


@dataclass
class EvalReport:
    """Per-sample and aggregate metrics of one model and the bicubic baseline"""
    method: str
    sample_ids: List[str]
    sr_psnr: List[float]
    sr_ssim: List[float]
    bicubic_psnr: List[float]
    bicubic_ssim: List[float]
    stats: Optional[ModelStats] = None
    config: Dict[str, Any] = field(default_factory=dict)
    provenance: Dict[str, Any] = field(default_factory=dict)

    @property
    def mean_sr_psnr(self) -> float:
        return _mean(self.sr_psnr)

    @property
    def mean_sr_ssim(self) -> float:
        return _mean(self.sr_ssim)

    @property
    def mean_bicubic_psnr(self) -> float:
        return _mean(self.bicubic_psnr)

    @property
    def mean_bicubic_ssim(self) -> float:
        return _mean(self.bicubic_ssim)

    def to_dict(self) -> Dict[str, Any]:
        samples = [
            {
                "sample_id": sid,
                "sr_psnr": _json_number(sp),
                "sr_ssim": ss,
                "bicubic_psnr": _json_number(bp),
                "bicubic_ssim": bs,
            }
            for sid, sp, ss, bp, bs in zip(self.sample_ids, self.sr_psnr, self.sr_ssim,
                                           self.bicubic_psnr, self.bicubic_ssim)
        ]
        return {
            "method": self.method,
            "samples": samples,
            "aggregate": {
                "sr_psnr": _json_number(self.mean_sr_psnr),
                "sr_ssim": _json_number(self.mean_sr_ssim),
                "bicubic_psnr": _json_number(self.mean_bicubic_psnr),
                "bicubic_ssim": _json_number(self.mean_bicubic_ssim),
            },
            "model_stats": None if self.stats is None else {
                "params": self.stats.params,
                "macs": self.stats.macs,
                "flops_input": list(self.config.get("flops_input", Defaults.FLOPS_INPUT)),
            },
            "config": self.config,
            "provenance": self.provenance,
        }

    def table_rows(self) -> List[List[Any]]:
        """Two-decimal rows: bicubic baseline first, then the model"""
        flops = self.stats.flops_g if self.stats else 0.0
        params = self.stats.params_m if self.stats else 0.0
        return [
            ["bicubic", _fmt(self.mean_bicubic_psnr, 2), _fmt(self.mean_bicubic_ssim, 4), "0.00", "0.00"],
            [self.method, _fmt(self.mean_sr_psnr, 2), _fmt(self.mean_sr_ssim, 4), f"{flops:.2f}", f"{params:.2f}"],
        ]

    def write(self, out_dir) -> Dict[str, Path]:
        """Write report.json, report.csv and report.html into out_dir"""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "json": out / RunFiles.REPORT_JSON,
            "csv": out / RunFiles.REPORT_CSV,
            "html": out / RunFiles.REPORT_HTML,
        }
        paths["json"].write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding='utf-8')
        write_table_csv(paths["csv"], REPORT_COLUMNS, self.table_rows())
        write_table_html(paths["html"], f"Evaluation: {self.method}", REPORT_COLUMNS, self.table_rows())
        logger.info(f"Wrote evaluation report to {out}")
        return paths


def _fmt(value: float, places: int) -> str:
    return "inf" if math.isinf(value) else f"{value:.{places}f}"


def write_table_csv(path: Path, columns: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        writer.writerows(rows)


def write_table_html(path: Path, title: str, columns: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
    """Render a markdown pipe table to a standalone HTML page"""
    table = tabulate(rows, headers=columns, tablefmt="pipe", disable_numparse=True)
    body = markdown.markdown(table, extensions=['markdown.extensions.tables'])
    path.write_text(HTML_TEMPLATE.format(title=title, body=body), encoding='utf-8')


def _tensor(array: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(array.transpose(2, 0, 1), dtype=np.float32))[None]


def super_resolve(model: DSRNet, record: SampleRecord) -> np.ndarray:
    """SR image of one record, HxWx3 clipped to [0, 1]"""
    with torch.no_grad():
        fwd = model(_tensor(record.lr), _tensor(record.ref), _tensor(record.ref_down),
                    _tensor(record.depth_lr_gt), _tensor(record.depth_refdown_gt))
    return fwd.sr[0].clamp(0.0, 1.0).permute(1, 2, 0).double().numpy()


def evaluate_model(model: DSRNet, records: Sequence[SampleRecord], method: str = "DSRNet",
                   flops_input: Tuple[int, int] = Defaults.FLOPS_INPUT) -> EvalReport:
    """Metrics of model and the bicubic x4 baseline on every record, in record order"""
    model.eval()
    report = EvalReport(method=method, sample_ids=[], sr_psnr=[], sr_ssim=[], bicubic_psnr=[], bicubic_ssim=[])
    for record in records:
        hr = record.hr.astype(np.float64)
        sr = super_resolve(model, record)
        bicubic = bicubic_resample(record.lr.astype(np.float64), hr.shape[0] // record.lr.shape[0])
        report.sample_ids.append(record.sample_id)
        report.sr_psnr.append(psnr(sr, hr))
        report.sr_ssim.append(ssim(sr, hr))
        report.bicubic_psnr.append(psnr(bicubic, hr))
        report.bicubic_ssim.append(ssim(bicubic, hr))
        logger.debug(f"{record.sample_id}: SR {report.sr_psnr[-1]:.4f} dB, bicubic {report.bicubic_psnr[-1]:.4f} dB")
    report.stats = model_stats(model, flops_input)
    report.config = {"model": model.cfg.to_dict(), "flops_input": list(flops_input)}
    return report


def evaluate_dataset(checkpoint_path, records: Sequence[SampleRecord], out_dir=None,
                     flops_input: Tuple[int, int] = Defaults.FLOPS_INPUT,
                     provenance: Optional[Dict[str, Any]] = None) -> EvalReport:
    """Evaluate a checkpoint on records and optionally write the report files"""
    checkpoint = load_checkpoint(checkpoint_path)
    model = build_generator(checkpoint)
    method = f"DSRNet ({checkpoint.model_config.depth_source} depth, " \
             f"{checkpoint.model_config.encoder.res_blocks_per_stage} blocks)"
    report = evaluate_model(model, records, method, flops_input)
    report.config["checkpoint"] = str(checkpoint_path)
    report.provenance = dict(provenance or {})
    report.provenance.setdefault("checkpoint_step", checkpoint.meta.get("step"))
    report.provenance.setdefault("seed", checkpoint.meta.get("seed"))
    if out_dir is not None:
        report.write(out_dir)
    return report


def benchmark_models(configs: Dict[str, ModelConfig], input_size: Tuple[int, int] = Defaults.FLOPS_INPUT,
                     repeats: int = 3) -> List[Dict[str, Any]]:
    """Params, MACs and mean forward latency of freshly built generators"""
    rows = []
    for label, cfg in configs.items():
        model = DSRNet(cfg)
        stats = model_stats(model, input_size)
        inputs = model.dummy_inputs(*input_size)
        model.eval()
        timings = []
        with torch.no_grad():
            for _ in range(max(1, repeats)):
                start = time.perf_counter()
                model(*inputs)
                timings.append(time.perf_counter() - start)
        rows.append({
            "model": label,
            "params": stats.params,
            "macs": stats.macs,
            "params_m": round(stats.params_m, 4),
            "flops_g": round(stats.flops_g, 4),
            "latency_ms": round(1000 * sum(timings) / len(timings), 3),
        })
        logger.info(f"{label}: {stats.params} params, {stats.macs} MACs")
    return rows
