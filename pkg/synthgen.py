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
Synthetic Pipe Scene Generator

This module ray-casts textured cylindrical pipe scenes with exact per-pixel
depth and turns them into paired super-resolution samples (LR, Ref, Ref↓,
HR and depth ground truth). It also owns the bicubic kernel used across the
package and the on-disk dataset format.

Dataset layout:
    <path>/manifest.json
    <path>/samples/<id>/{hr.png, ref.png, lr.png, ref_lr.png,
                         depth_lr.f32, depth_reflr.f32, meta.json}
"""

# Standard library imports
import hashlib
import json
import logging
import math
import shutil

from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

# Third-party imports
import numpy as np
import torch
from PIL import Image
from torch.utils.data import Dataset

# Local imports
from dsrlab_constants import DatasetFiles, Defaults, VERSION
from dsrlab_errors import CorruptDataset, InvalidScale, InvalidScene, MissingManifest, ShapeError

logger = logging.getLogger(__name__)

DECAL_KINDS = ("crack", "deposit", "stain")

# texture lattice resolution: cells around the circumference and cell length along the axis
TEXTURE_THETA_CELLS = 96
TEXTURE_Z_CELL = 0.03
TEXTURE_Z_CELLS = 2048
JOINT_SPACING = 1.0
JOINT_WIDTH = 0.04

ArrayOrTensor = Union[np.ndarray, torch.Tensor]


@dataclass(frozen=True)
class Decal:
    """Generic surface perturbation painted onto the pipe wall"""
    kind: str
    axial_position: float
    angular_start: float
    angular_extent: float
    length: float


@dataclass(frozen=True)
class SceneParams:
    """A pipe of radius pipe_radius along the world z axis, seen from a pinhole camera"""
    pipe_radius: float
    camera_position: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    yaw: float = 0.0
    pitch: float = 0.0
    texture_seed: int = 0
    defect_decals: Tuple[Decal, ...] = ()
    far_clip: float = Defaults.FAR_CLIP
    field_of_view: float = 100.0   # horizontal, degrees

    def validate(self) -> None:
        """Raise InvalidScene unless the camera sits strictly inside a valid pipe"""
        if not self.pipe_radius > 0:
            raise InvalidScene(f"pipe_radius must be > 0, got {self.pipe_radius}")
        if not self.far_clip > self.pipe_radius:
            raise InvalidScene(f"far_clip ({self.far_clip}) must exceed pipe_radius ({self.pipe_radius})")
        if not 0 < self.field_of_view < 180:
            raise InvalidScene(f"field_of_view must be in (0, 180), got {self.field_of_view}")
        x, y, _ = self.camera_position
        if math.hypot(x, y) >= self.pipe_radius:
            raise InvalidScene(
                f"camera at radial distance {math.hypot(x, y):.4f} m is not inside "
                f"a pipe of radius {self.pipe_radius} m"
            )

    def advanced(self, camera_step: Union[float, Sequence[float]]) -> 'SceneParams':
        """Return the same scene with the camera moved by camera_step (axial meters or an xyz delta)"""
        if isinstance(camera_step, (int, float)):
            delta = (0.0, 0.0, float(camera_step))
        else:
            delta = tuple(float(v) for v in camera_step)
            if len(delta) != 3:
                raise InvalidScene(f"camera_step must be a scalar or an xyz triple, got {camera_step!r}")
        position = tuple(p + d for p, d in zip(self.camera_position, delta))
        return replace(self, camera_position=position)

    def to_dict(self) -> Dict:
        """Serializable view for meta.json"""
        data = asdict(self)
        data['camera_position'] = list(self.camera_position)
        data['defect_decals'] = [asdict(d) for d in self.defect_decals]
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> 'SceneParams':
        """Inverse of to_dict"""
        data = dict(data)
        data['camera_position'] = tuple(data['camera_position'])
        data['defect_decals'] = tuple(Decal(**d) for d in data.get('defect_decals', ()))
        return cls(**data)

    @classmethod
    def from_seed(cls, seed: int, index: int, far_clip: float = Defaults.FAR_CLIP) -> 'SceneParams':
        """Draw a valid random scene from its own (seed, index) stream"""
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))
        radius = float(rng.uniform(0.25, 0.6))
        offset = float(rng.uniform(0.0, 0.35)) * radius
        angle = float(rng.uniform(0.0, 2 * math.pi))
        z0 = float(rng.uniform(0.0, 20.0))
        decals = []
        for _ in range(int(rng.integers(0, 4))):
            decals.append(Decal(
                kind=str(rng.choice(DECAL_KINDS)),
                axial_position=z0 + float(rng.uniform(0.5, 4.0)),
                angular_start=float(rng.uniform(-math.pi, math.pi)),
                angular_extent=float(rng.uniform(0.2, 1.2)),
                length=float(rng.uniform(0.1, 0.6)),
            ))
        return cls(
            pipe_radius=radius,
            camera_position=(offset * math.cos(angle), offset * math.sin(angle), z0),
            yaw=float(rng.uniform(-0.15, 0.15)),
            pitch=float(rng.uniform(-0.1, 0.1)),
            texture_seed=int(rng.integers(0, 2 ** 63 - 1)),
            defect_decals=tuple(decals),
            far_clip=far_clip,
        )


@dataclass(eq=False)
class SampleRecord:
    """One paired training sample; images are HxWx3 in [0,1], depths HxWx1 in meters"""
    hr: np.ndarray
    ref: np.ndarray
    lr: np.ndarray
    ref_down: np.ndarray
    depth_lr_gt: np.ndarray
    depth_refdown_gt: np.ndarray
    sample_id: str
    scene: Optional[Dict] = field(default=None)

    ARRAY_FIELDS = ('hr', 'ref', 'lr', 'ref_down', 'depth_lr_gt', 'depth_refdown_gt')

    def __eq__(self, other) -> bool:
        if not isinstance(other, SampleRecord):
            return NotImplemented
        if self.sample_id != other.sample_id:
            return False
        return all(
            getattr(self, name).shape == getattr(other, name).shape
            and np.array_equal(getattr(self, name), getattr(other, name))
            for name in self.ARRAY_FIELDS
        )

    def dims(self) -> Dict[str, List[int]]:
        """Height/width of every array field"""
        return {name: list(getattr(self, name).shape[:2]) for name in self.ARRAY_FIELDS}


# ----------------------------------------------------------------------------
# Ray casting
# ----------------------------------------------------------------------------

def _rotation(yaw: float, pitch: float) -> np.ndarray:
    """Camera-to-world rotation: pitch about x, then yaw about y"""
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    r_yaw = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    r_pitch = np.array([[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]])
    return r_yaw @ r_pitch


def camera_rays(params: SceneParams, width: int, height: int) -> Tuple[np.ndarray, np.ndarray]:
    """Unit world-space ray directions (H, W, 3) through pixel centers and the forward axis"""
    focal = (width / 2.0) / math.tan(math.radians(params.field_of_view) / 2.0)
    u = (np.arange(width, dtype=np.float64) + 0.5 - width / 2.0) / focal
    v = (np.arange(height, dtype=np.float64) + 0.5 - height / 2.0) / focal
    uu, vv = np.meshgrid(u, v)
    directions = np.stack([uu, vv, np.ones_like(uu)], axis=-1)
    directions /= np.linalg.norm(directions, axis=-1, keepdims=True)
    rotation = _rotation(params.yaw, params.pitch)
    return directions @ rotation.T, rotation[:, 2]


def ray_cylinder_depth(origin: Sequence[float], directions: np.ndarray, forward: Sequence[float],
                       radius: float, far_clip: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Intersect rays from origin with the cylinder x^2 + y^2 = radius^2

    Args:
        origin: camera position, strictly inside the cylinder
        directions: (..., 3) unit ray directions
        forward: unit optical axis used to turn ray length into z-distance
        radius: cylinder radius in meters
        far_clip: depth ceiling in meters

    Returns:
        (z-distance clipped to far_clip, ray parameter t; inf where the ray never hits)
    """
    ox, oy, _ = origin
    dx, dy = directions[..., 0], directions[..., 1]
    a = dx * dx + dy * dy
    b = 2.0 * (ox * dx + oy * dy)
    c = ox * ox + oy * oy - radius * radius
    hits = a > 1e-12
    safe_a = np.where(hits, a, 1.0)
    t = (-b + np.sqrt(b * b - 4.0 * safe_a * c)) / (2.0 * safe_a)
    t = np.where(hits, t, np.inf)
    z_distance = t * (directions @ np.asarray(forward, dtype=np.float64))
    return np.minimum(z_distance, far_clip), t


def _sample_periodic(grid: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Bilinear lookup into a lattice that wraps in both axes"""
    n0, n1 = grid.shape[:2]
    a0 = np.floor(a)
    b0 = np.floor(b)
    fa = (a - a0)[..., None] if grid.ndim == 3 else a - a0
    fb = (b - b0)[..., None] if grid.ndim == 3 else b - b0
    i0 = a0.astype(np.int64) % n0
    j0 = b0.astype(np.int64) % n1
    i1 = (i0 + 1) % n0
    j1 = (j0 + 1) % n1
    top = grid[i0, j0] * (1 - fb) + grid[i0, j1] * fb
    bottom = grid[i1, j0] * (1 - fb) + grid[i1, j1] * fb
    return top * (1 - fa) + bottom * fa


def _albedo(params: SceneParams, theta: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Procedural wall color at cylindrical coordinates (theta, z)"""
    rng = np.random.default_rng(params.texture_seed)
    base = np.array([0.62, 0.57, 0.50]) * rng.uniform(0.85, 1.15, size=3)
    fine = rng.random((TEXTURE_THETA_CELLS, TEXTURE_Z_CELLS))
    coarse = rng.random((TEXTURE_THETA_CELLS // 8, TEXTURE_Z_CELLS // 8))
    tint = rng.uniform(0.9, 1.1, size=(TEXTURE_THETA_CELLS // 4, TEXTURE_Z_CELLS // 4, 3))

    a = (theta + math.pi) / (2 * math.pi)
    b = z / TEXTURE_Z_CELL
    grain = 0.55 + 0.35 * _sample_periodic(fine, a * TEXTURE_THETA_CELLS, b) \
        + 0.25 * _sample_periodic(coarse, a * (TEXTURE_THETA_CELLS // 8), b / 8)
    albedo = base * grain[..., None] * _sample_periodic(tint, a * (TEXTURE_THETA_CELLS // 4), b / 4)

    joints = np.mod(z, JOINT_SPACING) < JOINT_WIDTH
    albedo = np.where(joints[..., None], albedo * 0.55, albedo)

    for decal in params.defect_decals:
        offset = np.mod(theta - decal.angular_start, 2 * math.pi)
        inside = (offset < decal.angular_extent) & (z >= decal.axial_position) \
            & (z < decal.axial_position + decal.length)
        if decal.kind == "crack":
            center = decal.angular_extent / 2.0
            line = np.abs(offset - center) * params.pipe_radius < 0.008
            albedo = np.where((inside & line)[..., None], albedo * 0.2, albedo)
        elif decal.kind == "deposit":
            albedo = np.where(inside[..., None], 0.4 * albedo + 0.6 * np.array([0.45, 0.35, 0.2]), albedo)
        else:
            albedo = np.where(inside[..., None], albedo * np.array([0.65, 0.75, 0.6]), albedo)
    return albedo


def _trace(params: SceneParams, width: int, height: int):
    if width <= 0 or height <= 0:
        raise ShapeError(f"width and height must be positive, got {width}x{height}")
    params.validate()
    directions, forward = camera_rays(params, width, height)
    depth, t = ray_cylinder_depth(params.camera_position, directions, forward,
                                  params.pipe_radius, params.far_clip)
    return directions, depth, t


def render_frame(params: SceneParams, width: int, height: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Render a (height, width, 3) image in [0,1] and its (height, width, 1) float32 depth map

    Depth is the exact ray-cylinder intersection z-distance, clipped to far_clip.
    """
    directions, depth, t = _trace(params, width, height)
    finite = np.isfinite(t)
    t_safe = np.where(finite, t, 0.0)
    origin = np.asarray(params.camera_position, dtype=np.float64)
    hit = origin + directions * t_safe[..., None]
    theta = np.arctan2(hit[..., 1], hit[..., 0])

    albedo = _albedo(params, theta, hit[..., 2])
    # headlamp at the camera: Lambert term with inverse-square style falloff
    cos_incidence = np.clip((directions[..., 0] * hit[..., 0] + directions[..., 1] * hit[..., 1])
                            / params.pipe_radius, 0.0, 1.0)
    falloff = 1.0 / (1.0 + (t_safe / 2.5) ** 2)
    intensity = 0.08 + 0.92 * cos_incidence * falloff
    image = albedo * intensity[..., None]
    beyond = ~finite | (depth >= params.far_clip)
    image = np.where(beyond[..., None], 0.02, image)
    return np.clip(image, 0.0, 1.0), depth[..., None].astype(np.float32)


def render_depth(params: SceneParams, width: int, height: int) -> np.ndarray:
    """Depth map only, (height, width, 1) float32"""
    _, depth, _ = _trace(params, width, height)
    return depth[..., None].astype(np.float32)


# ----------------------------------------------------------------------------
# Bicubic resampling
# ----------------------------------------------------------------------------

def _cubic(x: torch.Tensor, a: float = Defaults.BICUBIC_A) -> torch.Tensor:
    absx = x.abs()
    absx2 = absx * absx
    absx3 = absx2 * absx
    near = ((a + 2) * absx3 - (a + 3) * absx2 + 1) * (absx <= 1)
    far = (a * absx3 - 5 * a * absx2 + 8 * a * absx - 4 * a) * ((absx > 1) & (absx <= 2))
    return near + far


def resize_weights(in_len: int, out_len: int, dtype=torch.float64) -> torch.Tensor:
    """
    Dense (out_len, in_len) bicubic interpolation matrix

    Kernel is widened by the inverse scale when shrinking; out-of-range taps
    are clamped to the border sample. Rows sum to one.
    """
    scale = out_len / in_len
    kernel_width = 4.0 if scale >= 1 else 4.0 / scale
    x = torch.arange(1, out_len + 1, dtype=torch.float64)
    u = x / scale + 0.5 * (1 - 1 / scale)
    left = torch.floor(u - kernel_width / 2)
    taps = int(math.ceil(kernel_width)) + 2
    indices = left[:, None] + torch.arange(taps, dtype=torch.float64)[None, :]
    distance = u[:, None] - indices
    if scale < 1:
        weights = scale * _cubic(scale * distance)
    else:
        weights = _cubic(distance)
    weights = weights / weights.sum(dim=1, keepdim=True)
    indices = indices.clamp(1, in_len).long() - 1
    matrix = torch.zeros(out_len, in_len, dtype=torch.float64)
    matrix.scatter_add_(1, indices, weights)
    return matrix.to(dtype)


def _target_size(length: int, scale: Union[int, float, Fraction]) -> int:
    ratio = Fraction(scale).limit_denominator(1_000_000)
    target = length * ratio
    if ratio <= 0 or target.denominator != 1:
        raise InvalidScale(f"scale {scale} maps length {length} to non-integral {float(target)}")
    return int(target)


def bicubic_resample(img: ArrayOrTensor, scale: Union[int, float, Fraction, None] = None,
                     size: Optional[Tuple[int, int]] = None, clip: bool = True) -> ArrayOrTensor:
    """
    MATLAB-style bicubic resampling (a = -0.5, edge-clamped borders)

    When shrinking, the kernel is widened by the inverse scale, so every
    output pixel low-pass filters its whole footprint (4 / scale input
    pixels per axis). This is not the plain 4-tap interpolation of
    torch.nn.functional.interpolate(mode='bicubic') or of a non-antialiased
    resize: LR images made here differ from those, most visibly on fine
    texture.

    Args:
        img: numpy array (H, W) or (H, W, C), or torch tensor (..., H, W)
        scale: rational scale applied to both axes
        size: explicit (height, width) instead of scale
        clip: clip the output to [0, 1] (images); pass False for score maps

    Returns:
        Resampled array of the same kind as the input
    """
    is_numpy = isinstance(img, np.ndarray)
    if is_numpy:
        squeeze = img.ndim == 2
        tensor = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float64))
        tensor = tensor[None] if squeeze else tensor.permute(2, 0, 1)
    else:
        tensor = img
    height, width = tensor.shape[-2:]
    if size is None:
        if scale is None:
            raise InvalidScale("either scale or size is required")
        out_h, out_w = _target_size(height, scale), _target_size(width, scale)
    else:
        out_h, out_w = int(size[0]), int(size[1])
        if out_h <= 0 or out_w <= 0:
            raise InvalidScale(f"target size must be positive, got {size}")

    if (out_h, out_w) == (height, width):
        out = tensor.clone()
    else:
        rows = resize_weights(height, out_h, tensor.dtype).to(tensor.device)
        cols = resize_weights(width, out_w, tensor.dtype).to(tensor.device)
        out = torch.matmul(torch.matmul(rows, tensor), cols.transpose(0, 1))
    if clip:
        out = out.clamp(0.0, 1.0)

    if is_numpy:
        out = out[0] if squeeze else out.permute(1, 2, 0)
        return out.numpy()
    return out


# ----------------------------------------------------------------------------
# Samples
# ----------------------------------------------------------------------------

def quantize_8bit(image: np.ndarray) -> np.ndarray:
    """Snap an image to the 8-bit levels a PNG can hold, as float32"""
    levels = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    return levels.astype(np.float32) / np.float32(255.0)


def synthesize_sample(params: SceneParams, camera_step: Union[float, Sequence[float]] = Defaults.CAMERA_STEP,
                      hr_size: Tuple[int, int] = Defaults.HR_SIZE, scale: int = Defaults.SCALE,
                      sample_id: str = "00000") -> SampleRecord:
    """
    Render the HR frame at pose t and the reference at pose t + camera_step

    Args:
        params: scene at pose t
        camera_step: axial meters or an xyz delta to the reference pose
        hr_size: (height, width) of HR and Ref; must be divisible by scale
        scale: downsampling factor between HR and LR
        sample_id: identifier used for the sample directory

    Returns:
        SampleRecord with 8-bit-quantized images and float32 depths
    """
    hr_h, hr_w = hr_size
    if hr_h % scale or hr_w % scale:
        raise ShapeError(f"HR size {hr_size} is not divisible by scale {scale}")
    lr_h, lr_w = hr_h // scale, hr_w // scale
    ref_params = params.advanced(camera_step)
    ref_params.validate()

    hr, _ = render_frame(params, hr_w, hr_h)
    ref, _ = render_frame(ref_params, hr_w, hr_h)
    hr = quantize_8bit(hr)
    ref = quantize_8bit(ref)
    lr = quantize_8bit(bicubic_resample(hr.astype(np.float64), Fraction(1, scale)))
    ref_down = quantize_8bit(bicubic_resample(ref.astype(np.float64), Fraction(1, scale)))
    logger.debug(f"Synthesized sample {sample_id}: HR {hr_h}x{hr_w}, LR {lr_h}x{lr_w}")
    return SampleRecord(
        hr=hr,
        ref=ref,
        lr=lr,
        ref_down=ref_down,
        depth_lr_gt=render_depth(params, lr_w, lr_h),
        depth_refdown_gt=render_depth(ref_params, lr_w, lr_h),
        sample_id=sample_id,
        scene=params.to_dict(),
    )


def _synthesize_indexed(job: Tuple[int, int, float, Tuple[int, int], int, float]) -> SampleRecord:
    seed, index, camera_step, hr_size, scale, far_clip = job
    params = SceneParams.from_seed(seed, index, far_clip=far_clip)
    return synthesize_sample(params, camera_step, hr_size, scale, sample_id=f"{index:05d}")


def generate_records(n: int, seed: int, camera_step: float = Defaults.CAMERA_STEP,
                     hr_size: Tuple[int, int] = Defaults.HR_SIZE, scale: int = Defaults.SCALE,
                     far_clip: float = Defaults.FAR_CLIP, workers: int = 1) -> List[SampleRecord]:
    """Synthesize n samples; any worker count yields identical records"""
    jobs = [(seed, i, camera_step, tuple(hr_size), scale, far_clip) for i in range(n)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_synthesize_indexed, jobs))
    return [_synthesize_indexed(job) for job in jobs]


def split_records(records: Sequence[SampleRecord], holdout_fraction: float) -> Tuple[list, list]:
    """Deterministic split: the last holdout_fraction of the records is held out"""
    if not 0 <= holdout_fraction < 1:
        raise ValueError(f"holdout_fraction must be in [0, 1), got {holdout_fraction}")
    n_holdout = int(round(len(records) * holdout_fraction))
    if records and holdout_fraction > 0:
        n_holdout = max(1, n_holdout)
    cut = len(records) - n_holdout
    return list(records[:cut]), list(records[cut:])


# ----------------------------------------------------------------------------
# Dataset I/O
# ----------------------------------------------------------------------------

def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()


def _write_png(path: Path, image: np.ndarray) -> None:
    levels = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(levels, mode='RGB').save(path, format='PNG')


def _read_png(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        levels = np.asarray(img.convert('RGB'), dtype=np.uint8)
    return levels.astype(np.float32) / np.float32(255.0)


def _write_f32(path: Path, depth: np.ndarray) -> None:
    path.write_bytes(np.ascontiguousarray(depth[..., 0], dtype='<f4').tobytes(order='C'))


def _read_f32(path: Path, height: int, width: int) -> np.ndarray:
    data = np.frombuffer(path.read_bytes(), dtype='<f4')
    if data.size != height * width:
        raise CorruptDataset(f"{path} holds {data.size} floats, expected {height}x{width}")
    return data.reshape(height, width, 1).astype(np.float32)


def _dump_json(path: Path, payload: Dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding='utf-8')


def dataset_write(records: Sequence[SampleRecord], path, extra: Optional[Dict] = None) -> Dict:
    """
    Write records in the dataset layout and return the manifest

    Args:
        records: samples to write
        path: dataset directory (created if missing); samples from an
            earlier write that are not in records are removed
        extra: additional JSON-serializable manifest fields (e.g. generator seed)

    Returns:
        The manifest dictionary written to manifest.json
    """
    root = Path(path)
    samples_dir = root / DatasetFiles.SAMPLES_DIR
    # no manifest while the samples are being rewritten
    (root / DatasetFiles.MANIFEST).unlink(missing_ok=True)
    if samples_dir.is_dir():
        keep = {record.sample_id for record in records}
        for stale in sorted(p for p in samples_dir.iterdir() if p.name not in keep):
            logger.debug(f"Removing stale sample {stale}")
            if stale.is_dir():
                shutil.rmtree(stale)
            else:
                stale.unlink()
    samples_dir.mkdir(parents=True, exist_ok=True)

    entries = []
    for record in records:
        sample_dir = samples_dir / record.sample_id
        sample_dir.mkdir(parents=True, exist_ok=True)
        _write_png(sample_dir / DatasetFiles.HR, record.hr)
        _write_png(sample_dir / DatasetFiles.REF, record.ref)
        _write_png(sample_dir / DatasetFiles.LR, record.lr)
        _write_png(sample_dir / DatasetFiles.REF_LR, record.ref_down)
        _write_f32(sample_dir / DatasetFiles.DEPTH_LR, record.depth_lr_gt)
        _write_f32(sample_dir / DatasetFiles.DEPTH_REF_LR, record.depth_refdown_gt)
        _dump_json(sample_dir / DatasetFiles.META, {
            "sample_id": record.sample_id,
            "dims": record.dims(),
            "depth_format": "float32-le-row-major",
            "depth_units": "meters",
            "scene": record.scene,
        })
        files = DatasetFiles.IMAGES + DatasetFiles.DEPTHS + (DatasetFiles.META,)
        entries.append({
            "id": record.sample_id,
            "dims": record.dims(),
            "checksums": {name: _sha256(sample_dir / name) for name in files},
        })

    manifest = {
        "format_version": 1,
        "generator_version": VERSION,
        "num_samples": len(entries),
        "samples": entries,
    }
    if extra:
        manifest.update(extra)
    _dump_json(root / DatasetFiles.MANIFEST, manifest)
    logger.info(f"Wrote {len(entries)} samples to {root}")
    return manifest


def dataset_read(path, verify: bool = True) -> List[SampleRecord]:
    """Read every sample listed in the manifest, verifying checksums"""
    root = Path(path)
    manifest_path = root / DatasetFiles.MANIFEST
    if not manifest_path.exists():
        raise MissingManifest(f"No {DatasetFiles.MANIFEST} in {root}")
    manifest = json.loads(manifest_path.read_text(encoding='utf-8'))

    records = []
    for entry in manifest.get("samples", []):
        sample_dir = root / DatasetFiles.SAMPLES_DIR / entry["id"]
        if verify:
            for name, expected in entry["checksums"].items():
                file_path = sample_dir / name
                if not file_path.exists():
                    raise CorruptDataset(f"Missing dataset file {file_path}")
                if _sha256(file_path) != expected:
                    raise CorruptDataset(f"Checksum mismatch for {file_path}")
        meta = json.loads((sample_dir / DatasetFiles.META).read_text(encoding='utf-8'))
        lr_h, lr_w = meta["dims"]["depth_lr_gt"]
        ref_h, ref_w = meta["dims"]["depth_refdown_gt"]
        records.append(SampleRecord(
            hr=_read_png(sample_dir / DatasetFiles.HR),
            ref=_read_png(sample_dir / DatasetFiles.REF),
            lr=_read_png(sample_dir / DatasetFiles.LR),
            ref_down=_read_png(sample_dir / DatasetFiles.REF_LR),
            depth_lr_gt=_read_f32(sample_dir / DatasetFiles.DEPTH_LR, lr_h, lr_w),
            depth_refdown_gt=_read_f32(sample_dir / DatasetFiles.DEPTH_REF_LR, ref_h, ref_w),
            sample_id=entry["id"],
            scene=meta.get("scene"),
        ))
    logger.info(f"Read {len(records)} samples from {root}")
    return records


def generate_dataset(n: int, seed: int, path, camera_step: float = Defaults.CAMERA_STEP,
                     hr_size: Tuple[int, int] = Defaults.HR_SIZE, scale: int = Defaults.SCALE,
                     far_clip: float = Defaults.FAR_CLIP, workers: int = 1) -> Dict:
    """Synthesize n samples from seed and write them to path"""
    records = generate_records(n, seed, camera_step, hr_size, scale, far_clip, workers)
    return dataset_write(records, path, extra={
        "seed": int(seed),
        "camera_step": camera_step,
        "scale": scale,
    })


# ----------------------------------------------------------------------------
# Torch view
# ----------------------------------------------------------------------------

def _chw(array: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(array.transpose(2, 0, 1), dtype=np.float32))


class SampleTensorDataset(Dataset):
    """Channel-first float32 tensors for training and evaluation"""

    def __init__(self, records: Sequence[SampleRecord]):
        self.records = list(records)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, index: int) -> Dict[str, torch.Tensor]:
        record = self.records[index]
        return {
            "lr": _chw(record.lr),
            "ref": _chw(record.ref),
            "ref_down": _chw(record.ref_down),
            "hr": _chw(record.hr),
            "depth_lr": _chw(record.depth_lr_gt),
            "depth_ref": _chw(record.depth_refdown_gt),
        }
