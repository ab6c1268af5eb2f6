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
Training Loops and Checkpoints

Teacher training (generator and relativistic discriminator alternating),
student distillation against a frozen teacher, the cosine learning-rate
schedule, and the checkpoint directory format:

    weights.bin  flat little-endian float32 blobs, registry order
    arch.json    tensor registry (name, shape, offset) and architecture echo
    meta.json    step, seed, schedule state and SHA-256 of the other files
"""

# Standard library imports
import csv
import hashlib
import json
import logging
import math
import random
import shutil

from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

# Third-party imports
import numpy as np
import torch
import torch.nn as nn
from torch.optim.lr_scheduler import LambdaLR
from torch.utils.data import DataLoader

# Local imports
from backbone import Discriminator
from distill import (AttentionDistillationModule, DistillWeights, FeatureSet, attention_distill_loss,
                     output_distill_loss, row_entropy, student_objective)
from dsrlab_config import DSRLabConfig
from dsrlab_constants import (STUDENT_MODE_TABLE, TEACHER_MODE_TABLE, CheckpointFiles, DepthSources, RunFiles,
                              TrainModes)
from dsrlab_errors import ConfigError, CorruptCheckpoint, NonFiniteLoss, RangeError
from dsrnet import DSRNet, ModelConfig, SRForward
from losses import (AdversarialLosses, LossComponents, LossWeights, adversarial_losses, build_feature_extractor,
                    check_finite, depth_loss, perceptual_loss, reconstruction_loss, total_loss)
from synthgen import SampleRecord, SampleTensorDataset

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1

TEACHER_LOG_COLUMNS = ["step", "lr", "l_dep", "l_rec", "l_per", "l_g", "l_d", "l_adv", "total"]
STUDENT_LOG_COLUMNS = ["step", "lr", "l_rec", "l_kd", "l_ad", "total", "alpha_entropy_encoder",
                       "alpha_entropy_depth"]


@dataclass
class TrainConfig:
    """Optimizer, schedule and loop settings resolved from the trainer section"""
    mode: str = TrainModes.TEACHER_FULL
    seed: int = 0
    epochs: int = 250
    max_steps: Optional[int] = None
    batch_size: int = 1
    lr0: float = 2e-4
    eta_min: float = 1e-7
    beta1: float = 0.9
    beta2: float = 0.999
    grad_clip: float = 10.0
    d_steps_per_g: int = 1
    log_every: int = 10
    ckpt_every: int = 500
    num_threads: int = 1

    def __post_init__(self):
        if self.mode not in TrainModes.ALL:
            raise ConfigError(f"Unknown training mode {self.mode!r}; known: {', '.join(TrainModes.ALL)}")
        if not self.lr0 > 0:
            raise ConfigError(f"lr0 must be > 0, got {self.lr0}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError(f"max_steps must be >= 1, got {self.max_steps}")

    @classmethod
    def from_config(cls, config: DSRLabConfig) -> 'TrainConfig':
        known = {f for f in cls.__dataclass_fields__}
        section = {k: v for k, v in config.trainer.items() if k in known}
        return cls(seed=config.seed, **section)

    def total_steps(self, dataset_size: int) -> int:
        if self.max_steps is not None:
            return int(self.max_steps)
        return self.epochs * math.ceil(dataset_size / self.batch_size)


@dataclass
class TrainResult:
    checkpoint: Path
    log_path: Path
    steps: int
    last_row: Dict[str, Any] = field(default_factory=dict)


def lr_schedule(t: int, total: int, lr0: float, eta_min: float) -> float:
    """Cosine annealing from lr0 at t = 0 to eta_min at t = total"""
    if total < 1:
        raise RangeError(f"total steps must be >= 1, got {total}")
    if t < 0 or t > total:
        raise RangeError(f"step {t} outside [0, {total}]")
    return eta_min + 0.5 * (lr0 - eta_min) * (1 + math.cos(math.pi * t / total))


def set_determinism(seed: int, num_threads: int = 1) -> torch.Generator:
    """Seed every RNG, force deterministic kernels and return a seeded generator for data order"""
    random.seed(seed)
    np.random.seed(seed % 2 ** 32)
    torch.manual_seed(seed)
    torch.set_num_threads(num_threads)
    torch.use_deterministic_algorithms(True, warn_only=True)
    generator = torch.Generator()
    generator.manual_seed(seed)
    return generator


# ----------------------------------------------------------------------------
# Checkpoints
# ----------------------------------------------------------------------------

def _sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def state_registry(modules: Dict[str, nn.Module]) -> "OrderedDict[str, torch.Tensor]":
    """Prefixed state of every module in a stable order"""
    registry = OrderedDict()
    for prefix, module in modules.items():
        for name, tensor in module.state_dict().items():
            registry[f"{prefix}.{name}"] = tensor.detach()
    return registry


def registry_bytes(registry: "OrderedDict[str, torch.Tensor]") -> bytes:
    return b"".join(
        np.ascontiguousarray(t.cpu().numpy(), dtype='<f4').tobytes(order='C') for t in registry.values()
    )


@dataclass
class Checkpoint:
    """A loaded checkpoint directory"""
    path: Path
    arch: Dict[str, Any]
    meta: Dict[str, Any]
    tensors: "OrderedDict[str, torch.Tensor]"

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.arch["config"])

    def load_into(self, prefix: str, module: nn.Module) -> None:
        """Copy the tensors stored under prefix into module"""
        head = f"{prefix}."
        state = OrderedDict((k[len(head):], v) for k, v in self.tensors.items() if k.startswith(head))
        try:
            module.load_state_dict(state, strict=True)
        except RuntimeError as e:
            raise ConfigError(f"Checkpoint {self.path} does not fit {type(module).__name__}: {e}") from e


def save_checkpoint(path, modules: Dict[str, nn.Module], model_config: ModelConfig, step: int, seed: int,
                    schedule: Dict[str, Any], extra: Optional[Dict[str, Any]] = None) -> Path:
    """
    Write a checkpoint directory, replacing any previous one at path

    Args:
        path: checkpoint directory
        modules: prefix -> module (e.g. generator, discriminator, adm_encoder)
        model_config: generator architecture echoed into arch.json
        step: optimizer steps taken
        seed: run seed
        schedule: learning-rate schedule state
        extra: additional architecture details (e.g. ADM channel lists)

    Returns:
        The checkpoint directory
    """
    path = Path(path)
    staging = path.with_name(path.name + ".tmp")
    if staging.exists():
        shutil.rmtree(staging)
    staging.mkdir(parents=True)

    registry = state_registry(modules)
    entries, offset = [], 0
    for name, tensor in registry.items():
        entries.append({"name": name, "shape": list(tensor.shape), "offset": offset, "numel": tensor.numel()})
        offset += tensor.numel()
    weights = registry_bytes(registry)
    arch = {
        "format_version": CHECKPOINT_FORMAT,
        "config": model_config.to_dict(),
        "extra": extra or {},
        "tensors": entries,
        "total_floats": offset,
    }
    arch_text = json.dumps(arch, indent=2, sort_keys=True) + "\n"
    meta = {
        "step": int(step),
        "seed": int(seed),
        "schedule": schedule,
        "weights_sha256": _sha256_bytes(weights),
        "arch_sha256": _sha256_bytes(arch_text.encode('utf-8')),
    }
    (staging / CheckpointFiles.WEIGHTS).write_bytes(weights)
    (staging / CheckpointFiles.ARCH).write_text(arch_text, encoding='utf-8')
    (staging / CheckpointFiles.META).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding='utf-8')

    if path.exists():
        shutil.rmtree(path)
    staging.rename(path)
    logger.info(f"Saved checkpoint at step {step} to {path}")
    return path


def load_checkpoint(path) -> Checkpoint:
    """Read and verify a checkpoint directory"""
    path = Path(path)
    files = {name: path / name for name in (CheckpointFiles.WEIGHTS, CheckpointFiles.ARCH, CheckpointFiles.META)}
    for name, file_path in files.items():
        if not file_path.exists():
            raise CorruptCheckpoint(f"Checkpoint {path} is missing {name}")
    try:
        arch_text = files[CheckpointFiles.ARCH].read_text(encoding='utf-8')
        arch = json.loads(arch_text)
        meta = json.loads(files[CheckpointFiles.META].read_text(encoding='utf-8'))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise CorruptCheckpoint(f"Checkpoint {path} has unreadable metadata: {e}") from e

    weights = files[CheckpointFiles.WEIGHTS].read_bytes()
    if len(weights) != 4 * arch.get("total_floats", -1):
        raise CorruptCheckpoint(
            f"{files[CheckpointFiles.WEIGHTS]} holds {len(weights)} bytes, expected {4 * arch.get('total_floats', 0)}"
        )
    if _sha256_bytes(weights) != meta.get("weights_sha256"):
        raise CorruptCheckpoint(f"{files[CheckpointFiles.WEIGHTS]} fails hash verification")
    if _sha256_bytes(arch_text.encode('utf-8')) != meta.get("arch_sha256"):
        raise CorruptCheckpoint(f"{files[CheckpointFiles.ARCH]} fails hash verification")

    flat = np.frombuffer(weights, dtype='<f4')
    tensors = OrderedDict()
    for entry in arch["tensors"]:
        chunk = flat[entry["offset"]:entry["offset"] + entry["numel"]]
        tensors[entry["name"]] = torch.from_numpy(chunk.astype(np.float32)).reshape(entry["shape"])
    logger.info(f"Loaded checkpoint {path} (step {meta.get('step')})")
    return Checkpoint(path=path, arch=arch, meta=meta, tensors=tensors)


def build_generator(checkpoint: Checkpoint) -> DSRNet:
    """Generator described by a checkpoint, with its weights loaded"""
    model = DSRNet(checkpoint.model_config)
    checkpoint.load_into("generator", model)
    return model


# ----------------------------------------------------------------------------
# Teacher
# ----------------------------------------------------------------------------

@dataclass
class TeacherStep:
    objective: torch.Tensor
    components: LossComponents
    forward: SRForward
    adversarial: Optional[AdversarialLosses]


def _forward(model: DSRNet, batch: Dict[str, torch.Tensor]) -> SRForward:
    return model(batch["lr"], batch["ref"], batch["ref_down"], batch["depth_lr"], batch["depth_ref"])


def teacher_losses(model: DSRNet, batch: Dict[str, torch.Tensor], weights: LossWeights, terms: Sequence[str],
                   disc: Optional[Discriminator] = None, extractor: Optional[nn.Module] = None) -> TeacherStep:
    """
    Generator-side objective for one batch

    The adversarial slot of the objective holds lambda_G * L_G; the logged
    components keep the full L_adv.
    """
    fwd = _forward(model, batch)
    hr = batch["hr"]
    components = LossComponents(rec=reconstruction_loss(fwd.sr, hr))
    objective_terms = LossComponents(rec=components.rec)
    if "dep" in terms:
        components.dep = objective_terms.dep = depth_loss(fwd.depth_lr, fwd.depth_refdown,
                                                          batch["depth_lr"], batch["depth_ref"])
    if "per" in terms:
        components.per = objective_terms.per = perceptual_loss(fwd.sr, hr, extractor)
    adversarial = None
    if "adv" in terms:
        adversarial = adversarial_losses(disc, hr, fwd.sr, weights)
        components.adv = adversarial.adv
        objective_terms.adv = weights.g * adversarial.g
    objective = total_loss(objective_terms, weights.restricted(terms))
    return TeacherStep(objective=objective, components=components, forward=fwd, adversarial=adversarial)


def _loader(records: Sequence[SampleRecord], batch_size: int, generator: torch.Generator) -> DataLoader:
    if not records:
        raise ConfigError("Training needs a nonempty dataset")
    return DataLoader(SampleTensorDataset(records), batch_size=batch_size, shuffle=True,
                      generator=generator, num_workers=0)


def _batches(loader: DataLoader, total_steps: int):
    step = 0
    while step < total_steps:
        for batch in loader:
            if step >= total_steps:
                return
            step += 1
            yield step, batch


class _CsvLog:
    """Append-only train_log.csv writer"""

    def __init__(self, path: Path, columns: List[str]):
        self.path = path
        self.file = open(path, 'w', newline='', encoding='utf-8')
        self.writer = csv.DictWriter(self.file, fieldnames=columns)
        self.writer.writeheader()

    def write(self, row: Dict[str, Any]) -> None:
        self.writer.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()})
        self.file.flush()

    def close(self) -> None:
        self.file.close()


def _schedule_state(cfg: TrainConfig, total: int, step: int) -> Dict[str, Any]:
    return {
        "kind": "cosine",
        "lr0": cfg.lr0,
        "eta_min": cfg.eta_min,
        "total_steps": total,
        "lr": lr_schedule(min(step, total), total, cfg.lr0, cfg.eta_min),
    }


def _lambda(cfg: TrainConfig, total: int):
    return lambda t: lr_schedule(min(t, total), total, cfg.lr0, cfg.eta_min) / cfg.lr0


def _adam(params, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=cfg.lr0, betas=(cfg.beta1, cfg.beta2))


def teacher_model_config(config: DSRLabConfig, mode: str) -> ModelConfig:
    depth_source = TEACHER_MODE_TABLE[mode][0] if mode in TEACHER_MODE_TABLE else DepthSources.NET
    return ModelConfig.from_sections(config.model, config.match, depth_source=depth_source)


def train_teacher(config: DSRLabConfig, records: Sequence[SampleRecord], out_dir) -> TrainResult:
    """
    Train the teacher generator (and discriminator when the mode uses L_adv)

    Args:
        config: resolved configuration; trainer.mode must be a teacher mode
        records: training samples
        out_dir: receives train_log.csv, last_good/ and final/

    Returns:
        TrainResult pointing at the final checkpoint
    """
    cfg = TrainConfig.from_config(config)
    if cfg.mode not in TEACHER_MODE_TABLE:
        raise ConfigError(f"{cfg.mode!r} is not a teacher mode")
    terms = TEACHER_MODE_TABLE[cfg.mode][1]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    generator = set_determinism(cfg.seed, cfg.num_threads)
    model_cfg = teacher_model_config(config, cfg.mode)
    model = DSRNet(model_cfg)
    weights = LossWeights.from_config(config.loss)
    disc = Discriminator(model_cfg.disc_channels) if "adv" in terms else None
    extractor = None
    if "per" in terms:
        extractor = build_feature_extractor(config.loss.get("extractor", "vgg19"),
                                            config.loss["perceptual_layer"], config.cache_dir)

    loader = _loader(records, cfg.batch_size, generator)
    total = cfg.total_steps(len(records))
    opt_g = _adam(model.parameters(), cfg)
    sched_g = LambdaLR(opt_g, _lambda(cfg, total))
    opt_d = sched_d = None
    if disc is not None:
        opt_d = _adam(disc.parameters(), cfg)
        sched_d = LambdaLR(opt_d, _lambda(cfg, total))

    modules = {"generator": model}
    if disc is not None:
        modules["discriminator"] = disc
    last_good = out / CheckpointFiles.LAST_GOOD
    save_checkpoint(last_good, modules, model_cfg, 0, cfg.seed, _schedule_state(cfg, total, 0))

    log = _CsvLog(out / RunFiles.TRAIN_LOG, TEACHER_LOG_COLUMNS)
    logger.info(f"Training teacher ({cfg.mode}, terms {', '.join(terms)}) for {total} steps on {len(records)} samples")
    row: Dict[str, Any] = {}
    try:
        model.train()
        for step, batch in _batches(loader, total):
            lr = opt_g.param_groups[0]["lr"]
            if disc is not None:
                disc.requires_grad_(False)
            opt_g.zero_grad(set_to_none=True)
            result = teacher_losses(model, batch, weights, terms, disc, extractor)
            result.objective.backward()
            nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt_g.step()

            loss_d = torch.zeros(())
            if disc is not None:
                disc.requires_grad_(True)
                sr = result.forward.sr.detach()
                for _ in range(cfg.d_steps_per_g):
                    opt_d.zero_grad(set_to_none=True)
                    loss_d = adversarial_losses(disc, batch["hr"], sr, weights).d
                    check_finite({"d": loss_d})
                    (weights.d * loss_d).backward()
                    nn.utils.clip_grad_norm_(disc.parameters(), cfg.grad_clip)
                    opt_d.step()
                sched_d.step()
            sched_g.step()

            adversarial = result.adversarial
            row = {
                "step": step,
                "lr": float(lr),
                "l_dep": float(result.components.dep),
                "l_rec": float(result.components.rec),
                "l_per": float(result.components.per),
                "l_g": float(adversarial.g) if adversarial is not None else 0.0,
                "l_d": float(loss_d),
                "l_adv": float(result.components.adv),
                "total": float(result.objective),
            }
            log.write(row)
            if step % cfg.log_every == 0 or step == 1:
                logger.info(f"step {step}/{total} total={row['total']:.6f} rec={row['l_rec']:.6f} lr={lr:.3e}")
            if step % cfg.ckpt_every == 0:
                save_checkpoint(last_good, modules, model_cfg, step, cfg.seed, _schedule_state(cfg, total, step))
    except NonFiniteLoss as e:
        logger.error(f"Aborting teacher training: {e}; last good checkpoint kept at {last_good}")
        raise
    finally:
        log.close()

    final = save_checkpoint(out / CheckpointFiles.FINAL, modules, model_cfg, total, cfg.seed,
                            _schedule_state(cfg, total, total))
    return TrainResult(checkpoint=final, log_path=log.path, steps=total, last_row=row)


# ----------------------------------------------------------------------------
# Student
# ----------------------------------------------------------------------------

def _architecture(model_cfg_dict: Dict[str, Any]) -> Dict[str, Any]:
    arch = dict(model_cfg_dict)
    arch.pop("depth_source", None)
    return arch


def load_frozen_teacher(config: DSRLabConfig, teacher_ckpt) -> DSRNet:
    """Load the teacher declared by config.model and freeze it"""
    checkpoint = load_checkpoint(teacher_ckpt)
    declared = ModelConfig.from_sections(config.model, config.match, depth_source=checkpoint.model_config.depth_source)
    if _architecture(checkpoint.arch["config"]) != _architecture(declared.to_dict()):
        raise ConfigError(
            f"Teacher checkpoint {teacher_ckpt} architecture {checkpoint.arch['config']} "
            f"does not match the declared teacher {declared.to_dict()}"
        )
    teacher = build_generator(checkpoint)
    teacher.eval()
    teacher.requires_grad_(False)
    return teacher


def student_model_config(config: DSRLabConfig) -> ModelConfig:
    student = ModelConfig.from_sections(config.model, config.match, student=config.student)
    teacher_blocks = int(config.model["res_blocks_per_stage"])
    if student.encoder.res_blocks_per_stage >= teacher_blocks:
        raise ConfigError(
            f"student res_blocks_per_stage ({student.encoder.res_blocks_per_stage}) must be below "
            f"the teacher's ({teacher_blocks})"
        )
    return student


@dataclass
class StudentStep:
    objective: torch.Tensor
    l_rec: torch.Tensor
    l_kd: torch.Tensor
    l_ad: torch.Tensor
    entropy_encoder: Optional[float]
    entropy_depth: Optional[float]


def student_losses(student: DSRNet, teacher: DSRNet, adm_encoder: AttentionDistillationModule,
                   adm_depth: AttentionDistillationModule, batch: Dict[str, torch.Tensor],
                   weights: DistillWeights, terms: Sequence[str]) -> StudentStep:
    """Student objective for one batch; the teacher runs without gradients"""
    with torch.no_grad():
        t = _forward(teacher, batch)
    s = _forward(student, batch)
    zero = s.sr.new_zeros(())
    l_rec = reconstruction_loss(s.sr, batch["hr"])
    l_kd = output_distill_loss(s.sr, t.sr) if "kd" in terms else zero
    l_ad, entropy_encoder, entropy_depth = zero, None, None
    if "ad" in terms:
        ad = attention_distill_loss(
            FeatureSet(t.enc_feats, "teacher-encoder"), FeatureSet(s.enc_feats, "student-encoder"),
            FeatureSet(t.dep_feats, "teacher-depth"), FeatureSet(s.dep_feats, "student-depth"),
            adm_encoder, adm_depth,
        )
        l_ad = ad.total
        entropy_encoder = float(row_entropy(ad.alpha_encoder).mean())
        entropy_depth = float(row_entropy(ad.alpha_depth).mean())
    objective = student_objective(l_rec, l_kd, l_ad, weights.restricted(terms))
    return StudentStep(objective, l_rec, l_kd, l_ad, entropy_encoder, entropy_depth)


def train_student_distill(config: DSRLabConfig, teacher_ckpt, records: Sequence[SampleRecord],
                          out_dir) -> TrainResult:
    """
    Train the student against a frozen teacher

    Args:
        config: resolved configuration; trainer.mode must be a student mode
        teacher_ckpt: teacher checkpoint directory
        records: training samples
        out_dir: receives train_log.csv, last_good/ and final/

    Returns:
        TrainResult pointing at the final student checkpoint
    """
    cfg = TrainConfig.from_config(config)
    if cfg.mode not in STUDENT_MODE_TABLE:
        raise ConfigError(f"{cfg.mode!r} is not a student mode")
    terms = STUDENT_MODE_TABLE[cfg.mode]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    generator = set_determinism(cfg.seed, cfg.num_threads)
    teacher = load_frozen_teacher(config, teacher_ckpt)
    student_cfg = student_model_config(config)
    student = DSRNet(student_cfg)
    embed_dim = int(config.distill["embed_dim"])
    adm_encoder = AttentionDistillationModule(teacher.feature_channels(), student.feature_channels(), embed_dim)
    adm_depth = AttentionDistillationModule(teacher.feature_channels(), student.feature_channels(), embed_dim)
    weights = DistillWeights.from_config(config.distill)

    params = list(student.parameters())
    if "ad" in terms:
        params += list(adm_encoder.parameters()) + list(adm_depth.parameters())
    loader = _loader(records, cfg.batch_size, generator)
    total = cfg.total_steps(len(records))
    optimizer = _adam(params, cfg)
    scheduler = LambdaLR(optimizer, _lambda(cfg, total))

    modules = {"generator": student, "adm_encoder": adm_encoder, "adm_depth": adm_depth}
    extra = {
        "embed_dim": embed_dim,
        "teacher_channels": teacher.feature_channels(),
        "student_channels": student.feature_channels(),
        "teacher_checkpoint": str(teacher_ckpt),
    }
    last_good = out / CheckpointFiles.LAST_GOOD
    save_checkpoint(last_good, modules, student_cfg, 0, cfg.seed, _schedule_state(cfg, total, 0), extra)

    log = _CsvLog(out / RunFiles.TRAIN_LOG, STUDENT_LOG_COLUMNS)
    logger.info(f"Distilling student ({cfg.mode}, terms {', '.join(terms)}) for {total} steps")
    row: Dict[str, Any] = {}
    try:
        student.train()
        for step, batch in _batches(loader, total):
            lr = optimizer.param_groups[0]["lr"]
            optimizer.zero_grad(set_to_none=True)
            result = student_losses(student, teacher, adm_encoder, adm_depth, batch, weights, terms)
            result.objective.backward()
            nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            optimizer.step()
            scheduler.step()
            row = {
                "step": step,
                "lr": float(lr),
                "l_rec": float(result.l_rec),
                "l_kd": float(result.l_kd),
                "l_ad": float(result.l_ad),
                "total": float(result.objective),
                "alpha_entropy_encoder": "" if result.entropy_encoder is None else result.entropy_encoder,
                "alpha_entropy_depth": "" if result.entropy_depth is None else result.entropy_depth,
            }
            log.write(row)
            if step % cfg.log_every == 0 or step == 1:
                logger.info(f"step {step}/{total} total={row['total']:.6f} rec={row['l_rec']:.6f} lr={lr:.3e}")
            if step % cfg.ckpt_every == 0:
                save_checkpoint(last_good, modules, student_cfg, step, cfg.seed,
                                _schedule_state(cfg, total, step), extra)
    except NonFiniteLoss as e:
        logger.error(f"Aborting distillation: {e}; last good checkpoint kept at {last_good}")
        raise
    finally:
        log.close()

    final = save_checkpoint(out / CheckpointFiles.FINAL, modules, student_cfg, total, cfg.seed,
                            _schedule_state(cfg, total, total), extra)
    return TrainResult(checkpoint=final, log_path=log.path, steps=total, last_row=row)


def train(config: DSRLabConfig, records: Sequence[SampleRecord], out_dir,
          teacher_ckpt: Optional[str] = None) -> TrainResult:
    """Dispatch on trainer.mode"""
    mode = config.trainer["mode"]
    if mode in TEACHER_MODE_TABLE:
        return train_teacher(config, records, out_dir)
    if mode in STUDENT_MODE_TABLE:
        if teacher_ckpt is None:
            raise ConfigError(f"mode {mode} needs a teacher checkpoint")
        return train_student_distill(config, teacher_ckpt, records, out_dir)
    raise ConfigError(f"Unknown training mode {mode!r}")
