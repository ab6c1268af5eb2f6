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
DSRLab Command Line

Single entry point for the pipeline: synthesize data, train the teacher,
distill a student, evaluate, run inference, benchmark model sizes and run
the ablation grids. Every command writes resolved_config.json and
provenance.json next to its outputs.

Usage:
    python dsrlab.py synth --n 200 --seed 7 --out data/
    python dsrlab.py train --data data/ --out runs/teacher --mode teacher-rec-dep --preset toy
    python dsrlab.py distill --data data/ --teacher-ckpt runs/teacher/final --out runs/student
    python dsrlab.py eval --ckpt runs/teacher/final --data data/ --out runs/eval
    python dsrlab.py ablate --out runs/ablate --preset toy

Requirements:
    pip install -r requirements.txt
"""

# Standard library imports
import argparse
import json
import logging
import platform
import subprocess
import sys

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

# Third-party imports
import numpy as np
import torch
from PIL import Image
from tabulate import tabulate

# Local imports
from dsrlab_config import PRESETS, DSRLabConfig
from dsrlab_constants import CheckpointFiles, RunFiles, TrainModes, VERSION
from dsrlab_errors import ConfigError, DSRLabError
from evalkit import (benchmark_models, evaluate_dataset, evaluate_model, super_resolve, write_table_csv,
                     write_table_html)
from synthgen import dataset_read, generate_dataset, generate_records, split_records
from trainer import build_generator, load_checkpoint, student_model_config, teacher_model_config, train

logger = logging.getLogger(__name__)

COMMANDS = ("synth", "train", "distill", "eval", "infer", "bench", "ablate")

# rows of the depth-source grid and the distillation-loss grid
DEPTH_GRID = [
    ("L_rec only", TrainModes.TEACHER_REC_ONLY),
    ("+ depth GT", TrainModes.TEACHER_DEPTH_GT),
    ("+ depth net", TrainModes.TEACHER_REC_DEP),
]
DISTILL_GRID = [
    ("L_rec", TrainModes.STUDENT_PLAIN),
    ("L_rec + L_kd", TrainModes.STUDENT_KD),
    ("L_rec + L_ad", TrainModes.STUDENT_AD),
    ("L_rec + L_kd + L_ad", TrainModes.STUDENT_DISTILL),
]
ABLATION_COLUMNS = ["grid", "row", "mode", "seed", "PSNR", "SSIM", "bicubic PSNR"]


def setup_logging(level: str = "INFO") -> None:
    """Setup logging configuration with { style formatting"""
    logging.basicConfig(
        level=getattr(logging, level.upper()),
        format='{asctime} - {name} - {levelname} - {message}',
        style='{',
        datefmt='%Y-%m-%d %H:%M:%S'
    )


@dataclass
class CommandLine:
    """Parsed command line for one dsrlab invocation"""
    command: str
    config: Optional[str] = None
    preset: Optional[str] = None
    overrides: List[str] = field(default_factory=list)
    seed: Optional[int] = None
    out: Optional[str] = None
    n: Optional[int] = None
    ckpt: Optional[str] = None
    data: Optional[str] = None
    teacher_ckpt: Optional[str] = None
    mode: Optional[str] = None
    workers: Optional[int] = None
    log_level: str = "INFO"

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> 'CommandLine':
        """Create CommandLine instance from argparse Namespace"""
        return cls(
            command=args.command,
            config=args.config,
            preset=args.preset,
            overrides=list(args.set or []),
            seed=args.seed,
            out=args.out,
            n=getattr(args, 'n', None),
            ckpt=getattr(args, 'ckpt', None),
            data=getattr(args, 'data', None),
            teacher_ckpt=getattr(args, 'teacher_ckpt', None),
            mode=getattr(args, 'mode', None),
            workers=args.workers,
            log_level=args.log_level,
        )

    @property
    def out_dir(self) -> Path:
        if self.out:
            return Path(self.out)
        return Path(RunFiles.DEFAULT_OUT_ROOT) / self.command

    def resolve_config(self) -> DSRLabConfig:
        """Defaults, then config file, preset, --set overrides and finally the dedicated flags"""
        config = DSRLabConfig(self.config, preset=self.preset, overrides=self.overrides)
        if self.seed is not None:
            config.seed = self.seed
        if self.mode is not None:
            config.set("trainer.mode", self.mode)
        elif self.command == "distill" and config.trainer["mode"] not in TrainModes.STUDENT:
            config.set("trainer.mode", TrainModes.STUDENT_DISTILL)
        if self.workers is not None:
            config.set("data.workers", self.workers)
        return config


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='JSON configuration file merged over the defaults')
    common.add_argument('--preset', choices=sorted(PRESETS), help='Named preset applied before --set')
    common.add_argument('--set', action='append', metavar='KEY=VALUE',
                        help='Dotted configuration override, repeatable (e.g. trainer.lr0=1e-4)')
    common.add_argument('--seed', type=int, help='Experiment seed (default: config seed)')
    common.add_argument('--out', help='Output directory (default: runs/<command>)')
    common.add_argument('--workers', type=int, help='Worker processes for data synthesis')
    common.add_argument('--log-level', default='INFO', choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'],
                        help='Logging level (default: INFO)')

    parser = argparse.ArgumentParser(prog='dsrlab', description='Depth-guided reference-based super-resolution lab')
    sub = parser.add_subparsers(dest='command', required=True, metavar='{' + ','.join(COMMANDS) + '}')

    synth = sub.add_parser('synth', parents=[common], help='Synthesize a pipe-scene dataset')
    synth.add_argument('--n', type=int, required=True, help='Number of samples')

    for name, help_text in (('train', 'Train a teacher (or a student with --teacher-ckpt)'),
                            ('distill', 'Distill a student from a teacher checkpoint')):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument('--data', required=True, help='Dataset directory')
        p.add_argument('--mode', choices=TrainModes.ALL, help='Training mode (default: trainer.mode)')
        p.add_argument('--teacher-ckpt', required=(name == 'distill'), help='Teacher checkpoint directory')

    for name, help_text in (('eval', 'Evaluate a checkpoint against the bicubic baseline'),
                            ('infer', 'Write SR images for every sample')):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument('--ckpt', required=True, help='Checkpoint directory')
        p.add_argument('--data', required=True, help='Dataset directory')

    sub.add_parser('bench', parents=[common], help='Parameter, MAC and latency table for teacher and student')
    sub.add_parser('ablate', parents=[common], help='Depth-source and distillation-loss ablation grids')
    return parser


def _git_revision() -> Optional[str]:
    try:
        result = subprocess.run(['git', 'rev-parse', 'HEAD'], cwd=Path(__file__).resolve().parent,
                                capture_output=True, text=True, check=True)
        return result.stdout.strip() or None
    except (OSError, subprocess.CalledProcessError):
        return None


def provenance(command: str, config: DSRLabConfig) -> Dict[str, Any]:
    """Seed, versions and source revision; nothing run-specific such as paths or times"""
    return {
        "command": command,
        "seed": config.seed,
        "version": VERSION,
        "git_revision": _git_revision(),
        "python": platform.python_version(),
        "torch": torch.__version__,
        "numpy": np.__version__,
    }


def write_run_files(out: Path, command: str, config: DSRLabConfig) -> Dict[str, Any]:
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / RunFiles.RESOLVED_CONFIG)
    prov = provenance(command, config)
    (out / RunFiles.PROVENANCE).write_text(json.dumps(prov, indent=2, sort_keys=True) + "\n", encoding='utf-8')
    return prov


def _hr_size(config: DSRLabConfig):
    return int(config.data["hr_height"]), int(config.data["hr_width"])


def cmd_synth(cmd: CommandLine, config: DSRLabConfig, out: Path) -> None:
    data = config.data
    generate_dataset(cmd.n, config.seed, out, camera_step=float(data["camera_step"]), hr_size=_hr_size(config),
                     scale=int(data["scale"]), far_clip=float(data["far_clip"]), workers=int(data["workers"]))
    write_run_files(out, "synth", config)


def cmd_train(cmd: CommandLine, config: DSRLabConfig, out: Path) -> None:
    prov = write_run_files(out, cmd.command, config)
    records = dataset_read(cmd.data)
    train_records, held_out = split_records(records, float(config.data["holdout_fraction"]))
    prov["train_samples"] = [r.sample_id for r in train_records]
    prov["held_out_samples"] = [r.sample_id for r in held_out]
    (out / RunFiles.PROVENANCE).write_text(json.dumps(prov, indent=2, sort_keys=True) + "\n", encoding='utf-8')
    result = train(config, train_records, out, teacher_ckpt=cmd.teacher_ckpt)
    print(f"✅ Trained {result.steps} steps; checkpoint at {result.checkpoint}")


def cmd_eval(cmd: CommandLine, config: DSRLabConfig, out: Path) -> None:
    prov = write_run_files(out, "eval", config)
    records = dataset_read(cmd.data)
    flops_input = (int(config.eval["flops_height"]), int(config.eval["flops_width"]))
    report = evaluate_dataset(cmd.ckpt, records, out, flops_input=flops_input, provenance=prov)
    print(tabulate(report.table_rows(), headers=["method", "PSNR", "SSIM", "FLOPs(G)", "Params(M)"],
                   tablefmt="github", disable_numparse=True))


def cmd_infer(cmd: CommandLine, config: DSRLabConfig, out: Path) -> None:
    write_run_files(out, "infer", config)
    model = build_generator(load_checkpoint(cmd.ckpt))
    model.eval()
    sr_dir = out / "sr"
    sr_dir.mkdir(parents=True, exist_ok=True)
    records = dataset_read(cmd.data)
    for record in records:
        sr = super_resolve(model, record)
        levels = np.round(sr * 255.0).astype(np.uint8)
        Image.fromarray(levels, mode='RGB').save(sr_dir / f"{record.sample_id}.png", format='PNG')
    print(f"✅ Wrote {len(records)} SR images to {sr_dir}")


def cmd_bench(cmd: CommandLine, config: DSRLabConfig, out: Path) -> None:
    write_run_files(out, "bench", config)
    configs = {
        "teacher": teacher_model_config(config, TrainModes.TEACHER_FULL),
        "student": student_model_config(config),
    }
    input_size = (int(config.eval["flops_height"]), int(config.eval["flops_width"]))
    rows = benchmark_models(configs, input_size, int(config.eval["bench_repeats"]))
    (out / RunFiles.BENCH_JSON).write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n", encoding='utf-8')
    columns = list(rows[0].keys())
    write_table_csv(out / RunFiles.BENCH_CSV, columns, [[row[c] for c in columns] for row in rows])
    print(tabulate([[row[c] for c in columns] for row in rows], headers=columns, tablefmt="github"))


def _run_mode(base: DSRLabConfig, mode: str, seed: int, records, out: Path, teacher_ckpt=None):
    config = DSRLabConfig.from_dict(base.get_config_dict())
    config.seed = seed
    config.set("trainer.mode", mode)
    return train(config, records, out, teacher_ckpt=teacher_ckpt)


def run_ablation(config: DSRLabConfig, out: Path) -> Tuple[List[Dict[str, Any]], bool]:
    """
    Train and evaluate every row of both grids for every seed in ablate.seeds

    Returns:
        the per-run rows, and whether every teacher's weights were left
        byte-identical by the student runs distilled from it
    """
    rows = []
    teacher_intact = True
    data = config.data
    flops_input = (int(config.eval["flops_height"]), int(config.eval["flops_width"]))
    for seed in config.ablate["seeds"]:
        records = generate_records(int(config.ablate["n"]), int(seed), float(data["camera_step"]), _hr_size(config),
                                   int(data["scale"]), float(data["far_clip"]), int(data["workers"]))
        train_records, held_out = split_records(records, float(data["holdout_fraction"]))
        seed_dir = out / f"seed_{seed}"
        teacher_ckpt = None
        teacher_weights = b""
        for grid, entries in (("depth", DEPTH_GRID), ("distill", DISTILL_GRID)):
            for label, mode in entries:
                run_dir = seed_dir / mode
                result = _run_mode(config, mode, int(seed), train_records, run_dir, teacher_ckpt)
                if mode == TrainModes.TEACHER_REC_DEP:
                    teacher_ckpt = result.checkpoint
                    teacher_weights = (teacher_ckpt / CheckpointFiles.WEIGHTS).read_bytes()
                model = build_generator(load_checkpoint(result.checkpoint))
                report = evaluate_model(model, held_out, label, flops_input=flops_input)
                rows.append({
                    "grid": grid,
                    "row": label,
                    "mode": mode,
                    "seed": int(seed),
                    "psnr": report.mean_sr_psnr,
                    "ssim": report.mean_sr_ssim,
                    "bicubic_psnr": report.mean_bicubic_psnr,
                })
                logger.info(f"seed {seed} {mode}: {report.mean_sr_psnr:.4f} dB")
        if teacher_ckpt is not None and (teacher_ckpt / CheckpointFiles.WEIGHTS).read_bytes() != teacher_weights:
            logger.error(f"seed {seed}: distillation modified the teacher checkpoint {teacher_ckpt}")
            teacher_intact = False
    return rows, teacher_intact


def summarize_ablation(rows: Sequence[Dict[str, Any]]) -> List[Dict[str, Any]]:
    """Mean PSNR/SSIM per (grid, row) over seeds, in grid order"""
    summary = []
    for grid, entries in (("depth", DEPTH_GRID), ("distill", DISTILL_GRID)):
        for label, mode in entries:
            matching = [r for r in rows if r["grid"] == grid and r["mode"] == mode]
            if not matching:
                continue
            summary.append({
                "grid": grid,
                "row": label,
                "mode": mode,
                "seed": "mean",
                "psnr": sum(r["psnr"] for r in matching) / len(matching),
                "ssim": sum(r["ssim"] for r in matching) / len(matching),
                "bicubic_psnr": sum(r["bicubic_psnr"] for r in matching) / len(matching),
            })
    return summary


def ablation_trends(summary: Sequence[Dict[str, Any]], min_gain_db: float, tolerance_db: float,
                    teacher_intact: bool = True) -> Dict[str, Dict[str, Any]]:
    """
    Directional checks over the seed-averaged ablation rows

    - sr_over_bicubic: the depth-net teacher beats bicubic by min_gain_db
    - depth_gt_over_rec_only: feeding ground-truth depth does not lose to no depth
    - depth_net_near_depth_gt: learned depth lands within tolerance_db of ground truth
    - distill_over_plain: the full distillation objective does not lose to L_rec alone
    - teacher_unchanged: distillation never wrote to the teacher checkpoint

    Raises:
        ConfigError: a grid row the checks need is missing from the summary
    """
    by_mode = {row["mode"]: row for row in summary}
    needed = [TrainModes.TEACHER_REC_ONLY, TrainModes.TEACHER_DEPTH_GT, TrainModes.TEACHER_REC_DEP,
              TrainModes.STUDENT_PLAIN, TrainModes.STUDENT_DISTILL]
    missing = [mode for mode in needed if mode not in by_mode]
    if missing:
        raise ConfigError(f"Ablation summary lacks the rows {missing}")

    def psnr(mode: str) -> float:
        return float(by_mode[mode]["psnr"])

    gain = psnr(TrainModes.TEACHER_REC_DEP) - float(by_mode[TrainModes.TEACHER_REC_DEP]["bicubic_psnr"])
    depth_gt_gain = psnr(TrainModes.TEACHER_DEPTH_GT) - psnr(TrainModes.TEACHER_REC_ONLY)
    depth_net_gap = abs(psnr(TrainModes.TEACHER_REC_DEP) - psnr(TrainModes.TEACHER_DEPTH_GT))
    distill_gain = psnr(TrainModes.STUDENT_DISTILL) - psnr(TrainModes.STUDENT_PLAIN)
    return {
        "sr_over_bicubic": {"value": gain, "threshold": min_gain_db, "holds": gain >= min_gain_db},
        "depth_gt_over_rec_only": {"value": depth_gt_gain, "threshold": 0.0, "holds": depth_gt_gain >= 0.0},
        "depth_net_near_depth_gt": {"value": depth_net_gap, "threshold": tolerance_db,
                                    "holds": depth_net_gap <= tolerance_db},
        "distill_over_plain": {"value": distill_gain, "threshold": 0.0, "holds": distill_gain >= 0.0},
        "teacher_unchanged": {"value": teacher_intact, "threshold": True, "holds": teacher_intact},
    }


def _table(rows: Sequence[Dict[str, Any]]) -> List[List[Any]]:
    return [[r["grid"], r["row"], r["mode"], r["seed"], f"{r['psnr']:.4f}", f"{r['ssim']:.4f}",
             f"{r['bicubic_psnr']:.4f}"] for r in rows]


def cmd_ablate(cmd: CommandLine, config: DSRLabConfig, out: Path) -> None:
    write_run_files(out, "ablate", config)
    rows, teacher_intact = run_ablation(config, out)
    summary = summarize_ablation(rows)
    trends = ablation_trends(summary, float(config.ablate["min_gain_db"]),
                             float(config.ablate["depth_net_tolerance_db"]), teacher_intact)
    payload = {"runs": rows, "summary": summary, "trends": trends}
    (out / RunFiles.ABLATION_JSON).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding='utf-8')
    table = _table(list(rows) + summary)
    write_table_csv(out / RunFiles.ABLATION_CSV, ABLATION_COLUMNS, table)
    write_table_html(out / RunFiles.ABLATION_HTML, "Ablation", ABLATION_COLUMNS, table)
    print(tabulate(_table(summary), headers=ABLATION_COLUMNS, tablefmt="github", disable_numparse=True))
    for name, check in trends.items():
        print(f"{'✅' if check['holds'] else '❌'} {name}: {check['value']} (threshold {check['threshold']})")


HANDLERS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "distill": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "bench": cmd_bench,
    "ablate": cmd_ablate,
}


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """Run one command; returns 0 on success, 2 on usage/config errors, 1 on runtime failure"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    setup_logging(args.log_level)
    cmd = CommandLine.from_args(args)

    try:
        config = cmd.resolve_config()
        HANDLERS[cmd.command](cmd, config, cmd.out_dir)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        parser.print_usage(sys.stderr)
        return 2
    except DSRLabError as e:
        logger.error(f"{cmd.command} failed: {type(e).__name__}: {e}")
        return 1
    except Exception as e:
        logger.exception(f"{cmd.command} failed unexpectedly: {e}")
        return 1
    return 0


def main():
    """Main function to handle command line arguments"""
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
