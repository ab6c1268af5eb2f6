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
DSRLab Configuration Management

This module provides a class-based approach to manage experiment
configuration: defaults, a JSON config file, presets and dotted-path
overrides. Every command echoes the resolved configuration next to its
outputs so that a run can be reproduced from that file alone.

Usage:
    python dsrlab_config.py --show [--config-file my.json] [--preset toy]
    python dsrlab_config.py --write-default dsrlab_config.json
"""

import copy
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

from dsrlab_constants import Defaults, EnvVars, TrainModes
from dsrlab_errors import ConfigError

logger = logging.getLogger(__name__)

# Default configuration file path
CONFIG_FILE = "dsrlab_config.json"

DEFAULT_CONFIG: Dict[str, Any] = {
    "seed": 0,
    "data": {
        "hr_height": Defaults.HR_SIZE[0],
        "hr_width": Defaults.HR_SIZE[1],
        "scale": Defaults.SCALE,
        "camera_step": Defaults.CAMERA_STEP,
        "far_clip": Defaults.FAR_CLIP,
        "holdout_fraction": 0.1,
        "workers": 1,
    },
    "model": {
        "base_channels": 64,
        "res_blocks_per_stage": 4,
        "depth_base_channels": 32,
        "unet_depth": 4,
        "disc_channels": 32,
    },
    "student": {
        "base_channels": 64,
        "res_blocks_per_stage": 2,
    },
    "match": {
        "patch": 3,
        "block_w": 8,
        "block_h": 8,
        "stride": 1,
        "eps": Defaults.MATCH_EPS,
        "coarse_search_stride": 1,
    },
    "loss": {
        "dep": 1.0,
        "rec": 1.0,
        "per": 1e-2,
        "adv": 5e-3,
        "g": 1.0,
        "d": 1.0,
        "perceptual_layer": "relu3_4",
        "extractor": "vgg19",
    },
    "distill": {
        "rec": 1.0,
        "kd": 0.5,
        "ad": 0.1,
        "embed_dim": 64,
    },
    "trainer": {
        "mode": TrainModes.TEACHER_FULL,
        "epochs": 250,
        "max_steps": None,
        "batch_size": 1,
        "lr0": 2e-4,
        "eta_min": 1e-7,
        "beta1": 0.9,
        "beta2": 0.999,
        "grad_clip": 10.0,
        "d_steps_per_g": 1,
        "log_every": 10,
        "ckpt_every": 500,
        "num_threads": 1,
    },
    "eval": {
        "flops_height": Defaults.FLOPS_INPUT[0],
        "flops_width": Defaults.FLOPS_INPUT[1],
        "bench_repeats": 3,
    },
    "ablate": {
        "seeds": [0, 1, 2],
        "n": 200,
        "min_gain_db": 0.3,
        "depth_net_tolerance_db": 0.3,
    },
    "cache": {
        "dir": None,
    },
}

PRESETS: Dict[str, Dict[str, Any]] = {
    "toy": {
        "model.base_channels": 16,
        "student.base_channels": 16,
        "ablate.n": 200,
        "trainer.max_steps": 2000,
        "trainer.ckpt_every": 500,
    },
}


def parse_override(text: str) -> tuple:
    """Split a 'dotted.key=value' override; the value is parsed as JSON when possible"""
    if '=' not in text:
        raise ConfigError(f"Override must look like key=value: {text!r}")
    key, raw = text.split('=', 1)
    key = key.strip()
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def _merge(base: Dict[str, Any], update: Dict[str, Any], prefix: str = "") -> None:
    """Recursively merge update into base, rejecting keys base does not know"""
    for key, value in update.items():
        dotted = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"Unknown configuration key: {dotted}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"Configuration section {dotted} must be an object")
            _merge(base[key], value, prefix=f"{dotted}.")
        else:
            base[key] = value


class ConfigCommandOptions:
    """Command line options for configuration management"""

    def __init__(self, show: bool = False, write_default: Optional[str] = None,
                 config_file: Optional[str] = None, preset: Optional[str] = None):
        self.show = show
        self.write_default = write_default
        self.config_file = config_file
        self.preset = preset

    @classmethod
    def from_args(cls, args):
        """Create ConfigCommandOptions from argparse Namespace"""
        return cls(
            show=args.show,
            write_default=args.write_default,
            config_file=args.config_file,
            preset=args.preset
        )

    def get_action(self) -> str:
        """Determine which action to take based on the options"""
        if self.write_default is not None:
            return 'write_default'
        elif self.show:
            return 'show'
        else:
            return 'help'


class DSRLabConfig:
    """Manage experiment configuration"""

    def __init__(self, config_file: Optional[str] = None, preset: Optional[str] = None,
                 overrides: Iterable[str] = ()):
        """
        Initialize the configuration

        Args:
            config_file: Optional JSON file merged over the defaults
            preset: Optional preset name (see PRESETS) applied before overrides
            overrides: Dotted 'key=value' strings applied last
        """
        self.config_file = Path(config_file) if config_file else None
        self._config = copy.deepcopy(DEFAULT_CONFIG)
        self._load_config()
        if preset:
            self.apply_preset(preset)
        self.apply_overrides(overrides)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'DSRLabConfig':
        """Build a configuration from an already resolved dictionary"""
        config = cls()
        _merge(config._config, data)
        return config

    def _load_config(self):
        """Load configuration from file"""
        if self.config_file is None:
            return
        if not self.config_file.exists():
            raise ConfigError(f"Configuration file not found: {self.config_file}")
        try:
            with open(self.config_file, 'r', encoding='utf-8') as f:
                user_config = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"Could not parse {self.config_file}: {e}") from e
        _merge(self._config, user_config)
        logger.debug(f"Loaded configuration from {self.config_file}")

    def _save_config(self, path: Path):
        """Save configuration to file"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self._config, f, indent=2, sort_keys=True)

    def save(self, path) -> Path:
        """Write the resolved configuration echo"""
        self._save_config(Path(path))
        return Path(path)

    def get(self, dotted: str) -> Any:
        """Get a value by dotted path"""
        node: Any = self._config
        for part in dotted.split('.'):
            if not isinstance(node, dict) or part not in node:
                raise ConfigError(f"Unknown configuration key: {dotted}")
            node = node[part]
        return node

    def set(self, dotted: str, value: Any) -> None:
        """Set a value by dotted path; the key must already exist"""
        parts = dotted.split('.')
        node = self._config
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"Unknown configuration key: {dotted}")
            node = node[part]
        if parts[-1] not in node or isinstance(node[parts[-1]], dict):
            raise ConfigError(f"Unknown configuration key: {dotted}")
        node[parts[-1]] = value

    def apply_overrides(self, overrides: Iterable[str]) -> None:
        """Apply dotted 'key=value' overrides"""
        for text in overrides or ():
            key, value = parse_override(text)
            self.set(key, value)
            logger.debug(f"Override {key} = {value!r}")

    def apply_preset(self, name: str) -> None:
        """Apply a named preset"""
        if name not in PRESETS:
            raise ConfigError(f"Unknown preset: {name} (known: {', '.join(sorted(PRESETS))})")
        for key, value in PRESETS[name].items():
            self.set(key, value)

    @property
    def seed(self) -> int:
        """Get the experiment seed"""
        return int(self._config['seed'])

    @seed.setter
    def seed(self, value: int):
        """Set the experiment seed"""
        self._config['seed'] = int(value)

    @property
    def data(self) -> Dict[str, Any]:
        """Get the data section"""
        return self._config['data']

    @property
    def model(self) -> Dict[str, Any]:
        """Get the teacher model section"""
        return self._config['model']

    @property
    def student(self) -> Dict[str, Any]:
        """Get the student model section"""
        return self._config['student']

    @property
    def match(self) -> Dict[str, Any]:
        """Get the DRIMM matching section"""
        return self._config['match']

    @property
    def loss(self) -> Dict[str, Any]:
        """Get the teacher loss weights"""
        return self._config['loss']

    @property
    def distill(self) -> Dict[str, Any]:
        """Get the distillation weights"""
        return self._config['distill']

    @property
    def trainer(self) -> Dict[str, Any]:
        """Get the trainer section"""
        return self._config['trainer']

    @property
    def eval(self) -> Dict[str, Any]:
        """Get the evaluation section"""
        return self._config['eval']

    @property
    def ablate(self) -> Dict[str, Any]:
        """Get the ablation section"""
        return self._config['ablate']

    @property
    def cache_dir(self) -> Path:
        """Feature-extractor weight cache: config, then DSRLAB_CACHE, then ~/.cache/dsrlab"""
        configured = self._config['cache'].get('dir')
        if configured:
            return Path(configured).expanduser()
        env_value = os.environ.get(EnvVars.CACHE)
        if env_value:
            return Path(env_value).expanduser()
        return Path.home() / ".cache" / "dsrlab"

    def get_config_dict(self) -> Dict[str, Any]:
        """Get configuration as dictionary"""
        return copy.deepcopy(self._config)


def main():
    """Main function for command line usage"""
    import argparse

    parser = argparse.ArgumentParser(description='DSRLab configuration management')
    parser.add_argument('--show', action='store_true', help='Show the resolved configuration')
    parser.add_argument('--write-default', nargs='?', const=CONFIG_FILE,
                        help=f'Write the default configuration (default: {CONFIG_FILE})')
    parser.add_argument('--config-file', help='Configuration file merged over the defaults')
    parser.add_argument('--preset', choices=sorted(PRESETS), help='Apply a preset')

    args = parser.parse_args()
    options = ConfigCommandOptions.from_args(args)

    # Use match statement to handle different actions
    match options.get_action():
        case 'write_default':
            path = DSRLabConfig().save(options.write_default)
            print(f"✅ Default configuration written to {path}")

        case 'show':
            config = DSRLabConfig(options.config_file, preset=options.preset)
            print(json.dumps(config.get_config_dict(), indent=2, sort_keys=True))
            print(f"Feature cache: {config.cache_dir}")

        case 'help':
            parser.print_help()


if __name__ == "__main__":
    main()
