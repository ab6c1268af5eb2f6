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
Shared fixtures: toy-sized configurations and a small synthetic record set.

Tests marked slow only run when DSRLAB_RUN_SLOW=1; the full toy-preset
ablation (marked acceptance) only runs when DSRLAB_RUN_ACCEPTANCE=1.
"""

import os
import sys

import pytest

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from dsrlab_config import DSRLabConfig
from dsrlab_constants import EnvVars

# HR 64x64, LR 16x16
TOY_HR = (64, 64)
TOY_OVERRIDES = [
    "data.hr_height=64",
    "data.hr_width=64",
    "model.base_channels=8",
    "model.res_blocks_per_stage=2",
    "model.depth_base_channels=8",
    "model.unet_depth=2",
    "model.disc_channels=8",
    "student.base_channels=8",
    "student.res_blocks_per_stage=1",
    "distill.embed_dim=8",
    "loss.extractor=identity",
    "trainer.batch_size=2",
    "trainer.log_every=1",
]


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: toy-scale training runs, enabled with DSRLAB_RUN_SLOW=1")
    config.addinivalue_line("markers", "acceptance: toy-preset ablation, enabled with DSRLAB_RUN_ACCEPTANCE=1")


def pytest_collection_modifyitems(config, items):
    gates = (("slow", EnvVars.RUN_SLOW), ("acceptance", EnvVars.RUN_ACCEPTANCE))
    for marker, variable in gates:
        if os.environ.get(variable) == "1":
            continue
        skip = pytest.mark.skip(reason=f"set {variable}=1 to run")
        for item in items:
            if marker in item.keywords:
                item.add_marker(skip)


@pytest.fixture
def toy_config():
    """Resolved configuration for 64x64 HR scenes and tiny networks"""
    return DSRLabConfig(overrides=TOY_OVERRIDES)


@pytest.fixture(scope="session")
def toy_records():
    from synthgen import generate_records
    return generate_records(4, seed=3, hr_size=TOY_HR)
