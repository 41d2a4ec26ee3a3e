# Copyright 2024 t3kit developers
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#    http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Configuration variables"""

from typing import Tuple

__all__ = [
    "ANSWER_BLOCK_SIZE",
    "BLEU_EPSILON",
    "TOML_MODULE_PRIORITIES",
    "YAML_MODULE_PRIORITIES",
]


YAML_MODULE_PRIORITIES: Tuple[str, ...] = ("ruamel.yaml", "yaml")
"""Specifies the order with which to try YAML parser modules

The first importable module is used both to read ``.yaml`` run configurations and to
write them back out (e.g. ``--print-config``).
"""

TOML_MODULE_PRIORITIES: Tuple[str, ...] = ("tomllib", "tomli")
"""Specifies the order with which to try TOML parser modules

:mod:`tomllib` ships with Python 3.11+; :mod:`tomli` is its backport.
"""

ANSWER_BLOCK_SIZE: int = 15
"""Number of consecutive frames sharing one representative frame in VQA

The default for :class:`t3kit.params.MCANParams.block_size`.
"""

BLEU_EPSILON: float = 1e-9
"""Added to n-gram precisions inside the logarithm when computing BLEU"""
