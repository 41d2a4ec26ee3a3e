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

"""Dictionary-guided action recognition with contrastive distillation, plus
co-attention VQA at desk scale"""

from __future__ import annotations


__license__ = "Apache 2.0"
__copyright__ = "Copyright 2024 t3kit developers"

try:
    from ._version import version as __version__  # type: ignore
except ImportError:
    __version__ = "inplace"

__all__ = [
    "action_dictionary",
    "argparse",
    "command_line",
    "config",
    "data",
    "frames",
    "heads",
    "metrics",
    "moma",
    "params",
    "plot",
    "serialization",
    "train",
    "vqa",
]
