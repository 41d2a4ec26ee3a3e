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

"""Hooks for reading and printing run configurations on the command line"""

from __future__ import annotations

import argparse
import sys

from typing import List, Optional, TextIO, Union

try:
    from typing import Literal
except ImportError:
    from typing_extensions import Literal

from .params import RunConfig
from .serialization import ConfigTypeError, serialize_to_file, yaml_is_available

__all__ = [
    "add_config_group",
    "ConfigPrintAction",
    "ConfigReadAction",
]


class ConfigReadAction(argparse.Action):
    """Read one or more config files into a :class:`t3kit.params.RunConfig`

    The file type is chosen by suffix (``.toml``, ``.yaml``/``.yml``, ``.json``). The
    same :class:`RunConfig` instance is stored in the namespace under `dest`. When more
    than one path is given (or the flag repeats), files are read in command-line order,
    so later values clobber earlier ones.

    A value which cannot be deserialized, or a key matching no parameter, is reported
    through :func:`argparse.ArgumentParser.error`, i.e. exit code 2.

    Parameters
    ----------
    option_strings
    dest
    run
        The config to populate. A fresh one is made if unset
    on_missing
        What to do with keys matching no section or parameter
    required
    help
    metavar
    nargs
    """

    run: RunConfig
    on_missing: Literal["ignore", "warn", "raise"]

    def __init__(
        self,
        option_strings: List[str],
        dest: str,
        run: Optional[RunConfig] = None,
        on_missing: Literal["ignore", "warn", "raise"] = "raise",
        required: bool = False,
        help: Optional[str] = None,
        metavar: Optional[str] = None,
        nargs: Optional[Union[str, int]] = None,
    ):
        self.run = RunConfig() if run is None else run
        self.on_missing = on_missing
        super(ConfigReadAction, self).__init__(
            option_strings,
            dest,
            default=self.run,
            required=required,
            help=help,
            metavar=metavar,
            nargs=nargs,
        )

    def __call__(
        self,
        parser: argparse.ArgumentParser,
        namespace: argparse.Namespace,
        values,
        option_string: Optional[str] = None,
    ) -> None:
        from .serialization import deserialize_from_file

        if values is None or values is self.run:
            return
        if not isinstance(values, list):
            values = [values]
        for path in values:
            try:
                deserialize_from_file(path, self.run, on_missing=self.on_missing)
            except (ConfigTypeError, ValueError, OSError, ImportError) as e:
                parser.error(f"{option_string or self.dest}: {e}")
        setattr(namespace, self.dest, self.run)


class ConfigPrintAction(argparse.Action):
    """Print a :class:`t3kit.params.RunConfig` and exit

    Like ``--help``, the program exits after printing. Config files read by a
    :class:`ConfigReadAction` earlier on the command line and sharing the same `run`
    are reflected in the output.

    Parameters
    ----------
    option_strings
    dest
        Ignored
    run
    format
        ``"yaml"`` (with parameter docs as comments) or ``"json"``
    help
    out_stream
        Where to print. Defaults to :obj:`sys.stdout` at call time
    """

    def __init__(
        self,
        option_strings: List[str],
        dest: str,
        run: Optional[RunConfig] = None,
        format: Literal["yaml", "json"] = "json",
        help: Optional[str] = None,
        out_stream: Optional[TextIO] = None,
    ):
        self.run = RunConfig() if run is None else run
        self.format = format
        self.out_stream = out_stream
        super(ConfigPrintAction, self).__init__(
            option_strings, dest, help=help, nargs=0
        )

    def __call__(
        self,
        parser: argparse.ArgumentParser,
        namespace: argparse.Namespace,
        values,
        option_string: Optional[str] = None,
    ) -> None:
        out_stream = sys.stdout if self.out_stream is None else self.out_stream
        serialize_to_file(out_stream, self.run, self.format)
        out_stream.write("\n")
        parser.exit()


def add_config_group(
    parser: argparse.ArgumentParser,
    run: Optional[RunConfig] = None,
    dest: str = "run",
    required: bool = True,
) -> argparse._ArgumentGroup:
    """Add ``--config`` plus ``--print-config`` flags to a parser

    ``--print-config`` prints YAML if a YAML backend is importable, JSON otherwise.
    Both flags share `run`, so ``--config a.toml --print-config`` shows the merged
    result.
    """
    run = RunConfig() if run is None else run
    group = parser.add_argument_group("Configuration")
    group.add_argument(
        "--config",
        action=ConfigReadAction,
        run=run,
        dest=dest,
        nargs="+",
        required=required,
        metavar="PATH",
        help="TOML, YAML, or JSON run configuration(s). Later files clobber earlier "
        "ones",
    )
    group.add_argument(
        "--print-config",
        action=ConfigPrintAction,
        run=run,
        format="yaml" if yaml_is_available() else "json",
        help="Print the run configuration (after any --config) and exit",
    )
    return group
