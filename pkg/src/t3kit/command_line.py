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

"""Command line utilities"""

from __future__ import annotations

import argparse
import logging
import os

import param

from .argparse import add_config_group
from .params import ConfigError, RunConfig, validate_config
from .serialization import ConfigTypeError, serialize_to_file

__all__ = ["t3kit"]

_logger = param.get_logger(name="t3kit.command_line")


def _add_common(parser, run, config_required=True):
    add_config_group(parser, run, required=config_required)
    parser.add_argument(
        "--out",
        default=".",
        metavar="DIR",
        help="Directory all artifacts are written to (default: current directory)",
    )
    parser.add_argument(
        "-v",
        "--verbose",
        action="count",
        default=0,
        help="Log DEBUG messages as well as INFO",
    )


def _t3kit_parse_args(args):
    run = RunConfig()
    parser = argparse.ArgumentParser(
        description=t3kit.__doc__, formatter_class=argparse.RawDescriptionHelpFormatter
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    generate = subparsers.add_parser(
        "generate", help="Write a synthetic dataset for the configured task to --out"
    )
    _add_common(generate, run)
    generate.add_argument(
        "--seed", type=int, default=None, help="Overrides synthetic.seed"
    )

    train = subparsers.add_parser(
        "train", help="Train, writing checkpoint.pt and train_log.csv to --out"
    )
    _add_common(train, run)
    train.add_argument("--seed", type=int, default=None, help="Overrides task.seed")
    train.add_argument(
        "--checkpoint",
        metavar="PATH",
        default=None,
        help="Resume from this checkpoint",
    )

    for name, help_ in (
        ("eval", "Score checkpoints, writing scores.json and scores.txt to --out"),
        ("predict", "Write per-clip or per-frame predictions to --out"),
    ):
        sub = subparsers.add_parser(name, help=help_)
        _add_common(sub, run)
        sub.add_argument(
            "--seed", type=int, default=None, help="Overrides task.seed"
        )
        sub.add_argument(
            "--checkpoint",
            metavar="PATH",
            action="append",
            default=None,
            help="Checkpoint to score. Repeat to ensemble. Defaults to "
            "<out>/checkpoint.pt",
        )

    report = subparsers.add_parser(
        "report",
        help="Render loss curves and score bars from the artifacts in --out",
    )
    _add_common(report, run, config_required=False)
    options = parser.parse_args(args)
    options.run = run
    return options


def _run_command(options) -> None:
    from . import data, plot, train

    run, out = options.run, options.out
    command = options.command
    if command == "report":
        plot.write_report(out, out)
        return
    if options.seed is not None:
        if command == "generate":
            run.synthetic.seed = options.seed
        else:
            run.task.seed = options.seed
    validate_config(run, require_data=command != "generate")
    os.makedirs(out, exist_ok=True)
    if command == "generate":
        data.generate_synthetic(run, out)
        with open(os.path.join(out, "config.json"), "w") as fp:
            serialize_to_file(fp, run, "json")
    elif command == "train":
        path = train.train(run, out, options.checkpoint)
        _logger.info(f"wrote '{path}'")
    else:
        checkpoints = options.checkpoint or [os.path.join(out, train.CHECKPOINT_NAME)]
        if command == "eval":
            scores = train.evaluate(run, checkpoints, out)
            for key, value in scores.items():
                _logger.info(f"{key}: {value:.4f}")
        else:
            path = train.predict(run, checkpoints, out)
            _logger.info(f"wrote '{path}'")


def t3kit(args=None):
    """Generate synthetic data, train and score models, then plot

Every subcommand but 'report' takes one or more --config files (TOML, YAML, or
JSON) whose sections are printed in full by --print-config. Artifacts go to --out.

Exit codes are 0 on success, 2 when the configuration or command line is invalid,
and 1 on any other failure."""
    try:
        options = _t3kit_parse_args(args)
    except SystemExit as ex:
        return ex.code
    root = param.get_logger()
    root.setLevel(logging.DEBUG if options.verbose else logging.INFO)
    try:
        _run_command(options)
    except (ConfigError, ConfigTypeError) as e:
        _logger.error(f"invalid configuration: {e}")
        return 2
    except Exception as e:
        _logger.error(f"{options.command} failed: {e}")
        _logger.debug("traceback", exc_info=True)
        return 1
    return 0
