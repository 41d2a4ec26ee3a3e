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

"""Static report figures from training logs and score reports"""

from __future__ import annotations

import json
import os

from typing import Dict, List, Union

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402
import param  # noqa: E402

__all__ = [
    "LOSS_COLUMNS",
    "plot_loss_curves",
    "plot_scores",
    "write_report",
]

LOSS_COLUMNS = ("ce", "infonce", "bce", "total")
"""Training log columns drawn as loss curves, when present"""

_logger = param.get_logger(name="t3kit.plot")


def plot_loss_curves(
    log: Union[pd.DataFrame, str, os.PathLike], path: Union[str, os.PathLike]
) -> List[str]:
    """One panel per loss component, one line per model. Returns the drawn columns"""
    if not isinstance(log, pd.DataFrame):
        log = pd.read_csv(log)
    columns = [c for c in LOSS_COLUMNS if c in log.columns and log[c].notna().any()]
    if not columns or log.empty:
        raise ValueError("training log holds no loss values")
    fig, axes = plt.subplots(
        len(columns), 1, figsize=(6, 2.5 * len(columns)), sharex=True, squeeze=False
    )
    for ax, column in zip(axes[:, 0], columns):
        for model, group in log.groupby("model", sort=False):
            ax.plot(group["step"], group[column], label=str(model))
        ax.set_ylabel(column)
        ax.legend(loc="upper right")
    axes[-1, 0].set_xlabel("step")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return columns


def plot_scores(
    scores: Union[Dict[str, float], str, os.PathLike], path: Union[str, os.PathLike]
) -> None:
    """A bar per score, in percent"""
    if not isinstance(scores, dict):
        with open(scores) as fp:
            scores = json.load(fp)
    if not scores:
        raise ValueError("no scores to plot")
    names = list(scores)
    values = [100 * float(scores[k]) for k in names]
    fig, ax = plt.subplots(figsize=(1.2 * len(names) + 2, 3))
    bars = ax.bar(names, values, color="tab:blue")
    ax.bar_label(bars, fmt="%.1f")
    ax.set_ylim(0, 105)
    ax.set_ylabel("%")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def write_report(
    run_dir: Union[str, os.PathLike], out_dir: Union[str, os.PathLike]
) -> List[str]:
    """Render every figure whose source exists in `run_dir` into `out_dir`

    ``train_log.csv`` becomes ``loss_curves.png`` and ``scores.json`` becomes
    ``scores.png``. Returns the written paths.

    Raises
    ------
    FileNotFoundError
        If `run_dir` holds neither source
    """
    os.makedirs(out_dir, exist_ok=True)
    written = []
    log_path = os.path.join(run_dir, "train_log.csv")
    if os.path.isfile(log_path):
        path = os.path.join(out_dir, "loss_curves.png")
        plot_loss_curves(log_path, path)
        written.append(path)
    scores_path = os.path.join(run_dir, "scores.json")
    if os.path.isfile(scores_path):
        path = os.path.join(out_dir, "scores.png")
        plot_scores(scores_path, path)
        written.append(path)
    if not written:
        raise FileNotFoundError(
            f"'{run_dir}' holds neither train_log.csv nor scores.json"
        )
    for path in written:
        _logger.info(f"wrote '{path}'")
    return written
