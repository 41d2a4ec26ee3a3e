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

"""Parameterized sections of a run configuration

A run is configured by a :class:`RunConfig`, a dictionary mapping section names to
:class:`param.parameterized.Parameterized` instances. A TOML file for it looks like

.. code-block:: toml

    [task]
    task = "recognition"
    head_mode = "adg"

    [stitch]
    crop_size = 32

    [optim]
    steps = 200

Defaults follow the values the method was published with (16 stitched frames,
224-pixel crops, a 1.3 center-crop scale, 30 test replicas, a 0.07 temperature, unit
loss weights, 512/1024 MCAN widths). Desk-scale defaults (encoder width, queue length,
MCAN depth, optimizer) are our own.
"""

from __future__ import annotations

import hashlib
import json
import math
import os

from collections import OrderedDict
from typing import Optional

import param

from .config import ANSWER_BLOCK_SIZE
from .serialization import deserialize_from_file, serialize_to_dict

__all__ = [
    "AUGMENT_OPS",
    "config_hash",
    "ConfigError",
    "DataParams",
    "MCANParams",
    "MomaParams",
    "OptimParams",
    "read_run_config",
    "RunConfig",
    "StitchParams",
    "SyntheticParams",
    "TaskParams",
    "validate_config",
]

AUGMENT_OPS = ("hflip", "brightness", "contrast", "rotate", "translate")
"""Names of the photometric and geometric ops available to train-time augmentation"""


class ConfigError(ValueError):
    """Raised when a run configuration is inconsistent"""


class TaskParams(param.Parameterized):
    task = param.Selector(
        default="recognition",
        objects=["recognition", "anticipation", "vqa"],
        doc="Which problem to train/evaluate. Anticipation trains on the next clip's "
        "label",
    )
    head_mode = param.Selector(
        default="adg",
        objects=["single", "multi", "adg"],
        doc="Classifier design for recognition/anticipation. 'single' trains two "
        "independent models (verb and noun), 'multi' one encoder with two heads, "
        "'adg' one head over dictionary actions",
    )
    seed = param.Integer(0, doc="Seed for parameter init and all sampling")
    log_every = param.Integer(
        10, bounds=(1, None), doc="Log an INFO summary every this many steps"
    )


class StitchParams(param.Parameterized):
    num_selected = param.Integer(
        16,
        bounds=(1, None),
        doc="Number of frames sampled per clip. Must be a perfect square",
    )
    crop_size = param.Integer(224, bounds=(1, None), doc="Side of each tile")
    resize_factor = param.Number(
        0.25,
        bounds=(0.0, 1.0),
        inclusive_bounds=(False, True),
        doc="Frames are resized by this factor before cropping",
    )
    test_crop_scale = param.Number(
        1.3,
        bounds=(1.0, None),
        doc="At test time, a center crop of side floor(crop_size * scale) precedes "
        "the random crop",
    )
    test_replicas = param.Integer(
        30, bounds=(1, None), doc="Stitched draws per clip at test time"
    )
    test_resize = param.Boolean(
        True, doc="Whether the test path also resizes by resize_factor first"
    )
    augment_ops = param.ListSelector(
        default=list(AUGMENT_OPS),
        objects=list(AUGMENT_OPS),
        doc="Ops train-time augmentation draws from. Empty disables augmentation",
    )
    augment_num_ops = param.Integer(
        2, bounds=(0, None), doc="Ops applied per frame at train time"
    )
    augment_magnitude = param.Integer(
        9, bounds=(0, 10), doc="Augmentation strength on a 0-10 scale"
    )
    stratified = param.Boolean(
        True,
        doc="When a clip is shorter than num_selected, include every frame once "
        "before drawing repeats",
    )

    @property
    def grid_side(self) -> int:
        return math.isqrt(self.num_selected)

    @property
    def test_window(self) -> int:
        return int(math.floor(self.crop_size * self.test_crop_scale))


class MomaParams(param.Parameterized):
    embed_dim = param.Integer(256, bounds=(1, None), doc="Encoder embedding width")
    encoder_width = param.Integer(
        16,
        bounds=(1, None),
        doc="Channels of the first of four strided conv blocks. Each block doubles",
    )
    attention_heads = param.Integer(
        4, bounds=(1, None), doc="Heads of the batch-embedding self-attention"
    )
    queue_length = param.Integer(
        512, bounds=(1, None), doc="Capacity of the negative queue"
    )
    temperature = param.Number(
        0.07, bounds=(0.0, None), inclusive_bounds=(False, True), doc="InfoNCE tau"
    )
    alpha = param.Number(1.0, bounds=(0.0, None), doc="Cross-entropy weight")
    beta = param.Number(1.0, bounds=(0.0, None), doc="InfoNCE weight")
    teacher_init = param.Selector(
        default="scratch",
        objects=["scratch", "checkpoint"],
        doc="'scratch' draws a fixed-seed random teacher. 'checkpoint' loads the "
        "student of a previous run as teacher",
    )
    teacher_checkpoint = param.String(
        None, allow_None=True, doc="Checkpoint path when teacher_init='checkpoint'"
    )
    teacher_seed = param.Integer(0, doc="Seed of the scratch teacher")


class MCANParams(param.Parameterized):
    size = param.Selector(
        default="small",
        objects=["small", "large", "custom"],
        doc="small=512, large=1024 hidden units. 'custom' uses hidden_dim",
    )
    hidden_dim = param.Integer(512, bounds=(1, None), doc="Width when size='custom'")
    layers = param.Integer(2, bounds=(1, None), doc="Depth L of both flows")
    heads = param.Integer(8, bounds=(1, None), doc="Attention heads")
    ffn_mult = param.Integer(4, bounds=(1, None), doc="Feed-forward expansion")
    flat_mlp_dim = param.Integer(
        512, bounds=(1, None), doc="Hidden width of the pooling score MLP"
    )
    dropout = param.Number(0.1, bounds=(0.0, 1.0), doc="Dropout inside the flows")
    word_dim = param.Integer(300, bounds=(1, None), doc="Word embedding width")
    feature_dim = param.Integer(
        2048, bounds=(1, None), doc="Width of per-object detector features"
    )
    max_objects = param.Integer(
        36, bounds=(1, None), doc="Objects per frame after padding/truncation"
    )
    max_tokens = param.Integer(
        16, bounds=(1, None), doc="Question tokens after padding/truncation"
    )
    fqca = param.Boolean(True, doc="Enable frame-question cross-attention")
    fqca_source = param.Selector(
        default="flow",
        objects=["flow", "raw"],
        doc="Cross-attend to the flow outputs or to the pre-flow features",
    )
    block_size = param.Integer(
        ANSWER_BLOCK_SIZE,
        bounds=(1, None),
        doc="Frames represented by one answered frame",
    )

    @property
    def dim(self) -> int:
        return {"small": 512, "large": 1024}.get(self.size, self.hidden_dim)


class DataParams(param.Parameterized):
    data_dir = param.String(
        None, allow_None=True, doc="Dataset root (as written by 't3kit generate')"
    )
    dictionary_file = param.String(
        "dictionary.csv", doc="Action dictionary, relative to data_dir"
    )
    labels_file = param.String("labels.csv", doc="Clip labels, relative to data_dir")
    qa_file = param.String("qa.jsonl", doc="VQA annotations, relative to data_dir")
    features_dir = param.String(
        "features", doc="Per-video object feature files, relative to data_dir"
    )
    eval_split = param.Selector(
        default="test", objects=["train", "test"], doc="Split scored by eval/predict"
    )

    def path(self, name: str) -> str:
        return os.path.join(self.data_dir, getattr(self, name))


class OptimParams(param.Parameterized):
    lr = param.Number(1e-3, bounds=(0.0, None), doc="Adam learning rate")
    weight_decay = param.Number(0.0, bounds=(0.0, None))
    steps = param.Integer(500, bounds=(0, None), doc="Optimizer steps per model")
    batch_size = param.Integer(8, bounds=(1, None))
    checkpoint_epochs = param.Integer(
        1, bounds=(1, None), doc="Write a checkpoint every this many epochs"
    )
    num_workers = param.Integer(0, bounds=(0, None), doc="DataLoader workers")


class SyntheticParams(param.Parameterized):
    num_videos = param.Integer(10, bounds=(1, None))
    frames_per_video = param.Integer(64, bounds=(1, None))
    frame_size = param.Integer(64, bounds=(4, None), doc="Side of square frames")
    num_verbs = param.Integer(3, bounds=(1, None))
    num_nouns = param.Integer(3, bounds=(1, None))
    num_actions = param.Integer(
        6, bounds=(1, None), doc="Dictionary size. At most num_verbs * num_nouns"
    )
    clips_per_stream = param.Integer(
        5, bounds=(1, None), doc="Consecutive clips forming one procedure stream"
    )
    test_fraction = param.Number(0.2, bounds=(0.0, 1.0))
    noise = param.Number(0.05, bounds=(0.0, None), doc="Pixel/feature noise scale")
    num_question_types = param.Integer(4, bounds=(1, None))
    num_answers = param.Integer(16, bounds=(2, None))
    num_objects = param.Integer(10, bounds=(1, None), doc="Maximum objects per frame")
    feature_dim = param.Integer(2048, bounds=(1, None))
    seed = param.Integer(0)


class RunConfig(OrderedDict):
    """All sections of a run, keyed by section name

    Works in the hierarchical mode of :func:`t3kit.serialization.deserialize_from_dict`.
    Sections are also reachable as attributes (``run.task.seed``).
    """

    SECTIONS = OrderedDict(
        (
            ("task", TaskParams),
            ("stitch", StitchParams),
            ("moma", MomaParams),
            ("mcan", MCANParams),
            ("data", DataParams),
            ("optim", OptimParams),
            ("synthetic", SyntheticParams),
        )
    )

    def __init__(self, **sections):
        super().__init__()
        for name, cls in self.SECTIONS.items():
            self[name] = sections.pop(name, None) or cls(name=name)
        if sections:
            raise TypeError(f"unknown sections {tuple(sections)}")

    def __getattr__(self, name):
        try:
            return self[name]
        except KeyError:
            raise AttributeError(name)

    def to_dict(self) -> OrderedDict:
        return serialize_to_dict(self)[0]


def read_run_config(
    *paths: str, run: Optional[RunConfig] = None, on_missing="raise"
) -> RunConfig:
    """Populate a run config from files, later files clobbering earlier ones"""
    run = RunConfig() if run is None else run
    for path in paths:
        deserialize_from_file(path, run, on_missing=on_missing)
    return run


def validate_config(run: RunConfig, require_data: bool = False) -> None:
    """Check constraints that span parameters

    Raises
    ------
    ConfigError
    """
    stitch, mcan, moma = run.stitch, run.mcan, run.moma
    if stitch.grid_side ** 2 != stitch.num_selected:
        raise ConfigError(
            f"stitch.num_selected={stitch.num_selected} is not a perfect square"
        )
    if mcan.dim % mcan.heads:
        raise ConfigError(
            f"mcan hidden dim {mcan.dim} not divisible by mcan.heads={mcan.heads}"
        )
    if moma.embed_dim % moma.attention_heads:
        raise ConfigError(
            f"moma.embed_dim={moma.embed_dim} not divisible by "
            f"moma.attention_heads={moma.attention_heads}"
        )
    if moma.teacher_init == "checkpoint" and not moma.teacher_checkpoint:
        raise ConfigError(
            "moma.teacher_init='checkpoint' needs moma.teacher_checkpoint"
        )
    syn = run.synthetic
    if syn.num_actions > syn.num_verbs * syn.num_nouns:
        raise ConfigError(
            f"synthetic.num_actions={syn.num_actions} exceeds "
            f"num_verbs * num_nouns={syn.num_verbs * syn.num_nouns}"
        )
    if require_data:
        data = run.data
        if data.data_dir is None or not os.path.isdir(data.data_dir):
            raise ConfigError(f"data.data_dir '{data.data_dir}' is not a directory")
        if (
            moma.teacher_init == "checkpoint"
            and run.task.task != "vqa"
            and not os.path.isfile(moma.teacher_checkpoint)
        ):
            raise ConfigError(
                f"moma.teacher_checkpoint '{moma.teacher_checkpoint}' does not exist"
            )


_HASHED = OrderedDict(
    (
        ("task", ("task", "head_mode")),
        ("stitch", ("num_selected", "crop_size")),
        ("moma", ("embed_dim", "encoder_width", "attention_heads", "queue_length")),
        (
            "mcan",
            (
                "size",
                "hidden_dim",
                "layers",
                "heads",
                "ffn_mult",
                "flat_mlp_dim",
                "word_dim",
                "feature_dim",
                "max_objects",
                "max_tokens",
                "fqca",
                "fqca_source",
            ),
        ),
    )
)


def config_hash(run: RunConfig) -> str:
    """SHA-256 of the parameters that fix model shapes

    A checkpoint is only compatible with configs sharing this hash. Parameters which
    only affect optimization, data location, or test-time sampling are not hashed.
    """
    dict_ = run.to_dict()
    subset = OrderedDict(
        (sec, OrderedDict((k, dict_[sec][k]) for k in keys))
        for (sec, keys) in _HASHED.items()
    )
    blob = json.dumps(subset, sort_keys=True).encode("utf8")
    return hashlib.sha256(blob).hexdigest()
