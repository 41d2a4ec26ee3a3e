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

"""Synthetic datasets, on-disk formats, and torch datasets

Recognition data directory::

    dictionary.csv        # see t3kit.action_dictionary.read_dictionary_csv
    labels.csv            # video_id, stream_id, clip_idx, split, verb_class,
                          # noun_class, action_class, num_frames
    frames/<video_id>/000000.png, ...

Each video is one clip. Clips sharing a ``stream_id`` are consecutive steps of one
procedure, ordered by ``clip_idx``; anticipation pairs a clip with the label of the
next clip in its stream.

VQA data directory::

    labels.csv            # video_id, split, num_frames
    qa.jsonl              # {"video_id", "frame_idx", "question", "answer"} per line
    features/<video_id>.bin

Feature files hold, little-endian: an int32 frame count, an int32 feature width, one
int32 object count per frame, then each frame's ``(count, width)`` float32 matrix in
row-major order.

In synthetic recognition frames, the verb picks the grid cell holding a colored
square and the noun picks its hue. In synthetic VQA, the answer to question type
``t`` is written into a frame's object features as a spike at dimension
``(t * num_answers + answer) % feature_dim``.
"""

from __future__ import annotations

import json
import math
import os

from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import param
import torch

from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from torch.utils.data import Dataset

from .action_dictionary import (
    ActionDictionary,
    build_dictionary,
    read_dictionary_csv,
    write_dictionary_csv,
)
from .frames import (
    FrameSequence,
    read_frame_sequence,
    test_time_replicas,
    train_stitch,
    write_frame_sequence,
)
from .heads import make_targets
from .params import RunConfig, SyntheticParams
from .vqa import QARecord, subsample_frames

__all__ = [
    "ClipDataset",
    "decode_synthetic_frame",
    "generate_synthetic",
    "generate_synthetic_recognition",
    "generate_synthetic_vqa",
    "LABEL_COLUMNS",
    "read_feature_file",
    "read_labels",
    "read_qa_jsonl",
    "shift_for_anticipation",
    "synthetic_dictionary",
    "synthetic_question",
    "VQADataset",
    "write_feature_file",
    "write_qa_jsonl",
]

LABEL_COLUMNS = (
    "video_id",
    "stream_id",
    "clip_idx",
    "split",
    "verb_class",
    "noun_class",
    "action_class",
    "num_frames",
)

_logger = param.get_logger(name="t3kit.data")


def _verb_grid(num_verbs: int) -> int:
    return math.ceil(math.sqrt(num_verbs))


def synthetic_dictionary(params: SyntheticParams) -> ActionDictionary:
    """The first ``num_actions`` of a seeded permutation of all verb-noun pairs"""
    generator = torch.Generator().manual_seed(params.seed)
    k, h = params.num_verbs, params.num_nouns
    perm = torch.randperm(k * h, generator=generator)[: params.num_actions]
    return build_dictionary([divmod(int(i), h) for i in perm], k, h)


def _render_frame(verb, noun, params, generator):
    s, k, h = params.frame_size, params.num_verbs, params.num_nouns
    side = _verb_grid(k)
    cell = s // side
    margin = cell // 8
    row, col = divmod(verb, side)
    rgb = torch.tensor(hsv_to_rgb([(noun + 0.5) / h, 0.8, 0.9]), dtype=torch.float)
    frame = torch.full((3, s, s), 0.5)
    frame[
        :,
        row * cell + margin : (row + 1) * cell - margin,
        col * cell + margin : (col + 1) * cell - margin,
    ] = rgb[:, None, None]
    frame += params.noise * torch.randn(frame.shape, generator=generator)
    return frame.clamp(0, 1)


def decode_synthetic_frame(
    frame: torch.Tensor, num_verbs: int, num_nouns: int
) -> Tuple[int, int]:
    """Recover ``(verb, noun)`` from a synthetic recognition frame by its pixels"""
    s = frame.size(-1)
    side = _verb_grid(num_verbs)
    cell = s // side
    inner = max(cell // 4, 1)
    best, best_sat, best_rgb = 0, -1.0, None
    for v in range(num_verbs):
        row, col = divmod(v, side)
        center = frame[
            :,
            row * cell + inner : (row + 1) * cell - inner,
            col * cell + inner : (col + 1) * cell - inner,
        ]
        rgb = center.mean((1, 2))
        sat = float(rgb.max() - rgb.min())
        if sat > best_sat:
            best, best_sat, best_rgb = v, sat, rgb
    hue = float(rgb_to_hsv(best_rgb.clamp(0, 1).numpy())[0])
    return best, min(int(hue * num_nouns), num_nouns - 1)


def generate_synthetic_recognition(
    params: SyntheticParams, out_dir: Union[str, os.PathLike]
) -> ActionDictionary:
    """Write a synthetic recognition dataset to `out_dir`"""
    generator = torch.Generator().manual_seed(params.seed)
    dictionary = synthetic_dictionary(params)
    os.makedirs(out_dir, exist_ok=True)
    write_dictionary_csv(dictionary, os.path.join(out_dir, "dictionary.csv"))
    g = dictionary.num_actions
    actions = (torch.randperm(params.num_videos, generator=generator) % g).tolist()
    num_streams = math.ceil(params.num_videos / params.clips_per_stream)
    num_test = int(round(num_streams * params.test_fraction))
    rows = []
    for i, a in enumerate(actions):
        video_id = f"video{i:04d}"
        stream_id, clip_idx = divmod(i, params.clips_per_stream)
        v, n = dictionary.action_to_pair(a)
        frames = torch.stack(
            [
                _render_frame(v, n, params, generator)
                for _ in range(params.frames_per_video)
            ]
        )
        write_frame_sequence(
            FrameSequence(frames, video_id), os.path.join(out_dir, "frames", video_id)
        )
        split = "test" if stream_id >= num_streams - num_test else "train"
        rows.append((video_id, stream_id, clip_idx, split, v, n, a, len(frames)))
    pd.DataFrame(rows, columns=LABEL_COLUMNS).to_csv(
        os.path.join(out_dir, "labels.csv"), index=False
    )
    _logger.info(f"wrote {len(rows)} synthetic clips to '{out_dir}'")
    return dictionary


def write_feature_file(
    path: Union[str, os.PathLike], frames: Sequence[np.ndarray]
) -> None:
    """Write per-frame ``(N_o, D)`` object feature matrices in the binary format"""
    frames = [np.asarray(x, dtype="<f4") for x in frames]
    width = frames[0].shape[1] if frames else 0
    for i, x in enumerate(frames):
        if x.ndim != 2 or x.shape[1] != width:
            raise ValueError(
                f"frame {i} features have shape {x.shape}, not (N, {width})"
            )
    with open(path, "wb") as fp:
        np.array([len(frames), width], dtype="<i4").tofile(fp)
        np.array([x.shape[0] for x in frames], dtype="<i4").tofile(fp)
        for x in frames:
            np.ascontiguousarray(x).tofile(fp)


def read_feature_file(path: Union[str, os.PathLike]) -> List[np.ndarray]:
    """Read per-frame object feature matrices from the binary format"""
    try:
        buf = np.fromfile(path, dtype=np.uint8)
    except OSError as e:
        raise OSError(f"could not read feature file '{path}': {e}") from e
    header = np.frombuffer(buf, dtype="<i4", count=2)
    if header.size < 2:
        raise ValueError(f"'{path}' is too short to be a feature file")
    num_frames, width = int(header[0]), int(header[1])
    counts = np.frombuffer(buf, dtype="<i4", count=num_frames, offset=8)
    offset = 8 + 4 * num_frames
    frames = []
    for count in counts.tolist():
        x = np.frombuffer(buf, dtype="<f4", count=count * width, offset=offset)
        frames.append(x.reshape(count, width).astype(np.float32))
        offset += 4 * count * width
    if offset != buf.size:
        raise ValueError(f"'{path}' has {buf.size - offset} trailing bytes")
    return frames


def synthetic_question(question_type: int) -> str:
    return f"what is the state of item {question_type} in this frame?"


def _answer_text(answer: int) -> str:
    return f"state {answer}"


def generate_synthetic_vqa(
    params: SyntheticParams,
    out_dir: Union[str, os.PathLike],
    block_size: int = 15,
) -> None:
    """Write a synthetic VQA dataset to `out_dir`

    Answers are constant within each block of `block_size` frames. Every frame is
    annotated with one question per question type.
    """
    generator = torch.Generator().manual_seed(params.seed)
    os.makedirs(os.path.join(out_dir, "features"), exist_ok=True)
    num_test = int(round(params.num_videos * params.test_fraction))
    rows, records = [], []
    T, N, D = params.num_question_types, params.num_answers, params.feature_dim
    for i in range(params.num_videos):
        video_id = f"video{i:04d}"
        num_blocks = math.ceil(params.frames_per_video / block_size)
        answers = torch.randint(N, (num_blocks, T), generator=generator)
        frames = []
        for f in range(params.frames_per_video):
            n_obj = int(
                torch.randint(1, params.num_objects + 1, (1,), generator=generator)
            )
            x = params.noise * torch.randn(n_obj, D, generator=generator)
            for t in range(T):
                a = int(answers[f // block_size, t])
                x[t % n_obj, (t * N + a) % D] += 1.0
                records.append(
                    QARecord(video_id, f, synthetic_question(t), _answer_text(a))
                )
            frames.append(x.numpy())
        write_feature_file(os.path.join(out_dir, "features", f"{video_id}.bin"), frames)
        split = "test" if i >= params.num_videos - num_test else "train"
        rows.append((video_id, split, params.frames_per_video))
    pd.DataFrame(rows, columns=("video_id", "split", "num_frames")).to_csv(
        os.path.join(out_dir, "labels.csv"), index=False
    )
    write_qa_jsonl(os.path.join(out_dir, "qa.jsonl"), records)
    _logger.info(f"wrote {len(rows)} synthetic VQA videos to '{out_dir}'")


def generate_synthetic(run: RunConfig, out_dir: Union[str, os.PathLike]) -> None:
    """Generate the synthetic dataset matching ``run.task.task``"""
    if run.task.task == "vqa":
        generate_synthetic_vqa(run.synthetic, out_dir, run.mcan.block_size)
    else:
        generate_synthetic_recognition(run.synthetic, out_dir)


def write_qa_jsonl(path: Union[str, os.PathLike], records: Sequence[QARecord]) -> None:
    with open(path, "w") as fp:
        for record in records:
            fp.write(json.dumps(record._asdict()) + "\n")


def read_qa_jsonl(path: Union[str, os.PathLike]) -> List[QARecord]:
    records = []
    try:
        with open(path) as fp:
            for lineno, line in enumerate(fp, 1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    records.append(
                        QARecord(
                            str(obj["video_id"]),
                            int(obj["frame_idx"]),
                            str(obj["question"]),
                            str(obj.get("answer", "")),
                        )
                    )
                except (KeyError, ValueError) as e:
                    raise ValueError(f"'{path}' line {lineno}: {e}") from e
    except OSError as e:
        raise OSError(f"could not read QA file '{path}': {e}") from e
    return records


def read_labels(path: Union[str, os.PathLike]) -> pd.DataFrame:
    try:
        return pd.read_csv(path, dtype={"video_id": str, "split": str})
    except OSError as e:
        raise OSError(f"could not read labels '{path}': {e}") from e


def shift_for_anticipation(labels: pd.DataFrame) -> pd.DataFrame:
    """Pair each clip with the label of the next clip in its stream

    The last clip of each stream has no next clip and is dropped. The returned frame
    keeps the clip's ``video_id`` and replaces the label columns with the next
    clip's.
    """
    labels = labels.sort_values(["stream_id", "clip_idx"], kind="stable")
    nxt = labels.groupby("stream_id", sort=False)[
        ["verb_class", "noun_class", "action_class"]
    ].shift(-1)
    out = labels.copy()
    out[["verb_class", "noun_class", "action_class"]] = nxt
    out = out.dropna(subset=["verb_class"])
    return out.astype(
        {"verb_class": int, "noun_class": int, "action_class": int}
    ).reset_index(drop=True)


class ClipDataset(Dataset):
    """Clips of one split as stitched images and ``(verb, noun, action)`` targets

    In train mode, item ``i`` is one :func:`t3kit.frames.train_stitch` draw, seeded by
    ``(seed, epoch, i)``. In test mode, item ``i`` is a stack of
    ``stitch.test_replicas`` images from :func:`t3kit.frames.test_time_replicas`.
    Frames are cached in memory after first load.
    """

    def __init__(
        self,
        run: RunConfig,
        split: str,
        train: bool,
        dictionary: Optional[ActionDictionary] = None,
    ):
        self.run, self.train, self.epoch = run, train, 0
        data = run.data
        self.dictionary = (
            read_dictionary_csv(data.path("dictionary_file"))
            if dictionary is None
            else dictionary
        )
        labels = read_labels(data.path("labels_file"))
        if run.task.task == "anticipation":
            labels = shift_for_anticipation(labels)
        self.labels = labels[labels["split"] == split].reset_index(drop=True)
        self.targets = make_targets(
            zip(self.labels["verb_class"], self.labels["noun_class"]), self.dictionary
        )
        self._cache: Dict[str, FrameSequence] = dict()

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def video_ids(self) -> List[str]:
        return self.labels["video_id"].tolist()

    def clip(self, i: int) -> FrameSequence:
        video_id = self.labels["video_id"][i]
        if video_id not in self._cache:
            self._cache[video_id] = read_frame_sequence(
                os.path.join(self.run.data.data_dir, "frames", video_id), video_id
            )
        return self._cache[video_id]

    def item_seed(self, i: int) -> int:
        seed = (self.run.task.seed * 1_000_003 + self.epoch) * 1_000_003 + i
        return seed % (2**63)

    def __getitem__(self, i: int) -> Tuple[torch.Tensor, torch.Tensor]:
        stitch = self.run.stitch
        if self.train:
            generator = torch.Generator().manual_seed(self.item_seed(i))
            image = train_stitch(self.clip(i), stitch, generator).pixels
        else:
            replicas = test_time_replicas(self.clip(i), stitch, self.run.task.seed)
            image = torch.stack([r.pixels for r in replicas])
        return image, self.targets[i]


class VQADataset(Dataset):
    """(object features, question ids, answer id) instances of one split

    Training instances are restricted to representative frames. `token_vocab` and
    `answer_vocab` are built from the training split unless supplied.
    """

    def __init__(
        self,
        run: RunConfig,
        split: str,
        train: bool,
        token_vocab=None,
        answer_vocab=None,
    ):
        from .vqa import AnswerVocab, TokenVocab

        self.run, self.train = run, train
        data, mcan = run.data, run.mcan
        labels = read_labels(data.path("labels_file"))
        self.num_frames = dict(
            zip(labels["video_id"], labels["num_frames"].astype(int))
        )
        splits = dict(zip(labels["video_id"], labels["split"]))
        records = read_qa_jsonl(data.path("qa_file"))
        train_records = [r for r in records if splits.get(r.video_id) == "train"]
        if token_vocab is None:
            token_vocab = TokenVocab.from_questions(r.question for r in train_records)
        if answer_vocab is None:
            answer_vocab = AnswerVocab(r.answer for r in train_records)
        self.token_vocab, self.answer_vocab = token_vocab, answer_vocab
        records = [r for r in records if splits.get(r.video_id) == split]
        if train:
            records = subsample_frames(records, self.num_frames, mcan.block_size)
        self.records = records
        self._features: Dict[str, List[np.ndarray]] = dict()

    def __len__(self) -> int:
        return len(self.records)

    def features(self, video_id: str) -> List[np.ndarray]:
        if video_id not in self._features:
            self._features[video_id] = read_feature_file(
                os.path.join(
                    self.run.data.path("features_dir"), f"{video_id}.bin"
                )
            )
        return self._features[video_id]

    def __getitem__(self, i: int) -> Tuple[torch.Tensor, torch.Tensor, int]:
        record = self.records[i]
        x = torch.from_numpy(self.features(record.video_id)[record.frame_idx])
        tokens = torch.tensor(
            self.token_vocab.encode(record.question, self.run.mcan.max_tokens)
        )
        answer = self.answer_vocab.ids.get(record.answer, -1)
        return x, tokens, answer
