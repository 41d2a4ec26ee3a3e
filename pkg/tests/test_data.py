"""Tests for t3kit.data"""

import filecmp
import os

import numpy as np
import pandas as pd
import pytest
import torch

from t3kit import data
from t3kit.action_dictionary import read_dictionary_csv
from t3kit.frames import read_frame_sequence
from t3kit.vqa import representative_frames


@pytest.fixture
def recognition_dir(temp_dir, tiny_run):
    out = os.path.join(temp_dir, "rec")
    data.generate_synthetic(tiny_run, out)
    tiny_run.data.data_dir = out
    return out


@pytest.fixture
def vqa_run(temp_dir, tiny_run_factory):
    run = tiny_run_factory("vqa")
    out = os.path.join(temp_dir, "vqa")
    run.synthetic.frames_per_video = 12
    data.generate_synthetic(run, out)
    run.data.data_dir = out
    return run


def test_recognition_layout(recognition_dir, tiny_run):
    labels = data.read_labels(os.path.join(recognition_dir, "labels.csv"))
    assert tuple(labels.columns) == data.LABEL_COLUMNS
    assert len(labels) == 4
    assert sorted(os.listdir(os.path.join(recognition_dir, "frames"))) == [
        f"video{i:04d}" for i in range(4)
    ]
    frames_dir = os.path.join(recognition_dir, "frames", "video0000")
    assert len(os.listdir(frames_dir)) == 6
    # two streams of two clips, the last stream held out
    assert labels["split"].tolist() == ["train", "train", "test", "test"]
    assert labels["stream_id"].tolist() == [0, 0, 1, 1]
    d = read_dictionary_csv(os.path.join(recognition_dir, "dictionary.csv"))
    for row in labels.itertuples():
        assert d.action_to_pair(row.action_class) == (row.verb_class, row.noun_class)


def test_generation_is_deterministic(temp_dir, tiny_run):
    a, b = os.path.join(temp_dir, "a"), os.path.join(temp_dir, "b")
    data.generate_synthetic(tiny_run, a)
    data.generate_synthetic(tiny_run, b)
    for rel in ("labels.csv", "dictionary.csv", "frames/video0002/000004.png"):
        assert filecmp.cmp(os.path.join(a, rel), os.path.join(b, rel), shallow=False)


def test_pixel_oracle_recovers_labels(temp_dir, tiny_run_factory):
    run = tiny_run_factory()
    syn = run.synthetic
    syn.num_videos, syn.num_verbs, syn.num_nouns, syn.num_actions = 12, 4, 5, 12
    out = os.path.join(temp_dir, "rec")
    data.generate_synthetic(run, out)
    labels = data.read_labels(os.path.join(out, "labels.csv"))
    for row in labels.itertuples():
        seq = read_frame_sequence(os.path.join(out, "frames", row.video_id))
        for frame in seq.frames:
            assert data.decode_synthetic_frame(frame, 4, 5) == (
                row.verb_class,
                row.noun_class,
            )


def test_shift_for_anticipation():
    labels = pd.DataFrame(
        {
            "video_id": ["a", "b", "c", "d", "e"],
            "stream_id": [0, 0, 0, 1, 1],
            "clip_idx": [0, 1, 2, 1, 0],
            "verb_class": [0, 1, 2, 3, 4],
            "noun_class": [5, 6, 7, 8, 9],
            "action_class": [10, 11, 12, 13, 14],
        }
    )
    shifted = data.shift_for_anticipation(labels)
    assert shifted["video_id"].tolist() == ["a", "b", "e"]
    assert shifted["verb_class"].tolist() == [1, 2, 3]
    assert shifted["noun_class"].tolist() == [6, 7, 8]
    assert shifted["action_class"].tolist() == [11, 12, 13]


def test_clip_dataset(recognition_dir, tiny_run):
    train = data.ClipDataset(tiny_run, "train", True)
    assert len(train) == 2
    image, target = train[0]
    assert image.shape == (3, 16, 16)
    assert target.shape == (3,)
    again, _ = train[0]
    assert torch.equal(image, again)
    train.epoch = 1
    assert not torch.equal(train[0][0], image)
    test = data.ClipDataset(tiny_run, "test", False)
    images, _ = test[0]
    assert images.shape == (3, 3, 16, 16)


def test_anticipation_dataset_targets(recognition_dir, tiny_run):
    rec = data.ClipDataset(tiny_run, "train", True)
    tiny_run.task.task = "anticipation"
    ant = data.ClipDataset(tiny_run, "train", True)
    # one train stream of two clips: the first clip takes the second's label
    assert ant.video_ids == ["video0000"]
    assert ant.targets[0].tolist() == rec.targets[1].tolist()


def test_feature_file_io(temp_dir):
    frames = [np.random.rand(n, 5).astype(np.float32) for n in (3, 0, 7)]
    path = os.path.join(temp_dir, "x.bin")
    data.write_feature_file(path, frames)
    assert os.path.getsize(path) == 4 * (2 + 3 + 5 * 10)
    header = np.fromfile(path, dtype="<i4", count=5)
    assert header.tolist() == [3, 5, 3, 0, 7]
    for x, y in zip(frames, data.read_feature_file(path)):
        assert np.array_equal(x, y)
    with open(path, "ab") as f:
        f.write(b"\0")
    with pytest.raises(ValueError, match="trailing"):
        data.read_feature_file(path)


def test_vqa_generation(vqa_run):
    root = vqa_run.data.data_dir
    records = data.read_qa_jsonl(os.path.join(root, "qa.jsonl"))
    # every frame of every video, one question per type
    assert len(records) == 4 * 12 * 2
    labels = data.read_labels(os.path.join(root, "labels.csv"))
    assert tuple(labels.columns) == ("video_id", "split", "num_frames")
    feats = data.read_feature_file(os.path.join(root, "features", "video0000.bin"))
    assert len(feats) == 12
    assert all(1 <= x.shape[0] <= 3 and x.shape[1] == 24 for x in feats)
    # answers are constant within a block
    by_key = {(r.video_id, r.frame_idx, r.question): r.answer for r in records}
    q = data.synthetic_question(0)
    assert by_key[("video0000", 0, q)] == by_key[("video0000", 4, q)]


def test_vqa_dataset(vqa_run):
    train = data.VQADataset(vqa_run, "train", True)
    reps = representative_frames(12, 5)
    assert reps == [4, 9, 11]
    assert {r.frame_idx for r in train.records} == set(reps)
    assert len(train) == 2 * len(reps) * 2
    x, tokens, answer = train[0]
    assert x.shape[1] == 24
    assert tokens.shape == (12,)
    assert 0 <= answer < len(train.answer_vocab)
    test = data.VQADataset(vqa_run, "test", False)
    assert len(test) == 2 * 12 * 2
    assert test.answer_vocab.answers == train.answer_vocab.answers


def test_qa_jsonl_errors(temp_dir):
    path = os.path.join(temp_dir, "qa.jsonl")
    with open(path, "w") as f:
        f.write('{"video_id": "a", "frame_idx": 0, "question": "q", "answer": "x"}\n')
        f.write('{"video_id": "a"}\n')
    with pytest.raises(ValueError, match="line 2"):
        data.read_qa_jsonl(path)
    with pytest.raises(OSError, match="nope"):
        data.read_qa_jsonl(os.path.join(temp_dir, "nope.jsonl"))
