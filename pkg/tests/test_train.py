"""Tests for t3kit.train"""

import json
import os

import pandas as pd
import pytest
import torch

from t3kit import data, train
from t3kit.action_dictionary import read_dictionary_csv
from t3kit.moma import parameter_checksum


def _prepare(temp_dir, run, name="data"):
    out = os.path.join(temp_dir, name)
    data.generate_synthetic(run, out)
    run.data.data_dir = out
    return run


@pytest.fixture
def rec_run(temp_dir, tiny_run):
    return _prepare(temp_dir, tiny_run)


@pytest.fixture
def vqa_run(temp_dir, tiny_run_factory):
    run = tiny_run_factory("vqa")
    run.synthetic.frames_per_video = 12
    return _prepare(temp_dir, run)


def test_train_writes_checkpoint_and_log(rec_run, temp_dir):
    out = os.path.join(temp_dir, "run")
    path = train.train(rec_run, out)
    assert path == os.path.join(out, "checkpoint.pt")
    state = train.load_checkpoint(path, rec_run)
    assert list(state["systems"]) == ["adg"]
    assert state["systems"]["adg"]["step"] == 3
    log = pd.read_csv(os.path.join(out, "train_log.csv"))
    assert list(log.columns) == ["step", "model", "ce", "infonce", "total"]
    assert log["step"].tolist() == [0, 1, 2]
    assert (log["total"] - log["ce"] - log["infonce"]).abs().max() < 1e-6


def test_single_mode_trains_two_systems(temp_dir, tiny_run_factory):
    run = _prepare(temp_dir, tiny_run_factory(head_mode="single"))
    out = os.path.join(temp_dir, "run")
    state = train.load_checkpoint(train.train(run, out))
    assert list(state["systems"]) == ["verb", "noun"]
    log = pd.read_csv(os.path.join(out, "train_log.csv"))
    assert log["model"].tolist() == ["verb"] * 3 + ["noun"] * 3
    ckpt = os.path.join(out, "checkpoint.pt")
    scores, predictions = train.evaluate_recognition(run, [ckpt])
    assert set(scores) == {"acc_action", "acc_verb", "acc_noun"}
    assert len(predictions) == 2


def test_beta_changes_only_total_at_first_step(temp_dir, tiny_run_factory):
    logs = []
    for beta in (0.0, 1.0):
        run = _prepare(temp_dir, tiny_run_factory(), f"data{beta}")
        run.moma.beta = beta
        out = os.path.join(temp_dir, f"run{beta}")
        train.train(run, out)
        logs.append(pd.read_csv(os.path.join(out, "train_log.csv")).iloc[0])
    assert logs[0]["ce"] == logs[1]["ce"]
    assert logs[0]["infonce"] == logs[1]["infonce"]
    assert logs[0]["total"] != logs[1]["total"]


def test_evaluate_logs_replica_count(rec_run, temp_dir, caplog):
    out = os.path.join(temp_dir, "run")
    ckpt = train.train(rec_run, out)
    caplog.set_level("DEBUG", logger="param.t3kit.train")
    scores = train.evaluate(rec_run, [ckpt], out)
    records = [r for r in caplog.records if "probability sets" in r.getMessage()]
    assert len(records) == 2
    assert all("aggregated 3 probability sets" in r.getMessage() for r in records)
    with open(os.path.join(out, "scores.json")) as f:
        assert json.load(f) == pytest.approx(dict(scores))
    assert all(0.0 <= v <= 1.0 for v in scores.values())


def test_predict_csv(rec_run, temp_dir):
    out = os.path.join(temp_dir, "run")
    ckpt = train.train(rec_run, out)
    path = train.predict(rec_run, [ckpt, ckpt], out)
    predictions = pd.read_csv(path)
    assert list(predictions.columns) == ["video_id", "verb_id", "noun_id", "action_id"]
    assert predictions["video_id"].tolist() == ["video0002", "video0003"]
    d = read_dictionary_csv(os.path.join(rec_run.data.data_dir, "dictionary.csv"))
    for row in predictions.itertuples():
        assert d.action_to_pair(row.action_id) == (row.verb_id, row.noun_id)


def test_runs_are_deterministic(rec_run, temp_dir):
    scores = []
    for name in ("a", "b"):
        out = os.path.join(temp_dir, name)
        scores.append(train.evaluate(rec_run, [train.train(rec_run, out)], out))
    assert scores[0] == scores[1]
    logs = [pd.read_csv(os.path.join(temp_dir, x, "train_log.csv")) for x in "ab"]
    pd.testing.assert_frame_equal(*logs)


def test_resume_without_steps_reproduces_eval(rec_run, temp_dir):
    first = train.train(rec_run, os.path.join(temp_dir, "a"))
    second = train.train(rec_run, os.path.join(temp_dir, "b"), resume=first)
    a, _ = train.evaluate_recognition(rec_run, [first])
    b, _ = train.evaluate_recognition(rec_run, [second])
    assert a == b
    assert train.load_checkpoint(second)["systems"]["adg"]["step"] == 3


def test_resume_continues_steps(rec_run, temp_dir):
    first = train.train(rec_run, os.path.join(temp_dir, "a"))
    rec_run.optim.steps = 5
    out = os.path.join(temp_dir, "b")
    second = train.train(rec_run, out, resume=first)
    assert train.load_checkpoint(second)["systems"]["adg"]["step"] == 5
    log = pd.read_csv(os.path.join(out, "train_log.csv"))
    assert log["step"].tolist() == [0, 1, 2, 3, 4]


def test_hash_mismatch_refused(rec_run, temp_dir):
    ckpt = train.train(rec_run, os.path.join(temp_dir, "run"))
    rec_run.moma.embed_dim = 32
    with pytest.raises(train.CheckpointError, match="config hash"):
        train.evaluate_recognition(rec_run, [ckpt])


def test_not_a_checkpoint(temp_dir):
    path = os.path.join(temp_dir, "junk.pt")
    torch.save({"weights": torch.zeros(1)}, path)
    with pytest.raises(train.CheckpointError, match="not a t3kit checkpoint"):
        train.load_checkpoint(path)
    with pytest.raises(train.CheckpointError):
        train.load_checkpoint(os.path.join(temp_dir, "missing.pt"))


def test_teacher_from_checkpoint(rec_run, temp_dir):
    ckpt = train.train(rec_run, os.path.join(temp_dir, "run"))
    state = train.load_checkpoint(ckpt)
    run = rec_run
    run.moma.teacher_init = "checkpoint"
    run.moma.teacher_checkpoint = ckpt
    dictionary = read_dictionary_csv(os.path.join(run.data.data_dir, "dictionary.csv"))
    distiller = train.build_recognition_system(run, dictionary, "adg", "adg")
    trained = {
        k[len("student.") :]: v
        for k, v in state["systems"]["adg"]["model"].items()
        if k.startswith("student.")
    }
    for k, v in distiller.teacher.state_dict().items():
        assert torch.equal(v, trained[k])
    assert parameter_checksum(distiller.student) == parameter_checksum(
        distiller.teacher
    )


def test_vqa_train_and_predict(vqa_run, temp_dir):
    out = os.path.join(temp_dir, "run")
    ckpt = train.train(vqa_run, out)
    log = pd.read_csv(os.path.join(out, "train_log.csv"))
    assert list(log.columns) == ["step", "model", "bce", "total"]
    path = train.predict(vqa_run, [ckpt], out)
    with open(path) as f:
        lines = [json.loads(x) for x in f]
    assert set(lines[0]) == {"video_id", "frame_idx", "question_id", "answer_text"}
    # 2 test videos of 12 frames, 2 questions each
    assert len(lines) == 2 * 12 * 2
    for video_id in ("video0002", "video0003"):
        frames = sorted({x["frame_idx"] for x in lines if x["video_id"] == video_id})
        assert frames == list(range(12))
    scores = train.evaluate(vqa_run, [ckpt], out)
    assert set(scores) == {"vqa_acc", "b1", "b4"}


def test_vqa_answers_shared_within_block(vqa_run, temp_dir):
    ckpt = train.train(vqa_run, os.path.join(temp_dir, "run"))
    path = train.predict(vqa_run, [ckpt], os.path.join(temp_dir, "run"))
    answers = dict()
    with open(path) as f:
        for line in f:
            x = json.loads(line)
            block = x["frame_idx"] // 5
            key = (x["video_id"], x["question_id"], block)
            assert answers.setdefault(key, x["answer_text"]) == x["answer_text"]


def _same_weights(a, b):
    assert a.keys() == b.keys()
    for k in a:
        assert torch.equal(a[k], b[k]), k


@pytest.mark.parametrize("batch_size,split", [(2, 3), (2, 4), (1, 3), (1, 4)])
def test_resumed_run_matches_uninterrupted(rec_run, temp_dir, batch_size, split):
    # the split lands mid-epoch or on an epoch boundary depending on the batch size
    rec_run.optim.batch_size = batch_size
    rec_run.optim.steps = 6
    whole = train.load_checkpoint(train.train(rec_run, os.path.join(temp_dir, "a")))
    rec_run.optim.steps = split
    first = train.train(rec_run, os.path.join(temp_dir, "b"))
    rec_run.optim.steps = 6
    out = os.path.join(temp_dir, "c")
    resumed = train.load_checkpoint(train.train(rec_run, out, resume=first))
    a, c = whole["systems"]["adg"], resumed["systems"]["adg"]
    assert (a["step"], a["epoch"]) == (c["step"], c["epoch"])
    _same_weights(a["model"], c["model"])
    pd.testing.assert_frame_equal(
        pd.read_csv(os.path.join(temp_dir, "a", "train_log.csv")),
        pd.read_csv(os.path.join(out, "train_log.csv")),
    )


def test_final_checkpoint_records_next_epoch(rec_run, temp_dir):
    rec_run.optim.batch_size = 1
    dataset = data.ClipDataset(
        rec_run,
        "train",
        True,
        read_dictionary_csv(os.path.join(rec_run.data.data_dir, "dictionary.csv")),
    )
    rec_run.optim.steps = len(dataset)
    state = train.load_checkpoint(train.train(rec_run, os.path.join(temp_dir, "a")))
    progress = state["systems"]["adg"]["progress"]
    assert state["systems"]["adg"]["epoch"] == 1
    assert progress["batch"] == 0


def test_vqa_resumed_run_matches_uninterrupted(vqa_run, temp_dir):
    vqa_run.optim.steps = 5
    whole = train.load_checkpoint(train.train(vqa_run, os.path.join(temp_dir, "a")))
    vqa_run.optim.steps = 3
    first = train.train(vqa_run, os.path.join(temp_dir, "b"))
    vqa_run.optim.steps = 5
    resumed = train.load_checkpoint(
        train.train(vqa_run, os.path.join(temp_dir, "c"), resume=first)
    )
    a, c = whole["systems"]["vqa"], resumed["systems"]["vqa"]
    assert (a["step"], a["epoch"]) == (c["step"], c["epoch"])
    _same_weights(a["model"], c["model"])


@pytest.mark.slow
def test_adg_learns_synthetic_training_clips(temp_dir, tiny_run_factory):
    run = tiny_run_factory()
    sy, st, mo, op = run.synthetic, run.stitch, run.moma, run.optim
    sy.num_videos, sy.clips_per_stream, sy.test_fraction = 12, 1, 0.25
    sy.frame_size, sy.num_verbs, sy.num_nouns, sy.num_actions = 16, 3, 3, 6
    # whole frames, no photometric or geometric jitter
    st.resize_factor, st.crop_size, st.test_crop_scale = 1.0, 16, 1.0
    st.augment_ops = []
    mo.embed_dim, mo.encoder_width, mo.queue_length = 32, 8, 32
    op.steps, op.batch_size, op.lr = 400, 4, 3e-3
    run = _prepare(temp_dir, run)
    ckpt = train.train(run, os.path.join(temp_dir, "run"))
    run.data.eval_split = "train"
    scores, _ = train.evaluate_recognition(run, [ckpt])
    assert scores["acc_action"] >= 0.95


@pytest.mark.slow
def test_mcan_with_fqca_learns_synthetic_answers(temp_dir, tiny_run_factory):
    run = tiny_run_factory("vqa")
    sy, mc, op = run.synthetic, run.mcan, run.optim
    sy.num_videos, sy.test_fraction, sy.frames_per_video = 6, 0.34, 30
    sy.num_answers, sy.feature_dim = 4, 16
    mc.fqca, mc.block_size, mc.feature_dim = True, 15, 16
    mc.hidden_dim, mc.flat_mlp_dim = 32, 32
    op.steps, op.batch_size, op.lr = 400, 4, 3e-3
    run = _prepare(temp_dir, run)
    ckpt = train.train(run, os.path.join(temp_dir, "run"))
    run.data.eval_split = "train"
    scores, _ = train.evaluate_vqa(run, [ckpt])
    assert scores["vqa_acc"] >= 0.95
