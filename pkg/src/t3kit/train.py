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

"""Training with checkpoints, then evaluation and prediction

Recognition and anticipation train one distillation system per head
(``single``: a verb system and a noun system; ``multi`` and ``adg``: one system).
VQA trains one :class:`t3kit.vqa.MCANModel`.

A checkpoint is a :func:`torch.save` dictionary holding the :func:`config_hash` of the
run, the step and epoch reached, and per-system model and optimizer state. Evaluation
and prediction refuse checkpoints whose hash differs from the current config. Given
several checkpoints, their (replica-averaged) probabilities are averaged again.
"""

from __future__ import annotations

import json
import pickle
import os

from collections import OrderedDict
from typing import Dict, List, Optional, Sequence, Tuple, Union

import pandas as pd
import param
import torch

from torch.utils.data import DataLoader, RandomSampler

from .action_dictionary import ActionDictionary, read_dictionary_csv
from .data import ClipDataset, VQADataset
from .heads import TaskHead, decode, head_probabilities
from .metrics import (
    aggregate,
    answer_bleu,
    recognition_accuracy,
    vqa_accuracy,
    write_score_report,
)
from .moma import MomaDistiller, build_encoder
from .params import RunConfig, config_hash
from .vqa import (
    AnswerVocab,
    MCANModel,
    TokenVocab,
    inference_partition,
    pad_objects,
    vqa_loss,
)

__all__ = [
    "build_recognition_system",
    "build_vqa_model",
    "CheckpointError",
    "evaluate",
    "evaluate_recognition",
    "evaluate_vqa",
    "load_checkpoint",
    "predict",
    "recognition_systems",
    "save_checkpoint",
    "train",
    "train_recognition",
    "train_vqa",
]

CHECKPOINT_NAME = "checkpoint.pt"
LOG_NAME = "train_log.csv"

_logger = param.get_logger(name="t3kit.train")


class CheckpointError(RuntimeError):
    """Raised when a checkpoint is unreadable or incompatible with the run config"""


def recognition_systems(head_mode: str) -> Tuple[Tuple[str, str], ...]:
    """``(system name, TaskHead mode)`` pairs trained for a head mode"""
    if head_mode == "single":
        return (("verb", "single_verb"), ("noun", "single_noun"))
    return ((head_mode, head_mode),)


def save_checkpoint(path: Union[str, os.PathLike], state: dict) -> None:
    tmp = f"{path}.tmp"
    torch.save(state, tmp)
    os.replace(tmp, path)


def load_checkpoint(
    path: Union[str, os.PathLike], run: Optional[RunConfig] = None
) -> dict:
    """Load a checkpoint, checking its config hash against `run` if given

    Raises
    ------
    CheckpointError
    """
    try:
        state = torch.load(path, map_location="cpu")
    except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as e:
        raise CheckpointError(f"could not load checkpoint '{path}': {e}") from e
    if not isinstance(state, dict) or "config_hash" not in state:
        raise CheckpointError(f"'{path}' is not a t3kit checkpoint")
    if run is not None:
        expected = config_hash(run)
        if state["config_hash"] != expected:
            raise CheckpointError(
                f"checkpoint '{path}' was written under config hash "
                f"{state['config_hash'][:12]}..., but the current config hashes to "
                f"{expected[:12]}.... Model-shaping parameters differ"
            )
    return state


def _teacher_state(run: RunConfig, system: str) -> Optional[dict]:
    moma = run.moma
    if moma.teacher_init != "checkpoint":
        return None
    state = load_checkpoint(moma.teacher_checkpoint)
    systems = state.get("systems", dict())
    if not systems:
        raise CheckpointError(
            f"'{moma.teacher_checkpoint}' holds no recognition systems to use as a "
            "teacher"
        )
    source = systems.get(system, next(iter(systems.values())))
    prefix = "student."
    return OrderedDict(
        (k[len(prefix) :], v)
        for k, v in source["model"].items()
        if k.startswith(prefix)
    )


def build_recognition_system(
    run: RunConfig, dictionary: ActionDictionary, system: str, mode: str
) -> MomaDistiller:
    """Build one distillation system, seeded by ``task.seed``

    The teacher is a random encoder seeded by ``moma.teacher_seed``, or the student of
    ``moma.teacher_checkpoint``. The student starts as a copy of the teacher.
    """
    teacher = build_encoder(run.moma, seed=run.moma.teacher_seed)
    teacher_state = _teacher_state(run, system)
    if teacher_state is not None:
        try:
            teacher.load_state_dict(teacher_state)
        except RuntimeError as e:
            raise CheckpointError(
                f"teacher checkpoint '{run.moma.teacher_checkpoint}' does not fit "
                f"the encoder: {e}"
            ) from e
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(run.task.seed)
        head = TaskHead(mode, run.moma.embed_dim, dictionary)
        return MomaDistiller(teacher, head, run.moma)


def build_vqa_model(run: RunConfig, vocab_size: int, num_answers: int) -> MCANModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(run.task.seed)
        return MCANModel(run.mcan, vocab_size, num_answers)


def _make_optimizer(run: RunConfig, params) -> torch.optim.Optimizer:
    return torch.optim.Adam(
        params, lr=run.optim.lr, weight_decay=run.optim.weight_decay
    )


def _write_log(rows: List[dict], out_dir: str) -> None:
    if rows:
        pd.DataFrame(rows).to_csv(os.path.join(out_dir, LOG_NAME), index=False)


def _new_progress() -> dict:
    return {"step": 0, "epoch": 0, "batch": 0, "generator": None, "rng": None}


def _progress_state(progress: dict, generator: torch.Generator, loader) -> dict:
    """A checkpointable copy of `progress`, rolled over to the next epoch if spent"""
    state = dict(progress, rng=torch.get_rng_state())
    if state["batch"] >= len(loader):
        state.update(epoch=state["epoch"] + 1, batch=0, generator=None)
    if state["generator"] is None:
        state["generator"] = generator.get_state()
    return state


def _resumable_batches(
    loader: DataLoader,
    dataset,
    generator: torch.Generator,
    progress: dict,
    steps: int,
    checkpoint_epochs: int,
    snapshot,
):
    # Yields batches until progress["step"] reaches `steps`, advancing `progress`
    # after each. progress["generator"] is the sampler state before the epoch's
    # permutation was drawn and progress["batch"] counts batches of the epoch already
    # trained on. A snapshot taken at batch 0 holds the global RNG state from before
    # the epoch's iterator was made; one taken mid-epoch holds it from after the last
    # step. Replaying both puts a resumed run back on the uninterrupted trajectory.
    rng, first = progress["rng"], True
    while progress["step"] < steps:
        dataset.epoch = progress["epoch"]
        if progress["generator"] is None:
            progress["generator"] = generator.get_state()
        else:
            generator.set_state(progress["generator"])
        if progress["batch"] == 0:
            if rng is not None:
                torch.set_rng_state(rng)
                rng = None
            elif not first and progress["epoch"] % checkpoint_epochs == 0:
                snapshot()
        first = False
        batches = iter(loader)
        for _ in range(progress["batch"]):
            next(batches)
        if rng is not None:
            torch.set_rng_state(rng)
            rng = None
        for batch in batches:
            yield batch
            progress["step"] += 1
            progress["batch"] += 1
            if progress["step"] >= steps:
                return
        progress.update(epoch=progress["epoch"] + 1, batch=0, generator=None)


def train_recognition(
    run: RunConfig,
    out_dir: Union[str, os.PathLike],
    resume: Optional[Union[str, os.PathLike]] = None,
) -> str:
    """Train recognition/anticipation systems. Returns the checkpoint path

    The checkpoint is rewritten every ``optim.checkpoint_epochs`` epochs and when
    training ends. With `resume`, training picks up from that checkpoint's step.
    """
    os.makedirs(out_dir, exist_ok=True)
    ckpt_path = os.path.join(out_dir, CHECKPOINT_NAME)
    dictionary = read_dictionary_csv(run.data.path("dictionary_file"))
    prev = load_checkpoint(resume, run) if resume is not None else None
    state = {
        "config_hash": config_hash(run),
        "config": run.to_dict(),
        "task": run.task.task,
        "head_mode": run.task.head_mode,
        "systems": OrderedDict(),
    }
    rows = list(prev.get("log", [])) if prev else []
    optim = run.optim
    for name, mode in recognition_systems(run.task.head_mode):
        dataset = ClipDataset(run, "train", True, dictionary)
        if not len(dataset):
            raise ValueError(f"no training clips in '{run.data.data_dir}'")
        distiller = build_recognition_system(run, dictionary, name, mode)
        optimizer = _make_optimizer(run, distiller.trainable_parameters())
        generator = torch.Generator().manual_seed(run.task.seed)
        progress = _new_progress()
        if prev is not None:
            sys_state = prev["systems"][name]
            distiller.load_state_dict(sys_state["model"])
            optimizer.load_state_dict(sys_state["optimizer"])
            progress.update(sys_state["progress"])
        loader = DataLoader(
            dataset,
            batch_size=optim.batch_size,
            sampler=RandomSampler(dataset, generator=generator),
            num_workers=optim.num_workers,
        )

        def snapshot():
            p = _progress_state(progress, generator, loader)
            state["systems"][name] = {
                "model": distiller.state_dict(),
                "optimizer": optimizer.state_dict(),
                "progress": p,
                "step": p["step"],
                "epoch": p["epoch"],
            }
            state["log"] = rows
            save_checkpoint(ckpt_path, state)

        batches = _resumable_batches(
            loader,
            dataset,
            generator,
            progress,
            optim.steps,
            optim.checkpoint_epochs,
            snapshot,
        )
        for images, targets in batches:
            step = progress["step"]
            report = distiller.train_step(images, targets, optimizer)
            rows.append(
                OrderedDict(
                    step=step,
                    model=name,
                    ce=report.ce,
                    infonce=report.infonce,
                    total=report.total,
                )
            )
            if step % run.task.log_every == 0:
                _logger.info(
                    f"{name} step {step}: ce={report.ce:.4f} "
                    f"infonce={report.infonce:.4f} total={report.total:.4f}"
                )
        snapshot()
    _write_log(rows, out_dir)
    return ckpt_path


def _collate_vqa(max_objects: int):
    def collate(batch):
        feats, tokens, answers = zip(*batch)
        x, mask = pad_objects(list(feats), max_objects)
        return x, mask, torch.stack(tokens), torch.tensor(answers, dtype=torch.long)

    return collate


def train_vqa(
    run: RunConfig,
    out_dir: Union[str, os.PathLike],
    resume: Optional[Union[str, os.PathLike]] = None,
) -> str:
    """Train the VQA model. Returns the checkpoint path"""
    os.makedirs(out_dir, exist_ok=True)
    ckpt_path = os.path.join(out_dir, CHECKPOINT_NAME)
    prev = load_checkpoint(resume, run) if resume is not None else None
    vocabs = dict()
    if prev is not None:
        vocabs = dict(
            token_vocab=TokenVocab(prev["token_vocab"][2:]),
            answer_vocab=AnswerVocab(prev["answer_vocab"]),
        )
    dataset = VQADataset(run, "train", True, **vocabs)
    if not len(dataset):
        raise ValueError(f"no training questions in '{run.data.data_dir}'")
    model = build_vqa_model(run, len(dataset.token_vocab), len(dataset.answer_vocab))
    optimizer = _make_optimizer(run, model.parameters())
    generator = torch.Generator().manual_seed(run.task.seed)
    progress = _new_progress()
    rows = list(prev.get("log", [])) if prev else []
    if prev is not None:
        sys_state = prev["systems"]["vqa"]
        model.load_state_dict(sys_state["model"])
        optimizer.load_state_dict(sys_state["optimizer"])
        progress.update(sys_state["progress"])
    optim = run.optim
    loader = DataLoader(
        dataset,
        batch_size=optim.batch_size,
        sampler=RandomSampler(dataset, generator=generator),
        num_workers=optim.num_workers,
        collate_fn=_collate_vqa(run.mcan.max_objects),
    )
    state = {
        "config_hash": config_hash(run),
        "config": run.to_dict(),
        "task": "vqa",
        "token_vocab": list(dataset.token_vocab.words),
        "answer_vocab": list(dataset.answer_vocab.answers),
        "systems": OrderedDict(),
    }

    def snapshot():
        p = _progress_state(progress, generator, loader)
        state["systems"]["vqa"] = {
            "model": model.state_dict(),
            "optimizer": optimizer.state_dict(),
            "progress": p,
            "step": p["step"],
            "epoch": p["epoch"],
        }
        state["log"] = rows
        save_checkpoint(ckpt_path, state)

    model.train()
    batches = _resumable_batches(
        loader,
        dataset,
        generator,
        progress,
        optim.steps,
        optim.checkpoint_epochs,
        snapshot,
    )
    for x, mask, tokens, answers in batches:
        step = progress["step"]
        loss = vqa_loss(model(x, mask, tokens), answers)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        bce = loss.detach().item()
        rows.append(OrderedDict(step=step, model="vqa", bce=bce, total=bce))
        if step % run.task.log_every == 0:
            _logger.info(f"vqa step {step}: bce={bce:.4f}")
    snapshot()
    _write_log(rows, out_dir)
    return ckpt_path


def train(
    run: RunConfig,
    out_dir: Union[str, os.PathLike],
    resume: Optional[Union[str, os.PathLike]] = None,
) -> str:
    """Train whatever ``run.task.task`` names"""
    torch.manual_seed(run.task.seed)
    if run.task.task == "vqa":
        return train_vqa(run, out_dir, resume)
    return train_recognition(run, out_dir, resume)


def _recognition_models(run, dictionary, state) -> Dict[str, MomaDistiller]:
    models = OrderedDict()
    for name, mode in recognition_systems(run.task.head_mode):
        if name not in state["systems"]:
            raise CheckpointError(f"checkpoint lacks the '{name}' system")
        distiller = _eval_system(run, dictionary, mode)
        distiller.load_state_dict(state["systems"][name]["model"])
        models[name] = distiller.eval()
    return models


def _eval_system(
    run: RunConfig, dictionary: ActionDictionary, mode: str
) -> MomaDistiller:
    # weights come from the checkpoint, so the teacher source is irrelevant
    teacher = build_encoder(run.moma, seed=run.moma.teacher_seed)
    head = TaskHead(mode, run.moma.embed_dim, dictionary)
    return MomaDistiller(teacher, head, run.moma)


@torch.no_grad()
def _clip_probabilities(models, images, head_mode, num_verbs) -> torch.Tensor:
    # (replicas, 3, S, S) -> (replicas, width) probabilities of one checkpoint
    if head_mode == "single":
        logits = torch.cat([models["verb"](images), models["noun"](images)], -1)
        return head_probabilities(logits, "single", num_verbs)
    (model,) = models.values()
    return head_probabilities(model(images), head_mode, num_verbs)


def evaluate_recognition(
    run: RunConfig, checkpoints: Sequence[Union[str, os.PathLike]]
) -> Tuple[Dict[str, float], pd.DataFrame]:
    """Score checkpoints on ``data.eval_split``

    Returns
    -------
    scores, predictions
        `scores` holds ``acc_action``, ``acc_verb``, ``acc_noun``. `predictions` has
        columns ``video_id``, ``verb_id``, ``noun_id``, ``action_id`` (empty when the
        pair is not an action)
    """
    if not checkpoints:
        raise ValueError("at least one checkpoint is needed")
    dictionary = read_dictionary_csv(run.data.path("dictionary_file"))
    dataset = ClipDataset(run, run.data.eval_split, False, dictionary)
    head_mode, k = run.task.head_mode, dictionary.num_verbs
    all_models = [
        _recognition_models(run, dictionary, load_checkpoint(path, run))
        for path in checkpoints
    ]
    preds, rows = [], []
    for i in range(len(dataset)):
        images, _ = dataset[i]
        per_ckpt = []
        for models in all_models:
            probs = _clip_probabilities(models, images, head_mode, k)
            _logger.debug(
                f"clip {dataset.video_ids[i]}: aggregated {probs.size(0)} "
                "probability sets"
            )
            per_ckpt.append(aggregate(probs))
        (pred,) = decode(aggregate(per_ckpt), dictionary, head_mode)
        preds.append(pred)
        rows.append((dataset.video_ids[i], pred.verb, pred.noun, pred.action))
    targets = dataset.targets[:, :2].tolist()
    score = recognition_accuracy(preds, targets)
    predictions = pd.DataFrame(
        rows, columns=("video_id", "verb_id", "noun_id", "action_id")
    ).astype({"action_id": "Int64"})
    return OrderedDict(score._asdict()), predictions


@torch.no_grad()
def _vqa_answers(run, checkpoints) -> Tuple[List[dict], VQADataset]:
    states = [load_checkpoint(path, run) for path in checkpoints]
    first = states[0]
    token_vocab = TokenVocab(first["token_vocab"][2:])
    answer_vocab = AnswerVocab(first["answer_vocab"])
    for path, state in zip(checkpoints, states):
        if (
            state["token_vocab"] != first["token_vocab"]
            or state["answer_vocab"] != first["answer_vocab"]
        ):
            raise CheckpointError(f"'{path}' was trained with different vocabularies")
    models = []
    for state in states:
        model = build_vqa_model(run, len(token_vocab), len(answer_vocab))
        model.load_state_dict(state["systems"]["vqa"]["model"])
        models.append(model.eval())
    dataset = VQADataset(run, run.data.eval_split, False, token_vocab, answer_vocab)
    questions: Dict[str, List[str]] = OrderedDict()
    for record in dataset.records:
        qs = questions.setdefault(record.video_id, [])
        if record.question not in qs:
            qs.append(record.question)
    mcan = run.mcan
    out = []
    for video_id, qs in questions.items():
        frames = dataset.features(video_id)
        for rep, covered in inference_partition(len(frames), mcan.block_size):
            x, mask = pad_objects(
                [torch.from_numpy(frames[rep])] * len(qs), mcan.max_objects
            )
            tokens = torch.tensor([token_vocab.encode(q, mcan.max_tokens) for q in qs])
            scores = aggregate([m.scores(x, mask, tokens) for m in models])
            for qid, a in enumerate(scores.argmax(-1).tolist()):
                for f in covered:
                    out.append(
                        OrderedDict(
                            video_id=video_id,
                            frame_idx=f,
                            question_id=qid,
                            question=qs[qid],
                            answer_text=answer_vocab[a],
                        )
                    )
    return out, dataset


def evaluate_vqa(
    run: RunConfig, checkpoints: Sequence[Union[str, os.PathLike]]
) -> Tuple[Dict[str, float], List[dict]]:
    """Score checkpoints on ``data.eval_split`` by accuracy, B@1, and B@4

    Every annotated frame is answered through its block's representative frame.
    """
    if not checkpoints:
        raise ValueError("at least one checkpoint is needed")
    answers, dataset = _vqa_answers(run, checkpoints)
    lookup = {(a["video_id"], a["frame_idx"], a["question"]): a for a in answers}
    cands, refs = [], []
    for record in dataset.records:
        pred = lookup.get((record.video_id, record.frame_idx, record.question))
        cands.append("" if pred is None else pred["answer_text"])
        refs.append(record.answer)
    bleu_ = answer_bleu(cands, refs)
    scores = OrderedDict(
        vqa_acc=vqa_accuracy(cands, refs), b1=bleu_.b1, b4=bleu_.b4
    )
    return scores, answers


def evaluate(
    run: RunConfig,
    checkpoints: Sequence[Union[str, os.PathLike]],
    out_dir: Union[str, os.PathLike],
) -> Dict[str, float]:
    """Write ``scores.json`` and ``scores.txt`` to `out_dir`, returning the scores"""
    if run.task.task == "vqa":
        scores, _ = evaluate_vqa(run, checkpoints)
    else:
        scores, _ = evaluate_recognition(run, checkpoints)
    write_score_report(scores, out_dir)
    return scores


def predict(
    run: RunConfig,
    checkpoints: Sequence[Union[str, os.PathLike]],
    out_dir: Union[str, os.PathLike],
) -> str:
    """Write ``predictions.csv`` (recognition) or ``predictions.jsonl`` (VQA)"""
    os.makedirs(out_dir, exist_ok=True)
    if run.task.task == "vqa":
        answers, _ = _vqa_answers(run, checkpoints)
        path = os.path.join(out_dir, "predictions.jsonl")
        with open(path, "w") as fp:
            for a in answers:
                a = OrderedDict((k, v) for k, v in a.items() if k != "question")
                fp.write(json.dumps(a) + "\n")
    else:
        _, predictions = evaluate_recognition(run, checkpoints)
        path = os.path.join(out_dir, "predictions.csv")
        predictions.to_csv(path, index=False)
    return path
