"""Glue between toy datasets, heads, losses and metrics for each task family."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import ToyDataset
from .heads import AsrHead, ClsHead, ctc_loss, cross_entropy_loss, greedy_decode
from .metrics import (Cohort, Trial, adaptive_s_norm, corpus_wer, cosine_score,
                      emotion_error_rate, equal_error_rate, intent_error_rate)

TASKS = ("asr", "asv", "ser", "sic")
METRIC_NAMES = {"asr": "wer", "asv": "eer", "ser": "er", "sic": "er"}


def head_outputs(task: str, meta: dict) -> int:
    if task == "asr":
        return meta["vocab"]
    if task == "asv":
        return meta["speakers"]
    if task == "ser":
        return meta["classes"]
    if task == "sic":
        return int(sum(meta["slots"]))
    raise ValueError(f"unknown task {task!r}")


def build_head(task: str, d_in: int, meta: dict, hidden: int = 32, rng=None):
    """CTC head for ASR, ``fc1 -> mean -> fc2`` for the classification tasks."""
    if task == "asr":
        return AsrHead(d_in, meta["vocab"], rng)
    return ClsHead(d_in, hidden, head_outputs(task, meta), rng)


def _sic_loss(logits: Tensor, labels, slots) -> Tensor:
    """Sum of one cross-entropy per slot over its own block of logits."""
    labels = np.asarray(labels, dtype=int)
    total, start = None, 0
    for s, k in enumerate(slots):
        part = cross_entropy_loss(ag.slice_cols(logits, start, start + k), labels[:, s])
        total = part if total is None else ag.add(total, part)
        start += k
    return total


def batch_loss(task: str, model, x: np.ndarray, y: list, meta: dict) -> Tensor:
    logits = model.head(model.features(Tensor(x)))
    if task == "asr":
        return ctc_loss(logits, y)
    if task == "sic":
        return _sic_loss(logits, y, meta["slots"])
    return cross_entropy_loss(logits, np.asarray(y, dtype=int))


def make_loss_fn(task: str, dataset: ToyDataset):
    """``loss_fn(model, indices)`` over the training split, as ``train_loop`` expects."""
    train = dataset.train

    def loss_fn(model, idx):
        return batch_loss(task, model, train.x[idx], [train.y[i] for i in idx], dataset.meta)

    return loss_fn


def _batches(n: int, size: int):
    for start in range(0, n, size):
        yield np.arange(start, min(n, start + size))


def split_loss(task: str, model, dataset: ToyDataset, split: str = "val", batch_size: int = 32) -> float:
    """Mean loss over a split, weighted by batch size."""
    data = dataset.split(split)
    if len(data) == 0:
        raise ValueError(f"split {split!r} is empty")
    total = 0.0
    with ag.no_grad():
        for idx in _batches(len(data), batch_size):
            loss = batch_loss(task, model, data.x[idx], [data.y[i] for i in idx], dataset.meta)
            total += loss.item() * len(idx)
    return total / len(data)


def predict(task: str, model, x: np.ndarray, meta: dict, batch_size: int = 32) -> list:
    """Decoded hypotheses (ASR), class ids (SER/ASV) or slot triples (SIC)."""
    out = []
    with ag.no_grad():
        for idx in _batches(len(x), batch_size):
            logits = model.head(model.features(Tensor(x[idx]))).data
            if task == "asr":
                out.extend(greedy_decode(row) for row in logits)
            elif task == "sic":
                preds, start = [], 0
                for k in meta["slots"]:
                    preds.append(logits[:, start:start + k].argmax(axis=-1))
                    start += k
                out.extend(tuple(int(v) for v in row) for row in np.stack(preds, axis=1))
            else:
                out.extend(int(v) for v in logits.argmax(axis=-1))
    return out


def embeddings(model, x: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Pooled ``fc1`` activations, one row per utterance."""
    rows = []
    with ag.no_grad():
        for idx in _batches(len(x), batch_size):
            rows.append(model.head.embed(model.features(Tensor(x[idx]))).data)
    return np.concatenate(rows)


def score_trials(model, dataset: ToyDataset, top_k: int = 50) -> list[Trial]:
    """Cosine scores for the test trials, plus s-normalised scores against a training cohort."""
    test = dataset.test
    pos = {u: i for i, u in enumerate(test.ids)}
    emb = embeddings(model, test.x)
    cohort = Cohort(embeddings(model, dataset.train.x), top_k=min(top_k, len(dataset.train)))
    trials = []
    for enroll, probe, label in dataset.trials:
        e, t = emb[pos[enroll]], emb[pos[probe]]
        raw = cosine_score(e, t)
        trials.append(Trial(enroll, probe, label, raw, adaptive_s_norm(raw, e, t, cohort)))
    return trials


def evaluate(task: str, model, dataset: ToyDataset, split: str = "test") -> dict:
    """Task metric on a split: WER, EER (raw and s-normed), macro ER or slot-exact ER."""
    data = dataset.split(split)
    if task == "asv":
        if split != "test":
            raise ValueError("verification trials are defined on the test split only")
        trials = score_trials(model, dataset)
        labels = [t.label for t in trials]
        return {
            "eer": equal_error_rate([t.normalized for t in trials], labels),
            "eer_raw": equal_error_rate([t.score for t in trials], labels),
        }
    preds = predict(task, model, data.x, dataset.meta)
    if task == "asr":
        return {"wer": corpus_wer(zip(data.y, preds))}
    if task == "ser":
        return {"er": emotion_error_rate(preds, data.y, dataset.meta["classes"])}
    if task == "sic":
        return {"er": intent_error_rate(preds, data.y)}
    raise ValueError(f"unknown task {task!r}")


def primary_metric(task: str, metrics: dict) -> float:
    return metrics[METRIC_NAMES[task]]
