"""Task metrics: WER, verification EER with adaptive s-norm, macro ER, slot-exact ER.

Also the line-oriented text formats used to hand trials and predictions to
external tools::

    trials:       <enroll_id> <test_id> <label 0|1> <score>
    predictions:  <utt_id> <predicted> <reference>

where a prediction field holding several slots is written as
``slot1|slot2|slot3``.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class MetricError(ValueError):
    pass


# ---------------------------------------------------------------------------
# word error rate


@dataclass(frozen=True)
class EditOps:
    S: int
    D: int
    I: int
    N: int

    @property
    def errors(self) -> int:
        return self.S + self.D + self.I

    def __add__(self, other: "EditOps") -> "EditOps":
        return EditOps(self.S + other.S, self.D + other.D, self.I + other.I, self.N + other.N)


def _words(seq) -> list:
    return seq.split() if isinstance(seq, str) else list(seq)


def edit_ops(reference, hypothesis) -> EditOps:
    """Minimum unit-cost alignment counts.

    Among equal-cost alignments the backtrace prefers a substitution (or
    match), then an insertion, then a deletion.
    """
    ref = _words(reference)
    hyp = _words(hypothesis)
    n, m = len(ref), len(hyp)
    if n == 0:
        raise MetricError("reference must contain at least one word")
    cost = np.zeros((n + 1, m + 1), dtype=int)
    cost[:, 0] = np.arange(n + 1)
    cost[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = cost[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            cost[i, j] = min(sub, cost[i, j - 1] + 1, cost[i - 1, j] + 1)
    S = D = I = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and cost[i, j] == cost[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            S += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif j > 0 and cost[i, j] == cost[i, j - 1] + 1:
            I += 1
            j -= 1
        else:
            D += 1
            i -= 1
    return EditOps(int(S), D, I, n)


def word_error_rate(ops: EditOps) -> float:
    if ops.N < 1:
        raise MetricError("WER undefined for an empty reference")
    return ops.errors / ops.N


def corpus_wer(pairs: Iterable[tuple[Sequence, Sequence]]) -> float:
    """Errors summed over the corpus divided by the total reference length."""
    total = EditOps(0, 0, 0, 0)
    for ref, hyp in pairs:
        total = total + edit_ops(ref, hyp)
    return word_error_rate(total)


# ---------------------------------------------------------------------------
# verification scoring


def cosine_score(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise MetricError("cosine score undefined for a zero embedding")
    return float(np.dot(a, b) / (na * nb))


@dataclass
class Cohort:
    embeddings: np.ndarray  # rows are cohort embeddings
    top_k: int = 50

    def __post_init__(self):
        self.embeddings = np.atleast_2d(np.asarray(self.embeddings, dtype=float))
        if self.top_k < 2:
            raise MetricError("adaptive s-norm needs top_k >= 2")
        if self.top_k > len(self.embeddings):
            raise MetricError(f"top_k={self.top_k} exceeds cohort size {len(self.embeddings)}")

    def _unit(self) -> np.ndarray:
        norms = np.linalg.norm(self.embeddings, axis=1, keepdims=True)
        return self.embeddings / norms

    def stats(self, emb, eps: float = 1e-12) -> tuple[float, float]:
        """Mean and std of the ``top_k`` highest cosine scores of ``emb`` against the cohort."""
        e = np.asarray(emb, dtype=float)
        scores = self._unit() @ (e / np.linalg.norm(e))
        top = np.sort(scores)[-self.top_k:]
        return float(top.mean()), max(float(top.std()), eps)


def adaptive_s_norm(raw: float, enroll, test, cohort: Cohort, eps: float = 1e-12) -> float:
    mu_e, sd_e = cohort.stats(enroll, eps)
    mu_t, sd_t = cohort.stats(test, eps)
    return 0.5 * ((raw - mu_e) / sd_e + (raw - mu_t) / sd_t)


@dataclass
class Trial:
    enroll_id: str
    test_id: str
    label: bool
    score: float = float("nan")
    normalized: float = float("nan")


def _split_scores(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    pos, neg = scores[labels], scores[~labels]
    if pos.size == 0 or neg.size == 0:
        raise MetricError("EER needs at least one target and one non-target trial")
    return pos, neg


def far_frr(scores, labels, threshold: float, accepted_far: bool = False) -> tuple[float, float]:
    """Accept when ``score >= threshold``.

    FAR is FP / #non-targets; ``accepted_far`` switches it to FP / (FP + TP).
    """
    pos, neg = _split_scores(scores, labels)
    tp = int((pos >= threshold).sum())
    fn = pos.size - tp
    fp = int((neg >= threshold).sum())
    if accepted_far:
        far = fp / (fp + tp) if fp + tp else 0.0
    else:
        far = fp / neg.size
    return far, fn / pos.size


def equal_error_rate(trials, labels=None, accepted_far: bool = False) -> float:
    """Rate where FAR and FRR cross.

    ``trials`` is either a sequence of ``(score, label)`` pairs or a score
    array with ``labels`` given separately.  Thresholds sweep every midpoint
    between adjacent distinct scores plus one below and one above all of them;
    when no threshold gives FAR == FRR the crossing is found by linear
    interpolation between the two neighbouring operating points.
    """
    if labels is None:
        pairs = list(trials)
        scores = [s for s, _ in pairs]
        labels = [lab for _, lab in pairs]
    else:
        scores = trials
    scores = np.asarray(scores, dtype=float)
    _split_scores(scores, labels)
    uniq = np.unique(scores)
    thresholds = np.concatenate(([uniq[0] - 1.0], (uniq[:-1] + uniq[1:]) / 2, [uniq[-1] + 1.0]))
    points = [far_frr(scores, labels, t, accepted_far) for t in thresholds]
    # thresholds ascend: FAR falls, FRR rises
    diffs = [far - frr for far, frr in points]
    for (far, frr), dlt in zip(points, diffs):
        if dlt == 0:
            return float(far)
    for k in range(len(points) - 1):
        d0, d1 = diffs[k], diffs[k + 1]
        if d0 > 0 > d1:
            (a0, r0), (a1, r1) = points[k], points[k + 1]
            lam = d0 / (d0 - d1)
            return float(a0 + lam * (a1 - a0))
    # degenerate monotonicity (possible only with accepted_far); nearest point
    k = int(np.argmin(np.abs(diffs)))
    return float((points[k][0] + points[k][1]) / 2)


# ---------------------------------------------------------------------------
# classification error rates


def emotion_error_rate(predictions, labels, C: int = 4) -> float:
    """``1 - mean per-class accuracy`` (macro / balanced error)."""
    pred = np.asarray(predictions, dtype=int)
    lab = np.asarray(labels, dtype=int)
    if pred.shape != lab.shape:
        raise MetricError("predictions and labels differ in length")
    if np.any(lab < 0) or np.any(lab >= C):
        raise MetricError(f"labels must lie in [0, {C})")
    # exact rational arithmetic, rounded once, so recounts agree bit for bit
    total = Fraction(0)
    for c in range(C):
        mask = lab == c
        if not mask.any():
            raise MetricError(f"class {c} has no examples; its accuracy is undefined")
        total += Fraction(int((pred[mask] == c).sum()), int(mask.sum()))
    return float(1 - total / C)


def intent_error_rate(predictions, labels) -> float:
    """``1 - accuracy`` where an item counts only if every slot is right."""
    pred = [tuple(p) for p in predictions]
    lab = [tuple(x) for x in labels]
    if len(pred) != len(lab):
        raise MetricError("predictions and labels differ in length")
    if not lab:
        raise MetricError("no items to score")
    correct = sum(p == t for p, t in zip(pred, lab))
    return float(Fraction(len(lab) - correct, len(lab)))


# ---------------------------------------------------------------------------
# text formats


def write_trials(path: str | Path, trials: Sequence[Trial], normalized: bool = False) -> None:
    lines = []
    for t in trials:
        score = t.normalized if normalized else t.score
        lines.append(f"{t.enroll_id} {t.test_id} {int(bool(t.label))} {score!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_trials(path: str | Path) -> list[Trial]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 4:
            raise MetricError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
        out.append(Trial(parts[0], parts[1], parts[2] == "1", float(parts[3])))
    return out


def _fmt_pred(v) -> str:
    if isinstance(v, (tuple, list)):
        return "|".join(str(int(x)) for x in v)
    return str(int(v))


def _parse_pred(s: str):
    parts = s.split("|")
    return tuple(int(p) for p in parts) if len(parts) > 1 else int(parts[0])


def write_predictions(path: str | Path, ids: Sequence[str], predictions, labels) -> None:
    lines = [f"{i} {_fmt_pred(p)} {_fmt_pred(t)}" for i, p, t in zip(ids, predictions, labels)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_predictions(path: str | Path) -> tuple[list[str], list, list]:
    ids, preds, labels = [], [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise MetricError(f"{path}:{lineno}: expected 3 fields, got {len(parts)}")
        ids.append(parts[0])
        preds.append(_parse_pred(parts[1]))
        labels.append(_parse_pred(parts[2]))
    return ids, preds, labels
