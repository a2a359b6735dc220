import functools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adapterbench.metrics import (Cohort, EditOps, MetricError, Trial, adaptive_s_norm, corpus_wer,
                                  cosine_score, edit_ops, emotion_error_rate, equal_error_rate,
                                  far_frr, intent_error_rate, read_predictions, read_trials,
                                  word_error_rate, write_predictions, write_trials)


def all_alignment_counts(ref, hyp):
    """Every (S, D, I) reachable by some alignment of ``ref`` to ``hyp``."""

    @functools.lru_cache(maxsize=None)
    def go(i, j):
        if i == len(ref) and j == len(hyp):
            return frozenset({(0, 0, 0)})
        out = set()
        if i < len(ref) and j < len(hyp):
            s = int(ref[i] != hyp[j])
            out |= {(a + s, b, c) for a, b, c in go(i + 1, j + 1)}
        if i < len(ref):
            out |= {(a, b + 1, c) for a, b, c in go(i + 1, j)}
        if j < len(hyp):
            out |= {(a, b, c + 1) for a, b, c in go(i, j + 1)}
        return frozenset(out)

    return go(0, 0)


def test_edit_ops_against_alignment_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(200):
        ref = rng.integers(0, 3, size=rng.integers(1, 6)).tolist()
        hyp = rng.integers(0, 3, size=rng.integers(0, 6)).tolist()
        ops = edit_ops(ref, hyp)
        counts = all_alignment_counts(tuple(ref), tuple(hyp))
        best = min(sum(c) for c in counts)
        assert ops.errors == best
        assert (ops.S, ops.D, ops.I) in counts
        assert ops.N == len(ref)


def test_edit_ops_examples():
    assert edit_ops("a b c", "a x c") == EditOps(1, 0, 0, 3)
    assert edit_ops("a b", "a b c") == EditOps(0, 0, 1, 2)
    assert edit_ops("a b c", "a c") == EditOps(0, 1, 0, 3)
    # "a" vs "b c": one substitution plus one insertion beats a deletion and two insertions
    assert edit_ops("a", "b c") == EditOps(1, 0, 1, 1)


def test_wer_can_exceed_one_and_rejects_empty_reference():
    assert word_error_rate(edit_ops("a", "b c d")) == 3.0
    with pytest.raises(MetricError):
        edit_ops("", "a")


def test_corpus_wer_pools_counts():
    pairs = [("a b c d", "a b c d"), ("x", "y")]
    assert corpus_wer(pairs) == pytest.approx(1 / 5)


def test_cosine_and_zero_vector():
    assert cosine_score([1, 0], [0, 2]) == 0.0
    assert cosine_score([1, 1], [2, 2]) == pytest.approx(1.0)
    with pytest.raises(MetricError):
        cosine_score([0, 0], [1, 0])


def test_adaptive_s_norm_formula():
    rng = np.random.default_rng(1)
    cohort = rng.normal(size=(20, 4))
    e, t = rng.normal(size=4), rng.normal(size=4)
    raw = cosine_score(e, t)

    def stats(v):
        s = sorted(cosine_score(v, c) for c in cohort)[-5:]
        return np.mean(s), np.std(s)

    (me, se), (mt, st_) = stats(e), stats(t)
    want = 0.5 * ((raw - me) / se + (raw - mt) / st_)
    assert adaptive_s_norm(raw, e, t, Cohort(cohort, top_k=5)) == pytest.approx(want, rel=1e-12)


def test_cohort_validation():
    with pytest.raises(MetricError):
        Cohort(np.ones((3, 2)), top_k=4)


def eer_oracle(scores, labels):
    """Operating points from thresholds placed on each distinct score, crossing interpolated."""
    scores = np.asarray(scores, float)
    labels = np.asarray(labels, bool)
    P, Nn = labels.sum(), (~labels).sum()
    ths = sorted(set(scores.tolist())) + [math.inf]
    pts = []
    for th in ths:
        fa = sum(1 for s, l in zip(scores, labels) if not l and s >= th) / Nn
        fr = sum(1 for s, l in zip(scores, labels) if l and s < th) / P
        pts.append((fa, fr))
    for fa, fr in pts:
        if fa == fr:
            return fa
    for (a0, r0), (a1, r1) in zip(pts, pts[1:]):
        if a0 - r0 > 0 > a1 - r1:
            lam = (a0 - r0) / ((a0 - r0) - (a1 - r1))
            return a0 + lam * (a1 - a0)
    raise AssertionError("no crossing")


def test_eer_against_threshold_sweep_oracle():
    rng = np.random.default_rng(2)
    for _ in range(100):
        n = int(rng.integers(2, 15))
        labels = rng.random(n) < 0.5
        labels[0], labels[1] = True, False
        scores = np.round(rng.normal(size=n) + labels * rng.random(), 1)  # rounding forces ties
        assert equal_error_rate(scores, labels) == pytest.approx(eer_oracle(scores, labels), abs=1e-12)


def test_eer_perfect_and_reversed():
    assert equal_error_rate([(0.9, True), (0.1, False)]) == 0.0
    assert equal_error_rate([(0.1, True), (0.9, False)]) == 1.0
    with pytest.raises(MetricError):
        equal_error_rate([(0.5, True)])


def test_far_definitions():
    scores, labels = [0.9, 0.8, 0.7, 0.1], [True, False, True, False]
    assert far_frr(scores, labels, 0.75) == (0.5, 0.5)
    far, frr = far_frr(scores, labels, 0.75, accepted_far=True)
    assert far == pytest.approx(1 / 2) and frr == 0.5  # FP / (FP + TP) = 1 / 2
    far, _ = far_frr(scores, labels, 0.0, accepted_far=True)
    assert far == pytest.approx(2 / 4)


def confusion(pred, lab, C):
    m = np.zeros((C, C), int)
    for p, t in zip(pred, lab):
        m[t, p] += 1
    return m


def test_emotion_error_rate_matches_confusion_recount():
    rng = np.random.default_rng(3)
    for _ in range(50):
        lab = np.concatenate([np.arange(4), rng.integers(0, 4, 20)])
        pred = rng.integers(0, 4, lab.size)
        m = confusion(pred, lab, 4)
        want = 1 - np.mean(np.diag(m) / m.sum(1))
        assert emotion_error_rate(pred, lab) == pytest.approx(want, abs=1e-15)


def test_emotion_error_rate_errors():
    with pytest.raises(MetricError):
        emotion_error_rate([0, 1], [0, 0], C=2)  # class 1 absent
    with pytest.raises(MetricError):
        emotion_error_rate([0], [4])


def test_intent_error_rate_needs_all_slots():
    labels = [(0, 1, 2), (1, 1, 1), (5, 13, 3)]
    preds = [(0, 1, 2), (1, 1, 0), (5, 13, 3)]
    assert intent_error_rate(preds, labels) == pytest.approx(1 / 3)


def test_trial_and_prediction_files_roundtrip(tmp_path):
    trials = [Trial("a", "b", True, 0.25, 1.5), Trial("c", "d", False, -0.125, -2.0)]
    write_trials(tmp_path / "t.txt", trials)
    back = read_trials(tmp_path / "t.txt")
    assert [(t.enroll_id, t.test_id, t.label, t.score) for t in back] == \
        [(t.enroll_id, t.test_id, t.label, t.score) for t in trials]
    write_predictions(tmp_path / "p.txt", ["u1", "u2"], [(1, 2, 3), (0, 0, 0)], [(1, 2, 3), (0, 1, 0)])
    assert read_predictions(tmp_path / "p.txt") == (["u1", "u2"], [(1, 2, 3), (0, 0, 0)],
                                                    [(1, 2, 3), (0, 1, 0)])


def test_bad_trial_file(tmp_path):
    (tmp_path / "t.txt").write_text("a b 1\n")
    with pytest.raises(MetricError, match=":1:"):
        read_trials(tmp_path / "t.txt")


@settings(max_examples=50, deadline=None)
@given(ref=st.lists(st.integers(0, 3), min_size=1, max_size=7),
       hyp=st.lists(st.integers(0, 3), max_size=7))
def test_edit_distance_bounds(ref, hyp):
    ops = edit_ops(ref, hyp)
    assert abs(len(ref) - len(hyp)) <= ops.errors <= max(len(ref), len(hyp))
    assert len(ref) - ops.D + ops.I == len(hyp)
    if ref == hyp:
        assert ops.errors == 0
