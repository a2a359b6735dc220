"""Acceptance suite: one test per headline criterion, each printing a PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -v -s`` to see the verdict lines inline;
they are also collected into an "acceptance criteria" block at the end of
every pytest run.
"""

import itertools
import math
import time
from fractions import Fraction

import numpy as np
import pytest
from scipy.special import logsumexp

from conftest import VERDICTS
from test_autograd import PRIMITIVES, rand
from test_experiment import check_artifacts
from test_metrics import all_alignment_counts, eer_oracle

from adapterbench import autograd as ag
from adapterbench import experiment
from adapterbench.adapters import P_VARIANTS, AdapterPlan, PAdapter, assemble
from adapterbench.autograd import Tensor, finite_diff_check
from adapterbench.backbone import Backbone, BackboneConfig, backbone_forward, full_scale_config
from adapterbench.config import ExperimentConfig
from adapterbench.heads import AsrHead, ClsHead, InfeasibleAlignment, ctc_loss
from adapterbench.metrics import edit_ops, emotion_error_rate, equal_error_rate, intent_error_rate
from adapterbench.training import LrSchedule, count_parameters, lr_at


def verdict(name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    print(line)
    VERDICTS.append(line)
    assert ok, line


# -- parameter budget ----------------------------------------------------------


def within(count: int, printed: float, digits_unit: float) -> tuple[bool, float]:
    """1% of the printed figure, widened to its rounding half-unit when that is larger."""
    err = abs(count - printed) / printed
    return abs(count - printed) <= max(0.01 * printed, digits_unit / 2), err


def test_parameter_budget():
    t0 = time.perf_counter()
    bcfg = full_scale_config()
    kw = dict(b=256, d_L=512, m=5)

    def report(strategy, head=None, **extra):
        model = assemble(AdapterPlan(strategy=strategy, task="asr", **{**kw, **extra}),
                         Backbone(bcfg, materialize=False), head, seed=None)
        return model, count_parameters(model)

    rows = []
    for cfg, printed, unit in (("A", 12, 1), ("B", 18_000, 1_000), ("D", 37_000, 1_000),
                               ("E", 4_750_000, 10_000)):
        rows.append((f"L-config {cfg}", report("L", l_config=cfg)[1].M, printed, unit))
    for variant, printed, unit in (("A", 3_840, 1), ("B", 1_190_000, 10_000)):
        model, _ = report("ELP", p_variant=variant)
        n = sum(p.size for name, p in model.named_parameters() if name.startswith("p_adapter"))
        rows.append((f"P-variant {variant}", n, printed, unit))
    _, elp = report("ELP", head=AsrHead(512, 31))
    rows.append(("ELP total M", elp.M, 9_520_000, 10_000))
    elapsed = time.perf_counter() - t0

    parts, ok = [], True
    for name, count, printed, unit in rows:
        good, err = within(count, printed, unit)
        ok &= good
        parts.append(f"{name} {count:,} vs {printed:,} ({100 * err:.2f}%)")
    ratio = (elp.M + elp.H) / elp.N
    ok &= ratio <= 0.11 and elapsed < 1.0
    verdict("parameter budget", ok,
            "; ".join(parts) + f"; (M+H)/N = {ratio:.4f} with N = {elp.N:,}; {elapsed:.2f}s")


# -- gradients -------------------------------------------------------------------


def test_gradient_correctness():
    t0 = time.perf_counter()
    worst = {}
    rng = np.random.default_rng(10)
    for name, (f, shapes) in sorted(PRIMITIVES.items()):
        worst[name] = finite_diff_check(f, [rand(rng, *s) for s in shapes])

    desk = BackboneConfig(L=3, d=16, heads=2, d_ffn=16, conv_blocks=[(2, 1, 8)], in_channels=3)
    for strategy in ("E", "L", "EL", "ELP", "lora", "prefix", "efficient"):
        plan = AdapterPlan(strategy=strategy, task="ser", m=2, b=4, d_L=6, r=2)
        model = assemble(plan, Backbone(desk), ClsHead(plan.feature_width(16), 5, 3,
                                                       np.random.default_rng(1)), seed=2)
        prng = np.random.default_rng(7)
        for p in model.adapter_parameters():
            p.data += 0.3 * prng.normal(size=p.shape)  # move off the zero init
        x = Tensor(prng.normal(size=(2, 7, 3)))  # n = 6 encoder positions
        w = Tensor(prng.normal(size=(2, 3)))
        learn = [p for p in model.parameters() if not p.frozen]
        worst[f"plan {strategy}"] = finite_diff_check(
            lambda *_: ag.sum(ag.mul(model.head(model.features(x)), w)), learn, max_coords=8)
    elapsed = time.perf_counter() - t0
    name, err = max(worst.items(), key=lambda kv: kv[1])
    verdict("gradient correctness", err < 1e-4 and elapsed < 120,
            f"{len(worst)} checks, worst {name} rel err {err:.2e}; {elapsed:.1f}s")


# -- identity at init -------------------------------------------------------------


def test_identity_at_init():
    bb = Backbone(BackboneConfig(L=3, d=16, heads=2, d_ffn=16, conv_blocks=[(2, 1, 8)], in_channels=3))
    rng = np.random.default_rng(0)
    inputs = [Tensor(rng.normal(size=(int(rng.integers(3, 9)), 3))) for _ in range(20)]
    mismatches = 0
    for strategy in ("E", "efficient", "lora"):
        model = assemble(AdapterPlan(strategy=strategy, r=2, b=4), bb, seed=5)
        for x in inputs:
            got, want = model.encode(x), backbone_forward(bb, x)
            mismatches += sum(not np.array_equal(a.data, b.data) for a, b in zip(got.outputs, want.outputs))
    verdict("identity at init", mismatches == 0,
            f"E, efficient, LoRA on 20 inputs; {mismatches} layer outputs differ bitwise")


# -- freeze soundness ---------------------------------------------------------------


def test_freeze_soundness():
    bad = []
    plans = ["weight", "lora", "prefix", "efficient", "E", "L", "EL", "ELP"]
    for i, strategy in enumerate(plans):
        task = ("asr", "asv", "ser", "sic")[i % 4]
        cfg = ExperimentConfig(task=task, strategy=strategy, L=2, d=8, heads=2, d_ffn=8,
                               conv_blocks=((2, 2, 4),), in_channels=3, n_train=8, n_test=8, n_val=2,
                               speakers=4, utt_frames=4, steps=100, batch_size=4, head_hidden=6,
                               schedule="step", lr=1e-2, gamma=1.0, step_size=1)
        rec = experiment.run_experiment(cfg, write=False).record
        moved = rec.losses[0] != rec.losses[-1]
        if rec.frozen_checksum_before != rec.frozen_checksum_after or not moved:
            bad.append(strategy)
    verdict("freeze soundness", not bad,
            f"{len(plans)} plans x 100 steps, checksum mismatches: {bad or 'none'}")


# -- CTC ---------------------------------------------------------------------------


def collapse(path, blank):
    out, prev = [], None
    for k in path:
        if k != prev and k != blank:
            out.append(k)
        prev = k
    return tuple(out)


def test_ctc_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst, cases, infeasible = 0.0, 0, 0
    for n in range(1, 7):
        for V in range(1, 5):
            logits = rng.normal(size=(n, V + 1)) * 2
            logp = logits - logsumexp(logits, axis=1, keepdims=True)
            groups: dict[tuple, list[float]] = {}
            for path in itertools.product(range(V + 1), repeat=n):
                groups.setdefault(collapse(path, V), []).append(
                    math.fsum(logp[t, k] for t, k in enumerate(path)))
            for U in range(4):
                for target in itertools.product(range(V), repeat=U):
                    if target in groups:
                        want = -logsumexp(groups[target])
                        got = ctc_loss(Tensor(logits), list(target)).item()
                        worst = max(worst, abs(got - want))
                        cases += 1
                    else:
                        with pytest.raises(InfeasibleAlignment):
                            ctc_loss(Tensor(logits), list(target))
                        infeasible += 1
    elapsed = time.perf_counter() - t0
    verdict("CTC oracle", worst < 1e-9 and elapsed < 60,
            f"{cases} feasible instances, max |diff| {worst:.1e}; {infeasible} infeasible rejected; "
            f"{elapsed:.1f}s")


# -- metrics -------------------------------------------------------------------------


def test_metric_oracles():
    rng = np.random.default_rng(1)
    edit_bad = 0
    for _ in range(500):
        ref = tuple(rng.integers(0, 3, size=rng.integers(1, 7)).tolist())
        hyp = tuple(rng.integers(0, 3, size=rng.integers(0, 7)).tolist())
        ops = edit_ops(list(ref), list(hyp))
        counts = all_alignment_counts(ref, hyp)
        if ops.errors != min(sum(c) for c in counts) or (ops.S, ops.D, ops.I) not in counts:
            edit_bad += 1

    eer_worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 20))
        labels = rng.random(n) < 0.5
        labels[0], labels[1] = True, False
        scores = np.round(rng.normal(size=n) + labels * rng.random(), 1)
        eer_worst = max(eer_worst, abs(equal_error_rate(scores, labels) - eer_oracle(scores, labels)))

    er_bad = 0
    for _ in range(200):
        lab = np.concatenate([np.arange(4), rng.integers(0, 4, int(rng.integers(0, 30)))])
        pred = rng.integers(0, 4, lab.size)
        conf = np.zeros((4, 4), int)
        np.add.at(conf, (lab, pred), 1)
        want = float(1 - sum(Fraction(int(conf[c, c]), int(conf[c].sum())) for c in range(4)) / 4)
        er_bad += emotion_error_rate(pred, lab) != want
        items = [tuple(int(v) for v in rng.integers(0, 2, 3)) for _ in range(lab.size)]
        guesses = [tuple(int(v) for v in rng.integers(0, 2, 3)) for _ in range(lab.size)]
        right = sum(a == b for a, b in zip(items, guesses))
        er_bad += intent_error_rate(guesses, items) != float(Fraction(len(items) - right, len(items)))
    ok = edit_bad == 0 and eer_worst < 1e-12 and er_bad == 0
    verdict("metric oracles", ok,
            f"edit ops 500 pairs ({edit_bad} wrong); EER 100 sets (max diff {eer_worst:.1e}); "
            f"emotion/intent ER 400 recounts ({er_bad} mismatches)")


# -- P-adapter ------------------------------------------------------------------------


def test_p_adapter_restoration():
    d = 8
    bb = Backbone(BackboneConfig(L=2, d=d, heads=2, d_ffn=8, conv_blocks=[(1, 1, 4)], in_channels=3))
    failures = []
    for variant in sorted(P_VARIANTS):
        for n, m in itertools.product((1, 3, 7), (0, 2, 5)):
            rng = np.random.default_rng(n * 10 + m)
            p = PAdapter(d, m, variant, rng=rng)
            x0 = Tensor(rng.normal(size=(n, d)))
            restored = np.array_equal(p.inverse(p.apply(x0)).data, x0.data)
            model = assemble(AdapterPlan(strategy="ELP", p_variant=variant, m=m, b=4, d_L=6), bb, seed=1)
            feats = model.features(Tensor(rng.normal(size=(n, 3))))
            if not restored or feats.shape[0] != n:
                failures.append((variant, n, m))
    verdict("P-adapter length restoration", not failures,
            f"4 variants x n in (1,3,7) x m in (0,2,5); failures: {failures or 'none'}")


# -- schedules -------------------------------------------------------------------------


def test_schedule_exactness():
    warm = LrSchedule("warmup", eta_0=1e-7, eta_max=1e-4, n_warm=5000, n_total=34600)
    step = LrSchedule("step", eta_0=1e-3, gamma=0.1, s=10)
    e0, em = Fraction(1e-7), Fraction(1e-4)

    def exact_warm(t):
        if t <= 5000:
            return e0 + Fraction(t, 5000) * (em - e0)
        return e0 + Fraction(34600 - t, 29600) * (em - e0)

    def ulps(x, exact):
        return float(abs(Fraction(x) - exact) / Fraction(math.ulp(x)))

    rng = np.random.default_rng(0)
    worst = 0.0
    for t in rng.integers(0, 34601, size=1000):
        worst = max(worst, ulps(lr_at(warm, int(t)), exact_warm(int(t))))
    for t in rng.integers(0, 200, size=1000):
        exact = Fraction(1e-3) * Fraction(0.1) ** (int(t) // 10)  # the doubles actually passed in
        worst = max(worst, ulps(lr_at(step, int(t)), exact))

    mid = lr_at(warm, 2500)
    examples = [
        ulps(mid, (e0 + em) / 2) <= 1,  # linear midpoint
        lr_at(warm, 34600) == 1e-7,
        lr_at(step, 25) == 1e-5,
    ]
    literal_gap = abs(mid - 5.00495e-5)
    verdict("schedule exactness", worst <= 1 and all(examples),
            f"2000 sampled steps, worst {worst:.2f} ulp; midpoint t=2500 -> {mid!r} "
            f"(the listed 5.00495e-5 is {literal_gap:.1e} away and is not the midpoint); "
            f"endpoint -> {lr_at(warm, 34600)!r}; step t=25 -> {lr_at(step, 25)!r}")


# -- toy learning and layer weights ---------------------------------------------------------

SEEDS = range(5)
TOY = dict(L=6, d=32, heads=4, d_ffn=64, conv_blocks=((3, 2, 16), (3, 2, 16)), in_channels=16,
           n_train=512, n_test=128, pretrain_steps=500, steps=2000, lr=1e-3)


@pytest.fixture(scope="module")
def toy_runs():
    t0 = time.perf_counter()
    runs = {}
    for seed in SEEDS:
        for task in ("asr", "asv"):
            base = ExperimentConfig(task=task, seed=seed, data_seed=seed, backbone_seed=seed, **TOY)
            dataset = experiment.build_dataset(base)
            backbone = experiment.build_backbone(base, dataset)  # pretrained once, shared by both plans
            for strategy in ("weight", "ELP"):
                r = experiment.run_experiment(base.with_overrides(strategy=strategy), backbone=backbone,
                                              write=False)
                runs[seed, task, strategy] = (r.record, experiment.export_layer_weights(r.model))
    return runs, time.perf_counter() - t0


def test_toy_task_learning(toy_runs):
    runs, elapsed = toy_runs
    lines, asr_ok, asv_ok, beat_ok = [], 0, 0, 0
    for seed in SEEDS:
        m = {(t, s): runs[seed, t, s][0] for t in ("asr", "asv") for s in ("weight", "ELP")}
        wer = {s: m["asr", s].final_metrics["wer"] for s in ("weight", "ELP")}
        eer = {s: m["asv", s].final_metrics["eer"] for s in ("weight", "ELP")}
        asr_ok += wer["ELP"] <= wer["weight"]
        asv_ok += eer["ELP"] <= eer["weight"]
        metric = {"asr": "wer", "asv": "eer"}
        beat = all(r.final_metrics[metric[t]] < r.initial_metrics[metric[t]] for (t, _), r in m.items())
        beat_ok += beat
        lines.append(f"seed {seed}: WER weight {wer['weight']:.3f} ELP {wer['ELP']:.3f}; "
                     f"EER weight {eer['weight']:.4f} ELP {eer['ELP']:.4f}; beats untrained {beat}")
    for line in lines:
        print(line)
    ok = asr_ok >= 4 and asv_ok >= 4 and beat_ok >= 4 and elapsed < 20 * 60
    verdict("toy-task learning", ok,
            f"ELP<=weight WER {asr_ok}/5, EER {asv_ok}/5; every plan beats untrained {beat_ok}/5; "
            f"{elapsed / 60:.1f} min")


def test_layer_weight_sanity(toy_runs):
    runs, _ = toy_runs
    masses = [runs[seed, "asv", "ELP"][1].lower_upper_mass() for seed in SEEDS]
    wins = sum(lo > up for lo, up in masses)
    detail = ", ".join(f"{lo:.2f}/{up:.2f}" for lo, up in masses)
    verdict("layer-weight sanity", wins >= 4,
            f"ELP L-adapter lower/upper |w| mass on the speaker task: {detail} ({wins}/5 lower-heavy)")


# -- smoke matrix ------------------------------------------------------------------------------


def test_smoke_matrix(tmp_path):
    t0 = time.perf_counter()
    failures = []
    combos = list(itertools.product(("asr", "asv", "ser", "sic"),
                                    ("weight", "lora", "prefix", "efficient", "E", "L", "EL", "ELP", "full")))
    for task, strategy in combos:
        out = tmp_path / f"{task}-{strategy}"
        cfg = ExperimentConfig(task=task, strategy=strategy, L=2, d=8, heads=2, d_ffn=8,
                               conv_blocks=((2, 2, 4),), in_channels=3, n_train=8, n_test=8, n_val=4,
                               speakers=4, utt_frames=4, steps=10, batch_size=4, head_hidden=6,
                               output_dir=str(out))
        try:
            result = experiment.run_experiment(cfg)
            assert len(result.record.history) == 10
            check_artifacts(out, cfg, result)
        except Exception as exc:  # report every failing pair, not just the first
            failures.append(f"{task}/{strategy}: {type(exc).__name__}: {exc}")
    verdict("smoke matrix", not failures,
            f"{len(combos) - len(failures)}/{len(combos)} runs complete with re-readable artifacts; "
            f"{time.perf_counter() - t0:.1f}s" + ("" if not failures else "; " + " | ".join(failures)))
