"""Optimisation loop, freeze policy, learning-rate schedules and parameter accounting."""

from __future__ import annotations

import hashlib
import json
import math
from fractions import Fraction
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autograd as ag
from .adapters import LADAPTER_VARIANTS, AdapterPlan, TunableModel
from .autograd import Tensor
from .backbone import Backbone, cnn_encode, encoder_layer_forward
from .nn import Linear, Module, Parameter

LR_GRID = (1e-3, 5e-4, 1e-4, 5e-5, 1e-5)


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# schedules


@dataclass(frozen=True)
class LrSchedule:
    """``warmup``: linear ramp eta_0 -> eta_max over ``n_warm`` steps, then linear decay
    back to eta_0 at ``n_total``.  ``step``: ``eta_0 * gamma ** (t // s)``."""

    kind: str = "warmup"
    eta_0: float = 1e-7
    eta_max: float = 1e-4
    n_warm: int = 5000
    n_total: int = 34600
    gamma: float = 0.1
    s: int = 10

    def __post_init__(self):
        if self.kind not in ("warmup", "step"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "warmup" and not (0 < self.n_warm <= self.n_total):
            raise ValueError("warmup schedule needs 0 < n_warm <= n_total")
        if self.kind == "step" and self.s < 1:
            raise ValueError("step schedule needs s >= 1")


def warmup(eta_max: float, n_total: int, n_warm: int | None = None, eta_0: float = 1e-7) -> LrSchedule:
    if n_warm is None:
        n_warm = max(1, min(5000, n_total // 4))
    return LrSchedule("warmup", eta_0=eta_0, eta_max=eta_max, n_warm=n_warm, n_total=n_total)


def step_schedule(eta_0: float, gamma: float = 0.1, s: int = 10) -> LrSchedule:
    return LrSchedule("step", eta_0=eta_0, gamma=gamma, s=s)


def lr_at(schedule: LrSchedule, t: int) -> float:
    """Closed-form rate at step ``t``.

    The formula is evaluated exactly on the (binary) parameter values and
    rounded once, so the result is within half an ulp and both warmup
    endpoints are hit exactly.
    """
    if t < 0:
        raise ValueError(f"step {t} is negative")
    e0 = Fraction(schedule.eta_0)
    if schedule.kind == "step":
        return float(e0 * Fraction(schedule.gamma) ** (t // schedule.s))
    if t > schedule.n_total:
        raise ValueError(f"step {t} is beyond n_total={schedule.n_total}")
    em = Fraction(schedule.eta_max)
    if t <= schedule.n_warm:
        return float(e0 + Fraction(t, schedule.n_warm) * (em - e0))
    return float(e0 + Fraction(schedule.n_total - t, schedule.n_total - schedule.n_warm) * (em - e0))


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params, lr: float) -> None:
    """One bias-corrected Adam update of every non-frozen parameter."""
    live = [p for p in params if not p.frozen and p.size > 0]
    missing = [p.name or repr(p) for p in live if p.grad is None]
    if missing:
        raise ValueError(f"no gradient for learnable parameters: {missing[:5]}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p in live:
        key = id(p)
        if key not in state.m:
            state.m[key] = np.zeros(p.shape)
            state.v[key] = np.zeros(p.shape)
        m, v = state.m[key], state.v[key]
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# freeze policy and accounting


def apply_freeze_policy(model: TunableModel, plan: AdapterPlan | None = None) -> None:
    """Learnable = adapters + encoder LayerNorms + head; ``full`` makes everything learnable.

    L-adapter configurations A-C keep the backbone LayerNorms frozen.
    """
    plan = plan or model.plan
    if plan.strategy == "full":
        model.freeze(False)
        return
    model.backbone.freeze(True)
    unfreeze_norm = not (plan.uses_l and not LADAPTER_VARIANTS[plan.l_config]["backbone_norm"])
    for p in model.backbone.layer_norm_parameters():
        p.frozen = not unfreeze_norm
    for p in model.adapter_parameters():
        p.frozen = False
    if model.head is not None:
        model.head.freeze(False)


@dataclass
class ParamBudgetReport:
    N: int  # backbone size (stored once)
    N_frozen: int
    M: int  # task-specific non-head parameters (adapters + any unfrozen backbone params)
    M_adapters: int  # adapter modules only
    backbone_learnable: int
    H: int
    K: int = 1
    items: dict[str, int] = field(default_factory=dict)

    @property
    def storage_adapter(self) -> int:
        return self.N + self.K * (self.M + self.H)

    @property
    def storage_full_ft(self) -> int:
        return self.K * (self.N + self.H)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["storage_adapter"] = self.storage_adapter
        out["storage_full_ft"] = self.storage_full_ft
        return out


def _group(name: str) -> str:
    parts = name.split(".")
    if parts[0] == "backbone":
        if parts[1] == "layers" and parts[-2].startswith("norm"):
            return "backbone.layer_norms"
        return f"backbone.{parts[1]}"
    return ".".join(parts[:2]) if parts[0] in ("head",) else parts[0]


def count_parameters(model: TunableModel, K: int = 1) -> ParamBudgetReport:
    N = N_frozen = M = M_ad = bb_learn = H = 0
    items: dict[str, int] = {}
    for name, p in model.named_parameters():
        size = p.size
        items[_group(name)] = items.get(_group(name), 0) + size
        if name.startswith("backbone."):
            N += size
            if p.frozen:
                N_frozen += size
            else:
                bb_learn += size
                M += size
        elif name.startswith("head."):
            H += size
        else:
            M_ad += size
            M += size
    return ParamBudgetReport(N=N, N_frozen=N_frozen, M=M, M_adapters=M_ad,
                             backbone_learnable=bb_learn, H=H, K=K, items=items)


def storage_cost(report: ParamBudgetReport, K: int) -> tuple[int, int]:
    """``(N + K(M+H), K(N+H))``: adapter storage vs one full copy per task."""
    if K < 1:
        raise ValueError("K must be >= 1")
    return report.N + K * (report.M + report.H), K * (report.N + report.H)


def frozen_checksum(model: Module, frozen_only: bool = True) -> str:
    """SHA-256 over parameter names and little-endian float64 bytes."""
    h = hashlib.sha256()
    for name, p in model.named_parameters():
        if p.frozen or not frozen_only:
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# training loop


@dataclass
class RunRecord:
    seed: int
    steps: int
    history: list[dict] = field(default_factory=list)  # {"step", "lr", "loss"}
    initial_metrics: dict = field(default_factory=dict)
    final_metrics: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    frozen_checksum_before: str = ""
    frozen_checksum_after: str = ""

    @property
    def losses(self) -> list[float]:
        return [h["loss"] for h in self.history]

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("history")
        return d

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / "history.jsonl", "w") as fh:
            for h in self.history:
                fh.write(json.dumps(h) + "\n")
        (directory / "summary.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory: str | Path) -> "RunRecord":
        directory = Path(directory)
        summary = json.loads((directory / "summary.json").read_text())
        history = [json.loads(line) for line in (directory / "history.jsonl").read_text().splitlines()
                   if line.strip()]
        return cls(history=history, **summary)


class BatchSampler:
    """Seeded epoch-wise shuffling; the batch order is a pure function of the seed."""

    def __init__(self, n: int, batch_size: int, seed: int):
        if n < 1:
            raise ValueError("cannot sample from an empty training set")
        self.n = n
        self.batch_size = min(batch_size, n)
        self._rng = np.random.default_rng(seed)
        self._perm = np.empty(0, dtype=int)

    def next(self) -> np.ndarray:
        if self._perm.size < self.batch_size:
            self._perm = np.concatenate([self._perm, self._rng.permutation(self.n)])
        idx, self._perm = self._perm[:self.batch_size], self._perm[self.batch_size:]
        return np.sort(idx)


LossFn = Callable[[TunableModel, np.ndarray], Tensor]
EvalFn = Callable[[TunableModel], dict]


def train_loop(
    model: TunableModel,
    n_train: int,
    loss_fn: LossFn,
    schedule: LrSchedule,
    steps: int,
    seed: int,
    eval_fn: EvalFn | None = None,
    batch_size: int = 8,
    clip: float | None = None,
) -> RunRecord:
    """Adam over the learnable parameters of ``model`` for ``steps`` minibatches.

    ``loss_fn(model, indices)`` returns a scalar loss on the given training
    items.  Metrics from ``eval_fn`` are recorded before and after training.
    """
    params = [p for p in model.parameters() if not p.frozen]
    record = RunRecord(seed=seed, steps=steps)
    record.params = count_parameters(model).to_dict()
    record.frozen_checksum_before = frozen_checksum(model)
    if eval_fn is not None:
        record.initial_metrics = eval_fn(model)
    sampler = BatchSampler(n_train, batch_size, seed)
    state = AdamState()
    for t in range(steps):
        idx = sampler.next()
        model.zero_grad()
        loss = loss_fn(model, idx)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(f"non-finite loss {value} at step {t}")
        ag.backward(loss)
        if clip is not None:
            _clip(params, clip)
        lr = lr_at(schedule, t)
        adam_step(state, params, lr)
        record.history.append({"step": t, "lr": lr, "loss": value})
    model.zero_grad()
    record.frozen_checksum_after = frozen_checksum(model)
    if eval_fn is not None:
        record.final_metrics = eval_fn(model) if steps else dict(record.initial_metrics)
    return record


def _clip(params, max_norm: float) -> None:
    total = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params if p.grad is not None))
    if total > max_norm:
        for p in params:
            if p.grad is not None:
                p.grad *= max_norm / total


# ---------------------------------------------------------------------------
# toy masked-reconstruction pretraining


def _window_targets(cfg, feats: np.ndarray, n: int) -> np.ndarray:
    """Mean of the input rows inside each encoder position's receptive field."""
    rf = cfg.min_input_length()
    stride = cfg.total_stride
    out = np.empty(feats.shape[:-2] + (n, feats.shape[-1]))
    for i in range(n):
        out[..., i, :] = feats[..., i * stride:i * stride + rf, :].mean(axis=-2)
    return out


class Reconstructor(Module):
    def __init__(self, d: int, c: int, rng):
        self.out = Linear(d, c, rng)


def masked_reconstruction_loss(backbone: Backbone, predictor: Reconstructor, feats: np.ndarray,
                               mask_ratio: float, rng: np.random.Generator) -> Tensor:
    x0 = cnn_encode(backbone, Tensor(feats))
    B, n = x0.shape[0], x0.shape[1]
    k = int(round(mask_ratio * n))
    keep = np.ones((B, n, 1))
    for b in range(B):
        if k:
            keep[b, rng.choice(n, size=k, replace=False)] = 0.0
    masked = 1.0 - keep[..., 0]
    if masked.sum() == 0:
        return Tensor(0.0)
    x = ag.mul(x0, Tensor(np.broadcast_to(keep, x0.shape)))
    for layer in backbone.layers:
        x = encoder_layer_forward(layer, x)
    pred = predictor.out(x)
    target = _window_targets(backbone.cfg, feats, n)
    weight = np.broadcast_to(masked[..., None], pred.shape) / (masked.sum() * pred.shape[-1])
    diff = ag.sub(pred, Tensor(target))
    return ag.sum(ag.mul(ag.mul(diff, diff), Tensor(weight)))


def toy_pretrain(backbone: Backbone, data: np.ndarray, steps: int, mask_ratio: float = 0.3,
                 lr: float = 1e-3, batch_size: int = 8, seed: int = 0) -> list[float]:
    """Train every backbone parameter to reconstruct masked frontend positions.

    ``data`` is a ``N x T x c`` stack of unlabeled utterances.  Returns the
    per-step loss.
    """
    if not 0.0 <= mask_ratio < 1.0:
        raise ValueError("mask_ratio must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    predictor = Reconstructor(backbone.cfg.d, backbone.cfg.in_channels, rng)
    backbone.freeze(False)
    params = backbone.parameters() + predictor.parameters()
    sampler = BatchSampler(len(data), batch_size, seed)
    state = AdamState()
    losses = []
    for t in range(steps):
        idx = sampler.next()
        for p in params:
            p.grad = None
        loss = masked_reconstruction_loss(backbone, predictor, data[idx], mask_ratio, rng)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(f"non-finite pretraining loss at step {t}")
        losses.append(value)
        if loss.requires_grad:
            ag.backward(loss)
            adam_step(state, params, lr)
    for p in params:
        p.grad = None
    backbone.freeze(True)
    return losses
