"""Fine-tuning strategies over a frozen backbone.

Baselines: full fine-tuning, layer-weight tuning, LoRA on the attention
projections, key/value prefix tuning and two-adapter ("efficient") tuning.
Proposed: E-adapters on each FFN sub-block, L-adapter paths from every
encoder output to the head, and a P-adapter that appends pseudo rows to the
frontend output.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .backbone import Backbone, LayerOutputs, cnn_encode, encoder_layer_forward, attention_core
from .nn import LayerNorm, Linear, Module, Parameter, activation, uniform_init

STRATEGIES = ("full", "weight", "lora", "prefix", "efficient", "E", "L", "EL", "ELP")
LAYER_WEIGHT_STRATEGIES = ("weight", "L", "EL", "ELP")
TASK_ACTIVATION = {"asr": "gelu", "sic": "gelu", "asv": "relu", "ser": "relu"}

# L-adapter configurations A-I; layer weights are always present.
LADAPTER_VARIANTS: dict[str, dict[str, bool]] = {
    "A": dict(backbone_norm=False, fc=False, act=False, norm=False, skip=False),
    "B": dict(backbone_norm=False, fc=False, act=False, norm=True, skip=False),
    "C": dict(backbone_norm=False, fc=False, act=True, norm=True, skip=False),
    "D": dict(backbone_norm=True, fc=False, act=False, norm=False, skip=False),
    "E": dict(backbone_norm=True, fc=True, act=False, norm=False, skip=False),
    "F": dict(backbone_norm=True, fc=True, act=True, norm=False, skip=False),
    "G": dict(backbone_norm=True, fc=True, act=False, norm=True, skip=False),
    "H": dict(backbone_norm=True, fc=True, act=True, norm=True, skip=False),
    "I": dict(backbone_norm=True, fc=True, act=True, norm=True, skip=True),
}

P_VARIANTS = {"A": "prefix", "B": "nl-prefix", "C": "suffix", "D": "nl-suffix"}


class PlanError(ValueError):
    pass


# ---------------------------------------------------------------------------
# building blocks


class WeightSum(Module):
    """Learnable per-layer mixing weights, initialised to ``1/L``."""

    def __init__(self, L: int):
        self.w = Parameter(np.full(L, 1.0 / L))

    def __call__(self, outputs) -> Tensor:
        return weight_sum(outputs, self)


def weight_sum(outputs: LayerOutputs | Sequence[Tensor], w) -> Tensor:
    """``sum_{l=1..L} w_l X_l``; ``X_0`` never participates."""
    xs = list(outputs.encoder) if isinstance(outputs, LayerOutputs) else list(outputs)
    weights = w.w if isinstance(w, WeightSum) else w
    if weights.shape != (len(xs),):
        raise PlanError(f"{weights.shape[0]} layer weights for {len(xs)} layer outputs")
    return ag.weighted_sum(xs, weights)


class LoraLinear(Module):
    """Low-rank update ``A B`` riding on a frozen projection ``W`` (not owned)."""

    def __init__(self, w: Parameter, r: int, rng=None, strict: bool = True):
        d, d_out = w.shape
        if r < 1 or (strict and r >= min(d, d_out)):
            raise PlanError(f"LoRA rank {r} must satisfy 1 <= r < min({d}, {d_out})")
        self._w = w
        self.A = Parameter(uniform_init(rng, (d, r), d))
        self.B = Parameter(np.zeros((r, d_out)))

    @property
    def W(self) -> Parameter:
        return self._w

    @property
    def r(self) -> int:
        return self.A.shape[1]


class LoraAttention(Module):
    def __init__(self, layer, r: int, rng=None):
        self.q = LoraLinear(layer.w_q, r, rng)
        self.k = LoraLinear(layer.w_k, r, rng)
        self.v = LoraLinear(layer.w_v, r, rng)


def lora_attention(x: Tensor, lora_q: LoraLinear, lora_k: LoraLinear, lora_v: LoraLinear,
                   heads: int = 1) -> Tensor:
    """``softmax(Q K^T / sqrt(d_head)) V`` with every projection ``X (W + A B)``."""
    from .backbone import project

    q = project(x, lora_q.W, lora_q)
    k = project(x, lora_k.W, lora_k)
    v = project(x, lora_v.W, lora_v)
    return attention_core(q, k, v, heads)


class PrefixAttention(Module):
    def __init__(self, d: int, m: int, rng=None):
        if m < 0:
            raise PlanError("prefix length must be >= 0")
        self.p_k = Parameter(uniform_init(rng, (m, d), d))
        self.p_v = Parameter(uniform_init(rng, (m, d), d))

    @property
    def m(self) -> int:
        return self.p_k.shape[0]


def prefix_attention(x: Tensor, pa: PrefixAttention, w_q: Tensor, w_k: Tensor, w_v: Tensor,
                     heads: int = 1) -> Tensor:
    """Attention whose keys/values are ``[P; X W]`` while queries stay ``X W_q``."""
    q = ag.matmul(x, w_q)
    k = ag.matmul(x, w_k)
    v = ag.matmul(x, w_v)
    if pa.m > 0:
        pk, pv = pa.p_k, pa.p_v
        if x.ndim == 3:
            pk, pv = ag.tile_batch(pk, x.shape[0]), ag.tile_batch(pv, x.shape[0])
        k = ag.concat_rows(pk, k)
        v = ag.concat_rows(pv, v)
    return attention_core(q, k, v, heads)


class BottleneckAdapter(Module):
    """``LN(fc2(act(fc1(X)))) + X``; ``fc2`` starts at zero so the adapter starts as identity."""

    def __init__(self, d: int, b: int, act: str = "gelu", rng=None):
        self.fc1 = Linear(d, b, rng)
        self.fc2 = Linear(b, d, zero=True)
        self.norm = LayerNorm(d)
        self._act = activation(act)

    def __call__(self, x: Tensor) -> Tensor:
        return ag.add(self.norm(self.fc2(self._act(self.fc1(x)))), x)


EAdapter = BottleneckAdapter


class EfficientAdapterPair(Module):
    def __init__(self, d: int, b: int, rng=None):
        self.g1 = BottleneckAdapter(d, b, "gelu", rng)
        self.g2 = BottleneckAdapter(d, b, "gelu", rng)


def efficient_adapter_forward(layer, adapters: EfficientAdapterPair, x: Tensor) -> Tensor:
    return encoder_layer_forward(layer, x, g_mhsa=adapters.g1, g_ffn=adapters.g2)


def encoder_forward_with_e_adapter(layer, e: BottleneckAdapter, x: Tensor) -> Tensor:
    return encoder_layer_forward(layer, x, g_ffn=e)


class LAdapterPath(Module):
    def __init__(self, d: int, d_L: int, flags: dict[str, bool], act: str, rng=None):
        width = d_L if flags["fc"] else d
        self.fc = Linear(d, d_L, rng) if flags["fc"] else None
        self.norm = LayerNorm(width) if flags["norm"] else None
        self._act = activation(act) if flags["act"] else None
        self._skip = flags["skip"]

    def __call__(self, x: Tensor) -> Tensor:
        h = self.fc(x) if self.fc is not None else x
        base = h
        if self._act is not None:
            h = self._act(h)
        if self.norm is not None:
            h = self.norm(h)
        if self._skip:
            h = ag.add(h, base)
        return h


class LAdapterStack(Module):
    """One path per encoder layer plus the learnable layer weights."""

    def __init__(self, L: int, d: int, d_L: int, act: str = "relu", config: str = "H", rng=None):
        if config not in LADAPTER_VARIANTS:
            raise PlanError(f"unknown L-adapter configuration {config!r}")
        self.config = config
        flags = LADAPTER_VARIANTS[config]
        self.paths = [LAdapterPath(d, d_L, flags, act, rng) for _ in range(L)]
        self.weights = WeightSum(L)
        self._width = d_L if flags["fc"] else d

    @property
    def width(self) -> int:
        return self._width

    @property
    def unfreezes_backbone_norm(self) -> bool:
        return LADAPTER_VARIANTS[self.config]["backbone_norm"]

    def adapted(self, layer_outputs: Sequence[Tensor]) -> list[Tensor]:
        if len(layer_outputs) != len(self.paths):
            raise PlanError(f"{len(self.paths)} L-adapter paths for {len(layer_outputs)} layers")
        return [path(x) for path, x in zip(self.paths, layer_outputs)]

    def __call__(self, layer_outputs: Sequence[Tensor]) -> Tensor:
        return ag.weighted_sum(self.adapted(layer_outputs), self.weights.w)


def l_adapter_apply(stack: LAdapterStack, outputs: LayerOutputs | Sequence[Tensor]) -> Tensor:
    xs = list(outputs.encoder) if isinstance(outputs, LayerOutputs) else list(outputs)
    return stack(xs)


def build_ladapter_variant(config: str, L: int, d: int, d_L: int, act: str = "relu",
                           rng=None) -> LAdapterStack:
    return LAdapterStack(L, d, d_L, act=act, config=config, rng=rng)


class PAdapter(Module):
    """Pseudo rows ``P`` (optionally passed through a two-layer MLP) joined to ``X_0``."""

    def __init__(self, d: int, m: int, variant: str = "suffix", act: str = "gelu", rng=None):
        variant = P_VARIANTS.get(variant, variant)
        if variant not in P_VARIANTS.values():
            raise PlanError(f"unknown P-adapter variant {variant!r}")
        if m < 0:
            raise PlanError("P-adapter length must be >= 0")
        self.variant = variant
        self.P = Parameter(uniform_init(rng, (m, d), d))
        nonlinear = variant.startswith("nl-")
        self.mlp = [Linear(d, d, rng), Linear(d, d, rng)] if nonlinear else []
        self._act = activation(act)

    @property
    def m(self) -> int:
        return self.P.shape[0]

    @property
    def prepends(self) -> bool:
        return self.variant.endswith("prefix")

    def rows(self) -> Tensor:
        if not self.mlp or self.m == 0:
            return self.P
        return self.mlp[1](self._act(self.mlp[0](self.P)))

    def apply(self, x0: Tensor) -> Tensor:
        if self.m == 0:
            return x0
        rows = self.rows()
        if x0.ndim == 3:
            rows = ag.tile_batch(rows, x0.shape[0])
        return ag.concat_rows(rows, x0) if self.prepends else ag.concat_rows(x0, rows)

    def inverse(self, q: Tensor) -> Tensor:
        n_total = q.shape[-2]
        if self.m == 0:
            return q
        if n_total <= self.m:
            raise PlanError(f"cannot drop {self.m} pseudo rows from a {n_total}-row sequence")
        if self.prepends:
            return ag.slice_rows(q, self.m, n_total)
        return ag.slice_rows(q, 0, n_total - self.m)


def p_adapter_apply(p: PAdapter, x0: Tensor) -> Tensor:
    return p.apply(x0)


def p_adapter_inverse(p: PAdapter, q: Tensor) -> Tensor:
    return p.inverse(q)


# ---------------------------------------------------------------------------
# plans and assembly


@dataclass
class AdapterPlan:
    strategy: str = "ELP"
    task: str = "asr"
    activation: str | None = None  # None -> task default (GELU for asr/sic, ReLU for asv/ser)
    l_config: str = "H"
    p_variant: str = "C"
    r: int | None = None  # None -> scaled from d below
    m: int = 5
    b: int | None = None
    d_L: int | None = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise PlanError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.task not in TASK_ACTIVATION:
            raise PlanError(f"unknown task {self.task!r}")
        if self.l_config not in LADAPTER_VARIANTS:
            raise PlanError(f"unknown L-adapter configuration {self.l_config!r}")
        if self.p_variant not in P_VARIANTS and self.p_variant not in P_VARIANTS.values():
            raise PlanError(f"unknown P-adapter variant {self.p_variant!r}")
        if self.m < 0:
            raise PlanError("m must be >= 0")

    @property
    def act(self) -> str:
        return self.activation or TASK_ACTIVATION[self.task]

    @property
    def uses_layer_weights(self) -> bool:
        return self.strategy in LAYER_WEIGHT_STRATEGIES

    @property
    def uses_e(self) -> bool:
        return self.strategy in ("E", "EL", "ELP")

    @property
    def uses_l(self) -> bool:
        return self.strategy in ("L", "EL", "ELP")

    @property
    def uses_p(self) -> bool:
        return self.strategy == "ELP"

    def resolved(self, d: int) -> "AdapterPlan":
        """Fill unset sizes: ``b = d/3``, ``d_L = 2d/3``, ``r = d/6`` (256/512/128 at d=768)."""
        return replace(
            self,
            b=self.b if self.b is not None else max(1, round(d / 3)),
            d_L=self.d_L if self.d_L is not None else max(1, round(2 * d / 3)),
            r=self.r if self.r is not None else max(1, round(d / 6)),
        )

    def feature_width(self, d: int) -> int:
        plan = self.resolved(d)
        if plan.uses_l and LADAPTER_VARIANTS[plan.l_config]["fc"]:
            return plan.d_L
        return d


class TunableModel(Module):
    """Backbone + the adapters of one plan + an optional task head."""

    def __init__(self, backbone: Backbone, plan: AdapterPlan, head: Module | None = None,
                 rng=None):
        cfg = backbone.cfg
        plan = plan.resolved(cfg.d)
        self.backbone = backbone
        self.plan = plan
        self.weights = WeightSum(cfg.L) if plan.strategy == "weight" else None
        self.lora = ([LoraAttention(layer, plan.r, rng) for layer in backbone.layers]
                     if plan.strategy == "lora" else [])
        self.prefix = ([PrefixAttention(cfg.d, plan.m, rng) for _ in backbone.layers]
                       if plan.strategy == "prefix" else [])
        self.efficient = ([EfficientAdapterPair(cfg.d, plan.b, rng) for _ in backbone.layers]
                          if plan.strategy == "efficient" else [])
        self.e_adapters = ([BottleneckAdapter(cfg.d, plan.b, plan.act, rng) for _ in backbone.layers]
                           if plan.uses_e else [])
        self.l_adapter = (LAdapterStack(cfg.L, cfg.d, plan.d_L, plan.act, plan.l_config, rng)
                          if plan.uses_l else None)
        self.p_adapter = (PAdapter(cfg.d, plan.m, plan.p_variant, plan.act, rng)
                          if plan.uses_p else None)
        self.head = head
        self.rename_parameters()

    @property
    def feature_width(self) -> int:
        return self.plan.feature_width(self.backbone.cfg.d)

    def adapter_parameters(self) -> list[Parameter]:
        out = []
        for name, p in self.named_parameters():
            if not (name.startswith("backbone.") or name.startswith("head.")):
                out.append(p)
        return out

    def layer_weights(self) -> Parameter | None:
        if self.weights is not None:
            return self.weights.w
        if self.l_adapter is not None:
            return self.l_adapter.weights.w
        return None

    def encode(self, feats: Tensor) -> LayerOutputs:
        """Adapted per-layer outputs, each restored to the frontend length."""
        bb = self.backbone
        x = cnn_encode(bb, feats)
        if self.p_adapter is not None:
            x = self.p_adapter.apply(x)
        outs = [x]
        for l, layer in enumerate(bb.layers):
            x = encoder_layer_forward(
                layer, x,
                lora=self.lora[l] if self.lora else None,
                prefix=self.prefix[l] if self.prefix else None,
                g_mhsa=self.efficient[l].g1 if self.efficient else None,
                g_ffn=(self.efficient[l].g2 if self.efficient
                       else self.e_adapters[l] if self.e_adapters else None),
            )
            outs.append(x)
        if self.p_adapter is not None:
            outs = [self.p_adapter.inverse(o) for o in outs]
        return LayerOutputs(outs)

    def features(self, feats: Tensor) -> Tensor:
        """The tensor the downstream head consumes."""
        outs = self.encode(feats)
        if self.weights is not None:
            return weight_sum(outs, self.weights)
        if self.l_adapter is not None:
            return self.l_adapter(outs.encoder)
        return outs[-1]


def assemble(plan: AdapterPlan, backbone: Backbone, head: Module | None = None,
             seed: int | None = 0, freeze: bool = True) -> TunableModel:
    """Attach the plan's adapters (and head) to ``backbone`` and apply its freeze policy.

    ``seed=None`` builds shape-only adapters (used for full-scale counting).
    """
    if head is not None:
        width = plan.feature_width(backbone.cfg.d)
        d_in = getattr(head, "d_in", width)
        if d_in != width:
            raise PlanError(f"head expects width {d_in} but plan {plan.strategy} produces {width}")
    rng = None if seed is None else np.random.default_rng(seed)
    model = TunableModel(backbone, plan, head, rng)
    if freeze:
        from .training import apply_freeze_policy

        apply_freeze_policy(model, model.plan)
    return model
