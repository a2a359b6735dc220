"""CNN frontend followed by a stack of post-LN transformer encoder layers."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .nn import LayerNorm, Linear, Module, Parameter, uniform_init


@dataclass
class BackboneConfig:
    L: int = 12
    d: int = 64
    heads: int = 4
    d_ffn: int = 128
    conv_blocks: list[tuple[int, int, int]] = field(default_factory=lambda: [(3, 2, 32), (3, 2, 32)])
    in_channels: int = 16
    pos_conv_kernel: int = 0  # 0 disables the convolutional position block
    pos_conv_groups: int = 1
    seed: int = 0

    def __post_init__(self):
        self.conv_blocks = [tuple(int(v) for v in b) for b in self.conv_blocks]
        if self.L < 1:
            raise ValueError("backbone needs at least one encoder layer")
        for name in ("d", "heads", "d_ffn", "in_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        for k, s, c in self.conv_blocks:
            if k < 1 or s < 1 or c < 1:
                raise ValueError(f"invalid conv block {(k, s, c)}")
        if self.pos_conv_kernel and self.d % self.pos_conv_groups:
            raise ValueError("pos_conv_groups must divide d")

    @property
    def total_stride(self) -> int:
        return int(np.prod([s for _, s, _ in self.conv_blocks])) if self.conv_blocks else 1

    def frames_out(self, t: int) -> int:
        """Encoder length for ``t`` input rows (valid convolutions); < 1 means too short."""
        for k, s, _ in self.conv_blocks:
            if t < k:
                return 0
            t = (t - k) // s + 1
        return t

    def min_input_length(self) -> int:
        t = 1
        for k, s, _ in reversed(self.conv_blocks):
            t = (t - 1) * s + k
        return t


def desk_config(**overrides) -> BackboneConfig:
    return BackboneConfig(**overrides)


def full_scale_config(**overrides) -> BackboneConfig:
    """Base-size geometry: 12 x 768 encoders over a seven-block 512-channel waveform CNN."""
    params = dict(
        L=12, d=768, heads=12, d_ffn=3072,
        conv_blocks=[(10, 5, 512)] + [(3, 2, 512)] * 4 + [(2, 2, 512)] * 2,
        in_channels=1, pos_conv_kernel=128, pos_conv_groups=16,
    )
    params.update(overrides)
    return BackboneConfig(**params)


class ConvBlock(Module):
    def __init__(self, k: int, stride: int, c_in: int, c_out: int, rng):
        self.kernel = Parameter(uniform_init(rng, (k, c_in, c_out), k * c_in))
        self.norm = LayerNorm(c_out)
        self._stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return ag.gelu(self.norm(ag.conv1d_temporal(x, self.kernel, self._stride)))


class PositionalConv(Module):
    """Grouped same-length convolution added back onto its input, ``x + gelu(conv(x))``."""

    def __init__(self, d: int, k: int, groups: int, rng):
        self.kernel = Parameter(uniform_init(rng, (k, d // groups, d), k * d // groups))
        self.bias = Parameter(np.zeros(d))
        self._groups = groups

    def __call__(self, x: Tensor) -> Tensor:
        k = self.kernel.shape[0]
        n = x.shape[-2]
        y = ag.conv1d_temporal(x, self.kernel, 1, padding=k // 2, groups=self._groups)
        if y.shape[-2] != n:
            y = ag.slice_rows(y, 0, n)
        return ag.add(x, ag.gelu(ag.add_bias(y, self.bias)))


class EncoderLayer(Module):
    def __init__(self, d: int, heads: int, d_ffn: int, rng):
        self.w_q = Parameter(uniform_init(rng, (d, d), d))
        self.w_k = Parameter(uniform_init(rng, (d, d), d))
        self.w_v = Parameter(uniform_init(rng, (d, d), d))
        self.w_o = Parameter(uniform_init(rng, (d, d), d))
        self.ffn1 = Linear(d, d_ffn, rng)
        self.ffn2 = Linear(d_ffn, d, rng)
        self.norm1 = LayerNorm(d)
        self.norm2 = LayerNorm(d)
        self.heads = heads

    @property
    def d(self) -> int:
        return self.w_q.shape[0]

    def ffn(self, z: Tensor) -> Tensor:
        return self.ffn2(ag.gelu(self.ffn1(z)))

    @staticmethod
    def analytic_count(d: int, d_ffn: int) -> int:
        return 4 * d * d + 2 * d * d_ffn + d_ffn + d + 4 * d


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig, materialize: bool = True):
        rng = np.random.default_rng(cfg.seed) if materialize else None
        self.cfg = cfg
        blocks = []
        c_in = cfg.in_channels
        for k, s, c in cfg.conv_blocks:
            blocks.append(ConvBlock(k, s, c_in, c, rng))
            c_in = c
        self.frontend = blocks
        self.proj = Linear(c_in, cfg.d, rng)
        self.pos_conv = (PositionalConv(cfg.d, cfg.pos_conv_kernel, cfg.pos_conv_groups, rng)
                         if cfg.pos_conv_kernel else None)
        self.layers = [EncoderLayer(cfg.d, cfg.heads, cfg.d_ffn, rng) for _ in range(cfg.L)]
        self.rename_parameters("backbone.")

    def layer_norm_parameters(self) -> list[Parameter]:
        """Scale/bias of the LayerNorms inside the encoder layers."""
        out = []
        for layer in self.layers:
            out += layer.norm1.parameters() + layer.norm2.parameters()
        return out


@dataclass
class LayerOutputs:
    """``X_0`` (frontend output) followed by ``X_1 .. X_L``."""

    outputs: list[Tensor]

    def __len__(self) -> int:
        return len(self.outputs)

    def __getitem__(self, l: int) -> Tensor:
        return self.outputs[l]

    @property
    def encoder(self) -> list[Tensor]:
        return self.outputs[1:]


# ---------------------------------------------------------------------------
# forward functions


def cnn_encode(backbone: Backbone, feats: Tensor) -> Tensor:
    cfg = backbone.cfg
    if feats.shape[-1] != cfg.in_channels:
        raise ag.ShapeError(f"expected {cfg.in_channels} input channels, got {feats.shape}")
    if cfg.frames_out(feats.shape[-2]) < 1:
        raise ValueError(
            f"input too short: {feats.shape[-2]} rows, frontend needs >= {cfg.min_input_length()}")
    x = feats
    for block in backbone.frontend:
        x = block(x)
    x = backbone.proj(x)
    if backbone.pos_conv is not None:
        x = backbone.pos_conv(x)
    return x


def project(x: Tensor, w: Tensor, lora=None) -> Tensor:
    """``x W`` or ``x (W + A B)`` evaluated as ``x W + (x A) B``."""
    y = ag.matmul(x, w)
    if lora is not None:
        y = ag.add(y, ag.matmul(ag.matmul(x, lora.A), lora.B))
    return y


def attention_core(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Scaled dot-product attention run independently per head.

    Keys/values may be longer than queries (prefix rows); output has the
    query length.
    """
    batched = q.ndim == 3
    dh = q.shape[-1] // heads
    qh = ag.split_heads(q, heads)
    kh = ag.split_heads(k, heads)
    vh = ag.split_heads(v, heads)
    scores = ag.scale(ag.matmul(qh, ag.transpose(kh)), 1.0 / math.sqrt(dh))
    return ag.merge_heads(ag.matmul(ag.softmax_rows(scores), vh), heads, batched)


def _prefixed(rows: Tensor, seq: Tensor) -> Tensor:
    if seq.ndim == 3:
        rows = ag.tile_batch(rows, seq.shape[0])
    return ag.concat_rows(rows, seq)


def mhsa(layer: EncoderLayer, x: Tensor, lora=None, prefix=None) -> Tensor:
    """Multi-head self-attention of one layer, optionally low-rank-updated or key/value-prefixed."""
    if x.shape[-1] != layer.d:
        raise ag.ShapeError(f"layer expects width {layer.d}, got {x.shape}")
    q = project(x, layer.w_q, None if lora is None else lora.q)
    k = project(x, layer.w_k, None if lora is None else lora.k)
    v = project(x, layer.w_v, None if lora is None else lora.v)
    if prefix is not None and prefix.m > 0:
        k = _prefixed(prefix.p_k, k)
        v = _prefixed(prefix.p_v, v)
    return ag.matmul(attention_core(q, k, v, layer.heads), layer.w_o)


Adapter = Callable[[Tensor], Tensor]


def encoder_layer_forward(
    layer: EncoderLayer,
    x: Tensor,
    lora=None,
    prefix=None,
    g_mhsa: Adapter | None = None,
    g_ffn: Adapter | None = None,
) -> Tensor:
    """Post-LN layer: ``Z = LN(g1(MHSA(X)) + X)``, ``X' = LN(g2(FFN(Z)) + Z)``.

    With no adapters ``g1``/``g2`` are the identity.
    """
    a = mhsa(layer, x, lora=lora, prefix=prefix)
    if g_mhsa is not None:
        a = g_mhsa(a)
    z = layer.norm1(ag.add(a, x))
    f = layer.ffn(z)
    if g_ffn is not None:
        f = g_ffn(f)
    return layer.norm2(ag.add(f, z))


def backbone_forward(backbone: Backbone, feats: Tensor) -> LayerOutputs:
    x = cnn_encode(backbone, feats)
    outs = [x]
    for layer in backbone.layers:
        x = encoder_layer_forward(layer, x)
        outs.append(x)
    return LayerOutputs(outs)


def count_backbone(cfg: BackboneConfig) -> int:
    """Closed-form parameter count of :class:`Backbone`."""
    total = 0
    c_in = cfg.in_channels
    for k, _, c in cfg.conv_blocks:
        total += k * c_in * c + 2 * c
        c_in = c
    total += c_in * cfg.d + cfg.d
    if cfg.pos_conv_kernel:
        total += cfg.pos_conv_kernel * (cfg.d // cfg.pos_conv_groups) * cfg.d + cfg.d
    total += cfg.L * EncoderLayer.analytic_count(cfg.d, cfg.d_ffn)
    return total


def layers_of(outputs: LayerOutputs | Sequence[Tensor]) -> list[Tensor]:
    return list(outputs.encoder if isinstance(outputs, LayerOutputs) else outputs)
