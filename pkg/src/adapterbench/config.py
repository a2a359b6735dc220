"""Flat ``key = value`` experiment configuration.

One assignment per line; ``#`` starts a comment.  Every key is a field of
:class:`ExperimentConfig` and is parsed with that field's type:

* integers and floats in Python literal syntax (floats are written with
  ``repr`` so they round-trip exactly);
* optional integers accept ``none``;
* ``slots`` is a comma-separated integer list, e.g. ``6,14,4``;
* ``conv_blocks`` is a comma-separated list of ``kernel:stride:channels``.

Unknown keys, duplicate keys and unparsable values are reported with the
file name, line number and field.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .adapters import STRATEGIES, AdapterPlan, P_VARIANTS, LADAPTER_VARIANTS
from .backbone import BackboneConfig
from .data import INTENT_SLOTS, SyntheticDatasetSpec
from .training import LrSchedule


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    task: str = "asr"
    strategy: str = "ELP"
    # adapter sizes; none -> scaled from d
    activation: str = "auto"
    l_config: str = "H"
    p_variant: str = "C"
    r: int | None = None
    m: int = 5
    b: int | None = None
    d_L: int | None = None
    # backbone
    L: int = 12
    d: int = 64
    heads: int = 4
    d_ffn: int = 128
    conv_blocks: tuple = ((3, 2, 32), (3, 2, 32))
    in_channels: int = 16
    pos_conv_kernel: int = 0
    pos_conv_groups: int = 1
    backbone_seed: int = 0
    backbone_checkpoint: str = ""
    # toy pretraining
    pretrain_steps: int = 0
    mask_ratio: float = 0.3
    pretrain_lr: float = 1e-3
    # data
    n_train: int = 64
    n_test: int = 32
    n_val: int = 16
    noise: float = 0.3
    data_seed: int = 0
    vocab: int = 6
    max_label_len: int = 4
    min_duration: int = 2
    max_duration: int = 4
    speakers: int = 8
    utt_frames: int = 16
    gain_spread: float = 0.5
    speaker_offset: float = 0.2
    classes: int = 4
    slots: tuple = INTENT_SLOTS
    segment_frames: int = 4
    # optimisation
    schedule: str = "warmup"
    lr: float = 1e-3
    eta_0: float = 1e-7
    n_warm: int = 0  # 0 -> steps // 10
    gamma: float = 0.1
    step_size: int = 10
    steps: int = 200
    batch_size: int = 8
    head_hidden: int = 32
    seed: int = 0
    output_dir: str = "runs/default"

    def __post_init__(self):
        self.conv_blocks = tuple(tuple(int(v) for v in blk) for blk in self.conv_blocks)
        self.slots = tuple(int(s) for s in self.slots)
        if self.task not in ("asr", "asv", "ser", "sic"):
            raise ConfigError(f"task: unknown task {self.task!r}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy: unknown strategy {self.strategy!r}")
        if self.l_config not in LADAPTER_VARIANTS:
            raise ConfigError(f"l_config: unknown configuration {self.l_config!r}")
        if self.p_variant not in P_VARIANTS:
            raise ConfigError(f"p_variant: expected one of {sorted(P_VARIANTS)}")
        if self.schedule not in ("warmup", "step"):
            raise ConfigError(f"schedule: expected warmup or step, got {self.schedule!r}")
        if self.steps < 0:
            raise ConfigError("steps: must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size: must be >= 1")

    # -- derived objects --------------------------------------------------

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(
            L=self.L, d=self.d, heads=self.heads, d_ffn=self.d_ffn,
            conv_blocks=list(self.conv_blocks), in_channels=self.in_channels,
            pos_conv_kernel=self.pos_conv_kernel, pos_conv_groups=self.pos_conv_groups,
            seed=self.backbone_seed,
        )

    def plan(self) -> AdapterPlan:
        return AdapterPlan(
            strategy=self.strategy, task=self.task,
            activation=None if self.activation == "auto" else self.activation,
            l_config=self.l_config, p_variant=self.p_variant,
            r=self.r, m=self.m, b=self.b, d_L=self.d_L,
        )

    def dataset_spec(self) -> SyntheticDatasetSpec:
        return SyntheticDatasetSpec(
            task=self.task, n_train=self.n_train, n_test=self.n_test, n_val=self.n_val,
            channels=self.in_channels, samples_per_frame=self.backbone_config().total_stride,
            noise=self.noise, seed=self.data_seed, vocab=self.vocab,
            max_label_len=self.max_label_len, min_duration=self.min_duration,
            max_duration=self.max_duration, speakers=self.speakers, utt_frames=self.utt_frames,
            gain_spread=self.gain_spread, speaker_offset=self.speaker_offset,
            classes=self.classes, slots=self.slots, segment_frames=self.segment_frames,
        )

    def lr_schedule(self, lr: float | None = None) -> LrSchedule:
        lr = self.lr if lr is None else lr
        if self.schedule == "step":
            return LrSchedule("step", eta_0=lr, gamma=self.gamma, s=self.step_size)
        n_total = max(self.steps, 1)
        n_warm = self.n_warm or max(1, self.steps // 10)
        return LrSchedule("warmup", eta_0=self.eta_0, eta_max=lr,
                          n_warm=min(n_warm, n_total), n_total=n_total)

    def with_overrides(self, **values) -> "ExperimentConfig":
        return replace(self, **values)


# ---------------------------------------------------------------------------
# text representation


def _field_types() -> dict[str, str]:
    return {f.name: str(f.type) for f in fields(ExperimentConfig)}


def format_value(name: str, value: Any) -> str:
    if name == "conv_blocks":
        return ",".join(":".join(str(v) for v in blk) for blk in value)
    if name == "slots":
        return ",".join(str(v) for v in value)
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_value(name: str, text: str) -> Any:
    """Convert the text of one field; raises ``ValueError`` on bad input."""
    kind = _field_types()[name]
    text = text.strip()
    if name == "conv_blocks":
        if not text:
            return ()
        blocks = []
        for part in text.split(","):
            vals = part.strip().split(":")
            if len(vals) != 3:
                raise ValueError(f"conv block {part!r} is not kernel:stride:channels")
            blocks.append(tuple(int(v) for v in vals))
        return tuple(blocks)
    if name == "slots":
        return tuple(int(v) for v in text.split(","))
    if kind == "int | None":
        return None if text.lower() == "none" else int(text)
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    return text


def dumps(cfg: ExperimentConfig) -> str:
    lines = [f"{f.name} = {format_value(f.name, getattr(cfg, f.name))}" for f in fields(cfg)]
    return "\n".join(lines) + "\n"


def loads(text: str, source: str = "<config>", base: ExperimentConfig | None = None) -> ExperimentConfig:
    types = _field_types()
    values: dict[str, Any] = {}
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"{source}:{lineno}: unknown field {key!r}")
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: field {key!r} already set on line {seen[key]}")
        seen[key] = lineno
        try:
            values[key] = parse_value(key, value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: field {key!r}: {exc}") from None
    try:
        return replace(base, **values) if base is not None else ExperimentConfig(**values)
    except ConfigError as exc:
        field_name = str(exc).split(":", 1)[0]
        where = f":{seen[field_name]}" if field_name in seen else ""
        raise ConfigError(f"{source}{where}: {exc}") from None


def load(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    return loads(path.read_text(), source=str(path))


def save(cfg: ExperimentConfig, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(cfg))
