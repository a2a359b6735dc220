"""Seeded synthetic stand-ins for the four task families.

Every generator is a pure function of its :class:`SyntheticDatasetSpec`.
Utterances are ``T x channels`` feature rows.  One *frame* (the unit labels
and durations are measured in) spans ``samples_per_frame`` consecutive rows,
which should equal the backbone frontend's total stride so that one frame
maps to roughly one encoder position.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

INTENT_SLOTS = (6, 14, 4)  # action, object, location
EMOTION_CLASSES = 4


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    task: str = "asr"
    n_train: int = 64
    n_test: int = 32
    n_val: int = 16
    channels: int = 16
    samples_per_frame: int = 4
    noise: float = 0.3
    seed: int = 0
    # asr
    vocab: int = 6
    max_label_len: int = 4
    min_duration: int = 2
    max_duration: int = 4
    # asv
    speakers: int = 8
    utt_frames: int = 16
    gain_spread: float = 0.5
    speaker_offset: float = 0.2
    # ser
    classes: int = EMOTION_CLASSES
    # sic
    slots: tuple[int, ...] = INTENT_SLOTS
    segment_frames: int = 4

    def __post_init__(self):
        object.__setattr__(self, "slots", tuple(int(s) for s in self.slots))
        if self.task not in ("asr", "asv", "ser", "sic"):
            raise ValueError(f"unknown task {self.task!r}")
        if min(self.n_train, self.n_test) < 1 or self.n_val < 0:
            raise ValueError("split sizes must be positive")
        if self.channels < 1 or self.samples_per_frame < 1 or self.noise < 0:
            raise ValueError("invalid channel/frame/noise settings")
        if self.task == "asr":
            if self.vocab < 2:
                raise ValueError("toy ASR needs vocab >= 2")
            if not 1 <= self.min_duration <= self.max_duration:
                raise ValueError("invalid duration range")
            if self.max_label_len < 1:
                raise ValueError("max_label_len must be >= 1")
        if self.task == "asv" and self.speakers < 2:
            raise ValueError("toy speaker task needs >= 2 speakers")
        if self.task == "ser" and self.classes < 2:
            raise ValueError("emotion task needs >= 2 classes")
        if self.task == "sic" and (len(self.slots) < 1 or min(self.slots) < 1):
            raise ValueError("intent slots must be positive")


@dataclass
class Split:
    x: np.ndarray  # N x T x c
    y: list
    ids: list[str]

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class ToyDataset:
    spec: SyntheticDatasetSpec
    train: Split
    test: Split
    val: Split
    trials: list[tuple[str, str, bool]] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def split_names(self) -> tuple[str, ...]:
        return ("train", "test", "val")

    def split(self, name: str) -> Split:
        return getattr(self, name)


def _rows(frames: np.ndarray, spf: int) -> np.ndarray:
    return np.repeat(frames, spf, axis=0)


def _stack(xs: list, T: int, c: int) -> np.ndarray:
    # empty splits (n_val = 0) still get a well-shaped array
    return np.stack(xs) if xs else np.zeros((0, T, c))


# ---------------------------------------------------------------------------
# ASR: symbol sequences rendered as alternating sub-templates


def asr_frame_count(spec: SyntheticDatasetSpec) -> int:
    return spec.max_label_len * spec.max_duration + 2


def _asr_templates(spec: SyntheticDatasetSpec, rng) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # each symbol = (A-part, B-part); a single frame shows only one part, so
    # telling symbols apart needs neighbouring frames
    pa = max(2, int(np.ceil(np.sqrt(spec.vocab))))
    pb = int(np.ceil(spec.vocab / pa))
    a_parts = rng.normal(size=(pa, spec.channels))
    b_parts = rng.normal(size=(max(pb, 2), spec.channels))
    pairs = np.array([(k % pa, k // pa) for k in range(spec.vocab)])
    return a_parts, b_parts, pairs


def _render_asr(spec, rng, templates, n) -> Split:
    a_parts, b_parts, pairs = templates
    F = asr_frame_count(spec)
    xs, ys = [], []
    for _ in range(n):
        U = int(rng.integers(1, spec.max_label_len + 1))
        labels = rng.integers(0, spec.vocab, size=U).tolist()
        frames = np.zeros((F, spec.channels))
        pos = 1  # leading silence frame
        for lab in labels:
            dur = int(rng.integers(spec.min_duration, spec.max_duration + 1))
            ia, ib = pairs[lab]
            for j in range(dur):
                frames[pos + j] = a_parts[ia] if j % 2 == 0 else b_parts[ib]
            pos += dur
        rows = _rows(frames, spec.samples_per_frame)
        rows = rows + spec.noise * rng.normal(size=rows.shape)
        xs.append(rows)
        ys.append(labels)
    return Split(_stack(xs, F * spec.samples_per_frame, spec.channels), ys, [])


def generate_toy_asr(spec: SyntheticDatasetSpec) -> ToyDataset:
    rng = np.random.default_rng(spec.seed)
    templates = _asr_templates(spec, rng)
    splits = [_render_asr(spec, rng, templates, n) for n in (spec.n_train, spec.n_test, spec.n_val)]
    _name(splits)
    return ToyDataset(spec, *splits, meta={"frames": asr_frame_count(spec), "vocab": spec.vocab,
                                           "templates": templates})


# ---------------------------------------------------------------------------
# ASV: each speaker colours white noise with its own fixed affine map


def _speaker_maps(spec, rng) -> np.ndarray:
    """Per-speaker channel gain profile times a small shared-scale random mix.

    Identity lives in per-frame channel energies, which a single frame (and
    so the lowest layers) already exposes.
    """
    c = spec.channels
    gains = np.exp(spec.gain_spread * rng.normal(size=(spec.speakers, c)))
    mix = np.eye(c) + 0.2 * rng.normal(size=(spec.speakers, c, c)) / np.sqrt(c)
    return gains[:, :, None] * mix


def _render_speaker(spec, rng, maps, offsets, n) -> Split:
    T = spec.utt_frames * spec.samples_per_frame
    xs, ys = [], []
    for i in range(n):
        s = i % spec.speakers
        z = rng.normal(size=(T, spec.channels))
        x = offsets[s] + z @ maps[s].T + spec.noise * rng.normal(size=(T, spec.channels))
        xs.append(x)
        ys.append(s)
    return Split(_stack(xs, T, spec.channels), ys, [])


def make_trials(split: Split, rng) -> list[tuple[str, str, bool]]:
    """One same-speaker and one different-speaker trial per test utterance where possible."""
    by_spk: dict[int, list[int]] = {}
    for i, s in enumerate(split.y):
        by_spk.setdefault(s, []).append(i)
    trials = []
    for i, s in enumerate(split.y):
        same = [j for j in by_spk[s] if j != i]
        diff = [j for j in range(len(split.y)) if split.y[j] != s]
        if same and diff:
            trials.append((split.ids[i], split.ids[same[int(rng.integers(len(same)))]], True))
            trials.append((split.ids[i], split.ids[diff[int(rng.integers(len(diff)))]], False))
    return trials


def generate_toy_speaker(spec: SyntheticDatasetSpec) -> ToyDataset:
    rng = np.random.default_rng(spec.seed)
    maps = _speaker_maps(spec, rng)
    offsets = spec.speaker_offset * rng.normal(size=(spec.speakers, spec.channels))
    splits = [_render_speaker(spec, rng, maps, offsets, n) for n in (spec.n_train, spec.n_test, spec.n_val)]
    _name(splits)
    trials = make_trials(splits[1], rng)
    return ToyDataset(spec, *splits, trials=trials, meta={"speakers": spec.speakers})


# ---------------------------------------------------------------------------
# SER: class-dependent oscillation frequency and amplitude


def _render_emotion(spec, rng, n) -> Split:
    T = spec.utt_frames * spec.samples_per_frame
    C = spec.classes
    freqs = np.linspace(0.5, 3.0, C)  # cycles per frame
    amps = np.linspace(1.0, 2.5, C)[rng.permutation(C)] if C > 1 else np.ones(1)
    t = np.arange(T) / spec.samples_per_frame
    xs, ys = [], []
    for i in range(n):
        c = i % C
        u = rng.normal(size=spec.channels)
        u /= np.linalg.norm(u)
        phase = rng.uniform(0, 2 * np.pi)
        wave = amps[c] * np.sin(2 * np.pi * freqs[c] * t / spec.samples_per_frame * 2 + phase)
        x = np.outer(wave, u) * np.sqrt(spec.channels) + spec.noise * rng.normal(size=(T, spec.channels))
        xs.append(x)
        ys.append(c)
    return Split(_stack(xs, T, spec.channels), ys, [])


def generate_toy_emotion(spec: SyntheticDatasetSpec) -> ToyDataset:
    rng = np.random.default_rng(spec.seed)
    splits = [_render_emotion(spec, rng, n) for n in (spec.n_train, spec.n_test, spec.n_val)]
    _name(splits)
    return ToyDataset(spec, *splits, meta={"classes": spec.classes})


# ---------------------------------------------------------------------------
# SIC: one segment per slot, each slot value with its own template


def _render_intent(spec, rng, templates, n) -> Split:
    seg = spec.segment_frames
    xs, ys = [], []
    for _ in range(n):
        triple = tuple(int(rng.integers(k)) for k in spec.slots)
        frames = np.concatenate([np.repeat(templates[s][v][None], seg, axis=0)
                                 for s, v in enumerate(triple)])
        rows = _rows(frames, spec.samples_per_frame)
        xs.append(rows + spec.noise * rng.normal(size=rows.shape))
        ys.append(triple)
    return Split(_stack(xs, len(spec.slots) * seg * spec.samples_per_frame, spec.channels), ys, [])


def generate_toy_intent(spec: SyntheticDatasetSpec) -> ToyDataset:
    rng = np.random.default_rng(spec.seed)
    templates = [rng.normal(size=(k, spec.channels)) for k in spec.slots]
    splits = [_render_intent(spec, rng, templates, n) for n in (spec.n_train, spec.n_test, spec.n_val)]
    _name(splits)
    return ToyDataset(spec, *splits, meta={"slots": list(spec.slots)})


def _name(splits) -> None:
    for prefix, split in zip(("tr", "te", "va"), splits):
        split.ids = [f"{prefix}{i:05d}" for i in range(len(split.y))]


GENERATORS = {
    "asr": generate_toy_asr,
    "asv": generate_toy_speaker,
    "ser": generate_toy_emotion,
    "sic": generate_toy_intent,
}


def generate(spec: SyntheticDatasetSpec) -> ToyDataset:
    return GENERATORS[spec.task](spec)
