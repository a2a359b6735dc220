"""End-to-end runs: data, (pre)trained backbone, plan, training, evaluation, artifacts.

A run directory holds::

    config.txt                      resolved configuration
    history.jsonl, summary.json     RunRecord
    params.json                     ParamBudgetReport
    layer_weights.txt               index and raw weight (layer-weight plans)
    layer_weights_normalized.txt    index and normalised weight
    predictions.txt / trials.txt    test-split outputs
    backbone.bin/.manifest          backbone checkpoint
    task.bin/.manifest              adapters, unfrozen norms and head
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import tasks
from .adapters import PlanError, TunableModel, assemble
from .backbone import Backbone
from .checkpoint import load_into, save_parameters
from .config import ExperimentConfig
from .data import ToyDataset, generate
from .metrics import write_predictions, write_trials
from .training import LR_GRID, RunRecord, count_parameters, toy_pretrain, train_loop


@dataclass
class LayerWeightExport:
    raw: np.ndarray
    normalized: np.ndarray

    def __len__(self) -> int:
        return len(self.raw)

    def lower_upper_mass(self) -> tuple[float, float]:
        """``sum |w|`` over the lower and upper half of the layers (middle layer split evenly)."""
        a = np.abs(self.raw)
        L = len(a)
        half = L // 2
        lower, upper = a[:half].sum(), a[L - half:].sum()
        return float(lower), float(upper)

    def write(self, path: str | Path, normalized: bool = False) -> None:
        values = self.normalized if normalized else self.raw
        lines = [f"{l + 1} {v!r}" for l, v in enumerate(values.tolist())]
        Path(path).write_text("\n".join(lines) + "\n")

    @staticmethod
    def read(path: str | Path) -> np.ndarray:
        rows = [line.split() for line in Path(path).read_text().splitlines() if line.strip()]
        return np.array([float(v) for _, v in rows])


def normalize_weights(w: np.ndarray) -> np.ndarray:
    """``w / sum(w)`` when every weight is positive, otherwise a softmax."""
    w = np.asarray(w, dtype=float)
    if np.all(w > 0):
        return w / w.sum()
    e = np.exp(w - w.max())
    return e / e.sum()


def export_layer_weights(model: TunableModel) -> LayerWeightExport:
    w = model.layer_weights()
    if w is None:
        raise PlanError(f"plan {model.plan.strategy!r} has no layer weights to export")
    raw = w.data.copy()
    return LayerWeightExport(raw, normalize_weights(raw))


# ---------------------------------------------------------------------------
# building blocks


def build_dataset(cfg: ExperimentConfig) -> ToyDataset:
    return generate(cfg.dataset_spec())


def build_backbone(cfg: ExperimentConfig, dataset: ToyDataset | None = None) -> Backbone:
    """Fresh backbone, then either a stored checkpoint or optional toy pretraining."""
    backbone = Backbone(cfg.backbone_config())
    if cfg.backbone_checkpoint:
        load_into(cfg.backbone_checkpoint, backbone.named_parameters())
    elif cfg.pretrain_steps > 0:
        if dataset is None:
            dataset = build_dataset(cfg)
        toy_pretrain(backbone, dataset.train.x, cfg.pretrain_steps, cfg.mask_ratio,
                     lr=cfg.pretrain_lr, batch_size=cfg.batch_size, seed=cfg.backbone_seed)
    backbone.freeze(True)
    return backbone


def build_model(cfg: ExperimentConfig, backbone: Backbone, dataset: ToyDataset) -> TunableModel:
    plan = cfg.plan()
    width = plan.feature_width(backbone.cfg.d)
    rng = np.random.default_rng(cfg.seed + 7919)
    head = tasks.build_head(cfg.task, width, dataset.meta, cfg.head_hidden, rng)
    return assemble(plan, backbone, head, seed=cfg.seed)


def task_parameters(model: TunableModel):
    """Everything a task stores on top of the shared backbone."""
    return [(n, p) for n, p in model.named_parameters()
            if not n.startswith("backbone.") or not p.frozen]


@dataclass
class RunResult:
    config: ExperimentConfig
    record: RunRecord
    model: TunableModel
    dataset: ToyDataset


def train_model(cfg: ExperimentConfig, model: TunableModel, dataset: ToyDataset,
                lr: float | None = None) -> RunRecord:
    def eval_fn(m):
        return tasks.evaluate(cfg.task, m, dataset)

    return train_loop(model, len(dataset.train), tasks.make_loss_fn(cfg.task, dataset),
                      cfg.lr_schedule(lr), cfg.steps, cfg.seed, eval_fn=eval_fn,
                      batch_size=cfg.batch_size)


def write_artifacts(cfg: ExperimentConfig, result_model: TunableModel, record: RunRecord,
                    dataset: ToyDataset, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    cfgmod.save(cfg, out / "config.txt")
    record.save(out)
    (out / "params.json").write_text(json.dumps(record.params, indent=2, sort_keys=True) + "\n")
    if result_model.layer_weights() is not None:
        export = export_layer_weights(result_model)
        export.write(out / "layer_weights.txt")
        export.write(out / "layer_weights_normalized.txt", normalized=True)
    if cfg.task == "asv":
        write_trials(out / "trials.txt", tasks.score_trials(result_model, dataset), normalized=True)
    elif cfg.task != "asr":
        preds = tasks.predict(cfg.task, result_model, dataset.test.x, dataset.meta)
        write_predictions(out / "predictions.txt", dataset.test.ids, preds, dataset.test.y)
    else:
        preds = tasks.predict("asr", result_model, dataset.test.x, dataset.meta)
        lines = [f"{i} {' '.join(map(str, p)) or '-'} | {' '.join(map(str, r))}"
                 for i, p, r in zip(dataset.test.ids, preds, dataset.test.y)]
        (out / "predictions.txt").write_text("\n".join(lines) + "\n")
    save_parameters(out / "backbone", result_model.backbone.named_parameters())
    save_parameters(out / "task", task_parameters(result_model))


def run_experiment(config: ExperimentConfig | str | Path, output_dir: str | Path | None = None,
                   backbone: Backbone | None = None, write: bool = True) -> RunResult:
    """Build, train, evaluate and (optionally) persist one run.

    ``backbone`` lets callers share one pretrained backbone across plans; it
    is deep-copied so the caller's instance is never modified.
    """
    cfg = config if isinstance(config, ExperimentConfig) else cfgmod.load(config)
    dataset = build_dataset(cfg)
    bb = copy.deepcopy(backbone) if backbone is not None else build_backbone(cfg, dataset)
    model = build_model(cfg, bb, dataset)
    record = train_model(cfg, model, dataset)
    if write:
        write_artifacts(cfg, model, record, dataset, Path(output_dir or cfg.output_dir))
    return RunResult(cfg, record, model, dataset)


def load_run(directory: str | Path) -> RunResult:
    """Rebuild a trained model from a run directory's config and checkpoints."""
    directory = Path(directory)
    cfg = cfgmod.load(directory / "config.txt")
    dataset = build_dataset(cfg)
    bb = Backbone(cfg.backbone_config())
    load_into(directory / "backbone", bb.named_parameters())
    bb.freeze(True)
    model = build_model(cfg, bb, dataset)
    load_into(directory / "task", task_parameters(model))
    return RunResult(cfg, RunRecord.load(directory), model, dataset)


def sweep_lr(cfg: ExperimentConfig, grid=LR_GRID, backbone: Backbone | None = None) -> tuple[float, dict]:
    """Train once per learning rate; pick the one with the lowest validation loss."""
    dataset = build_dataset(cfg)
    base = backbone if backbone is not None else build_backbone(cfg, dataset)
    losses = {}
    for lr in grid:
        model = build_model(cfg, copy.deepcopy(base), dataset)
        train_loop(model, len(dataset.train), tasks.make_loss_fn(cfg.task, dataset),
                   cfg.lr_schedule(lr), cfg.steps, cfg.seed, batch_size=cfg.batch_size)
        losses[lr] = tasks.split_loss(cfg.task, model, dataset, "val")
    best = min(losses, key=lambda k: (losses[k], -k))
    return best, losses
