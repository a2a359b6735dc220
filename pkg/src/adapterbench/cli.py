"""Command-line entry point.

Every verb takes an optional ``--config FILE``; any config key may also be
given as a flag (``--steps 50``, ``--strategy weight``) and flags win over
the file.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

from . import config as cfgmod
from . import experiment, tasks
from .adapters import assemble
from .backbone import Backbone, full_scale_config
from .checkpoint import save_parameters
from .config import ConfigError, ExperimentConfig
from .training import LR_GRID, count_parameters


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value config file")
    for f in fields(ExperimentConfig):
        p.add_argument(f"--{f.name}", dest=f"cfg_{f.name}", metavar="VALUE")


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = cfgmod.load(args.config) if args.config else ExperimentConfig()
    overrides = {}
    for f in fields(ExperimentConfig):
        text = getattr(args, f"cfg_{f.name}", None)
        if text is None:
            continue
        try:
            overrides[f.name] = cfgmod.parse_value(f.name, text)
        except ValueError as exc:
            raise ConfigError(f"--{f.name}: {exc}") from None
    return cfg.with_overrides(**overrides) if overrides else cfg


def cmd_pretrain(args) -> int:
    cfg = resolve_config(args)
    if cfg.pretrain_steps < 1:
        cfg = cfg.with_overrides(pretrain_steps=200)
    cfg = cfg.with_overrides(backbone_checkpoint="")
    out = Path(cfg.output_dir)
    backbone = experiment.build_backbone(cfg)
    save_parameters(out / "backbone", backbone.named_parameters())
    print(f"pretrained backbone ({cfg.pretrain_steps} steps) written to {out / 'backbone.bin'}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    result = experiment.run_experiment(cfg)
    print(json.dumps({"initial": result.record.initial_metrics,
                      "final": result.record.final_metrics,
                      "output_dir": cfg.output_dir}, sort_keys=True))
    return 0


def cmd_evaluate(args) -> int:
    run = experiment.load_run(args.run_dir)
    metrics = tasks.evaluate(run.config.task, run.model, run.dataset, args.split)
    print(json.dumps(metrics, sort_keys=True))
    return 0


def cmd_count_params(args) -> int:
    if args.full_scale:
        cfg = resolve_config(args)
        bcfg = full_scale_config()
        backbone = Backbone(bcfg, materialize=False)
        plan = cfg.plan()
        if plan.b is None and plan.d_L is None and plan.r is None:
            plan = plan.resolved(bcfg.d)
        model = assemble(plan, backbone, head=None, seed=None)
    else:
        cfg = resolve_config(args)
        dataset = experiment.build_dataset(cfg)
        backbone = Backbone(cfg.backbone_config())
        model = experiment.build_model(cfg, backbone, dataset)
    report = count_parameters(model, K=args.tasks)
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return 0


def cmd_export_weights(args) -> int:
    run = experiment.load_run(args.run_dir)
    export = experiment.export_layer_weights(run.model)
    out = Path(args.out) if args.out else Path(args.run_dir) / "layer_weights.txt"
    export.write(out, normalized=args.normalized)
    print(f"{len(export)} layer weights written to {out}")
    return 0


def cmd_sweep_lr(args) -> int:
    cfg = resolve_config(args)
    best, losses = experiment.sweep_lr(cfg, LR_GRID)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"{lr!r} {loss!r}" for lr, loss in losses.items()]
    (out / "sweep.txt").write_text("\n".join(lines) + "\n")
    print(json.dumps({"best_lr": best, "val_loss": {repr(k): v for k, v in losses.items()}}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adapterbench", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("pretrain", help="toy masked-reconstruction pretraining of a backbone")
    _add_config_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="run one experiment and write its artifacts")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="re-evaluate a finished run from its checkpoints")
    p.add_argument("run_dir", type=Path)
    p.add_argument("--split", default="test", choices=("train", "test", "val"))
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("count-params", help="parameter budget report for a plan")
    _add_config_flags(p)
    p.add_argument("--full-scale", action="store_true", help="use the 12 x 768 geometry (shape only)")
    p.add_argument("--tasks", type=int, default=1, help="task count K for the storage totals")
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("export-weights", help="write learned layer weights as two-column text")
    p.add_argument("run_dir", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--normalized", action="store_true")
    p.set_defaults(func=cmd_export_weights)

    p = sub.add_parser("sweep-lr", help="train over the learning-rate grid, pick by validation loss")
    _add_config_flags(p)
    p.set_defaults(func=cmd_sweep_lr)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
