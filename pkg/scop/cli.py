"""Command-line entry point.

Every subcommand echoes its resolved configuration as JSON on stdout before
doing any work. Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

import argparse
import json
import statistics
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

from loguru import logger
from pydantic import ValidationError

from . import __version__
from .core.cache import ArtifactStore
from .core.config import settings
from .core.exceptions import ScopError, UsageError
from .core.logging import setup_logging
from .models.architectures import ARCHITECTURES
from .schemas.experiment import DATASETS, ControlMode, Criterion, ExperimentConfig
from .services.checkpoint_service import load_network
from .services.pipeline_service import (
    ScopPipeline,
    ablate,
    median_summary,
    planted_diagnostic,
    run_scop,
    sweep_rates,
)
from .services.pruning_service import apply_plan, reduction_summary
from .services.report_service import (
    emit_feature_histograms,
    format_table,
    read_histogram_csv,
    read_metrics,
    total_variation,
)
from .services.training_service import evaluate

_DEFAULTS = ExperimentConfig(seed=0).model_dump(mode="json")


class ScopArgumentParser(argparse.ArgumentParser):
    """argparse with usage errors raised instead of exiting with status 2."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _on_off(value: str) -> bool:
    return value == "on"


def _default(section: str, key: Optional[str] = None) -> Any:
    value = _DEFAULTS[section] if key is None else _DEFAULTS[section][key]
    return "on" if value is True else "off" if value is False else value


def _experiment_parent() -> argparse.ArgumentParser:
    parent = ScopArgumentParser(add_help=False)
    group = parent.add_argument_group("experiment")
    group.add_argument("--config", type=Path, help="JSON experiment config; flags override it (default: none)")
    group.add_argument("--seed", type=int, help="master seed (default: from --config, required)")
    group.add_argument("--name", help=f"experiment label (default: {_default('name')})")
    group.add_argument("--arch", choices=ARCHITECTURES, help=f"architecture (default: {_default('arch')})")
    group.add_argument("--dataset", choices=DATASETS, help=f"dataset (default: {_default('dataset')})")
    group.add_argument("--force", action="store_true", help="recompute stages even when artifacts exist (default: off)")
    return parent


def _add_train_flags(parser: argparse.ArgumentParser, section: str) -> None:
    group = parser.add_argument_group(section)
    group.add_argument(f"--{section}-lr", type=float, help=f"learning rate (default: {_default(section, 'lr')})")
    group.add_argument(f"--{section}-epochs", type=int, help=f"epochs (default: {_default(section, 'epochs')})")
    group.add_argument(f"--{section}-batch", type=int, help=f"batch size (default: {_default(section, 'batch')})")
    group.add_argument(f"--{section}-augment", choices=("on", "off"),
                       help=f"random crop, plus flip on cifar10 (default: {_default(section, 'augment')})")


def _add_selection_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("selection")
    group.add_argument("--control", choices=[m.value for m in ControlMode],
                       help=f"control group (default: {_default('selection', 'control')})")
    group.add_argument("--bias", choices=("on", "off"),
                       help=f"bias pairs after each conv (default: {_default('selection', 'bias')})")
    group.add_argument("--detach-control", choices=("on", "off"),
                       help=f"detach control features (default: {_default('selection', 'detach_control')})")
    group.add_argument("--selection-lr", type=float, help=f"Adam learning rate (default: {_default('selection', 'lr')})")
    group.add_argument("--selection-epochs", type=int, help=f"epochs (default: {_default('selection', 'epochs')})")
    group.add_argument("--selection-batch", type=int, help=f"batch size (default: {_default('selection', 'batch')})")
    group.add_argument("--max-examples", type=int,
                       help="train on the first N examples in every stage (default: all)")
    group.add_argument("--ridge", type=float, help=f"knockoff ridge (default: {_default('knockoff', 'ridge')})")
    group.add_argument("--clip", choices=("on", "off"),
                       help=f"clamp knockoffs to the data range (default: {_default('knockoff', 'clip')})")


def _add_prune_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("prune")
    group.add_argument("--rate", type=float, help=f"uniform pruning rate (default: {_default('prune', 'rate')})")
    group.add_argument("--criterion", choices=[c.value for c in Criterion],
                       help=f"importance criterion (default: {_default('prune', 'criterion')})")
    group.add_argument("--bn-scale", choices=("on", "off"),
                       help=f"scale importance by |gamma| (default: {_default('prune', 'bn_scaled')})")


def _add_all_experiment_flags(parser: argparse.ArgumentParser) -> None:
    _add_train_flags(parser, "pretrain")
    _add_selection_flags(parser)
    _add_prune_flags(parser)
    _add_train_flags(parser, "finetune")


def build_parser() -> ScopArgumentParser:
    parser = ScopArgumentParser(prog="scop", description=settings.app_description)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default=settings.log_level,
                        help="loguru level (default: %(default)s)")
    parser.add_argument("--data-dir", type=Path, default=settings.data_dir,
                        help="dataset root (default: %(default)s)")
    parser.add_argument("--artifact-dir", type=Path, default=settings.artifact_dir,
                        help="artifact store (default: %(default)s)")
    parser.add_argument("--metrics", type=Path, default=settings.metrics_path,
                        help="metrics JSON-lines file (default: %(default)s)")
    commands = parser.add_subparsers(dest="command", metavar="command", required=True)
    parent = _experiment_parent()

    sub = commands.add_parser("pretrain", parents=[parent], help="train the baseline network")
    _add_train_flags(sub, "pretrain")

    sub = commands.add_parser("knockoff", parents=[parent], help="fit the knockoff model and write the cache")
    _add_selection_flags(sub)

    sub = commands.add_parser("select", parents=[parent], help="optimize the scaling factors")
    _add_train_flags(sub, "pretrain")
    _add_selection_flags(sub)

    sub = commands.add_parser("prune", parents=[parent], help="build a pruning plan and report reductions")
    _add_all_experiment_flags(sub)

    sub = commands.add_parser("finetune", parents=[parent], help="fine-tune the pruned network")
    _add_all_experiment_flags(sub)

    sub = commands.add_parser("eval", parents=[parent], help="evaluate a stage's network on the test split")
    _add_all_experiment_flags(sub)
    sub.add_argument("--stage", choices=("pretrain", "final"), default="final",
                     help="network to evaluate (default: %(default)s)")
    sub.add_argument("--checkpoint", type=Path, help="evaluate this checkpoint instead (default: none)")

    sub = commands.add_parser("run", parents=[parent], help="full pipeline, one metrics record per seed")
    _add_all_experiment_flags(sub)
    sub.add_argument("--seeds", type=int, nargs="+", help="run once per seed (default: --seed)")

    sub = commands.add_parser("ablate", parents=[parent], help="control mode x bias matrix")
    _add_all_experiment_flags(sub)
    sub.add_argument("--seeds", type=int, nargs="+", help="seeds per cell (default: --seed)")

    sub = commands.add_parser("sweep", parents=[parent], help="accuracy and reductions over pruning rates")
    _add_all_experiment_flags(sub)
    sub.add_argument("--rates", type=float, nargs="+", default=[0.3, 0.5, 0.7],
                     help="pruning rates (default: 0.3 0.5 0.7)")
    sub.add_argument("--no-finetune", action="store_true", help="skip fine-tuning per rate (default: off)")

    sub = commands.add_parser("diagnose", help="planted-filter recovery and swap tests")
    sub.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4], help="seeds (default: 0 1 2 3 4)")
    sub.add_argument("--controls", nargs="+", choices=[m.value for m in ControlMode],
                     default=[ControlMode.KNOCKOFF.value, ControlMode.NONE.value],
                     help="control modes to compare (default: knockoff none)")
    sub.add_argument("--epochs", type=int, default=10, help="selection epochs (default: %(default)s)")
    sub.add_argument("--lr", type=float, default=0.01, help="selection learning rate (default: %(default)s)")
    sub.add_argument("--examples", type=int, default=2048, help="planted training examples (default: %(default)s)")

    sub = commands.add_parser("report", parents=[parent], help="median tables and feature histogram CSVs")
    _add_all_experiment_flags(sub)
    sub.add_argument("--histograms", type=int, nargs="*",
                     help="layer indices for real/knockoff feature histograms (default: none)")
    sub.add_argument("--out", type=Path, default=Path("reports"), help="histogram directory (default: %(default)s)")
    sub.add_argument("--examples", type=int, default=256,
                     help="examples per histogram (default: %(default)s)")
    return parser


_FLAG_KEYS = {
    "name": "name", "arch": "arch", "dataset": "dataset", "seed": "seed",
    "pretrain_lr": "pretrain.lr", "pretrain_epochs": "pretrain.epochs", "pretrain_batch": "pretrain.batch",
    "pretrain_augment": "pretrain.augment",
    "finetune_lr": "finetune.lr", "finetune_epochs": "finetune.epochs", "finetune_batch": "finetune.batch",
    "finetune_augment": "finetune.augment",
    "control": "selection.control", "bias": "selection.bias", "detach_control": "selection.detach_control",
    "selection_lr": "selection.lr", "selection_epochs": "selection.epochs", "selection_batch": "selection.batch",
    "ridge": "knockoff.ridge", "clip": "knockoff.clip",
    "rate": "prune.rate", "criterion": "prune.criterion", "bn_scale": "prune.bn_scaled",
}
_SWITCHES = {"pretrain_augment", "finetune_augment", "bias", "detach_control", "clip", "bn_scale"}


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    """Config file values overlaid with every flag that was given."""
    overrides: Dict[str, Any] = {}
    for attr, key in _FLAG_KEYS.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = _on_off(value) if attr in _SWITCHES else value
    if getattr(args, "max_examples", None) is not None:
        for section in ("pretrain", "selection", "finetune"):
            overrides[f"{section}.max_examples"] = args.max_examples
    if getattr(args, "seed", None) is None and getattr(args, "seeds", None):
        overrides["seed"] = args.seeds[0]
    return ExperimentConfig.from_file(args.config, overrides)


def _emit(payload: Any) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True, default=str))


def _pipeline(args, config: ExperimentConfig) -> ScopPipeline:
    return ScopPipeline(config, ArtifactStore(args.artifact_dir), args.data_dir, force=args.force)


# -- commands -------------------------------------------------------------------

def cmd_pretrain(args, config: ExperimentConfig) -> int:
    _, accuracy, key = _pipeline(args, config).pretrain()
    _emit({"stage": "pretrain", "accuracy": accuracy, "artifact": key})
    return 0


def cmd_knockoff(args, config: ExperimentConfig) -> int:
    knock = _pipeline(args, config).knockoffs()
    _emit({"stage": "knockoff", "count": int(knock.images.shape[0]), "ridge": knock.model.ridge,
           "mean_s": float(knock.model.s.mean()), "psd_margin": knock.model.psd_margin(), "artifact": knock.key})
    return 0


def cmd_select(args, config: ExperimentConfig) -> int:
    pipeline = _pipeline(args, config)
    net, _, pretrain_key = pipeline.pretrain()
    state, key = pipeline.select(net, pretrain_key)
    _emit({"stage": "select", "artifact": key, "constraint_gap": state.constraint_gap(),
           "mean_beta": {str(i): float(state.beta(i).mean()) for i in state.layers}})
    return 0


def _planned(pipeline: ScopPipeline):
    net, baseline, pretrain_key = pipeline.pretrain()
    state, upstream = None, [pretrain_key]
    if pipeline.config.prune.criterion is Criterion.SCOP:
        state, select_key = pipeline.select(net, pretrain_key)
        upstream.append(select_key)
    plan, plan_key = pipeline.plan(net, state, upstream)
    return net, baseline, plan, plan_key


def cmd_prune(args, config: ExperimentConfig) -> int:
    pipeline = _pipeline(args, config)
    net, _, plan, plan_key = _planned(pipeline)
    summary = reduction_summary(net, apply_plan(net, plan))
    _emit({"stage": "prune", "artifact": plan_key, "plan": plan.model_dump(), **summary.model_dump()})
    return 0


def cmd_finetune(args, config: ExperimentConfig) -> int:
    pipeline = _pipeline(args, config)
    net, _, plan, plan_key = _planned(pipeline)
    _, accuracy, key = pipeline.finetune(apply_plan(net, plan), plan_key)
    _emit({"stage": "finetune", "accuracy": accuracy, "artifact": key})
    return 0


def cmd_eval(args, config: ExperimentConfig) -> int:
    pipeline = _pipeline(args, config)
    if args.checkpoint is not None:
        net, _ = load_network(args.checkpoint)
    elif args.stage == "pretrain":
        net = pipeline.pretrain()[0]
    else:
        net, _, plan, plan_key = _planned(pipeline)
        net = pipeline.finetune(apply_plan(net, plan), plan_key)[0]
    _, test_set = pipeline.data()
    _emit({"stage": "eval", "accuracy": evaluate(net, test_set), "examples": len(test_set)})
    return 0


def _seeds(args, config: ExperimentConfig) -> List[int]:
    return list(args.seeds) if getattr(args, "seeds", None) else [config.seed]


def cmd_run(args, config: ExperimentConfig) -> int:
    store = ArtifactStore(args.artifact_dir)
    for seed in _seeds(args, config):
        result = run_scop(config.with_overrides({"seed": seed}), store, args.data_dir, args.metrics, args.force)
        _emit(result.record.model_dump(mode="json"))
    return 0


def cmd_ablate(args, config: ExperimentConfig) -> int:
    records = ablate(config, _seeds(args, config), ArtifactStore(args.artifact_dir), args.data_dir,
                     args.metrics, args.force)
    print(format_table(median_summary(records)))
    return 0


def cmd_sweep(args, config: ExperimentConfig) -> int:
    records = sweep_rates(config, args.rates, not args.no_finetune, ArtifactStore(args.artifact_dir),
                          args.data_dir, args.metrics, args.force)
    print(format_table(median_summary(records)))
    return 0


def cmd_diagnose(args, config: Optional[ExperimentConfig]) -> int:
    rows = []
    for control in args.controls:
        for seed in args.seeds:
            result = planted_diagnostic(seed, ControlMode(control), epochs=args.epochs, lr=args.lr, n=args.examples)
            rows.append({"seed": seed, "control": control, "precision": result.precision,
                         "swap_discrepancy": result.swap_discrepancy})
    medians = {control: statistics.median(r["precision"] for r in rows if r["control"] == control)
               for control in args.controls}
    _emit({"runs": rows, "median_precision": medians})
    return 0


def cmd_report(args, config: ExperimentConfig) -> int:
    print(format_table(median_summary(read_metrics(args.metrics))))
    if args.histograms is None:
        return 0
    pipeline = _pipeline(args, config)
    net = pipeline.pretrain()[0]
    knock = pipeline.knockoffs()
    train_set, _ = pipeline.data()
    count = min(args.examples, len(train_set))
    layers = args.histograms or [net.mixing_point(i) for i in net.prunable_indices]
    paths = emit_feature_histograms(net, train_set.images[:count], knock.images[:count], layers, args.out)
    distances = {}
    for layer, path in zip(layers, paths):
        table = read_histogram_csv(path)
        distances[str(layer)] = total_variation(table["real_count"], table["knockoff_count"])
    _emit({"histograms": [str(p) for p in paths], "total_variation": distances})
    return 0


COMMANDS: Dict[str, Callable[..., int]] = {
    "pretrain": cmd_pretrain,
    "knockoff": cmd_knockoff,
    "select": cmd_select,
    "prune": cmd_prune,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "run": cmd_run,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "diagnose": cmd_diagnose,
    "report": cmd_report,
}


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc.detail}", file=sys.stderr)
        return exc.exit_code
    except SystemExit as exc:
        return int(exc.code or 0)

    setup_logging(args.log_level)
    try:
        if args.command == "diagnose":
            _emit({"command": "diagnose", "seeds": args.seeds, "controls": args.controls,
                   "epochs": args.epochs, "lr": args.lr, "examples": args.examples})
            return cmd_diagnose(args, None)
        config = resolve_config(args)
        _emit({"command": args.command, "config": config.model_dump(mode="json")})
        return COMMANDS[args.command](args, config)
    except ValidationError as exc:
        print(f"error: invalid configuration\n{exc}", file=sys.stderr)
        return 2
    except ScopError as exc:
        if settings.debug:
            logger.exception(exc.detail)
        print(f"error: {exc.detail}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        if settings.debug:
            logger.exception(str(exc))
        print(f"error: {exc}", file=sys.stderr)
        return 2
