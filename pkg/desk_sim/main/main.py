from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

from ..api import ConfigError, CropSpec, GridSpec, SimError, error_record, json_line
from .checkpoint import load_model_state
from .config import RuntimeSettings, SimConfig, get_runtime_settings, load_config
from .dataset import ManifestDataset
from .evaluation import build_bank, knn_classify, linear_probe, result_record
from .geometry import relative_positions_b
from .gradcheck import composite_grad_check
from .log import LOG, set_log_level, setup_default_logging
from .model import SimModel
from .synthetic import generate_synthetic
from .trainer import Trainer

Command = Callable[[argparse.Namespace, SimConfig, RuntimeSettings], int]

DEFAULT_RUN_DIR = "runs/sim"
DEFAULT_DATA_DIR = "data"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sim", description="Desk-scale Siamese image modeling."
    )
    commands = parser.add_subparsers(dest="command", metavar="command", required=True)

    def command(name: str, summary: str) -> argparse.ArgumentParser:
        sub = commands.add_parser(name, help=summary)
        sub.add_argument("--config", type=Path, help="flat key = value configuration file")
        sub.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="configuration override, applied after the file (repeatable)",
        )
        sub.add_argument("--profile", help="named base profile, e.g. imagenet")
        sub.add_argument("--out", type=Path, help="output path")
        return sub

    pretrain = command("pretrain", "train a model")
    pretrain.add_argument("--preset", help="named ablation preset (a-i, weights-*)")
    pretrain.add_argument("--checkpoint", type=Path, help="checkpoint to resume from")

    for name, summary in (
        ("eval-knn", "kNN accuracy of frozen backbone features"),
        ("eval-linear", "linear probe accuracy of frozen backbone features"),
    ):
        sub = command(name, summary)
        sub.add_argument("--checkpoint", type=Path, help="checkpoint to evaluate")

    command("inspect-geometry", "dump view-b token positions as CSV")

    grad = command("grad-check", "finite-difference check of the training gradient")
    grad.add_argument("--tolerance", type=float, default=1e-3)

    command("gen-synthetic", "write the procedural shapes dataset")

    return parser


def _emit(out: Optional[Path], text: str):
    if out is None:
        sys.stdout.write(text)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)


def _load_model(config: SimConfig, checkpoint: Optional[Path]) -> SimModel:
    model = SimModel(config.model, log_base=config.geometry.log_base)
    if checkpoint is not None:
        load_model_state(checkpoint, model)
    else:
        LOG.warning("No checkpoint given, evaluating a randomly initialized model")
    return model


def cmd_pretrain(args: argparse.Namespace, config: SimConfig, settings: RuntimeSettings) -> int:
    out_dir = args.out or Path(DEFAULT_RUN_DIR)
    dataset = ManifestDataset(Path(config.data.train_dir))

    trainer = Trainer(
        SimModel(config.model, log_base=config.geometry.log_base),
        config,
        out_dir,
        threads=settings.threads,
        queue_size=settings.queue_size,
    )
    result = trainer.fit(dataset, resume=args.checkpoint)

    sys.stdout.write(
        json_line(
            {
                "checkpoint": str(result.checkpoint),
                "log": str(result.log_path),
                "steps": result.steps,
                "epoch_losses": result.epoch_losses,
                "collapse_trips": result.collapse_trips,
            }
        )
    )
    return 0


def _eval(args: argparse.Namespace, config: SimConfig, metric: str) -> int:
    model = _load_model(config, args.checkpoint)
    batch = config.eval.batch_size

    train_bank = build_bank(model, ManifestDataset(Path(config.data.train_dir)), batch)
    test_bank = build_bank(model, ManifestDataset(Path(config.data.test_dir)), batch)

    checkpoint = str(args.checkpoint) if args.checkpoint else None

    if metric == "knn":
        value = knn_classify(
            train_bank, test_bank, config.eval.knn_k, config.eval.knn_temperature
        )
        record = result_record(
            checkpoint,
            metric,
            value,
            k=config.eval.knn_k,
            temperature=config.eval.knn_temperature,
        )
    else:
        value = linear_probe(
            train_bank,
            test_bank,
            config.eval.probe_epochs,
            config.eval.probe_lr,
            config.eval.probe_weight_decay,
            config.eval.probe_feature_norm,
        )
        record = result_record(checkpoint, metric, value, epochs=config.eval.probe_epochs)

    LOG.info("%s accuracy: %.4f", metric, value)
    _emit(args.out, json_line(record))
    return 0


def cmd_eval_knn(args: argparse.Namespace, config: SimConfig, settings: RuntimeSettings) -> int:
    return _eval(args, config, "knn")


def cmd_eval_linear(
    args: argparse.Namespace, config: SimConfig, settings: RuntimeSettings
) -> int:
    return _eval(args, config, "linear")


def _number(value: float) -> str:
    return format(float(value), ".10g")


def geometry_csv(config: SimConfig) -> str:
    geo = config.geometry
    grid = GridSpec(geo.grid[0], geo.grid[-1])

    positions = relative_positions_b(CropSpec(*geo.crop_a), CropSpec(*geo.crop_b), grid)

    lines = ["u,v,pos_h,pos_w"]
    for index, (pos_h, pos_w) in enumerate(positions):
        u, v = divmod(index, grid.n_w)
        lines.append(f"{u + 1},{v + 1},{_number(pos_h)},{_number(pos_w)}")

    return "\n".join(lines) + "\n"


def cmd_inspect_geometry(
    args: argparse.Namespace, config: SimConfig, settings: RuntimeSettings
) -> int:
    _emit(args.out, geometry_csv(config))
    return 0


def cmd_grad_check(args: argparse.Namespace, config: SimConfig, settings: RuntimeSettings) -> int:
    result = composite_grad_check(
        norm_kind=config.model.norm_kind,
        loss=config.loss,
        seed=config.train.seed,
        tol=args.tolerance,
    )

    verdict = "PASS" if result.passed else "FAIL"
    sys.stdout.write(f"max relative error {result.max_rel_error:.3e} {verdict}\n")

    if args.out is not None:
        _emit(args.out, json_line(result))

    return 0 if result.passed else 1


def cmd_gen_synthetic(
    args: argparse.Namespace, config: SimConfig, settings: RuntimeSettings
) -> int:
    data = config.data
    train_dir, test_dir = generate_synthetic(
        args.out or Path(DEFAULT_DATA_DIR),
        data.synthetic_train,
        data.synthetic_test,
        data.synthetic_classes,
        data.synthetic_size,
        data.synthetic_seed,
    )
    sys.stdout.write(json_line({"train": str(train_dir), "test": str(test_dir)}))
    return 0


COMMANDS = {
    "pretrain": cmd_pretrain,
    "eval-knn": cmd_eval_knn,
    "eval-linear": cmd_eval_linear,
    "inspect-geometry": cmd_inspect_geometry,
    "grad-check": cmd_grad_check,
    "gen-synthetic": cmd_gen_synthetic,
}  # type: Dict[str, Command]


def run(argv: Sequence[str]) -> int:
    """
    Execute one command and return its exit status: 0 on success, 2 for
    usage or configuration errors, 1 for any other failure. Errors are
    reported on standard error as one JSON object.
    """
    parser = build_parser()

    try:
        args = parser.parse_args(list(argv))
    except SystemExit as ex:
        return 0 if ex.code in (0, None) else 2

    settings = get_runtime_settings()
    set_log_level(settings.log_level)

    try:
        config = load_config(
            args.config, args.overrides, args.profile, getattr(args, "preset", None)
        )
        return COMMANDS[args.command](args, config, settings)

    except ConfigError as ex:
        sys.stderr.write(error_record(ex))
        return 2

    except SimError as ex:
        LOG.debug("Command failed", exc_info=True)
        sys.stderr.write(error_record(ex))
        return 1


def main(argv: Optional[List[str]] = None):
    setup_default_logging()

    sys.exit(run(sys.argv[1:] if argv is None else argv))
