"""Command-line entry point: dataset generation, training arms, evaluation and the study protocols."""

import argparse
import logging
import sys
import typing
from pathlib import Path
from typing import Callable, Dict, Optional, Sequence, Set, Tuple, Type

import numpy as np
from pydantic import BaseModel, ValidationError

from backend.services.autodiff import load_checkpoint, save_checkpoint
from backend.services.dataset_service import (
    DatasetService,
    draw_polygon,
    image_to_pgm,
    read_pgm,
    telescopic_subset,
    write_pgm,
)
from backend.services.evaluation_service import EvaluationService
from backend.services.report_service import ReportService
from backend.services.star_geometry import contour_to_record
from backend.services.training_service import TrainedModel, TrainingService
from shared.config import (
    CHECKPOINT_FILE,
    RESOLVED_CONFIG_FILE,
    format_config_text,
    load_config_file,
    setup_logging,
)
from shared.exceptions import ConfigError, EdpcnnError
from shared.models import (
    AblateConfig,
    EvalConfig,
    GenDataConfig,
    JitterConfig,
    RunConfig,
    SegmentConfig,
    Split,
)

logger = logging.getLogger(__name__)


# Configuration resolution
def _is_list_field(annotation) -> bool:
    if typing.get_origin(annotation) is typing.Union:
        return any(_is_list_field(a) for a in typing.get_args(annotation))
    return typing.get_origin(annotation) is list


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _show_default(value) -> str:
    if isinstance(value, list):
        return ",".join(str(getattr(v, "value", v)) for v in value)
    return str(getattr(value, "value", value))


def add_model_flags(parser: argparse.ArgumentParser, model: Type[BaseModel]) -> None:
    """One string-valued flag per model field; parsing is left to the model."""
    group = parser.add_argument_group("settings (also accepted as key=value lines in --config)")
    for name, field in model.model_fields.items():
        group.add_argument(
            _flag(name),
            dest=name,
            default=None,
            metavar="LIST" if _is_list_field(field.annotation) else "VALUE",
            help=f"(default: {_show_default(field.default)})",
        )


def resolve_config(model: Type[BaseModel], args: argparse.Namespace) -> Tuple[BaseModel, Set[str]]:
    """Model defaults < --config file < command-line flags. Returns the config and the keys set explicitly."""
    values: Dict[str, object] = {}
    if args.config:
        values.update(load_config_file(Path(args.config)))
    for name in model.model_fields:
        flag_value = getattr(args, name, None)
        if flag_value is not None:
            values[name] = flag_value

    parsed: Dict[str, object] = {}
    for key, value in values.items():
        if value == "":
            continue
        field = model.model_fields.get(key)
        if field is not None and _is_list_field(field.annotation) and isinstance(value, str):
            value = [part.strip() for part in value.split(",") if part.strip()]
        parsed[key] = value

    try:
        cfg = model(**parsed)
    except ValidationError as e:
        details = "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or '<config>'}: {err['msg']}" for err in e.errors()
        )
        raise ConfigError(f"invalid settings: {details}") from e
    return cfg, set(parsed)


def write_resolved_config(cfg: BaseModel, directory: Path) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / RESOLVED_CONFIG_FILE
    path.write_text(format_config_text(cfg.model_dump(mode="json")), encoding="utf-8")
    return path


def _checkpoint_path(cfg: RunConfig, checkpoint: Optional[str]) -> Path:
    return Path(checkpoint) if checkpoint else Path(cfg.output_dir) / CHECKPOINT_FILE


# Commands
def cmd_gen_data(cfg: GenDataConfig, explicit: Set[str], quiet: bool) -> int:
    service = DatasetService(cfg.data_dir)
    manifest = service.generate(cfg.seed, cfg.n_train, cfg.n_val, cfg, cfg.workers)
    write_resolved_config(cfg, Path(cfg.data_dir))
    print(f"wrote {len(manifest.entries)} samples to {cfg.data_dir}")
    return 0


def cmd_train(cfg: RunConfig, explicit: Set[str], quiet: bool) -> int:
    train, val = DatasetService(cfg.data_dir).load_splits()
    train = telescopic_subset(train, cfg.train_size, cfg.seed)
    output_dir = Path(cfg.output_dir)
    write_resolved_config(cfg, output_dir)

    model = TrainingService(cfg, progress=not quiet).train(train, val, cfg.arm)
    checkpoint = output_dir / CHECKPOINT_FILE
    save_checkpoint(checkpoint, model.checkpoint_arrays())
    if model.log.iterations:
        ReportService(output_dir).write_train_log(model.log)
    if model.log.best_dice is None:
        print(f"[{cfg.arm.value}] no training iterations; initial checkpoint written to {checkpoint}")
    else:
        print(
            f"[{cfg.arm.value}] best val dice {model.log.best_dice:.4f} at iteration "
            f"{model.log.best_iteration}; checkpoint {checkpoint}"
        )
    return 0


def cmd_eval(cfg: EvalConfig, explicit: Set[str], quiet: bool) -> int:
    model = TrainedModel.from_checkpoint(load_checkpoint(_checkpoint_path(cfg, cfg.checkpoint)))
    arm = cfg.arm if "arm" in explicit else model.arm
    samples = DatasetService(cfg.data_dir).load_split(Split(cfg.split))
    report = EvaluationService(cfg).evaluate(model.seg, samples, arm)

    output_dir = Path(cfg.output_dir)
    write_resolved_config(cfg, output_dir)
    path = ReportService(output_dir).write_report(report, f"eval-{Split(cfg.split).value}.json")
    print(
        f"[{arm.value}] dice {report.dice_mean:.4f} ({report.dice_std:.4f}) "
        f"assd {report.assd_mean} hd {report.hd_mean} failures {report.failures}; report {path}"
    )
    return 0


def cmd_segment(cfg: SegmentConfig, explicit: Set[str], quiet: bool) -> int:
    if cfg.image is None:
        raise ConfigError("segment needs --image PATH")
    if cfg.center is None:
        raise ConfigError("segment needs the object center as --center x,y")
    model = TrainedModel.from_checkpoint(load_checkpoint(_checkpoint_path(cfg, cfg.checkpoint)))
    image = read_pgm(Path(cfg.image)).astype(np.float64) / 255.0

    evaluator = EvaluationService(cfg)
    center = (cfg.center[0], cfg.center[1])
    star = evaluator.star_for(center)
    output_map = evaluator.predict_maps(model.seg, [image])[0]
    contour = evaluator.decode_contours(output_map[None], [star])[0]
    record = contour_to_record(star, contour)

    output_dir = Path(cfg.output_dir)
    write_resolved_config(cfg, output_dir)
    contour_path = ReportService(output_dir).write_contour(record)
    overlay_path = output_dir / "overlay.pgm"
    write_pgm(overlay_path, draw_polygon(image_to_pgm(image), record.polygon))
    print(f"contour written to {contour_path}; overlay {overlay_path}")
    return 0


def cmd_ablate(cfg: AblateConfig, explicit: Set[str], quiet: bool) -> int:
    train, val = DatasetService(cfg.data_dir).load_splits()
    output_dir = Path(cfg.output_dir)
    write_resolved_config(cfg, output_dir)
    table = TrainingService(cfg, progress=not quiet).ablate(train, val, cfg)
    paths = ReportService(output_dir).write_ablation(table)
    print(f"ablation: {len(table)} rows written to {paths['csv']}")
    return 0


def cmd_jitter(cfg: JitterConfig, explicit: Set[str], quiet: bool) -> int:
    model = TrainedModel.from_checkpoint(load_checkpoint(_checkpoint_path(cfg, cfg.checkpoint)))
    val = DatasetService(cfg.data_dir).load_split(Split.VAL)
    arm = cfg.arm if "arm" in explicit else model.arm
    output_dir = Path(cfg.output_dir)
    write_resolved_config(cfg, output_dir)
    table = TrainingService(cfg, progress=not quiet).jitter_eval(model.seg, val, cfg.fractions, cfg.seeds, arm)
    paths = ReportService(output_dir).write_jitter(table)
    print(f"jitter: {len(table)} rows written to {paths['csv']}")
    return 0


Handler = Callable[[BaseModel, Set[str], bool], int]

COMMANDS: Dict[str, Tuple[Type[BaseModel], Handler, str]] = {
    "gen-data": (GenDataConfig, cmd_gen_data, "generate the synthetic star-convex blob dataset"),
    "train": (RunConfig, cmd_train, "train one arm (edpcnn, unet, unet+dp) and keep the best checkpoint"),
    "eval": (EvalConfig, cmd_eval, "score a checkpoint on a dataset split"),
    "segment": (SegmentConfig, cmd_segment, "contour one PGM image around a given center"),
    "ablate": (AblateConfig, cmd_ablate, "train every arm on telescopic training-set sizes"),
    "jitter": (JitterConfig, cmd_jitter, "validation Dice under center jitter"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="flat key=value settings file")
    common.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR (default: EDPCNN_LOG_LEVEL or INFO)")
    common.add_argument("--quiet", action="store_true", help="hide progress bars")

    parser = argparse.ArgumentParser(
        prog="edpcnn",
        description="Segmentation network trained end to end through a dynamic-programming contour solver.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (model, _, help_text) in COMMANDS.items():
        command = sub.add_parser(
            name, parents=[common], help=help_text, description=help_text,
        )
        add_model_flags(command, model)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    model, handler, _ = COMMANDS[args.command]
    try:
        cfg, explicit = resolve_config(model, args)
        return handler(cfg, explicit, args.quiet)
    except EdpcnnError as e:
        logger.error(f"{args.command} failed: {str(e)}")
        return e.exit_code
    except ValueError as e:
        logger.error(f"{args.command} failed: {str(e)}")
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
