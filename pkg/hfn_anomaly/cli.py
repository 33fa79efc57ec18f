import os
import sys
import argparse
from pathlib import Path
from typing import Optional
from collections.abc import Sequence

import pandas as pd
from loguru import logger
from pydantic import ValidationError

from .utils import log, escape_tag
from .model import HFN, load_checkpoint, save_checkpoint, checkpoint_categories, checkpoint_normalizer
from .config import RunConfig, AblationFlags
from .synth import synth_schema, synth_generate_with_truth
from .models import DetectionReport
from .trainer import ABLATION_VARIANTS, train, run_ablation_matrix
from .exception import (
    UsageError,
    HFNException,
    StorageError,
    InvalidConfigError,
    SchemaMismatchError,
    DataValidationError,
)
from .detector import (
    detect,
    localize,
    calibrate,
    rank_sensors,
    export_scores,
    export_graph_range,
)
from .dataset import (
    SeriesFrame,
    CategoryEncoder,
    load_csv,
    write_csv,
    load_schema,
    save_schema,
    fit_normalizer,
    fit_categories,
    apply_normalizer,
    split_validation,
)

LOG_FORMAT = "<g>{time:MM-DD HH:mm:ss}</g> [<lvl>{level}</lvl>] {message}"


def _range(text: str) -> tuple[int, int]:
    try:
        start, stop = (int(part) for part in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected START:STOP, got {text!r}") from None
    return start, stop


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON RunConfig document")
    common.add_argument("--output-dir", type=Path, help="defaults to $HFN_OUTPUT_DIR or ./hfn-output")
    common.add_argument("--seed", type=int)
    common.add_argument("--log-level", default=os.environ.get("HFN_LOG_LEVEL", "INFO"))

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--train-csv", type=Path)
    model.add_argument("--test-csv", type=Path)
    model.add_argument("--schema", type=Path)
    model.add_argument("--window", type=int)
    model.add_argument("--heads", type=int)
    model.add_argument("--mask-p", type=float)
    model.add_argument("--max-epochs", type=int)

    parser = argparse.ArgumentParser(prog="hfn", description="heterogeneous feature network anomaly detection")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", parents=[common], help="write a seeded synthetic train/test pair")

    p = sub.add_parser("train", parents=[common, model], help="train on normal data and write a checkpoint")
    p.add_argument(
        "--ablate", action="append", default=[], metavar="TAG", help="repeatable, e.g. --ablate=-NE, --ablate=-DFS-CFS"
    )

    p = sub.add_parser("detect", parents=[common, model], help="score a test set with a checkpoint")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--error-basis", choices=("error", "prediction"))
    p.add_argument("--export-scores", action="store_true")
    p.add_argument("--export-graph", type=_range, metavar="START:STOP")
    p.add_argument("--workers", type=int)

    p = sub.add_parser("localize", parents=[common], help="rank sensors by threshold exceedances in a range")
    p.add_argument("--report", type=Path)
    p.add_argument("--range", dest="time_range", type=_range, required=True, metavar="START:STOP")
    p.add_argument("--threshold", type=float)

    p = sub.add_parser("ablate", parents=[common, model], help="train and evaluate every ablation variant")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--variants", nargs="+", metavar="VARIANT")
    return parser


def load_run_config(args: argparse.Namespace) -> RunConfig:
    """读取 JSON 配置并叠加命令行覆盖项"""
    try:
        config = RunConfig.load(args.config) if args.config else RunConfig()
    except OSError as e:
        raise UsageError(f"cannot read config {args.config}: {e}") from e
    except ValidationError as e:
        raise InvalidConfigError(f"invalid config {args.config}:\n{e}") from e

    data = config.model_dump()
    model = data["train"]["model"]
    overrides = {
        "output_dir": args.output_dir,
        "seed": args.seed,
        "train_csv": getattr(args, "train_csv", None),
        "test_csv": getattr(args, "test_csv", None),
        "schema_path": getattr(args, "schema", None),
        "checkpoint": getattr(args, "checkpoint", None),
    }
    data.update({k: v for k, v in overrides.items() if v is not None})
    for flag, key in (("window", "window"), ("heads", "heads"), ("mask_p", "mask_p")):
        if getattr(args, flag, None) is not None:
            model[key] = getattr(args, flag)
    if getattr(args, "max_epochs", None) is not None:
        data["train"]["max_epochs"] = args.max_epochs
    if getattr(args, "ablate", None):
        try:
            model["ablation"] = AblationFlags.from_tags(args.ablate).model_dump()
        except ValueError as e:
            raise UsageError(str(e)) from e
    detector = data["detector"]
    for flag in ("error_basis", "workers"):
        if getattr(args, flag, None) is not None:
            detector[flag] = getattr(args, flag)
    if getattr(args, "export_scores", False):
        detector["export_scores"] = True
    if getattr(args, "export_graph", None) is not None:
        detector["export_graph"] = args.export_graph
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise InvalidConfigError(f"invalid option:\n{e}") from e


def _require(path: Optional[Path], what: str) -> Path:
    if path is None:
        raise UsageError(f"no {what} given")
    if not path.is_file():
        raise UsageError(f"{what} not found: {path}")
    return path


def _output_dir(config: RunConfig) -> Path:
    try:
        config.output_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise StorageError(f"cannot create output directory {config.output_dir}: {e}") from e
    return config.output_dir


def _write_json(path: Path, text: str) -> None:
    try:
        path.write_text(text + "\n", encoding="utf-8")
    except OSError as e:
        raise StorageError(f"cannot write {path}: {e}") from e


def _echo(line: str) -> None:
    sys.stdout.write(line + "\n")


def _default(config: RunConfig, value: Optional[Path], name: str) -> Path:
    return value if value is not None else config.output_dir / name


def cmd_synth(config: RunConfig) -> int:
    out = _output_dir(config)
    train, test, truth = synth_generate_with_truth(config.synth)
    write_csv(train, out / "train.csv", config.label_column or "label")
    write_csv(test, out / "test.csv", config.label_column or "label")
    try:
        save_schema(synth_schema(config.synth), out / "schema.json")
    except OSError as e:
        raise StorageError(f"cannot write {out / 'schema.json'}: {e}") from e
    _write_json(out / "truth.json", truth.model_dump_json(indent=2))

    assert test.labels is not None
    rate = float(test.labels.mean())
    log("SUCCESS", f"synthetic data written to <y>{escape_tag(str(out))}</y>")
    _echo(f"train rows: {train.T}  test rows: {test.T}  variables: {train.L}")
    _echo(f"anomalous rows: {int(test.labels.sum())} ({rate:.2%}) in {len(truth.segments)} segment(s)")
    return 0


def _load_training_data(config: RunConfig) -> tuple[SeriesFrame, Optional[CategoryEncoder]]:
    schema_path = _require(_default(config, config.schema_path, "schema.json"), "schema")
    train_csv = _require(_default(config, config.train_csv, "train.csv"), "train CSV")
    schema = load_schema(schema_path)
    encoder = fit_categories(train_csv, schema)
    frame = load_csv(
        train_csv,
        schema,
        config.label_column,
        timestamp_column=config.timestamp_column,
        forward_fill=config.forward_fill,
        encoder=encoder,
    )
    return frame, encoder


def cmd_train(config: RunConfig) -> int:
    frame, encoder = _load_training_data(config)
    out = _output_dir(config)
    checkpoint = _default(config, config.checkpoint, "checkpoint.json")

    normalizer = fit_normalizer(frame)
    train_part, valid_part = split_validation(
        apply_normalizer(frame, normalizer), config.valid_fraction, config.train.model.window
    )
    model, report = train(train_part, valid_part, config.train)
    calibrations = {
        basis: calibrate(model, valid_part, basis, workers=config.detector.workers)  # type: ignore
        for basis in ("error", "prediction")
    }
    save_checkpoint(
        checkpoint, model, normalizer=normalizer, calibrations=calibrations, train=config.train, categories=encoder
    )
    report.checkpoint = str(checkpoint)
    _write_json(out / "train_report.json", report.model_dump_json(indent=2))

    log("SUCCESS", f"checkpoint written to <y>{escape_tag(str(checkpoint))}</y>")
    _echo(f"epochs: {report.epochs}  stop: {report.stop_reason} ({report.stop_detail})")
    _echo(f"best epoch: {report.best_epoch}  best valid loss: {report.best_valid_loss}")
    _echo(f"final train loss: {report.loss_history[-1]:.6g}  ablation: {config.train.model.ablation.label}")
    return 0


def _check_header(path: Path, model: HFN, config: RunConfig) -> None:
    try:
        header = [str(c).strip() for c in pd.read_csv(path, nrows=0, encoding="utf-8").columns]
    except pd.errors.EmptyDataError as e:
        raise DataValidationError(f"{path} is empty") from e
    except (OSError, UnicodeDecodeError) as e:
        raise StorageError(f"cannot read {path}: {e}") from e
    skip = {config.label_column, config.timestamp_column}
    found = [c for c in header if c not in skip]
    if found != model.schema.names:
        raise SchemaMismatchError(model.schema.names, found)


def cmd_detect(config: RunConfig) -> int:
    checkpoint_path = _require(_default(config, config.checkpoint, "checkpoint.json"), "checkpoint")
    test_csv = _require(_default(config, config.test_csv, "test.csv"), "test CSV")
    out = _output_dir(config)

    model, checkpoint = load_checkpoint(checkpoint_path)
    _check_header(test_csv, model, config)
    frame = load_csv(
        test_csv,
        model.schema,
        config.label_column,
        timestamp_column=config.timestamp_column,
        forward_fill=config.forward_fill,
        encoder=checkpoint_categories(checkpoint),
    )
    normalizer = checkpoint_normalizer(checkpoint)
    if normalizer is not None:
        frame = apply_normalizer(frame, normalizer)
    basis = config.detector.error_basis
    if basis not in checkpoint.calibrations:
        raise DataValidationError(f"checkpoint {checkpoint_path} has no {basis!r} calibration")

    report = detect(model, checkpoint.calibrations[basis], frame, config.detector, seed=config.seed)
    _write_json(out / "report.json", report.model_dump_json(indent=2))
    if config.detector.export_scores:
        export_scores(report, out)
    if config.detector.export_graph is not None:
        start, stop = config.detector.export_graph
        export_graph_range(model, frame, start, stop, out / "graph")

    log("SUCCESS", f"detection report written to <y>{escape_tag(str(out / 'report.json'))}</y>")
    if not report.labeled:
        _echo(f"scored {len(report.score)} timestamp(s); no labels, metrics omitted")
        return 0
    _echo(f"precision: {report.precision:.4f}  recall: {report.recall:.4f}  f1: {report.f1:.4f}")
    _echo(f"threshold: {report.threshold:.6g}  tp={report.tp} fp={report.fp} fn={report.fn} tn={report.tn}")
    return 0


def cmd_localize(
    config: RunConfig, time_range: tuple[int, int], report_path: Optional[Path], threshold: Optional[float] = None
) -> int:
    path = _require(_default(config, report_path, "report.json"), "detection report")
    try:
        report = DetectionReport.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise DataValidationError(f"invalid detection report {path}:\n{e}") from e
    threshold = threshold if threshold is not None else report.threshold
    if threshold is None:
        raise UsageError("report has no threshold (unlabeled test set); pass --threshold")

    start, stop = time_range
    counts = localize(report.sensor_scores, threshold, start, stop, offset=report.offset)
    ranking = rank_sensors(counts, report.variables)
    out = _output_dir(config)
    table = pd.DataFrame([r.model_dump() for r in ranking])
    table.insert(0, "rank", range(1, len(ranking) + 1))
    try:
        table.to_csv(out / "localize.csv", index=False, lineterminator="\n")
    except OSError as e:
        raise StorageError(f"cannot write {out / 'localize.csv'}: {e}") from e

    log("SUCCESS", f"top sensor in [{start}, {stop}): <y>{escape_tag(ranking[0].name)}</y> ({ranking[0].count})")
    _echo(f"{'rank':>4}  {'sensor':<16} {'count':>6}")
    for rank, entry in enumerate(ranking, 1):
        _echo(f"{rank:>4}  {entry.name:<16} {entry.count:>6}")
    return 0


def cmd_ablate(config: RunConfig, seeds: Sequence[int], variants: Optional[Sequence[str]]) -> int:
    out = _output_dir(config)
    if config.train_csv is None and config.test_csv is None:
        train_frame, test_frame, _ = synth_generate_with_truth(config.synth)
        log("INFO", "no CSV paths configured, running the ablation matrix on synthetic data")
    else:
        train_frame, encoder = _load_training_data(config)
        test_csv = _require(config.test_csv, "test CSV")
        test_frame = load_csv(
            test_csv,
            train_frame.schema,
            config.label_column,
            timestamp_column=config.timestamp_column,
            forward_fill=config.forward_fill,
            encoder=encoder,
        )
    normalizer = fit_normalizer(train_frame)
    train_part, valid_part = split_validation(
        apply_normalizer(train_frame, normalizer), config.valid_fraction, config.train.model.window
    )
    test_frame = apply_normalizer(test_frame, normalizer)

    names = list(variants) if variants else list(ABLATION_VARIANTS)
    unknown = [n for n in names if n not in ABLATION_VARIANTS]
    if unknown:
        raise UsageError(f"unknown variant(s) {unknown}, expected {list(ABLATION_VARIANTS)}")
    rows = run_ablation_matrix(
        train_part, valid_part, test_frame, config.train, seeds=seeds, variants=names, detector=config.detector
    )
    try:
        pd.DataFrame(rows).to_csv(out / "ablation.csv", index=False, float_format="%.6g", lineterminator="\n")
    except OSError as e:
        raise StorageError(f"cannot write {out / 'ablation.csv'}: {e}") from e

    log("SUCCESS", f"ablation table written to <y>{escape_tag(str(out / 'ablation.csv'))}</y>")
    for row in rows:
        if row["seed"] == "mean":
            _echo(f"{row['variant']:<10} F1={row['f1']:.4f}")
    return 0


def setup_logging(level: str) -> None:
    logger.remove()
    logger.add(sys.stderr, level=level.upper(), format=LOG_FORMAT, colorize=None, diagnose=False)


def run(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        setup_logging(args.log_level)
    except ValueError:
        log("ERROR", f"unknown log level {escape_tag(args.log_level)!r}")
        return UsageError.exit_code
    try:
        config = load_run_config(args)
        if args.command == "synth":
            return cmd_synth(config)
        if args.command == "train":
            return cmd_train(config)
        if args.command == "detect":
            return cmd_detect(config)
        if args.command == "localize":
            return cmd_localize(config, args.time_range, args.report, args.threshold)
        return cmd_ablate(config, args.seeds, args.variants)
    except HFNException as e:
        log("ERROR", f"<r>{escape_tag(type(e).__name__)}</r>: {escape_tag(str(e))}")
        return e.exit_code
    except Exception as e:
        log("ERROR", "<r><bg #f8bbd0>unexpected error</bg #f8bbd0></r>", e)
        return 1


def main(argv: Optional[Sequence[str]] = None) -> None:
    sys.exit(run(argv))


__all__ = ["build_parser", "load_run_config", "main", "run"]
