"""Command-line entry point: ``ssvtcn {synth,train,detect,eval,grid}``.

Flags override the TOML config.  Exit codes: 0 success, 2 usage, 3 config
error, 4 data error, 5 pipeline error.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
import tempfile
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, CheckpointShapeError, load_checkpoint, save_checkpoint
from .config import Config, ConfigError, load_config
from .data import (
    CLASS_NAMES,
    CsvLoad,
    DataError,
    Encoder,
    csv_header,
    load_csv,
    synth_feature_names,
    synth_generate,
    write_csv,
    write_csv_stream,
)
from .detector import ClassIntervals, DetectionResult, detect_stream
from .evaluation import MODES, canonical_mode, evaluate, run_grid
from .model import NonFiniteLossError
from .pipeline import prepare, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_PIPELINE = 5

logger = logging.getLogger("ssvtcn")


class PipelineError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# helpers


def _records(cfg: Config, data_path: str | None) -> tuple[list, tuple[str, ...], CsvLoad | None]:
    """Records from the CSV named by flag or config, else the synthetic corpus."""
    path = data_path or cfg.data.path
    if not path:
        synth = cfg.synth
        return synth_generate(synth), synth_feature_names(synth.features), None
    load = load_csv(path, cfg.data.schema())
    if not load.records:
        raise DataError(f"{path}: no usable records")
    return load.records, load.feature_names, load


def _categorical_positions(cfg: Config, feature_names) -> tuple[int, ...] | None:
    if not cfg.data.categorical:
        return None
    missing = [c for c in cfg.data.categorical if c not in feature_names]
    if missing:
        raise ConfigError(f"data.categorical names unknown column(s) {missing}")
    return tuple(feature_names.index(c) for c in cfg.data.categorical)


def _report_rejects(load: CsvLoad | None, out_dir: Path | None) -> None:
    if load is None or not load.rejects:
        return
    logger.warning("%d malformed row(s) skipped", len(load.rejects))
    if out_dir is not None:
        load.write_rejects(out_dir / "rejects.jsonl")


@contextlib.contextmanager
def _readable(path: str):
    """A re-readable path for ``path``; ``-`` spools standard input to a temp file."""
    if path != "-":
        yield path
        return
    with tempfile.TemporaryDirectory() as tmp:
        spool = Path(tmp) / "stdin.csv"
        spool.write_text(sys.stdin.read(), encoding="utf-8")
        yield spool


def _csv_columns(cfg: Config) -> dict:
    """Column names and label spellings that read back under the configured schema."""
    names: dict[int, str] = {}
    for text, c in cfg.data.label_map.items():
        names.setdefault(int(c), text)
    width = max(names, default=-1) + 1
    return {
        "timestamp": cfg.data.timestamp,
        "label": cfg.data.label or "label",
        "label_names": [names.get(c, str(c)) for c in range(width)],
    }


def _open_out(path: str | None):
    if path in (None, "-"):
        return sys.stdout, False
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    return open(path, "w", encoding="utf-8", newline=""), True


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(cfg: Config, args) -> int:
    synth = cfg.synth
    if args.seed is not None:
        synth = replace(synth, seed=args.seed)
    if args.records is not None:
        synth = replace(synth, records=args.records)
    records = synth_generate(synth)
    names = synth_feature_names(synth.features)
    if args.out in (None, "-"):
        write_csv_stream(sys.stdout, records, names)
    else:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        write_csv(args.out, records, names)
    counts = np.bincount([r.label for r in records], minlength=len(CLASS_NAMES)) if records else [0] * 4
    summary = ", ".join(f"{name}={int(n)}" for name, n in zip(CLASS_NAMES, counts))
    print(f"{len(records)} records: {summary}", file=sys.stderr)
    return EXIT_OK


def cmd_train(cfg: Config, args) -> int:
    out = Path(args.out or "run")
    out.mkdir(parents=True, exist_ok=True)
    records, names, load = _records(cfg, args.data)
    _report_rejects(load, out)
    settings = cfg.settings(_categorical_positions(cfg, names))
    supervised = args.mode == "supervised" or settings.labeled_fraction >= 1.0
    prepared = prepare(records, settings)

    history_path = out / "history.jsonl"
    with history_path.open("w", encoding="utf-8") as hist:
        def on_epoch(rec):
            hist.write(json.dumps(rec.__dict__, sort_keys=True) + "\n")
            hist.flush()
            logger.info("epoch %d  L_T=%.4f  L_V=%.4f  acc=%.3f", rec.epoch, rec.L_T, rec.L_V, rec.labeled_acc)

        model, _, intervals = train(prepared, settings, cfg.seed, supervised=supervised, on_epoch=on_epoch)

    model.metadata.update(
        {
            "seed": cfg.seed,
            "mode": "supervised" if supervised else "semi-supervised",
            "feature_names": list(names),
            "labeled_fraction": settings.labeled_fraction,
        }
    )
    (out / "model.ckpt").write_bytes(save_checkpoint(model))
    (out / "intervals.json").write_text(intervals.dumps() + "\n", encoding="utf-8")
    write_csv(out / "test.csv", prepared.split.test, names, **_csv_columns(cfg))
    print(
        f"trained on {len(prepared.labeled_labels)} labeled + "
        f"{0 if supervised else len(prepared.unlabeled_windows)} unlabeled records; "
        f"artifacts in {out}",
        file=sys.stderr,
    )
    return EXIT_OK


def cmd_detect(cfg: Config, args) -> int:
    try:
        blob = Path(args.checkpoint).read_bytes()
        intervals_text = Path(args.intervals).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"{exc.filename}: {exc.strerror}") from exc
    model = load_checkpoint(blob)
    if "encoder" not in model.metadata:
        raise CheckpointShapeError("checkpoint carries no fitted encoder")
    m = cfg.model
    arch = {
        "num_classes": m.num_classes, "window": m.window, "levels": m.levels, "channels": m.channels,
        "kernel_size": m.kernel_size, "latent_dim": m.latent_dim, "sigma": m.sigma,
    }
    diffs = [f"{k}: checkpoint {getattr(model.config, k)} vs config {v}"
             for k, v in arch.items() if getattr(model.config, k) != v]
    if diffs:
        raise CheckpointShapeError("checkpoint does not match configuration; " + "; ".join(diffs))
    try:
        intervals = ClassIntervals.loads(intervals_text)
    except (ValueError, KeyError) as exc:
        raise DataError(f"{args.intervals}: malformed intervals file ({exc})") from exc
    if intervals.num_classes != model.config.num_classes:
        raise CheckpointShapeError(
            f"intervals cover {intervals.num_classes} classes, checkpoint has {model.config.num_classes}"
        )

    encoder = Encoder.from_dict(model.metadata["encoder"])
    with _readable(args.input) as source:
        schema = cfg.data.schema()
        if schema.label and schema.label not in csv_header(source):
            schema = replace(schema, label=None)  # unlabeled input is fine for scoring
        load = load_csv(source, schema)
    _report_rejects(load, None)
    if len(load.feature_names) != model.config.input_dim:
        raise CheckpointShapeError(
            f"input has {len(load.feature_names)} feature columns, checkpoint expects {model.config.input_dim}"
        )
    features = encoder.transform(load.records)
    results = detect_stream(
        model, intervals, features, [r.timestamp for r in load.records],
        rectification=canonical_mode(args.mode or "ss-vtcn") != "ss-wvtcn",
    )
    fh, close = _open_out(args.out)
    try:
        for r in results:
            fh.write(r.to_json() + "\n")
    finally:
        if close:
            fh.close()
    n_rect = sum(r.rectified for r in results)
    print(f"{len(results)} records scored, {n_rect} rectified", file=sys.stderr)
    return EXIT_OK


def read_log(path) -> list[DetectionResult]:
    results = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                results.append(DetectionResult.from_json(line))
            except (ValueError, KeyError, TypeError) as exc:
                raise DataError(f"{path}: malformed detection record at line {n} ({exc})") from exc
    return results


def cmd_eval(cfg: Config, args) -> int:
    try:
        results = read_log(args.log)
    except OSError as exc:
        raise DataError(f"{args.log}: {exc.strerror}") from exc
    load = load_csv(args.truth, cfg.data.schema())
    truth = [r.label for r in load.records]
    if any(t is None for t in truth):
        raise DataError(f"{args.truth}: every truth record needs a label")
    if len(results) != len(truth):
        raise DataError(f"detection log has {len(results)} records, truth has {len(truth)}")
    for i, r in enumerate(results):
        if r.index != i:
            raise DataError(f"detection log index {r.index} at position {i}: log and truth are misaligned")
    use_final = canonical_mode(args.mode or "ss-vtcn") != "ss-wvtcn"
    pred = [r.final if use_final else r.preliminary for r in results]
    report = evaluate(truth, pred, cfg.model.num_classes)
    names = list(CLASS_NAMES) if cfg.model.num_classes == len(CLASS_NAMES) else None
    table = report.to_table(names)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n",
                                         encoding="utf-8")
        (out / "report.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return EXIT_OK


def cmd_grid(cfg: Config, args) -> int:
    records, names, load = _records(cfg, args.data)
    out = Path(args.out) if args.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    _report_rejects(load, out)
    settings = cfg.settings(_categorical_positions(cfg, names))
    ratios = [args.labeled_ratio] if args.labeled_ratio is not None else list(cfg.grid.ratios)
    modes = [args.mode] if args.mode else list(cfg.grid.modes)
    seeds = [args.seed] if args.seed is not None else list(cfg.grid.seeds)

    def progress(cell):
        status = f"avg F1 {100 * cell.report.avg_f1:.2f}" if cell.report else f"FAILED {cell.error}"
        logger.info("ratio=%s mode=%s seed=%s %s", cell.ratio, cell.mode, cell.seed, status)

    grid = run_grid(records, ratios, modes, seeds, settings, progress)
    table = grid.to_table()
    if out is not None:
        (out / "grid.json").write_text(grid.dumps() + "\n", encoding="utf-8")
        (out / "grid.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return EXIT_PIPELINE if all(c.error for c in grid.cells) else EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _ratio(text: str) -> float:
    value = float(text)
    if not 0 < value <= 1:
        raise argparse.ArgumentTypeError("labeled ratio must lie in (0, 1]")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--out", help="output path or directory")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="ssvtcn", description="Semi-supervised TCN+VAE anomaly detector")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic labeled CSV")
    p.add_argument("--records", type=int, help="number of records")

    p = sub.add_parser("train", parents=[common], help="split, fit, calibrate; write model artifacts")
    p.add_argument("--data", help="training CSV (default: config data.path, else synthetic)")
    p.add_argument("--labeled-ratio", type=_ratio)
    p.add_argument("--mode", choices=MODES)

    p = sub.add_parser("detect", parents=[common], help="score a CSV into a detection log")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--intervals", required=True)
    p.add_argument("--input", required=True, help="CSV of records to score, in time order (- for stdin)")
    p.add_argument("--mode", choices=MODES, help="ss-wvtcn disables rectification")

    p = sub.add_parser("eval", parents=[common], help="score a detection log against labels")
    p.add_argument("--log", required=True)
    p.add_argument("--truth", required=True, help="labeled CSV aligned with the log")
    p.add_argument("--mode", choices=MODES, help="ss-wvtcn scores the preliminary verdicts")

    p = sub.add_parser("grid", parents=[common], help="labeled-ratio x mode x seed experiment")
    p.add_argument("--data", help="CSV corpus (default: config data.path, else synthetic)")
    p.add_argument("--labeled-ratio", type=_ratio, help="run a single ratio")
    p.add_argument("--mode", choices=MODES, help="run a single mode")
    return parser


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "detect": cmd_detect, "eval": cmd_eval, "grid": cmd_grid}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    if not args.verbose:
        warnings.simplefilter("ignore", RuntimeWarning)
    try:
        cfg = load_config(args.config).with_overrides(
            seed=args.seed if args.command != "synth" else None,
            labeled_ratio=getattr(args, "labeled_ratio", None) if args.command == "train" else None,
        )
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"ssvtcn {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        print(f"ssvtcn {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (CheckpointError, NonFiniteLossError, PipelineError, ValueError) as exc:
        print(f"ssvtcn {args.command}: pipeline error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())
