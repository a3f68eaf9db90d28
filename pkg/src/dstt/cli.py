"""``dstt`` command line: fetch, ingest, train, predict, evaluate, ablate, cv, synth.

Exit status is 0 on success, 1 for invalid arguments, configuration or input
data, and 2 for runtime failures (I/O, network, divergence).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from typing import Iterable

import numpy as np

from .config import RunConfig, load_config
from .data import (
    chronological_split,
    clean_missing,
    fetch_omni,
    fraction_split,
    label_records,
    load_table,
    write_labeled_csv,
    write_synthetic_csv,
    write_table_csv,
)
from .data.tables import format_time, write_rows
from .errors import ConfigError, ContractError, DataError, DsttError
from .evaluate import (
    StormCategory,
    classify_storm,
    cross_validate,
    run_ablation_suite,
    score,
    write_cv_summary,
    write_report_csv,
)
from .model import build_model, load_checkpoint, save_checkpoint, train
from .uncertainty import ForecastDistribution, McConfig, forecast, interval_bounds

log = logging.getLogger("dstt")

FORECAST_HEADER = ("timestamp", "observed", "mean", "aleatoric_var", "epistemic_var", "total_var", "lower", "upper")
LOSS_HEADER = ("epoch", "mse", "kl", "kl_weight", "nll", "total")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def fmt17(v: float) -> str:
    return "" if np.isnan(v) else f"{v:.17g}"


# ------------------------------------------------------------------- forecast csv


def write_forecast_csv(dists: ForecastDistribution | Iterable[ForecastDistribution], path, z: float = 2.0) -> int:
    """Write forecasts in timestamp order; returns the number of data rows."""
    if isinstance(dists, ForecastDistribution):
        dists = [dists]
    rows = 0

    def gen():
        nonlocal rows
        for d in dists:
            lower, upper = interval_bounds(d, z)
            observed = d.observed if d.observed is not None else np.full(len(d), np.nan)
            for i in range(len(d)):
                rows += 1
                yield [format_time(d.time[i]), fmt17(observed[i]), fmt17(d.mean[i]), fmt17(d.aleatoric[i]),
                       fmt17(d.epistemic[i]), fmt17(d.total[i]), fmt17(lower[i]), fmt17(upper[i])]

    with open(path, "w", newline="") as fh:
        write_rows(fh, FORECAST_HEADER, gen())
    if rows == 0:
        log.warning("forecast stream was empty; wrote header only to %s", path)
    return rows


def read_forecast_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != FORECAST_HEADER:
            raise DataError(f"{path}: expected header {','.join(FORECAST_HEADER)}")
        cols = {h: [] for h in FORECAST_HEADER}
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(FORECAST_HEADER):
                raise DataError(f"{path}: line {lineno}: expected {len(FORECAST_HEADER)} fields, got {len(row)}")
            for h, v in zip(FORECAST_HEADER, row):
                cols[h].append(v)
    out = {"timestamp": np.array(cols["timestamp"], dtype=object)}
    for h in FORECAST_HEADER[1:]:
        try:
            out[h] = np.array([float(v) if v else np.nan for v in cols[h]])
        except ValueError as exc:
            raise DataError(f"{path}: column {h}: {exc}") from None
    return out


# ----------------------------------------------------------------------- commands


def _load_clean(run: RunConfig, fmt: str = "auto"):
    if run.data is None:
        raise ConfigError("--data is required", field="data")
    table = load_table(run.data, fmt)
    cleaned, report = clean_missing(table, run.max_gap)
    log.info("loaded %s: %d rows; %s", run.data, len(table.time), report.summary())
    return cleaned


def _split(run: RunConfig, labeled):
    if run.boundary is not None:
        return chronological_split(labeled, np.datetime64(run.boundary.rstrip("Z"), "h"))
    return fraction_split(labeled, run.train_fraction)


def cmd_fetch(run: RunConfig, args) -> int:
    path = fetch_omni(args.start, args.end, endpoint_url=args.endpoint, cache_dir=args.cache_dir)
    if run.out:
        with open(path) as src, open(run.out, "w") as dst:
            dst.write(src.read())
        path = run.out
    print(path)
    return EXIT_OK


def cmd_ingest(run: RunConfig, args) -> int:
    cleaned = _load_clean(run, args.format)
    out = run.out or "-"
    if args.label:
        labeled = label_records(cleaned, run.w)
        if out == "-":
            raise ConfigError("--out is required with --label", field="out")
        write_labeled_csv(labeled, out)
        log.info("wrote %d labeled records (w=%d) to %s", len(labeled), run.w, out)
    elif out == "-":
        write_table_csv(cleaned, sys.stdout)
    else:
        write_table_csv(cleaned, out)
        log.info("wrote %d cleaned records to %s", len(cleaned.time), out)
    return EXIT_OK


def cmd_train(run: RunConfig, args) -> int:
    if run.out is None:
        raise ConfigError("--out is required", field="out")
    labeled = label_records(_load_clean(run, args.format), run.w)
    split = _split(run, labeled)
    log.info("train %d records, held out %d (first held-out %s)", len(split.train), len(split.test),
             format_time(split.test.time[0]))
    loss_path = args.loss_log or f"{run.out}.loss.csv"
    history = []

    def on_epoch(e):
        history.append(e)
        log.info("epoch %d total=%.6g mse=%.6g kl=%.6g nll=%.6g", e.epoch, e.total, e.mse, e.kl, e.nll)

    t0 = time.perf_counter()
    model = build_model(run.model)
    train(model, split.train, on_epoch=on_epoch)
    model.meta["test_start"] = format_time(split.test.time[0])
    save_checkpoint(model, run.out)
    with open(loss_path, "w", newline="") as fh:
        write_rows(fh, LOSS_HEADER, ([e.epoch] + [repr(getattr(e, k)) for k in LOSS_HEADER[1:]] for e in history))
    log.info("saved checkpoint %s and loss log %s (%.1fs)", run.out, loss_path, time.perf_counter() - t0)
    return EXIT_OK


def cmd_predict(run: RunConfig, args) -> int:
    if run.out is None:
        raise ConfigError("--out is required", field="out")
    model = load_checkpoint(args.model)
    w = model.meta.get("w", run.w)
    labeled = label_records(_load_clean(run, args.format), w)
    if args.subset == "test":
        start = model.meta.get("test_start")
        if start is None:
            raise ContractError("checkpoint does not record a held-out range")
        labeled = chronological_split(labeled, np.datetime64(start.rstrip("Z"), "h")).test
    dist = forecast(model, labeled, McConfig(run.K, run.seed), epistemic_only=args.epistemic_only,
                    workers=run.workers)
    rows = write_forecast_csv(dist, run.out, run.z)
    if rows:
        log.info("wrote %d forecasts to %s (mean aleatoric %.4g, mean epistemic %.4g nT^2)", rows, run.out,
                 float(dist.aleatoric.mean()), float(dist.epistemic.mean()))
    return EXIT_OK


def cmd_evaluate(run: RunConfig, args) -> int:
    cols = read_forecast_csv(args.pred)
    keep = ~np.isnan(cols["observed"])
    y, yhat = cols["observed"][keep], cols["mean"][keep]
    rep = score(args.method, run.w if args.w is not None else None, y, yhat)
    print(f"m={rep.m} rmse={rep.rmse!r} r2={rep.r2!r}")
    lower, upper = cols["lower"][keep], cols["upper"][keep]
    if len(y):
        coverage = float(np.mean((y >= lower) & (y <= upper)))
        print(f"band_coverage={coverage!r}")
        cats = [classify_storm(v) for v in y]
        for cat in StormCategory:
            idx = np.array([c is cat for c in cats])
            if idx.sum():
                r = score(args.method, rep.w, y[idx], yhat[idx])
                print(f"{cat.value}: m={r.m} rmse={r.rmse!r}")
    if run.out:
        write_report_csv([rep], run.out)
    return EXIT_OK


def cmd_ablate(run: RunConfig, args) -> int:
    if run.out is None:
        raise ConfigError("--out is required", field="out")
    cleaned = _load_clean(run, args.format)
    boundary = np.datetime64(run.boundary.rstrip("Z"), "h") if run.boundary else None
    t0 = time.perf_counter()
    result = run_ablation_suite(cleaned, run.model, run.horizons, run.seeds, train_fraction=run.train_fraction,
                                boundary=boundary, workers=run.workers)
    write_report_csv(result.reports, run.out)
    baseline_path = args.baselines_out or f"{run.out}.baselines.csv"
    write_report_csv(result.baselines, baseline_path)
    log.info("%d runs, %d failures, %.1fs; baselines in %s", len(result.reports), len(result.failures),
             time.perf_counter() - t0, baseline_path)
    for label, w, seed, msg in result.failures:
        log.error("failed: %s w=%d seed=%d: %s", label, w, seed, msg)
    return EXIT_OK


def cmd_cv(run: RunConfig, args) -> int:
    if run.out is None:
        raise ConfigError("--out is required", field="out")
    labeled = label_records(_load_clean(run, args.format), run.w)
    result = cross_validate(labeled, run.model, run.folds, seed=run.seed)
    write_cv_summary(result, run.out)
    detail = args.folds_out or f"{run.out}.folds.csv"
    write_report_csv(result.reports, detail)
    for d in result.summary():
        print(f"{d['method']}: rmse {d['rmse_mean']:.4f} +/- {d['rmse_std']:.4f}, "
              f"r2 {d['r2_mean']:.4f} +/- {d['r2_std']:.4f}")
    return EXIT_OK


def cmd_synth(run: RunConfig, args) -> int:
    if run.out is None:
        raise ConfigError("--out is required", field="out")
    n = write_synthetic_csv(args.count, run.seed, run.out)
    log.info("wrote %d synthetic records to %s", n, run.out)
    return EXIT_OK


# ------------------------------------------------------------------------- parser


def _add_common(p: argparse.ArgumentParser, *, data=True, out=True):
    p.add_argument("--config", help="JSON file of configuration keys")
    p.add_argument("--profile", choices=("full", "test"), help="preset widths and schedule")
    p.add_argument("--seed", type=int, help="seed for every stochastic stage")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any configuration key")
    p.add_argument("--log-level", default="INFO", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    if data:
        p.add_argument("--data", help="OMNI2 text or CSV input")
        p.add_argument("--format", default="auto", choices=("auto", "omni", "csv"))
        p.add_argument("--max-gap", type=int, dest="max_gap", help="longest gap (hours) to interpolate")
    if out:
        p.add_argument("--out", help="output path")


def _add_model(p: argparse.ArgumentParser):
    p.add_argument("--w", type=int, help="forecast horizon in hours (1..6)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float, dest="learning_rate")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lstm-units", type=int, dest="lstm_units")
    p.add_argument("--sequence-length", type=int, dest="sequence_length")
    p.add_argument("--variant", help="ablation variant: FULL, C, L, M, CL, CM or LM")
    p.add_argument("--boundary", help="first held-out timestamp, e.g. 2021-10-01T00")
    p.add_argument("--train-fraction", type=float, dest="train_fraction")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dstt", description="Dst forecasting with a transformer and uncertainty estimates")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fetch", help="download OMNI2 hourly data")
    _add_common(p, data=False)
    p.add_argument("--start", required=True, help="first date, YYYY-MM-DD")
    p.add_argument("--end", required=True, help="end date (exclusive), YYYY-MM-DD")
    p.add_argument("--endpoint", help="URL template with {year}")
    p.add_argument("--cache-dir")

    p = sub.add_parser("ingest", help="parse and clean a data file, optionally label it")
    _add_common(p)
    p.add_argument("--w", type=int)
    p.add_argument("--label", action="store_true", help="write labeled records for horizon --w")

    p = sub.add_parser("train", help="train a model and save a checkpoint")
    _add_common(p)
    _add_model(p)
    p.add_argument("--loss-log", help="per-epoch loss CSV (default: OUT.loss.csv)")

    p = sub.add_parser("predict", help="Monte-Carlo forecast with uncertainty columns")
    _add_common(p)
    p.add_argument("--model", required=True, help="checkpoint from train")
    p.add_argument("--K", type=int, help="number of stochastic passes")
    p.add_argument("--z", type=float, help="band half-width in standard deviations")
    p.add_argument("--workers", type=int)
    p.add_argument("--subset", choices=("all", "test"), default="all")
    p.add_argument("--epistemic-only", action="store_true")

    p = sub.add_parser("evaluate", help="score a forecast CSV")
    _add_common(p, data=False)
    p.add_argument("--pred", required=True, help="forecast CSV from predict")
    p.add_argument("--method", default="DSTT")
    p.add_argument("--w", type=int, help="horizon recorded in the report")

    p = sub.add_parser("ablate", help="train every ablation variant for every horizon and seed")
    _add_common(p)
    _add_model(p)
    p.add_argument("--horizons", type=int, nargs="+")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--workers", type=int)
    p.add_argument("--baselines-out", help="persistence and LR reports (default: OUT.baselines.csv)")

    p = sub.add_parser("cv", help="k-fold order-preserving cross-validation")
    _add_common(p)
    _add_model(p)
    p.add_argument("--k", type=int, dest="folds")
    p.add_argument("--folds-out", help="per-fold reports (default: OUT.folds.csv)")

    p = sub.add_parser("synth", help="write a synthetic dataset")
    _add_common(p, data=False)
    p.add_argument("--count", type=int, required=True)
    return parser


COMMANDS = {"fetch": cmd_fetch, "ingest": cmd_ingest, "train": cmd_train, "predict": cmd_predict,
            "evaluate": cmd_evaluate, "ablate": cmd_ablate, "cv": cmd_cv, "synth": cmd_synth}

# argparse destinations that are not configuration keys
_NON_CONFIG = {"command", "config", "set", "log_level", "format", "start", "end", "endpoint", "cache_dir",
               "label", "loss_log", "model", "subset", "epistemic_only", "pred", "method", "baselines_out",
               "folds_out", "count"}


def _flag_overrides(args) -> dict:
    flags = {k: v for k, v in vars(args).items() if k not in _NON_CONFIG and v is not None}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}", field=key)
        flags[key.strip()] = value.strip()
    return flags


def run_command(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_INVALID
    logging.basicConfig(level=args.log_level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s",
                        force=True)
    try:
        run = load_config(args.config, _flag_overrides(args), command=args.command)
        log.info("effective config: %s", json.dumps(run.to_dict(), sort_keys=True))
        return COMMANDS[args.command](run, args)
    except (ConfigError, DataError, ContractError) as exc:
        log.error("%s", exc)
        return EXIT_INVALID
    except (DsttError, OSError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
