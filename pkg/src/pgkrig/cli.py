"""Operator commands chaining the pipeline: simulate, train, infer, eval, render.

Every command reads and writes the CSV/graymap/checkpoint formats from
the data layer, never mutates its inputs, and is reproducible under
`--seed` (commands without randomness are deterministic outright).

Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import dataio
from .autodiff import NumericError
from .baselines import BaselineError
from .graphs import DEFAULT_THRESHOLD_KM, GraphBuildError
from .losses import LossError
from .metrics import MetricError, score_per_node, score_pooled
from .network import ModelError
from .rendering import RenderError, field_frame, render_pgm
from .testbed import (PRESET_NAMES, ScenarioError, run_scenario,
                      scenario_from_dict, scenario_preset)
from .training import (ConfigError, Normalization, StationDataset, TrainError,
                       infer_grid, infer_stations, model_config_from_dict,
                       split_from_dict, train, train_config_from_dict,
                       weights_from_dict)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

DATA_DIR_ENV = "PGKRIG_DATA_DIR"

# Numeric failures are checked first; everything else actionable by
# fixing inputs or configuration maps to the data-error exit code.
_NUMERIC_ERRORS = (TrainError, NumericError)
_DATA_ERRORS = (dataio.SchemaError, ScenarioError, GraphBuildError, ConfigError,
                ModelError, LossError, MetricError, BaselineError, RenderError,
                yaml.YAMLError, OSError)


class _UsageError(Exception):
    """Bad flags or flag combinations; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on usage errors; the contract wants 1."""

    def error(self, message):
        raise _UsageError(message)


def _fmt(value: float) -> str:
    return repr(float(value))


def _resolve_data_dir(value) -> Path:
    """Explicit flag wins; otherwise fall back to the environment."""
    if value is not None:
        return Path(value)
    env = os.environ.get(DATA_DIR_ENV)
    if env:
        return Path(env)
    raise _UsageError(f"no data directory given and {DATA_DIR_ENV} is not set")


def _require_dense(ids: np.ndarray, n: int, path) -> None:
    if not np.array_equal(np.asarray(ids), np.arange(n)):
        raise dataio.SchemaError(
            f"{path}: needs one series per node (ids 0..{n - 1}), "
            f"got {np.asarray(ids).size} ids")


# ---------------------------------------------------------------------------
# simulate


def _load_scenario(name_or_path: str):
    if name_or_path in PRESET_NAMES:
        return scenario_preset(name_or_path)
    path = Path(name_or_path)
    if not path.exists():
        raise ScenarioError(
            f"'{name_or_path}' is neither a preset ({', '.join(sorted(PRESET_NAMES))}) "
            "nor a scenario file")
    data = yaml.safe_load(path.read_text(encoding="utf-8"))
    return scenario_from_dict(data)


def _cmd_simulate(args) -> int:
    spec = _load_scenario(args.scenario)
    run = run_scenario(spec, seed=args.seed)
    out = _resolve_data_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cells = run.stations.cell_indices
    dataio.write_nodes(out / "nodes.csv", run.stations.nodes.positions)
    dataio.write_values(out / "stations.csv", run.stations.pm25, "pm25")
    dataio.write_wind(out / "wind.csv", run.stations.wind)
    dataio.write_values(out / "emissions.csv", run.stations.emissions, "emission")
    dataio.write_aod(out / "aod.csv", run.aod.values[:, cells],
                     run.aod.valid[:, cells])
    dataio.write_values(out / "truth.csv", run.truth.concentrations, "pm25")
    dataio.write_values(out / "station_truth.csv",
                        run.truth.concentrations[:, cells], "pm25")
    geometry = dataio.GridGeometry(nx=spec.nx, ny=spec.ny, cell_km=spec.cell_km)
    dataio.write_grid_nodes(out / "grid.csv", geometry)
    dataio.write_grid_inputs(out / "grid_inputs.csv", run.truth.wind,
                             run.truth.emissions)
    print(f"wrote 9 files to {out} ({run.stations.nodes.n} stations, "
          f"{run.truth.concentrations.shape[0]} hours, "
          f"{geometry.nx}x{geometry.ny} grid)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train / sweep


def _load_dataset(data_dir: Path, with_aod: bool) -> StationDataset:
    nodes = dataio.read_nodes(data_dir / "nodes.csv")
    ids, pm25 = dataio.read_values(data_dir / "stations.csv", "pm25")
    _require_dense(ids, nodes.n, data_dir / "stations.csv")
    wind_ids, wind = dataio.read_wind(data_dir / "wind.csv")
    _require_dense(wind_ids, nodes.n, data_dir / "wind.csv")
    em_ids, emissions = dataio.read_values(data_dir / "emissions.csv", "emission")
    _require_dense(em_ids, nodes.n, data_dir / "emissions.csv")
    aod_values = aod_valid = None
    aod_path = data_dir / "aod.csv"
    if with_aod and aod_path.exists():
        aod_ids, aod_values, aod_valid = dataio.read_aod(aod_path)
        _require_dense(aod_ids, nodes.n, aod_path)
    return StationDataset(nodes=nodes, wind=wind, emissions=emissions,
                          pm25=pm25, aod_values=aod_values, aod_valid=aod_valid)


def _train_inputs(args):
    """Shared train/sweep plumbing: dataset plus validated configuration."""
    data_dir = _resolve_data_dir(args.data)
    cfg = dataio.load_config(args.config) if args.config else {}
    dataset = _load_dataset(data_dir, with_aod=not args.no_aod)
    model_cfg = model_config_from_dict(cfg.get("model", {}))
    train_cfg = train_config_from_dict(cfg.get("train", {}))
    weights = weights_from_dict(cfg.get("loss", {}))
    graph_cfg = dict(cfg.get("graph", {}))
    threshold = float(graph_cfg.pop("threshold_km", DEFAULT_THRESHOLD_KM))
    if graph_cfg:
        raise ConfigError(f"unknown keys in graph section: {sorted(graph_cfg)}")
    split = split_from_dict(cfg.get("split", {}), dataset.t_hours)
    if args.seed is not None:
        train_cfg = replace(train_cfg, seed=int(args.seed))
        split = replace(split, seed=int(args.seed))
    return dataset, model_cfg, train_cfg, split, weights, threshold


def _cmd_train(args) -> int:
    dataset, model_cfg, train_cfg, split, weights, threshold = _train_inputs(args)
    result = train(dataset, model_cfg, train_cfg, split, weights=weights,
                   threshold_km=threshold)
    dataio.save_checkpoint(args.out, result.model, result.normalization.mean,
                           result.normalization.std, result.meta)
    log_path = args.log if args.log else str(args.out) + ".log.csv"
    dataio.write_metrics_log(log_path, result.log)
    mae = result.best_val_mae
    print(f"wrote {args.out} (best epoch {result.best_epoch}, "
          f"val MAE {'n/a' if mae is None else format(mae, '.6g')})")
    return EXIT_OK


def _cmd_sweep(args) -> int:
    dataset, model_cfg, train_cfg, split, weights, threshold = _train_inputs(args)
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError as exc:
        raise _UsageError(f"--values must be comma-separated numbers: {exc}")
    if not values:
        raise _UsageError("--values is empty")
    lines = [dataio.version_line("sweep"), f"{args.param},best_epoch,best_val_mae"]
    for value in values:
        swept = replace(weights, **{args.param: value})
        result = train(dataset, model_cfg, train_cfg, split, weights=swept,
                       threshold_km=threshold)
        mae = "" if result.best_val_mae is None else _fmt(result.best_val_mae)
        lines.append(f"{_fmt(value)},{result.best_epoch},{mae}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"wrote {args.out} ({len(values)} runs)")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# infer


def _parse_targets(text: str) -> np.ndarray:
    try:
        ids = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise _UsageError(f"--targets must be comma-separated node ids: {exc}")
    if not ids:
        raise _UsageError("--targets is empty")
    return np.array(ids, dtype=np.int64)


def _cmd_infer(args) -> int:
    if args.grid == (args.targets is not None):
        raise _UsageError("exactly one of --targets or --grid is required")
    ckpt = dataio.load_checkpoint(args.ckpt)
    normalization = Normalization(mean=ckpt.norm_mean, std=ckpt.norm_std)
    threshold = args.threshold_km
    if threshold is None:
        threshold = float(ckpt.meta.get("threshold_km", DEFAULT_THRESHOLD_KM))
    data_dir = _resolve_data_dir(args.data)

    nodes = dataio.read_nodes(data_dir / "nodes.csv")
    wind_ids, wind = dataio.read_wind(data_dir / "wind.csv")
    _require_dense(wind_ids, nodes.n, data_dir / "wind.csv")
    em_ids, emissions = dataio.read_values(data_dir / "emissions.csv", "emission")
    _require_dense(em_ids, nodes.n, data_dir / "emissions.csv")

    station_path = data_dir / "stations.csv"
    sids, svals = dataio.read_values(station_path, "pm25")
    if sids.size and (sids.min() < 0 or sids.max() >= nodes.n):
        raise dataio.SchemaError(
            f"{station_path}: node ids outside 0..{nodes.n - 1}")
    if svals.shape[0] != wind.shape[0]:
        raise dataio.SchemaError(
            f"{station_path}: {svals.shape[0]} hours but wind has {wind.shape[0]}")

    if args.grid:
        _require_dense(sids, nodes.n, station_path)
        dataset = StationDataset(nodes=nodes, wind=wind, emissions=emissions,
                                 pm25=svals)
        geometry = dataio.read_grid_nodes(data_dir / "grid.csv")
        grid_wind, grid_emissions = dataio.read_grid_inputs(
            data_dir / "grid_inputs.csv")
        field = infer_grid(ckpt.model, normalization, dataset,
                           geometry.positions(), grid_wind, grid_emissions,
                           threshold_km=threshold)
        dataio.write_values(args.out, field, "pm25")
        print(f"wrote {args.out} ({field.shape[0]} hours x "
              f"{geometry.nx}x{geometry.ny} cells)")
        return EXIT_OK

    targets = _parse_targets(args.targets)
    # Target nodes may be absent from the station table (their pollution
    # is zeroed and flagged unobserved either way); every other node
    # needs a series, otherwise it would silently pass zeros as data.
    pm25 = np.zeros((wind.shape[0], nodes.n), dtype=np.float64)
    pm25[:, sids] = svals
    uncovered = sorted(set(range(nodes.n)) - set(sids.tolist()) - set(targets.tolist()))
    if uncovered:
        raise dataio.SchemaError(
            f"{station_path}: nodes {uncovered} have no series and are not targets")
    dataset = StationDataset(nodes=nodes, wind=wind, emissions=emissions, pm25=pm25)
    preds = infer_stations(ckpt.model, normalization, dataset, targets,
                           threshold_km=threshold)
    dataio.write_values(args.out, preds, "pm25", node_ids=targets)
    print(f"wrote {args.out} ({preds.shape[0]} hours x {targets.size} nodes)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def _cmd_eval(args) -> int:
    pred_ids, pred = dataio.read_values(args.pred, "pm25")
    truth_ids, truth = dataio.read_values(args.truth, "pm25")
    lookup = {int(k): i for i, k in enumerate(truth_ids)}
    missing = [int(k) for k in pred_ids if int(k) not in lookup]
    if missing:
        raise dataio.SchemaError(f"{args.truth}: no truth for nodes {missing}")
    if truth.shape[0] < pred.shape[0]:
        raise dataio.SchemaError(
            f"{args.truth}: covers {truth.shape[0]} hours but predictions "
            f"cover {pred.shape[0]}")
    aligned = truth[:pred.shape[0], [lookup[int(k)] for k in pred_ids]]

    lo = 0 if args.from_hour is None else args.from_hour
    hi = pred.shape[0] if args.to_hour is None else args.to_hour
    if not 0 <= lo < hi <= pred.shape[0]:
        raise _UsageError(
            f"hour range [{lo}, {hi}) is not inside [0, {pred.shape[0]})")
    pred, aligned = pred[lo:hi], aligned[lo:hi]

    scores = [replace(s, node_id=int(pred_ids[i]))
              for i, s in enumerate(score_per_node(pred, aligned))]
    pooled = score_pooled(pred, aligned)
    text = "\n".join(dataio.report_lines(scores, pooled)) + "\n"
    sys.stdout.write(text)
    if args.out:
        dataio.write_report(args.out, scores, pooled)
    return EXIT_OK


# ---------------------------------------------------------------------------
# render


def _cmd_render(args) -> int:
    geometry = dataio.read_grid_nodes(args.grid)
    ids, values = dataio.read_values(args.field, "pm25")
    if not np.array_equal(ids, np.arange(geometry.n_cells)):
        raise RenderError(
            f"{args.field}: field covers {ids.size} of {geometry.n_cells} cells")
    hour = values.shape[0] - 1 if args.time is None else args.time
    frame = field_frame(values, geometry, hour)
    Path(args.out).write_text(render_pgm(frame, vmin=args.vmin, vmax=args.vmax),
                              encoding="utf-8")
    print(f"wrote {args.out} ({geometry.nx}x{geometry.ny}, hour {hour})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# wiring


def build_parser() -> _Parser:
    parser = _Parser(
        prog="pgkrig",
        description="Physics-guided inductive kriging for sparse sensor fields.")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    sim = sub.add_parser("simulate", help="run a synthetic scenario and emit CSVs")
    sim.add_argument("--scenario", required=True,
                     help=f"preset name ({', '.join(PRESET_NAMES)}) or a YAML file")
    sim.add_argument("--out", default=None,
                     help=f"output directory (default ${DATA_DIR_ENV})")
    sim.add_argument("--seed", type=int, default=None,
                     help="master seed (default: the scenario's layout seed)")
    sim.set_defaults(func=_cmd_simulate)

    tr = sub.add_parser("train", help="fit a model on a station data directory")
    tr.add_argument("--config", default=None, help="YAML configuration file")
    tr.add_argument("--data", default=None,
                    help=f"data directory (default ${DATA_DIR_ENV})")
    tr.add_argument("--out", required=True, help="checkpoint path to write")
    tr.add_argument("--log", default=None,
                    help="metrics log CSV path (default: <out>.log.csv)")
    tr.add_argument("--seed", type=int, default=None,
                    help="overrides both the training and the split seed")
    tr.add_argument("--no-aod", action="store_true",
                    help="ignore aod.csv even when present")
    tr.set_defaults(func=_cmd_train)

    sw = sub.add_parser("sweep", help="retrain across loss-weight values")
    sw.add_argument("--config", default=None, help="YAML configuration file")
    sw.add_argument("--data", default=None,
                    help=f"data directory (default ${DATA_DIR_ENV})")
    sw.add_argument("--param", choices=("lambda1", "lambda2"), default="lambda2",
                    help="which loss weight to sweep (default lambda2)")
    sw.add_argument("--values", required=True,
                    help="comma-separated weight values, e.g. 0,0.1,0.5")
    sw.add_argument("--out", default=None,
                    help="result CSV path (default: print to stdout)")
    sw.add_argument("--seed", type=int, default=None,
                    help="overrides both the training and the split seed")
    sw.add_argument("--no-aod", action="store_true",
                    help="ignore aod.csv even when present")
    sw.set_defaults(func=_cmd_sweep)

    inf = sub.add_parser("infer", help="predict series at nodes or a full grid")
    inf.add_argument("--ckpt", required=True, help="checkpoint from train")
    inf.add_argument("--data", default=None,
                     help=f"data directory (default ${DATA_DIR_ENV})")
    inf.add_argument("--targets", default=None,
                     help="comma-separated node ids to predict")
    inf.add_argument("--grid", action="store_true",
                     help="reconstruct the full grid from grid.csv/grid_inputs.csv")
    inf.add_argument("--out", required=True, help="prediction CSV path")
    inf.add_argument("--threshold-km", type=float, default=None,
                     help="edge cutoff override (default: from the checkpoint)")
    inf.add_argument("--seed", type=int, default=None,
                     help="accepted for uniformity; inference is deterministic")
    inf.set_defaults(func=_cmd_infer)

    ev = sub.add_parser("eval", help="score predictions against truth")
    ev.add_argument("--pred", required=True, help="prediction CSV")
    ev.add_argument("--truth", required=True, help="truth CSV")
    ev.add_argument("--out", default=None, help="also write the report here")
    ev.add_argument("--from", dest="from_hour", type=int, default=None,
                    help="first hour to score (inclusive)")
    ev.add_argument("--to", dest="to_hour", type=int, default=None,
                    help="last hour to score (exclusive)")
    ev.add_argument("--seed", type=int, default=None,
                    help="accepted for uniformity; eval is deterministic")
    ev.set_defaults(func=_cmd_eval)

    rn = sub.add_parser("render", help="render one hour of a field as a graymap")
    rn.add_argument("--field", required=True, help="field CSV (time,node_id,pm25)")
    rn.add_argument("--grid", required=True, help="grid geometry CSV")
    rn.add_argument("--out", required=True, help="output .pgm path")
    rn.add_argument("--time", type=int, default=None,
                    help="hour to render (default: the last)")
    rn.add_argument("--vmin", type=float, default=None,
                    help="value mapped to black (default: frame minimum)")
    rn.add_argument("--vmax", type=float, default=None,
                    help="value mapped to white (default: frame maximum)")
    rn.add_argument("--seed", type=int, default=None,
                    help="accepted for uniformity; render is deterministic")
    rn.set_defaults(func=_cmd_render)

    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help exits 0 inside argparse
        code = exc.code
        return code if isinstance(code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _NUMERIC_ERRORS as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except _DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
