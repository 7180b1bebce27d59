"""CSV, config, and checkpoint I/O with schema validation.

Every file written here starts with a version comment line so artifacts
are self-identifying. Readers tolerate missing version lines (hand-made
inputs) but reject mismatched versions, and report every failure as
``path:line: message``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from . import autodiff as ad
from .graphs import GraphBuildError, NodeSet
from .network import KrigingModel, ModelConfig

SCHEMA_VERSION = "pgkrig-v1"

_CKPT_MAGIC = b"pgkrig-ckpt-v1\n"


class SchemaError(ValueError):
    """A file violated its schema; message carries path and line."""


def version_line(kind: str) -> str:
    """Header comment stamped into every output file."""
    return f"# format: {SCHEMA_VERSION} {kind}"


def _fmt(value: float) -> str:
    """Shortest decimal that round-trips the exact float64 value."""
    return repr(float(value))


def _err(path, line_no: int | None, message: str) -> SchemaError:
    where = str(path) if line_no is None else f"{path}:{line_no}"
    return SchemaError(f"{where}: {message}")


def _read_lines(path) -> list[str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise SchemaError(f"{path}: {exc}") from exc
    return text.splitlines()


def _split_header(path, lines: list[str], header: str):
    """Validate comments and the header row; yield (line_no, row) pairs.

    Returns (comment_lines, data_rows) where data_rows are
    (line_no, raw_line) tuples for everything after the header.
    """
    comments: list[tuple[int, str]] = []
    body_start = None
    header_no = None
    for i, line in enumerate(lines, start=1):
        if line.startswith("#"):
            comments.append((i, line))
            continue
        if not line.strip():
            raise _err(path, i, "blank line before header")
        header_no = i
        body_start = i + 1
        if line != header:
            raise _err(path, i, f"expected header {header!r}, got {line!r}")
        break
    if header_no is None:
        raise _err(path, None, f"missing header {header!r}")
    for i, line in comments:
        if line.startswith("# format: "):
            token = line[len("# format: "):].split()
            if not token or token[0] != SCHEMA_VERSION:
                raise _err(path, i, f"unsupported format version in {line!r}")
    rows = []
    for i, line in enumerate(lines[body_start - 1:], start=body_start):
        if not line.strip():
            if i < len(lines):
                raise _err(path, i, "blank line inside data")
            continue
        rows.append((i, line))
    return comments, rows


def _parse_int(path, line_no: int, text: str, column: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise _err(path, line_no, f"column {column}: {text!r} is not an integer") from None
    if value < 0:
        raise _err(path, line_no, f"column {column}: {value} is negative")
    return value


def _parse_float(path, line_no: int, text: str, column: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise _err(path, line_no, f"column {column}: {text!r} is not a number") from None
    if not np.isfinite(value):
        raise _err(path, line_no, f"column {column}: {value!r} is not finite")
    return value


def _fields(path, line_no: int, line: str, arity: int) -> list[str]:
    parts = line.split(",")
    if len(parts) != arity:
        raise _err(path, line_no, f"expected {arity} fields, got {len(parts)}")
    return parts


# ---------------------------------------------------------------------------
# node tables


def write_nodes(path, positions: np.ndarray, kind: str = "nodes") -> None:
    """Write a node table `node_id,x_km,y_km`; row k is node k."""
    positions = np.asarray(positions, dtype=np.float64)
    lines = [version_line(kind), "node_id,x_km,y_km"]
    for k, (x, y) in enumerate(positions):
        lines.append(f"{k},{_fmt(x)},{_fmt(y)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_nodes(path) -> NodeSet:
    """Read a node table; ids must be dense 0..N-1 (any row order)."""
    lines = _read_lines(path)
    _, rows = _split_header(path, lines, "node_id,x_km,y_km")
    if not rows:
        raise _err(path, None, "no node rows")
    entries = {}
    for line_no, line in rows:
        f = _fields(path, line_no, line, 3)
        node = _parse_int(path, line_no, f[0], "node_id")
        if node in entries:
            raise _err(path, line_no, f"duplicate node_id {node}")
        entries[node] = (_parse_float(path, line_no, f[1], "x_km"),
                         _parse_float(path, line_no, f[2], "y_km"))
    n = len(entries)
    if sorted(entries) != list(range(n)):
        raise _err(path, None, f"node_ids must be dense 0..{n - 1}")
    positions = np.array([entries[k] for k in range(n)], dtype=np.float64)
    try:
        return NodeSet(positions)
    except GraphBuildError as exc:
        raise _err(path, None, str(exc)) from exc


# ---------------------------------------------------------------------------
# long-format time series tables


def _assemble(path, triples, n_value_cols: int):
    """Dense (T, K, V) assembly from (time, node, values...) rows.

    Node ids may be any subset; every present node must cover every
    timestep 0..T-1 exactly once.
    """
    times = sorted({t for t, _, _ in triples})
    ids = sorted({node for _, node, _ in triples})
    t_count, k_count = len(times), len(ids)
    if times != list(range(t_count)):
        raise _err(path, None, f"times must be contiguous 0..{t_count - 1}")
    id_pos = {node: k for k, node in enumerate(ids)}
    values = np.full((t_count, k_count, n_value_cols), np.nan)
    for t, node, vals in triples:
        if not np.all(np.isnan(values[t, id_pos[node]])):
            raise _err(path, None, f"duplicate row for time {t}, node {node}")
        values[t, id_pos[node]] = vals
    if np.isnan(values).any():
        t, k = np.argwhere(np.isnan(values[:, :, 0]))[0]
        raise _err(path, None, f"missing row for time {t}, node {ids[k]}")
    return np.asarray(ids, dtype=np.int64), values


def write_values(path, values: np.ndarray, column: str,
                 node_ids: np.ndarray | None = None, kind: str | None = None) -> None:
    """Write `time,node_id,<column>` rows from a (T, K) array."""
    values = np.asarray(values, dtype=np.float64)
    t_count, k_count = values.shape
    ids = np.arange(k_count) if node_ids is None else np.asarray(node_ids)
    lines = [version_line(kind or column), f"time,node_id,{column}"]
    for t in range(t_count):
        for k in range(k_count):
            lines.append(f"{t},{ids[k]},{_fmt(values[t, k])}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_values(path, column: str) -> tuple[np.ndarray, np.ndarray]:
    """Read `time,node_id,<column>`; returns (sorted ids, (T, K) values)."""
    lines = _read_lines(path)
    _, rows = _split_header(path, lines, f"time,node_id,{column}")
    if not rows:
        raise _err(path, None, "no data rows")
    triples = []
    for line_no, line in rows:
        f = _fields(path, line_no, line, 3)
        triples.append((_parse_int(path, line_no, f[0], "time"),
                        _parse_int(path, line_no, f[1], "node_id"),
                        (_parse_float(path, line_no, f[2], column),)))
    ids, values = _assemble(path, triples, 1)
    return ids, values[:, :, 0]


def write_wind(path, wind: np.ndarray, node_ids: np.ndarray | None = None) -> None:
    """Write `time,node_id,u_ms,v_ms` rows from a (T, K, 2) array."""
    wind = np.asarray(wind, dtype=np.float64)
    t_count, k_count = wind.shape[0], wind.shape[1]
    ids = np.arange(k_count) if node_ids is None else np.asarray(node_ids)
    lines = [version_line("wind"), "time,node_id,u_ms,v_ms"]
    for t in range(t_count):
        for k in range(k_count):
            lines.append(f"{t},{ids[k]},{_fmt(wind[t, k, 0])},{_fmt(wind[t, k, 1])}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_wind(path) -> tuple[np.ndarray, np.ndarray]:
    """Read a wind table; returns (sorted ids, (T, K, 2) array)."""
    lines = _read_lines(path)
    _, rows = _split_header(path, lines, "time,node_id,u_ms,v_ms")
    if not rows:
        raise _err(path, None, "no data rows")
    triples = []
    for line_no, line in rows:
        f = _fields(path, line_no, line, 4)
        triples.append((_parse_int(path, line_no, f[0], "time"),
                        _parse_int(path, line_no, f[1], "node_id"),
                        (_parse_float(path, line_no, f[2], "u_ms"),
                         _parse_float(path, line_no, f[3], "v_ms"))))
    return _assemble(path, triples, 2)


def write_aod(path, values: np.ndarray, valid: np.ndarray,
              node_ids: np.ndarray | None = None) -> None:
    """Write `time,node_id,aod,valid` rows; valid bits are 0/1."""
    values = np.asarray(values, dtype=np.float64)
    valid = np.asarray(valid, dtype=np.float64)
    t_count, k_count = values.shape
    ids = np.arange(k_count) if node_ids is None else np.asarray(node_ids)
    lines = [version_line("aod"), "time,node_id,aod,valid"]
    for t in range(t_count):
        for k in range(k_count):
            lines.append(f"{t},{ids[k]},{_fmt(values[t, k])},{int(valid[t, k])}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_aod(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Read an AOD table; returns (ids, (T, K) values, (T, K) 0/1 mask)."""
    lines = _read_lines(path)
    _, rows = _split_header(path, lines, "time,node_id,aod,valid")
    if not rows:
        raise _err(path, None, "no data rows")
    triples = []
    for line_no, line in rows:
        f = _fields(path, line_no, line, 4)
        bit = _parse_int(path, line_no, f[3], "valid")
        if bit not in (0, 1):
            raise _err(path, line_no, f"column valid: {bit} is not 0 or 1")
        triples.append((_parse_int(path, line_no, f[0], "time"),
                        _parse_int(path, line_no, f[1], "node_id"),
                        (_parse_float(path, line_no, f[2], "aod"), float(bit))))
    ids, values = _assemble(path, triples, 2)
    return ids, values[:, :, 0], values[:, :, 1]


# ---------------------------------------------------------------------------
# grid geometry and grid-side inputs


@dataclass(frozen=True)
class GridGeometry:
    """Raster layout: cell k sits at ((k % nx) + 0.5, (k // nx) + 0.5) * cell_km."""

    nx: int
    ny: int
    cell_km: float

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    def positions(self) -> np.ndarray:
        ix = np.arange(self.nx)
        iy = np.arange(self.ny)
        gx, gy = np.meshgrid(ix, iy)
        return np.stack([(gx.ravel() + 0.5) * self.cell_km,
                         (gy.ravel() + 0.5) * self.cell_km], axis=1)


def write_grid_nodes(path, geometry: GridGeometry) -> None:
    """Write `cell_id,x_km,y_km` for every cell plus a geometry comment."""
    lines = [version_line("grid"),
             f"# grid: nx={geometry.nx} ny={geometry.ny} cell_km={_fmt(geometry.cell_km)}",
             "cell_id,x_km,y_km"]
    for k, (x, y) in enumerate(geometry.positions()):
        lines.append(f"{k},{_fmt(x)},{_fmt(y)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_grid_nodes(path) -> GridGeometry:
    """Read a grid table; the geometry comment is required and verified."""
    lines = _read_lines(path)
    comments, rows = _split_header(path, lines, "cell_id,x_km,y_km")
    geometry = None
    for line_no, line in comments:
        if line.startswith("# grid: "):
            parts = dict(token.split("=", 1) for token in line[len("# grid: "):].split())
            try:
                geometry = GridGeometry(nx=int(parts["nx"]), ny=int(parts["ny"]),
                                        cell_km=float(parts["cell_km"]))
            except (KeyError, ValueError):
                raise _err(path, line_no, f"malformed grid comment {line!r}") from None
    if geometry is None:
        raise _err(path, None, "missing `# grid: nx=.. ny=.. cell_km=..` comment")
    if geometry.nx < 1 or geometry.ny < 1 or not geometry.cell_km > 0:
        raise _err(path, None, f"degenerate grid {geometry}")
    if len(rows) != geometry.n_cells:
        raise _err(path, None,
                   f"grid comment promises {geometry.n_cells} cells, found {len(rows)} rows")
    expected = geometry.positions()
    for line_no, line in rows:
        f = _fields(path, line_no, line, 3)
        cell = _parse_int(path, line_no, f[0], "cell_id")
        if cell >= geometry.n_cells:
            raise _err(path, line_no, f"cell_id {cell} outside grid")
        x = _parse_float(path, line_no, f[1], "x_km")
        y = _parse_float(path, line_no, f[2], "y_km")
        if x != expected[cell, 0] or y != expected[cell, 1]:
            raise _err(path, line_no, f"cell {cell} position disagrees with grid comment")
    return geometry


def write_grid_inputs(path, wind: np.ndarray, emissions: np.ndarray) -> None:
    """Write `time,cell_id,u_ms,v_ms,emission` for every cell and hour."""
    wind = np.asarray(wind, dtype=np.float64)
    emissions = np.asarray(emissions, dtype=np.float64)
    t_count, g_count = emissions.shape
    lines = [version_line("grid-inputs"), "time,cell_id,u_ms,v_ms,emission"]
    for t in range(t_count):
        for k in range(g_count):
            lines.append(f"{t},{k},{_fmt(wind[t, k, 0])},{_fmt(wind[t, k, 1])},"
                         f"{_fmt(emissions[t, k])}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_grid_inputs(path) -> tuple[np.ndarray, np.ndarray]:
    """Read grid dynamics; cell ids must be dense. Returns (wind, emissions)."""
    lines = _read_lines(path)
    _, rows = _split_header(path, lines, "time,cell_id,u_ms,v_ms,emission")
    if not rows:
        raise _err(path, None, "no data rows")
    triples = []
    for line_no, line in rows:
        f = _fields(path, line_no, line, 5)
        triples.append((_parse_int(path, line_no, f[0], "time"),
                        _parse_int(path, line_no, f[1], "cell_id"),
                        (_parse_float(path, line_no, f[2], "u_ms"),
                         _parse_float(path, line_no, f[3], "v_ms"),
                         _parse_float(path, line_no, f[4], "emission"))))
    ids, values = _assemble(path, triples, 3)
    if not np.array_equal(ids, np.arange(len(ids))):
        raise _err(path, None, f"cell_ids must be dense 0..{len(ids) - 1}")
    return values[:, :, :2].copy(), values[:, :, 2].copy()


# ---------------------------------------------------------------------------
# metric tables


def write_metrics_log(path, records) -> None:
    """Write the per-epoch training log `epoch,train_loss,val_mae,val_rmse,val_r2`."""
    lines = [version_line("train-log"), "epoch,train_loss,val_mae,val_rmse,val_r2"]
    for rec in records:
        r2_cell = "" if rec.val_r2 is None else _fmt(rec.val_r2)
        lines.append(f"{rec.epoch},{_fmt(rec.train_loss)},{_fmt(rec.val_mae)},"
                     f"{_fmt(rec.val_rmse)},{r2_cell}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def report_lines(node_scores, pooled) -> list[str]:
    """Metric report rows `node_id,mae,rmse,r2`; the pooled row uses id -1."""
    lines = [version_line("report"), "node_id,mae,rmse,r2"]
    for score in list(node_scores) + [pooled]:
        r2_cell = "" if score.r2 is None else _fmt(score.r2)
        lines.append(f"{score.node_id},{_fmt(score.mae)},{_fmt(score.rmse)},{r2_cell}")
    return lines


def write_report(path, node_scores, pooled) -> None:
    Path(path).write_text("\n".join(report_lines(node_scores, pooled)) + "\n",
                          encoding="utf-8")


def write_triplets(path, matrix) -> None:
    """Export a sparse operator as `i j value` lines for inspection."""
    coo = matrix.tocoo()
    order = np.lexsort((coo.col, coo.row))
    lines = [version_line("triplets")]
    for k in order:
        lines.append(f"{coo.row[k]} {coo.col[k]} {_fmt(coo.data[k])}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# checkpoints


@dataclass(frozen=True)
class Checkpoint:
    """A trained model plus the input statistics inference must reuse."""

    model: KrigingModel
    norm_mean: np.ndarray  # (5,) per-channel mean
    norm_std: np.ndarray  # (5,) per-channel std
    meta: dict


def save_checkpoint(path, model: KrigingModel, norm_mean: np.ndarray,
                    norm_std: np.ndarray, meta: dict) -> None:
    """Serialize deterministically: JSON header + raw little-endian f8 buffers.

    No timestamps and sorted keys, so identical values produce identical
    bytes; buffers round-trip bit-exactly.
    """
    arrays = [("param:" + name, model.params[name].data)
              for name in sorted(model.params)]
    arrays.append(("norm:mean", np.asarray(norm_mean, dtype=np.float64)))
    arrays.append(("norm:std", np.asarray(norm_std, dtype=np.float64)))
    header = {
        "config": model.config.to_dict(),
        "arrays": [{"name": name, "shape": list(data.shape)} for name, data in arrays],
        "meta": meta,
    }
    try:
        blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"checkpoint meta is not JSON-serializable: {exc}") from exc
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(blob)
        fh.write(b"\n")
        for _, data in arrays:
            fh.write(np.ascontiguousarray(data, dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    """Read a checkpoint; value-exact inverse of save_checkpoint."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise SchemaError(f"{path}: {exc}") from exc
    if not raw.startswith(_CKPT_MAGIC):
        raise _err(path, None, "not a checkpoint (bad magic)")
    end = raw.find(b"\n", len(_CKPT_MAGIC))
    if end < 0:
        raise _err(path, None, "truncated checkpoint header")
    try:
        header = json.loads(raw[len(_CKPT_MAGIC):end].decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        entries = [(str(e["name"]), tuple(int(s) for s in e["shape"]))
                   for e in header["arrays"]]
        meta = header["meta"]
    except (KeyError, TypeError, ValueError) as exc:
        raise _err(path, None, f"malformed checkpoint header: {exc}") from exc
    offset = end + 1
    buffers = {}
    for name, shape in entries:
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(raw):
            raise _err(path, None, f"truncated buffer for {name}")
        buffers[name] = np.frombuffer(raw, dtype="<f8", count=count,
                                      offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise _err(path, None, f"{len(raw) - offset} trailing bytes after buffers")
    try:
        params = {name[len("param:"):]: ad.Tensor(data, requires_grad=True)
                  for name, data in buffers.items() if name.startswith("param:")}
        model = KrigingModel(config, params=params)
        norm_mean = buffers["norm:mean"]
        norm_std = buffers["norm:std"]
    except (KeyError, ValueError) as exc:
        raise _err(path, None, f"invalid checkpoint contents: {exc}") from exc
    return Checkpoint(model=model, norm_mean=norm_mean, norm_std=norm_std, meta=meta)


# ---------------------------------------------------------------------------
# run configuration


_CONFIG_SECTIONS = ("model", "train", "split", "loss", "graph")


def load_config(path) -> dict:
    """Read the nested key/value run configuration file.

    Returns a dict with only known top-level sections; each section is a
    flat mapping handed to the matching constructor downstream.
    """
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise SchemaError(f"{path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise SchemaError(f"{path}: invalid config syntax: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise _err(path, None, f"config root must be a mapping, got {type(data).__name__}")
    unknown = sorted(set(data) - set(_CONFIG_SECTIONS))
    if unknown:
        raise _err(path, None, f"unknown config sections {unknown}; "
                               f"expected subset of {list(_CONFIG_SECTIONS)}")
    for section, value in data.items():
        if not isinstance(value, dict):
            raise _err(path, None, f"section {section!r} must be a mapping")
    return data
