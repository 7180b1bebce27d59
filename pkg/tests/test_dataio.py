"""Schema, round-trip, and checkpoint determinism tests for dataio."""

import numpy as np
import pytest

from pgkrig import dataio
from pgkrig.dataio import SchemaError
from pgkrig.metrics import NodeScore
from pgkrig.network import KrigingModel, ModelConfig


# ---------------------------------------------------------------------------
# node tables


def test_nodes_round_trip_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    positions = rng.uniform(0, 300, size=(7, 2))
    path = tmp_path / "nodes.csv"
    dataio.write_nodes(path, positions)
    nodes = dataio.read_nodes(path)
    assert np.array_equal(nodes.positions, positions)
    assert np.array_equal(nodes.node_ids, np.arange(7))


def test_nodes_file_starts_with_version_line(tmp_path):
    path = tmp_path / "nodes.csv"
    dataio.write_nodes(path, np.zeros((2, 2)) + [[0, 0], [1, 1]])
    lines = path.read_text().splitlines()
    assert lines[0] == f"# format: {dataio.SCHEMA_VERSION} nodes"
    assert lines[1] == "node_id,x_km,y_km"


def test_nodes_accepts_shuffled_rows(tmp_path):
    path = tmp_path / "nodes.csv"
    path.write_text("node_id,x_km,y_km\n2,20.0,0.0\n0,0.0,0.0\n1,10.0,0.0\n")
    nodes = dataio.read_nodes(path)
    assert nodes.positions[2, 0] == 20.0


def test_nodes_duplicate_id_reports_line(tmp_path):
    path = tmp_path / "nodes.csv"
    path.write_text("node_id,x_km,y_km\n0,0.0,0.0\n0,5.0,0.0\n")
    with pytest.raises(SchemaError, match="nodes.csv:3.*duplicate node_id 0"):
        dataio.read_nodes(path)


def test_nodes_gap_in_ids_rejected(tmp_path):
    path = tmp_path / "nodes.csv"
    path.write_text("node_id,x_km,y_km\n0,0.0,0.0\n2,5.0,0.0\n")
    with pytest.raises(SchemaError, match="dense"):
        dataio.read_nodes(path)


def test_nodes_bad_float_reports_line_and_column(tmp_path):
    path = tmp_path / "nodes.csv"
    path.write_text("node_id,x_km,y_km\n0,0.0,0.0\n1,oops,0.0\n")
    with pytest.raises(SchemaError, match="nodes.csv:3.*x_km.*'oops'"):
        dataio.read_nodes(path)


def test_nodes_wrong_header(tmp_path):
    path = tmp_path / "nodes.csv"
    path.write_text("id,x,y\n0,0.0,0.0\n")
    with pytest.raises(SchemaError, match="expected header"):
        dataio.read_nodes(path)


def test_missing_file_raises_schema_error(tmp_path):
    with pytest.raises(SchemaError, match="never.csv"):
        dataio.read_nodes(tmp_path / "never.csv")


def test_version_mismatch_rejected(tmp_path):
    path = tmp_path / "nodes.csv"
    path.write_text("# format: pgkrig-v999 nodes\nnode_id,x_km,y_km\n0,0.0,0.0\n1,1.0,0.0\n")
    with pytest.raises(SchemaError, match="unsupported format version"):
        dataio.read_nodes(path)


def test_plain_file_without_version_line_accepted(tmp_path):
    path = tmp_path / "nodes.csv"
    path.write_text("node_id,x_km,y_km\n0,0.0,0.0\n1,1.0,0.0\n")
    assert dataio.read_nodes(path).n == 2


# ---------------------------------------------------------------------------
# long-format series


def test_values_round_trip_with_sparse_ids(tmp_path):
    rng = np.random.default_rng(1)
    values = rng.uniform(0, 80, size=(5, 3))
    path = tmp_path / "stations.csv"
    dataio.write_values(path, values, "pm25", node_ids=np.array([2, 5, 9]))
    ids, back = dataio.read_values(path, "pm25")
    assert np.array_equal(ids, [2, 5, 9])
    assert np.array_equal(back, values)


def test_values_exact_float_round_trip(tmp_path):
    # awkward decimals must survive the text round-trip bit for bit
    values = np.array([[0.1 + 0.2, 1e-17, 123456.789012345, -7.25e-300]])
    path = tmp_path / "vals.csv"
    dataio.write_values(path, values, "pm25")
    _, back = dataio.read_values(path, "pm25")
    assert np.array_equal(back, values)


def test_values_missing_row_detected(tmp_path):
    path = tmp_path / "vals.csv"
    path.write_text("time,node_id,pm25\n0,0,1.0\n0,1,2.0\n1,0,3.0\n")
    with pytest.raises(SchemaError, match="missing row for time 1, node 1"):
        dataio.read_values(path, "pm25")


def test_values_duplicate_row_detected(tmp_path):
    path = tmp_path / "vals.csv"
    path.write_text("time,node_id,pm25\n0,0,1.0\n0,0,2.0\n")
    with pytest.raises(SchemaError, match="duplicate row for time 0, node 0"):
        dataio.read_values(path, "pm25")


def test_values_non_contiguous_times_rejected(tmp_path):
    path = tmp_path / "vals.csv"
    path.write_text("time,node_id,pm25\n0,0,1.0\n2,0,2.0\n")
    with pytest.raises(SchemaError, match="contiguous"):
        dataio.read_values(path, "pm25")


def test_values_non_finite_rejected(tmp_path):
    path = tmp_path / "vals.csv"
    path.write_text("time,node_id,pm25\n0,0,inf\n")
    with pytest.raises(SchemaError, match="vals.csv:2.*not finite"):
        dataio.read_values(path, "pm25")


def test_wind_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    wind = rng.normal(0, 4, size=(6, 4, 2))
    path = tmp_path / "wind.csv"
    dataio.write_wind(path, wind)
    ids, back = dataio.read_wind(path)
    assert np.array_equal(ids, np.arange(4))
    assert np.array_equal(back, wind)


def test_aod_round_trip_and_bits(tmp_path):
    rng = np.random.default_rng(3)
    values = rng.uniform(0, 3, size=(4, 5))
    valid = (rng.uniform(size=(4, 5)) < 0.6).astype(float)
    path = tmp_path / "aod.csv"
    dataio.write_aod(path, values, valid)
    _, back_values, back_valid = dataio.read_aod(path)
    assert np.array_equal(back_values, values)
    assert np.array_equal(back_valid, valid)


def test_aod_bad_valid_bit(tmp_path):
    path = tmp_path / "aod.csv"
    path.write_text("time,node_id,aod,valid\n0,0,1.0,2\n")
    with pytest.raises(SchemaError, match="valid: 2 is not 0 or 1"):
        dataio.read_aod(path)


# ---------------------------------------------------------------------------
# grid geometry


def test_grid_nodes_round_trip(tmp_path):
    geometry = dataio.GridGeometry(nx=4, ny=3, cell_km=2.5)
    path = tmp_path / "grid.csv"
    dataio.write_grid_nodes(path, geometry)
    back = dataio.read_grid_nodes(path)
    assert back == geometry
    assert np.array_equal(back.positions(), geometry.positions())


def test_grid_nodes_missing_comment(tmp_path):
    path = tmp_path / "grid.csv"
    path.write_text("cell_id,x_km,y_km\n0,1.0,1.0\n")
    with pytest.raises(SchemaError, match="grid.*comment"):
        dataio.read_grid_nodes(path)


def test_grid_nodes_row_count_mismatch(tmp_path):
    path = tmp_path / "grid.csv"
    path.write_text("# grid: nx=2 ny=2 cell_km=1.0\ncell_id,x_km,y_km\n0,0.5,0.5\n")
    with pytest.raises(SchemaError, match="promises 4 cells, found 1"):
        dataio.read_grid_nodes(path)


def test_grid_nodes_position_disagreement(tmp_path):
    geometry = dataio.GridGeometry(nx=2, ny=1, cell_km=1.0)
    path = tmp_path / "grid.csv"
    dataio.write_grid_nodes(path, geometry)
    tampered = path.read_text().replace("1.5,0.5", "1.5,0.75")
    path.write_text(tampered)
    with pytest.raises(SchemaError, match="disagrees"):
        dataio.read_grid_nodes(path)


def test_grid_positions_row_major(tmp_path):
    geometry = dataio.GridGeometry(nx=3, ny=2, cell_km=2.0)
    positions = geometry.positions()
    # cell k = iy*nx + ix, centered at (ix+0.5, iy+0.5)*cell
    assert np.array_equal(positions[0], [1.0, 1.0])
    assert np.array_equal(positions[2], [5.0, 1.0])
    assert np.array_equal(positions[3], [1.0, 3.0])


def test_grid_inputs_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    wind = rng.normal(0, 3, size=(3, 6, 2))
    emissions = rng.uniform(0, 2, size=(3, 6))
    path = tmp_path / "grid_inputs.csv"
    dataio.write_grid_inputs(path, wind, emissions)
    back_wind, back_emissions = dataio.read_grid_inputs(path)
    assert np.array_equal(back_wind, wind)
    assert np.array_equal(back_emissions, emissions)


# ---------------------------------------------------------------------------
# metric tables


class _Rec:
    def __init__(self, epoch, train_loss, val_mae, val_rmse, val_r2):
        self.epoch = epoch
        self.train_loss = train_loss
        self.val_mae = val_mae
        self.val_rmse = val_rmse
        self.val_r2 = val_r2


def test_metrics_log_format(tmp_path):
    path = tmp_path / "log.csv"
    dataio.write_metrics_log(path, [_Rec(0, 2.5, 1.25, 1.5, 0.75),
                                    _Rec(1, 2.0, 1.0, 1.25, None)])
    lines = path.read_text().splitlines()
    assert lines[1] == "epoch,train_loss,val_mae,val_rmse,val_r2"
    assert lines[2] == "0,2.5,1.25,1.5,0.75"
    assert lines[3] == "1,2.0,1.0,1.25,"


def test_report_pooled_row_uses_minus_one(tmp_path):
    scores = [NodeScore(node_id=3, mae=1.0, rmse=1.5, r2=0.5)]
    pooled = NodeScore(node_id=-1, mae=1.0, rmse=1.5, r2=None)
    path = tmp_path / "report.csv"
    dataio.write_report(path, scores, pooled)
    lines = path.read_text().splitlines()
    assert lines[1] == "node_id,mae,rmse,r2"
    assert lines[2] == "3,1.0,1.5,0.5"
    assert lines[3] == "-1,1.0,1.5,"


def test_triplet_export_sorted(tmp_path):
    from scipy import sparse

    matrix = sparse.csr_matrix(np.array([[0.0, 2.0], [1.5, 0.0]]))
    path = tmp_path / "op.txt"
    dataio.write_triplets(path, matrix)
    lines = path.read_text().splitlines()
    assert lines[1] == "0 1 2.0"
    assert lines[2] == "1 0 1.5"


# ---------------------------------------------------------------------------
# checkpoints


def _small_model(seed=0):
    config = ModelConfig(hidden_dim=6, tcn_layers=2, gnn_layers=1, readout_hidden=5)
    return KrigingModel(config, seed=seed)


def test_checkpoint_round_trip_bitwise(tmp_path):
    model = _small_model()
    mean = np.array([0.0, 0.1, 0.2, 31.7, 0.0])
    std = np.array([1.0, 2.0, 0.5, 18.3, 1.0])
    meta = {"threshold_km": 12.0, "seed": 3, "aod_loss_active": True}
    path = tmp_path / "model.ckpt"
    dataio.save_checkpoint(path, model, mean, std, meta)
    ckpt = dataio.load_checkpoint(path)
    assert ckpt.meta == meta
    assert np.array_equal(ckpt.norm_mean, mean)
    assert np.array_equal(ckpt.norm_std, std)
    assert ckpt.model.config == model.config
    assert set(ckpt.model.params) == set(model.params)
    for name, tensor in model.params.items():
        assert np.array_equal(ckpt.model.params[name].data, tensor.data), name
        assert ckpt.model.params[name].requires_grad


def test_checkpoint_bytes_deterministic(tmp_path):
    model = _small_model(seed=9)
    mean = np.zeros(5)
    std = np.ones(5)
    path_a = tmp_path / "a.ckpt"
    path_b = tmp_path / "b.ckpt"
    dataio.save_checkpoint(path_a, model, mean, std, {"seed": 9})
    dataio.save_checkpoint(path_b, model, mean, std, {"seed": 9})
    assert path_a.read_bytes() == path_b.read_bytes()


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(SchemaError, match="bad magic"):
        dataio.load_checkpoint(path)


def test_checkpoint_truncated_buffer(tmp_path):
    model = _small_model()
    path = tmp_path / "model.ckpt"
    dataio.save_checkpoint(path, model, np.zeros(5), np.ones(5), {})
    raw = path.read_bytes()
    path.write_bytes(raw[:-16])
    with pytest.raises(SchemaError, match="truncated buffer"):
        dataio.load_checkpoint(path)


def test_checkpoint_trailing_bytes(tmp_path):
    model = _small_model()
    path = tmp_path / "model.ckpt"
    dataio.save_checkpoint(path, model, np.zeros(5), np.ones(5), {})
    path.write_bytes(path.read_bytes() + b"xxxx")
    with pytest.raises(SchemaError, match="trailing bytes"):
        dataio.load_checkpoint(path)


def test_checkpoint_rejects_unserializable_meta(tmp_path):
    model = _small_model()
    with pytest.raises(SchemaError, match="JSON"):
        dataio.save_checkpoint(tmp_path / "m.ckpt", model, np.zeros(5), np.ones(5),
                               {"bad": object()})


# ---------------------------------------------------------------------------
# run configuration


def test_load_config_sections(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("train:\n  epochs: 12\n  learning_rate: 0.001\n"
                    "model:\n  hidden_dim: 16\nloss:\n  lambda2: 0.2\n")
    config = dataio.load_config(path)
    assert config["train"]["epochs"] == 12
    assert config["model"]["hidden_dim"] == 16
    assert config["loss"]["lambda2"] == 0.2


def test_load_config_empty_file(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("")
    assert dataio.load_config(path) == {}


def test_load_config_unknown_section(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("trainer:\n  epochs: 1\n")
    with pytest.raises(SchemaError, match="unknown config sections.*trainer"):
        dataio.load_config(path)


def test_load_config_non_mapping_section(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("train: [1, 2]\n")
    with pytest.raises(SchemaError, match="must be a mapping"):
        dataio.load_config(path)


def test_load_config_non_mapping_root(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("- 1\n- 2\n")
    with pytest.raises(SchemaError, match="root must be a mapping"):
        dataio.load_config(path)
