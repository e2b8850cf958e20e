import numpy as np
import pytest

from pastquantum.errors import InvalidRecord, NonFiniteIncrement
from pastquantum.filtering import sample_diffusive_record, sample_jump_record
from pastquantum.model import ScenarioConfig, build_jumping_atom, build_rabi_spin
from pastquantum.qops import DensityMatrix
from pastquantum.recordio import (
    load_matrix_series,
    load_record,
    save_columns,
    save_record,
    save_trajectory,
    sidecar_path,
)
from oracles import DOWN, UP


def test_diffusive_record_round_trip_is_bit_exact(tmp_path):
    m = build_rabi_spin(3j, 2.0)
    record, traj = sample_diffusive_record(m, DensityMatrix(UP), 0.5, 1e-3, seed=7)
    path = tmp_path / "record.csv"
    save_record(path, record, {"note": "x"})
    back = load_record(path)
    assert back.dY.tobytes() == record.dY.tobytes()
    assert back.dt == record.dt and back.n_steps == record.n_steps and back.seed == 7
    assert back.model_fingerprint == m.fingerprint()
    assert back.metadata["note"] == "x"
    save_trajectory(tmp_path / "traj.csv", traj)
    times, ops, logs = load_matrix_series(tmp_path / "traj.csv")
    assert ops.tobytes() == traj.ops.tobytes()
    np.testing.assert_array_equal(logs, traj.log_norms)
    np.testing.assert_array_equal(times, traj.times)


def test_counting_record_round_trip(tmp_path):
    m = build_jumping_atom(ScenarioConfig())
    rho0 = DensityMatrix(np.kron(np.eye(2) / 2, DOWN))
    record, _, _ = sample_jump_record(m, rho0, 20.0, 1e-2, seed=1)
    path = tmp_path / "jumps.csv"
    save_record(path, record)
    back = load_record(path)
    np.testing.assert_array_equal(back.dN, record.dN)
    assert back.dN.sum() > 0
    assert path.read_text().splitlines()[0] == "step,t,dN_1"


def test_empty_record_round_trip(tmp_path):
    m = build_rabi_spin(3j, 2.0)
    record, _ = sample_diffusive_record(m, DensityMatrix(UP), 0.0, 1e-3, seed=7)
    path = tmp_path / "empty.csv"
    save_record(path, record)
    back = load_record(path)
    assert back.n_steps == 0 and back.dY.size == 0


def write_pair(tmp_path, body, meta='{"dt": 0.001, "n_steps": 2, "kind": "diffusive"}'):
    path = tmp_path / "bad.csv"
    path.write_text(body)
    sidecar_path(path).write_text(meta)
    return path


def test_malformed_records_are_rejected(tmp_path):
    with pytest.raises(InvalidRecord):
        load_record(write_pair(tmp_path, "step,t,dY\n0,0,0.1\n"))
    with pytest.raises(InvalidRecord):
        load_record(write_pair(tmp_path, "step,t,dX\n0,0,0.1\n1,0.001,0.2\n"))
    with pytest.raises(InvalidRecord):
        load_record(write_pair(tmp_path, "step,t,dY\n0,0,abc\n1,0.001,0.2\n"))
    with pytest.raises(InvalidRecord):
        load_record(write_pair(tmp_path, "", ))
    with pytest.raises(InvalidRecord):
        load_record(write_pair(tmp_path, "step,t,dY\n", meta='{"n_steps": 0}'))
    with pytest.raises(NonFiniteIncrement):
        load_record(write_pair(tmp_path, "step,t,dY\n0,0,nan\n1,0.001,0.2\n"))
    with pytest.raises(InvalidRecord):
        meta = '{"dt": 0.01, "n_steps": 2, "kind": "counting", "n_counting_channels": 1}'
        load_record(write_pair(tmp_path, "step,t,dN_1\n0,0,0\n1,0.01,3\n", meta=meta))


def test_save_columns_keeps_integers(tmp_path):
    path = tmp_path / "c.csv"
    save_columns(path, ["n", "x"], [np.array([1, 2]), np.array([0.1, 1 / 3])])
    lines = path.read_text().splitlines()
    assert lines == ["n,x", "1,0.10000000000000001", "2,0.33333333333333331"]
