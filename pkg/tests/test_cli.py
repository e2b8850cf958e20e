import json
import subprocess
import sys

import numpy as np
import pytest

from pastquantum.cli import main
from pastquantum.hmm import random_hmm, save_hmm


def write_config(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


SPIN = {"scenario": "rabi_spin", "parameters": {"t_end": 0.5, "dt": 1e-3}, "seed": 3}


def test_simulate_then_smooth(tmp_path, capsys):
    cfg = write_config(tmp_path, SPIN)
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "sim")]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["n_steps"] == 500
    assert (tmp_path / "sim" / "record.json").exists()
    smooth_cfg = write_config(tmp_path, {**SPIN, "record": "sim/record.csv", "write_trajectories": True}, "s.json")
    assert main(["smooth", "--config", str(smooth_cfg), "--out", str(tmp_path / "sm"), "--quiet"]) == 0
    lines = (tmp_path / "sm" / "series_z.csv").read_text().splitlines()
    assert lines[0] == "t,forward_mean,weak_re,weak_im" and len(lines) == 502
    assert (tmp_path / "sm" / "effect.csv").exists()


def test_simulate_is_reproducible(tmp_path):
    cfg = write_config(tmp_path, SPIN)
    for d in ("a", "b"):
        assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / d), "--quiet"]) == 0
    for f in ("record.csv", "record.json", "trajectory.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "c"), "--seed", "4", "--quiet"]) == 0
    assert (tmp_path / "a" / "record.csv").read_bytes() != (tmp_path / "c" / "record.csv").read_bytes()


def test_jumping_atom_pipeline(tmp_path):
    atom = {"scenario": "jumping_atom", "parameters": {"t_end": 5.0, "dt": 1e-2}, "seed": 1}
    cfg = write_config(tmp_path, atom)
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path), "--quiet"]) == 0
    assert (tmp_path / "truth.csv").read_text().startswith("step,t,site")
    cfg2 = write_config(tmp_path, {**atom, "record": "record.csv"}, "s.json")
    assert main(["smooth", "--config", str(cfg2), "--out", str(tmp_path / "sm"), "--quiet"]) == 0
    assert (tmp_path / "sm" / "sites.csv").read_text().startswith("t,filtered_P_b,smoothed_P_b")


def test_game_small_run(tmp_path, capsys):
    cfg = write_config(tmp_path, {"parameters": {"t_end": 1.0}, "seed": 2})
    assert main(["game", "--config", str(cfg), "--out", str(tmp_path), "--n", "10"]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["n"] == 10
    report = json.loads((tmp_path / "game_report.json").read_text())
    assert sum(report["past_prob_histogram"]) == 10 and len(report["bin_edges"]) == 21
    assert report["parameters"]["t0"] == 0.5


def test_hmm_check_bundled_and_from_file(tmp_path, capsys):
    assert main(["hmm-check", "--quiet"]) == 0
    rng = np.random.default_rng(0)
    save_hmm(tmp_path / "m.json", random_hmm(rng, 3, 2), rng.integers(0, 2, 15))
    cfg = write_config(tmp_path, {"hmm": "m.json"})
    assert main(["hmm-check", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    report = json.loads((tmp_path / "o" / "hmm_check.json").read_text())
    assert report["passed"] and report["T"] == 15


def test_hmm_check_impossible_sequence(tmp_path):
    model = {"transition": [[1, 0], [0, 1]], "emission": [[1, 0], [1, 0]], "initial": [0.5, 0.5],
             "observations": [1]}
    cfg = write_config(tmp_path, model)
    assert main(["hmm-check", "--config", str(cfg), "--quiet"]) == 2


@pytest.mark.parametrize(
    "cfg, code",
    [
        ({"scenario": "pendulum"}, 2),
        ({"parameters": {"k": -1}}, 2),
        ({"parameters": {"dt": 0.3}}, 2),
        ({"bogus": 1}, 2),
        ({"scheme": "rk4"}, 2),
        ({"parameters": {"dt": 0.2, "t_end": 0.4}}, 2),
    ],
)
def test_configuration_errors(tmp_path, capsys, cfg, code):
    path = write_config(tmp_path, cfg)
    assert main(["simulate", "--config", str(path), "--out", str(tmp_path), "--quiet"]) == code
    err = json.loads(capsys.readouterr().err)
    assert err["exit_code"] == code


def test_smooth_errors(tmp_path):
    cfg = write_config(tmp_path, SPIN)
    main(["simulate", "--config", str(cfg), "--out", str(tmp_path), "--quiet"])
    other = write_config(tmp_path, {**SPIN, "parameters": {"t_end": 0.5, "dt": 1e-3, "k": 1.0},
                                    "record": "record.csv"}, "o.json")
    assert main(["smooth", "--config", str(other), "--out", str(tmp_path / "x"), "--quiet"]) == 2
    missing = write_config(tmp_path, {**SPIN, "record": "nope.csv"}, "m.json")
    assert main(["smooth", "--config", str(missing), "--out", str(tmp_path / "x"), "--quiet"]) == 4
    norecord = write_config(tmp_path, SPIN, "n.json")
    assert main(["smooth", "--config", str(norecord), "--out", str(tmp_path / "x"), "--quiet"]) == 2


def test_bad_arguments(tmp_path):
    assert main(["game", "--n", "0", "--quiet"]) == 2
    assert main(["simulate", "--seed", "-1", "--quiet"]) == 2
    assert main(["simulate", "--config", str(tmp_path / "absent.json"), "--quiet"]) == 4
    (tmp_path / "broken.json").write_text("{")
    assert main(["simulate", "--config", str(tmp_path / "broken.json"), "--quiet"]) == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "pastquantum", "hmm-check", "--quiet"], capture_output=True)
    assert proc.returncode == 0
