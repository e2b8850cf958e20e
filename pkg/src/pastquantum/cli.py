"""Command-line front end: ``simulate``, ``smooth``, ``game`` and ``hmm-check``.

Every command reads one JSON run configuration::

    {
      "scenario": "rabi_spin" | "jumping_atom",
      "parameters": {...ScenarioConfig fields...},
      "scheme": "kraus" | "euler",
      "record": "out/record.csv",          # smooth
      "observables": ["z", "x"],           # smooth
      "write_trajectories": false,         # smooth
      "t0": 1.0, "n_trajectories": 10000,  # game
      "hmm": "model.json"                  # hmm-check
    }

Relative paths are resolved against the configuration file's directory.
Exit codes: 0 success, 2 configuration error, 3 numerical failure (including
a failed hmm-check), 4 I/O error.  Failures print a JSON object to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import recordio
from .errors import (
    FingerprintMismatch,
    ImpossibleObservation,
    InvalidParameter,
    InvalidRecord,
    PastQuantumError,
    StepTooLarge,
)
from .filtering import SCHEMES, sample_diffusive_record, sample_jump_record
from .hmm import check_equivalence, load_hmm
from .model import ScenarioConfig, build_jumping_atom, build_rabi_spin, jumping_atom_initial_state, pauli
from .paststate import GameConfig, expectation_series, guessing_game, pointer_probabilities, smooth
from .qops import DensityMatrix

log = logging.getLogger("pastquantum")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4
SCENARIOS = ("rabi_spin", "jumping_atom")
_KNOWN_KEYS = {"scenario", "parameters", "scheme", "record", "observables", "write_trajectories", "t0",
               "n_trajectories", "hmm", "seed"}


class ConfigError(InvalidParameter):
    pass


def load_config(path) -> tuple:
    """Return ``(config dict, base directory)``; an absent path gives defaults."""
    if path is None:
        return {}, Path.cwd()
    path = Path(path)
    try:
        cfg = recordio.read_json(path)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: configuration must be a JSON object")
    return cfg, path.parent


def _scenario(cfg: dict, seed_override=None) -> tuple:
    unknown = set(cfg) - _KNOWN_KEYS
    if unknown:
        raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
    name = cfg.get("scenario", "rabi_spin")
    if name not in SCENARIOS:
        raise ConfigError(f"scenario must be one of {SCENARIOS}, got {name!r}")
    params = dict(cfg.get("parameters", {}))
    if "seed" in cfg:
        params["seed"] = cfg["seed"]
    if seed_override is not None:
        params["seed"] = seed_override
    sc = ScenarioConfig.from_dict(params)
    scheme = cfg.get("scheme", "kraus")
    if scheme not in SCHEMES:
        raise ConfigError(f"scheme must be one of {SCHEMES}, got {scheme!r}")
    return name, sc, scheme


def _model_and_prior(name: str, sc: ScenarioConfig):
    if name == "rabi_spin":
        return build_rabi_spin(sc.chi, sc.k, sc.eta), DensityMatrix(np.diag([1.0, 0.0]).astype(complex))
    return build_jumping_atom(sc), jumping_atom_initial_state()


def _effective(name, sc, scheme, **extra) -> dict:
    return {"scenario": name, "parameters": sc.to_dict(), "scheme": scheme, **extra}


def _observable(label: str, dim: int):
    if label not in ("x", "y", "z"):
        raise ConfigError(f"observable must be one of x, y, z, got {label!r}")
    op = pauli(label)
    # the jumping atom carries the spin in its internal factor
    return op if dim == 2 else np.kron(np.eye(dim // 2), op)


def cmd_simulate(cfg: dict, base: Path, out: Path, seed=None, **_) -> dict:
    name, sc, scheme = _scenario(cfg, seed)
    model, rho0 = _model_and_prior(name, sc)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"config": _effective(name, sc, scheme)}
    if name == "rabi_spin":
        record, traj = sample_diffusive_record(model, rho0, sc.t_end, sc.dt, sc.seed, scheme=scheme)
        truth = None
    else:
        record, traj, truth = sample_jump_record(model, rho0, sc.t_end, sc.dt, sc.seed, scheme=scheme)
    recordio.save_record(out / "record.csv", record, meta)
    recordio.save_trajectory(out / "trajectory.csv", traj)
    files = ["record.csv", "record.json", "trajectory.csv"]
    if truth is not None:
        recordio.save_truth(out / "truth.csv", record, truth)
        files.append("truth.csv")
    summary = {"command": "simulate", "n_steps": record.n_steps, "files": files, **meta}
    if record.dN.size:
        summary["clicks"] = int(record.dN.sum())
    return summary


def cmd_smooth(cfg: dict, base: Path, out: Path, seed=None, **_) -> dict:
    name, sc, scheme = _scenario(cfg, seed)
    if "record" not in cfg:
        raise ConfigError("smooth needs a 'record' path")
    record = recordio.load_record(base / cfg["record"])
    if abs(record.dt - sc.dt) > 1e-15 * max(1.0, sc.dt):
        raise ConfigError(f"record dt {record.dt} differs from configured dt {sc.dt}")
    model, rho0 = _model_and_prior(name, sc)
    traj = smooth(record, model, rho0, scheme=scheme)
    out.mkdir(parents=True, exist_ok=True)
    default_obs = ["z", "x"] if name == "rabi_spin" else []
    files = []
    for label in cfg.get("observables", default_obs):
        series = expectation_series(traj, _observable(label, model.dim))
        fname = f"series_{label}.csv"
        recordio.save_columns(
            out / fname, ["t", "forward_mean", "weak_re", "weak_im"],
            [series.times, series.forward_mean, series.weak_value.real, series.weak_value.imag],
        )
        files.append(fname)
    summary = {"command": "smooth", "n_steps": record.n_steps,
               "config": _effective(name, sc, scheme, record=str(cfg["record"]))}
    if model.pointer is not None:
        filtered, smoothed = pointer_probabilities(traj, model.pointer)
        recordio.save_columns(out / "sites.csv", ["t", "filtered_P_b", "smoothed_P_b"],
                              [traj.times, filtered[:, 1], smoothed[:, 1]])
        files.append("sites.csv")
        summary["filtered_mean_step_variation"] = float(np.abs(np.diff(filtered[:, 1])).mean()) if record.n_steps else 0.0
        summary["smoothed_mean_step_variation"] = float(np.abs(np.diff(smoothed[:, 1])).mean()) if record.n_steps else 0.0
    if cfg.get("write_trajectories", False):
        recordio.save_trajectory(out / "forward.csv", traj.forward)
        recordio.save_matrix_series(out / "effect.csv", traj.times, traj.backward.ops, traj.backward.log_norms)
        files += ["forward.csv", "effect.csv"]
    summary["files"] = files
    recordio.write_json(out / "smooth_summary.json", summary)
    return summary


def cmd_game(cfg: dict, base: Path, out: Path, seed=None, n=None, **_) -> dict:
    name, sc, scheme = _scenario(cfg, seed)
    if name != "rabi_spin":
        raise ConfigError("the guessing game runs on the rabi_spin scenario")
    n_traj = int(n if n is not None else cfg.get("n_trajectories", 10_000))
    game = GameConfig(sc, cfg.get("t0"), n_traj, sc.seed, scheme)
    report = guessing_game(game)
    out.mkdir(parents=True, exist_ok=True)
    d = report.to_dict()
    recordio.write_json(out / "game_report.json", d)
    edges = report.bin_edges
    recordio.save_columns(out / "game_histogram.csv", ["bin_lo", "bin_hi", "forward_count", "past_count"],
                          [edges[:-1], edges[1:], report.forward_prob_histogram, report.past_prob_histogram])
    return {"command": "game", "files": ["game_report.json", "game_histogram.csv"],
            **{k: d[k] for k in ("forward_accuracy", "past_accuracy", "n", "seed", "failures")}}


def cmd_hmm_check(cfg: dict, base: Path, out: Path | None, **_) -> dict:
    if "transition" in cfg:
        model_path = None
    elif "hmm" in cfg:
        model_path = base / cfg["hmm"]
    else:
        model_path = resources.files("pastquantum") / "data" / "sample_hmm.json"
    if model_path is None:
        model, obs = _hmm_from_dict(cfg)
    else:
        model, obs = load_hmm(model_path)
    report = check_equivalence(model, obs)
    d = {"command": "hmm-check", "n_states": model.n_states, "T": int(len(obs)), **report.to_dict()}
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        recordio.write_json(out / "hmm_check.json", d)
    return d


def _hmm_from_dict(cfg: dict):
    from .hmm import HmmModel

    d = {k: v for k, v in cfg.items() if k not in ("observations", "description")}
    model = HmmModel.from_dict(d)
    return model, model.check_observations(np.asarray(cfg.get("observations", []), dtype=int))


COMMANDS = {"simulate": cmd_simulate, "smooth": cmd_smooth, "game": cmd_game, "hmm-check": cmd_hmm_check}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pastquantum", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON run configuration")
        p.add_argument("--out", type=Path, default=None if name == "hmm-check" else Path("out"),
                       help="output directory")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--n", type=int, help="override the number of trajectories (game)")
        p.add_argument("--quiet", action="store_true", help="suppress the JSON summary on stdout")
    return parser


def _fail(code: int, exc: BaseException) -> int:
    json.dump({"error": type(exc).__name__, "message": str(exc), "exit_code": code}, sys.stderr)
    sys.stderr.write("\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.WARNING, format="%(levelname)s %(message)s")
    if args.seed is not None and args.seed < 0:
        return _fail(EXIT_CONFIG, ConfigError("seed must be non-negative"))
    if args.n is not None and args.n < 1:
        return _fail(EXIT_CONFIG, ConfigError("--n must be positive"))
    try:
        cfg, base = load_config(args.config)
        summary = COMMANDS[args.command](cfg, base, args.out, seed=args.seed, n=args.n)
    except (InvalidParameter, InvalidRecord, FingerprintMismatch, ImpossibleObservation, StepTooLarge) as exc:
        return _fail(EXIT_CONFIG, exc)
    except PastQuantumError as exc:
        return _fail(EXIT_NUMERICAL, exc)
    except OSError as exc:
        return _fail(EXIT_IO, exc)
    if not args.quiet:
        json.dump(summary, sys.stdout, indent=2)
        sys.stdout.write("\n")
    if summary.get("passed") is False:
        return EXIT_NUMERICAL
    return EXIT_OK
