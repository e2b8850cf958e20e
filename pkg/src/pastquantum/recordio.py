"""CSV/JSON persistence for records, trajectories and derived series.

Floats are written with 17 significant digits so that every binary64 value
survives a round trip unchanged.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .errors import InvalidRecord
from .filtering import HiddenTruth, MeasurementRecord, StateTrajectory

FLOAT_FMT = "{:.17g}"


def _f(x) -> str:
    return FLOAT_FMT.format(float(x))


def sidecar_path(csv_path) -> Path:
    return Path(csv_path).with_suffix(".json")


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def save_record(path, record: MeasurementRecord, extra_metadata: dict | None = None):
    """Write ``record`` as CSV plus a JSON sidecar next to it."""
    path = Path(path)
    n_ch = record.dN.shape[-1] if record.dN.ndim == 2 else 0
    diffusive = n_ch == 0
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if diffusive:
            w.writerow(["step", "t", "dY"])
            for n in range(record.n_steps):
                w.writerow([n, _f(n * record.dt), _f(record.dY[n])])
        else:
            w.writerow(["step", "t"] + [f"dN_{j + 1}" for j in range(n_ch)])
            for n in range(record.n_steps):
                w.writerow([n, _f(n * record.dt)] + [int(v) for v in record.dN[n]])
    meta = {
        "dt": record.dt,
        "n_steps": record.n_steps,
        "seed": record.seed,
        "model_fingerprint": record.model_fingerprint,
        "kind": "diffusive" if diffusive else "counting",
        "n_counting_channels": n_ch,
        **record.metadata,
        **(extra_metadata or {}),
    }
    write_json(sidecar_path(path), meta)


def load_record(path) -> MeasurementRecord:
    path = Path(path)
    meta = read_json(sidecar_path(path))
    try:
        dt = float(meta["dt"])
        n_steps = int(meta["n_steps"])
        kind = meta["kind"]
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidRecord(f"record metadata incomplete: {exc}") from None
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise InvalidRecord(f"{path} has no header")
    header, body = rows[0], rows[1:]
    if len(body) != n_steps:
        raise InvalidRecord(f"{path} holds {len(body)} rows, metadata says {n_steps}")
    try:
        if kind == "diffusive":
            if header != ["step", "t", "dY"]:
                raise InvalidRecord(f"unexpected header {header}")
            dY = np.array([float(r[2]) for r in body])
            dN = np.zeros((n_steps, 0), dtype=np.int64)
        else:
            n_ch = int(meta.get("n_counting_channels", len(header) - 2))
            if header != ["step", "t"] + [f"dN_{j + 1}" for j in range(n_ch)]:
                raise InvalidRecord(f"unexpected header {header}")
            dY = np.zeros(0)
            dN = np.array([[int(v) for v in r[2:]] for r in body], dtype=np.int64).reshape(n_steps, n_ch)
    except (IndexError, ValueError) as exc:
        raise InvalidRecord(f"malformed row in {path}: {exc}") from None
    skip = {"dt", "n_steps", "seed", "model_fingerprint", "kind", "n_counting_channels"}
    return MeasurementRecord(
        dt, n_steps, dY, dN, meta.get("seed"), meta.get("model_fingerprint", ""),
        {k: v for k, v in meta.items() if k not in skip},
    )


def save_matrix_series(path, times, ops, log_norms):
    """Flattened complex matrices, one grid point per row, re/im column pairs."""
    ops = np.asarray(ops)
    d = ops.shape[-1]
    cols = []
    for i in range(d):
        for j in range(d):
            cols += [f"re_{i}{j}", f"im_{i}{j}"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "t", "log_norm"] + cols)
        for n, t in enumerate(times):
            flat = ops[n].reshape(-1)
            vals = []
            for z in flat:
                vals += [_f(z.real), _f(z.imag)]
            w.writerow([n, _f(t), _f(log_norms[n])] + vals)


def load_matrix_series(path):
    """Inverse of ``save_matrix_series``: ``(times, ops, log_norms)``."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    n_entries = (data.shape[1] - 3) // 2
    d = int(round(np.sqrt(n_entries)))
    if d * d != n_entries:
        raise InvalidRecord(f"{path} does not hold square matrices")
    ops = (data[:, 3::2] + 1j * data[:, 4::2]).reshape(-1, d, d)
    return data[:, 1], ops, data[:, 2]


def save_trajectory(path, traj: StateTrajectory):
    save_matrix_series(path, traj.times, traj.ops, traj.log_norms)


def save_truth(path, record: MeasurementRecord, truth: HiddenTruth):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "t", "site"])
        if truth.site is not None:
            for n, s in enumerate(truth.site):
                w.writerow([n, _f(n * record.dt), int(s)])


def save_columns(path, header, columns):
    """Write equal-length numeric columns; integers stay integers."""
    columns = [np.asarray(c) for c in columns]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in zip(*columns):
            w.writerow([int(v) if np.issubdtype(type(v), np.integer) else _f(v) for v in row])
