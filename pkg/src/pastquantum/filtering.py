"""Forward conditional evolution of the density matrix.

The propagator works on stacks of matrices of shape ``(B, d, d)`` so that
many independent trajectories advance in lock-step; single-trajectory
functions use ``B = 1``.  Every step applies a linear (unnormalised)
update, Hermitizes, divides out the trace and accumulates its log.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import (
    FingerprintMismatch,
    InvalidParameter,
    InvalidRecord,
    NonFiniteIncrement,
    StepTooLarge,
    ZeroProbabilityOutcome,
)
from .model import COUNTING, DIFFUSIVE, Channel, Model
from .qops import PROB_FLOOR, DensityMatrix, check_projectors, dag, hermitize

STABILITY_LIMIT = 0.1
MAX_CLICK_PROBABILITY = 0.1


def trajectory_rng(base_seed: int, index: int) -> np.random.Generator:
    """Independent stream for trajectory ``index`` of a run seeded ``base_seed``."""
    return np.random.default_rng(np.random.SeedSequence(int(base_seed), spawn_key=(int(index),)))


def _trace(x: np.ndarray) -> np.ndarray:
    return np.trace(x, axis1=-2, axis2=-1).real


SCHEMES = ("euler", "kraus")


class Propagator:
    """Precomputed one-step linear maps for ``model`` at step ``dt``.

    ``forward`` is one step of the linear filtering equation and ``backward``
    is its exact Hilbert-Schmidt adjoint, so that
    ``Tr(forward(rho) E) == Tr(rho backward(E))`` for the same increments.
    A click in counting channel ``j`` replaces the whole step by
    ``L_j rho L_j^dag`` (resp. ``L_j^dag E L_j``).

    ``scheme="kraus"`` is the explicit first-order step of the linear
    equation.  It does not preserve positivity: for pure states under
    homodyne probing eigenvalues wander below zero by ``O(sqrt(k dt T))``.
    ``scheme="kraus"`` uses ``M rho M^dag`` with
    ``M = 1 - (iH + sum L^dag L / 2) dt + sqrt(eta) c dY`` plus the
    remaining dissipator sandwiches; it agrees with Euler to first order in
    the Ito sense and keeps every state positive.
    """

    def __init__(self, model: Model, dt: float, scheme: str = "euler"):
        if not dt > 0:
            raise InvalidParameter(f"dt must be positive, got {dt}")
        if scheme not in SCHEMES:
            raise InvalidParameter(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
        if dt * model.rate_scale() > STABILITY_LIMIT:
            raise StepTooLarge(f"dt * max(|H|, |sum L^dag L|) = {dt * model.rate_scale():.3g} > {STABILITY_LIMIT}")
        self.model = model
        self.dt = dt
        self.scheme = scheme
        self.A = model.drift_operator
        self.Ad = dag(self.A)
        self.R = model.record_operator
        self.jumps = [ch.lindblad for ch in model.counting]
        self.sandwich = []
        for ch in model.channels:
            if ch.kind == COUNTING:
                continue
            weight = 1.0
            if scheme == "kraus" and ch.kind == DIFFUSIVE:
                weight = 1.0 - ch.eta
            if weight > 0:
                self.sandwich.append(np.sqrt(weight) * ch.lindblad)

    def _kraus(self, dY):
        d = self.A.shape[0]
        M = np.eye(d) + self.A * self.dt
        if self.R is not None and dY is not None:
            M = M + self.R * np.asarray(dY)[..., None, None]
        return M

    def forward(self, rho, dY=None, clicks=None):
        dt = self.dt
        if self.scheme == "kraus":
            M = self._kraus(dY)
            out = M @ rho @ dag(M)
        else:
            out = rho + (self.A @ rho + rho @ self.Ad) * dt
            if self.R is not None and dY is not None:
                out = out + (self.R @ rho + rho @ dag(self.R)) * np.asarray(dY)[..., None, None]
        for L in self.sandwich:
            out = out + (L @ rho @ dag(L)) * dt
        if clicks is not None and self.jumps:
            for j, L in enumerate(self.jumps):
                hit = (np.asarray(clicks) == j)[..., None, None]
                if hit.any():
                    out = np.where(hit, L @ rho @ dag(L), out)
        return hermitize(out)

    def backward(self, E, dY=None, clicks=None):
        dt = self.dt
        if self.scheme == "kraus":
            M = self._kraus(dY)
            out = dag(M) @ E @ M
        else:
            out = E + (self.Ad @ E + E @ self.A) * dt
            if self.R is not None and dY is not None:
                out = out + (dag(self.R) @ E + E @ self.R) * np.asarray(dY)[..., None, None]
        for L in self.sandwich:
            out = out + (dag(L) @ E @ L) * dt
        if clicks is not None and self.jumps:
            for j, L in enumerate(self.jumps):
                hit = (np.asarray(clicks) == j)[..., None, None]
                if hit.any():
                    out = np.where(hit, dag(L) @ E @ L, out)
        return hermitize(out)


def normalize_states(x: np.ndarray):
    """Divide each matrix in the stack by its trace; return (matrices, log traces)."""
    tr = _trace(x)
    if np.any(~np.isfinite(tr)) or np.any(tr <= PROB_FLOOR):
        raise ZeroProbabilityOutcome(f"state trace underflow (min {np.min(tr):.3e})")
    return x / tr[..., None, None], np.log(tr)


def _check_increments(dY):
    if dY is not None and not np.all(np.isfinite(dY)):
        raise NonFiniteIncrement("record increment is not finite")


def clicks_from_counts(dN: np.ndarray) -> np.ndarray:
    """Map per-channel 0/1 counts ``(..., n_channels)`` to a click index (-1 = none)."""
    dN = np.asarray(dN)
    if dN.size and (np.any(dN < 0) or np.any(dN > 1)):
        raise InvalidRecord("dN must be 0 or 1 per channel and step")
    if dN.size and np.any(dN.sum(axis=-1) > 1):
        raise InvalidRecord("more than one click in a single step")
    if dN.shape[-1] == 0:
        return np.full(dN.shape[:-1], -1)
    return np.where(dN.any(axis=-1), dN.argmax(axis=-1), -1)


# ---------------------------------------------------------------------------
# records and trajectories


@dataclass
class MeasurementRecord:
    """Per-step increments on a uniform grid.

    ``dY[n]`` and ``dN[n]`` belong to the interval ``[n dt, (n+1) dt]``.
    """

    dt: float
    n_steps: int
    dY: np.ndarray = field(default_factory=lambda: np.zeros(0))
    dN: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), dtype=int))
    seed: Optional[int] = None
    model_fingerprint: str = ""
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.dY = np.asarray(self.dY, dtype=float).reshape(-1)
        dN = np.asarray(self.dN, dtype=np.int64)
        if dN.ndim == 1:
            dN = dN.reshape(-1, 1) if dN.size else dN.reshape(self.n_steps, 0)
        self.dN = dN
        if self.dY.size not in (0, self.n_steps):
            raise InvalidRecord(f"{self.dY.size} diffusive increments for {self.n_steps} steps")
        if self.dN.size and self.dN.shape[0] != self.n_steps:
            raise InvalidRecord(f"{self.dN.shape[0]} counting rows for {self.n_steps} steps")
        if self.dN.size and (self.dN.min() < 0 or self.dN.max() > 1):
            raise InvalidRecord("dN must be 0 or 1 per step; reduce dt")
        if not np.all(np.isfinite(self.dY)):
            raise NonFiniteIncrement("record contains non-finite dY")

    @property
    def is_diffusive(self) -> bool:
        return self.dY.size > 0 or (self.n_steps == 0 and self.dN.shape[-1] == 0)

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    def clicks(self) -> np.ndarray:
        if self.dN.size == 0:
            return np.full(self.n_steps, -1)
        return clicks_from_counts(self.dN)

    def check_model(self, model: Model):
        if self.model_fingerprint and self.model_fingerprint != model.fingerprint():
            raise FingerprintMismatch(
                f"record was produced by model {self.model_fingerprint}, got {model.fingerprint()}"
            )


@dataclass
class StateTrajectory:
    """Normalised states on the grid with cumulative log-norms.

    ``ops[n] * exp(log_norms[n])`` is the unnormalised state.  At an
    interruption step the stored state is the post-measurement one and the
    pre-measurement state is kept in ``pre_interruption``.
    """

    times: np.ndarray
    ops: np.ndarray
    log_norms: np.ndarray
    pre_interruption: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.times)

    def state(self, n: int) -> DensityMatrix:
        return DensityMatrix(self.ops[n], self.log_norms[n])

    @property
    def states(self) -> list:
        return [self.state(n) for n in range(len(self))]


@dataclass
class HiddenTruth:
    """Simulation-side ground truth; never passed to estimators."""

    site: Optional[np.ndarray] = None
    projective_outcome: Optional[int] = None


@dataclass(frozen=True)
class Interruption:
    """Unread projective measurement applied at grid index ``step``."""

    step: int
    projectors: tuple

    def __post_init__(self):
        object.__setattr__(self, "projectors", tuple(check_projectors(self.projectors)))

    @classmethod
    def at_time(cls, t: float, dt: float, projectors) -> "Interruption":
        n = t / dt
        if abs(n - round(n)) > 1e-9 * max(1.0, n):
            raise InvalidParameter(f"interruption time {t} is not on the grid")
        return cls(int(round(n)), tuple(projectors))


def _interruption_map(interruptions, n_steps):
    out = {}
    for it in interruptions or ():
        if not 0 <= it.step <= n_steps:
            raise InvalidParameter(f"interruption step {it.step} outside [0, {n_steps}]")
        out[it.step] = it.projectors
    return out


def apply_projectors(x: np.ndarray, projectors) -> np.ndarray:
    return sum(P @ x @ P for P in projectors)


# ---------------------------------------------------------------------------
# single steps


def _as_stack(op):
    return np.asarray(op, dtype=complex)[None]


def diffusive_step(rho: DensityMatrix, model: Model, dY: float, dt: float) -> DensityMatrix:
    """One Euler step of the homodyne filter, renormalised."""
    if model.diffusive is None:
        raise InvalidParameter("model has no diffusive channel")
    _check_increments(dY)
    prop = Propagator(model, dt, "euler")
    out, log_tr = normalize_states(prop.forward(_as_stack(rho.op), np.array([dY])))
    return DensityMatrix(out[0], rho.log_norm + log_tr[0])


def linear_diffusive_increment(rho_op, model: Model, dY: float, dt: float) -> np.ndarray:
    """Unnormalised Euler update ``rho + d rho`` (no Hermitization or rescaling)."""
    prop = Propagator(model, dt, "euler")
    return prop.forward(_as_stack(rho_op), np.array([dY]))[0]


def jump_step(rho: DensityMatrix, model: Model, dN, dt: float) -> DensityMatrix:
    """One step of the counting filter; ``dN`` holds 0/1 per counting channel."""
    if model.n_counting == 0:
        raise InvalidParameter("model has no counting channel")
    dN = np.atleast_1d(np.asarray(dN, dtype=int))
    if dN.shape != (model.n_counting,):
        raise InvalidRecord(f"dN must have one entry per counting channel ({model.n_counting})")
    click = clicks_from_counts(dN[None])
    if click[0] >= 0:
        L = model.counting[click[0]].lindblad
        rate = float(np.trace(dag(L) @ L @ rho.op).real)
        if rate <= PROB_FLOOR:
            raise ZeroProbabilityOutcome(f"click in channel {click[0]} has rate {rate:.3e} in this state")
    prop = Propagator(model, dt, "euler")
    out, log_tr = normalize_states(prop.forward(_as_stack(rho.op), None, click))
    return DensityMatrix(out[0], rho.log_norm + log_tr[0])


# ---------------------------------------------------------------------------
# passes over records


def forward_pass(model: Model, rho0_ops, dt, dY=None, clicks=None, interruptions=(), n_steps=None, scheme="kraus"):
    """Filter ``B`` records in lock-step.

    ``rho0_ops`` has shape ``(B, d, d)``; ``dY`` is ``(B, N)`` or None and
    ``clicks`` ``(B, N)`` click indices or None.  Returns states
    ``(B, N+1, d, d)``, cumulative log-norms ``(B, N+1)`` and, per
    interruption step, the pre-measurement states with their log-norms.
    """
    rho0_ops = np.asarray(rho0_ops, dtype=complex)
    B = rho0_ops.shape[0]
    if n_steps is None:
        n_steps = (dY if dY is not None else clicks).shape[1]
    _check_increments(dY)
    inter = _interruption_map(interruptions, n_steps)
    d = model.dim
    states = np.empty((B, n_steps + 1, d, d), dtype=complex)
    logs = np.zeros((B, n_steps + 1))
    pre = {}
    rho, log0 = normalize_states(rho0_ops)
    log = log0
    prop = Propagator(model, dt, scheme) if n_steps else None
    for n in range(n_steps + 1):
        if n > 0:
            step_dY = None if dY is None else dY[:, n - 1]
            step_clicks = None if clicks is None else clicks[:, n - 1]
            rho, lt = normalize_states(prop.forward(rho, step_dY, step_clicks))
            log = log + lt
        if n in inter:
            pre[n] = (rho.copy(), log.copy())
            rho = apply_projectors(rho, inter[n])
            rho, lt = normalize_states(rho)
            log = log + lt
        states[:, n] = rho
        logs[:, n] = log
    return states, logs, pre


def run_forward(record: MeasurementRecord, model: Model, rho0: DensityMatrix, interruptions=(),
                scheme: str = "kraus") -> StateTrajectory:
    """Replay a stored record through the filter."""
    record.check_model(model)
    dY = record.dY[None] if record.dY.size else None
    clicks = record.clicks()[None] if model.n_counting else None
    if model.diffusive is not None and dY is None and record.n_steps:
        raise InvalidRecord("diffusive model needs dY increments")
    states, logs, pre = forward_pass(
        model, _as_stack(rho0.op), record.dt, dY, clicks, interruptions, n_steps=record.n_steps, scheme=scheme
    )
    logs = logs[0] + rho0.log_norm
    return StateTrajectory(
        record.times, states[0], logs, {n: DensityMatrix(v[0], l[0] + rho0.log_norm) for n, (v, l) in pre.items()}
    )


# ---------------------------------------------------------------------------
# sampling


def _keep_index(keep, n_total):
    if keep is None:
        return np.arange(n_total)
    return np.asarray(keep, dtype=int).reshape(-1) % n_total


def simulate_diffusive(model: Model, rho0_ops, dt, dW, interruptions=(), keep=None, scheme="kraus"):
    """Generate records by sampling the filter's own predictive distribution.

    ``dW`` is ``(B, N)`` Wiener increments.  Per step
    ``dY = Tr((R + R^dag) rho) dt + dW`` with ``R = sqrt(eta) c``.  Sampling
    from the filter is exact for the record's law, whatever the efficiency.
    ``keep`` selects the grid indices whose states are returned (default:
    all; negative indices count from the end).
    """
    R = model.record_operator
    if R is None:
        raise InvalidParameter("model has no diffusive channel")
    rho0_ops = np.asarray(rho0_ops, dtype=complex)
    B, N = dW.shape
    inter = _interruption_map(interruptions, N)
    prop = Propagator(model, dt, scheme) if N else None
    RpRd = R + dag(R)
    dY = np.empty((B, N))
    d = model.dim
    kept = _keep_index(keep, N + 1)
    slot = {int(n): i for i, n in enumerate(kept)}
    states = np.empty((B, len(kept), d, d), dtype=complex)
    logs = np.zeros((B, N + 1))
    pre = {}
    rho, log = normalize_states(rho0_ops)
    for n in range(N + 1):
        if n > 0:
            mean = _trace(RpRd @ rho) * dt
            dY[:, n - 1] = mean + dW[:, n - 1]
            rho, lt = normalize_states(prop.forward(rho, dY[:, n - 1]))
            log = log + lt
        if n in inter:
            pre[n] = (rho.copy(), log.copy())
            rho, lt = normalize_states(apply_projectors(rho, inter[n]))
            log = log + lt
        if n in slot:
            states[:, slot[n]] = rho
        logs[:, n] = log
    return dY, states, logs, pre


def sample_diffusive_record(model: Model, rho0: DensityMatrix, t_end: float, dt: float, seed: int, interruptions=(),
                            scheme: str = "kraus"):
    """Sample a homodyne record and the filter trajectory that generated it."""
    n_steps = _grid_steps(t_end, dt)
    rng = np.random.default_rng(seed)
    dW = rng.normal(0.0, np.sqrt(dt), size=(1, n_steps))
    dY, states, logs, pre = simulate_diffusive(model, _as_stack(rho0.op), dt, dW, interruptions, scheme=scheme)
    record = MeasurementRecord(dt, n_steps, dY[0], np.zeros((n_steps, 0), dtype=int), seed, model.fingerprint())
    traj = StateTrajectory(
        record.times, states[0], logs[0] + rho0.log_norm,
        {n: DensityMatrix(v[0], l[0] + rho0.log_norm) for n, (v, l) in pre.items()},
    )
    return record, traj


def _grid_steps(t_end, dt):
    if dt <= 0:
        raise InvalidParameter(f"dt must be positive, got {dt}")
    ratio = t_end / dt
    if ratio < -1e-9 or abs(ratio - round(ratio)) > 1e-9 * max(1.0, abs(ratio)):
        raise InvalidParameter(f"t_end/dt = {ratio} must be a non-negative integer")
    return int(round(ratio))


def _truth_model(model: Model) -> Model:
    """Same dynamics with every non-diffusive channel unravelled as jumps.

    Observed counting channels keep their leading positions.
    """
    chans = [Channel(ch.lindblad, COUNTING, name=ch.name) for ch in model.counting]
    chans += [Channel(ch.lindblad, COUNTING, name=ch.name) for ch in model.unobserved]
    return Model(model.hamiltonian, tuple(chans), name=model.name + "_truth")


def simulate_jumps(model: Model, rho0_ops, dt, uniforms, init_uniforms, keep=None, scheme="kraus"):
    """Simulate photon-counting records with a hidden truth layer.

    The truth state unravels every channel (including unobserved ones such
    as site hops) into jumps; only clicks in the model's counting channels
    enter the record.  The filter treats unobserved channels as plain
    dissipation.  ``uniforms`` is ``(B, N)``; ``init_uniforms`` is ``(B,)``
    and picks the initial pointer component of the truth when the model
    defines a pointer basis.  ``keep`` is as for ``simulate_diffusive``.
    """
    if model.n_counting == 0:
        raise InvalidParameter("model has no counting channel")
    rho0_ops = np.asarray(rho0_ops, dtype=complex)
    B, N = uniforms.shape
    d = model.dim
    truth_model = _truth_model(model)
    tprop = Propagator(truth_model, dt, scheme) if N else None
    fprop = Propagator(model, dt, scheme) if N else None
    rates_ops = [dag(ch.lindblad) @ ch.lindblad for ch in truth_model.channels]
    n_obs = model.n_counting

    truth, _ = normalize_states(rho0_ops.copy())
    if model.pointer is not None:
        weights = np.stack([_trace(P @ truth) for P in model.pointer], axis=-1)
        cum = np.cumsum(weights, axis=-1)
        choice = (init_uniforms[:, None] >= cum).sum(axis=-1).clip(max=len(model.pointer) - 1)
        proj = np.stack(model.pointer)[choice]
        truth, _ = normalize_states(proj @ truth @ proj)
    site = np.empty((B, N + 1), dtype=int) if model.pointer is not None else None

    clicks = np.full((B, N), -1)
    kept = _keep_index(keep, N + 1)
    slot = {int(n): i for i, n in enumerate(kept)}
    states = np.empty((B, len(kept), d, d), dtype=complex)
    logs = np.zeros((B, N + 1))
    rho, log = normalize_states(rho0_ops)
    for n in range(N + 1):
        if n > 0:
            p = np.stack([_trace(Q @ truth) for Q in rates_ops], axis=-1) * dt
            if np.any(p.sum(axis=-1) > MAX_CLICK_PROBABILITY):
                raise StepTooLarge(f"per-step jump probability {p.sum(axis=-1).max():.3g} exceeds {MAX_CLICK_PROBABILITY}")
            cum = np.cumsum(p, axis=-1)
            u = uniforms[:, n - 1][:, None]
            event = np.where(u[:, 0] < cum[:, -1], (u >= cum).sum(axis=-1), -1)
            truth, _ = normalize_states(tprop.forward(truth, None, event))
            obs = np.where((event >= 0) & (event < n_obs), event, -1)
            clicks[:, n - 1] = obs
            rho, lt = normalize_states(fprop.forward(rho, None, obs))
            log = log + lt
        if site is not None:
            site[:, n] = np.argmax(np.stack([_trace(P @ truth) for P in model.pointer], axis=-1), axis=-1)
        if n in slot:
            states[:, slot[n]] = rho
        logs[:, n] = log
    return clicks, states, logs, site


def counts_from_clicks(clicks: np.ndarray, n_channels: int) -> np.ndarray:
    dN = np.zeros(clicks.shape + (n_channels,), dtype=np.int64)
    for j in range(n_channels):
        dN[..., j] = clicks == j
    return dN


def sample_jump_record(model: Model, rho0: DensityMatrix, t_end: float, dt: float, seed: int, scheme: str = "kraus"):
    """Sample a click record, the filter trajectory and the hidden truth."""
    n_steps = _grid_steps(t_end, dt)
    rng = np.random.default_rng(seed)
    init_u = rng.random(1)
    u = rng.random((1, n_steps))
    clicks, states, logs, site = simulate_jumps(model, _as_stack(rho0.op), dt, u, init_u, scheme=scheme)
    record = MeasurementRecord(
        dt, n_steps, np.zeros(0), counts_from_clicks(clicks[0], model.n_counting), seed, model.fingerprint()
    )
    traj = StateTrajectory(record.times, states[0], logs[0] + rho0.log_norm)
    truth = HiddenTruth(site=None if site is None else site[0])
    return record, traj, truth


def ensemble_average(model: Model, rho0: DensityMatrix, t_end: float, dt: float, n_trajectories: int,
                     base_seed: int, checkpoints: Sequence[int], chunk: int = 500, scheme: str = "kraus"):
    """Mean and standard error of filtered states at the given grid indices.

    Trajectory ``i`` draws its noise from ``trajectory_rng(base_seed, i)``.
    Returns ``(mean, stderr)`` of shape ``(len(checkpoints), d, d)``; the
    standard error is taken entrywise for real and imaginary parts.
    """
    n_steps = _grid_steps(t_end, dt)
    checkpoints = np.asarray(checkpoints)
    d = model.dim
    s1 = np.zeros((len(checkpoints), d, d), dtype=complex)
    s2r = np.zeros((len(checkpoints), d, d))
    s2i = np.zeros((len(checkpoints), d, d))
    for start in range(0, n_trajectories, chunk):
        idx = range(start, min(start + chunk, n_trajectories))
        rngs = [trajectory_rng(base_seed, i) for i in idx]
        rho0s = np.repeat(_as_stack(rho0.op), len(idx), axis=0)
        if model.diffusive is not None:
            dW = np.stack([r.normal(0.0, np.sqrt(dt), n_steps) for r in rngs])
            _, states, _, _ = simulate_diffusive(model, rho0s, dt, dW, keep=checkpoints, scheme=scheme)
        else:
            draws = [r.random(n_steps + 1) for r in rngs]
            init_u = np.array([x[0] for x in draws])
            u = np.stack([x[1:] for x in draws])
            _, states, _, _ = simulate_jumps(model, rho0s, dt, u, init_u, keep=checkpoints, scheme=scheme)
        sel = states
        s1 += sel.sum(axis=0)
        s2r += (sel.real**2).sum(axis=0)
        s2i += (sel.imag**2).sum(axis=0)
    n = n_trajectories
    mean = s1 / n
    var_r = (s2r / n - mean.real**2) * n / max(n - 1, 1)
    var_i = (s2i / n - mean.imag**2) * n / max(n - 1, 1)
    stderr = np.sqrt(np.clip(var_r, 0, None) / n) + 1j * np.sqrt(np.clip(var_i, 0, None) / n)
    return mean, stderr
