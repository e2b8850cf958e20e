"""Forward/backward assembly and retrodiction.

A ``PastTrajectory`` zips a filtered ``StateTrajectory`` with the matching
``EffectTrajectory``; index ``n`` of both refers to grid time ``n * dt``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .effect import EffectTrajectory, backward_pass, run_backward
from .errors import DegeneratePastState, InvalidParameter, PastQuantumError
from .filtering import (
    MeasurementRecord,
    Propagator,
    StateTrajectory,
    _trace,
    run_forward,
    simulate_diffusive,
    simulate_jumps,
    trajectory_rng,
)
from .model import Model, ScenarioConfig, build_jumping_atom, build_rabi_spin, jumping_atom_initial_state, z_projectors
from .qops import PROB_FLOOR, DensityMatrix, PastStatePair, as_operator, commutator, dag

log = logging.getLogger(__name__)

N_BINS = 20
TIE_TOL = 1e-12


@dataclass
class PastTrajectory:
    forward: StateTrajectory
    backward: EffectTrajectory

    def __post_init__(self):
        if len(self.forward) != len(self.backward) or not np.allclose(self.forward.times, self.backward.times):
            raise InvalidParameter("forward and backward grids differ")
        if self.forward.ops.shape[-1] != self.backward.ops.shape[-1]:
            raise InvalidParameter("forward and backward dimensions differ")

    def __len__(self):
        return len(self.forward)

    @property
    def times(self) -> np.ndarray:
        return self.forward.times

    def pair(self, n: int) -> PastStatePair:
        return PastStatePair(self.forward.state(n), self.backward.effect(n), float(self.times[n]))

    @property
    def pairs(self) -> list:
        return [self.pair(n) for n in range(len(self))]

    def overlap_log(self) -> np.ndarray:
        """``log Tr(rho~_t E~_t)`` for the unnormalised pair at every grid point."""
        tr = np.einsum("nij,nji->n", self.forward.ops, self.backward.ops).real
        return np.log(tr) + self.forward.log_norms + self.backward.log_norms

    def interruption_pairs(self, n: int):
        """``(rho_-, E_+)`` and ``(rho_+, E_-)`` at an interruption step."""
        if n not in self.forward.pre_interruption or n not in self.backward.pre_interruption:
            raise InvalidParameter(f"no interruption at step {n}")
        t = float(self.times[n])
        rho_minus = self.forward.pre_interruption[n]
        e_minus = self.backward.pre_interruption[n]
        return (
            PastStatePair(rho_minus, self.backward.effect(n), t),
            PastStatePair(self.forward.state(n), e_minus, t),
        )


def smooth(record: MeasurementRecord, model: Model, rho0: DensityMatrix, interruptions=(),
           scheme: str = "kraus") -> PastTrajectory:
    """Run the forward filter and the backward effect pass over one record."""
    fwd = run_forward(record, model, rho0, interruptions, scheme=scheme)
    bwd = run_backward(record, model, interruptions, scheme=scheme)
    return PastTrajectory(fwd, bwd)


def _weak_values(rho_ops, e_ops, A):
    num = np.einsum("ij,...jk,...ki->...", A, rho_ops, e_ops)
    den = np.einsum("...ij,...ji->...", rho_ops, e_ops)
    bad = np.abs(den) <= PROB_FLOOR
    with np.errstate(invalid="ignore", divide="ignore"):
        w = np.where(bad, np.nan + 0j, num / np.where(bad, 1.0, den))
    return w, bad


@dataclass
class ExpectationSeries:
    times: np.ndarray
    forward_mean: np.ndarray
    weak_value: np.ndarray
    gap: np.ndarray  # True where Tr(rho E) vanished and no weak value exists


def expectation_series(traj: PastTrajectory, A) -> ExpectationSeries:
    """Forward mean ``Tr(A rho)`` and weak value ``Tr(A rho E)/Tr(rho E)`` over time."""
    A = as_operator(A, traj.forward.ops.shape[-1])
    fwd = np.einsum("ij,nji->n", A, traj.forward.ops)
    w, bad = _weak_values(traj.forward.ops, traj.backward.ops, A)
    if bad.any():
        log.warning("%d degenerate grid points in weak-value series", int(bad.sum()))
    return ExpectationSeries(traj.times, fwd.real, w, bad)


def pointer_probabilities(traj: PastTrajectory, projectors: Sequence):
    """Filtered ``Tr(P rho)`` and smoothed (past) probabilities, each ``(N+1, K)``."""
    P = np.stack([as_operator(p) for p in projectors])
    return _pointer_probabilities(traj.forward.ops, traj.backward.ops, P)


def _pointer_probabilities(rho_ops, e_ops, P):
    filtered = np.einsum("kij,...ji->...k", P, rho_ops).real
    w = np.einsum("kij,...jl,klm,...mi->...k", P, rho_ops, P, e_ops).real
    total = w.sum(axis=-1, keepdims=True)
    if np.any(total <= PROB_FLOOR):
        raise DegeneratePastState("past-distribution normaliser vanished")
    return filtered, w / total


@dataclass
class IncrementDiagnostics:
    """Coefficients of the per-step differentials of ``<A>_w`` and ``<A>``.

    Entry ``n`` refers to the step from grid point ``n`` to ``n+1``:
    ``d<A>_w = weak_dt * dt + weak_dY * dY[n]`` and
    ``d<A> = forward_dt * dt + forward_dW * dW[n]`` with
    ``dW = dY - sqrt(eta) Tr((c + c^dag) rho) dt``.
    """

    weak_dt: np.ndarray
    weak_dY: np.ndarray
    forward_dt: np.ndarray
    forward_dW: np.ndarray

    @property
    def dt_coefficient(self):
        return self.weak_dt

    @property
    def dY_coefficient(self):
        return self.weak_dY


def increment_diagnostics(traj: PastTrajectory, record: MeasurementRecord, model: Model, A) -> IncrementDiagnostics:
    """Analytic increment coefficients for a diffusive record.

    The weak-value record coefficient is ``sqrt(eta) Tr([A, c] rho_t E_{t+dt}) / Tr(rho_t E_t)``,
    which vanishes identically when ``A`` commutes with ``c``.
    """
    ch = model.diffusive
    if ch is None:
        raise InvalidParameter("increment diagnostics need a diffusive model")
    d = model.dim
    A = as_operator(A, d)
    H = model.hamiltonian
    c = ch.lindblad
    sq = np.sqrt(ch.eta)
    N = record.n_steps
    rho = traj.forward.ops[:N]
    # E_{t+dt} rescaled to the normalisation of E_t
    scale = np.exp(traj.backward.log_norms[1:] - traj.backward.log_norms[:-1])
    e_next = traj.backward.ops[1:] * scale[:, None, None]
    den = np.einsum("nij,nji->n", rho, traj.backward.ops[:N])
    if np.any(np.abs(den) <= PROB_FLOOR):
        raise DegeneratePastState("Tr(rho E) vanished")

    def tr3(X, Y=None):
        # Tr(X rho Y E') (Y=None: Tr(X rho E'))
        if Y is None:
            return np.einsum("ij,njk,nki->n", X, rho, e_next)
        return np.einsum("ij,njk,kl,nli->n", X, rho, Y, e_next)

    drift = -1j * tr3(commutator(A, H))
    for L in [chn.lindblad for chn in model.channels]:
        LdL = dag(L) @ L
        drift = drift + tr3(commutator(A, L), dag(L)) - 0.5 * tr3(commutator(A, LdL))
    weak_dt = drift / den
    weak_dY = sq * tr3(commutator(A, c)) / den

    fdrift = -1j * np.einsum("ij,nji->n", commutator(A, H), rho)
    for L in [chn.lindblad for chn in model.channels]:
        LdL = dag(L) @ L
        fdrift = fdrift + np.einsum("ij,njk,ki->n", A @ L, rho, dag(L)) - 0.5 * np.einsum(
            "ij,nji->n", A @ LdL + LdL @ A, rho
        )
    mean_A = np.einsum("ij,nji->n", A, rho)
    mean_c = np.einsum("ij,nji->n", c + dag(c), rho)
    fnoise = sq * (np.einsum("ij,nji->n", A @ c + dag(c) @ A, rho) - mean_c * mean_A)
    return IncrementDiagnostics(weak_dt, weak_dY, fdrift, fnoise)


# ---------------------------------------------------------------------------
# projective guessing game


@dataclass
class GameConfig:
    """Hidden sigma_z measurement at ``t0`` on the driven, probed spin."""

    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    t0: Optional[float] = None
    n_trajectories: int = 10_000
    base_seed: int = 0
    scheme: str = "kraus"

    def __post_init__(self):
        if self.t0 is None:
            self.t0 = self.scenario.t_end / 2
        if not 0 < self.t0 < self.scenario.t_end:
            raise InvalidParameter(f"t0 = {self.t0} must lie strictly inside (0, {self.scenario.t_end})")
        n0 = self.t0 / self.scenario.dt
        if abs(n0 - round(n0)) > 1e-9 * max(1.0, n0):
            raise InvalidParameter(f"t0 = {self.t0} is not on the grid")
        if self.n_trajectories < 1:
            raise InvalidParameter("n_trajectories must be positive")

    @property
    def t0_step(self) -> int:
        return int(round(self.t0 / self.scenario.dt))


@dataclass
class GameReport:
    forward_accuracy: float
    past_accuracy: float
    forward_prob_histogram: np.ndarray
    past_prob_histogram: np.ndarray
    n: int
    seed: int
    forward_log_score: float = 0.0
    past_log_score: float = 0.0
    forward_ties: int = 0
    past_ties: int = 0
    failures: int = 0
    out_of_range: int = 0
    parameters: dict = field(default_factory=dict)

    @property
    def bin_edges(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, N_BINS + 1)

    def to_dict(self) -> dict:
        return {
            "forward_accuracy": self.forward_accuracy,
            "past_accuracy": self.past_accuracy,
            "forward_log_score": self.forward_log_score,
            "past_log_score": self.past_log_score,
            "forward_ties": self.forward_ties,
            "past_ties": self.past_ties,
            "failures": self.failures,
            "out_of_range_probabilities": self.out_of_range,
            "n": self.n,
            "seed": self.seed,
            "bin_edges": self.bin_edges.tolist(),
            "forward_prob_histogram": self.forward_prob_histogram.tolist(),
            "past_prob_histogram": self.past_prob_histogram.tolist(),
            "parameters": self.parameters,
        }


def _guess_up(p_up):
    return (p_up > 0.5) | (np.abs(p_up - 0.5) < TIE_TOL)


def _play(model, rho0_op, dt, n0, n_steps, dW, u, scheme="kraus"):
    """Play a batch of games.

    Returns ``(outcome_up, forward P(up), past P(up), bad)``; ``bad`` flags
    trajectories whose effect or past normaliser underflowed.
    """
    B = dW.shape[0]
    P_up, P_down = z_projectors()
    rho0s = np.repeat(rho0_op[None], B, axis=0)
    # forward up to t0: truth and filter coincide here
    _, before, _, _ = simulate_diffusive(model, rho0s, dt, dW[:, :n0], keep=[-1], scheme=scheme)
    rho_minus = before[:, 0]
    fwd_up = _trace(P_up @ rho_minus)
    outcome_up = u < fwd_up
    proj = np.where(outcome_up[:, None, None], P_up, P_down)
    truth = proj @ rho_minus @ proj
    # the record after t0 is generated by the projected state
    dY_after, _, _, _ = simulate_diffusive(model, truth, dt, dW[:, n0:], keep=[], scheme=scheme)
    prop = Propagator(model, dt, scheme)
    E = np.repeat(np.eye(model.dim, dtype=complex)[None], B, axis=0)
    bad = np.zeros(B, dtype=bool)
    for n in range(n_steps - n0 - 1, -1, -1):
        E = prop.backward(E, dY_after[:, n])
        tr = _trace(E) / model.dim
        bad |= ~(tr > PROB_FLOOR)
        E = E / np.where(bad, 1.0, tr)[:, None, None]
    w_up = _trace(P_up @ rho_minus @ P_up @ E)
    w_down = _trace(P_down @ rho_minus @ P_down @ E)
    total = w_up + w_down
    bad |= ~(total > PROB_FLOOR)
    past_up = w_up / np.where(bad, 1.0, total)
    return outcome_up, fwd_up, past_up, bad


def guessing_game(cfg: GameConfig, chunk: int = 2000) -> GameReport:
    """Guess an unread sigma_z outcome at ``t0`` from ``rho(t0)`` and from ``Xi(t0)``.

    Each trajectory draws its Wiener increments and the hidden outcome from
    ``trajectory_rng(base_seed, i)``.  The estimate from the past state uses
    ``rho(t0-)`` together with the effect of the data after ``t0``; the guess
    is the more likely outcome, ties going to spin up.
    """
    sc = cfg.scenario
    model = build_rabi_spin(sc.chi, sc.k, sc.eta)
    rho0 = np.diag([1.0, 0.0]).astype(complex)
    dt, N, n0 = sc.dt, sc.n_steps, cfg.t0_step
    n = cfg.n_trajectories
    outcome = np.zeros(n, dtype=bool)
    fwd = np.full(n, np.nan)
    past = np.full(n, np.nan)
    failed = np.zeros(n, dtype=bool)

    def draws(i):
        rng = trajectory_rng(cfg.base_seed, i)
        return rng.normal(0.0, np.sqrt(dt), N), rng.random()

    for start in range(0, n, chunk):
        idx = np.arange(start, min(start + chunk, n))
        pairs = [draws(i) for i in idx]
        dW = np.stack([p[0] for p in pairs])
        u = np.array([p[1] for p in pairs])
        try:
            o, f, p, bad = _play(model, rho0, dt, n0, N, dW, u, cfg.scheme)
        except PastQuantumError as exc:
            # a forward-state underflow poisons the whole batch; treat it as failed
            log.warning("batch starting at trajectory %d failed: %s", start, exc)
            failed[idx] = True
            continue
        outcome[idx], fwd[idx], past[idx] = o, f, p
        failed[idx] = bad
        for i in idx[bad]:
            log.warning("trajectory %d failed: past-distribution normaliser vanished", i)
        if failed.sum() > 1e-3 * n:
            raise PastQuantumError(f"{int(failed.sum())} of {n} trajectories failed")

    ok = ~failed
    o, f, p = outcome[ok], fwd[ok], past[ok]
    n_ok = int(ok.sum())
    fwd_correct = _guess_up(f) == o
    past_correct = _guess_up(p) == o

    def log_score(q):
        prob = np.where(o, q, 1.0 - q)
        with np.errstate(divide="ignore", invalid="ignore"):
            return float(np.mean(np.log(np.clip(prob, 1e-300, None))))

    edges = np.linspace(0.0, 1.0, N_BINS + 1)
    # the Euler scheme can push probabilities slightly outside [0, 1]; bin them at the edge
    hist = lambda q: np.histogram(np.clip(q, 0.0, 1.0), bins=edges)[0]
    out_of_range = int(np.sum((f < 0) | (f > 1)) + np.sum((p < 0) | (p > 1)))
    return GameReport(
        forward_accuracy=float(fwd_correct.mean()),
        past_accuracy=float(past_correct.mean()),
        forward_prob_histogram=hist(f),
        past_prob_histogram=hist(p),
        n=n_ok,
        seed=cfg.base_seed,
        forward_log_score=log_score(f),
        past_log_score=log_score(p),
        forward_ties=int(np.sum(np.abs(f - 0.5) < TIE_TOL)),
        past_ties=int(np.sum(np.abs(p - 0.5) < TIE_TOL)),
        failures=int(failed.sum()),
        out_of_range=out_of_range,
        parameters={**sc.to_dict(), "t0": cfg.t0, "n_trajectories": n, "base_seed": cfg.base_seed,
                    "scheme": cfg.scheme},
    )


# ---------------------------------------------------------------------------
# site tracking for the jumping atom


@dataclass
class SiteTrackingReport:
    """Per-run scores of filtered and smoothed site estimates against the truth.

    Accuracy is the time-averaged 0/1 agreement of ``P_b > 1/2`` with the
    true site; variation is the mean ``|P_b(t+dt) - P_b(t)|`` per step.
    """

    filtered_accuracy: np.ndarray
    smoothed_accuracy: np.ndarray
    filtered_variation: np.ndarray
    smoothed_variation: np.ndarray
    n_clicks: np.ndarray

    def summary(self) -> dict:
        return {
            "runs": int(len(self.n_clicks)),
            "filtered_accuracy": float(self.filtered_accuracy.mean()),
            "smoothed_accuracy": float(self.smoothed_accuracy.mean()),
            "filtered_variation": float(self.filtered_variation.mean()),
            "smoothed_variation": float(self.smoothed_variation.mean()),
            "mean_clicks": float(self.n_clicks.mean()),
        }


def site_tracking(cfg: ScenarioConfig, n_runs: int, base_seed: int = 0, scheme: str = "kraus") -> SiteTrackingReport:
    """Simulate ``n_runs`` jumping-atom records in lock-step and score both estimates.

    Run ``i`` draws its uniforms from ``trajectory_rng(base_seed, i)``.
    """
    model = build_jumping_atom(cfg)
    rho0 = jumping_atom_initial_state().op
    dt, N = cfg.dt, cfg.n_steps
    rngs = [trajectory_rng(base_seed, i) for i in range(n_runs)]
    draws = [r.random(N + 1) for r in rngs]
    init_u = np.array([x[0] for x in draws])
    u = np.stack([x[1:] for x in draws]).reshape(n_runs, N)
    clicks, states, _, site = simulate_jumps(model, np.repeat(rho0[None], n_runs, axis=0), dt, u, init_u,
                                            scheme=scheme)
    effects, _, _ = backward_pass(model, dt, None, clicks, n_steps=N, batch=n_runs, scheme=scheme)
    P = np.stack(model.pointer)
    filtered, smoothed = _pointer_probabilities(states, effects, P)
    truth_b = site == 1
    f_b, s_b = filtered[..., 1], smoothed[..., 1]
    return SiteTrackingReport(
        filtered_accuracy=((f_b > 0.5) == truth_b).mean(axis=1),
        smoothed_accuracy=((s_b > 0.5) == truth_b).mean(axis=1),
        filtered_variation=np.abs(np.diff(f_b, axis=1)).mean(axis=1),
        smoothed_variation=np.abs(np.diff(s_b, axis=1)).mean(axis=1),
        n_clicks=(clicks >= 0).sum(axis=1),
    )
