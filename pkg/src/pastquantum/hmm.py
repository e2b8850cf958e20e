"""Classical hidden Markov model smoothing and its quantum embedding.

Conventions: ``transition[i, j] = P(X_{t+1}=j | X_t=i)`` (rows sum to one),
``emission[i, y] = P(Y_t=y | X_t=i)`` (rows sum to one over ``y``) and
``initial[i] = P(X_0=i)``.  Observations ``Y_1..Y_T`` are integer labels; the
first observation belongs to the state after the first transition, so
``alpha_0 = initial`` and ``beta_T = 1``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ImpossibleObservation, InvalidParameter, TooLargeForEnumeration, ZeroProbabilityOutcome
from .qops import (
    PROB_FLOOR,
    DensityMatrix,
    EffectMatrix,
    KrausSet,
    MeasurementSpec,
    PastStatePair,
    kraus_adjoint_apply,
    kraus_apply,
    past_distribution,
)

STOCHASTIC_TOL = 1e-12
ENUMERATION_LIMIT = 10**7
_ORACLE_CHUNK = 1 << 18


@dataclass(frozen=True)
class HmmModel:
    transition: np.ndarray
    emission: np.ndarray
    initial: np.ndarray

    def __post_init__(self):
        T = np.asarray(self.transition, dtype=float)
        O = np.asarray(self.emission, dtype=float)
        p0 = np.asarray(self.initial, dtype=float)
        n = p0.shape[0] if p0.ndim == 1 else -1
        if p0.ndim != 1 or T.shape != (n, n) or O.ndim != 2 or O.shape[0] != n:
            raise InvalidParameter(
                f"inconsistent shapes: initial {p0.shape}, transition {T.shape}, emission {O.shape}"
            )
        for name, x in (("transition", T), ("emission", O), ("initial", p0)):
            if not np.all(np.isfinite(x)) or np.any(x < 0):
                raise InvalidParameter(f"{name} must be finite and non-negative")
        if np.max(np.abs(T.sum(axis=1) - 1)) > STOCHASTIC_TOL:
            raise InvalidParameter("transition rows must sum to 1")
        if np.max(np.abs(O.sum(axis=1) - 1)) > STOCHASTIC_TOL:
            raise InvalidParameter("emission rows must sum to 1 over the alphabet")
        if abs(p0.sum() - 1) > STOCHASTIC_TOL:
            raise InvalidParameter("initial distribution must sum to 1")
        for name, x in (("transition", T), ("emission", O), ("initial", p0)):
            x.flags.writeable = False
            object.__setattr__(self, name, x)

    @property
    def n_states(self) -> int:
        return self.initial.shape[0]

    @property
    def n_symbols(self) -> int:
        return self.emission.shape[1]

    def check_observations(self, observations) -> np.ndarray:
        y = np.asarray(observations)
        if y.ndim != 1 or (y.size and not np.issubdtype(y.dtype, np.integer)):
            raise InvalidParameter("observations must be a 1-d sequence of integer labels")
        y = y.astype(int)
        if y.size and (y.min() < 0 or y.max() >= self.n_symbols):
            raise InvalidParameter(f"observation labels must lie in [0, {self.n_symbols})")
        return y

    def to_dict(self) -> dict:
        return {
            "transition": self.transition.tolist(),
            "emission": self.emission.tolist(),
            "initial": self.initial.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HmmModel":
        missing = {"transition", "emission", "initial"} - set(d)
        if missing:
            raise InvalidParameter(f"HMM file lacks {sorted(missing)}")
        return cls(np.array(d["transition"], dtype=float), np.array(d["emission"], dtype=float),
                   np.array(d["initial"], dtype=float))


def random_hmm(rng: np.random.Generator, n_states: int, n_symbols: int) -> HmmModel:
    """Dirichlet-distributed rows; handy for property tests."""
    T = rng.dirichlet(np.ones(n_states), size=n_states)
    O = rng.dirichlet(np.ones(n_symbols), size=n_states)
    return HmmModel(T, O, rng.dirichlet(np.ones(n_states)))


def load_hmm(path) -> tuple:
    """Read ``{"transition", "emission", "initial", "observations"}`` JSON."""
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    if not isinstance(d, dict):
        raise InvalidParameter("HMM file must hold a JSON object")
    obs = d.pop("observations", [])
    d.pop("description", None)
    model = HmmModel.from_dict(d)
    return model, model.check_observations(np.asarray(obs, dtype=int))


def save_hmm(path, model: HmmModel, observations=(), description: str = ""):
    d = model.to_dict()
    d["observations"] = [int(y) for y in observations]
    if description:
        d["description"] = description
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(d, fh, indent=2)
        fh.write("\n")


@dataclass
class HmmPosteriors:
    """Scaled forward/backward vectors.

    ``alpha[t]`` sums to one, as does ``beta[t]`` for ``t < T`` (``beta[T]``
    is all ones).  The unscaled values are
    ``alpha[t] * exp(alpha_log[t])`` and ``beta[t] * exp(beta_log[t])``.
    """

    alpha: np.ndarray
    beta: np.ndarray
    alpha_log: np.ndarray
    beta_log: np.ndarray

    @property
    def filtered(self) -> np.ndarray:
        return self.alpha

    @property
    def smoothed(self) -> np.ndarray:
        return hmm_smoothed(self)

    @property
    def log_likelihood(self) -> float:
        return float(self.alpha_log[-1])


def hmm_forward(model: HmmModel, observations):
    """Scaled ``alpha_t``, shape ``(T+1, n)``, and cumulative log-scales."""
    y = model.check_observations(observations)
    alpha = np.empty((len(y) + 1, model.n_states))
    logs = np.zeros(len(y) + 1)
    alpha[0] = model.initial
    for t, obs in enumerate(y, start=1):
        a = model.emission[:, obs] * (alpha[t - 1] @ model.transition)
        s = a.sum()
        if not s > 0:
            raise ImpossibleObservation(f"observation {obs} at t={t} has zero probability")
        alpha[t] = a / s
        logs[t] = logs[t - 1] + np.log(s)
    return alpha, logs


def hmm_backward(model: HmmModel, observations):
    """Scaled ``beta_t`` (``beta_T = 1``) and cumulative log-scales."""
    y = model.check_observations(observations)
    T = len(y)
    beta = np.empty((T + 1, model.n_states))
    logs = np.zeros(T + 1)
    beta[T] = 1.0
    for t in range(T - 1, -1, -1):
        b = model.transition @ (model.emission[:, y[t]] * beta[t + 1])
        s = b.sum()
        if not s > 0:
            raise ImpossibleObservation(f"observation {y[t]} at t={t + 1} has zero probability")
        beta[t] = b / s
        logs[t] = logs[t + 1] + np.log(s)
    return beta, logs


def hmm_posteriors(model: HmmModel, observations) -> HmmPosteriors:
    alpha, la = hmm_forward(model, observations)
    beta, lb = hmm_backward(model, observations)
    return HmmPosteriors(alpha, beta, la, lb)


def hmm_smoothed(post: HmmPosteriors) -> np.ndarray:
    """``P(X_t | Y_1..Y_T)`` from the normalised products ``alpha_t beta_t``."""
    if post.alpha.shape != post.beta.shape:
        raise InvalidParameter("alpha and beta are not aligned")
    w = post.alpha * post.beta
    total = w.sum(axis=1, keepdims=True)
    if np.any(total <= 0):
        raise ImpossibleObservation("smoothing normaliser vanished")
    return w / total


def hmm_joint_oracle(model: HmmModel, observations):
    """Brute-force filtered and smoothed marginals plus the likelihood.

    Sums the joint ``P(X_0..X_T, Y_1..Y_T)`` over every state path.  Returns
    ``(filtered, smoothed, likelihood)`` where ``filtered[t] = P(X_t | Y_1..Y_t)``.
    """
    y = model.check_observations(observations)
    n, T = model.n_states, len(y)
    if float(n) ** (T + 1) > ENUMERATION_LIMIT:
        raise TooLargeForEnumeration(f"{n}^{T + 1} paths exceed {ENUMERATION_LIMIT}")
    # prefix[t] collects P(X_0..X_t, Y_1..Y_t) once per completion of the path;
    # the common multiplicity n^(T-t) drops out when rows are normalised
    prefix = np.zeros((T + 1, n))
    smooth = np.zeros((T + 1, n))
    total = n ** (T + 1)
    for start in range(0, total, _ORACLE_CHUNK):
        flat = np.arange(start, min(start + _ORACLE_CHUNK, total))
        paths = np.stack(np.unravel_index(flat, (n,) * (T + 1)), axis=1)
        p = model.initial[paths[:, 0]].copy()
        np.add.at(prefix[0], paths[:, 0], p)
        for t in range(1, T + 1):
            p *= model.transition[paths[:, t - 1], paths[:, t]] * model.emission[paths[:, t], y[t - 1]]
            np.add.at(prefix[t], paths[:, t], p)
        for t in range(T + 1):
            np.add.at(smooth[t], paths[:, t], p)
    likelihood = smooth[0].sum()
    if not likelihood > 0:
        raise ImpossibleObservation("observation sequence has zero probability")
    filtered = prefix / prefix.sum(axis=1, keepdims=True)
    return filtered, smooth / likelihood, float(likelihood)


# ---------------------------------------------------------------------------
# quantum embedding


def embed_hmm(model: HmmModel):
    """Embed the chain in an ``n``-level system.

    Returns ``(rho0, chain_map, obs_map)``: ``chain_map()`` is the Kraus set
    ``sqrt(P(j|i)) |j><i|`` and ``obs_map(y)`` the outcome-``y`` Kraus set
    ``sqrt(P(y|i)) |i><i|``.
    """
    n = model.n_states
    rho0 = DensityMatrix(np.diag(model.initial).astype(complex))
    chain_ops = []
    for i in range(n):
        for j in range(n):
            if model.transition[i, j] > 0:
                op = np.zeros((n, n), dtype=complex)
                op[j, i] = np.sqrt(model.transition[i, j])
                chain_ops.append(op)
    chain = KrausSet("chain", tuple(chain_ops))
    basis = [np.diag(np.eye(n)[i]).astype(complex) for i in range(n)]
    obs_sets = [
        KrausSet(y, tuple(np.sqrt(model.emission[i, y]) * basis[i] for i in range(n)))
        for y in range(model.n_symbols)
    ]

    def chain_map() -> KrausSet:
        return chain

    def obs_map(y: int) -> KrausSet:
        return obs_sets[int(y)]

    return rho0, chain_map, obs_map


@dataclass
class EmbeddedPasses:
    """Normalised embedded states/effects with their cumulative log-scales."""

    rho: np.ndarray
    rho_log: np.ndarray
    effect: np.ndarray
    effect_log: np.ndarray

    def pair(self, t: int) -> PastStatePair:
        return PastStatePair(DensityMatrix(self.rho[t], self.rho_log[t]), EffectMatrix(self.effect[t], self.effect_log[t]))


def embedded_passes(model: HmmModel, observations) -> EmbeddedPasses:
    """Forward (chain then observation) and adjoint backward passes through the Kraus maps."""
    y = model.check_observations(observations)
    rho0, chain_map, obs_map = embed_hmm(model)
    n, T = model.n_states, len(y)
    chain = chain_map()
    rhos = np.empty((T + 1, n, n), dtype=complex)
    rlog = np.zeros(T + 1)
    rho = rho0
    rhos[0] = rho.op
    for t, obs in enumerate(y, start=1):
        rho, _ = kraus_apply(rho, chain, track_norm=True)
        try:
            rho, _ = kraus_apply(rho, obs_map(obs), track_norm=True)
        except ZeroProbabilityOutcome as exc:
            raise ImpossibleObservation(f"observation {obs} at t={t} has zero probability") from exc
        rhos[t], rlog[t] = rho.op, rho.log_norm
    effs = np.empty((T + 1, n, n), dtype=complex)
    elog = np.zeros(T + 1)
    E = EffectMatrix.identity(n)
    effs[T] = E.op
    for t in range(T - 1, -1, -1):
        E = kraus_adjoint_apply(kraus_adjoint_apply(E, obs_map(y[t])), chain)
        s = np.trace(E.op).real
        if s <= PROB_FLOOR:
            raise ImpossibleObservation(f"observation {y[t]} at t={t + 1} has zero probability")
        E = EffectMatrix(E.op / s, E.log_norm + np.log(s))
        effs[t], elog[t] = E.op, E.log_norm
    return EmbeddedPasses(rhos, rlog, effs, elog)


@dataclass
class EquivalenceReport:
    alpha_deviation: float
    beta_deviation: float
    smoothed_deviation: float
    likelihood_deviation: float
    off_diagonal: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return max(self.alpha_deviation, self.beta_deviation, self.smoothed_deviation,
                   self.likelihood_deviation) <= self.tolerance

    def to_dict(self) -> dict:
        return {
            "alpha_deviation": self.alpha_deviation,
            "beta_deviation": self.beta_deviation,
            "smoothed_deviation": self.smoothed_deviation,
            "likelihood_deviation": self.likelihood_deviation,
            "off_diagonal": self.off_diagonal,
            "tolerance": self.tolerance,
            "passed": self.passed,
        }


def _max_rel(a, b):
    """Largest entrywise deviation after bringing both vectors to unit sum."""
    a = a / a.sum(axis=-1, keepdims=True)
    b = b / b.sum(axis=-1, keepdims=True)
    return float(np.max(np.abs(a - b))) if a.size else 0.0


def check_equivalence(model: HmmModel, observations, tol: float = 1e-10) -> EquivalenceReport:
    """Compare the classical passes with the embedded quantum ones."""
    y = model.check_observations(observations)
    post = hmm_posteriors(model, y)
    emb = embedded_passes(model, y)
    diag_rho = np.einsum("tii->ti", emb.rho).real
    diag_eff = np.einsum("tii->ti", emb.effect).real
    n = model.n_states
    spec = MeasurementSpec.projective([np.diag(np.eye(n)[i]) for i in range(n)])
    past = np.array([past_distribution(emb.pair(t), spec) for t in range(len(y) + 1)])
    off = np.concatenate([(emb.rho - np.einsum("ti,ij->tij", diag_rho, np.eye(n))).ravel(),
                          (emb.effect - np.einsum("ti,ij->tij", diag_eff, np.eye(n))).ravel()])
    # likelihood: unnormalised trace of the final state against sum of unscaled alpha_T
    like_q = emb.rho_log[-1] + np.log(np.trace(emb.rho[-1]).real)
    return EquivalenceReport(
        alpha_deviation=_max_rel(diag_rho, post.alpha),
        beta_deviation=_max_rel(diag_eff, post.beta),
        smoothed_deviation=float(np.max(np.abs(past - post.smoothed))),
        likelihood_deviation=float(abs(np.expm1(like_q - post.log_likelihood))),
        off_diagonal=float(np.max(np.abs(off))) if off.size else 0.0,
        tolerance=tol,
    )
