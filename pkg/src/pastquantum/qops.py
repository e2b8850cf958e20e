"""Dense operator algebra and the measurement core.

Operators are plain ``numpy`` complex arrays of shape ``(d, d)``.  States
(``DensityMatrix``) and effects (``EffectMatrix``) wrap such an array together
with ``log_norm``, the accumulated logarithm of normalisation factors that
were divided out, so that the unnormalised matrix is ``op * exp(log_norm)``.

Basis convention: index 0 is spin up, index 1 is spin down, so
``sigma_z = diag(1, -1)`` and ``sigma_minus |up> = |down>``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable, Sequence

import numpy as np

from .errors import (
    DegeneratePastState,
    DimensionMismatch,
    IncompleteMeasurement,
    InvalidParameter,
    NonOrthogonalProjectors,
    ZeroProbabilityOutcome,
)

PROB_FLOOR = 1e-14
COMPLETENESS_TOL = 1e-10
ORTHOGONALITY_TOL = 1e-10


def as_operator(x, dim: int | None = None) -> np.ndarray:
    """Validate ``x`` as a finite square complex matrix and return a copy."""
    op = np.array(x, dtype=complex)
    if op.ndim != 2 or op.shape[0] != op.shape[1] or op.shape[0] < 1:
        raise DimensionMismatch(f"operator must be a non-empty square matrix, got shape {op.shape}")
    if not np.all(np.isfinite(op)):
        raise InvalidParameter("operator has non-finite entries")
    if dim is not None and op.shape[0] != dim:
        raise DimensionMismatch(f"expected dimension {dim}, got {op.shape[0]}")
    return op


def dag(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2).conj()


def hermitize(x: np.ndarray) -> np.ndarray:
    return 0.5 * (x + dag(x))


def commutator(a, b):
    return a @ b - b @ a


def anticommutator(a, b):
    return a @ b + b @ a


def hermiticity_defect(x: np.ndarray) -> float:
    """Max-entry norm of ``x - x^dagger``."""
    return float(np.max(np.abs(x - dag(x))))


def min_eigenvalue(x: np.ndarray) -> float:
    """Most negative eigenvalue of the Hermitian part of ``x``.

    Positivity is never enforced by clamping; use this to report violations.
    """
    return float(np.linalg.eigvalsh(hermitize(np.asarray(x)))[0])


def _frozen(op: np.ndarray) -> np.ndarray:
    op = np.array(op, dtype=complex)
    op.flags.writeable = False
    return op


@dataclass(frozen=True)
class DensityMatrix:
    op: np.ndarray
    log_norm: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "op", _frozen(as_operator(self.op)))
        object.__setattr__(self, "log_norm", float(self.log_norm))

    @property
    def dim(self) -> int:
        return self.op.shape[0]

    def unnormalized(self) -> np.ndarray:
        return self.op * np.exp(self.log_norm)

    def normalized(self) -> "DensityMatrix":
        """Divide out the trace into ``log_norm``."""
        tr = float(np.trace(self.op).real)
        if tr <= PROB_FLOOR:
            raise ZeroProbabilityOutcome(f"trace {tr:.3e} cannot be normalised")
        return DensityMatrix(self.op / tr, self.log_norm + np.log(tr))

    @classmethod
    def pure(cls, psi) -> "DensityMatrix":
        psi = np.asarray(psi, dtype=complex)
        psi = psi / np.linalg.norm(psi)
        return cls(np.outer(psi, psi.conj()))

    @classmethod
    def maximally_mixed(cls, dim: int) -> "DensityMatrix":
        return cls(np.eye(dim) / dim)


@dataclass(frozen=True)
class EffectMatrix:
    """Backward-propagated effect.  Normalised form has ``Tr(op) = dim``."""

    op: np.ndarray
    log_norm: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "op", _frozen(as_operator(self.op)))
        object.__setattr__(self, "log_norm", float(self.log_norm))

    @property
    def dim(self) -> int:
        return self.op.shape[0]

    def unnormalized(self) -> np.ndarray:
        return self.op * np.exp(self.log_norm)

    def normalized(self) -> "EffectMatrix":
        tr = float(np.trace(self.op).real)
        if tr <= PROB_FLOOR:
            raise DegeneratePastState(f"effect trace {tr:.3e} underflowed")
        scale = tr / self.dim
        return EffectMatrix(self.op / scale, self.log_norm + np.log(scale))

    @classmethod
    def identity(cls, dim: int) -> "EffectMatrix":
        return cls(np.eye(dim))


@dataclass(frozen=True)
class KrausSet:
    """All Kraus operators associated with one outcome label."""

    outcome: Hashable
    ops: tuple

    def __post_init__(self):
        ops = tuple(as_operator(o) for o in self.ops)
        if not ops:
            raise InvalidParameter("KrausSet needs at least one operator")
        dims = {o.shape[0] for o in ops}
        if len(dims) != 1:
            raise DimensionMismatch(f"Kraus operators of mixed dimension {sorted(dims)}")
        for o in ops:
            o.flags.writeable = False
        object.__setattr__(self, "ops", ops)

    @property
    def dim(self) -> int:
        return self.ops[0].shape[0]

    def effect(self) -> np.ndarray:
        """Sum of Omega^dagger Omega over the set."""
        return sum(o.conj().T @ o for o in self.ops)


@dataclass(frozen=True)
class MeasurementSpec:
    outcomes: tuple

    def __post_init__(self):
        outcomes = tuple(self.outcomes)
        if not outcomes:
            raise InvalidParameter("MeasurementSpec needs at least one outcome")
        if len({ks.dim for ks in outcomes}) != 1:
            raise DimensionMismatch("outcomes act on different dimensions")
        object.__setattr__(self, "outcomes", outcomes)

    @property
    def dim(self) -> int:
        return self.outcomes[0].dim

    @property
    def labels(self) -> list:
        return [ks.outcome for ks in self.outcomes]

    @classmethod
    def projective(cls, projectors: Sequence, labels: Sequence | None = None) -> "MeasurementSpec":
        labels = range(len(projectors)) if labels is None else labels
        return cls(tuple(KrausSet(lab, (p,)) for lab, p in zip(labels, projectors)))


@dataclass(frozen=True)
class PastStatePair:
    rho: DensityMatrix
    effect: EffectMatrix
    time: float = 0.0

    def __post_init__(self):
        if self.rho.dim != self.effect.dim:
            raise DimensionMismatch(f"rho has dim {self.rho.dim}, effect has dim {self.effect.dim}")


def _check_dims(a: int, b: int):
    if a != b:
        raise DimensionMismatch(f"dimension mismatch: {a} vs {b}")


def kraus_apply(rho: DensityMatrix, ks: KrausSet, track_norm: bool = False):
    """Conditional update of ``rho`` on outcome ``ks``.

    Returns the normalised post-measurement state and the outcome
    probability ``Tr(sum_k Omega_k^dag Omega_k rho)``.  With ``track_norm``
    the logarithm of the probability is added to ``log_norm`` so that the
    unnormalised state stays recoverable.
    """
    _check_dims(rho.dim, ks.dim)
    out = sum(o @ rho.op @ o.conj().T for o in ks.ops)
    p = float(np.trace(out).real)
    if p <= PROB_FLOOR:
        raise ZeroProbabilityOutcome(f"outcome {ks.outcome!r} has probability {p:.3e}")
    log_norm = rho.log_norm + np.log(p) if track_norm else rho.log_norm
    return DensityMatrix(hermitize(out / p), log_norm), p


def kraus_adjoint_apply(effect: EffectMatrix, ks: KrausSet) -> EffectMatrix:
    """Adjoint update ``sum_k Omega_k^dag E Omega_k`` (not renormalised)."""
    _check_dims(effect.dim, ks.dim)
    out = sum(o.conj().T @ effect.op @ o for o in ks.ops)
    return EffectMatrix(out, effect.log_norm)


def completeness_deviation(spec: MeasurementSpec) -> float:
    total = sum(ks.effect() for ks in spec.outcomes)
    return float(np.max(np.abs(total - np.eye(spec.dim))))


def check_completeness(spec: MeasurementSpec, tol: float = COMPLETENESS_TOL) -> None:
    dev = completeness_deviation(spec)
    if dev > tol:
        raise IncompleteMeasurement(dev)


def _outcome_weights(rho_op, spec: MeasurementSpec, effect_op=None) -> np.ndarray:
    weights = []
    for ks in spec.outcomes:
        _check_dims(rho_op.shape[0], ks.dim)
        branch = sum(o @ rho_op @ o.conj().T for o in ks.ops)
        weights.append(np.trace(branch if effect_op is None else branch @ effect_op).real)
    return np.array(weights)


def born_distribution(rho: DensityMatrix, spec: MeasurementSpec) -> np.ndarray:
    w = _outcome_weights(rho.op, spec)
    return w / np.trace(rho.op).real


def past_distribution(pair: PastStatePair, spec: MeasurementSpec) -> np.ndarray:
    """Outcome distribution of a measurement at the pair's time, given later data.

    ``p(m) ~ Tr(sum_k Omega_{k|m} rho Omega_{k|m}^dag E)``.
    """
    w = _outcome_weights(pair.rho.op, spec, pair.effect.op)
    total = w.sum()
    if not np.isfinite(total) or total <= PROB_FLOOR:
        raise DegeneratePastState(f"past-distribution normaliser {total:.3e}")
    return w / total


def past_density_matrix(pair: PastStatePair) -> np.ndarray:
    """``rho E / Tr(rho E)``; generally not Hermitian, hence a bare array."""
    prod = pair.rho.op @ pair.effect.op
    tr = np.trace(prod)
    if abs(tr) <= PROB_FLOOR:
        raise DegeneratePastState(f"Tr(rho E) = {tr:.3e}")
    return prod / tr


def weak_value(pair: PastStatePair, A) -> complex:
    """``Tr(A rho E) / Tr(rho E)``.  May be complex and lie outside spec(A).

    The real part corresponds to the mean sigma_x deflection of a weakly
    coupled spin meter, the imaginary part to its sigma_y deflection.
    """
    A = as_operator(A, pair.rho.dim)
    return complex(np.trace(A @ past_density_matrix(pair)))


def check_projectors(projectors: Sequence, tol: float = ORTHOGONALITY_TOL) -> list:
    projs = [as_operator(p) for p in projectors]
    if not projs:
        raise NonOrthogonalProjectors("empty projector list")
    d = projs[0].shape[0]
    for a, pa in enumerate(projs):
        _check_dims(pa.shape[0], d)
        for b, pb in enumerate(projs):
            target = pa if a == b else np.zeros_like(pa)
            if np.max(np.abs(pa @ pb - target)) > tol:
                raise NonOrthogonalProjectors(f"projectors {a} and {b} violate P_a P_b = delta_ab P_a")
    if np.max(np.abs(sum(projs) - np.eye(d))) > tol:
        raise NonOrthogonalProjectors("projectors do not resolve the identity")
    return projs


def projective_map(x, projectors: Sequence):
    """Unread projective measurement: ``sum_a P_a X P_a``.

    Works on a ``DensityMatrix``, an ``EffectMatrix`` (the map is its own
    adjoint) or a bare array.
    """
    projs = check_projectors(projectors)
    op = x.op if isinstance(x, (DensityMatrix, EffectMatrix)) else as_operator(x)
    out = sum(p @ op @ p for p in projs)
    if isinstance(x, (DensityMatrix, EffectMatrix)):
        return type(x)(out, x.log_norm)
    return out


def weak_meter_kraus(A, eps: float) -> MeasurementSpec:
    """Second-order Kraus pair of a spin meter weakly coupled to ``A``.

    Outcome ``"down"``: ``I - eps^2/2 A^dag A``; outcome ``"up"``: ``eps A``.
    The pair is complete only up to ``O(eps^4)``; the residual is left as is.
    """
    if not (0.0 < eps <= 0.3):
        raise InvalidParameter(f"eps must lie in (0, 0.3], got {eps}")
    A = as_operator(A)
    d = A.shape[0]
    down = np.eye(d) - 0.5 * eps**2 * (A.conj().T @ A)
    up = eps * A
    return MeasurementSpec((KrausSet("down", (down,)), KrausSet("up", (up,))))


def conditional_meter_expectation(rho, effect, meter_ops: Sequence, X) -> complex:
    """Expectation of meter observable ``X`` given later system data.

    ``meter_ops[m]`` is the system operator attached to meter basis state
    ``m``; ``effect`` carries the later data.  Evaluates
    ``sum_{m,m'} Tr(M_m rho M_m'^dag E) <m'|X|m> / sum_m Tr(M_m rho M_m^dag E)``.
    """
    rho_op = rho.op if isinstance(rho, DensityMatrix) else as_operator(rho)
    e_op = effect.op if isinstance(effect, EffectMatrix) else as_operator(effect)
    X = np.asarray(X, dtype=complex)
    num = 0.0j
    den = 0.0
    for m, Mm in enumerate(meter_ops):
        den += np.trace(Mm @ rho_op @ Mm.conj().T @ e_op).real
        for mp, Mmp in enumerate(meter_ops):
            if X[mp, m] != 0:
                num += np.trace(Mm @ rho_op @ Mmp.conj().T @ e_op) * X[mp, m]
    if den <= PROB_FLOOR:
        raise DegeneratePastState(f"meter normaliser {den:.3e}")
    return complex(num / den)
