"""Open-system models: Hamiltonian plus tagged Lindblad channels.

Two ready-made scenarios are provided: a coherently driven spin under
continuous sigma_z probing (``build_rabi_spin``) and a driven, decaying
two-level atom hopping between two sites with different emission
properties (``build_jumping_atom``).
"""
from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from .errors import InvalidParameter
from .qops import as_operator, dag

DIFFUSIVE = "diffusive_observed"
COUNTING = "counting_observed"
UNOBSERVED = "unobserved"
_KINDS = (DIFFUSIVE, COUNTING, UNOBSERVED)

_PAULI = {
    "x": np.array([[0, 1], [1, 0]], dtype=complex),
    "y": np.array([[0, -1j], [1j, 0]], dtype=complex),
    "z": np.array([[1, 0], [0, -1]], dtype=complex),
    "+": np.array([[0, 1], [0, 0]], dtype=complex),
    "-": np.array([[0, 0], [1, 0]], dtype=complex),
}

UP = np.array([1, 0], dtype=complex)
DOWN = np.array([0, 1], dtype=complex)


def pauli(axis: str) -> np.ndarray:
    """Pauli matrix (or raising/lowering operator) in the up=0, down=1 basis."""
    try:
        return _PAULI[axis].copy()
    except KeyError:
        raise InvalidParameter(f"unknown Pauli axis {axis!r}") from None


def z_projectors() -> list:
    return [np.diag([1.0, 0.0]).astype(complex), np.diag([0.0, 1.0]).astype(complex)]


@dataclass(frozen=True)
class Channel:
    lindblad: np.ndarray
    kind: str = UNOBSERVED
    eta: float = 1.0
    name: str = ""

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise InvalidParameter(f"unknown channel kind {self.kind!r}")
        if not (0.0 < self.eta <= 1.0):
            raise InvalidParameter(f"efficiency eta must lie in (0, 1], got {self.eta}")
        if self.kind != DIFFUSIVE and self.eta != 1.0:
            raise InvalidParameter("eta only applies to diffusive channels")
        op = as_operator(self.lindblad)
        op.flags.writeable = False
        object.__setattr__(self, "lindblad", op)


@dataclass(frozen=True)
class Model:
    """Hamiltonian (rad/s) and Lindblad channels sharing one dimension.

    ``pointer`` optionally names a set of orthogonal projectors for a
    classical degree of freedom embedded in the model (the site of the
    jumping atom).  It is used only by simulation-side truth bookkeeping and
    by output helpers, never by the estimators.
    """

    hamiltonian: np.ndarray
    channels: tuple = ()
    pointer: Optional[tuple] = None
    name: str = "custom"

    def __post_init__(self):
        H = as_operator(self.hamiltonian)
        if np.max(np.abs(H - dag(H))) > 1e-12:
            raise InvalidParameter("Hamiltonian is not Hermitian")
        H.flags.writeable = False
        object.__setattr__(self, "hamiltonian", H)
        channels = tuple(self.channels)
        d = H.shape[0]
        for ch in channels:
            if ch.lindblad.shape != (d, d):
                raise InvalidParameter(f"channel {ch.name!r} has shape {ch.lindblad.shape}, expected {(d, d)}")
        kinds = [ch.kind for ch in channels]
        if kinds.count(DIFFUSIVE) > 1:
            raise InvalidParameter("at most one diffusive_observed channel is supported")
        if DIFFUSIVE in kinds and COUNTING in kinds:
            raise InvalidParameter("a model may not mix diffusive and counting channels")
        object.__setattr__(self, "channels", channels)
        if self.pointer is not None:
            projs = tuple(as_operator(p, d) for p in self.pointer)
            object.__setattr__(self, "pointer", projs)

    @property
    def dim(self) -> int:
        return self.hamiltonian.shape[0]

    @property
    def diffusive(self) -> Optional[Channel]:
        for ch in self.channels:
            if ch.kind == DIFFUSIVE:
                return ch
        return None

    @property
    def counting(self) -> list:
        return [ch for ch in self.channels if ch.kind == COUNTING]

    @property
    def unobserved(self) -> list:
        return [ch for ch in self.channels if ch.kind == UNOBSERVED]

    @property
    def n_counting(self) -> int:
        return len(self.counting)

    @property
    def drift_operator(self) -> np.ndarray:
        """``-iH - 1/2 sum_m L_m^dag L_m`` over every channel."""
        K = sum((dag(ch.lindblad) @ ch.lindblad for ch in self.channels), np.zeros_like(self.hamiltonian))
        return -1j * self.hamiltonian - 0.5 * K

    @property
    def sandwich_operators(self) -> list:
        """Channels whose ``L rho L^dag`` term enters the continuous drift."""
        return [ch.lindblad for ch in self.channels if ch.kind != COUNTING]

    @property
    def record_operator(self) -> Optional[np.ndarray]:
        ch = self.diffusive
        return None if ch is None else np.sqrt(ch.eta) * ch.lindblad

    def rate_scale(self) -> float:
        """``max(||H||, ||sum L^dag L||)`` in spectral norm, for the step guard."""
        K = sum((dag(ch.lindblad) @ ch.lindblad for ch in self.channels), np.zeros_like(self.hamiltonian))
        return max(np.linalg.norm(self.hamiltonian, 2), np.linalg.norm(K, 2))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.hamiltonian).tobytes())
        for ch in self.channels:
            h.update(ch.kind.encode())
            h.update(np.float64(ch.eta).tobytes())
            h.update(np.ascontiguousarray(ch.lindblad).tobytes())
        return h.hexdigest()[:16]


@dataclass
class ScenarioConfig:
    """Physical parameters and time grid for the two bundled scenarios.

    Units: rates in 1/s, frequencies in rad/s, times in s.  ``chi`` is the
    complex Rabi frequency of the spin scenario.  Defaults for the jumping
    atom give a low-emission site ``a`` and a high-emission site ``b``;
    ``delta_a``/``delta_b`` are the per-site drive detunings.
    """

    chi: complex = 3.0j
    k: float = 2.0
    eta: float = 1.0
    gamma_a: float = 0.5
    gamma_b: float = 4.0
    r_ab: float = 0.05
    r_ba: float = 0.05
    omega_a: complex = 2.0 + 0j
    omega_b: complex = 2.0 + 0j
    delta_a: float = 0.0
    delta_b: float = 0.0
    t_end: float = 2.0
    dt: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        for name in ("chi", "omega_a", "omega_b"):
            setattr(self, name, complex(getattr(self, name)))
        if self.dt <= 0:
            raise InvalidParameter(f"dt must be positive, got {self.dt}")
        if self.t_end < 0:
            raise InvalidParameter(f"t_end must be non-negative, got {self.t_end}")
        ratio = self.t_end / self.dt
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
            raise InvalidParameter(f"t_end/dt = {ratio} is not an integer")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.dt))

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = [v.real, v.imag] if isinstance(v, complex) else v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise InvalidParameter(f"unknown scenario parameters: {sorted(unknown)}")
        kw = {}
        for k, v in d.items():
            if k in ("chi", "omega_a", "omega_b"):
                v = complex(v[0], v[1]) if isinstance(v, (list, tuple)) else complex(v)
            elif k == "seed":
                v = int(v)
            else:
                v = float(v)
            kw[k] = v
        return cls(**kw)


def build_rabi_spin(chi: complex, k: float, eta: float = 1.0) -> Model:
    """Spin-1/2 with ``H = (chi s+ + chi* s-)/2`` and probe ``c = sqrt(k) s_z``.

    An imaginary ``chi`` rotates the spin about the y axis.
    """
    if k <= 0:
        raise InvalidParameter(f"measurement strength k must be positive, got {k}")
    if not (0.0 < eta <= 1.0):
        raise InvalidParameter(f"eta must lie in (0, 1], got {eta}")
    chi = complex(chi)
    H = 0.5 * (chi * pauli("+") + chi.conjugate() * pauli("-"))
    c = np.sqrt(k) * pauli("z")
    return Model(H, (Channel(c, DIFFUSIVE, eta, name="probe"),), name="rabi_spin")


def site_projectors() -> list:
    """``|a><a| (x) I`` and ``|b><b| (x) I`` for the jumping atom."""
    eye = np.eye(2)
    return [np.kron(np.diag([1.0, 0.0]), eye).astype(complex), np.kron(np.diag([0.0, 1.0]), eye).astype(complex)]


def build_jumping_atom(cfg: ScenarioConfig) -> Model:
    """Driven two-level atom hopping between sites ``a`` and ``b``.

    Hilbert space is site (2) (x) internal (2) with site index 0 = a.  Each
    site carries ``H_s = delta_s s+s- + (omega_s s+ + omega_s* s-)/2``.  A
    single detector counts photons from both sites; hops are unobserved.
    """
    for name in ("gamma_a", "gamma_b"):
        if getattr(cfg, name) <= 0:
            raise InvalidParameter(f"{name} must be positive")
    for name in ("r_ab", "r_ba"):
        if getattr(cfg, name) < 0:
            raise InvalidParameter(f"{name} must be non-negative")
    if cfg.gamma_a >= cfg.gamma_b:
        warnings.warn("expected gamma_a < gamma_b (site a low, site b high emission)", stacklevel=2)
    Pa = np.diag([1.0, 0.0]).astype(complex)
    Pb = np.diag([0.0, 1.0]).astype(complex)
    a_to_b = np.array([[0, 0], [1, 0]], dtype=complex)  # |b><a|
    sp, sm = pauli("+"), pauli("-")
    excited = sp @ sm

    def drive(w, delta):
        return delta * excited + 0.5 * (complex(w) * sp + complex(w).conjugate() * sm)

    H = np.kron(Pa, drive(cfg.omega_a, cfg.delta_a)) + np.kron(Pb, drive(cfg.omega_b, cfg.delta_b))
    emit = np.kron(Pa, np.sqrt(cfg.gamma_a) * sm) + np.kron(Pb, np.sqrt(cfg.gamma_b) * sm)
    channels = [Channel(emit, COUNTING, name="photon")]
    eye = np.eye(2)
    if cfg.r_ab > 0:
        channels.append(Channel(np.sqrt(cfg.r_ab) * np.kron(a_to_b, eye), UNOBSERVED, name="hop_ab"))
    if cfg.r_ba > 0:
        channels.append(Channel(np.sqrt(cfg.r_ba) * np.kron(a_to_b.T, eye), UNOBSERVED, name="hop_ba"))
    return Model(H, tuple(channels), pointer=tuple(site_projectors()), name="jumping_atom")


def jumping_atom_initial_state():
    """Filter prior: equal site mixture, atom in its ground state."""
    from .qops import DensityMatrix

    return DensityMatrix(np.kron(np.eye(2) / 2, np.outer(DOWN, DOWN.conj())))


def lindblad_generator(model: Model) -> np.ndarray:
    """Liouvillian superoperator acting on row-major ``vec(rho)``.

    With row-major vectorisation ``vec(A X B) = (A kron B^T) vec(X)``.
    """
    d = model.dim
    eye = np.eye(d)
    H = model.hamiltonian
    Lv = -1j * (np.kron(H, eye) - np.kron(eye, H.T))
    for ch in model.channels:
        L = ch.lindblad
        LdL = dag(L) @ L
        Lv += np.kron(L, L.conj()) - 0.5 * (np.kron(LdL, eye) + np.kron(eye, LdL.T))
    return Lv
