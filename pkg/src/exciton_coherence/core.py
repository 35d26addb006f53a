"""System definitions, units, Hamiltonians and Liouville-space helpers.

All generators handed to integrators are in rad/fs with time in fs.
Energies are carried in cm^-1 only on the user-facing side (configs,
``ExcitonSystem`` fields, CSV output).

Liouville-space convention: density matrices are vectorized by stacking
columns, ``vec(A X B) = (B^T kron A) vec(X)``.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SPEED_OF_LIGHT_CM_PER_FS = 2.99792458e-5
CM1_TO_RAD_FS = 2.0 * np.pi * SPEED_OF_LIGHT_CM_PER_FS
BOLTZMANN_CM1_PER_K = 0.695034800

HERMITIAN_RTOL = 1e-12
DEGENERACY_TOL_CM1 = 1e-9

_ENERGY_UNITS = {"cm-1", "rad/fs", "K"}
_TIME_UNITS = {"fs": 1.0, "ps": 1e3, "ns": 1e6}
_ALIASES = {
    "cm^-1": "cm-1", "cm1": "cm-1", "1/cm": "cm-1", "cm⁻¹": "cm-1",
    "rad_fs": "rad/fs", "kelvin": "K", "k": "K",
}


class UnitError(ValueError):
    pass


def _canon(unit):
    u = unit.strip()
    return _ALIASES.get(u, _ALIASES.get(u.lower(), u))


def unit_convert(value, from_unit, to_unit):
    """Convert energies (cm-1, rad/fs, K as k_B T) or times (fs, ps, ns)."""
    src, dst = _canon(from_unit), _canon(to_unit)
    value = np.asarray(value, dtype=float) if not np.isscalar(value) else float(value)
    if src == dst:
        return value
    if src in _TIME_UNITS and dst in _TIME_UNITS:
        return value * _TIME_UNITS[src] / _TIME_UNITS[dst]
    if src in _ENERGY_UNITS and dst in _ENERGY_UNITS:
        to_cm = {"cm-1": 1.0, "rad/fs": 1.0 / CM1_TO_RAD_FS, "K": BOLTZMANN_CM1_PER_K}
        return value * to_cm[src] / to_cm[dst]
    raise UnitError(f"cannot convert {from_unit!r} to {to_unit!r}")


def thermal_energy_cm1(temperature):
    return BOLTZMANN_CM1_PER_K * temperature


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ExcitonSystem:
    """Single-exciton model of a chromophore aggregate.

    Rates (``bath_correlation_rate``, ``trap_rate``, ``loss_rate``) are in
    1/fs; energies in cm^-1.
    """

    site_energies: np.ndarray
    couplings: np.ndarray
    reorganization_energy: float = 0.0
    bath_correlation_rate: float = 1.0 / 50.0
    temperature: float = 300.0
    trap_site: int = 0
    trap_rate: float = 0.0
    loss_rate: float = 0.0
    dipoles: np.ndarray | None = None
    labels: tuple = field(default=())

    def __post_init__(self):
        eps = _frozen(self.site_energies)
        n = eps.size
        if eps.ndim != 1 or n < 1:
            raise ValueError("site_energies must be a non-empty 1-D sequence")
        J = _frozen(self.couplings)
        if J.shape != (n, n):
            raise ValueError(f"couplings must be {n}x{n}, got {J.shape}")
        if not np.allclose(J, J.T, rtol=0, atol=1e-12):
            raise ValueError("couplings must be symmetric")
        if np.any(np.diag(J) != 0):
            raise ValueError("couplings must have a zero diagonal")
        for name in ("reorganization_energy", "trap_rate", "loss_rate"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.bath_correlation_rate <= 0:
            raise ValueError("bath_correlation_rate must be > 0")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if not 0 <= self.trap_site < n:
            raise ValueError(f"trap_site {self.trap_site} outside [0, {n})")
        object.__setattr__(self, "site_energies", eps)
        object.__setattr__(self, "couplings", J)
        object.__setattr__(self, "trap_site", int(self.trap_site))
        if self.dipoles is not None:
            mu = _frozen(self.dipoles)
            if mu.shape != (n, 3):
                raise ValueError(f"dipoles must be {n}x3, got {mu.shape}")
            object.__setattr__(self, "dipoles", mu)
        labels = tuple(self.labels) or tuple(str(i + 1) for i in range(n))
        object.__setattr__(self, "labels", labels)

    @property
    def n_sites(self):
        return self.site_energies.size

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_dict(cls, cfg):
        eps = cfg["site_energies_cm1"]
        n = len(eps)
        J = cfg.get("couplings_cm1", np.zeros((n, n)))
        trap = cfg.get("trap", {})
        tau_c = cfg.get("bath_correlation_fs", 50.0)
        loss_ns = cfg.get("loss_rate_per_ns", 0.0)
        return cls(
            site_energies=eps,
            couplings=J,
            reorganization_energy=cfg.get("reorganization_cm1", 0.0),
            bath_correlation_rate=1.0 / tau_c,
            temperature=cfg.get("temperature_K", 300.0),
            trap_site=trap.get("site", 0),
            trap_rate=trap.get("rate_per_ps", 0.0) / 1e3,
            loss_rate=loss_ns / 1e6,
            dipoles=cfg.get("dipoles"),
            labels=tuple(cfg.get("labels", ())),
        )

    def to_dict(self):
        d = {
            "site_energies_cm1": self.site_energies.tolist(),
            "couplings_cm1": self.couplings.tolist(),
            "reorganization_cm1": self.reorganization_energy,
            "bath_correlation_fs": 1.0 / self.bath_correlation_rate,
            "temperature_K": self.temperature,
            "trap": {"site": self.trap_site, "rate_per_ps": self.trap_rate * 1e3},
            "loss_rate_per_ns": self.loss_rate * 1e6,
            "labels": list(self.labels),
        }
        if self.dipoles is not None:
            d["dipoles"] = self.dipoles.tolist()
        return d


def load_system(path):
    with open(path) as fh:
        return ExcitonSystem.from_dict(json.load(fh))


def bundled_system(name):
    """Load one of the shipped configs, ``"dimer12"`` or ``"fmo7"``."""
    path = Path(__file__).parent / "data" / f"{name}.json"
    return load_system(path)


def build_hamiltonian(system):
    """Site-basis exciton Hamiltonian in cm^-1 (diagonal shifted by lambda)."""
    H = np.array(system.couplings, dtype=float)
    H[np.diag_indices_from(H)] = system.site_energies + system.reorganization_energy
    return H


@dataclass(frozen=True)
class ExcitonBasis:
    energies: np.ndarray
    vectors: np.ndarray
    degenerate_pairs: tuple = ()

    @property
    def populations(self):
        """|c_m^alpha|^2 indexed [site, exciton]."""
        return np.abs(self.vectors) ** 2


def is_hermitian(A, rtol=HERMITIAN_RTOL):
    A = np.asarray(A)
    scale = max(np.abs(A).max(), 1.0)
    return np.abs(A - A.conj().T).max() <= rtol * scale


def diagonalize(H):
    """Exact eigendecomposition with ascending energies.

    Each eigenvector is rotated so its largest-magnitude component is real and
    positive. Pairs of eigenvalues closer than ``DEGENERACY_TOL_CM1`` are
    reported in ``degenerate_pairs``.
    """
    H = np.asarray(H)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise ValueError("expected a square matrix")
    if not is_hermitian(H):
        raise ValueError("matrix is not Hermitian")
    E, V = np.linalg.eigh(H)
    V = V.astype(np.result_type(H.dtype, float), copy=True)
    for k in range(V.shape[1]):
        j = np.argmax(np.abs(V[:, k]))
        V[:, k] *= np.abs(V[j, k]) / V[j, k]
    if np.isrealobj(H):
        V = V.real
    pairs = tuple(
        (i, i + 1) for i in range(E.size - 1)
        if abs(E[i + 1] - E[i]) < DEGENERACY_TOL_CM1
    )
    return ExcitonBasis(_frozen(E), _frozen(V, dtype=V.dtype), pairs)


def vectorize(rho):
    return np.asarray(rho).reshape(-1, order="F")


def devectorize(v, n=None):
    v = np.asarray(v)
    if n is None:
        n = int(round(np.sqrt(v.size)))
    return v.reshape(n, n, order="F")


class Superoperator:
    """Linear map on column-stacked n x n matrices."""

    __slots__ = ("matrix", "dim")

    def __init__(self, matrix, dim=None):
        matrix = np.asarray(matrix, dtype=complex)
        if dim is None:
            dim = int(round(np.sqrt(matrix.shape[0])))
        if matrix.shape != (dim * dim, dim * dim):
            raise ValueError(f"superoperator for dim {dim} must be {dim**2}x{dim**2}")
        self.matrix = matrix
        self.dim = dim

    @classmethod
    def zeros(cls, dim):
        return cls(np.zeros((dim * dim, dim * dim), dtype=complex), dim)

    def __call__(self, rho):
        rho = np.asarray(rho)
        if rho.shape != (self.dim, self.dim):
            raise ValueError(f"state must be {self.dim}x{self.dim}, got {rho.shape}")
        return devectorize(self.matrix @ vectorize(rho), self.dim)

    def _check(self, other):
        if not isinstance(other, Superoperator):
            return NotImplemented
        if other.dim != self.dim:
            raise ValueError("superoperator dimension mismatch")
        return other

    def __add__(self, other):
        other = self._check(other)
        if other is NotImplemented:
            return other
        return Superoperator(self.matrix + other.matrix, self.dim)

    def __sub__(self, other):
        other = self._check(other)
        if other is NotImplemented:
            return other
        return Superoperator(self.matrix - other.matrix, self.dim)

    def __neg__(self):
        return Superoperator(-self.matrix, self.dim)

    def __mul__(self, scalar):
        return Superoperator(self.matrix * scalar, self.dim)

    __rmul__ = __mul__

    def __matmul__(self, other):
        """Composition: ``(A @ B)(rho) == A(B(rho))``."""
        other = self._check(other)
        if other is NotImplemented:
            return other
        return Superoperator(self.matrix @ other.matrix, self.dim)

    def __repr__(self):
        return f"Superoperator(dim={self.dim})"


def _square(A):
    A = np.asarray(A)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("operator must be a square matrix")
    return A


def commutator_superoperator(H):
    """``rho -> -i [H, rho]``."""
    H = _square(H)
    eye = np.eye(H.shape[0])
    return Superoperator(-1j * (np.kron(eye, H) - np.kron(H.T, eye)), H.shape[0])


def anticommutator_superoperator(P, rate=1.0):
    """``rho -> -rate {P, rho}``."""
    P = _square(P)
    eye = np.eye(P.shape[0])
    return Superoperator(-rate * (np.kron(eye, P) + np.kron(P.T, eye)), P.shape[0])


def sandwich_superoperator(L):
    """``rho -> L rho L^dagger``."""
    L = _square(L)
    return Superoperator(np.kron(L.conj(), L), L.shape[0])


def lindblad_dissipator(L, rate):
    """``rate * (L rho L^+ - 1/2 {L^+ L, rho})``."""
    L = _square(L)
    LdL = L.conj().T @ L
    return (sandwich_superoperator(L) * rate
            + anticommutator_superoperator(LdL, 0.5 * rate))


def basis_projector(n, k):
    P = np.zeros((n, n))
    P[k, k] = 1.0
    return P


def check_density_matrix(rho, n=None, *, psd_tol=1e-12, name="rho"):
    """Validate a density matrix; returns it as a complex array."""
    rho = np.asarray(rho, dtype=complex)
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise ValueError(f"{name} must be a square matrix")
    if n is not None and rho.shape[0] != n:
        raise ValueError(f"{name} must be {n}x{n}, got {rho.shape}")
    if not is_hermitian(rho):
        raise ValueError(f"{name} is not Hermitian")
    if np.linalg.eigvalsh(rho).min() < -psd_tol:
        raise ValueError(f"{name} is not positive semidefinite")
    return rho


def site_state(n, *sites, weights=None):
    """Diagonal site-basis density matrix, e.g. ``site_state(7, 0, 5)``.

    ``weights`` are normalized to unit trace.
    """
    if not sites:
        raise ValueError("at least one site is required")
    if weights is None:
        weights = np.ones(len(sites))
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (len(sites),) or np.any(weights < 0) or weights.sum() <= 0:
        raise ValueError("weights must be nonnegative, one per site, not all zero")
    weights = weights / weights.sum()
    rho = np.zeros((n, n), dtype=complex)
    for s, w in zip(sites, weights):
        rho[s, s] += w
    return rho
