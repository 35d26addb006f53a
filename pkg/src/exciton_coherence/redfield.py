"""Secular Redfield (Lindblad-form) exciton dynamics with trap and loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import propagation
from .core import (
    CM1_TO_RAD_FS,
    Superoperator,
    anticommutator_superoperator,
    basis_projector,
    build_hamiltonian,
    commutator_superoperator,
    diagonalize,
    lindblad_dissipator,
    thermal_energy_cm1,
)


class DegenerateSpectrumError(ValueError):
    def __init__(self, pair, energies):
        self.pair = pair
        super().__init__(
            f"exciton levels {pair[0]} and {pair[1]} are degenerate "
            f"({energies[pair[0]]:.6g} cm^-1); the secular approximation is undefined"
        )


@dataclass(frozen=True)
class DrudeBath:
    """Overdamped Brownian-oscillator bath.

    ``reorganization`` in cm^-1, ``gamma`` in rad/fs, ``temperature`` in K.
    """

    reorganization: float
    gamma: float
    temperature: float

    def __post_init__(self):
        if self.reorganization < 0:
            raise ValueError("reorganization must be >= 0")
        if self.gamma <= 0:
            raise ValueError("gamma must be > 0")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")

    @classmethod
    def from_system(cls, system):
        return cls(system.reorganization_energy, system.bath_correlation_rate,
                   system.temperature)

    @property
    def kT(self):
        """Thermal energy in rad/fs."""
        return thermal_energy_cm1(self.temperature) * CM1_TO_RAD_FS

    @property
    def lam(self):
        """Reorganization energy in rad/fs."""
        return self.reorganization * CM1_TO_RAD_FS

    def spectral_density(self, omega):
        return drude_spectral_density(omega, self)


def drude_spectral_density(omega, bath):
    """J(w) = 2 lam gamma w / (pi (w^2 + gamma^2)), in rad/fs."""
    w = np.asarray(omega, dtype=float)
    return 2.0 * bath.lam * bath.gamma * w / (np.pi * (w ** 2 + bath.gamma ** 2))


def bose_einstein(omega, kT):
    return 1.0 / np.expm1(omega / kT)


def relaxation_rate(bath, omega, overlap):
    """Downhill rate for a transition of angular frequency ``omega`` > 0."""
    return 2.0 * np.pi * drude_spectral_density(omega, bath) * (
        bose_einstein(omega, bath.kT) + 1.0) * overlap


def dephasing_rate(bath, ipr):
    """Pure-dephasing rate 2 pi kT lim_{w->0} J(w)/w, weighted by sum_m |c_m|^4.

    For the Drude form this is 4 lam kT / gamma: linear in T, zero at lam = 0.
    """
    slope = 2.0 * bath.lam / (np.pi * bath.gamma)
    return 2.0 * np.pi * bath.kT * slope * ipr


@dataclass
class LindbladModel:
    """Secular Redfield generator split into its physical parts.

    Relaxation channels are ``(alpha, beta, rate)`` for jump
    ``|beta><alpha|``; dephasing channels ``(alpha, rate)`` for
    ``|alpha><alpha|``. Exciton indices follow ascending energy.
    """

    system: object
    hamiltonian: np.ndarray      # rad/fs, site basis
    basis: object                # ExcitonBasis (cm^-1)
    relaxation: list
    dephasing: list
    M_H: Superoperator
    M_decoherence: Superoperator
    M_trap: Superoperator
    M_loss: Superoperator

    @property
    def n(self):
        return self.M_H.dim

    @property
    def generator(self):
        return self.M_H + self.M_decoherence + self.M_trap + self.M_loss

    def jump_operators(self):
        """``(L, rate)`` pairs in the site basis for every Lindblad channel."""
        V = self.basis.vectors
        ops = []
        for a, b, rate in self.relaxation:
            ops.append((np.outer(V[:, b], V[:, a].conj()), rate))
        for a, rate in self.dephasing:
            ops.append((np.outer(V[:, a], V[:, a].conj()), rate))
        return ops

    def no_jump_generator(self):
        """Coherent part plus the anti-Hermitian halves of every channel."""
        K = np.zeros((self.n, self.n), dtype=complex)
        for L, rate in self.jump_operators():
            K += 0.5 * rate * (L.conj().T @ L)
        return self.M_H + anticommutator_superoperator(K) + self.M_trap + self.M_loss

    def effective_hamiltonian(self):
        """Non-Hermitian H_eff with ``d psi/dt = -i H_eff psi`` for no-jump runs."""
        n, s = self.n, self.system
        K = np.zeros((n, n), dtype=complex)
        for L, rate in self.jump_operators():
            K += 0.5 * rate * (L.conj().T @ L)
        K += s.trap_rate * basis_projector(n, s.trap_site) + s.loss_rate * np.eye(n)
        return self.hamiltonian - 1j * K

    def detailed_balance_residual(self):
        """Max relative deviation of forward/backward rate ratios from Boltzmann."""
        kT = thermal_energy_cm1(self.system.temperature)
        E = self.basis.energies
        rates = {(a, b): r for a, b, r in self.relaxation}
        worst = 0.0
        for (a, b), down in rates.items():
            if E[a] <= E[b] or down == 0.0:
                continue
            up = rates[(b, a)]
            expected = np.exp((E[a] - E[b]) / kT)
            worst = max(worst, abs(down / up / expected - 1.0))
        return worst


def build_trap_loss(system):
    """``M_trap rho = -kappa {P_trap, rho}`` and ``M_loss rho = -Gamma {1, rho}``."""
    n = system.n_sites
    M_trap = anticommutator_superoperator(basis_projector(n, system.trap_site), system.trap_rate)
    M_loss = anticommutator_superoperator(np.eye(n), system.loss_rate)
    return M_trap, M_loss


def build_redfield_generator(system, *, allow_degenerate=False):
    """Assemble M = M_H + M_decoherence + M_trap + M_loss for ``system``."""
    H_cm = build_hamiltonian(system)
    basis = diagonalize(H_cm)
    if basis.degenerate_pairs and not allow_degenerate and system.reorganization_energy > 0:
        raise DegenerateSpectrumError(basis.degenerate_pairs[0], basis.energies)
    H = H_cm * CM1_TO_RAD_FS
    n = system.n_sites
    bath = DrudeBath.from_system(system)
    E = basis.energies * CM1_TO_RAD_FS
    P = basis.populations

    relaxation, dephasing = [], []
    M_dec = Superoperator.zeros(n)
    if system.reorganization_energy > 0:
        V = basis.vectors
        for a in range(n):
            for b in range(n):
                if a == b or E[a] <= E[b]:
                    continue
                w = E[a] - E[b]
                overlap = float(np.sum(P[:, a] * P[:, b]))
                down = relaxation_rate(bath, w, overlap)
                up = down * np.exp(-w / bath.kT)
                relaxation.append((a, b, down))
                relaxation.append((b, a, up))
                L = np.outer(V[:, b], V[:, a].conj())
                M_dec = M_dec + lindblad_dissipator(L, down) + lindblad_dissipator(L.conj().T, up)
        for a in range(n):
            rate = dephasing_rate(bath, float(np.sum(P[:, a] ** 2)))
            dephasing.append((a, rate))
            La = np.outer(basis.vectors[:, a], basis.vectors[:, a].conj())
            M_dec = M_dec + lindblad_dissipator(La, rate)
    else:
        for a in range(n):
            for b in range(n):
                if a != b:
                    relaxation.append((a, b, 0.0))
            dephasing.append((a, 0.0))

    M_trap, M_loss = build_trap_loss(system)
    return LindbladModel(system, H, basis, relaxation, dephasing,
                         commutator_superoperator(H), M_dec, M_trap, M_loss)


def propagate(M, rho0, t_grid, *, method="rk45", rtol=propagation.DEFAULT_RTOL,
              atol=propagation.DEFAULT_ATOL):
    """Propagate ``d rho/dt = M rho`` and sample at ``t_grid`` (fs).

    ``M`` is a :class:`Superoperator` or :class:`LindbladModel`. ``method`` is
    ``"rk45"`` (adaptive) or ``"expm"`` (exact exponential).
    """
    if isinstance(M, LindbladModel):
        M = M.generator
    traj, _ = propagation.propagate_states(M.matrix, rho0, t_grid, method=method,
                                           rtol=rtol, atol=atol)
    return traj


def gibbs_state(system):
    """Thermal state of the exciton Hamiltonian in the site basis."""
    basis = diagonalize(build_hamiltonian(system))
    kT = thermal_energy_cm1(system.temperature)
    w = np.exp(-(basis.energies - basis.energies.min()) / kT)
    w /= w.sum()
    V = basis.vectors
    return (V * w) @ V.conj().T
