"""Scaled hierarchical equations of motion for Drude-Lorentz baths.

Each site couples through its projector ``|m><m|`` to an independent bath
with correlation function

    c(t) = lam gamma (cot(gamma / 2kT) - i) exp(-gamma t) + sum_k c_k exp(-nu_k t)

(Matsubara terms optional). ADOs are rescaled by
``(prod_j n_j! |c_j|^n_j)^(-1/2)`` so that deep tiers stay O(1).

State layout: the hierarchy vector is the concatenation, in index order, of
the column-stacked ADOs; index 0 is the physical density matrix.
"""
from __future__ import annotations

import itertools
import math
import struct
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import propagation
from .core import (
    CM1_TO_RAD_FS,
    Superoperator,
    build_hamiltonian,
    commutator_superoperator,
)
from .redfield import DrudeBath, build_trap_loss

DEFAULT_MEMORY_BUDGET = 4 * 2 ** 30
_BYTES_PER_AMPLITUDE = 16 * 10   # state + RK45 stages and work arrays


class MemoryBudgetError(MemoryError):
    def __init__(self, required, budget):
        self.required = required
        self.budget = budget
        super().__init__(f"hierarchy needs ~{required} bytes, budget is {budget} bytes")


class HighTemperatureApproximationError(ValueError):
    pass


def hierarchy_size(n_sites, n_modes_per_site, tiers, *, system_dim=None,
                   memory_budget=None):
    """Number of ADOs, C(B + L, L) with B = n_sites * n_modes_per_site."""
    if min(n_sites, n_modes_per_site, tiers) < 0:
        raise ValueError("arguments must be >= 0")
    B = n_sites * n_modes_per_site
    count = math.comb(B + tiers, tiers)
    if memory_budget is not None:
        dim = n_sites if system_dim is None else system_dim
        required = count * dim * dim * _BYTES_PER_AMPLITUDE
        if required > memory_budget:
            raise MemoryBudgetError(required, memory_budget)
    return count


def enumerate_indices(n_modes, tiers):
    """All multi-indices with total tier <= ``tiers``, ordered by tier."""
    out = []
    for level in range(tiers + 1):
        for combo in itertools.combinations_with_replacement(range(n_modes), level):
            idx = [0] * n_modes
            for j in combo:
                idx[j] += 1
            out.append(tuple(idx))
    return np.array(out, dtype=np.int64).reshape(len(out), n_modes)


@dataclass(frozen=True)
class BathMode:
    level: int          # system level the projector acts on
    coefficient: complex
    rate: float


def drude_modes(bath, n_matsubara=0):
    """``(c_k, nu_k)`` pairs of the Drude correlation function (rad/fs units)."""
    lam, g, kT = bath.lam, bath.gamma, bath.kT
    modes = [(lam * g * (1.0 / np.tan(g / (2.0 * kT)) - 1j), g)]
    for k in range(1, n_matsubara + 1):
        nu = 2.0 * np.pi * k * kT
        modes.append((4.0 * lam * g * kT * nu / (nu ** 2 - g ** 2), nu))
    return modes


class HEOMGenerator:
    """Linear generator on the truncated, scaled hierarchy.

    Parameters
    ----------
    hamiltonian : (n, n) array, rad/fs
    coupling_levels : sequence of int
        System levels that each carry an independent bath.
    bath : DrudeBath
    tiers : int
        Truncation tier; ADOs beyond it are set to zero.
    dissipator : Superoperator, optional
        Extra Markovian terms (trap, loss) applied identically to every ADO.
    """

    def __init__(self, hamiltonian, coupling_levels, bath, tiers, n_matsubara=0,
                 dissipator=None, memory_budget=DEFAULT_MEMORY_BUDGET):
        H = np.asarray(hamiltonian, dtype=complex)
        n = H.shape[0]
        self.n = n
        self.hamiltonian = H
        self.bath = bath
        self.tiers = int(tiers)
        self.n_matsubara = int(n_matsubara)
        self.coupling_levels = tuple(int(m) for m in coupling_levels)
        hierarchy_size(len(self.coupling_levels), 1 + self.n_matsubara, self.tiers,
                       system_dim=n, memory_budget=memory_budget)
        self.modes = [BathMode(m, complex(c), float(nu))
                      for m in self.coupling_levels
                      for c, nu in drude_modes(bath, self.n_matsubara)]
        self.indices = enumerate_indices(len(self.modes), self.tiers)
        self.n_ado = self.indices.shape[0]
        lookup = {tuple(r): k for k, r in enumerate(self.indices)}
        B = len(self.modes)
        self.plus = np.full((self.n_ado, B), -1, dtype=np.int64)
        self.minus = np.full((self.n_ado, B), -1, dtype=np.int64)
        for k, row in enumerate(self.indices):
            for j in range(B):
                up = list(row)
                up[j] += 1
                self.plus[k, j] = lookup.get(tuple(up), -1)
                if row[j] > 0:
                    up[j] -= 2
                    self.minus[k, j] = lookup[tuple(up)]
        rates = np.array([m.rate for m in self.modes])
        self.damping = self.indices @ rates
        self.dissipator = dissipator if dissipator is not None else Superoperator.zeros(n)
        self._has_dissipator = bool(np.any(self.dissipator.matrix))
        self._up, self._down = self._coupling_coefficients()
        self._sparse = None

    @property
    def dim(self):
        return self.n_ado * self.n * self.n

    def _coupling_coefficients(self):
        """Scaled prefactors for couplings to tier +1 and tier -1."""
        up = np.zeros((self.n_ado, len(self.modes)))
        down = np.zeros((self.n_ado, len(self.modes)), dtype=complex)
        for j, mode in enumerate(self.modes):
            a = abs(mode.coefficient)
            if a == 0.0:
                continue
            nj = self.indices[:, j]
            up[:, j] = np.sqrt((nj + 1) * a)
            down[:, j] = np.sqrt(nj / a)
        return up, down

    def initial_vector(self, rho0):
        y = np.zeros(self.dim, dtype=complex)
        y[: self.n * self.n] = np.asarray(rho0, dtype=complex).reshape(-1, order="F")
        return y

    def ados(self, y):
        """View the hierarchy vector as an (n_ado, n, n) stack of ADOs."""
        return np.asarray(y).reshape(self.n_ado, self.n, self.n).transpose(0, 2, 1)

    def apply(self, y):
        """Matrix-free action of the generator on a hierarchy vector."""
        n = self.n
        sig = self.ados(y)
        H = self.hamiltonian
        out = -1j * (H @ sig - sig @ H) - self.damping[:, None, None] * sig
        if self._has_dissipator:
            flat = np.asarray(y).reshape(self.n_ado, n * n) @ self.dissipator.matrix.T
            out += flat.reshape(self.n_ado, n, n).transpose(0, 2, 1)
        for j, mode in enumerate(self.modes):
            m = mode.level
            p = self.plus[:, j]
            rows = np.flatnonzero(p >= 0)
            if rows.size and mode.coefficient != 0:
                s = sig[p[rows]]
                f = (-1j * self._up[rows, j])[:, None]
                out[rows, m, :] += f * s[:, m, :]
                out[rows, :, m] -= f * s[:, :, m]
            q = self.minus[:, j]
            rows = np.flatnonzero(q >= 0)
            if rows.size and mode.coefficient != 0:
                s = sig[q[rows]]
                f = (-1j * self._down[rows, j])[:, None]
                c = mode.coefficient
                out[rows, m, :] += f * c * s[:, m, :]
                out[rows, :, m] -= f * np.conj(c) * s[:, :, m]
        return out.transpose(0, 2, 1).reshape(-1)

    __call__ = apply

    def _level_superops(self, m):
        n = self.n
        Q = np.zeros((n, n))
        Q[m, m] = 1.0
        eye = np.eye(n)
        left = sp.csr_matrix(np.kron(eye, Q))
        right = sp.csr_matrix(np.kron(Q.T, eye))
        return left, right

    def to_sparse(self):
        """Assembled CSR matrix of the generator (used for linear solves)."""
        if self._sparse is not None:
            return self._sparse
        n2 = self.n * self.n
        N = self.n_ado
        L_sys = commutator_superoperator(self.hamiltonian).matrix + self.dissipator.matrix
        blocks = [sp.kron(sp.identity(N, format="csr"), sp.csr_matrix(L_sys)),
                  sp.kron(sp.diags(-self.damping), sp.identity(n2))]
        rows_all = np.arange(N)
        for j, mode in enumerate(self.modes):
            if mode.coefficient == 0:
                continue
            left, right = self._level_superops(mode.level)
            p = self.plus[:, j]
            ok = p >= 0
            A = sp.csr_matrix((-1j * self._up[ok, j], (rows_all[ok], p[ok])), shape=(N, N))
            blocks.append(sp.kron(A, left - right))
            q = self.minus[:, j]
            ok = q >= 0
            c = mode.coefficient
            A = sp.csr_matrix((-1j * self._down[ok, j], (rows_all[ok], q[ok])), shape=(N, N))
            blocks.append(sp.kron(A, c * left - np.conj(c) * right))
        M = blocks[0]
        for b in blocks[1:]:
            M = M + b
        self._sparse = M.tocsr()
        return self._sparse

    def block_diagonal(self, superop):
        """Lift a system superoperator to act identically on every ADO."""
        S = superop.matrix if isinstance(superop, Superoperator) else superop
        return sp.kron(sp.identity(self.n_ado, format="csr"), sp.csr_matrix(S)).tocsr()

    def hermiticity_residual(self, y):
        sig = self.ados(y)
        return float(np.abs(sig - sig.conj().transpose(0, 2, 1)).max())


@dataclass
class HEOMSystemGenerator:
    """HEOM generator for an ExcitonSystem plus its split into parts."""

    system: object
    heom: HEOMGenerator
    M_H: Superoperator
    M_trap: Superoperator
    M_loss: Superoperator

    @property
    def n(self):
        return self.heom.n

    @property
    def dim(self):
        return self.heom.dim

    def apply(self, y):
        return self.heom.apply(y)


def build_heom_generator(system, tiers, n_matsubara=0, *,
                         allow_high_temperature_approximation=False,
                         memory_budget=DEFAULT_MEMORY_BUDGET):
    """HEOM generator for ``system`` with trap/loss acting on every ADO."""
    if system.reorganization_energy > 0 and tiers < 1:
        raise ValueError("tiers must be >= 1 when lambda > 0")
    bath = DrudeBath.from_system(system)
    if (n_matsubara == 0 and bath.gamma / bath.kT > 1.0
            and not allow_high_temperature_approximation):
        raise HighTemperatureApproximationError(
            f"beta*hbar*gamma = {bath.gamma / bath.kT:.3g} > 1: the high-temperature "
            "form is invalid here; add Matsubara terms or pass the override flag")
    H = build_hamiltonian(system) * CM1_TO_RAD_FS
    M_trap, M_loss = build_trap_loss(system)
    gen = HEOMGenerator(H, range(system.n_sites), bath, tiers, n_matsubara,
                        dissipator=M_trap + M_loss, memory_budget=memory_budget)
    return HEOMSystemGenerator(system, gen, commutator_superoperator(H), M_trap, M_loss)


@dataclass
class HEOMResult:
    trajectory: propagation.Trajectory
    ados: np.ndarray | None = None      # (n_times, n_ado, n, n)


def propagate_heom(generator, rho0, t_grid, *, rtol=propagation.DEFAULT_RTOL,
                   atol=propagation.DEFAULT_ATOL, engine="matrix_free",
                   return_ados=False, dump_path=None):
    """Propagate from a factorized initial condition (all ADOs zero).

    ``engine`` selects the matrix-free kernel (default), the assembled sparse
    matrix, or ``"expm"`` for small hierarchies.
    """
    gen = generator.heom if isinstance(generator, HEOMSystemGenerator) else generator
    rho0 = np.asarray(rho0, dtype=complex)
    if rho0.shape != (gen.n, gen.n):
        raise ValueError(f"rho0 must be {gen.n}x{gen.n}")
    if engine == "matrix_free":
        op, method = gen.apply, "rk45"
    elif engine == "sparse":
        op, method = gen.to_sparse(), "rk45"
    elif engine == "expm":
        op, method = gen.to_sparse(), "expm"
    else:
        raise ValueError(f"unknown engine {engine!r}")
    traj, Y = propagation.propagate_states(op, rho0, t_grid, method=method, rtol=rtol,
                                           atol=atol, extra_dim=gen.dim)
    if dump_path is not None:
        write_hierarchy_dump(dump_path, gen, traj.times, Y)
    ados = None
    if return_ados:
        ados = np.stack([gen.ados(y) for y in Y])
    return HEOMResult(traj, ados)


# --- binary checkpoint format -------------------------------------------
#
# header : b"HEOMDUMP", then little-endian uint32 version, n, n_modes, n_ado,
#          tiers
# tier map : n_ado * n_modes int32, row-major (one multi-index per ADO)
# records : repeated { float64 time; n_ado * n * n complex128, row-major per ADO }

_MAGIC = b"HEOMDUMP"
_HEADER = struct.Struct("<8s5I")


def write_hierarchy_dump(path, generator, times, vectors):
    gen = generator.heom if isinstance(generator, HEOMSystemGenerator) else generator
    times = np.atleast_1d(np.asarray(times, dtype="<f8"))
    vectors = np.atleast_2d(vectors)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, 1, gen.n, len(gen.modes), gen.n_ado, gen.tiers))
        fh.write(gen.indices.astype("<i4").tobytes(order="C"))
        for t, y in zip(times, vectors):
            fh.write(np.float64(t).astype("<f8").tobytes())
            fh.write(np.ascontiguousarray(gen.ados(y)).astype("<c16").tobytes(order="C"))


def read_hierarchy_dump(path):
    """Return ``(indices, times, ados)`` with ``ados`` shaped (records, n_ado, n, n)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, version, n, B, N, _tiers = _HEADER.unpack_from(raw, 0)
    if magic != _MAGIC or version != 1:
        raise ValueError("not a hierarchy dump (bad magic or version)")
    off = _HEADER.size
    indices = np.frombuffer(raw, dtype="<i4", count=N * B, offset=off).reshape(N, B)
    off += 4 * N * B
    rec = 8 + 16 * N * n * n
    n_rec = (len(raw) - off) // rec
    times = np.empty(n_rec)
    ados = np.empty((n_rec, N, n, n), dtype=complex)
    for r in range(n_rec):
        base = off + r * rec
        times[r] = np.frombuffer(raw, dtype="<f8", count=1, offset=base)[0]
        ados[r] = np.frombuffer(raw, dtype="<c16", count=N * n * n,
                                offset=base + 8).reshape(N, n, n)
    return indices.astype(np.int64), times, ados
