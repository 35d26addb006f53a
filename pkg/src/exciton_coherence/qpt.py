"""Process tomography of a heterodimer's single-exciton manifold from 2D echo peaks.

Levels are ordered ``(g, alpha, beta)`` with ``alpha`` the upper exciton. A
process tensor ``chi[a, b, c, d]`` maps ``rho_cd(0)`` to ``rho_ab(T)``.

The forward model expresses each rescaled peak amplitude as a linear function
of ``chi`` entries. Peak ``(p, q)`` (coherence frequency ``w_pg``, echo
frequency ``w_qg``) reads

    S(p, q) = -sum_s C1^p C2^s <mu_pg mu_sg X_s>

    X_s = C3^q  [mu_qg mu_qg (chi_gg,sp - delta_sp chi_gg,gg - chi_qq,sp)
                 + mu_fq' mu_fq' chi_q'q',sp]
        + C3^q' [(mu_fq mu_fq' - mu_q'g mu_qg) chi_qq',sp]

with ``q'`` the other exciton and each dipole four-product contracted with the
pulse polarizations ``e1..e4`` (or isotropically averaged). The constant in
the population terms is written as ``chi_gg,gg`` (equal to 1 for any
trace-preserving process) so that the map is exactly linear.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import product

import numpy as np
import scipy.linalg as sla
from scipy.sparse.linalg import expm_multiply

from .core import (
    CM1_TO_RAD_FS,
    build_hamiltonian,
    commutator_superoperator,
    diagonalize,
    lindblad_dissipator,
    vectorize,
)
from .heom import HEOMGenerator
from .redfield import DrudeBath, build_redfield_generator

LEVELS = ("g", "a", "b")        # ground, alpha (upper exciton), beta (lower exciton)
_IDX = {"g": 0, "a": 1, "b": 2}
_OTHER = {"a": "b", "b": "a"}
PEAKS = (("a", "a"), ("a", "b"), ("b", "a"), ("b", "b"))
DEFAULT_OPTICAL_OFFSET = 12410.0
CONDITION_WARNING = 1e8


class RankDeficiencyError(np.linalg.LinAlgError):
    def __init__(self, directions):
        self.directions = directions
        super().__init__("measurements do not determine chi along: " + "; ".join(directions))


def _key(entry):
    """Parse ``"abaa"`` or ``("a", "b", "a", "a")`` into an index tuple."""
    if isinstance(entry, str):
        entry = tuple(entry)
    if len(entry) != 4:
        raise KeyError(entry)
    return tuple(_IDX[c] if isinstance(c, str) else int(c) for c in entry)


@dataclass
class ProcessTensor:
    """``chi[a, b, c, d]``; NaN marks entries that were not determined."""

    T: float
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=complex).reshape(3, 3, 3, 3)

    def __getitem__(self, entry):
        return self.data[_key(entry)]

    @classmethod
    def identity(cls, T=0.0):
        d = np.einsum("ac,bd->abcd", np.eye(3), np.eye(3))
        return cls(T, d)

    @classmethod
    def from_superoperator(cls, T, S):
        """From a 9x9 map on column-stacked matrices (index ``i + 3 j``)."""
        S = np.asarray(S).reshape(3, 3, 3, 3, order="F")   # [a, b, c, d]
        return cls(T, S)

    def superoperator(self):
        return self.data.reshape(9, 9, order="F")

    def apply(self, rho):
        return np.einsum("abcd,cd->ab", self.data, rho)

    def choi(self, inputs=(0, 1, 2)):
        """Choi matrix ``sum_cd |c><d| (x) E(|c><d|)`` restricted to ``inputs``."""
        inputs = list(inputs)
        blk = self.data[:, :, inputs][:, :, :, inputs]          # [a, b, c, d]
        k = len(inputs)
        return blk.transpose(2, 0, 3, 1).reshape(3 * k, 3 * k)

    def __sub__(self, other):
        return ProcessTensor(self.T, self.data - other.data)

    def __add__(self, other):
        return ProcessTensor(self.T, self.data + other.data)

    def to_dict(self):
        out = {}
        for a, b, c, d in product(LEVELS, repeat=4):
            v = self[a + b + c + d]
            if not np.isnan(v):
                out[a + b + c + d] = [float(v.real), float(v.imag)]
        return {"T_fs": self.T, "chi": out}


# --- dimer level structure and pulses -----------------------------------

@dataclass(frozen=True)
class DimerLevelSystem:
    """Ground, two single excitons and the biexciton ``f`` of a heterodimer.

    Energies in cm^-1 (optical, ``omega_g = 0``), dipoles as 3-vectors,
    optical dephasing rates in 1/fs keyed by the coherence, e.g. ``"ga"``.
    """

    omega_alpha: float
    omega_beta: float
    mu: dict
    dephasing: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.omega_alpha > self.omega_beta:
            raise ValueError("omega_alpha must exceed omega_beta")

    @property
    def omega_f(self):
        return self.omega_alpha + self.omega_beta

    def transition(self, p):
        """``omega_pg`` in cm^-1 for p in {a, b}."""
        return {"a": self.omega_alpha, "b": self.omega_beta}[p]

    def dipole(self, p, q):
        key = p + q if p + q in self.mu else q + p
        return np.asarray(self.mu[key], dtype=float)

    def rate(self, p, q):
        return self.dephasing.get(p + q, self.dephasing.get(q + p, np.nan))

    @classmethod
    def from_exciton_system(cls, system, *, optical_offset=DEFAULT_OPTICAL_OFFSET,
                            dipole_angle_deg=90.0, site_dipoles=None,
                            dephasing_time_fs=100.0):
        if system.n_sites != 2:
            raise ValueError("a dimer (2 sites) is required")
        basis = diagonalize(build_hamiltonian(system))
        E = basis.energies + optical_offset
        V = basis.vectors
        if site_dipoles is None:
            th = np.deg2rad(dipole_angle_deg)
            site_dipoles = np.array([[1.0, 0.0, 0.0], [np.cos(th), np.sin(th), 0.0]])
        m1, m2 = np.asarray(site_dipoles, dtype=float)
        ca, cb = V[:, 1], V[:, 0]        # alpha upper, beta lower
        mu = {
            "ag": ca[0] * m1 + ca[1] * m2,
            "bg": cb[0] * m1 + cb[1] * m2,
            "fa": ca[0] * m2 + ca[1] * m1,
            "fb": cb[0] * m2 + cb[1] * m1,
        }
        g = 1.0 / dephasing_time_fs
        deph = {k: g for k in ("ga", "gb", "ag", "bg", "fa", "fb")}
        return cls(float(E[1]), float(E[0]), mu, deph)


@dataclass(frozen=True)
class Pulse:
    carrier: float                  # cm^-1
    sigma: float                    # fs
    strength: float = 1.0
    polarization: tuple = (1.0, 0.0, 0.0)

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be > 0")
        e = np.asarray(self.polarization, dtype=float)
        if e.shape != (3,) or abs(np.linalg.norm(e) - 1.0) > 1e-12:
            raise ValueError("polarization must be a unit 3-vector")


def pulse_coefficient(pulse, omega_pg):
    """``C = -(Lambda / i) sqrt(2 pi sigma^2) exp(-sigma^2 (w_pg - w_i)^2 / 2)``.

    Frequencies in cm^-1, converted to rad/fs so that ``sigma * detuning`` is
    dimensionless.
    """
    dw = (omega_pg - pulse.carrier) * CM1_TO_RAD_FS
    return 1j * pulse.strength * np.sqrt(2.0 * np.pi) * pulse.sigma * np.exp(
        -0.5 * (pulse.sigma * dw) ** 2)


def isotropic_average_xxxx(a, b, c, d):
    """Orientational average of ``(a.x)(b.x)(c.x)(d.x)`` over random frames."""
    a, b, c, d = (np.asarray(v, dtype=float) for v in (a, b, c, d))
    return (np.dot(a, b) * np.dot(c, d) + np.dot(a, c) * np.dot(b, d)
            + np.dot(a, d) * np.dot(b, c)) / 15.0


def _four(system, pulses, average, v1, v2, v3, v4):
    if average:
        return isotropic_average_xxxx(v1, v2, v3, v4)
    e = [np.asarray(p.polarization, dtype=float) for p in pulses]
    return np.dot(v1, e[0]) * np.dot(v2, e[1]) * np.dot(v3, e[2]) * np.dot(v4, e[3])


def forward_matrix(system, pulses, *, average=True):
    """Complex (4, 81) matrix ``A`` with ``peaks = A @ chi.ravel()``.

    Rows follow :data:`PEAKS`; columns index ``chi[a, b, c, d]`` in C order.
    ``average=False`` contracts with the pulses' lab-frame polarizations.
    """
    if len(pulses) != 4:
        raise ValueError("four pulses (three excitation + heterodyne) are required")
    mu = system.dipole
    col = lambda a, b, c, d: np.ravel_multi_index((_IDX[a], _IDX[b], _IDX[c], _IDX[d]),
                                                  (3, 3, 3, 3))
    A = np.zeros((4, 81), dtype=complex)
    for row, (p, q) in enumerate(PEAKS):
        qq = _OTHER[q]
        C1 = pulse_coefficient(pulses[0], system.transition(p))
        C3q = pulse_coefficient(pulses[2], system.transition(q))
        C3o = pulse_coefficient(pulses[2], system.transition(qq))
        for s in ("a", "b"):
            C2 = pulse_coefficient(pulses[1], system.transition(s))
            pre = -C1 * C2
            w = lambda v3, v4: _four(system, pulses, average, mu(p, "g"), mu(s, "g"), v3, v4)
            g_qq = w(mu(q, "g"), mu(q, "g"))
            g_ff = w(mu("f", qq), mu("f", qq))
            g_x = w(mu("f", q), mu("f", qq)) - w(mu(qq, "g"), mu(q, "g"))
            A[row, col("g", "g", s, p)] += pre * C3q * g_qq
            if s == p:
                A[row, col("g", "g", "g", "g")] -= pre * C3q * g_qq
            A[row, col(q, q, s, p)] -= pre * C3q * g_qq
            A[row, col(qq, qq, s, p)] += pre * C3q * g_ff
            A[row, col(q, qq, s, p)] += pre * C3o * g_x
    return A


@dataclass
class PeakAmplitudeSet:
    """Rescaled amplitudes at the four peaks, keyed ``"aa", "ab", "ba", "bb"``."""

    peaks: dict
    pulses: tuple
    T: float = np.nan

    def vector(self):
        return np.array([self.peaks[p + q] for p, q in PEAKS])

    def raw(self, system):
        """Undo the rescaling ``S~ = Gamma_gp Gamma_qg S``."""
        return {k: v / (system.rate("g", k[0]) * system.rate(k[1], "g"))
                for k, v in self.peaks.items()}


def synthesize_peaks(chi, system, pulses, *, average=True):
    v = forward_matrix(system, pulses, average=average) @ chi.data.ravel()
    return PeakAmplitudeSet({p + q: complex(x) for (p, q), x in zip(PEAKS, v)},
                            tuple(pulses), chi.T)


def reduced_peak_aa(chi, system, pulses, *, average=True):
    """Narrowband limit of the (w_ag, w_ag) peak: only the chi_ab,aa term."""
    mu = system.dipole
    C = (pulse_coefficient(pulses[0], system.transition("a"))
         * pulse_coefficient(pulses[1], system.transition("a"))
         * pulse_coefficient(pulses[2], system.transition("b")))
    w = lambda v3, v4: _four(system, pulses, average, mu("a", "g"), mu("a", "g"), v3, v4)
    geom = w(mu("f", "a"), mu("f", "b")) - w(mu("b", "g"), mu("a", "g"))
    return -C * geom * chi["abaa"]


def experiment_pulses(system, *, sigma=100.0, strength=1.0,
                      polarization=(1.0, 0.0, 0.0)):
    """The 8 experiments: carriers (alpha | beta) for pulses 1-3.

    The heterodyne pulse only contributes its polarization.
    """
    out = []
    for choice in product("ab", repeat=3):
        ps = [Pulse(system.transition(c), sigma, strength, tuple(polarization))
              for c in choice]
        ps.append(Pulse(system.omega_alpha, sigma, strength, tuple(polarization)))
        out.append(tuple(ps))
    return out


def narrowband_experiment(system, *, sigma=470.0):
    """Experiment 1: pulses 1, 2 at w_ag and pulse 3 at w_bg."""
    return tuple(Pulse(system.transition(c), sigma) for c in ("a", "a", "b", "a"))


# --- inversion ----------------------------------------------------------

def _parameter_map():
    """Real parameters -> chi entries (complex 81 x 21) and their names.

    Exciton-population inputs give Hermitian outputs (gg, aa, bb real plus
    one complex coherence), the ``ba`` input is general and the ``ab`` input
    follows from Hermiticity preservation.
    """
    names, cols = [], []

    def entry(a, b, c, d):
        return np.ravel_multi_index((_IDX[a], _IDX[b], _IDX[c], _IDX[d]), (3, 3, 3, 3))

    def add(name, pairs):
        v = np.zeros(81, dtype=complex)
        for idx, coef in pairs:
            v[idx] += coef
        names.append(name)
        cols.append(v)

    add("Re chi_gggg", [(entry("g", "g", "g", "g"), 1.0)])
    for s in ("a", "b"):
        for o in ("g", "a", "b"):
            add(f"Re chi_{o}{o}{s}{s}", [(entry(o, o, s, s), 1.0)])
        add(f"Re chi_ab{s}{s}", [(entry("a", "b", s, s), 1.0), (entry("b", "a", s, s), 1.0)])
        add(f"Im chi_ab{s}{s}", [(entry("a", "b", s, s), 1j), (entry("b", "a", s, s), -1j)])
    for a, b in (("g", "g"), ("a", "a"), ("b", "b"), ("a", "b"), ("b", "a")):
        add(f"Re chi_{a}{b}ba", [(entry(a, b, "b", "a"), 1.0), (entry(b, a, "a", "b"), 1.0)])
        add(f"Im chi_{a}{b}ba", [(entry(a, b, "b", "a"), 1j), (entry(b, a, "a", "b"), -1j)])
    return np.array(cols).T, names


def _constraints(names):
    """Trace preservation on exciton inputs and ``chi_gggg = 1``."""
    C, d = [], []
    pos = {n: i for i, n in enumerate(names)}

    def row(entries, rhs):
        r = np.zeros(len(names))
        for n in entries:
            r[pos[n]] = 1.0
        C.append(r)
        d.append(rhs)

    row(["Re chi_gggg"], 1.0)
    for s in ("a", "b"):
        row([f"Re chi_gg{s}{s}", f"Re chi_aa{s}{s}", f"Re chi_bb{s}{s}"], 1.0)
    for part in ("Re", "Im"):
        row([f"{part} chi_ggba", f"{part} chi_aaba", f"{part} chi_bbba"], 0.0)
    return np.array(C), np.array(d)


_MEASURED_INPUTS = ("aa", "ab", "ba", "bb")


def _structural_fill(data, chi_gggg):
    """Entries fixed by the excitation-number block structure.

    The ground state is stationary, and optical (g-exciton) coherences never
    mix with the exciton block, so those outputs vanish for exciton inputs.
    Inputs involving ``g`` coherences stay undetermined (NaN).
    """
    data = data.copy()
    data[:, :, 0, 0] = 0.0
    data[0, 0, 0, 0] = chi_gggg
    for c, d in product((1, 2), repeat=2):
        for e in (1, 2):
            data[0, e, c, d] = 0.0
            data[e, 0, c, d] = 0.0
    return data


@dataclass
class InversionResult:
    chi: ProcessTensor
    residual: float
    condition: float
    rank: int
    n_free: int
    warnings: list
    parameters: np.ndarray
    parameter_names: list

    def to_dict(self):
        out = self.chi.to_dict()
        out.update(residual=self.residual, condition=self.condition, rank=self.rank,
                   n_free=self.n_free, warnings=list(self.warnings),
                   validation=validate_process(self.chi).to_dict())
        return out


def measurement_system(system, experiments, *, average=True):
    """Real design matrix and its parametrization for a list of pulse sets."""
    P, names = _parameter_map()
    blocks = [forward_matrix(system, pulses, average=average) @ P for pulses in experiments]
    A = np.vstack(blocks)
    return np.vstack([A.real, A.imag]), P, names


def qpt_invert(measurements, system, *, average=True, rank_tol=1e-10,
               condition_warning=CONDITION_WARNING):
    """Constrained least-squares estimate of chi from peak-amplitude sets."""
    measurements = list(measurements)
    if not measurements:
        raise ValueError("no measurements")
    experiments = [m.pulses for m in measurements]
    A, P, names = measurement_system(system, experiments, average=average)
    b = np.concatenate([m.vector() for m in measurements])
    b = np.concatenate([b.real, b.imag])
    C, d = _constraints(names)

    # nullspace elimination: theta = theta0 + N z
    theta0 = np.linalg.lstsq(C, d, rcond=None)[0]
    N = sla.null_space(C)
    AN = A @ N
    scale = np.linalg.norm(AN, axis=0)
    scale[scale == 0] = 1.0
    Q, R, perm = sla.qr(AN / scale, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > rank_tol * diag[0])) if diag.size else 0
    sv = np.linalg.svd(AN / scale, compute_uv=False)
    if rank < N.shape[1]:
        _, _, Vh = np.linalg.svd(AN / scale)
        dirs = []
        for v in Vh[rank:]:
            th = N @ (v / scale)
            k = np.argsort(-np.abs(th))[:3]
            dirs.append(" + ".join(f"{th[i]:+.2f} {names[i]}" for i in k))
        raise RankDeficiencyError(dirs)
    rhs = b - A @ theta0
    y = sla.solve_triangular(R, Q.T @ rhs)
    z = np.empty_like(y)
    z[perm] = y
    z /= scale
    theta = theta0 + N @ z
    residual = float(np.linalg.norm(A @ theta - b))
    cond = float(sv[0] / sv[-1])
    warnings = []
    if cond > condition_warning:
        warnings.append(f"condition number {cond:.3g} exceeds {condition_warning:.3g}")
    chi_flat = (P @ theta).reshape(3, 3, 3, 3)
    data = np.full((3, 3, 3, 3), np.nan + 0j)
    for c, d_ in ((1, 1), (1, 2), (2, 1), (2, 2)):
        data[:, :, c, d_] = chi_flat[:, :, c, d_]
    data = _structural_fill(data, chi_flat[0, 0, 0, 0])
    T = measurements[0].T
    return InversionResult(ProcessTensor(T, data), residual, cond, rank, N.shape[1],
                           warnings, theta, names)


def measured_entries():
    """Entries fixed by an inversion (determined or structural), as a mask."""
    mask = np.zeros((3, 3, 3, 3), dtype=bool)
    mask[:, :, 1:, 1:] = True
    mask[:, :, 0, 0] = True
    return mask


# --- validation ---------------------------------------------------------

@dataclass
class ProcessReport:
    hermiticity: float
    trace_alpha: float
    trace_beta: float
    trace_coherence: float
    choi_min_eigenvalue: float
    choi_eigenvalues: np.ndarray
    identity: float = np.nan
    tolerance: float = 1e-8

    @property
    def flags(self):
        out = []
        if self.hermiticity > self.tolerance:
            out.append("hermiticity")
        if max(self.trace_alpha, self.trace_beta, self.trace_coherence) > self.tolerance:
            out.append("trace")
        if self.choi_min_eigenvalue < -self.tolerance:
            out.append("positivity")
        if np.isfinite(self.identity) and self.identity > self.tolerance:
            out.append("identity")
        return out

    @property
    def ok(self):
        return not self.flags

    def to_dict(self):
        return {"hermiticity": self.hermiticity, "trace_alpha": self.trace_alpha,
                "trace_beta": self.trace_beta, "trace_coherence": self.trace_coherence,
                "choi_min_eigenvalue": self.choi_min_eigenvalue,
                "identity": None if np.isnan(self.identity) else self.identity,
                "flags": self.flags}


def validate_process(chi, *, tolerance=1e-8):
    """Report-only checks of the process-tensor invariants.

    Entries left undetermined (NaN) are skipped; the Choi matrix is then
    restricted to the exciton inputs.
    """
    X = chi.data
    herm = np.abs(X - np.conj(X.transpose(1, 0, 3, 2)))
    herm = float(np.nanmax(herm)) if np.any(~np.isnan(herm)) else np.nan
    tr = lambda c, d: abs(X[0, 0, c, d] + X[1, 1, c, d] + X[2, 2, c, d] - (c == d))
    inputs = (0, 1, 2) if not np.any(np.isnan(X)) else (1, 2)
    choi = chi.choi(inputs)
    ev = np.linalg.eigvalsh(0.5 * (choi + choi.conj().T))
    ident = np.nan
    if chi.T == 0:
        ident = float(np.nanmax(np.abs(X - ProcessTensor.identity().data)))
    return ProcessReport(herm, float(tr(1, 1)), float(tr(2, 2)), float(tr(2, 1)),
                         float(ev.min()), ev, ident, tolerance)


# --- chi from dynamics --------------------------------------------------

def _exciton_frame(system):
    """Unitary from the (g, site1, site2) basis to (g, alpha, beta)."""
    V = diagonalize(build_hamiltonian(system)).vectors
    U = np.zeros((3, 3))
    U[0, 0] = 1.0
    U[1:, 1] = V[:, 1]
    U[1:, 2] = V[:, 0]
    return U


def _hamiltonian3(system):
    H = np.zeros((3, 3))
    H[1:, 1:] = build_hamiltonian(system)
    return H * CM1_TO_RAD_FS


def _loss_dissipator(system):
    """Exciton loss as a jump to the ground state (keeps the trace)."""
    D = None
    for m in (1, 2):
        L = np.zeros((3, 3))
        L[0, m] = 1.0
        term = lindblad_dissipator(L, 2.0 * system.loss_rate)
        D = term if D is None else D + term
    return D


@dataclass
class ManifoldGenerator:
    """Linear generator on the (g, site1, site2) manifold, possibly a hierarchy.

    ``matrix`` acts on vectors whose first 9 entries are the column-stacked
    physical density matrix.
    """

    matrix: object
    system: object
    kind: str

    @property
    def dim(self):
        return self.matrix.shape[0]


def manifold_generator(system, model="redfield", *, tiers=8, n_matsubara=0,
                       allow_high_temperature_approximation=False):
    """Ground + single-exciton generator for a dimer.

    Trapping is switched off (the dimer is isolated); loss returns population
    to the ground state.
    """
    if system.n_sites != 2:
        raise ValueError("a dimer (2 sites) is required")
    H3 = _hamiltonian3(system)
    D = _loss_dissipator(system)
    if model == "redfield":
        lm = build_redfield_generator(system)
        M = commutator_superoperator(H3) + D
        for L, rate in lm.jump_operators():
            L3 = np.zeros((3, 3), dtype=complex)
            L3[1:, 1:] = L
            M = M + lindblad_dissipator(L3, rate)
        return ManifoldGenerator(M.matrix, system, "redfield")
    if model == "heom":
        bath = DrudeBath.from_system(system)
        if (n_matsubara == 0 and bath.gamma / bath.kT > 1.0
                and not allow_high_temperature_approximation):
            from .heom import HighTemperatureApproximationError
            raise HighTemperatureApproximationError(
                "beta*hbar*gamma > 1 needs Matsubara terms or the override flag")
        gen = HEOMGenerator(H3, (1, 2), bath, tiers, n_matsubara, dissipator=D)
        return ManifoldGenerator(gen.to_sparse(), system, "heom")
    raise ValueError("model must be 'redfield' or 'heom'")


def hermitian_spanning_set(n=3):
    """``n^2`` Hermitian matrices spanning all n x n matrices."""
    out = []
    for i in range(n):
        E = np.zeros((n, n), dtype=complex)
        E[i, i] = 1.0
        out.append(E)
    for i in range(n):
        for j in range(i + 1, n):
            E = np.zeros((n, n), dtype=complex)
            E[i, j] = E[j, i] = 1.0
            out.append(E)
            F = np.zeros((n, n), dtype=complex)
            F[i, j], F[j, i] = -1j, 1j
            out.append(F)
    return out


def chi_from_generator(generator, T_grid, *, condition_limit=1e8):
    """Process tensors in the (g, alpha, beta) frame on ``T_grid`` (fs).

    Each Hermitian spanning matrix is propagated from a factorized initial
    condition; ``chi`` follows by solving ``S B = Y`` for the map ``S``.
    """
    T_grid = np.atleast_1d(np.asarray(T_grid, dtype=float))
    if np.any(T_grid < 0):
        raise ValueError("waiting times must be >= 0")
    U = _exciton_frame(generator.system)
    inputs = hermitian_spanning_set(3)
    B = np.stack([vectorize(U @ E @ U.conj().T) for E in inputs], axis=1)   # site frame
    if np.linalg.cond(B) > condition_limit:
        raise np.linalg.LinAlgError("spanning set is ill-conditioned")
    Y0 = np.zeros((generator.dim, 9), dtype=complex)
    Y0[:9] = B
    order = np.argsort(T_grid)
    out = [None] * T_grid.size
    Y, t_prev = Y0, 0.0
    for k in order:
        T = T_grid[k]
        if T > t_prev:
            Y = expm_multiply(generator.matrix * (T - t_prev), Y)
            t_prev = T
        outputs = Y[:9]
        S_site = np.linalg.solve(B.T, outputs.T).T                         # S B = Y
        # change of frame: rho_exc = U^+ rho_site U
        W = np.kron(U.T, U.conj().T)                                        # vec(U^+ X U)
        Winv = np.kron(U.conj(), U)
        out[k] = ProcessTensor.from_superoperator(float(T), W @ S_site @ Winv)
    return out


def unitary_process(H, T):
    """``chi_abcd = U_ac U*_bd`` for ``U = exp(-i H T)`` (H in rad/fs)."""
    Uo = sla.expm(-1j * np.asarray(H) * T)
    return ProcessTensor(T, np.einsum("ac,bd->abcd", Uo, Uo.conj()))


# --- measurement exchange JSON ------------------------------------------

def measurements_to_json(measurements, path=None):
    doc = {"experiments": []}
    for m in measurements:
        doc["experiments"].append({
            "T_fs": m.T,
            "pulses": [{"carrier_cm1": p.carrier, "sigma_fs": p.sigma,
                        "strength": p.strength, "polarization": list(p.polarization)}
                       for p in m.pulses],
            "peaks": {k: {"re": v.real, "im": v.imag} for k, v in m.peaks.items()},
        })
    text = json.dumps(doc, indent=2)
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text


def measurements_from_json(source):
    if isinstance(source, str) and source.lstrip().startswith("{"):
        doc = json.loads(source)
    else:
        with open(source) as fh:
            doc = json.load(fh)
    out = []
    for e in doc["experiments"]:
        pulses = tuple(Pulse(p["carrier_cm1"], p["sigma_fs"], p.get("strength", 1.0),
                             tuple(p.get("polarization", (1.0, 0.0, 0.0))))
                       for p in e["pulses"])
        peaks = {k: complex(v["re"], v["im"]) for k, v in e["peaks"].items()}
        out.append(PeakAmplitudeSet(peaks, pulses, e.get("T_fs", np.nan)))
    return out
