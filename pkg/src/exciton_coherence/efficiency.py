"""Transfer efficiency, its coherent/decoherent decomposition and coherence integrals.

Sign convention: with ``M_trap rho = -kappa {P_trap, rho}`` the time integral
of the state is ``x = int_0^inf rho dt = -M^{-1} rho0`` and the efficiency is
``eta = -Tr{M_trap x}``. A part of the generator contributes

    eta_part = -Tr{M_trap (M_trap + M_loss)^{-1} M_part M^{-1} rho0},

which is positive for the coherent and decoherent parts of physical models.
For an initial state without weight on the trap site,
``eta = eta_H + eta_decoherence`` exactly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import propagation
from .core import CM1_TO_RAD_FS, build_hamiltonian, check_density_matrix, vectorize
from .heom import HEOMSystemGenerator
from .redfield import LindbladModel, build_trap_loss

CONDITION_LIMIT = 1e13
COHERENCE_THRESHOLD = 1e-3
QUADRATURE_THRESHOLD = 1e-9
_DENSE_LIMIT = 2500
_ITERATIVE_ABOVE = 4000


class SingularGeneratorError(np.linalg.LinAlgError):
    """Generator is (numerically) singular; ``null_direction`` spans the kernel."""

    def __init__(self, message, null_direction=None, condition=np.inf):
        self.null_direction = null_direction
        self.condition = condition
        super().__init__(message)


class NotDissipativeError(ValueError):
    pass


@dataclass(frozen=True)
class EfficiencyReport:
    eta: float
    eta_H: float
    eta_decoherence: float
    eta_init: float
    eta_quadrature: float = np.nan
    condition: float = np.nan

    @property
    def eta_dyn(self):
        return self.eta_H - self.eta_init

    @property
    def residual(self):
        return self.eta - (self.eta_H + self.eta_decoherence)


@dataclass(frozen=True)
class CoherenceReport:
    C: float
    C_normalized: float
    cutoff_time: float
    C_reference: float


@dataclass
class GeneratorParts:
    """Generator split into coherent, decoherent, trap and loss pieces.

    Matrices act on column-stacked density matrices (Redfield) or on the full
    hierarchy vector (HEOM), whose leading ``n*n`` block is the physical state.
    """

    total: object
    hamiltonian: object
    decoherence: object
    trap: object
    loss: object
    n: int
    kind: str
    system: object = None
    block_size: int | None = None

    @property
    def dim(self):
        return self.total.shape[0]

    def lift(self, rho0):
        y = np.zeros(self.dim, dtype=complex)
        y[: self.n * self.n] = vectorize(rho0)
        return y

    def physical_trace(self, y):
        n = self.n
        return complex(np.sum(y[: n * n][:: n + 1]))


def generator_parts(model):
    """Build :class:`GeneratorParts` from a Redfield or HEOM model."""
    if isinstance(model, GeneratorParts):
        return model
    if isinstance(model, LindbladModel):
        return GeneratorParts(model.generator.matrix, model.M_H.matrix,
                              model.M_decoherence.matrix, model.M_trap.matrix,
                              model.M_loss.matrix, model.n, "redfield", model.system)
    if isinstance(model, HEOMSystemGenerator):
        g = model.heom
        total = g.to_sparse()
        H = g.block_diagonal(model.M_H)
        trap = g.block_diagonal(model.M_trap)
        loss = g.block_diagonal(model.M_loss)
        dec = (total - H - trap - loss).tocsr()
        dec.eliminate_zeros()
        return GeneratorParts(total, H, dec, trap, loss, g.n, "heom", model.system,
                              g.n * g.n)
    raise TypeError(f"unsupported model type {type(model).__name__}")


class LinearSolver:
    """Linear solves with the generator.

    Small systems use LU with partial pivoting plus iterative refinement and
    report a 1-norm condition estimate. Large hierarchies (sparse, more than
    ``iterative_above`` unknowns) use GMRES preconditioned by the exact
    inverses of the per-ADO diagonal blocks; their ``condition`` is NaN and
    ``residual`` records the achieved relative residual instead.
    """

    def __init__(self, M, *, block_size=None, condition_limit=CONDITION_LIMIT,
                 iterative_above=_ITERATIVE_ABOVE, rtol=1e-13):
        self.sparse = sp.issparse(M)
        self.M = M.tocsr() if self.sparse else np.asarray(M, dtype=complex)
        self.residual = np.nan
        self.rtol = rtol
        n = self.M.shape[0]
        self.iterative = self.sparse and block_size is not None and n > iterative_above
        if self.iterative:
            self._setup_block_jacobi(block_size)
            self.condition = np.nan
            return
        try:
            if self.sparse:
                self._lu = spla.splu(self.M.tocsc().astype(complex))
                self._solve = self._lu.solve
            else:
                self._lu = sla.lu_factor(self.M, check_finite=True)
                self._solve = lambda b: sla.lu_solve(self._lu, b)
        except (RuntimeError, ValueError) as exc:
            raise SingularGeneratorError(f"factorization failed: {exc}",
                                         self._null_direction()) from exc
        self.condition = self._condition_estimate()
        if not np.isfinite(self.condition) or self.condition > condition_limit:
            raise SingularGeneratorError(
                f"generator is near-singular (condition ~ {self.condition:.3g})",
                self._null_direction(), self.condition)

    def _setup_block_jacobi(self, b):
        n = self.M.shape[0]
        if n % b:
            raise ValueError("block size must divide the dimension")
        nb = n // b
        diag = np.stack([self.M[k * b:(k + 1) * b, k * b:(k + 1) * b].toarray()
                         for k in range(nb)])
        try:
            inv = np.linalg.inv(diag)
        except np.linalg.LinAlgError as exc:
            raise SingularGeneratorError(f"singular diagonal block: {exc}") from exc
        self._precond = spla.LinearOperator(
            self.M.shape, dtype=complex,
            matvec=lambda v: np.einsum("kij,kj->ki", inv, v.reshape(nb, b)).reshape(-1))

    def _condition_estimate(self):
        if self.sparse:
            norm = spla.norm(self.M, 1)
            inv = spla.LinearOperator(self.M.shape, matvec=self._solve,
                                      rmatvec=lambda b: self._lu.solve(b, trans="H"),
                                      dtype=complex)
            return float(norm * spla.onenormest(inv))
        with np.errstate(all="ignore"):
            rc = sla.lapack.zgecon(self._lu[0], np.linalg.norm(self.M, 1), norm="1")[0]
        return np.inf if rc == 0 else float(1.0 / rc)

    def _null_direction(self):
        if self.sparse and self.M.shape[0] > _DENSE_LIMIT:
            return None
        A = self.M.toarray() if self.sparse else self.M
        return np.linalg.svd(A)[2][-1].conj()

    def solve(self, b, refine=2):
        b = np.asarray(b, dtype=complex)
        if self.iterative:
            x, info = spla.gmres(self.M, b, M=self._precond, rtol=self.rtol, atol=0.0,
                                 restart=200, maxiter=50)
            self.residual = float(np.linalg.norm(b - self.M @ x) / np.linalg.norm(b))
            if info != 0 and self.residual > 1e3 * self.rtol:
                raise SingularGeneratorError(
                    f"GMRES did not converge (relative residual {self.residual:.3g}); "
                    "the generator may be singular")
            return x
        x = self._solve(b)
        for _ in range(refine):
            x = x + self._solve(b - self.M @ x)
        return x


def check_dissipative(M, solver=None):
    """Require every eigenvalue of ``M`` to have negative real part.

    Large sparse generators are checked through the eigenvalue nearest zero,
    found by shift-invert iteration with ``solver``.
    """
    if sp.issparse(M) and M.shape[0] > _DENSE_LIMIT:
        solver = solver or LinearSolver(M)
        op = spla.LinearOperator(M.shape, matvec=lambda v: solver.solve(v, refine=0),
                                 dtype=complex)
        try:
            w = spla.eigs(M, k=1, sigma=0, which="LM", OPinv=op, tol=1e-6,
                          return_eigenvectors=False, maxiter=500)
        except (spla.ArpackNoConvergence, RuntimeError):
            return None
        top = float(np.max(w.real))
    else:
        A = M.toarray() if sp.issparse(M) else np.asarray(M)
        top = float(np.max(np.linalg.eigvals(A).real))
    if top >= 0.0:
        raise NotDissipativeError(f"generator has an eigenvalue with Re = {top:.3g} >= 0")
    return top


def _trace_of(parts, op, x):
    return parts.physical_trace(op @ x)


def time_integral(parts, rho0, solver=None):
    """``x = int_0^inf rho(t) dt`` (hierarchy vector) and the solver used."""
    solver = solver or LinearSolver(parts.total, block_size=parts.block_size)
    return -solver.solve(parts.lift(rho0)), solver


def efficiency(model, rho0, *, check=True):
    """Algebraic efficiency ``eta = -Tr{M_trap M^{-1} rho0}``."""
    parts = generator_parts(model)
    solver = LinearSolver(parts.total, block_size=parts.block_size)
    if check:
        check_dissipative(parts.total, solver)
    x, _ = time_integral(parts, rho0, solver)
    return float(-_trace_of(parts, parts.trap, x).real) + 0.0


def contribution(M_part, M, M_trap, M_loss, rho0, *, n=None):
    """``-Tr{M_trap (M_trap+M_loss)^{-1} M_part M^{-1} rho0}`` via two solves."""
    rho0 = np.asarray(rho0, dtype=complex)
    n = rho0.shape[0] if n is None else n
    M_part, M, M_trap, M_loss = (getattr(A, "matrix", A) for A in (M_part, M, M_trap, M_loss))
    parts = GeneratorParts(M, None, None, M_trap, M_loss, n, "generic")
    x, _ = time_integral(parts, rho0)
    return _contribution(parts, M_part, x)


def _sink_solver(parts):
    S = parts.trap + parts.loss
    # (M_trap + M_loss) is diagonal in the column-stacked basis
    d = S.diagonal() if sp.issparse(S) else np.diag(S)
    off = S - (sp.diags(d) if sp.issparse(S) else np.diag(d))
    if (abs(off).max() if sp.issparse(off) else np.abs(off).max()) > 0:
        return LinearSolver(S).solve
    # The result only ever feeds Tr{M_trap y}, and M_trap is diagonal here, so
    # entries outside the trap row and column are dropped. This is exact for
    # any Gamma and avoids dividing by a vanishing (or zero) loss rate.
    t = parts.trap.diagonal() if sp.issparse(parts.trap) else np.diag(parts.trap)
    keep = t != 0
    safe = np.where(keep, d, 1.0)
    return lambda b: np.where(keep, b / safe, 0.0)


def _contribution(parts, M_part, x, sink=None):
    sink = sink or _sink_solver(parts)
    # M^{-1} rho0 = -x
    y = sink(M_part @ x)
    return float(_trace_of(parts, parts.trap, y).real) + 0.0


def efficiency_quadrature(model, rho0, *, threshold=QUADRATURE_THRESHOLD, engine="auto"):
    """Time-domain efficiency: integrated trapped flux until Tr rho <= threshold."""
    parts = generator_parts(model)
    obs = propagation.SiteObservables(parts.n, parts.system.trap_site,
                                      parts.system.trap_rate)
    gen = _propagation_operator(model, parts)
    res = propagation.time_integrals(gen, parts.lift(rho0), obs, threshold=threshold,
                                     engine=_engine_for(model, engine))
    return res.trapped


def _propagation_operator(model, parts):
    return parts.total


def _engine_for(model, engine):
    # sparse CSR products beat dense panel propagators for hierarchies
    if engine == "auto" and isinstance(model, HEOMSystemGenerator):
        return "ode"
    return engine


def _pure_components(rho0, tol=1e-12):
    rho0 = check_density_matrix(np.asarray(rho0, dtype=complex))
    w, V = np.linalg.eigh(rho0)
    keep = w > tol
    return w[keep] / w[keep].sum() * np.trace(rho0).real, V[:, keep].T


def _no_jump_hamiltonian(model, system):
    if isinstance(model, LindbladModel):
        return model.effective_hamiltonian()
    H = build_hamiltonian(system) * CM1_TO_RAD_FS
    n = system.n_sites
    K = system.trap_rate * np.diag(np.eye(n)[system.trap_site]) + system.loss_rate * np.eye(n)
    return H - 1j * K


def initial_state_contribution(model, psi, *, weights=None):
    """Trapping probability along the damped no-jump trajectory of ``psi``.

    ``psi`` is one state vector or a stack of them (rows) with ``weights``
    giving a classical mixture; the result is the weighted sum.
    ``int rho_nojump dt`` solves ``A X + X A^+ = -psi psi^+`` with
    ``A = -i H_eff``.
    """
    if not isinstance(model, LindbladModel):
        raise TypeError("the no-jump construction needs a Lindblad-form (Redfield) model")
    psis = np.atleast_2d(np.asarray(psi, dtype=complex))
    if weights is None:
        if psis.shape[0] != 1:
            raise ValueError("a mixture needs explicit weights")
        weights = [1.0]
    weights = np.asarray(weights, dtype=float)
    if weights.shape[0] != psis.shape[0] or np.any(weights < 0):
        raise ValueError("weights must be nonnegative, one per state")
    s = model.system
    A = -1j * model.effective_hamiltonian()
    m = s.trap_site
    total = 0.0
    for p, v in zip(weights, psis):
        X = sla.solve_continuous_lyapunov(A, -np.outer(v, v.conj()))
        total += p * 2.0 * s.trap_rate * X[m, m].real
    return float(total)


def initial_state_from_rho(rho0):
    """Pure-state decomposition ``(weights, states)`` of a density matrix."""
    return _pure_components(rho0)


def efficiency_report(model, rho0, *, quadrature=True, check=True):
    """Full decomposition for a Redfield or HEOM model.

    ``eta_init`` uses the no-jump construction and is only defined for
    Lindblad-form models; it is NaN for HEOM.
    """
    parts = generator_parts(model)
    solver = LinearSolver(parts.total, block_size=parts.block_size)
    if check:
        check_dissipative(parts.total, solver)
    x, _ = time_integral(parts, rho0, solver)
    eta = float(-_trace_of(parts, parts.trap, x).real) + 0.0
    sink = _sink_solver(parts)
    eta_H = _contribution(parts, parts.hamiltonian, x, sink)
    eta_dec = _contribution(parts, parts.decoherence, x, sink)
    if isinstance(model, LindbladModel):
        w, states = _pure_components(rho0)
        eta_init = initial_state_contribution(model, states, weights=w)
    else:
        eta_init = np.nan
    eta_q = efficiency_quadrature(model, rho0) if quadrature else np.nan
    return EfficiencyReport(eta, eta_H, eta_dec, eta_init, eta_q, solver.condition)


def coherent_reference(system, rho0, *, basis=None, threshold=COHERENCE_THRESHOLD):
    """Integrated coherence of the coherent + trap/loss dynamics (lambda = 0).

    Uses the pure-state decomposition of ``rho0`` and the non-Hermitian
    Hamiltonian, which is exact when no quantum jumps act.
    """
    w, states = _pure_components(rho0)
    H_eff = _no_jump_hamiltonian(None, system)
    n = system.n_sites
    if basis is not None:
        M_trap, M_loss = build_trap_loss(system)
        from .core import commutator_superoperator
        M = (commutator_superoperator(build_hamiltonian(system) * CM1_TO_RAD_FS)
             + M_trap + M_loss).matrix
        obs = propagation.SiteObservables(n, system.trap_site, system.trap_rate, basis=basis)
        return propagation.time_integrals(M, vectorize(rho0), obs, threshold=threshold)
    G = sp.kron(sp.identity(len(w)), sp.csr_matrix(-1j * H_eff)).toarray()
    obs = propagation.PureStateObservables(n, system.trap_site, system.trap_rate, w)
    return propagation.time_integrals(G, states.reshape(-1), obs, threshold=threshold)


def integrated_coherence(model, rho0, *, basis="site", threshold=COHERENCE_THRESHOLD,
                         reference=None, engine="auto"):
    """``C = sum_{m != n} int_0^t_cut |rho_mn(t)| dt`` and ``C / C(lambda=0)``.

    ``basis="exciton"`` measures the coherences in the exciton basis instead.
    ``reference`` may pass a precomputed C(0).
    """
    parts = generator_parts(model)
    s = parts.system
    U = None
    if basis == "exciton":
        from .core import diagonalize
        U = diagonalize(build_hamiltonian(s)).vectors
    elif basis != "site":
        raise ValueError("basis must be 'site' or 'exciton'")
    obs = propagation.SiteObservables(parts.n, s.trap_site, s.trap_rate, basis=U)
    res = propagation.time_integrals(_propagation_operator(model, parts), parts.lift(rho0),
                                     obs, threshold=threshold,
                                     engine=_engine_for(model, engine))
    if reference is None and _is_zero(parts.decoherence):
        # the model already is the coherent + trap/loss reference dynamics
        reference = res.coherence
    if reference is None:
        reference = coherent_reference(s, rho0, basis=U, threshold=threshold).coherence
    if reference <= 0:
        raise ValueError("coherent reference has no coherence; C_normalized undefined")
    return CoherenceReport(res.coherence, res.coherence / reference, res.cutoff_time,
                           reference)


def _is_zero(A):
    if sp.issparse(A):
        return A.count_nonzero() == 0
    return not np.any(A)


def concurrence(rho):
    """Pairwise concurrence ``2 |rho_12|`` of a dimer single-exciton state."""
    rho = np.asarray(rho)
    return float(2.0 * abs(rho[0, 1]))
