"""Time propagation of linear master equations.

Two engines share one contract:

* ``integrate_ode``: adaptive embedded Runge-Kutta (Dormand-Prince 4(5), via
  :func:`scipy.integrate.solve_ivp`) on a vectorized state, with the generator
  given as a matrix or any callable ``y -> M y``.
* ``ExactPropagator``: dense matrix exponential for time-independent
  generators small enough to exponentiate.

``time_integrals`` combines either engine with quadrature of trace, trapped
flux and coherence magnitudes along the trajectory, stopping once the trace
falls below a threshold.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.integrate import solve_ivp
from scipy.sparse.linalg import expm_multiply

from .core import devectorize, vectorize

DEFAULT_RTOL = 1e-8
DEFAULT_ATOL = 1e-10

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(8)


class IntegrationError(RuntimeError):
    pass


class HorizonError(RuntimeError):
    """Trace did not fall below the cutoff within the configured horizon."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (n_times, n, n)

    @property
    def traces(self):
        return np.einsum("tii->t", self.states).real

    def populations(self):
        return np.einsum("tii->ti", self.states).real


def _as_apply(generator):
    if callable(generator) and not sp.issparse(generator) and not isinstance(generator, np.ndarray):
        return generator
    M = generator

    def apply(y):
        return M @ y
    return apply


def _check_grid(t_grid):
    t = np.asarray(t_grid, dtype=float)
    if t.ndim != 1 or t.size == 0:
        raise ValueError("t_grid must be a non-empty 1-D array")
    if t[0] != 0.0:
        raise ValueError("t_grid must start at 0")
    if np.any(np.diff(t) <= 0):
        raise ValueError("t_grid must be strictly ascending")
    return t


def integrate_ode(generator, y0, t_grid, *, rtol=DEFAULT_RTOL, atol=DEFAULT_ATOL,
                  method="RK45", max_step=np.inf):
    """Integrate ``dy/dt = M y`` and return samples at ``t_grid`` (rows)."""
    t = _check_grid(t_grid)
    apply = _as_apply(generator)
    y0 = np.asarray(y0, dtype=complex)
    if t.size == 1:
        return y0[None, :].copy()
    sol = solve_ivp(lambda _t, y: apply(y), (0.0, t[-1]), y0, method=method,
                    t_eval=t, rtol=rtol, atol=atol, max_step=max_step)
    if not sol.success:
        raise IntegrationError(f"integrator failed: {sol.message}")
    return sol.y.T


class ExactPropagator:
    """``exp(M t)`` for a dense, time-independent generator."""

    def __init__(self, M):
        M = M.toarray() if sp.issparse(M) else np.asarray(M)
        self.M = M.astype(complex)
        self.dim = M.shape[0]
        self._cache = {}

    def step(self, dt):
        key = float(dt)
        if key not in self._cache:
            self._cache[key] = sla.expm(self.M * dt)
        return self._cache[key]

    def evolve(self, y0, t_grid):
        t = _check_grid(t_grid)
        out = np.empty((t.size, self.dim), dtype=complex)
        y = np.asarray(y0, dtype=complex)
        out[0] = y
        for k in range(1, t.size):
            y = self.step(t[k] - t[k - 1]) @ y
            out[k] = y
        return out

    def spectral_radius(self):
        if self.dim <= 2500:
            return float(np.abs(np.linalg.eigvals(self.M)).max())
        return float(np.abs(self.M).sum(axis=0).max())


def propagate_states(generator, rho0, t_grid, *, method="rk45", rtol=DEFAULT_RTOL,
                     atol=DEFAULT_ATOL, extra_dim=None):
    """Propagate a density matrix (optionally embedded in a longer vector).

    ``extra_dim`` is the total length of the propagated vector when the
    generator acts on an extended space whose leading ``n*n`` entries are the
    physical state (HEOM). Returns ``(Trajectory, full_vectors)``.
    """
    rho0 = np.asarray(rho0, dtype=complex)
    n = rho0.shape[0]
    y0 = vectorize(rho0)
    if extra_dim is not None and extra_dim > y0.size:
        y0 = np.concatenate([y0, np.zeros(extra_dim - y0.size, dtype=complex)])
    t = _check_grid(t_grid)
    if method == "rk45":
        Y = integrate_ode(generator, y0, t, rtol=rtol, atol=atol)
    elif method == "expm":
        if callable(generator) and not isinstance(generator, np.ndarray) and not sp.issparse(generator):
            raise ValueError("expm method needs an explicit generator matrix")
        Y = ExactPropagator(generator).evolve(y0, t)
    else:
        raise ValueError(f"unknown method {method!r}")
    states = np.stack([devectorize(y[: n * n], n) for y in Y])
    return Trajectory(t, states), Y


# --- observables along a trajectory -------------------------------------

class SiteObservables:
    """Trace, trapped flux ``2 kappa rho_mm`` and sum of |rho_mn| (m != n).

    Works on batches of vectors whose leading ``n*n`` entries are the
    column-stacked physical density matrix.
    """

    def __init__(self, n, trap_site, trap_rate, basis=None):
        self.n = n
        self.trap_site = trap_site
        self.trap_rate = trap_rate
        self.basis = basis  # optional unitary; coherences measured in its basis
        idx = np.arange(n * n)
        rows, cols = idx % n, idx // n
        self.diag = np.flatnonzero(rows == cols)
        self.off = np.flatnonzero(rows != cols)
        self.trap_idx = trap_site + n * trap_site

    def __call__(self, Y):
        Y = np.atleast_2d(Y)
        phys = Y[:, : self.n * self.n]
        trace = phys[:, self.diag].sum(axis=1).real
        flux = 2.0 * self.trap_rate * phys[:, self.trap_idx].real
        if self.basis is None:
            coh = np.abs(phys[:, self.off]).sum(axis=1)
        else:
            R = phys.reshape(-1, self.n, self.n).transpose(0, 2, 1)
            R = self.basis.conj().T @ R @ self.basis
            coh = np.abs(R).sum(axis=(1, 2)) - np.abs(np.einsum("kii->ki", R)).sum(axis=1)
        return np.stack([trace, flux, coh], axis=1)


class PureStateObservables(SiteObservables):
    """Same observables for a stacked set of weighted pure states.

    Valid only for generators without quantum jumps, where
    ``rho(t) = sum_k p_k psi_k(t) psi_k(t)^+``.
    """

    def __init__(self, n, trap_site, trap_rate, weights):
        super().__init__(n, trap_site, trap_rate)
        self.weights = np.asarray(weights, dtype=float)

    def __call__(self, Y):
        Y = np.atleast_2d(Y)
        psi = Y.reshape(Y.shape[0], self.weights.size, self.n)
        rho = np.einsum("k,bki,bkj->bij", self.weights, psi, psi.conj())
        trace = np.einsum("bii->b", rho).real
        flux = 2.0 * self.trap_rate * rho[:, self.trap_site, self.trap_site].real
        coh = np.abs(rho).sum(axis=(1, 2)) - np.abs(np.einsum("bii->bi", rho)).sum(axis=1)
        return np.stack([trace, flux, coh], axis=1)


@dataclass
class TimeIntegrals:
    trapped: float       # integral of the trapped flux
    coherence: float     # integral of the coherence magnitude sum
    cutoff_time: float
    final_trace: float
    n_steps: int


def _panel_width(prop):
    rho = prop.spectral_radius()
    return 2.0 / max(rho, 1e-12)


def time_integrals(generator, y0, observables, *, threshold=1e-3, horizon=1e8,
                   engine="auto", panel=None, rtol=DEFAULT_RTOL, atol=DEFAULT_ATOL):
    """Integrate trapped flux and coherences until ``trace <= threshold``.

    ``engine='exact'`` uses composite 8-point Gauss-Legendre panels driven by
    the exact propagator; ``engine='ode'`` appends the integrands to the ODE
    state so the adaptive integrator controls the quadrature error as well.
    """
    y0 = np.asarray(y0, dtype=complex)
    if engine == "auto":
        engine = "exact" if y0.size <= 1500 else "ode"
    if engine == "exact":
        return _exact_integrals(generator, y0, observables, threshold, horizon, panel)
    if engine == "ode":
        return _ode_integrals(generator, y0, observables, threshold, horizon, rtol, atol)
    raise ValueError(f"unknown engine {engine!r}")


def _exact_integrals(generator, y0, obs, threshold, horizon, panel):
    prop = ExactPropagator(generator)
    H = panel if panel is not None else _panel_width(prop)
    offsets = 0.5 * H * (_GL_NODES + 1.0)
    weights = 0.5 * H * _GL_WEIGHTS
    P_nodes = np.stack([sla.expm(prop.M * tau) for tau in offsets])
    P_step = prop.step(H)
    d = prop.dim
    chunk = 256 if d <= 100 else 1
    if chunk > 1:
        powers = np.empty((chunk, d, d), dtype=complex)
        powers[0] = np.eye(d)
        for j in range(1, chunk):
            powers[j] = P_step @ powers[j - 1]
        P_chunk = P_step @ powers[-1]

    acc = np.zeros(2)
    t0 = 0.0
    y = y0.copy()
    n_panels = 0
    tr0 = obs(y)[0, 0]
    if tr0 <= threshold:
        return TimeIntegrals(0.0, 0.0, 0.0, tr0, 0)
    while t0 < horizon:
        starts = (powers @ y) if chunk > 1 else y[None, :]
        ends = starts @ P_step.T
        end_trace = obs(ends)[:, 0]
        hit = np.flatnonzero(end_trace <= threshold)
        last = hit[0] if hit.size else starts.shape[0] - 1
        node_vals = np.einsum("qij,kj->kqi", P_nodes, starts[: last + 1])
        vals = obs(node_vals.reshape(-1, d)).reshape(last + 1, 8, 3)
        if hit.size:
            acc += (vals[:last, :, 1:] * weights[None, :, None]).sum(axis=(0, 1))
            t_start = t0 + last * H
            s = starts[last]
            tc, part = _partial_panel(prop.M, s, obs, threshold, H)
            acc += part
            return TimeIntegrals(acc[0], acc[1], t_start + tc, threshold,
                                 n_panels + last + 1)
        acc += (vals[:, :, 1:] * weights[None, :, None]).sum(axis=(0, 1))
        n_panels += starts.shape[0]
        t0 += starts.shape[0] * H
        y = (P_chunk @ y) if chunk > 1 else ends[0]
    raise HorizonError(f"trace still {obs(y)[0, 0]:.3g} at t={t0:.4g} fs", obs(y)[0, 0])


def _partial_panel(M, s, obs, threshold, H):
    """Locate the trace crossing inside one panel and integrate up to it."""
    lo, hi = 0.0, H
    tr = lambda tau: obs(expm_multiply(M * tau, s))[0, 0]
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if tr(mid) > threshold:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-6 * H:
            break
    tc = hi
    offsets = 0.5 * tc * (_GL_NODES + 1.0)
    w = 0.5 * tc * _GL_WEIGHTS
    vals = np.stack([obs(expm_multiply(M * tau, s))[0] for tau in offsets])
    return tc, (vals[:, 1:] * w[:, None]).sum(axis=0)


def _ode_integrals(generator, y0, obs, threshold, horizon, rtol, atol):
    apply = _as_apply(generator)
    d = y0.size

    def rhs(_t, z):
        y = z[:d]
        o = obs(y)[0]
        out = np.empty(d + 2, dtype=complex)
        out[:d] = apply(y)
        out[d] = o[1]
        out[d + 1] = o[2]
        return out

    def crossed(_t, z):
        return obs(z[:d])[0, 0] - threshold
    crossed.terminal = True
    crossed.direction = -1

    z0 = np.concatenate([y0, [0.0, 0.0]]).astype(complex)
    if obs(y0)[0, 0] <= threshold:
        return TimeIntegrals(0.0, 0.0, 0.0, obs(y0)[0, 0], 0)
    sol = solve_ivp(rhs, (0.0, horizon), z0, method="RK45", rtol=rtol, atol=atol,
                    events=crossed)
    if not sol.success:
        raise IntegrationError(f"integrator failed: {sol.message}")
    if sol.status != 1:
        tr = obs(sol.y[:d, -1])[0, 0]
        raise HorizonError(f"trace still {tr:.3g} at t={horizon:.4g} fs", tr)
    z = sol.y_events[0][0]
    return TimeIntegrals(z[d].real, z[d + 1].real, float(sol.t_events[0][0]),
                         obs(z[:d])[0, 0], sol.t.size)
