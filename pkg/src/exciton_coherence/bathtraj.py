"""Site-energy trajectories, Monte-Carlo unitary ensembles and bath spectra.

Trajectories hold site energies in cm^-1 sampled every ``dt`` fs. Stochastic
runs derive one generator per instance from ``SeedSequence(seed,
spawn_key=(i,))``, so results do not depend on how instances are batched or
distributed over workers.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter

from .core import CM1_TO_RAD_FS, check_density_matrix, thermal_energy_cm1

BATCH_SIZE = 250


class TrajectoryFormatError(ValueError):
    pass


@dataclass
class SiteEnergyTrajectory:
    dt: float                       # fs
    series: np.ndarray              # (n_steps, n_sites), cm^-1
    metadata: dict = field(default_factory=dict)
    couplings: dict = field(default_factory=dict)   # {(i, j): array}, unused in dynamics

    def __post_init__(self):
        self.series = np.asarray(self.series, dtype=float)
        if self.series.ndim != 2:
            raise ValueError("series must be (n_steps, n_sites)")
        if not self.dt > 0:
            raise ValueError("dt must be > 0")

    @property
    def n_steps(self):
        return self.series.shape[0]

    @property
    def n_sites(self):
        return self.series.shape[1]

    @property
    def times(self):
        return self.dt * np.arange(self.n_steps)

    @property
    def mean_energies(self):
        """Time-averaged site energies (the reference energies of the system)."""
        return self.series.mean(axis=0)

    @property
    def fluctuations(self):
        return self.series - self.mean_energies


def write_trajectory(traj, path):
    """CSV: ``t_fs, site1_cm1, ...`` plus optional ``J_i_j_cm1`` columns."""
    pairs = sorted(traj.couplings)
    header = ["t_fs"] + [f"site{m + 1}_cm1" for m in range(traj.n_sites)]
    header += [f"J_{i + 1}_{j + 1}_cm1" for i, j in pairs]
    cols = [traj.times] + [traj.series[:, m] for m in range(traj.n_sites)]
    cols += [np.asarray(traj.couplings[p], dtype=float) for p in pairs]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in zip(*cols):
            w.writerow([repr(float(v)) for v in row])


def ingest_trajectory(path):
    """Read and validate a trajectory CSV."""
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise FileNotFoundError(f"cannot open trajectory file {path}: {exc}") from exc
    with fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise TrajectoryFormatError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if not header or header[0] != "t_fs":
        raise TrajectoryFormatError(f"{path}: first column must be t_fs")
    site_cols = [k for k, h in enumerate(header) if h.startswith("site")]
    j_cols = [k for k, h in enumerate(header) if h.startswith("J_")]
    if not site_cols or len(site_cols) + len(j_cols) + 1 != len(header):
        raise TrajectoryFormatError(f"{path}: unrecognized columns {header}")
    data = []
    for r, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise TrajectoryFormatError(
                f"{path}: row {r} has {len(row)} fields, expected {len(header)}")
        try:
            vals = [float(v) for v in row]
        except ValueError as exc:
            raise TrajectoryFormatError(f"{path}: row {r}: {exc}") from exc
        if any(math.isnan(v) or math.isinf(v) for v in vals):
            raise TrajectoryFormatError(f"{path}: row {r} contains NaN or inf")
        data.append(vals)
    if len(data) < 2:
        raise TrajectoryFormatError(f"{path}: need at least two time points")
    A = np.array(data)
    t = A[:, 0]
    steps = np.diff(t)
    if np.any(steps <= 0):
        bad = int(np.argmax(steps <= 0)) + 3
        raise TrajectoryFormatError(f"{path}: time column not increasing at row {bad}")
    dt = steps.mean()
    if np.max(np.abs(steps - dt)) > 1e-6 * dt:
        raise TrajectoryFormatError(f"{path}: time step is not uniform")
    couplings = {}
    for k in j_cols:
        i, j = (int(x) - 1 for x in header[k].split("_")[1:3])
        couplings[(i, j)] = A[:, k]
    return SiteEnergyTrajectory(float(dt), A[:, site_cols],
                                {"source": "ingested", "path": str(path)}, couplings)


# --- synthetic sources --------------------------------------------------

def ou_variance_cm2(bath):
    """Stationary variance ``2 lam kT`` in cm^-2."""
    return 2.0 * bath.reorganization * thermal_energy_cm1(bath.temperature)


def _ou_series(rng, bath, dt, n_steps, n_sites):
    var = ou_variance_cm2(bath)
    if var == 0.0:
        return np.zeros((n_steps, n_sites))
    a = math.exp(-bath.gamma * dt)
    xi = rng.standard_normal((n_steps, n_sites))
    xi[0] *= math.sqrt(var)
    xi[1:] *= math.sqrt(var * (1.0 - a * a))
    # x_k = a x_{k-1} + xi_k, exact for the OU process sampled at dt
    return lfilter([1.0], [1.0, -a], xi, axis=0)


def _check_dt(bath, dt):
    if dt > 0.1 / bath.gamma:
        raise ValueError(f"dt = {dt} fs is too coarse; need dt <= 0.1/gamma = "
                         f"{0.1 / bath.gamma:.4g} fs")


def generate_ou_trajectory(bath, dt, n_steps, n_sites, seed, *, mean_energies=None):
    """Independent Ornstein-Uhlenbeck site energies with correlation exp(-gamma t)."""
    _check_dt(bath, dt)
    rng = np.random.default_rng(seed)
    x = _ou_series(rng, bath, dt, n_steps, n_sites)
    if mean_energies is not None:
        x = x + np.asarray(mean_energies, dtype=float)
    meta = {"source": "synthetic", "seed": seed, "temperature": bath.temperature}
    return SiteEnergyTrajectory(dt, x, meta)


@dataclass(frozen=True)
class OUSource:
    """Fresh OU fluctuations for every instance."""

    bath: object
    n_sites: int

    def sample(self, rng, dt, n_steps):
        _check_dt(self.bath, dt)
        return _ou_series(rng, self.bath, dt, n_steps, self.n_sites)


@dataclass(frozen=True)
class StaticDisorderSource:
    """Gaussian site offsets of standard deviation ``sigma`` (cm^-1), frozen in time."""

    sigma: float
    n_sites: int

    def sample(self, rng, dt, n_steps):
        off = self.sigma * rng.standard_normal(self.n_sites)
        return np.broadcast_to(off, (n_steps, self.n_sites))


@dataclass(frozen=True)
class TrajectorySource:
    """Windows of an ingested trajectory's fluctuations at random offsets."""

    trajectory: SiteEnergyTrajectory

    @property
    def n_sites(self):
        return self.trajectory.n_sites

    def sample(self, rng, dt, n_steps):
        tr = self.trajectory
        if abs(dt - tr.dt) > 1e-9 * tr.dt:
            raise ValueError("the ensemble step must equal the trajectory step")
        if n_steps > tr.n_steps:
            raise ValueError("trajectory shorter than the requested window")
        start = int(rng.integers(0, tr.n_steps - n_steps + 1))
        return tr.fluctuations[start:start + n_steps]


def instance_rng(seed, i):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,)))


# --- Monte-Carlo unitary ensemble ---------------------------------------

@dataclass
class EnsembleResult:
    times: np.ndarray
    rho: np.ndarray                  # (n_times, n, n) ensemble average
    n_instances: int
    rho11_stderr: np.ndarray
    instances: np.ndarray | None = None

    @property
    def concurrence(self):
        return 2.0 * np.abs(self.rho[:, 0, 1])


def _propagators(H, dt):
    """``exp(-i H dt)`` for a batch of Hermitian matrices (rad/fs)."""
    E, V = np.linalg.eigh(H)
    return (V * np.exp(-1j * E * dt)[..., None, :]) @ np.conj(np.swapaxes(V, -1, -2))


def _run_batch(args):
    source, H0, rho0, dt, n_steps, seed, indices, keep = args
    n = H0.shape[0]
    B = len(indices)
    fl = np.stack([source.sample(instance_rng(seed, i), dt, n_steps) for i in indices])
    rho = np.broadcast_to(rho0, (B, n, n)).astype(complex)
    s = np.zeros((n_steps + 1, n, n), dtype=complex)
    s2 = np.zeros(n_steps + 1)
    per = np.empty((n_steps + 1, B, n, n), dtype=complex) if keep else None
    diag = np.arange(n)

    def record(k):
        s[k] = rho.sum(axis=0)
        s2[k] = np.sum(rho[:, 0, 0].real ** 2)
        if keep:
            per[k] = rho

    record(0)
    for k in range(n_steps):
        H = np.broadcast_to(H0, (B, n, n)).copy()
        H[:, diag, diag] += fl[:, k] * CM1_TO_RAD_FS
        U = _propagators(H, dt)
        rho = U @ rho @ np.conj(np.swapaxes(U, -1, -2))
        record(k + 1)
    return s, s2, per


def mc_unitary_ensemble(source, couplings, rho0, n_instances, *, dt, n_steps, seed,
                        mean_energies=None, workers=1, store_instances=False):
    """Average of ``n_instances`` unitary evolutions under fluctuating site energies.

    ``H_k = diag(mean_energies + delta_eps(t_k)) + J`` is held fixed over each
    step and exponentiated exactly. ``couplings`` is the constant ``J`` (cm^-1,
    zero diagonal); ``mean_energies`` defaults to the diagonal of ``couplings``.
    """
    if n_instances < 2:
        raise ValueError("need at least 2 instances")
    J = np.asarray(couplings, dtype=float)
    n = J.shape[0]
    rho0 = check_density_matrix(np.asarray(rho0, dtype=complex), n)
    eps = np.diag(J).copy() if mean_energies is None else np.asarray(mean_energies, float)
    H0 = (J - np.diag(np.diag(J)) + np.diag(eps - eps.mean())) * CM1_TO_RAD_FS
    batches = [list(range(i, min(i + BATCH_SIZE, n_instances)))
               for i in range(0, n_instances, BATCH_SIZE)]
    tasks = [(source, H0, rho0, dt, n_steps, seed, b, store_instances) for b in batches]
    if workers and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_run_batch, tasks))
    else:
        parts = [_run_batch(t) for t in tasks]
    # reduce in batch order so the sum is independent of the worker count
    s = sum(p[0] for p in parts)
    s2 = sum(p[1] for p in parts)
    mean = s / n_instances
    p11 = mean[:, 0, 0].real
    var = np.maximum(s2 / n_instances - p11 ** 2, 0.0) * n_instances / (n_instances - 1)
    inst = np.concatenate([p[2] for p in parts], axis=1) if store_instances else None
    return EnsembleResult(dt * np.arange(n_steps + 1), mean, n_instances,
                          np.sqrt(var / n_instances), inst)


# --- correlation functions and spectra ----------------------------------

def site_autocorrelation(traj, site, max_lag):
    """Unbiased ``<de(t) de(0)>`` (cm^-2) for lags ``0..max_lag`` steps."""
    x = traj.series[:, site] - traj.series[:, site].mean()
    N = x.size
    if N < 10 * max_lag:
        raise ValueError(f"trajectory of {N} steps is shorter than 10 x max_lag ({max_lag})")
    nfft = 1 << int(math.ceil(math.log2(2 * N)))
    f = np.fft.rfft(x, nfft)
    acov = np.fft.irfft(f * np.conj(f), nfft)[: max_lag + 1]
    C = acov / (N - np.arange(max_lag + 1))
    return traj.dt * np.arange(max_lag + 1), C


def _half_window(n, kind):
    if kind in (None, "none"):
        return np.ones(n)
    if kind == "hann":
        return np.cos(0.5 * np.pi * np.arange(n) / n) ** 2
    raise ValueError(f"unknown window {kind!r}")


_CORRECTIONS = ("harmonic", "standard", "none")


def spectral_density_from_autocorrelation(t, C, temperature, omega, *,
                                          correction="harmonic", window="hann"):
    """Spectral density (cm^-1) from a classical autocorrelation (cm^-2).

    ``J(w) = (1 - exp(-beta w)) Q(w) / pi * int_0^inf C(t) cos(w t) dt`` with the
    quantum correction ``Q`` chosen by ``correction``: ``"harmonic"`` gives
    ``(beta w / pi) int C cos``, ``"standard"`` gives
    ``(2 / pi) tanh(beta w / 2) int C cos`` and ``"none"`` uses ``Q = 1``.
    ``omega`` in rad/fs; ``t`` in fs.
    """
    if correction not in _CORRECTIONS:
        raise ValueError(f"correction must be one of {_CORRECTIONS}")
    t = np.asarray(t, dtype=float)
    C = np.asarray(C, dtype=float) * _half_window(t.size, window)
    w = np.atleast_1d(np.asarray(omega, dtype=float))
    dt = t[1] - t[0]
    wts = np.full(t.size, dt)
    wts[0] = wts[-1] = 0.5 * dt
    ft = np.cos(np.outer(w, t)) @ (wts * C) * CM1_TO_RAD_FS ** 2    # rad/fs
    x = w / (thermal_energy_cm1(temperature) * CM1_TO_RAD_FS)
    if correction == "harmonic":
        pre = x / np.pi
    elif correction == "standard":
        pre = 2.0 / np.pi * np.tanh(0.5 * x)
    else:
        pre = -np.expm1(-x) / np.pi
    return pre * ft / CM1_TO_RAD_FS


def drude_spectral_density_cm1(omega, bath):
    """Drude form ``2 lam gamma w / (pi (w^2 + gamma^2))`` in cm^-1, w in rad/fs."""
    w = np.asarray(omega, dtype=float)
    return 2.0 * bath.reorganization * bath.gamma * w / (np.pi * (w ** 2 + bath.gamma ** 2))


def sample_fluctuations(source, n_instances, dt, n_steps, seed, site=0):
    """Stack of one site's fluctuation series, one row per instance."""
    return np.stack([np.asarray(source.sample(instance_rng(seed, i), dt, n_steps))[:, site]
                     for i in range(n_instances)])


def absorption_spectrum(fluctuations, dt, omega_cm1, *, center_cm1=0.0, window="hann",
                        min_instances=100):
    """Linear absorption from the ensemble-averaged phase factor.

    ``A(w) ~ Re int_0^inf dt e^{i w t} <exp(-i int_0^t de)> e^{-i w0 t}``,
    windowed and normalized to unit peak height. ``fluctuations`` is
    ``(n_instances, n_steps)`` in cm^-1; ``omega_cm1`` the output grid.
    """
    X = np.atleast_2d(np.asarray(fluctuations, dtype=float))
    if X.shape[0] < min_instances:
        raise ValueError(f"ensemble of {X.shape[0]} < {min_instances} instances")
    phase = np.zeros_like(X)
    phase[:, 1:] = np.cumsum(0.5 * (X[:, 1:] + X[:, :-1]), axis=1) * dt * CM1_TO_RAD_FS
    R = np.exp(-1j * phase).mean(axis=0)
    n = R.size
    t = dt * np.arange(n)
    wts = np.full(n, dt)
    wts[0] = 0.5 * dt
    R = R * _half_window(n, window) * wts
    det = (np.asarray(omega_cm1, dtype=float) - center_cm1) * CM1_TO_RAD_FS
    A = (np.exp(1j * np.outer(det, t)) @ R).real
    peak = A.max()
    return A / peak if peak > 0 else A


def lineshape_moments(omega, A):
    """Mean and standard deviation of a (nonnegative part of a) lineshape."""
    w = np.clip(A, 0.0, None)
    m = np.trapezoid(w * omega, omega) / np.trapezoid(w, omega)
    v = np.trapezoid(w * (omega - m) ** 2, omega) / np.trapezoid(w, omega)
    return float(m), float(np.sqrt(v))
