"""scikit-learn style wrappers around the analysis pipelines."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import bathtraj, efficiency, qpt
from .core import ExcitonSystem, site_state
from .heom import build_heom_generator
from .redfield import build_redfield_generator

REPORT_COLUMNS = ("eta", "eta_H", "eta_decoherence", "eta_init", "eta_dyn", "C",
                  "C_normalized")


def check_system(system):
    if isinstance(system, dict):
        system = ExcitonSystem.from_dict(system)
    if not isinstance(system, ExcitonSystem):
        raise TypeError("expected an ExcitonSystem or a config dict")
    return system


def check_positive(name, value, *, allow_zero=False):
    v = float(value)
    if not np.isfinite(v) or v < 0 or (v == 0 and not allow_zero):
        raise ValueError(f"{name} must be {'>= 0' if allow_zero else '> 0'}, got {value}")
    return v


def build_model(system, model="redfield", tiers=4, n_matsubara=0, **kw):
    if model == "redfield":
        return build_redfield_generator(system)
    if model == "heom":
        return build_heom_generator(system, tiers, n_matsubara, **kw)
    raise ValueError("model must be 'redfield' or 'heom'")


def initial_density(n, sites, weights=None):
    return site_state(n, *sites, weights=weights)


class TransferEfficiencyAnalyzer(BaseEstimator, TransformerMixin):
    """Efficiency decomposition and integrated coherence for one system.

    ``fit(system)`` analyses the system as given; ``transform(lambdas)``
    repeats the analysis over a grid of reorganization energies and returns
    one row per value with columns :data:`REPORT_COLUMNS`.
    """

    def __init__(self, model="redfield", tiers=4, n_matsubara=0, initial_sites=(0,),
                 initial_weights=None, coherence_basis="site", quadrature=True):
        self.model = model
        self.tiers = tiers
        self.n_matsubara = n_matsubara
        self.initial_sites = initial_sites
        self.initial_weights = initial_weights
        self.coherence_basis = coherence_basis
        self.quadrature = quadrature

    def _analyse(self, system):
        m = build_model(system, self.model, self.tiers, self.n_matsubara)
        rho0 = initial_density(system.n_sites, self.initial_sites, self.initial_weights)
        rep = efficiency.efficiency_report(m, rho0, quadrature=self.quadrature)
        coh = efficiency.integrated_coherence(m, rho0, basis=self.coherence_basis)
        return rep, coh

    def fit(self, X, y=None):
        system = check_system(X)
        if self.model == "heom":
            check_positive("tiers", self.tiers)
        self.system_ = system
        self.report_, self.coherence_ = self._analyse(system)
        return self

    def transform(self, X):
        check_is_fitted(self, "system_")
        lambdas = np.atleast_1d(np.asarray(X, dtype=float)).ravel()
        if lambdas.size == 0:
            raise ValueError("empty lambda grid")
        rows = []
        for lam in lambdas:
            check_positive("reorganization energy", lam, allow_zero=True)
            rep, coh = self._analyse(self.system_.replace(reorganization_energy=lam))
            rows.append([rep.eta, rep.eta_H, rep.eta_decoherence, rep.eta_init,
                         rep.eta_dyn, coh.C, coh.C_normalized])
        return np.array(rows)


class ProcessTomography(BaseEstimator):
    """Invert 2D peak-amplitude measurements into a process tensor.

    ``fit(measurements)`` takes a list of :class:`qpt.PeakAmplitudeSet`;
    ``predict(pulse_sets)`` synthesizes the peaks the fitted tensor implies.
    """

    def __init__(self, level_system=None, average=True, condition_warning=1e8):
        self.level_system = level_system
        self.average = average
        self.condition_warning = condition_warning

    def fit(self, X, y=None):
        if self.level_system is None:
            raise ValueError("level_system is required")
        res = qpt.qpt_invert(X, self.level_system, average=self.average,
                             condition_warning=self.condition_warning)
        self.result_ = res
        self.chi_ = res.chi
        self.condition_ = res.condition
        self.residual_ = res.residual
        return self

    def predict(self, X):
        check_is_fitted(self, "chi_")
        chi = qpt.ProcessTensor(self.chi_.T, np.nan_to_num(self.chi_.data))
        return [qpt.synthesize_peaks(chi, self.level_system, p, average=self.average)
                for p in X]


class BathSpectralDensity(BaseEstimator, TransformerMixin):
    """Spectral density estimated from a site-energy trajectory.

    ``fit(trajectory)`` computes the site autocorrelation; ``transform(omega)``
    (rad/fs) returns J in cm^-1.
    """

    def __init__(self, temperature=300.0, site=0, max_lag=1000, correction="harmonic",
                 window="hann"):
        self.temperature = temperature
        self.site = site
        self.max_lag = max_lag
        self.correction = correction
        self.window = window

    def fit(self, X, y=None):
        if not isinstance(X, bathtraj.SiteEnergyTrajectory):
            raise TypeError("expected a SiteEnergyTrajectory")
        check_positive("temperature", self.temperature)
        self.lags_, self.autocorrelation_ = bathtraj.site_autocorrelation(
            X, self.site, int(self.max_lag))
        return self

    def transform(self, X):
        check_is_fitted(self, "autocorrelation_")
        return bathtraj.spectral_density_from_autocorrelation(
            self.lags_, self.autocorrelation_, self.temperature, X,
            correction=self.correction, window=self.window)
