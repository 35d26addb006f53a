"""Batch command-line front end.

Exit codes: 0 success, 1 numerical failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, bathtraj, efficiency, qpt
from .core import ExcitonSystem, bundled_system, load_system
from .estimators import build_model, initial_density
from .heom import HighTemperatureApproximationError, MemoryBudgetError
from .redfield import DegenerateSpectrumError, DrudeBath

EXIT_OK, EXIT_NUMERICAL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# --- config handling ----------------------------------------------------

HARD_DEFAULTS = {
    "model": "redfield", "tiers": 4, "matsubara": 0, "seed": 0,
    "workers": os.cpu_count() or 1, "gnuplot": False,
    "initial_sites": "1", "coherence_basis": "site", "instances": 4000, "dt_fs": 1.0,
    "steps": 1000, "site": 1, "max_lag": 1000, "correction": "harmonic",
    "omega_max_cm1": 1000.0, "n_omega": 400, "window_steps": 1024,
    "abs_instances": 400, "T_grid": "0:1000:21", "sigma_fs": 100.0, "noise": 0.0,
    "allow_high_temperature": False, "round_trip": False,
}


def _merge_config(args):
    """Flags override the config file, which overrides built-in defaults."""
    cfg = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            cfg = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"invalid config {path}: {exc}") from exc
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    merged = dict(HARD_DEFAULTS)
    merged.update({k: v for k, v in cfg.items()})
    for k, v in vars(args).items():
        if v is not None and k not in ("func", "config"):
            merged[k] = v
    return merged


def _config_hash(cfg):
    skip = ("out", "workers", "gnuplot")
    blob = json.dumps({k: v for k, v in cfg.items() if k not in skip}, sort_keys=True,
                      default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _header(cfg, command):
    return [f"# exciton-coherence {__version__}", f"# command: {command}",
            f"# config_hash: {_config_hash(cfg)}", f"# seed: {cfg.get('seed')}"]


def _open_out(path):
    if path in (None, "-"):
        return sys.stdout, False
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    return open(path, "w", newline=""), True


def _write_csv(path, cfg, command, header, rows):
    fh, close = _open_out(path)
    try:
        for line in _header(cfg, command):
            fh.write(line + "\n")
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v
                        for v in r])
    finally:
        if close:
            fh.close()
    if cfg.get("gnuplot") and path not in (None, "-"):
        _write_columns(Path(path).with_suffix(".dat"), cfg, command, header, rows)


def _write_columns(path, cfg, command, header, rows):
    """Whitespace-separated copy for gnuplot; non-numeric columns dropped."""
    rows = [list(r) for r in rows]
    keep = [i for i in range(len(header))
            if all(isinstance(r[i], (int, float, np.integer, np.floating)) for r in rows)]
    with open(path, "w") as fh:
        for line in _header(cfg, command):
            fh.write(line + "\n")
        fh.write("# " + " ".join(header[i] for i in keep) + "\n")
        for r in rows:
            fh.write(" ".join(repr(float(r[i])) for i in keep) + "\n")


def parse_grid(text, name="grid"):
    """``start:stop:count`` (inclusive) or a comma-separated list."""
    if isinstance(text, (list, tuple)):
        vals = [float(v) for v in text]
    else:
        text = str(text).strip()
        if not text:
            raise UsageError(f"empty {name}")
        try:
            if ":" in text:
                parts = text.split(":")
                if len(parts) != 3:
                    raise ValueError("expected start:stop:count")
                start, stop, count = float(parts[0]), float(parts[1]), int(parts[2])
                vals = list(np.linspace(start, stop, count)) if count > 0 else []
            else:
                vals = [float(v) for v in text.split(",") if v.strip()]
        except ValueError as exc:
            raise UsageError(f"bad {name} {text!r}: {exc}") from exc
    if not vals:
        raise UsageError(f"empty {name}")
    return vals


def _sites(text, n):
    try:
        sites = [int(s) - 1 for s in str(text).split(",") if s.strip()]
    except ValueError as exc:
        raise UsageError(f"bad site list {text!r}") from exc
    if not sites or any(not 0 <= s < n for s in sites):
        raise UsageError(f"site list {text!r} out of range 1..{n}")
    return sites


def load_configured_system(cfg):
    spec = cfg.get("system")
    if spec is None:
        raise UsageError("--system is required")
    try:
        if isinstance(spec, dict):
            system = ExcitonSystem.from_dict(spec)
        elif Path(spec).is_file():
            system = load_system(spec)
        elif spec in ("dimer12", "fmo7"):
            system = bundled_system(spec)
        else:
            raise UsageError(f"system file not found: {spec}")
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise UsageError(f"invalid system config {spec}: {exc}") from exc
    changes = {}
    if cfg.get("temperature_K") is not None:
        changes["temperature"] = float(cfg["temperature_K"])
    if cfg.get("trap_ps") is not None:
        tau = float(cfg["trap_ps"])
        changes["trap_rate"] = 0.0 if tau == float("inf") else 1.0 / (tau * 1e3)
    if cfg.get("loss_ns") is not None:
        tau = float(cfg["loss_ns"])
        changes["loss_rate"] = 0.0 if tau == float("inf") else 1.0 / (tau * 1e6)
    if cfg.get("gamma_fs") is not None:
        changes["bath_correlation_rate"] = 1.0 / float(cfg["gamma_fs"])
    if cfg.get("lambda_cm1") is not None:
        changes["reorganization_energy"] = float(cfg["lambda_cm1"])
    try:
        return system.replace(**changes) if changes else system
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _check_positive(cfg, *names):
    for k in names:
        v = cfg.get(k)
        if v is not None and not float(v) > 0:
            raise UsageError(f"{k} must be > 0")


# --- commands -----------------------------------------------------------

def _sweep_point(task):
    system, lam, cfg, sites = task
    s = system.replace(reorganization_energy=lam)
    kw = {}
    if cfg["model"] == "heom":
        kw["allow_high_temperature_approximation"] = bool(cfg["allow_high_temperature"])
    m = build_model(s, cfg["model"], int(cfg["tiers"]), int(cfg["matsubara"]), **kw)
    rho0 = initial_density(s.n_sites, sites)
    rep = efficiency.efficiency_report(m, rho0, quadrature=False)
    coh = efficiency.integrated_coherence(m, rho0, basis=cfg["coherence_basis"])
    return [lam, rep.eta, rep.eta_H, rep.eta_decoherence, rep.eta_init, rep.eta_dyn,
            coh.C, coh.C_normalized]


def cmd_efficiency_sweep(cfg):
    system = load_configured_system(cfg)
    if "lambda_sweep" not in cfg or cfg["lambda_sweep"] is None:
        raise UsageError("--lambda-sweep is required")
    grid = parse_grid(cfg["lambda_sweep"], "lambda grid")
    if any(v < 0 for v in grid):
        raise UsageError("reorganization energies must be >= 0")
    if cfg["model"] not in ("redfield", "heom"):
        raise UsageError("--model must be redfield or heom")
    _check_positive(cfg, "tiers")
    sites = _sites(cfg["initial_sites"], system.n_sites)
    tasks = [(system, lam, cfg, sites) for lam in grid]
    workers = int(cfg["workers"] or 1)
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_point, tasks))
    else:
        rows = [_sweep_point(t) for t in tasks]
    label = "+".join(str(s + 1) for s in sites)
    rows = [r + [cfg["model"], label] for r in rows]
    _write_csv(cfg.get("out"), cfg, "efficiency-sweep",
               ["lambda_cm1", "eta", "eta_H", "eta_decoherence", "eta_init", "eta_dyn",
                "C", "C_normalized", "model", "initial_state"], rows)
    return rows


def _ensemble_source(cfg, system):
    if cfg.get("trajectory"):
        return bathtraj.TrajectorySource(_ingest(cfg["trajectory"]))
    if cfg.get("static_sigma") is not None:
        return bathtraj.StaticDisorderSource(float(cfg["static_sigma"]), system.n_sites)
    return bathtraj.OUSource(DrudeBath.from_system(system), system.n_sites)


def _ingest(path):
    if not Path(path).is_file():
        raise UsageError(f"trajectory file not found: {path}")
    try:
        return bathtraj.ingest_trajectory(path)
    except bathtraj.TrajectoryFormatError as exc:
        raise UsageError(str(exc)) from exc


def cmd_mc_ensemble(cfg):
    system = load_configured_system(cfg)
    _check_positive(cfg, "instances", "dt_fs", "steps")
    source = _ensemble_source(cfg, system)
    sites = _sites(cfg["initial_sites"], system.n_sites)
    rho0 = initial_density(system.n_sites, sites)
    try:
        res = bathtraj.mc_unitary_ensemble(
            source, system.couplings, rho0, int(cfg["instances"]), dt=float(cfg["dt_fs"]),
            n_steps=int(cfg["steps"]), seed=int(cfg["seed"]),
            mean_energies=system.site_energies, workers=int(cfg["workers"] or 1))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    rows = [[t, r[0, 0].real, se, c] for t, r, se, c in
            zip(res.times, res.rho, res.rho11_stderr, res.concurrence)]
    _write_csv(cfg.get("out"), cfg, "mc-ensemble",
               ["t_fs", "rho11", "rho11_stderr", "concurrence"], rows)
    return res


def cmd_spectra(cfg):
    site = int(cfg["site"]) - 1
    if cfg.get("trajectory"):
        traj = _ingest(cfg["trajectory"])
        temperature = float(cfg.get("temperature_K") or traj.metadata.get("temperature", 300.0))
        nwin = int(cfg["window_steps"])
        if traj.n_steps < nwin:
            raise UsageError("trajectory shorter than --window-steps")
        fl = traj.fluctuations[:, site]
        starts = np.linspace(0, traj.n_steps - nwin, int(cfg["abs_instances"])).astype(int)
        ensemble = np.stack([fl[s:s + nwin] for s in starts])
    else:
        system = load_configured_system(cfg)
        bath = DrudeBath.from_system(system)
        temperature = system.temperature
        dt = float(cfg["dt_fs"])
        try:
            traj = bathtraj.generate_ou_trajectory(bath, dt, int(cfg["steps"]),
                                                   system.n_sites, int(cfg["seed"]))
            ensemble = bathtraj.sample_fluctuations(
                bathtraj.OUSource(bath, system.n_sites), int(cfg["abs_instances"]), dt,
                int(cfg["window_steps"]), int(cfg["seed"]), site)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    if not 0 <= site < traj.n_sites:
        raise UsageError(f"site {site + 1} outside 1..{traj.n_sites}")
    omega_cm1 = np.linspace(0.0, float(cfg["omega_max_cm1"]), int(cfg["n_omega"]))
    try:
        lags, C = bathtraj.site_autocorrelation(traj, site, int(cfg["max_lag"]))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    from .core import CM1_TO_RAD_FS
    J = bathtraj.spectral_density_from_autocorrelation(
        lags, C, temperature, omega_cm1 * CM1_TO_RAD_FS, correction=cfg["correction"])
    w_abs = np.linspace(-float(cfg["omega_max_cm1"]), float(cfg["omega_max_cm1"]),
                        2 * int(cfg["n_omega"]) + 1)
    try:
        A = bathtraj.absorption_spectrum(ensemble, traj.dt, w_abs)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = cfg.get("out") or "spectra"
    base = str(out)[:-4] if str(out).endswith(".csv") else str(out)
    _write_csv(base + "_J.csv", cfg, "spectra", ["omega_cm1", "value"], zip(omega_cm1, J))
    _write_csv(base + "_A.csv", cfg, "spectra", ["omega_cm1", "value"], zip(w_abs, A))
    return omega_cm1, J, w_abs, A


def cmd_qpt(cfg):
    system = load_configured_system(cfg)
    if system.n_sites != 2:
        raise UsageError("qpt needs a dimer system")
    grid = parse_grid(cfg["T_grid"], "T grid")
    if any(t < 0 for t in grid):
        raise UsageError("waiting times must be >= 0")
    _check_positive(cfg, "sigma_fs")
    levels = qpt.DimerLevelSystem.from_exciton_system(system)
    gen = qpt.manifold_generator(system, cfg["model"], tiers=int(cfg["tiers"]),
                                 n_matsubara=int(cfg["matsubara"]),
                                 allow_high_temperature_approximation=bool(
                                     cfg["allow_high_temperature"]))
    chis = qpt.chi_from_generator(gen, grid)
    experiments = qpt.experiment_pulses(levels, sigma=float(cfg["sigma_fs"]))
    rng = np.random.default_rng(int(cfg["seed"]))
    mask = qpt.measured_entries()
    out = {"version": __version__, "config_hash": _config_hash(cfg), "seed": cfg["seed"],
           "model": cfg["model"], "points": []}
    for chi in chis:
        ms = [qpt.synthesize_peaks(chi, levels, p) for p in experiments]
        point = {"T_fs": chi.T, "chi": chi.to_dict()["chi"],
                 "peaks": [{k: [v.real, v.imag] for k, v in m.peaks.items()} for m in ms]}
        if cfg["round_trip"] or float(cfg["noise"]) > 0:
            if float(cfg["noise"]) > 0:
                scale = float(cfg["noise"]) * max(abs(v) for m in ms for v in m.peaks.values())
                for m in ms:
                    for k in m.peaks:
                        m.peaks[k] += scale * (rng.standard_normal() + 1j * rng.standard_normal())
            res = qpt.qpt_invert(ms, levels)
            err = float(np.max(np.abs(res.chi.data - chi.data)[mask]))
            point["inversion"] = res.to_dict()
            point["inversion"]["max_abs_error"] = err
        out["points"].append(point)
    text = json.dumps(out, indent=1)
    fh, close = _open_out(cfg.get("out"))
    try:
        fh.write(text + "\n")
    finally:
        if close:
            fh.close()
    return out


# --- parser -------------------------------------------------------------

def _common(p):
    p.add_argument("--config", help="JSON file with option values (flags override it)")
    p.add_argument("--system", help="system JSON path or bundled name (dimer12, fmo7)")
    p.add_argument("--temperature-K", dest="temperature_K", type=float)
    p.add_argument("--trap-ps", dest="trap_ps", type=float, help="trapping time 1/kappa (ps)")
    p.add_argument("--loss-ns", dest="loss_ns", type=float, help="loss time 1/Gamma (ns)")
    p.add_argument("--gamma-fs", dest="gamma_fs", type=float, help="bath correlation time 1/gamma (fs)")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out", help="output path ('-' for stdout)")
    p.add_argument("--gnuplot", action="store_const", const=True,
                   help="also write a whitespace-separated .dat copy of each CSV")


def _model_opts(p):
    p.add_argument("--model", choices=("redfield", "heom"))
    p.add_argument("--tiers", type=int)
    p.add_argument("--matsubara", type=int)
    p.add_argument("--allow-high-temperature", dest="allow_high_temperature",
                   action="store_const", const=True,
                   help="permit the high-temperature bath form when beta*hbar*gamma > 1")


def build_parser():
    ap = argparse.ArgumentParser(prog="exciton-coherence",
                                 description="Exciton transfer efficiency, coherence and QPT tools")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("efficiency-sweep", help="efficiency and coherence over a lambda grid")
    _common(p)
    _model_opts(p)
    p.add_argument("--lambda-sweep", dest="lambda_sweep",
                   help="start:stop:count or comma list (cm^-1)")
    p.add_argument("--initial-sites", dest="initial_sites", help="1-based, e.g. '1,6'")
    p.add_argument("--coherence-basis", dest="coherence_basis", choices=("site", "exciton"))
    p.set_defaults(func=cmd_efficiency_sweep)

    p = sub.add_parser("mc-ensemble", help="Monte-Carlo unitary ensemble")
    _common(p)
    p.add_argument("--lambda", dest="lambda_cm1", type=float)
    p.add_argument("--instances", type=int)
    p.add_argument("--dt-fs", dest="dt_fs", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--trajectory", help="site-energy CSV to draw windows from")
    p.add_argument("--static-sigma", dest="static_sigma", type=float)
    p.add_argument("--initial-sites", dest="initial_sites")
    p.set_defaults(func=cmd_mc_ensemble)

    p = sub.add_parser("spectra", help="spectral density and absorption")
    _common(p)
    p.add_argument("--lambda", dest="lambda_cm1", type=float)
    p.add_argument("--trajectory")
    p.add_argument("--site", type=int)
    p.add_argument("--max-lag", dest="max_lag", type=int)
    p.add_argument("--dt-fs", dest="dt_fs", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--correction", choices=("harmonic", "standard", "none"))
    p.add_argument("--omega-max-cm1", dest="omega_max_cm1", type=float)
    p.add_argument("--n-omega", dest="n_omega", type=int)
    p.add_argument("--window-steps", dest="window_steps", type=int)
    p.add_argument("--abs-instances", dest="abs_instances", type=int)
    p.set_defaults(func=cmd_spectra)

    p = sub.add_parser("qpt", help="process tensors, peak synthesis and inversion")
    _common(p)
    _model_opts(p)
    p.add_argument("--lambda", dest="lambda_cm1", type=float)
    p.add_argument("--T-grid", dest="T_grid", help="start:stop:count or comma list (fs)")
    p.add_argument("--sigma-fs", dest="sigma_fs", type=float)
    p.add_argument("--round-trip", dest="round_trip", action="store_const", const=True)
    p.add_argument("--noise", type=float, help="noise level relative to the largest peak")
    p.set_defaults(func=cmd_qpt)
    return ap


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _merge_config(args)
        args.func(cfg)
    except (UsageError, HighTemperatureApproximationError, DegenerateSpectrumError,
            MemoryBudgetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (np.linalg.LinAlgError, ArithmeticError, RuntimeError, ValueError,
            MemoryError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
