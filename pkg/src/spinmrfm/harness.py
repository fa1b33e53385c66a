"""Experiment orchestration: run a configuration, write outputs and a manifest."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import struct
import warnings
from dataclasses import asdict, dataclass, field
from importlib import metadata as importlib_metadata
from typing import Optional

import numpy as np
from scipy import stats

from . import integrate, measure, model, spectra
from .config import RunConfig, ResolvedRun, resolve
from .errors import (AdiabaticityWarning, ConfigError, RegimeWarning, SolverError, StepSizeWarning,
                     TruncationError, TruncationWarning)
from .hilbert import CompositeState, FockBasis, coherent_state

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_WARNINGS = 0, 1, 2, 3
WATCHED = (TruncationWarning, RegimeWarning, AdiabaticityWarning, StepSizeWarning)
TRUNCATION_TOL = 1e-6
BINARY_MAGIC = b"SMRF"
BINARY_VERSION = 1
TRAJ_COLUMNS = "t,re_Z,re_p,re_Sz,dW1,dW2"


def code_version() -> str:
    try:
        return importlib_metadata.version("artifact")
    except importlib_metadata.PackageNotFoundError:
        return "unknown"


@dataclass
class RunManifest:
    """Record of one run: config echo, derived quantities, outputs with checksums."""

    kind: str
    status: int
    config: dict
    derived: dict
    seeds: list = field(default_factory=list)
    truncation_warnings: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    files: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    code_version: str = ""
    error: Optional[str] = None

    def to_dict(self) -> dict:
        return asdict(self)


# diagnostics --------------------------------------------------------------------

def truncation_advisory(params, profile, n_fock: int, tol: float = TRUNCATION_TOL) -> dict:
    """Estimate whether ``n_fock`` levels hold the expected cantilever motion.

    The reach is the expected ``<Z>`` amplitude plus two thermal standard
    deviations ``sqrt(kT / m w^2)``.  It is converted to a coherent amplitude
    ``|alpha| = reach / sqrt(2 hbar / m w)`` and the Poisson weight above
    level ``N-1`` is compared with ``tol``.
    """
    amp = model.expected_amplitude(params, profile)
    sigma = math.sqrt(params.kT / (params.m * params.omega_m ** 2))
    reach = amp + 2 * sigma
    x_unit = math.sqrt(2 * params.hbar / (params.m * params.omega_m))
    nbar = (reach / x_unit) ** 2
    tail = 1.0 if not math.isfinite(nbar) else float(stats.poisson.sf(n_fock - 1, nbar))
    return {"expected_amplitude": amp, "thermal_sigma": sigma, "reach": reach, "mean_occupation": nbar,
            "tail_weight": tail, "advisory": bool(tail > tol), "n_fock": n_fock}


def cost_estimate(res: ResolvedRun) -> dict:
    """Step counts and a rough dense-flop figure for the configured kind."""
    kind = res.config.kind
    d = 2 * res.n_fock
    steps = int(round(res.t_end / res.solver.dt))
    if kind == "unitary_compare":
        full = int(round(res.compare_t_end / res.full_dt))
        dc = 2 * res.compare_n_fock
        return {"steps": full, "flops": 8.0 * 4 * full * dc * dc * 2}
    if kind in ("master", "sme"):
        return {"steps": steps, "flops": 8.0 * 4 * steps * 6 * d ** 3}
    if kind in ("qsd_ensemble", "readout_study"):
        return {"steps": steps, "flops": 8.0 * 4 * steps * 3 * d * d * res.config.n_traj}
    return {"steps": 0, "flops": 0.0}


def derived_quantities(res: ResolvedRun) -> dict:
    p, prof = res.params, res.profile
    t_hi = res.t_end if prof.kind != "table" else prof.table_t[-1]
    adia = model.adiabaticity_report(p, prof, (0.0, t_hi))
    return {
        "ell": p.ell, "Gamma": p.Gamma, "Q_m_omega_over_Gamma": p.q_factor, "Q_omega_over_gamma_m": p.q_factor_alt,
        "meas_coefficient": p.meas_coefficient, "signal_gain": p.signal_gain, "constant_force": p.constant_force,
        "alpha0": p.alpha0, "regime_flags": p.regime_flags(), "adiabaticity": adia.to_dict(),
        "theta0": model.lambda_theta(p, prof, 0.0)[1],
    }


def validate(config: RunConfig) -> dict:
    """Schema, regime, adiabaticity, cost and truncation diagnostics; never raises for physics."""
    out: dict = {"errors": [], "warnings": []}
    try:
        res = resolve(config)
    except (ConfigError, TypeError, ValueError) as exc:
        out["errors"].append(str(exc))
        return out
    p = res.params
    out["regime_flags"] = p.regime_flags()
    out["warnings"].extend(p.regime_warnings())
    try:
        t_hi = res.t_end if res.profile.kind != "table" else res.profile.table_t[-1]
        adia = model.adiabaticity_report(p, res.profile, (0.0, t_hi))
        out["adiabaticity"] = adia.to_dict()
        if not adia.adiabatic:
            out["warnings"].append(f"drive not adiabatic: ratio {adia.max_ratio:.3g} at t={adia.t_at_max:.4g}")
    except ValueError as exc:
        out["errors"].append(str(exc))
    out["cost"] = cost_estimate(res)
    if config.max_steps is not None and out["cost"]["steps"] > config.max_steps:
        out["errors"].append(f"cost estimate {out['cost']['steps']} steps exceeds max_steps={config.max_steps}")
    adv = truncation_advisory(p, res.profile, res.n_fock, config.truncation_threshold)
    out["truncation"] = adv
    if adv["advisory"]:
        out["warnings"].append(
            f"truncation advisory: expected reach {adv['reach']:.3g} (mean occupation {adv['mean_occupation']:.3g}) "
            f"leaves weight {adv['tail_weight']:.2e} above level {res.n_fock - 1}")
    return out


# output helpers -------------------------------------------------------------------

def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class _Outputs:
    def __init__(self, out_dir: str):
        self.dir = out_dir
        self.files: dict[str, str] = {}

    def path(self, name: str) -> str:
        return os.path.join(self.dir, name)

    def csv(self, name: str, header: str, rows: np.ndarray):
        p = self.path(name)
        np.savetxt(p, np.asarray(rows), delimiter=",", header=header, comments="", fmt="%.17g")
        self.files[name] = _sha256(p)

    def text(self, name: str, text: str):
        p = self.path(name)
        with open(p, "w") as fh:
            fh.write(text)
        self.files[name] = _sha256(p)

    def trajectories_binary(self, name: str, trajs, seeds):
        """Little-endian layout: magic ``SMRF``, uint32 version, uint32 n_traj,
        uint32 n_rows, uint32 n_cols (=6); then per trajectory a uint64 seed
        followed by ``n_rows x 6`` float64 rows ``t, Z, p, Sz, dW1, dW2``."""
        p = self.path(name)
        rows0 = trajs[0].rows()
        with open(p, "wb") as fh:
            fh.write(BINARY_MAGIC + struct.pack("<IIII", BINARY_VERSION, len(trajs), rows0.shape[0], 6))
            for tr, s in zip(trajs, seeds):
                fh.write(struct.pack("<Q", int(s)))
                fh.write(np.ascontiguousarray(tr.rows(), dtype="<f8").tobytes())
        self.files[name] = _sha256(p)


def read_trajectories_binary(path: str) -> tuple[list[int], np.ndarray]:
    """Inverse of the binary writer; returns seeds and an array ``(n_traj, n_rows, 6)``."""
    with open(path, "rb") as fh:
        head = fh.read(20)
        if head[:4] != BINARY_MAGIC:
            raise ValueError("not a trajectory binary file")
        _, n_traj, n_rows, n_cols = struct.unpack("<IIII", head[4:])
        seeds, data = [], np.empty((n_traj, n_rows, n_cols))
        for k in range(n_traj):
            seeds.append(struct.unpack("<Q", fh.read(8))[0])
            data[k] = np.frombuffer(fh.read(8 * n_rows * n_cols), dtype="<f8").reshape(n_rows, n_cols)
    return seeds, data


def _check_writable(out_dir: str):
    try:
        os.makedirs(out_dir, exist_ok=True)
        probe = os.path.join(out_dir, ".write_probe")
        with open(probe, "w") as fh:
            fh.write("")
        os.remove(probe)
    except OSError as exc:
        raise ConfigError(f"output directory {out_dir!r} is not writable: {exc}") from exc


# experiments -------------------------------------------------------------------

def initial_state(res: ResolvedRun, spin: Optional[str] = None) -> CompositeState:
    which = spin or res.config.initial_spin
    vec = {"up": [1.0, 0.0], "down": [0.0, 1.0], "superposition": [1.0, 1.0]}[which]
    alpha = complex(*res.config.initial_alpha)
    osc = coherent_state(alpha, FockBasis(res.n_fock))
    return CompositeState.from_parts(vec, osc)


def system(res: ResolvedRun):
    ops = model.build_operators(res.params, res.profile, res.n_fock)
    if res.config.hamiltonian == "rwa":
        gen = model.rwa_generator(res.params, res.profile, ops)
    else:
        gen = model.eff_generator(res.params, res.profile, ops, res.drop_constant_force)
    lindblads = [model.lindblad_thermal(res.params, ops), model.lindblad_meas(res.params, ops)]
    return ops, gen, lindblads


def _run_unitary_compare(res: ResolvedRun, out: _Outputs) -> dict:
    cmp = integrate.compare_full_vs_rwa(res.params, res.profile, res.compare_t_end, res.compare_n_fock,
                                        res.solver.dt if res.solver.dt <= 1e-3 else 1e-3, res.full_dt,
                                        max_steps=res.config.max_steps,
                                        spin="down" if res.config.initial_spin == "down" else "up")
    out.csv("compare_z.csv", "t,Z_full,Z_rwa", np.column_stack([cmp.times, cmp.z_full, cmp.z_rwa]))
    rows = [np.column_stack([np.full(cmp.z_grid.size, t), cmp.z_grid, f, r])
            for t, f, r in zip(cmp.density_times, cmp.density_full, cmp.density_rwa)]
    out.csv("compare_density.csv", "t,z,p_full,p_rwa", np.vstack(rows))
    return {"max_rel_deviation": cmp.max_rel_deviation, "max_l1_distance": float(np.max(cmp.l1_distances)),
            "l1_distances": cmp.l1_distances.tolist(), **cmp.metadata}


def _run_master(res: ResolvedRun, out: _Outputs) -> dict:
    ops, gen, ls = system(res)
    psi = initial_state(res)
    z2 = ops.Z.matrix @ ops.Z.matrix
    r = integrate.evolve_master(psi, gen, ls, 0.0, res.t_end, res.solver, ops, res.params.hbar,
                                store_states=False, observables={"Z2": z2})
    out.csv("master.csv", "t,re_Z,re_p,re_Sz,re_Z2", np.column_stack([r.times, r.z, r.p, r.sz, r.observables["Z2"]]))
    return {"final_Z2": float(r.observables["Z2"][-1]), "min_eigenvalue": float(np.min(r.min_eigenvalues)),
            "max_top_population": r.max_top_population}


def _run_sme(res: ResolvedRun, out: _Outputs) -> tuple[dict, list]:
    ops, gen, ls = system(res)
    psi = initial_state(res)
    seed = integrate.derived_seed(res.config.base_seed, 0)
    n_steps = int(round(res.t_end / res.solver.dt))
    w = integrate.WienerPath.generate(seed, n_steps, 2, res.solver.dt)
    cfg = res.solver.replace(scheme=res.config.sme_scheme)
    r = integrate.evolve_sme(psi, gen, ls, 0.0, res.t_end, cfg, ops, res.params.e_d, wiener=w,
                             hbar=res.params.hbar)
    dw = np.zeros((r.times.size, 2))
    dw[:-1] = r.dw
    out.csv("sme.csv", TRAJ_COLUMNS, np.column_stack([r.times, r.z, r.p, r.sz, dw]))
    rec = measure.photocurrent(r, res.params, res.bin_width)
    out.csv("photocurrent_sme.csv", "t_bin_center,I", rec.rows())
    return {"final_Sz": float(r.sz[-1]), "max_top_population": r.max_top_population}, [seed]


def _ensemble(res: ResolvedRun, accumulate=False):
    ops, gen, ls = system(res)
    psi = initial_state(res)
    ens = integrate.ensemble_run(psi, gen, ls, 0.0, res.t_end, res.solver, ops, res.config.n_traj,
                                 res.config.base_seed, workers=res.config.workers, hbar=res.params.hbar,
                                 accumulate_density=accumulate)
    return ops, gen, ls, ens


def _run_qsd_ensemble(res: ResolvedRun, out: _Outputs) -> tuple[dict, list]:
    _, _, _, ens = _ensemble(res)
    for k, tr in enumerate(ens.trajectories):
        out.csv(f"traj_{k:05d}.csv", TRAJ_COLUMNS, tr.rows())
    out.csv("ensemble_mean.csv", "t,mean_Z,mean_p,mean_Sz", np.column_stack([ens.times, ens.mean_z, ens.mean_p,
                                                                            ens.mean_sz]))
    if res.config.write_binary:
        out.trajectories_binary("trajectories.bin", ens.trajectories, ens.seeds)
    finals = np.array([tr.sz[-1] for tr in ens.trajectories])
    ct = [measure.collapse_time(tr, hbar=res.params.hbar, omega_m=res.params.omega_m) for tr in ens.trajectories]
    return {"up_fraction": float(np.mean(finals > 0)),
            "collapsed_fraction": float(np.mean(np.abs(finals) > 0.45 * res.params.hbar)),
            "collapse_times": ct, "n_truncation_flags": ens.metadata["n_truncation_flags"],
            "max_top_population": ens.metadata["max_top_population"]}, ens.seeds


def calibrate_reference_phase(res: ResolvedRun, ops=None, gen=None, ls=None) -> float:
    """Reference phase from a deterministic spin-up run at the same parameters."""
    if ops is None:
        ops, gen, ls = system(res)
    psi = initial_state(res, "up")
    r = integrate.evolve_master(psi, gen, ls, 0.0, res.t_end, res.solver, ops, res.params.hbar,
                                store_states=False, check_positivity=False)
    rec = measure.signal_record(r.times, r.z, res.params, res.bin_width)
    return measure.reference_phase_from_record(rec, res.params.omega_m, res.window)


def readout_decisions(res: ResolvedRun, trajectories, reference_phase: float) -> list[dict]:
    rows = []
    for tr in trajectories:
        rec = measure.photocurrent(tr, res.params, res.bin_width)
        dec = measure.classify_spin(rec, res.params.omega_m, reference_phase, res.window)
        truth = 0.5 if tr.sz[-1] > 0 else -0.5
        rows.append({"seed": tr.metadata.get("seed"), "decision": dec.spin_estimate, "phase": dec.phase_estimate,
                     "confidence": dec.confidence, "truth": truth,
                     "collapse_time": measure.collapse_time(tr, hbar=res.params.hbar, omega_m=res.params.omega_m)})
    return rows


def _run_readout_study(res: ResolvedRun, out: _Outputs) -> tuple[dict, list]:
    ops, gen, ls, ens = _ensemble(res)
    ref = calibrate_reference_phase(res, ops, gen, ls)
    rows = readout_decisions(res, ens.trajectories, ref)
    lines = [f"seed={r['seed']} decision={r['decision']:+.1f} phase={r['phase']:.6f} "
             f"confidence={r['confidence']:.4f} collapse_time={r['collapse_time']}" for r in rows]
    out.text("decisions.txt", "\n".join(lines) + "\n")
    for k, tr in enumerate(ens.trajectories[:10]):
        out.csv(f"photocurrent_{k:05d}.csv", "t_bin_center,I",
                measure.photocurrent(tr, res.params, res.bin_width).rows())
    agree = sum(r["decision"] == r["truth"] for r in rows)
    decided = sum(r["decision"] != 0 for r in rows)
    return {"reference_phase": ref, "agreement": agree / len(rows), "n_decided": decided, "n_paths": len(rows),
            "window": list(res.window), "bin_width": res.bin_width,
            "max_top_population": ens.metadata["max_top_population"]}, ens.seeds


def _omega_grid(res: ResolvedRun) -> np.ndarray:
    lo, hi, n = res.config.omega_grid
    if lo <= 0:
        raise ConfigError("omega grid must be strictly positive")
    return np.linspace(float(lo), float(hi), int(n))


def _run_noise_spectrum(res: ResolvedRun, out: _Outputs) -> dict:
    w = _omega_grid(res)
    spec = spectra.noise_spectrum(res.params, w)
    out.csv("noise_spectrum.csv", "omega,shot,backaction,thermal,total", spec.rows())
    at = spectra.noise_spectrum(res.params, [res.params.omega_m])
    return {"at_resonance": {"shot": float(at.shot[0]), "backaction": float(at.backaction[0]),
                             "thermal": float(at.thermal[0])}, "reservoir": spectra.CUTOFF_NOTE}


def _run_snr_report(res: ResolvedRun, out: _Outputs) -> dict:
    w = _omega_grid(res)
    spec = spectra.noise_spectrum(res.params, w)
    g = spectra.g_fourier(res.params, res.profile, res.profile.frequency, res.config.g_convention)
    s = spectra.snr(res.params, res.profile, w, convention=res.config.g_convention, g_value=g)
    out.csv("snr.csv", "omega,shot,backaction,thermal,total,snr", np.column_stack([spec.rows(), s]))
    rep = spectra.snr_at_resonance(res.params, res.profile, convention=res.config.g_convention,
                                   bandwidth=res.config.bandwidth)
    d = rep.to_dict()
    return {"snr_at_resonance": d["snr_at_resonance"], "f_min": d["f_min"], "report": d}


EXPERIMENTS = {
    "unitary_compare": _run_unitary_compare,
    "master": _run_master,
    "sme": _run_sme,
    "qsd_ensemble": _run_qsd_ensemble,
    "readout_study": _run_readout_study,
    "noise_spectrum": _run_noise_spectrum,
    "snr_report": _run_snr_report,
}


def run(config: RunConfig) -> RunManifest:
    """Execute ``config`` and write outputs plus ``manifest.json`` to ``config.out_dir``.

    The manifest's ``status`` is one of the exit codes: 0 success, 1
    configuration error, 2 solver error, 3 completed with warnings.
    """
    manifest = RunManifest(kind=config.kind, status=EXIT_OK, config=config.to_dict(), derived={},
                           code_version=code_version())
    try:
        res = resolve(config)
        manifest.config = res.echo()
        diag = validate(config)
        if diag["errors"]:
            raise ConfigError("; ".join(diag["errors"]))
        _check_writable(config.out_dir)
    except (ConfigError, TypeError, ValueError) as exc:
        manifest.status, manifest.error = EXIT_CONFIG, str(exc)
        return manifest
    out = _Outputs(config.out_dir)
    manifest.derived = derived_quantities(res)
    manifest.derived["truncation_advisory"] = diag["truncation"]
    manifest.derived["cost"] = diag["cost"]
    caught: list = []
    with warnings.catch_warnings(record=True) as wlist:
        warnings.simplefilter("always")
        res.params.check_regimes()
        try:
            result = EXPERIMENTS[config.kind](res, out)
        except (SolverError, TruncationError) as exc:
            manifest.status, manifest.error = EXIT_SOLVER, str(exc)
            result = {}
        except ConfigError as exc:
            manifest.status, manifest.error = EXIT_CONFIG, str(exc)
            result = {}
        caught = [w for w in wlist if issubclass(w.category, WATCHED)]
    summary, seeds = result if isinstance(result, tuple) else (result, [])
    manifest.summary = summary
    manifest.seeds = [int(s) for s in seeds]
    manifest.warnings = sorted({f"{w.category.__name__}: {w.message}" for w in caught})
    manifest.truncation_warnings = sorted({str(w.message) for w in caught if issubclass(w.category, TruncationWarning)})
    if manifest.status == EXIT_OK and manifest.warnings:
        manifest.status = EXIT_WARNINGS
    out.text("config_echo.yaml", RunConfig.from_dict(config.to_dict()).to_yaml())
    manifest.files = dict(sorted(out.files.items()))
    with open(out.path("manifest.json"), "w") as fh:
        json.dump(manifest.to_dict(), fh, indent=2, sort_keys=True, default=_json_default)
    return manifest


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)!r}")
