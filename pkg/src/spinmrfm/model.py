"""Physical model: parameters, drive, adiabatic frame, Hamiltonians, Lindblad operators.

Conventions
-----------
The storage basis ``|v+(0)>, |v-(0)>`` consists of the eigenvectors of the
initial spin Hamiltonian ``H_S(0) = f(0) S_z - eps S_x`` with eigenvalues
``+hbar*lambda0/2`` and ``-hbar*lambda0/2``.  In this basis ``H_S(0) =
lambda0 S_z'`` and the rotating-wave coupling is ``-2 eta (f/lambda) Z S_z'``.

Dissipators use ``2 L rho L^dag - {L^dag L, rho}`` (no factor 1/2).
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import integrate

from .errors import ConfigError, RegimeWarning
from .hilbert import (FockBasis, OperatorMatrix, ladder_ops, position_momentum_ops,
                      spin_ops, tensor)

log = logging.getLogger(__name__)

REGIME_RATIO = 10.0


@dataclass(frozen=True)
class PhysParams:
    """Physical constants and couplings in simulation units.

    Attributes
    ----------
    hbar, m, omega_m : float
        Action unit, cantilever mass and angular frequency.
    eta : float
        Spin-cantilever coupling (force per unit spin).
    epsilon : float
        Rabi energy ``hbar * omega_1``.
    gamma_m : float
        Dissipation rate ``Gamma / 2m``.
    kT : float
        Thermal energy.
    kappa, E_drive, gamma_c : float
        Cavity-cantilever coupling, laser drive strength, cavity loss rate.
    e_d : float
        Detector efficiency in [0, 1].
    beta : float
        Photocurrent display scale.
    time_unit_seconds : float
        Seconds per simulation time unit.
    metadata : dict
        Optional laboratory-frame primitives, recorded only.
    """

    hbar: float = 1.0
    m: float = 1.0
    omega_m: float = 1.0
    eta: float = 0.3
    epsilon: float = 400.0
    gamma_m: float = 1e-5
    kT: float = 1e4
    kappa: float = 0.0
    E_drive: float = 0.0
    gamma_c: float = 1.0
    e_d: float = 1.0
    beta: float = 1.0
    time_unit_seconds: float = 1e-5
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for f in fields(self):
            if f.name == "metadata":
                continue
            val = getattr(self, f.name)
            if isinstance(val, bool) or not isinstance(val, (int, float, np.floating, np.integer)):
                raise ConfigError(f"{f.name} must be a number, got {val!r}")
            object.__setattr__(self, f.name, float(val))
        for name in ("hbar", "m", "omega_m", "epsilon", "kT", "gamma_c", "time_unit_seconds"):
            val = getattr(self, name)
            if not (np.isfinite(val) and val > 0):
                raise ConfigError(f"{name} must be positive and finite, got {val!r}")
        for name in ("eta", "gamma_m", "kappa", "E_drive", "beta"):
            val = getattr(self, name)
            if not (np.isfinite(val) and val >= 0):
                raise ConfigError(f"{name} must be non-negative and finite, got {val!r}")
        if not 0.0 <= self.e_d <= 1.0:
            raise ConfigError(f"detector efficiency e_d must lie in [0, 1], got {self.e_d!r}")

    def replace(self, **changes) -> "PhysParams":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)

    # derived quantities
    @property
    def ell(self) -> float:
        """Thermal de Broglie length ``hbar / (2 sqrt(m kT))``."""
        return self.hbar / (2.0 * math.sqrt(self.m * self.kT))

    @property
    def Gamma(self) -> float:
        return 2.0 * self.m * self.gamma_m

    @property
    def q_factor(self) -> float:
        """``Q = m omega_m / Gamma = omega_m / (2 gamma_m)``."""
        return math.inf if self.gamma_m == 0 else self.m * self.omega_m / self.Gamma

    @property
    def q_factor_alt(self) -> float:
        """Alternative convention ``Q = omega_m / gamma_m``."""
        return math.inf if self.gamma_m == 0 else self.omega_m / self.gamma_m

    @property
    def meas_coefficient(self) -> float:
        """Coefficient of ``Z`` in the measurement Lindblad operator."""
        return math.sqrt(8.0 * self.kappa ** 2 * self.E_drive ** 2 / self.gamma_c ** 3)

    @property
    def signal_gain(self) -> float:
        """``8 kappa E / gamma_c`` (photocurrent signal multiplier at e_d = 1)."""
        return 8.0 * self.kappa * self.E_drive / self.gamma_c

    @property
    def constant_force(self) -> float:
        """``4 kappa E^2 / gamma_c^2`` (radiation-pressure offset force)."""
        return 4.0 * self.kappa * self.E_drive ** 2 / self.gamma_c ** 2

    @property
    def alpha0(self) -> float:
        """Steady-state cavity amplitude ``|alpha_0| = 2E / gamma_c``."""
        return 2.0 * self.E_drive / self.gamma_c

    def regime_flags(self) -> dict:
        """Regime checks; ``True`` means the assumption holds."""
        return {
            "bad_cavity": self.gamma_c >= REGIME_RATIO * self.omega_m,
            "weak_damping": self.omega_m >= REGIME_RATIO * self.gamma_m,
            "high_temperature": self.hbar * self.omega_m <= self.kT / REGIME_RATIO,
        }

    def regime_warnings(self) -> list[str]:
        msgs = []
        flags = self.regime_flags()
        if not flags["bad_cavity"]:
            msgs.append(f"bad-cavity limit violated: gamma_c={self.gamma_c:g} is not >> "
                        f"omega_m={self.omega_m:g} (the model assumes operation in the bad cavity limit)")
        if not flags["weak_damping"]:
            msgs.append(f"weak-damping assumption violated: omega_m={self.omega_m:g} is not >> "
                        f"gamma_m={self.gamma_m:g}")
        return msgs

    def check_regimes(self) -> dict:
        """Log and warn about regime violations; returns the flags."""
        for msg in self.regime_warnings():
            log.warning(msg)
            warnings.warn(msg, RegimeWarning, stacklevel=2)
        return self.regime_flags()


@dataclass(frozen=True)
class DriveProfile:
    """Frequency-modulation function ``f(t)``.

    ``paper_ramp_sine``: ``f0 + slope*t`` for ``t <= t_switch``, then
    ``amplitude * sin(frequency * (t - t_switch))``.
    ``table``: linear interpolation of samples ``(table_t, table_f)``.
    """

    kind: str = "paper_ramp_sine"
    f0: float = -6000.0
    slope: float = 300.0
    t_switch: float = 20.0
    amplitude: float = 1000.0
    frequency: float = 1.0
    table_t: Optional[tuple] = None
    table_f: Optional[tuple] = None

    def __post_init__(self):
        if self.kind == "paper_ramp_sine":
            end = self.f0 + self.slope * self.t_switch
            if abs(end) > 1e-9 * max(1.0, abs(self.f0)):
                raise ConfigError(f"drive discontinuous at t_switch: ramp ends at {end!r}, sine starts at 0")
            if self.t_switch < 0:
                raise ConfigError("t_switch must be non-negative")
        elif self.kind == "table":
            if self.table_t is None or self.table_f is None:
                raise ConfigError("table profile needs table_t and table_f")
            t = np.asarray(self.table_t, float)
            f = np.asarray(self.table_f, float)
            if t.shape != f.shape or t.size < 2 or np.any(np.diff(t) <= 0):
                raise ConfigError("table_t must be strictly increasing and match table_f")
            if not np.all(np.isfinite(f)):
                raise ConfigError("table values must be finite")
            object.__setattr__(self, "table_t", tuple(t.tolist()))
            object.__setattr__(self, "table_f", tuple(f.tolist()))
        else:
            raise ConfigError(f"unknown drive kind {self.kind!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    def _check_range(self, t: np.ndarray):
        if np.any(t < 0):
            raise ValueError("drive evaluated at negative time")
        if self.kind == "table":
            lo, hi = self.table_t[0], self.table_t[-1]
            if np.any(t < lo) or np.any(t > hi):
                raise ValueError(f"t outside table range [{lo}, {hi}]")

    def f(self, t):
        """Drive value at ``t`` (scalar or array)."""
        if isinstance(t, float) and self.kind == "paper_ramp_sine":
            # scalar fast path used inside integrator loops
            if t < 0:
                raise ValueError("drive evaluated at negative time")
            if t <= self.t_switch:
                return self.f0 + self.slope * t
            return self.amplitude * math.sin(self.frequency * (t - self.t_switch))
        tt = np.asarray(t, dtype=float)
        self._check_range(tt)
        if self.kind == "table":
            out = np.interp(tt, self.table_t, self.table_f)
        else:
            out = np.where(tt <= self.t_switch, self.f0 + self.slope * tt,
                           self.amplitude * np.sin(self.frequency * (tt - self.t_switch)))
        return float(out) if np.ndim(out) == 0 else out

    def df(self, t):
        """Time derivative ``f'(t)``; piecewise-constant slopes for tables."""
        tt = np.asarray(t, dtype=float)
        self._check_range(tt)
        if self.kind == "table":
            tab_t = np.asarray(self.table_t)
            slopes = np.diff(self.table_f) / np.diff(tab_t)
            idx = np.clip(np.searchsorted(tab_t, tt, side="right") - 1, 0, slopes.size - 1)
            out = slopes[idx]
        else:
            out = np.where(tt <= self.t_switch, self.slope,
                           self.amplitude * self.frequency * np.cos(self.frequency * (tt - self.t_switch)))
        return float(out) if np.ndim(out) == 0 else out

    def max_abs(self, t_end: float) -> float:
        """Upper bound of ``|f|`` on ``[0, t_end]``."""
        if self.kind == "table":
            return float(np.max(np.abs(self.table_f)))
        ramp_end = min(t_end, self.t_switch)
        ramp = max(abs(self.f0), abs(self.f0 + self.slope * ramp_end))
        return max(ramp, abs(self.amplitude) if t_end > self.t_switch else 0.0)

    def breakpoints(self) -> list[float]:
        if self.kind == "table":
            return list(self.table_t)
        return [self.t_switch]


def drive_f(profile: DriveProfile, t):
    """``f(t)`` for the given profile."""
    return profile.f(t)


def lambda_theta(params: PhysParams, profile: DriveProfile, t):
    """Instantaneous ``lambda = sqrt(f^2 + eps^2)`` and mixing angle ``Theta``.

    ``Theta = atan2(eps, -f)`` lies in (0, pi) and satisfies ``tan Theta = -eps/f``.
    """
    f = np.asarray(profile.f(t), dtype=float)
    lam = np.hypot(f, params.epsilon)
    theta = np.arctan2(params.epsilon, -f)
    if lam.ndim == 0:
        return float(lam), float(theta)
    return lam, theta


class AdiabaticFrame:
    """Instantaneous spin eigenframe with cached accumulated phase.

    ``phase(t) = (1/hbar) * int_0^t lambda dt'`` is stored at knots spaced
    ``knot_spacing`` apart; values between knots add one adaptive quadrature
    over the partial interval, so no interpolation error is introduced.
    """

    def __init__(self, params: PhysParams, profile: DriveProfile, knot_spacing: float = 1.0,
                 rtol: float = 1e-10):
        self.params = params
        self.profile = profile
        self.h = float(knot_spacing)
        self.rtol = rtol
        self._cum = [0.0]

    def lam(self, t):
        return lambda_theta(self.params, self.profile, t)[0]

    def theta(self, t):
        return lambda_theta(self.params, self.profile, t)[1]

    def _segment(self, a: float, b: float) -> float:
        if b <= a:
            return 0.0
        pts = [x for x in self.profile.breakpoints() if a < x < b]
        val, err = integrate.quad(lambda s: self.lam(s), a, b, points=pts or None,
                                  epsrel=self.rtol, epsabs=0.0, limit=200)
        if err > 1e-8 * max(abs(val), 1e-300) and err > 1e-12:
            raise RuntimeError(f"phase quadrature did not converge on [{a}, {b}]: err={err:.3e}")
        return val

    def phase(self, t):
        """Accumulated phase ``Phi(t)`` (scalar or array)."""
        ts = np.atleast_1d(np.asarray(t, dtype=float))
        if np.any(ts < 0):
            raise ValueError("phase requested at negative time")
        out = np.empty_like(ts)
        for i, ti in enumerate(ts):
            k = int(ti // self.h)
            while len(self._cum) <= k:
                j = len(self._cum)
                self._cum.append(self._cum[-1] + self._segment((j - 1) * self.h, j * self.h))
            out[i] = (self._cum[k] + self._segment(k * self.h, ti)) / self.params.hbar
        return float(out[0]) if np.ndim(t) == 0 else out


def accumulated_phase(frame: AdiabaticFrame, t):
    """``Phi(t) = (1/hbar) int_0^t lambda(t') dt'``."""
    return frame.phase(t)


def spin_decomposition(a: complex, b: complex, theta0: float) -> tuple[complex, complex]:
    """Rotate laboratory amplitudes ``(a, b)`` by the half angle ``theta0/2``.

    ``a_eff = a cos(theta0/2) + b sin(theta0/2)`` and
    ``b_eff = -a sin(theta0/2) + b cos(theta0/2)``.  ``a_eff`` is the amplitude
    on the state aligned with the effective field ``(eps, 0, -f)``.
    """
    norm = abs(a) ** 2 + abs(b) ** 2
    if abs(norm - 1.0) > 1e-9:
        raise ValueError(f"spin amplitudes not normalized: |a|^2+|b|^2 = {norm:.12f}")
    c, s = math.cos(theta0 / 2), math.sin(theta0 / 2)
    return a * c + b * s, -a * s + b * c


def storage_from_lab(a: complex, b: complex, theta0: float) -> np.ndarray:
    """Amplitudes on the storage basis ``(|v+(0)>, |v-(0)>)`` from lab ``(a, b)``.

    ``|v+(0)>`` is the ``+hbar*lambda0/2`` eigenvector of ``H_S(0)``, i.e. the
    state anti-aligned with the effective field, so it carries ``b_eff`` and
    ``|v-(0)>`` carries ``a_eff``.
    """
    a_eff, b_eff = spin_decomposition(a, b, theta0)
    return np.array([b_eff, a_eff], dtype=complex)


def storage_basis_vectors(theta0: float) -> np.ndarray:
    """Columns are ``|v+(0)>``, ``|v-(0)>`` in the laboratory ``|up>, |down>`` basis."""
    c, s = math.cos(theta0 / 2), math.sin(theta0 / 2)
    return np.array([[-s, c], [c, s]], dtype=complex)


def lab_spin_ops(theta0: float, hbar: float = 1.0) -> tuple[OperatorMatrix, OperatorMatrix, OperatorMatrix]:
    """Laboratory ``S_x, S_y, S_z`` expressed in the storage basis."""
    u = storage_basis_vectors(theta0)
    out = []
    for op in spin_ops(hbar):
        out.append(OperatorMatrix(u.conj().T @ op.matrix @ u, True, op.label.rstrip("'") + "_lab"))
    return tuple(out)


@dataclass(frozen=True, eq=False)
class SystemOperators:
    """Prebuilt composite operators for one ``(params, profile, N)`` triple."""

    basis: FockBasis
    theta0: float
    Z: OperatorMatrix
    p: OperatorMatrix
    HZ: OperatorMatrix
    number: OperatorMatrix
    Sx: OperatorMatrix
    Sy: OperatorMatrix
    Sz: OperatorMatrix
    Sx_lab: OperatorMatrix
    Sz_lab: OperatorMatrix
    Z_osc: OperatorMatrix
    p_osc: OperatorMatrix

    @property
    def n_levels(self) -> int:
        return self.basis.n_levels

    @property
    def dim(self) -> int:
        return 2 * self.basis.n_levels


def build_operators(params: PhysParams, profile: DriveProfile, n_levels: int) -> SystemOperators:
    """Assemble all composite operators used by the Hamiltonians and solvers."""
    basis = FockBasis(n_levels)
    z, p = position_momentum_ops(basis, params)
    a, ad = ladder_ops(basis)
    eye2 = OperatorMatrix(np.eye(2), True)
    eye_n = OperatorMatrix(np.eye(n_levels), True)
    hz_osc = OperatorMatrix(params.hbar * params.omega_m * np.diag(np.arange(n_levels) + 0.5), True, "H_Z")
    sx, sy, sz = spin_ops(params.hbar)
    theta0 = lambda_theta(params, profile, 0.0)[1]
    sx_lab, _, sz_lab = lab_spin_ops(theta0, params.hbar)
    return SystemOperators(
        basis=basis, theta0=theta0,
        Z=tensor(eye2, z), p=tensor(eye2, p), HZ=tensor(eye2, hz_osc),
        number=tensor(eye2, OperatorMatrix(np.diag(np.arange(n_levels, dtype=float)), True)),
        Sx=tensor(sx, eye_n), Sy=tensor(sy, eye_n), Sz=tensor(sz, eye_n),
        Sx_lab=tensor(sx_lab, eye_n), Sz_lab=tensor(sz_lab, eye_n),
        Z_osc=z, p_osc=p,
    )


class CouplingRatio:
    """Picklable ``t -> f(t)/lambda(t)``."""

    def __init__(self, profile: DriveProfile, epsilon: float):
        self.profile = profile
        self.epsilon = epsilon

    def __call__(self, t: float) -> float:
        f = self.profile.f(t)
        return f / math.hypot(f, self.epsilon)


class DriveValue:
    """Picklable ``t -> f(t)``."""

    def __init__(self, profile: DriveProfile):
        self.profile = profile

    def __call__(self, t: float) -> float:
        return self.profile.f(t)


class TimeDependentOperator:
    """``A(t) = static + sum_k c_k(t) * A_k`` with scalar coefficient functions.

    Parameters
    ----------
    static : ndarray
    terms : sequence of (callable, ndarray)
    coef_bounds : sequence of float, optional
        Bounds on ``|c_k(t)|`` used for step-size checks.
    """

    def __init__(self, static, terms: Sequence = (), hermitian: bool = True,
                 coef_bounds: Optional[Sequence[float]] = None, label: str = ""):
        self.static = np.array(static, dtype=complex)
        self.terms = tuple((fn, np.array(mat, dtype=complex)) for fn, mat in terms)
        self.hermitian = hermitian
        self.coef_bounds = tuple(coef_bounds) if coef_bounds is not None else tuple(1.0 for _ in self.terms)
        self.label = label
        for arr in [self.static] + [m for _, m in self.terms]:
            arr.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.static.shape[0]

    def __call__(self, t: float) -> np.ndarray:
        out = self.static.copy()
        for fn, mat in self.terms:
            out += fn(t) * mat
        return out

    def operator(self, t: float) -> OperatorMatrix:
        return OperatorMatrix(self(t), self.hermitian, self.label)

    def norm_bound(self) -> float:
        """Upper bound on the spectral norm over all times."""
        bound = np.linalg.norm(self.static, 2)
        for (fn, mat), c in zip(self.terms, self.coef_bounds):
            bound += abs(c) * np.linalg.norm(mat, 2)
        return float(bound)


def _coupling_term(params: PhysParams, ops: SystemOperators) -> np.ndarray:
    return -2.0 * params.eta * (ops.Z.matrix @ ops.Sz.matrix)


def rwa_generator(params: PhysParams, profile: DriveProfile, ops: SystemOperators) -> TimeDependentOperator:
    """``H_rwa(t) = H_Z - 2 eta (f/lambda) Z S_z'``."""
    return TimeDependentOperator(ops.HZ.matrix, [(CouplingRatio(profile, params.epsilon), _coupling_term(params, ops))],
                                 coef_bounds=[1.0], label="H_rwa")


def eff_generator(params: PhysParams, profile: DriveProfile, ops: SystemOperators,
                  drop_constant_force: bool = False) -> TimeDependentOperator:
    """``H_eff = H_rwa + (4 kappa E^2/gamma_c^2) Z + (gamma_m/2)(Zp + pZ)``."""
    z, p = ops.Z.matrix, ops.p.matrix
    static = ops.HZ.matrix + 0.5 * params.gamma_m * (z @ p + p @ z)
    if not drop_constant_force:
        static = static + params.constant_force * z
    return TimeDependentOperator(static, [(CouplingRatio(profile, params.epsilon), _coupling_term(params, ops))],
                                 coef_bounds=[1.0], label="H_eff")


def full_generator(params: PhysParams, profile: DriveProfile, ops: SystemOperators,
                   t_end: float | None = None) -> TimeDependentOperator:
    """``H = H_Z - 2 eta Z S_z + f(t) S_z - eps S_x`` with laboratory spin operators."""
    z = ops.Z.matrix
    static = ops.HZ.matrix - 2.0 * params.eta * (z @ ops.Sz_lab.matrix) - params.epsilon * ops.Sx_lab.matrix
    bound = profile.max_abs(t_end if t_end is not None else 1e300)
    return TimeDependentOperator(static, [(DriveValue(profile), ops.Sz_lab.matrix)], coef_bounds=[bound],
                                 label="H_full")


def hamiltonian_full(params: PhysParams, profile: DriveProfile, t: float, ops: SystemOperators) -> OperatorMatrix:
    return full_generator(params, profile, ops).operator(t)


def hamiltonian_rwa(params: PhysParams, profile: DriveProfile, t: float, ops: SystemOperators) -> OperatorMatrix:
    return rwa_generator(params, profile, ops).operator(t)


def hamiltonian_eff(params: PhysParams, profile: DriveProfile, t: float, ops: SystemOperators,
                    drop_constant_force: bool = False) -> OperatorMatrix:
    return eff_generator(params, profile, ops, drop_constant_force).operator(t)


def lindblad_thermal(params: PhysParams, ops: SystemOperators) -> OperatorMatrix:
    """``L1 = sqrt(gamma_m/2) (Z/ell + i (ell/hbar) p)``."""
    ell = params.ell
    mat = math.sqrt(params.gamma_m / 2.0) * (ops.Z.matrix / ell + 1j * (ell / params.hbar) * ops.p.matrix)
    return OperatorMatrix(mat, False, "L_thermal")


def lindblad_meas(params: PhysParams, ops: SystemOperators) -> OperatorMatrix:
    """``L2 = sqrt(8 kappa^2 E^2 / gamma_c^3) Z``."""
    return OperatorMatrix(params.meas_coefficient * ops.Z.matrix, True, "L_meas")


def caldeira_leggett_dissipator(rho: np.ndarray, params: PhysParams, z: np.ndarray, p: np.ndarray,
                                completion: bool = True) -> np.ndarray:
    """Non-Hamiltonian part of the high-temperature Brownian-motion generator.

    ``-(i gamma_m/hbar)[Z,{p,rho}] - (gamma_m/2 ell^2)[Z,[Z,rho]]`` plus, if
    ``completion``, the momentum-diffusion term ``-(gamma_m ell^2/2 hbar^2)[p,[p,rho]]``.
    """
    def comm(a, b):
        return a @ b - b @ a
    g, ell, hbar = params.gamma_m, params.ell, params.hbar
    out = -1j * g / hbar * comm(z, p @ rho + rho @ p) - g / (2 * ell ** 2) * comm(z, comm(z, rho))
    if completion:
        out = out - g * ell ** 2 / (2 * hbar ** 2) * comm(p, comm(p, rho))
    return out


def lindblad_dissipator(rho: np.ndarray, lindblads: Sequence) -> np.ndarray:
    """``sum_j 2 L rho L^dag - {L^dag L, rho}``."""
    out = np.zeros_like(rho, dtype=complex)
    for L in lindblads:
        L = L.matrix if isinstance(L, OperatorMatrix) else np.asarray(L)
        ldl = L.conj().T @ L
        out += 2 * L @ rho @ L.conj().T - ldl @ rho - rho @ ldl
    return out


@dataclass(frozen=True)
class AdiabaticityReport:
    max_ratio: float
    t_at_max: float
    threshold: float
    adiabatic: bool

    def to_dict(self) -> dict:
        return asdict(self)


def adiabaticity_report(params: PhysParams, profile: DriveProfile, t_range: tuple[float, float],
                        threshold: float = 1e-2, n_grid: int = 20001) -> AdiabaticityReport:
    """Maximum of ``|eps f'(t) / lambda^2| * hbar / lambda`` over a grid.

    The grid is uniform and augmented with drive breakpoints and zero
    crossings of a sinusoidal drive, where the ratio peaks.
    """
    t0, t1 = t_range
    grid = np.linspace(t0, t1, n_grid)
    extra = [b for b in profile.breakpoints() if t0 <= b <= t1]
    if profile.kind == "paper_ramp_sine" and profile.frequency > 0:
        period = math.pi / profile.frequency
        k0 = max(0, math.floor((max(t0, profile.t_switch) - profile.t_switch) / period))
        t = profile.t_switch + k0 * period
        while t <= t1:
            if t >= t0:
                extra.append(t)
            t += period
    grid = np.unique(np.concatenate([grid, np.asarray(extra, dtype=float)]))
    lam, _ = lambda_theta(params, profile, grid)
    ratio = np.abs(params.epsilon * np.asarray(profile.df(grid)) / lam ** 2) * params.hbar / lam
    i = int(np.argmax(ratio))
    return AdiabaticityReport(float(ratio[i]), float(grid[i]), threshold, bool(ratio[i] <= threshold))


def expected_amplitude(params: PhysParams, profile: DriveProfile) -> float:
    """Expected steady oscillation amplitude of ``<Z>`` for a spin eigenstate.

    The resonant drive harmonic of ``eta * f/lambda`` is amplified by the
    damped response ``1/(2 m omega_m gamma_m)``; the static ramp offset
    ``eta/(m omega_m^2)`` is included as a floor.  Without damping the
    amplitude is unbounded and ``inf`` is returned.
    """
    static = params.eta / (params.m * params.omega_m ** 2)
    if profile.kind != "paper_ramp_sine":
        return static
    ratio = CouplingRatio(profile, params.epsilon)
    period = 2 * math.pi / profile.frequency
    ts = profile.t_switch + np.linspace(0, period, 4097)[:-1]
    g = np.array([ratio(t) for t in ts])
    harmonic = 2 * abs(np.mean(g * np.exp(-1j * profile.frequency * (ts - profile.t_switch))))
    if params.gamma_m == 0:
        return math.inf
    resonant = params.eta * harmonic / (2 * params.m * params.omega_m * params.gamma_m)
    return max(static, resonant)
