"""Closed-form frequency-domain analytics: response, noise spectrum, SNR, F_min.

All formulas follow from the linearized Langevin description of the
cantilever coupled to a bad cavity with an Ohmic reservoir in the
infinite-cutoff limit.  Spin-force harmonics enter through Fourier
coefficients of ``G(t) = 2 eta f(t) / lambda(t)`` over one drive period.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import integrate

from .errors import ConfigError
from .model import DriveProfile, PhysParams

# |G(omega_k)| from the complex Fourier-series coefficient c_k
G_CONVENTIONS = {
    "harmonic": 2.0,          # amplitude of the k-th cosine harmonic, 2|c_k|
    "delta": 2.0 * math.pi,   # weight of the delta function in G(omega), 2 pi |c_k|
    "coefficient": 1.0,       # bare |c_k|
}
DEFAULT_G_CONVENTION = "harmonic"
CUTOFF_NOTE = "Ohmic reservoir, infinite frequency cutoff"
REGIME_HIGH_T = 10.0


def response_D(params: PhysParams, omega):
    """``D(w) = (i w - gamma_c/2)(w_m^2 - w^2 - i w Gamma/m)``."""
    w = np.asarray(omega, dtype=float)
    out = (1j * w - params.gamma_c / 2) * (params.omega_m ** 2 - w ** 2 - 1j * w * params.Gamma / params.m)
    return out if out.ndim else complex(out)


def response_D_resonance(params: PhysParams) -> float:
    """``|D(w_m)| = [(gamma_c/2)^2 + w_m^2]^(1/2) w_m^2 / Q`` with ``Q = m w_m / Gamma``."""
    if params.Gamma == 0:
        return 0.0
    q = params.m * params.omega_m / params.Gamma
    return math.sqrt((params.gamma_c / 2) ** 2 + params.omega_m ** 2) * params.omega_m ** 2 / q


def _g_of_t(params: PhysParams, profile: DriveProfile):
    def g(t):
        f = profile.f(t)
        return 2.0 * params.eta * f / np.hypot(f, params.epsilon)
    return g


def fourier_coefficient(params: PhysParams, profile: DriveProfile, k: int = 1, n_periods: int = 1,
                        t_start: float | None = None, n_points: int = 8192) -> complex:
    """Complex Fourier-series coefficient ``c_k`` of ``G(t)`` on the periodic phase.

    ``c_k = (1/T) int G(t) exp(-i k w_d (t - t_start)) dt`` over ``n_periods``
    whole periods of the sine drive.  The periodic trapezoid rule converges
    spectrally for this smooth integrand.
    """
    if profile.kind != "paper_ramp_sine":
        raise ConfigError("Fourier analysis needs a periodic (ramp + sine) drive profile")
    if n_periods < 1 or int(n_periods) != n_periods:
        raise ConfigError("window must be a whole number of periods")
    t0 = profile.t_switch if t_start is None else t_start
    if t0 < profile.t_switch:
        raise ConfigError("analysis window starts before the periodic phase")
    wd = profile.frequency
    span = n_periods * 2 * math.pi / wd
    ts = t0 + np.linspace(0.0, span, n_points * n_periods, endpoint=False)
    g = _g_of_t(params, profile)(ts)
    return complex(np.mean(g * np.exp(-1j * k * wd * (ts - t0))))


def g_fourier(params: PhysParams, profile: DriveProfile, at_omega: float | None = None,
              convention: str = DEFAULT_G_CONVENTION) -> float:
    """``|G(w_k)|`` at ``at_omega = k w_d`` under the named convention.

    Raises
    ------
    ConfigError
        If ``at_omega`` is not an integer multiple of the drive frequency or
        the convention is unknown.
    """
    if convention not in G_CONVENTIONS:
        raise ConfigError(f"unknown G convention {convention!r}; choose from {sorted(G_CONVENTIONS)}")
    w = profile.frequency if at_omega is None else at_omega
    k = w / profile.frequency
    if abs(k - round(k)) > 1e-9 or round(k) < 1:
        raise ConfigError(f"omega={w} is not a harmonic of the drive frequency {profile.frequency}")
    return G_CONVENTIONS[convention] * abs(fourier_coefficient(params, profile, int(round(k))))


def hbar_omega_coth(params: PhysParams, omega):
    """``hbar w coth(hbar w / 2 kT)``; singular at ``w = 0``."""
    w = np.asarray(omega, dtype=float)
    if np.any(w == 0):
        raise ConfigError("frequency grid must exclude omega = 0")
    x = params.hbar * w / (2 * params.kT)
    out = params.hbar * w / np.tanh(x)
    return out if out.ndim else float(out)


def hbar_omega_coth_high_t(params: PhysParams, omega):
    """High-temperature series ``2 kT + (hbar w)^2 / (6 kT)``."""
    w = np.asarray(omega, dtype=float)
    out = 2 * params.kT + (params.hbar * w) ** 2 / (6 * params.kT)
    return out if out.ndim else float(out)


@dataclass(frozen=True, eq=False)
class NoiseSpectrum:
    """Output current noise power density and its three components."""

    omega: np.ndarray
    shot: np.ndarray
    backaction: np.ndarray
    thermal: np.ndarray
    metadata: dict = field(default_factory=dict)

    @property
    def total(self) -> np.ndarray:
        return self.shot + self.backaction + self.thermal

    def rows(self) -> np.ndarray:
        return np.column_stack([self.omega, self.shot, self.backaction, self.thermal, self.total])


def noise_spectrum(params: PhysParams, omega_grid) -> NoiseSpectrum:
    """Shot, back-action and thermal parts of ``S_out(w)``.

    Raises
    ------
    ConfigError
        If the grid contains ``w = 0`` where the thermal term is singular.
    """
    w = np.atleast_1d(np.asarray(omega_grid, dtype=float))
    p = params
    coth = np.atleast_1d(hbar_omega_coth(p, w))
    d2 = np.abs(response_D(p, w)) ** 2
    a2 = p.alpha0 ** 2
    pref = p.beta ** 2 * p.gamma_c ** 2
    shot = np.full_like(w, pref)
    back = pref * 4 * (p.hbar * p.kappa ** 2 * p.gamma_c * a2 / p.m) ** 2 / (((p.gamma_c / 2) ** 2 + w ** 2) * d2)
    therm = pref * 4 * (p.kappa ** 2 * p.gamma_c * a2 * p.Gamma / p.m ** 2) * coth / d2
    return NoiseSpectrum(w, shot, back, therm, {"reservoir": CUTOFF_NOTE})


def mean_signal(params: PhysParams, profile: DriveProfile, omega: float | None = None, sz: float = 0.5,
                convention: str = DEFAULT_G_CONVENTION, g_value: float | None = None) -> float:
    """``|<I_out(w)>| = beta gamma_c (2 kappa sqrt(gamma_c) |alpha0| / m) |G(w)| |S_z'| / |D(w)|``."""
    w = profile.frequency if omega is None else omega
    g = g_fourier(params, profile, w, convention) if g_value is None else g_value
    p = params
    d = abs(response_D(p, w))
    return p.beta * p.gamma_c * (2 * p.kappa * math.sqrt(p.gamma_c) * p.alpha0 / p.m) * g * abs(sz) / d


def n_resonance(params: PhysParams, terms: bool = False):
    """Force-referred noise ``N(w_m)``: readout, back-action and thermal terms."""
    p = params
    wm = p.omega_m
    a2 = p.alpha0 ** 2
    cav = (p.gamma_c / 2) ** 2 + wm ** 2
    readout = math.inf if p.kappa == 0 or a2 == 0 else cav / (4 * p.kappa ** 2 * p.gamma_c * a2) * (wm * p.Gamma) ** 2
    back = p.hbar ** 2 * p.kappa ** 2 * p.gamma_c * a2 / cav
    thermal = p.Gamma * hbar_omega_coth(p, wm)
    if terms:
        return readout, back, thermal
    return readout + back + thermal


def snr(params: PhysParams, profile: DriveProfile, omega, sz: float = 0.5,
        convention: str = DEFAULT_G_CONVENTION, g_value: float | None = None):
    """``SNR(w) = |<I_out(w)>| / sqrt(S_out(w))`` in simulation units."""
    w = np.atleast_1d(np.asarray(omega, dtype=float))
    spec = noise_spectrum(params, w)
    if g_value is None:
        g_value = g_fourier(params, profile, profile.frequency, convention)
    sig = np.array([mean_signal(params, profile, wi, sz, convention, g_value) for wi in w])
    out = sig / np.sqrt(spec.total)
    return out if np.ndim(omega) else float(out[0])


def f_min_formula(k: float, kT: float, q: float, omega_m: float, bandwidth: float) -> float:
    """``sqrt(2 k kT dnu / (Q w_m))``, the thermal-limited minimum force."""
    return math.sqrt(2 * k * kT * bandwidth / (q * omega_m))


@dataclass(frozen=True)
class ForceLimit:
    high_t: float
    exact_thermal: float
    full_noise: float
    bandwidth: float
    high_t_regime: bool


def f_min(params: PhysParams, bandwidth: float) -> ForceLimit:
    """Minimum detectable force for bandwidth ``dnu`` (simulation units).

    ``high_t`` uses the closed form with ``Q = m w_m / Gamma``; ``exact_thermal``
    keeps the full ``coth``; ``full_noise`` uses all three noise terms.
    """
    if bandwidth <= 0:
        raise ConfigError("bandwidth must be positive")
    p = params
    if p.Gamma == 0:
        raise ConfigError("F_min needs non-zero damping")
    q = p.m * p.omega_m / p.Gamma
    k = p.m * p.omega_m ** 2
    readout, back, thermal = n_resonance(p, terms=True)
    return ForceLimit(
        high_t=f_min_formula(k, p.kT, q, p.omega_m, bandwidth),
        exact_thermal=math.sqrt(thermal * bandwidth),
        full_noise=math.sqrt((readout + back + thermal) * bandwidth),
        bandwidth=bandwidth,
        high_t_regime=p.hbar * p.omega_m * REGIME_HIGH_T <= p.kT,
    )



@dataclass(frozen=True)
class SnrReport:
    """SNR at resonance plus the conventions and conversions that produced it.

    ``snr_at_resonance`` is per root second; ``snr_sim`` is per root
    simulation time unit.
    """

    snr_at_resonance: float
    snr_sim: float
    n_resonance: float
    n_terms: dict
    g_value: float
    g_convention: str
    fourier_c1: float
    sz: float
    unit_conversion: float
    f_min: dict
    snr_by_convention: dict
    q_factors: dict
    notes: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def snr_at_resonance(params: PhysParams, profile: DriveProfile, sz: float = 0.5,
                     convention: str = DEFAULT_G_CONVENTION, bandwidth: float = 1.0) -> SnrReport:
    """``SNR(w_m) = |G(w_m)| |S_z'| / sqrt(N(w_m))`` with unit conversion.

    ``SNR_physical = SNR_sim / sqrt(time_unit_seconds)``.  The report also
    carries the value under every supported ``G`` convention.
    """
    p = params
    c1 = abs(fourier_coefficient(p, profile, 1))
    readout, back, thermal = n_resonance(p, terms=True)
    n = readout + back + thermal
    conv = 1.0 / math.sqrt(p.time_unit_seconds)
    by_conv = {name: fac * c1 * abs(sz) / math.sqrt(n) * conv for name, fac in G_CONVENTIONS.items()}
    fm = f_min(p, bandwidth)
    g = G_CONVENTIONS[convention] * c1
    return SnrReport(
        snr_at_resonance=by_conv[convention],
        snr_sim=g * abs(sz) / math.sqrt(n),
        n_resonance=n,
        n_terms={"readout": readout, "backaction": back, "thermal": thermal},
        g_value=g,
        g_convention=f"{convention}: |G(w_m)| = {G_CONVENTIONS[convention]:g} * |c_1|",
        fourier_c1=c1,
        sz=sz,
        unit_conversion=conv,
        f_min=asdict(fm),
        snr_by_convention=by_conv,
        q_factors={"m*omega_m/Gamma": p.q_factor, "omega_m/gamma_m": p.q_factor_alt},
        notes=CUTOFF_NOTE,
    )


def high_t_check(params: PhysParams, omega) -> float:
    """Relative difference between the exact and series thermal factors."""
    ex = np.asarray(hbar_omega_coth(params, omega))
    ap = np.asarray(hbar_omega_coth_high_t(params, omega))
    return float(np.max(np.abs(ex - ap) / np.abs(ex)))


def quadrature_integral(params: PhysParams, profile: DriveProfile, k: int = 1) -> complex:
    """Adaptive-quadrature cross-check of :func:`fourier_coefficient`."""
    g = _g_of_t(params, profile)
    t0 = profile.t_switch
    period = 2 * math.pi / profile.frequency
    wd = profile.frequency
    re = integrate.quad(lambda t: g(t) * math.cos(k * wd * (t - t0)), t0, t0 + period, limit=400, epsabs=1e-13)[0]
    im = integrate.quad(lambda t: -g(t) * math.sin(k * wd * (t - t0)), t0, t0 + period, limit=400, epsabs=1e-13)[0]
    return complex(re, im) / period
