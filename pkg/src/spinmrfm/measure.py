"""Homodyne photocurrent synthesis and spin readout from the record.

The photocurrent is ``I = beta * (-s e_d <Z> + sqrt(gamma_c e_d) dW/dt)`` with
signal gain ``s = 8 kappa E / gamma_c``.  ``dW/dt`` is regularized by boxcar
binning of the recorded measurement-channel increments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from types import SimpleNamespace
from typing import Optional

import numpy as np

from .errors import ConfigError

NO_DECISION = 0.0
CONFIDENCE_CAP = 1e12


@dataclass(frozen=True, eq=False)
class PhotocurrentRecord:
    """Binned photocurrent.

    Attributes
    ----------
    t_centers : ndarray
        Bin centres.
    samples : ndarray
        Binned current, ``signal + noise``.
    bin_width : float
    beta : float
    signal, noise : ndarray
        The two additive components.
    noise_density : float
        White-noise level ``beta^2 gamma_c e_d`` (variance per bin is this
        divided by ``bin_width``).
    """

    t_centers: np.ndarray
    samples: np.ndarray
    bin_width: float
    beta: float
    signal: np.ndarray
    noise: np.ndarray
    noise_density: float
    t_start: float = 0.0

    def rows(self) -> np.ndarray:
        return np.column_stack([self.t_centers, self.samples])


@dataclass(frozen=True)
class Quadrature:
    xc: float
    xs: float
    phase: float
    amplitude: float
    sigma: float


@dataclass(frozen=True)
class ReadoutDecision:
    """Outcome of a phase readout.

    ``spin_estimate`` is +0.5 or -0.5, or 0.0 (``NO_DECISION``) when the
    quadrature amplitude does not clear three noise standard deviations.
    """

    spin_estimate: float
    phase_estimate: float
    confidence: float
    window: tuple
    in_phase: float
    amplitude: float

    @property
    def decided(self) -> bool:
        return self.spin_estimate != NO_DECISION


def photocurrent(traj, params, bin_width: float, channel: Optional[int] = None,
                 t_start: Optional[float] = None) -> PhotocurrentRecord:
    """Synthesize the binned homodyne current from a recorded trajectory.

    Parameters
    ----------
    traj : TrajectoryResult or MasterResult
        Needs ``times``, ``z``, ``dw`` and ``record_dt``.  ``<Z>`` at the start
        of each record interval is paired with that interval's increment, as
        in the Ito discretization.
    params : PhysParams
    bin_width : float
        Must be an integer multiple of the record interval.
    channel : int, optional
        Increment channel holding the measurement record; defaults to the
        trajectory's ``measured_channel``.
    """
    ch = traj.measured_channel if channel is None else channel
    dw = getattr(traj, "dw", None)
    if ch is None or dw is None:
        raise ConfigError("trajectory carries no measurement-channel record")
    dw = np.asarray(dw)
    if dw.ndim != 2:
        raise ConfigError("photocurrent expects a single trajectory record")
    rdt = traj.record_dt
    per_bin = bin_width / rdt
    k = int(round(per_bin))
    if k < 1 or abs(per_bin - k) > 1e-6 * per_bin:
        raise ConfigError(f"bin_width {bin_width} must be a positive multiple of the record interval {rdt}")
    times = np.asarray(traj.times)
    z = np.asarray(traj.z)[:-1]
    dw2 = dw[:, ch]
    if t_start is not None:
        i0 = int(round((t_start - times[0]) / rdt))
        z, dw2, t0 = z[i0:], dw2[i0:], times[i0]
    else:
        t0 = times[0]
    n_bins = z.size // k
    z = z[: n_bins * k].reshape(n_bins, k)
    dw2 = dw2[: n_bins * k].reshape(n_bins, k)
    beta, e_d = params.beta, params.e_d
    signal = -beta * params.signal_gain * e_d * z.mean(axis=1)
    noise = beta * math.sqrt(params.gamma_c * e_d) * dw2.sum(axis=1) / bin_width
    centers = t0 + bin_width * (np.arange(n_bins) + 0.5)
    return PhotocurrentRecord(centers, signal + noise, bin_width, beta, signal, noise,
                              beta ** 2 * params.gamma_c * e_d, float(t0))


def _window_mask(record: PhotocurrentRecord, window) -> tuple[np.ndarray, float]:
    lo, hi = window
    if hi <= lo:
        raise ConfigError("window end must follow its start")
    mask = (record.t_centers >= lo) & (record.t_centers < hi)
    return mask, float(mask.sum() * record.bin_width)


def quadrature_demod(record: PhotocurrentRecord, omega: float, window) -> Quadrature:
    """Demodulate at ``omega`` over ``window``.

    ``X_c = (2/T) sum I cos(w t) dt`` and ``X_s`` likewise; the phase is
    ``atan2(-X_s, X_c)`` so that ``A cos(w t + phi)`` yields ``phi``.  The
    white-noise standard deviation of each quadrature is
    ``sqrt(2 S / T)`` with ``S`` the record's noise density.
    """
    mask, span = _window_mask(record, window)
    n_periods = span * omega / (2 * math.pi)
    if n_periods < 5 - 1e-9:
        raise ConfigError(f"window spans {n_periods:.2f} periods; at least 5 are required")
    t = record.t_centers[mask]
    y = record.samples[mask]
    dt = record.bin_width
    xc = 2.0 / span * float(np.sum(y * np.cos(omega * t)) * dt)
    xs = 2.0 / span * float(np.sum(y * np.sin(omega * t)) * dt)
    sigma = math.sqrt(2.0 * record.noise_density / span)
    return Quadrature(xc, xs, math.atan2(-xs, xc), math.hypot(xc, xs), sigma)


def classify_spin(record: PhotocurrentRecord, omega_m: float, reference_phase: float, window,
                  noise_floor: Optional[float] = None) -> ReadoutDecision:
    """Decide the spin from the sign of the in-phase quadrature.

    The in-phase component is ``A cos(phase - reference_phase)``; +1/2 is
    reported when it is positive.  If the amplitude is below three times the
    noise floor (``sigma`` of the demodulated quadrature unless given) the
    outcome is ``NO_DECISION``.
    """
    q = quadrature_demod(record, omega_m, window)
    floor = q.sigma if noise_floor is None else noise_floor
    in_phase = q.amplitude * math.cos(q.phase - reference_phase)
    conf = q.amplitude / floor if floor > 0 else CONFIDENCE_CAP
    conf = min(conf, CONFIDENCE_CAP)
    if floor > 0 and q.amplitude < 3.0 * floor:
        spin = NO_DECISION
    else:
        spin = 0.5 if in_phase > 0 else -0.5
    return ReadoutDecision(spin, q.phase, conf, tuple(window), in_phase, q.amplitude)


def reference_phase_from_record(record: PhotocurrentRecord, omega_m: float, window) -> float:
    """Phase of a known spin-up record; used as the classifier reference."""
    return quadrature_demod(record, omega_m, window).phase


def signal_record(times: np.ndarray, z: np.ndarray, params, bin_width: float) -> PhotocurrentRecord:
    """Noise-free current for a ``<Z>`` series sampled on a uniform grid."""
    times = np.asarray(times)
    tr = SimpleNamespace(times=times, z=np.asarray(z), record_dt=float(times[1] - times[0]),
                         measured_channel=1, dw=np.zeros((times.size - 1, 2)))
    return photocurrent(tr, params, bin_width)


def collapse_time(traj, threshold: Optional[float] = None, confirm: Optional[float] = None,
                  hbar: float = 1.0, omega_m: float = 1.0) -> Optional[float]:
    """First time ``|<S_z'>|`` exceeds ``threshold`` and stays above it.

    Parameters
    ----------
    threshold : float, optional
        Defaults to ``0.45 hbar``.
    confirm : float, optional
        Confirmation horizon; defaults to ``10 / omega_m``.  Near the end of
        the record the horizon is truncated to the data available.
    """
    thr = 0.45 * hbar if threshold is None else threshold
    hor = 10.0 / omega_m if confirm is None else confirm
    t = np.asarray(traj.times)
    above = np.abs(np.asarray(traj.sz)) > thr
    for i in np.flatnonzero(above):
        if i > 0 and above[i - 1]:
            continue
        j = np.searchsorted(t, t[i] + hor, side="right")
        if np.all(above[i:j]):
            return float(t[i])
    return None


@dataclass(frozen=True)
class ReadoutSummary:
    """Aggregate of one readout study."""

    n_paths: int
    n_decided: int
    n_agree: int
    agreement: float
    decisions: list = field(default_factory=list)
