"""Time evolution: unitary, Lindblad master equation, homodyne SME and QSD.

Stochastic equations are Ito.  With the dissipator convention
``2 L rho L^dag - {L^dag L, rho}`` the unravelings below use the noise
operators ``sqrt(2) L``:

* SME: ``drho = G[rho] dt + sqrt(2 e_d) ((L - <L>) rho + rho (L - <L>)^dag) dW``
* QSD: ``dpsi = [-(i/hbar) H - sum L^dag L + sum (2 r L - r^2)] psi dt
  + sqrt(2) sum (L - r) psi dW``, ``r = Re <L>``.

Both reproduce the master equation on average.  Deterministic drifts are
advanced with classic RK4 and the noise is added as an Euler-Maruyama
increment evaluated at the start of the step.
"""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, SolverError, StepSizeWarning, TruncationWarning
from .hilbert import CompositeState, DensityOperator, OperatorMatrix
from .model import SystemOperators, TimeDependentOperator

log = logging.getLogger(__name__)

SCHEMES = ("rk4_unitary", "rk4_lindblad", "euler_maruyama", "milstein_diag", "kraus")


@dataclass(frozen=True)
class SolverConfig:
    """Step size, scheme and recording options for one solver call.

    Attributes
    ----------
    dt : float
        Integration step.
    scheme : str
        One of ``rk4_unitary``, ``rk4_lindblad``, ``euler_maruyama``,
        ``milstein_diag``, ``kraus``.  The Milstein correction and the
        positivity-preserving ``kraus`` update apply to the stochastic master
        equation only.
    renormalize_each_step : bool
        Renormalize QSD states after every step.
    seed : int
        Seed of the Wiener increments when none are supplied.
    record_stride : int
        Steps between recorded samples.
    truncation_threshold : float
        Highest-Fock-level population that triggers a truncation warning.
    chunk_size : int
        Trajectories integrated together in one batch by ``ensemble_run``.
        Part of the configuration so that batching never depends on the
        worker count.
    max_steps : int or None
        Step budget; larger runs are rejected before they start.
    energy_scale : float or None
        Fastest physical frequency scale (times hbar) for the ``dt`` warning.
    """

    dt: float = 1e-3
    scheme: str = "euler_maruyama"
    renormalize_each_step: bool = True
    seed: int = 0
    record_stride: int = 1
    truncation_threshold: float = 1e-6
    chunk_size: int = 100
    max_steps: Optional[int] = None
    energy_scale: Optional[float] = None

    def __post_init__(self):
        if not (self.dt > 0 and np.isfinite(self.dt)):
            raise ConfigError(f"dt must be positive, got {self.dt!r}")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}; choose from {SCHEMES}")
        if int(self.record_stride) != self.record_stride or self.record_stride < 1:
            raise ConfigError("record_stride must be a positive integer")
        if self.chunk_size < 1:
            raise ConfigError("chunk_size must be positive")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must be a 64-bit unsigned integer")

    def replace(self, **changes) -> "SolverConfig":
        return replace(self, **changes)


def derived_seed(base_seed: int, index: int) -> int:
    """Deterministic 64-bit seed for trajectory ``index`` of an ensemble."""
    ss = np.random.SeedSequence([int(base_seed), int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True, eq=False)
class WienerPath:
    """Wiener increments ``dW ~ Normal(0, dt)``, shape ``(n_steps, n_channels)``."""

    increments: np.ndarray
    dt: float

    def __post_init__(self):
        inc = np.asarray(self.increments, dtype=float)
        if inc.ndim == 1:
            inc = inc[:, None]
        if inc.ndim != 2 or inc.shape[1] not in (1, 2):
            raise ValueError(f"increments must have shape (n_steps, 1|2), got {inc.shape}")
        object.__setattr__(self, "increments", inc)

    @classmethod
    def generate(cls, seed: int, n_steps: int, n_channels: int, dt: float) -> "WienerPath":
        rng = np.random.default_rng(seed)
        return cls(rng.standard_normal((n_steps, n_channels)) * math.sqrt(dt), dt)

    @classmethod
    def zeros(cls, n_steps: int, n_channels: int, dt: float) -> "WienerPath":
        return cls(np.zeros((n_steps, n_channels)), dt)

    @property
    def n_steps(self) -> int:
        return self.increments.shape[0]

    @property
    def n_channels(self) -> int:
        return self.increments.shape[1]

    def refine(self, rng: np.random.Generator) -> "WienerPath":
        """Split every increment into two halves that sum to it exactly.

        Halves are ``dW/2 +- (sqrt(dt)/2) xi`` with ``xi ~ Normal(0, 1)``, so each
        is ``Normal(0, dt/2)`` and the pair is independent, as for a Brownian
        path observed at the midpoint.
        """
        xi = rng.standard_normal(self.increments.shape) * (0.5 * math.sqrt(self.dt))
        half = 0.5 * self.increments
        out = np.empty((2 * self.n_steps, self.n_channels))
        out[0::2] = half + xi
        out[1::2] = half - xi
        return WienerPath(out, self.dt / 2)

    def coarsen(self) -> "WienerPath":
        if self.n_steps % 2:
            raise ValueError("odd number of steps cannot be coarsened")
        return WienerPath(self.increments[0::2] + self.increments[1::2], self.dt * 2)

    def summed(self, stride: int) -> np.ndarray:
        n = self.n_steps // stride
        return self.increments[: n * stride].reshape(n, stride, self.n_channels).sum(axis=1)


@dataclass(eq=False)
class TrajectoryResult:
    """Recorded observables of one trajectory.

    ``times`` has ``K+1`` entries; ``z``, ``p`` and ``sz`` are sampled at those
    times.  ``dw[k]`` is the summed Wiener increment over ``[times[k],
    times[k+1])`` for each channel, shape ``(K, 2)``.  Channel 0 is the
    thermal (averaging) noise and channel 1 the measurement record.
    """

    times: np.ndarray
    z: np.ndarray
    p: np.ndarray
    sz: np.ndarray
    dw: np.ndarray
    final_state: np.ndarray
    n_levels: int
    dt: float
    record_stride: int
    truncation_warning: bool = False
    max_top_population: float = 0.0
    measured_channel: Optional[int] = 1
    norm_range: tuple = (1.0, 1.0)
    metadata: dict = field(default_factory=dict)

    @property
    def record_dt(self) -> float:
        return self.dt * self.record_stride

    def rows(self) -> np.ndarray:
        """Table ``t, <Z>, <p>, <S_z'>, dW1, dW2``; the last row carries zero increments."""
        dw = np.zeros((self.times.size, 2))
        dw[:-1] = self.dw
        return np.column_stack([self.times, self.z, self.p, self.sz, dw])


@dataclass(eq=False)
class MasterResult:
    """Recorded output of the deterministic or conditioned density-matrix solvers."""

    times: np.ndarray
    z: np.ndarray
    p: np.ndarray
    sz: np.ndarray
    states: Optional[np.ndarray]
    final_state: np.ndarray
    n_levels: int
    observables: dict = field(default_factory=dict)
    min_eigenvalues: Optional[np.ndarray] = None
    max_top_population: float = 0.0
    truncation_warning: bool = False
    dw: Optional[np.ndarray] = None
    dt: float = 0.0
    record_stride: int = 1
    measured_channel: Optional[int] = None
    metadata: dict = field(default_factory=dict)

    @property
    def record_dt(self) -> float:
        return self.dt * self.record_stride

    def density(self, k: int = -1) -> DensityOperator:
        rho = self.states[k] if self.states is not None else self.final_state
        return DensityOperator(rho, self.n_levels)


# helpers -------------------------------------------------------------------

def _as_generator(hamiltonian) -> TimeDependentOperator:
    if isinstance(hamiltonian, TimeDependentOperator):
        return hamiltonian
    if isinstance(hamiltonian, OperatorMatrix):
        return TimeDependentOperator(hamiltonian.matrix)
    if isinstance(hamiltonian, np.ndarray):
        return TimeDependentOperator(hamiltonian)
    if callable(hamiltonian):
        return _CallableGenerator(hamiltonian)
    raise TypeError(f"unsupported Hamiltonian type {type(hamiltonian)!r}")


class _CallableGenerator(TimeDependentOperator):
    """Adapter for an arbitrary ``t -> matrix`` callable."""

    def __init__(self, fn: Callable):
        self.fn = fn
        probe = np.asarray(fn(0.0).matrix if isinstance(fn(0.0), OperatorMatrix) else fn(0.0), complex)
        super().__init__(np.zeros_like(probe))
        self._probe = probe

    def __call__(self, t: float) -> np.ndarray:
        h = self.fn(t)
        return np.asarray(h.matrix if isinstance(h, OperatorMatrix) else h, dtype=complex)

    def norm_bound(self) -> float:
        return float(np.linalg.norm(self._probe, 2))


def _matrices(lindblads: Sequence) -> list[np.ndarray]:
    return [np.asarray(L.matrix if isinstance(L, OperatorMatrix) else L, dtype=complex) for L in lindblads]


def _n_steps(t0: float, t1: float, cfg: SolverConfig) -> int:
    if t1 < t0:
        raise ConfigError("t1 must not precede t0")
    n = int(round((t1 - t0) / cfg.dt))
    if abs(n * cfg.dt - (t1 - t0)) > 1e-9 * max(1.0, abs(t1 - t0)):
        raise ConfigError(f"interval {t1 - t0} is not an integer multiple of dt={cfg.dt}")
    if n % cfg.record_stride:
        raise ConfigError(f"{n} steps are not a multiple of record_stride={cfg.record_stride}")
    if cfg.max_steps is not None and n > cfg.max_steps:
        raise SolverError(f"run needs {n} steps, above the budget of {cfg.max_steps}")
    return n


def _check_step(gen: TimeDependentOperator, dissipative_norm: float, cfg: SolverConfig, hbar: float):
    ham = gen.norm_bound() * cfg.dt / hbar
    if ham >= 1.0:
        raise SolverError(f"dt too large: |H| dt / hbar = {ham:.3g} >= 1")
    if (ham + dissipative_norm * cfg.dt) >= 2.5:
        raise SolverError(f"dt too large for RK4 stability: |drift| dt = {ham + dissipative_norm * cfg.dt:.3g}")
    if cfg.energy_scale is not None and cfg.energy_scale * cfg.dt / hbar >= 0.1:
        msg = f"dt * energy_scale / hbar = {cfg.energy_scale * cfg.dt / hbar:.3g} >= 0.1"
        log.warning(msg)
        warnings.warn(msg, StepSizeWarning, stacklevel=3)


def _top_pop_dense(psi: np.ndarray, n: int) -> np.ndarray:
    return np.abs(psi[n - 1]) ** 2 + np.abs(psi[2 * n - 1]) ** 2


def _flag_truncation(top: float, cfg: SolverConfig, what: str) -> bool:
    if top > cfg.truncation_threshold:
        msg = f"{what}: highest Fock level population {top:.3e} exceeds {cfg.truncation_threshold:.1e}"
        log.warning(msg)
        warnings.warn(msg, TruncationWarning, stacklevel=3)
        return True
    return False


# unitary --------------------------------------------------------------------

def evolve_unitary(state, hamiltonian, t0: float, t1: float, cfg: SolverConfig,
                   ops: SystemOperators, hbar: float = 1.0) -> TrajectoryResult:
    """Integrate ``dpsi/dt = -(i/hbar) H(t) psi`` with classic RK4.

    No renormalization is applied; the norm drift is reported in
    ``norm_range`` and a warning is raised if it exceeds 1e-8 per unit time.
    """
    gen = _as_generator(hamiltonian)
    psi = np.array(state.amplitudes if isinstance(state, CompositeState) else state, dtype=complex)
    n_steps = _n_steps(t0, t1, cfg)
    _check_step(gen, 0.0, cfg, hbar)
    n = ops.n_levels
    z, p, sz = ops.Z.matrix, ops.p.matrix, ops.Sz.matrix
    stride = cfg.record_stride
    n_rec = n_steps // stride
    rec = np.empty((n_rec + 1, 3))
    top = 0.0

    def record(k, v):
        rec[k] = [np.vdot(v, z @ v).real, np.vdot(v, p @ v).real, np.vdot(v, sz @ v).real]

    record(0, psi)
    top = max(top, float(_top_pop_dense(psi, n)))
    dt = cfg.dt
    if isinstance(gen, _CallableGenerator):
        def rhs(t, v):
            return (-1j / hbar) * (gen(t) @ v)
    else:
        # one stacked product [static; terms] @ v per stage, no matrix assembly
        d = gen.dim
        stack = (-1j / hbar) * np.vstack([gen.static] + [m for _, m in gen.terms])
        fns = [fn for fn, _ in gen.terms]

        def rhs(t, v):
            y = stack @ v
            out = y[:d]
            for j, fn in enumerate(fns, start=1):
                out += fn(t) * y[j * d:(j + 1) * d]
            return out
    for step in range(n_steps):
        t = t0 + step * dt
        k1 = rhs(t, psi)
        k2 = rhs(t + dt / 2, psi + 0.5 * dt * k1)
        k3 = rhs(t + dt / 2, psi + 0.5 * dt * k2)
        k4 = rhs(t + dt, psi + dt * k3)
        psi = psi + (dt / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
        if (step + 1) % stride == 0:
            record((step + 1) // stride, psi)
            top = max(top, float(_top_pop_dense(psi, n)))
    norm = float(np.linalg.norm(psi))
    drift = abs(norm - 1.0) / max(t1 - t0, 1e-300)
    if drift > 1e-8:
        warnings.warn(f"unitary norm drift {drift:.2e} per unit time exceeds 1e-8", StepSizeWarning, stacklevel=2)
    times = t0 + dt * stride * np.arange(n_rec + 1)
    flag = _flag_truncation(top, cfg, "unitary run")
    return TrajectoryResult(times, rec[:, 0], rec[:, 1], rec[:, 2], np.zeros((n_rec, 2)), psi, n, dt, stride,
                            flag, top, None, (norm, norm), {"scheme": "rk4_unitary"})


# master equation ------------------------------------------------------------

class LindbladGenerator:
    """``G[rho] = K rho + rho K^dag + sum_j 2 L_j rho L_j^dag`` with
    ``K = -(i/hbar) H(t) - sum_j L_j^dag L_j``.

    Works on a single matrix or a stack ``(B, D, D)``.
    """

    def __init__(self, hamiltonian, lindblads: Sequence, hbar: float = 1.0):
        self.gen = _as_generator(hamiltonian)
        self.Ls = _matrices(lindblads)
        self.Lds = [L.conj().T for L in self.Ls]
        self.hbar = hbar
        ldl = sum((Ld @ L for L, Ld in zip(self.Ls, self.Lds)), np.zeros_like(self.gen.static))
        self._ldl = ldl
        self._callable = isinstance(self.gen, _CallableGenerator)
        if not self._callable:
            self.K0 = -1j / hbar * self.gen.static - ldl
            self.Kterms = [(fn, -1j / hbar * m) for fn, m in self.gen.terms]

    def K(self, t: float) -> np.ndarray:
        if self._callable:
            return -1j / self.hbar * self.gen(t) - self._ldl
        out = self.K0.copy()
        for fn, m in self.Kterms:
            out += fn(t) * m
        return out

    def dissipative_norm(self) -> float:
        return float(np.linalg.norm(self._ldl, 2) + sum(2 * np.linalg.norm(L, 2) ** 2 for L in self.Ls))

    def apply(self, K: np.ndarray, rho: np.ndarray) -> np.ndarray:
        a = K @ rho
        out = a + np.swapaxes(a, -1, -2).conj()
        for L, Ld in zip(self.Ls, self.Lds):
            out += 2.0 * (L @ rho @ Ld)
        return out

    def __call__(self, t: float, rho: np.ndarray) -> np.ndarray:
        return self.apply(self.K(t), rho)

    def rk4_step(self, t: float, rho: np.ndarray, dt: float, k_cache: Optional[tuple] = None):
        """One RK4 step; returns the new state and ``K(t+dt)`` for reuse."""
        k0, km, k1m = (k_cache if k_cache is not None else (self.K(t), None, None))
        km = self.K(t + dt / 2)
        k1m = self.K(t + dt)
        s1 = self.apply(k0, rho)
        s2 = self.apply(km, rho + 0.5 * dt * s1)
        s3 = self.apply(km, rho + 0.5 * dt * s2)
        s4 = self.apply(k1m, rho + dt * s3)
        return rho + (dt / 6) * (s1 + 2 * s2 + 2 * s3 + s4), k1m


def _symmetrize(rho: np.ndarray) -> np.ndarray:
    asym = float(np.max(np.abs(rho - np.swapaxes(rho, -1, -2).conj())))
    if asym > 1e-9:
        raise SolverError(f"density matrix lost Hermiticity: |rho - rho^H| = {asym:.3e}")
    return 0.5 * (rho + np.swapaxes(rho, -1, -2).conj())


def _rho_expect(rho: np.ndarray, op: np.ndarray) -> np.ndarray:
    # Tr(rho A) = sum_ij rho_ij A_ji
    return np.einsum("...ij,ji->...", rho, op).real


def _initial_rho(rho) -> np.ndarray:
    if isinstance(rho, DensityOperator):
        return np.array(rho.matrix)
    if isinstance(rho, CompositeState):
        return np.outer(rho.amplitudes, rho.amplitudes.conj())
    return np.array(rho, dtype=complex)


def evolve_master(rho, hamiltonian, lindblads: Sequence, t0: float, t1: float, cfg: SolverConfig,
                  ops: SystemOperators, hbar: float = 1.0, store_states: bool = True,
                  observables: Optional[dict] = None, check_positivity: bool = True) -> MasterResult:
    """Deterministic Lindblad master equation with RK4.

    Hermiticity is enforced by symmetrization after every step, provided the
    asymmetry is below 1e-9 beforehand.  The trace must stay within 1e-6.
    """
    return _evolve_density(rho, hamiltonian, lindblads, t0, t1, cfg, ops, hbar, store_states, observables,
                           check_positivity, meas_index=None, e_d=0.0, wiener=None)


def evolve_sme(rho, hamiltonian, lindblads: Sequence, t0: float, t1: float, cfg: SolverConfig,
               ops: SystemOperators, e_d: float, wiener: Optional[WienerPath] = None, meas_index: int = -1,
               hbar: float = 1.0, store_states: bool = False, observables: Optional[dict] = None) -> MasterResult:
    """Homodyne stochastic master equation conditioned on ``lindblads[meas_index]``.

    The deterministic part is the same RK4 Lindblad step as
    :func:`evolve_master`; the innovation term
    ``sqrt(2 e_d) ((L-<L>) rho + rho (L-<L>)^dag) dW`` is added with the
    increment of channel 1 of ``wiener`` (channel 0 is unused and zero).
    ``rho`` may be a stack ``(B, D, D)`` when ``wiener`` is a list of paths.

    With ``cfg.scheme == "kraus"`` the measured part ``e_d D[L]`` of the
    dissipator is removed from the RK4 step and applied, together with the
    innovation, as the normalized map ``rho -> M rho M^dag / Tr`` where
    ``M = 1 - e_d L^dag L dt + sqrt(2 e_d) L dy + e_d L^2 (dy^2 - dt)`` and
    ``dy = dW + sqrt(2 e_d) <L + L^dag> dt``.  This agrees with the Ito
    equation to first order and keeps ``rho`` positive.
    """
    if not 0.0 <= e_d <= 1.0:
        raise ConfigError(f"e_d must lie in [0, 1], got {e_d}")
    return _evolve_density(rho, hamiltonian, lindblads, t0, t1, cfg, ops, hbar, store_states, observables,
                           True, meas_index=meas_index, e_d=e_d, wiener=wiener)


def _evolve_density(rho, hamiltonian, lindblads, t0, t1, cfg, ops, hbar, store_states, observables,
                    check_positivity, meas_index, e_d, wiener):
    rho = _initial_rho(rho)
    batch = rho.ndim == 3
    tr0 = np.trace(rho, axis1=-2, axis2=-1).real
    if np.any(np.abs(tr0 - 1) > 1e-9):
        raise ConfigError("initial density matrix must have unit trace")
    stochastic = meas_index is not None
    kraus = stochastic and cfg.scheme == "kraus"
    det_lindblads = list(lindblads)
    if kraus:
        # the measured fraction of the dissipator moves into the Kraus update
        det_lindblads[meas_index] = math.sqrt(1.0 - e_d) * _matrices([lindblads[meas_index]])[0]
    gen = LindbladGenerator(hamiltonian, det_lindblads, hbar)
    n_steps = _n_steps(t0, t1, cfg)
    _check_step(gen.gen, gen.dissipative_norm(), cfg, hbar)
    n_b = rho.shape[0] if batch else 1
    if stochastic:
        if wiener is None:
            wiener = WienerPath.generate(cfg.seed, n_steps, 2, cfg.dt)
        paths = wiener if isinstance(wiener, (list, tuple)) else [wiener]
        if len(paths) != n_b:
            raise ConfigError(f"{len(paths)} Wiener paths for {n_b} states")
        for w in paths:
            if w.n_steps != n_steps or abs(w.dt - cfg.dt) > 1e-15 * max(1, cfg.dt):
                raise ConfigError("Wiener path does not match the step grid")
        ch = paths[0].n_channels - 1
        dws = np.stack([w.increments[:, ch] for w in paths], axis=1)  # (n_steps, B)
        L = _matrices([lindblads[meas_index]])[0]
        Ld = L.conj().T
        amp = math.sqrt(2.0 * e_d)
        milstein = cfg.scheme == "milstein_diag"
        if kraus:
            eye = np.eye(L.shape[0])
            ldl_m = e_d * (Ld @ L)
            l2 = e_d * (L @ L)
    n = ops.n_levels
    z, p, sz = ops.Z.matrix, ops.p.matrix, ops.Sz.matrix
    observables = observables or {}
    stride = cfg.record_stride
    n_rec = n_steps // stride
    rec = {k: np.empty((n_rec + 1,) + ((n_b,) if batch else ())) for k in ["z", "p", "sz", *observables]}
    states = np.empty((n_rec + 1,) + rho.shape, dtype=complex) if store_states else None
    min_eigs = np.empty((n_rec + 1,) + ((n_b,) if batch else ())) if check_positivity else None
    top = 0.0

    def record(k, r):
        nonlocal top
        rec["z"][k] = _rho_expect(r, z)
        rec["p"][k] = _rho_expect(r, p)
        rec["sz"][k] = _rho_expect(r, sz)
        for name, op in observables.items():
            rec[name][k] = _rho_expect(r, np.asarray(op.matrix if isinstance(op, OperatorMatrix) else op))
        if states is not None:
            states[k] = r
        diag = np.diagonal(r, axis1=-2, axis2=-1).real
        top = max(top, float(np.max(diag[..., n - 1] + diag[..., 2 * n - 1])))
        if min_eigs is not None:
            ev = np.linalg.eigvalsh(r)[..., 0]
            min_eigs[k] = ev
            worst = float(np.min(ev))
            if stochastic and worst < -1e-5:
                raise SolverError(f"positivity lost at t={t0 + k * stride * cfg.dt:.4g}: "
                                  f"min eigenvalue {worst:.3e} < -1e-5; reduce dt")
            if not stochastic and worst < -1e-7:
                warnings.warn(f"min eigenvalue {worst:.3e} below -1e-7", StepSizeWarning, stacklevel=4)

    record(0, rho)
    dt = cfg.dt
    kc = None
    for step in range(n_steps):
        t = t0 + step * dt
        if kc is None:
            kc = (gen.K(t), None, None)
        new, k_next = gen.rk4_step(t, rho, dt, kc)
        kc = (k_next, None, None)
        if kraus:
            dw = dws[step]
            lr = L @ new
            mean = 2.0 * np.trace(lr, axis1=-2, axis2=-1).real
            dy = dw + amp * mean * dt
            if batch:
                m_op = eye - ldl_m * dt + amp * dy[:, None, None] * L + (dy ** 2 - dt)[:, None, None] * l2
            else:
                m_op = eye - ldl_m * dt + amp * dy[0] * L + (dy[0] ** 2 - dt) * l2
            new = m_op @ new @ np.swapaxes(m_op, -1, -2).conj()
            tr = np.trace(new, axis1=-2, axis2=-1).real
            new = new / (tr[:, None, None] if batch else tr)
        elif stochastic:
            lr = L @ rho
            mean = 2.0 * np.trace(lr, axis1=-2, axis2=-1).real
            mean_b = mean[..., None, None] if batch else mean
            innov = lr + rho @ Ld - mean_b * rho
            dw = dws[step][:, None, None] if batch else dws[step, 0]
            new = new + amp * dw * innov
            if milstein:
                # derivative of the innovation map along itself
                li = L @ innov
                tr = 2.0 * np.trace(li, axis1=-2, axis2=-1).real
                tr = tr[..., None, None] if batch else tr
                d_inn = li + innov @ Ld - tr * rho - mean_b * innov
                new = new + 0.5 * amp ** 2 * (dw ** 2 - dt) * d_inn
        rho = _symmetrize(new)
        if (step + 1) % stride == 0:
            tr = np.trace(rho, axis1=-2, axis2=-1).real
            tol = 1e-6 * max(1.0, (step + 1) * dt) if stochastic else 1e-6
            if np.any(np.abs(tr - 1) > tol):
                raise SolverError(f"trace drifted to {tr} at t={t + dt:.4g}")
            record((step + 1) // stride, rho)
    times = t0 + dt * stride * np.arange(n_rec + 1)
    flag = _flag_truncation(top, cfg, "density-matrix run")
    extra = {k: v for k, v in rec.items() if k not in ("z", "p", "sz")}
    dw_rec = None
    if stochastic:
        summed = dws[: n_rec * stride].reshape(n_rec, stride, n_b).sum(axis=1)
        dw_rec = np.zeros((n_rec, 2) + ((n_b,) if batch else ()))
        dw_rec[:, 1] = summed if batch else summed[:, 0]
    return MasterResult(times, rec["z"], rec["p"], rec["sz"], states, rho, n, extra, min_eigs, top, flag,
                        dw_rec, dt, stride, 1 if stochastic else None,
                        {"scheme": "rk4_lindblad" + ("+euler_maruyama" if stochastic else ""), "e_d": e_d})


# quantum state diffusion ------------------------------------------------------

def _spin_block_diagonal(mats: Sequence[np.ndarray], n: int) -> bool:
    return all(not np.any(m[:n, n:]) and not np.any(m[n:, :n]) for m in mats)


class _QsdKernel:
    """Batched QSD drift on states stored as ``(n_blocks, block, B)``.

    When every operator is block diagonal in the spin index the two spin
    sectors are propagated as independent ``N x N`` blocks, halving the
    cost of the dense products.
    """

    def __init__(self, gen: TimeDependentOperator, lindblads: Sequence[np.ndarray], n: int, hbar: float,
                 observables: Sequence[np.ndarray]):
        self.gen = gen
        self.hbar = hbar
        self.n_ch = len(lindblads)
        mats = [gen.static] + [m for _, m in gen.terms] + list(lindblads) + list(observables)
        d = gen.static.shape[0]
        if _spin_block_diagonal(mats, n):
            self.nb, self.bs = 2, n
        else:
            self.nb, self.bs = 1, d

        def blocks(m):
            m = np.asarray(m, dtype=complex)
            if self.nb == 1:
                return m[None]
            return np.stack([m[:n, :n], m[n:, n:]])

        ldl = sum((L.conj().T @ L for L in lindblads), np.zeros((d, d), complex))
        self.m0 = blocks(-1j / hbar * gen.static - ldl)
        self.mterms = [(fn, blocks(-1j / hbar * m)) for fn, m in gen.terms]
        bs = self.bs
        self.w = np.zeros((self.nb, (1 + self.n_ch) * bs, bs), dtype=complex)
        for j, L in enumerate(lindblads):
            self.w[:, (j + 1) * bs:(j + 2) * bs] = blocks(L)
        self.obs = [blocks(o) for o in observables]

    def _m(self, t: float) -> np.ndarray:
        out = self.m0.copy()
        for fn, m in self.mterms:
            out += fn(t) * m
        return out

    def drift(self, t: float, psi: np.ndarray):
        """Return the drift and the stacked products ``[M psi; L_j psi]``."""
        bs = self.bs
        self.w[:, :bs] = self._m(t)
        y = np.matmul(self.w, psi)
        nrm = np.einsum("kib,kib->b", psi.conj(), psi).real
        out = y[:, :bs].copy()
        for j in range(self.n_ch):
            lp = y[:, (j + 1) * bs:(j + 2) * bs]
            r = np.einsum("kib,kib->b", psi.conj(), lp).real / nrm
            out += 2.0 * r * lp - (r * r) * psi
        return out, y

    def expect(self, psi: np.ndarray) -> np.ndarray:
        vals = [np.einsum("kib,kib->b", psi.conj(), np.matmul(o, psi)).real for o in self.obs]
        return np.array(vals)


def _qsd_batch(psi0: np.ndarray, gen: TimeDependentOperator, lindblads: list[np.ndarray], t0: float,
               n_steps: int, cfg: SolverConfig, ops: SystemOperators, dws: np.ndarray, hbar: float,
               accumulate_density: bool = False):
    """Integrate a batch of QSD trajectories.

    ``psi0`` has shape ``(D, B)``; ``dws`` has shape ``(n_steps, C, B)``.
    Returns per-record expectations ``(K+1, 3, B)``, final states ``(D, B)``,
    per-trajectory maximum top-level population, pre-normalization norm
    range and optionally the summed projectors ``(K+1, D, D)``.
    """
    n = ops.n_levels
    d, b = psi0.shape
    kern = _QsdKernel(gen, lindblads, n, hbar, [ops.Z.matrix, ops.p.matrix, ops.Sz.matrix])
    nb, bs = kern.nb, kern.bs
    psi = np.ascontiguousarray(psi0, dtype=complex).reshape(nb, bs, b).copy()
    stride = cfg.record_stride
    n_rec = n_steps // stride
    rec = np.empty((n_rec + 1, 3, b))
    rho_sum = np.zeros((n_rec + 1, d, d), dtype=complex) if accumulate_density else None
    top = np.zeros(b)
    top_idx = (slice(None), bs - 1) if nb == 2 else (0, [n - 1, 2 * n - 1])
    sq2 = math.sqrt(2.0)
    nmin, nmax = np.inf, -np.inf

    def record(k):
        nonlocal top
        rec[k] = kern.expect(psi)
        pops = np.abs(psi[top_idx]) ** 2
        top = np.maximum(top, pops.sum(axis=0))
        if rho_sum is not None:
            flat = psi.reshape(d, b)
            rho_sum[k] = flat @ flat.conj().T

    record(0)
    dt = cfg.dt
    for step in range(n_steps):
        t = t0 + step * dt
        k1, y = kern.drift(t, psi)
        k2, _ = kern.drift(t + dt / 2, psi + 0.5 * dt * k1)
        k3, _ = kern.drift(t + dt / 2, psi + 0.5 * dt * k2)
        k4, _ = kern.drift(t + dt, psi + dt * k3)
        new = psi + (dt / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
        dw = dws[step]
        for j in range(kern.n_ch):
            lp = y[:, (j + 1) * bs:(j + 2) * bs]
            r = np.einsum("kib,kib->b", psi.conj(), lp).real
            new += sq2 * (lp - r * psi) * dw[j]
        norms = np.sqrt(np.einsum("kib,kib->b", new.conj(), new).real)
        lo, hi = float(norms.min()), float(norms.max())
        nmin, nmax = min(nmin, lo), max(nmax, hi)
        if lo < 0.5 or hi > 2.0 or not np.isfinite(hi):
            raise SolverError(f"QSD norm left [0.5, 2] in one step at t={t:.4g} "
                              f"(range {lo:.3g}..{hi:.3g}); dt too large")
        psi = new / norms if cfg.renormalize_each_step else new
        if (step + 1) % stride == 0:
            record((step + 1) // stride)
    return rec, psi.reshape(d, b), top, (nmin, nmax), rho_sum


def _qsd_results(rec, final, top, norm_range, t0, cfg, ops, dws, seeds, meas_channel) -> list[TrajectoryResult]:
    n_steps = dws.shape[0]
    stride = cfg.record_stride
    n_rec = n_steps // stride
    times = t0 + cfg.dt * stride * np.arange(n_rec + 1)
    summed = dws[: n_rec * stride].reshape(n_rec, stride, dws.shape[1], dws.shape[2]).sum(axis=1)
    out = []
    for i in range(final.shape[1]):
        flag = bool(top[i] > cfg.truncation_threshold)
        dw = np.zeros((n_rec, 2))
        dw[:, : summed.shape[1]] = summed[:, :, i]
        out.append(TrajectoryResult(times, rec[:, 0, i].copy(), rec[:, 1, i].copy(), rec[:, 2, i].copy(), dw,
                                    final[:, i].copy(), ops.n_levels, cfg.dt, stride, flag, float(top[i]),
                                    meas_channel, norm_range,
                                    {"scheme": "rk4_drift+euler_maruyama", "seed": seeds[i]}))
    return out


def _prepare_qsd(hamiltonian, lindblads, t0, t1, cfg, hbar):
    if cfg.scheme in ("milstein_diag", "kraus"):
        raise ConfigError(f"the {cfg.scheme} scheme is not available for QSD; use euler_maruyama")
    gen = _as_generator(hamiltonian)
    if isinstance(gen, _CallableGenerator):
        raise ConfigError("QSD needs a TimeDependentOperator Hamiltonian")
    ls = _matrices(lindblads)
    if not 1 <= len(ls) <= 2:
        raise ConfigError("QSD supports one or two noise channels")
    n_steps = _n_steps(t0, t1, cfg)
    ldl = sum((L.conj().T @ L for L in ls), np.zeros_like(gen.static))
    _check_step(gen, float(np.linalg.norm(ldl, 2)), cfg, hbar)
    return gen, ls, n_steps


def evolve_qsd(psi, hamiltonian, lindblads: Sequence, t0: float, t1: float, cfg: SolverConfig,
               ops: SystemOperators, wiener: Optional[WienerPath] = None, hbar: float = 1.0,
               measured_channel: int = 1) -> TrajectoryResult:
    """One real-noise QSD trajectory (perfect detection, ``e_d = 1``).

    Parameters
    ----------
    psi : CompositeState or ndarray
        Normalized initial state.
    hamiltonian : TimeDependentOperator
    lindblads : sequence
        ``[L1, L2]``; channel ``j`` of ``wiener`` drives ``lindblads[j]``.
    wiener : WienerPath, optional
        Increments; generated from ``cfg.seed`` if omitted.
    """
    gen, ls, n_steps = _prepare_qsd(hamiltonian, lindblads, t0, t1, cfg, hbar)
    if wiener is None:
        wiener = WienerPath.generate(cfg.seed, n_steps, len(ls), cfg.dt)
    if wiener.n_steps != n_steps or wiener.n_channels != len(ls):
        raise ConfigError("Wiener path does not match the step grid or channel count")
    vec = np.asarray(psi.amplitudes if isinstance(psi, CompositeState) else psi, dtype=complex)
    if abs(np.linalg.norm(vec) - 1) > 1e-9:
        raise ConfigError("initial QSD state must be normalized")
    dws = wiener.increments[:, :, None]
    rec, final, top, nr, _ = _qsd_batch(vec[:, None], gen, ls, t0, n_steps, cfg, ops, dws, hbar)
    res = _qsd_results(rec, final, top, nr, t0, cfg, ops, dws, [cfg.seed], measured_channel)[0]
    _flag_truncation(res.max_top_population, cfg, "QSD trajectory")
    return res


def evolve_qsd_batch(psi, hamiltonian, lindblads: Sequence, t0: float, t1: float, cfg: SolverConfig,
                     ops: SystemOperators, wieners: Sequence[WienerPath], hbar: float = 1.0,
                     measured_channel: int = 1) -> list[TrajectoryResult]:
    """Integrate one QSD trajectory per Wiener path as a single batch.

    Every trajectory starts from ``psi``.  Used by convergence studies that
    need many paths on supplied (refined) Brownian increments.
    """
    gen, ls, n_steps = _prepare_qsd(hamiltonian, lindblads, t0, t1, cfg, hbar)
    for w in wieners:
        if w.n_steps != n_steps or w.n_channels != len(ls):
            raise ConfigError("Wiener path does not match the step grid or channel count")
    vec = np.asarray(psi.amplitudes if isinstance(psi, CompositeState) else psi, dtype=complex)
    dws = np.stack([w.increments for w in wieners], axis=2)
    batch = np.repeat(vec[:, None], len(wieners), axis=1)
    rec, final, top, nr, _ = _qsd_batch(batch, gen, ls, t0, n_steps, cfg, ops, dws, hbar)
    return _qsd_results(rec, final, top, nr, t0, cfg, ops, dws, [None] * len(wieners), measured_channel)


@dataclass(eq=False)
class EnsembleResult:
    """Trajectories of an ensemble plus averaged observables."""

    trajectories: list
    seeds: list
    times: np.ndarray
    mean_z: np.ndarray
    mean_p: np.ndarray
    mean_sz: np.ndarray
    mean_rho: Optional[np.ndarray] = None
    metadata: dict = field(default_factory=dict)

    @property
    def n_traj(self) -> int:
        return len(self.trajectories)

    @property
    def truncation_flags(self) -> list[bool]:
        return [tr.truncation_warning for tr in self.trajectories]


def _run_chunk(args):
    (psi0, gen, ls, t0, n_steps, cfg, ops, seeds, hbar, n_ch, accumulate, meas) = args
    dws = np.stack([WienerPath.generate(s, n_steps, n_ch, cfg.dt).increments for s in seeds], axis=2)
    batch = np.repeat(psi0[:, None], len(seeds), axis=1)
    rec, final, top, nr, rho_sum = _qsd_batch(batch, gen, ls, t0, n_steps, cfg, ops, dws, hbar, accumulate)
    return _qsd_results(rec, final, top, nr, t0, cfg, ops, dws, seeds, meas), rho_sum


def ensemble_run(initial, hamiltonian, lindblads: Sequence, t0: float, t1: float, cfg: SolverConfig,
                 ops: SystemOperators, n_traj: int, base_seed: int, workers: int = 1, hbar: float = 1.0,
                 accumulate_density: bool = False, measured_channel: int = 1) -> EnsembleResult:
    """Run ``n_traj`` QSD trajectories with seeds ``derived_seed(base_seed, k)``.

    Trajectories are grouped into fixed chunks of ``cfg.chunk_size`` that are
    integrated as one batch, so results are bitwise identical for any
    ``workers``.  A chunk containing a single trajectory performs exactly the
    arithmetic of :func:`evolve_qsd` with the same seed.
    """
    if n_traj < 1:
        raise ConfigError("n_traj must be at least 1")
    gen, ls, n_steps = _prepare_qsd(hamiltonian, lindblads, t0, t1, cfg, hbar)
    vec = np.asarray(initial.amplitudes if isinstance(initial, CompositeState) else initial, dtype=complex)
    seeds = [derived_seed(base_seed, k) for k in range(n_traj)]
    chunks = [seeds[i:i + cfg.chunk_size] for i in range(0, n_traj, cfg.chunk_size)]
    tasks = [(vec, gen, ls, t0, n_steps, cfg, ops, ch, hbar, len(ls), accumulate_density, measured_channel)
             for ch in chunks]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(_run_chunk, tasks))
    else:
        outputs = [_run_chunk(t) for t in tasks]
    trajs = [tr for out, _ in outputs for tr in out]
    mean_rho = None
    if accumulate_density:
        mean_rho = sum(rs for _, rs in outputs) / n_traj
    worst = max(tr.max_top_population for tr in trajs)
    n_flag = sum(tr.truncation_warning for tr in trajs)
    if n_flag:
        _flag_truncation(worst, cfg, f"ensemble ({n_flag}/{n_traj} trajectories)")
    return EnsembleResult(
        trajs, seeds, trajs[0].times,
        np.mean([tr.z for tr in trajs], axis=0), np.mean([tr.p for tr in trajs], axis=0),
        np.mean([tr.sz for tr in trajs], axis=0), mean_rho,
        {"base_seed": base_seed, "chunk_size": cfg.chunk_size, "n_truncation_flags": n_flag,
         "max_top_population": worst})


# convergence ------------------------------------------------------------------

@dataclass(frozen=True)
class ConvergenceReport:
    """Successive-refinement errors ``e_k = E sup_t |X_{dt_k} - X_{dt_{k+1}}|``.

    ``fitted_order`` is the least-squares slope of ``log2 e_k`` against
    ``-log2 dt_k``; ``order_stderr`` is its bootstrap standard error over
    paths.
    """

    dts: tuple
    errors: tuple
    ratios: tuple
    orders: tuple
    observable: str
    fitted_order: float = float("nan")
    order_stderr: float = float("nan")
    n_paths: int = 1

    @property
    def min_order(self) -> float:
        return min(self.orders)


def _fit_order(errors: np.ndarray) -> float:
    k = np.arange(errors.size)
    return float(-np.polyfit(k, np.log2(errors), 1)[0])


def step_doubling_check(runner: Callable, cfg: SolverConfig, t0: float, t1: float, n_halvings: int = 3,
                        n_paths: int = 1, n_channels: int = 2, seed: int = 0, observable: str = "z",
                        stochastic: bool = True, n_bootstrap: int = 500) -> ConvergenceReport:
    """Measure convergence by repeated step halving on a shared Brownian path.

    Parameters
    ----------
    runner : callable
        ``runner(cfg, wieners) -> list[TrajectoryResult]`` where ``wieners`` is a
        list of ``n_paths`` :class:`WienerPath` (``None`` if not stochastic).
    cfg : SolverConfig
        Coarsest configuration; its ``record_stride`` sets the comparison grid.
    n_halvings : int
        Number of refinements; ``n_halvings + 1`` runs give ``n_halvings``
        successive differences and ``n_halvings - 1`` ratios.
    """
    rng = np.random.default_rng(seed)
    n0 = _n_steps(t0, t1, cfg)
    paths = None
    if stochastic:
        paths = [WienerPath.generate(derived_seed(seed, k), n0, n_channels, cfg.dt) for k in range(n_paths)]
    series = []
    dts = []
    for level in range(n_halvings + 1):
        c = cfg.replace(dt=cfg.dt / 2 ** level, record_stride=cfg.record_stride * 2 ** level)
        res = runner(c, paths)
        series.append(np.array([getattr(r, observable) for r in res]))
        dts.append(c.dt)
        if stochastic and level < n_halvings:
            paths = [w.refine(rng) for w in paths]
    # per-path sup-norm differences, shape (n_halvings, n_paths)
    per_path = np.array([np.max(np.abs(series[k] - series[k + 1]), axis=-1) for k in range(n_halvings)])
    errors = per_path.mean(axis=1)
    ratios = [errors[k] / errors[k + 1] if errors[k + 1] > 0 else math.inf for k in range(n_halvings - 1)]
    orders = [math.log2(r) if r > 0 else -math.inf for r in ratios]
    fitted, stderr = float("nan"), float("nan")
    if n_halvings >= 2 and np.all(errors > 0):
        fitted = _fit_order(errors)
        m = per_path.shape[1]
        if m > 1:
            boot = rng.integers(0, m, size=(n_bootstrap, m))
            fits = [_fit_order(per_path[:, b].mean(axis=1)) for b in boot]
            stderr = float(np.std(fits, ddof=1))
    return ConvergenceReport(tuple(dts), tuple(float(e) for e in errors), tuple(ratios), tuple(orders), observable,
                             fitted, stderr, per_path.shape[1])


# full versus rotating-wave comparison -----------------------------------------

@dataclass(eq=False)
class CompareResult:
    """Paired ``<Z>`` series and position densities from the full and RWA runs."""

    times: np.ndarray
    z_full: np.ndarray
    z_rwa: np.ndarray
    max_rel_deviation: float
    density_times: np.ndarray
    z_grid: np.ndarray
    density_full: np.ndarray
    density_rwa: np.ndarray
    l1_distances: np.ndarray
    metadata: dict = field(default_factory=dict)


def _segmented_unitary(psi, gen, edges, cfg, ops, hbar):
    """Unitary run split at ``edges``; returns the joined record and the state at each edge."""
    zs, ts, states = [], [], [np.array(psi)]
    tops = []
    for a, b in zip(edges[:-1], edges[1:]):
        res = evolve_unitary(psi, gen, a, b, cfg, ops, hbar)
        psi = res.final_state
        ts.append(res.times if not ts else res.times[1:])
        zs.append(res.z if not zs else res.z[1:])
        states.append(np.array(psi))
        tops.append(res.max_top_population)
    return np.concatenate(ts), np.concatenate(zs), states, max(tops)


def compare_full_vs_rwa(params, profile, t_end: float, n_levels: int, dt_rwa: float, dt_full: float,
                        record_interval: float = 0.1, density_interval: float = 5.0,
                        z_grid: Optional[np.ndarray] = None, spin: str = "up",
                        max_steps: Optional[int] = None) -> CompareResult:
    """Integrate the full and rotating-wave Hamiltonians from the same state.

    The initial state is a storage-basis spin eigenstate times the oscillator
    ground state.  The full run uses its own step ``dt_full``, small enough to
    resolve the spin precession at ``lambda(t)/hbar``.

    Raises
    ------
    SolverError
        If the full run needs more than ``max_steps`` steps.
    """
    from .hilbert import position_density
    from .model import build_operators, full_generator, rwa_generator

    n_full = int(round(t_end / dt_full))
    if max_steps is not None and n_full > max_steps:
        raise SolverError(f"full-Hamiltonian run needs {n_full} steps, above the budget of {max_steps}")
    ops = build_operators(params, profile, n_levels)
    psi = np.zeros(ops.dim, dtype=complex)
    psi[0 if spin == "up" else n_levels] = 1.0
    edges = np.arange(0.0, t_end + 1e-9, density_interval)
    if edges[-1] < t_end - 1e-9:
        edges = np.append(edges, t_end)
    lam_max = float(np.max(np.hypot(profile.f(np.linspace(0, t_end, 4001)), params.epsilon)))
    cfg_r = SolverConfig(dt=dt_rwa, record_stride=max(1, int(round(record_interval / dt_rwa))),
                         energy_scale=params.hbar * params.omega_m)
    cfg_f = SolverConfig(dt=dt_full, record_stride=max(1, int(round(record_interval / dt_full))),
                         energy_scale=params.hbar * lam_max)
    t_r, z_r, st_r, top_r = _segmented_unitary(psi, rwa_generator(params, profile, ops), edges, cfg_r, ops,
                                               params.hbar)
    t_f, z_f, st_f, top_f = _segmented_unitary(psi, full_generator(params, profile, ops, t_end), edges, cfg_f,
                                               ops, params.hbar)
    if t_r.size != t_f.size or np.max(np.abs(t_r - t_f)) > 1e-9:
        raise SolverError("full and RWA records are not on a common grid")
    scale = float(np.max(np.abs(z_r)))
    dev = float(np.max(np.abs(z_f - z_r)) / scale) if scale > 0 else float(np.max(np.abs(z_f - z_r)))
    if z_grid is None:
        reach = math.sqrt(2 * n_levels + 1) * math.sqrt(params.hbar / (params.m * params.omega_m))
        z_grid = np.linspace(-reach, reach, 1601)
    dens_f = np.array([position_density(s, z_grid, params, n_levels) for s in st_f])
    dens_r = np.array([position_density(s, z_grid, params, n_levels) for s in st_r])
    l1 = np.trapezoid(np.abs(dens_f - dens_r), z_grid, axis=1)
    return CompareResult(t_r, z_f, z_r, dev, edges, z_grid, dens_f, dens_r, l1,
                         {"dt_rwa": dt_rwa, "dt_full": dt_full, "lambda_max": lam_max,
                          "max_top_population": max(top_r, top_f), "spin": spin})
