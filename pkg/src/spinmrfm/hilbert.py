"""Truncated Hilbert space for a spin-1/2 coupled to a harmonic oscillator.

The composite space is spin(2) ⊗ Fock(N) with the spin index slow and the
oscillator index fast, so amplitude ``s * N + n`` belongs to spin state ``s``
and Fock level ``n``.  Spin index 0 is the ``+ħ/2`` eigenstate of ``S_z'``.
All matrices are dense complex arrays.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
from scipy import stats

from .errors import TruncationError

HERMITIAN_TOL = 1e-12
NORM_TOL = 1e-9

ArrayLike = Union[np.ndarray, Sequence[complex]]


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=complex, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class FockBasis:
    """Truncated oscillator basis ``|0>, ..., |N-1>``."""

    n_levels: int

    def __post_init__(self):
        if int(self.n_levels) != self.n_levels or self.n_levels < 2:
            raise ValueError(f"n_levels must be an integer >= 2, got {self.n_levels!r}")
        object.__setattr__(self, "n_levels", int(self.n_levels))

    @property
    def composite_dim(self) -> int:
        return 2 * self.n_levels


@dataclass(frozen=True, eq=False)
class OperatorMatrix:
    """Immutable dense operator with an optional Hermiticity guarantee.

    Parameters
    ----------
    matrix : array_like
        Square complex matrix (2x2 spin, NxN oscillator or 2Nx2N composite).
    hermitian : bool
        If set, the matrix is checked against its conjugate transpose.
    label : str
        Free-form name used in diagnostics.
    """

    matrix: np.ndarray
    hermitian: bool = False
    label: str = ""

    def __post_init__(self):
        mat = _frozen(self.matrix)
        if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
            raise ValueError(f"operator must be a square matrix, got shape {mat.shape}")
        if self.hermitian:
            scale = max(1.0, float(np.max(np.abs(mat), initial=0.0)))
            err = float(np.max(np.abs(mat - mat.conj().T), initial=0.0))
            if err > HERMITIAN_TOL * scale:
                raise ValueError(f"operator {self.label!r} flagged Hermitian but |A - A^H| = {err:.3e}")
        object.__setattr__(self, "matrix", mat)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def dag(self) -> "OperatorMatrix":
        return OperatorMatrix(self.matrix.conj().T, self.hermitian, self.label + "^dag")

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self.matrix
        return self.matrix.astype(dtype)

    def _other(self, other):
        return other.matrix if isinstance(other, OperatorMatrix) else np.asarray(other)

    def __add__(self, other: "OperatorMatrix") -> "OperatorMatrix":
        herm = self.hermitian and isinstance(other, OperatorMatrix) and other.hermitian
        return OperatorMatrix(self.matrix + self._other(other), herm)

    def __sub__(self, other: "OperatorMatrix") -> "OperatorMatrix":
        herm = self.hermitian and isinstance(other, OperatorMatrix) and other.hermitian
        return OperatorMatrix(self.matrix - self._other(other), herm)

    def __neg__(self) -> "OperatorMatrix":
        return OperatorMatrix(-self.matrix, self.hermitian, self.label)

    def __mul__(self, scalar: complex) -> "OperatorMatrix":
        if isinstance(scalar, OperatorMatrix):
            raise TypeError("use @ for operator products")
        herm = self.hermitian and np.isreal(scalar)
        return OperatorMatrix(self.matrix * scalar, bool(herm), self.label)

    __rmul__ = __mul__

    def __matmul__(self, other):
        if isinstance(other, OperatorMatrix):
            return OperatorMatrix(self.matrix @ other.matrix)
        return self.matrix @ np.asarray(other)


@dataclass(frozen=True, eq=False)
class CompositeState:
    """Normalized pure state on spin ⊗ truncated oscillator.

    ``basis_tag`` documents that spin index 0/1 are the ``|v+(0)>``/``|v-(0)>``
    eigenstates of ``S_z'``.
    """

    amplitudes: np.ndarray
    n_levels: int
    basis_tag: str = "Sz'-eigenbasis |v+(0)>,|v-(0)>"

    def __post_init__(self):
        amps = _frozen(self.amplitudes).reshape(-1)
        if amps.size != 2 * self.n_levels:
            raise ValueError(f"expected {2 * self.n_levels} amplitudes, got {amps.size}")
        norm = np.linalg.norm(amps)
        if abs(norm - 1.0) > NORM_TOL:
            raise ValueError(f"state not normalized: |psi| = {norm:.12f}")
        object.__setattr__(self, "amplitudes", amps)

    @classmethod
    def from_parts(cls, spin: ArrayLike, oscillator: ArrayLike) -> "CompositeState":
        """Product state ``spin ⊗ oscillator``, renormalized."""
        spin = np.asarray(spin, dtype=complex).reshape(2)
        osc = np.asarray(oscillator, dtype=complex).reshape(-1)
        vec = np.kron(spin, osc)
        norm = np.linalg.norm(vec)
        if norm == 0:
            raise ValueError("zero state")
        return cls(vec / norm, osc.size)

    @classmethod
    def normalized(cls, amplitudes: ArrayLike, n_levels: int) -> "CompositeState":
        vec = np.asarray(amplitudes, dtype=complex).reshape(-1)
        return cls(vec / np.linalg.norm(vec), n_levels)

    def density(self) -> "DensityOperator":
        return DensityOperator(np.outer(self.amplitudes, self.amplitudes.conj()), self.n_levels)

    def spin_populations(self) -> np.ndarray:
        amps = self.amplitudes.reshape(2, self.n_levels)
        return np.sum(np.abs(amps) ** 2, axis=1)


@dataclass(frozen=True, eq=False)
class DensityOperator:
    """Density matrix on the composite space (Hermitian, unit trace)."""

    matrix: np.ndarray
    n_levels: int

    def __post_init__(self):
        mat = _frozen(self.matrix)
        d = 2 * self.n_levels
        if mat.shape != (d, d):
            raise ValueError(f"expected shape {(d, d)}, got {mat.shape}")
        asym = float(np.max(np.abs(mat - mat.conj().T)))
        if asym > NORM_TOL:
            raise ValueError(f"density matrix not Hermitian: {asym:.3e}")
        tr = np.trace(mat).real
        if abs(tr - 1.0) > NORM_TOL:
            raise ValueError(f"density matrix trace {tr:.12f} != 1")
        object.__setattr__(self, "matrix", mat)

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.matrix)[0])

    def spin_reduced(self) -> np.ndarray:
        """Partial trace over the oscillator (2x2)."""
        return partial_trace_oscillator(self.matrix, self.n_levels)

    def oscillator_reduced(self) -> np.ndarray:
        """Partial trace over the spin (NxN)."""
        return partial_trace_spin(self.matrix, self.n_levels)


def ladder_ops(basis: FockBasis) -> tuple[OperatorMatrix, OperatorMatrix]:
    """Lowering and raising operators on the truncated Fock space.

    Returns
    -------
    a, a_dag : OperatorMatrix
        ``a[i, i+1] = sqrt(i+1)``; ``a_dag`` is its conjugate transpose.
    """
    if not isinstance(basis, FockBasis):
        basis = FockBasis(basis)
    a = np.diag(np.sqrt(np.arange(1, basis.n_levels, dtype=float)), 1).astype(complex)
    return OperatorMatrix(a, label="a"), OperatorMatrix(a.conj().T, label="a_dag")


def number_op(basis: FockBasis) -> OperatorMatrix:
    return OperatorMatrix(np.diag(np.arange(basis.n_levels, dtype=float)), hermitian=True, label="n")


def position_momentum_ops(basis: FockBasis, params) -> tuple[OperatorMatrix, OperatorMatrix]:
    """Oscillator position ``Z`` and momentum ``p`` in the Fock basis.

    Parameters
    ----------
    basis : FockBasis
    params : object
        Anything with ``hbar``, ``m`` and ``omega_m`` attributes.
    """
    hbar, m, w = float(params.hbar), float(params.m), float(params.omega_m)
    if m <= 0 or w <= 0 or hbar <= 0:
        raise ValueError("hbar, m and omega_m must be positive")
    a, ad = ladder_ops(basis)
    z = np.sqrt(hbar / (2 * m * w)) * (a.matrix + ad.matrix)
    p = 1j * np.sqrt(hbar * m * w / 2) * (ad.matrix - a.matrix)
    return OperatorMatrix(z, True, "Z"), OperatorMatrix(p, True, "p")


def spin_ops(hbar: float = 1.0) -> tuple[OperatorMatrix, OperatorMatrix, OperatorMatrix]:
    """Spin-1/2 operators ``S_x', S_y', S_z'`` in the ``|v±(0)>`` basis."""
    sx = 0.5 * hbar * np.array([[0, 1], [1, 0]], dtype=complex)
    sy = 0.5 * hbar * np.array([[0, -1j], [1j, 0]], dtype=complex)
    sz = 0.5 * hbar * np.array([[1, 0], [0, -1]], dtype=complex)
    return (OperatorMatrix(sx, True, "Sx'"), OperatorMatrix(sy, True, "Sy'"),
            OperatorMatrix(sz, True, "Sz'"))


def tensor(spin_part, osc_part) -> OperatorMatrix:
    """Kronecker product ``spin ⊗ oscillator`` in the composite layout."""
    s = np.asarray(spin_part.matrix if isinstance(spin_part, OperatorMatrix) else spin_part)
    o = np.asarray(osc_part.matrix if isinstance(osc_part, OperatorMatrix) else osc_part)
    if s.shape != (2, 2):
        raise ValueError(f"spin factor must be 2x2, got {s.shape}")
    if o.ndim != 2 or o.shape[0] != o.shape[1]:
        raise ValueError(f"oscillator factor must be square, got {o.shape}")
    herm = all(isinstance(x, OperatorMatrix) and x.hermitian for x in (spin_part, osc_part))
    return OperatorMatrix(np.kron(s, o), herm)


def expectation(state, op) -> complex:
    """``<psi|A|psi>`` for a pure state or ``Tr(rho A)`` for a density operator.

    Raises
    ------
    ValueError
        On dimension mismatch, or if a Hermitian-flagged operator yields an
        imaginary part above 1e-10.
    """
    mat = op.matrix if isinstance(op, OperatorMatrix) else np.asarray(op)
    if isinstance(state, DensityOperator):
        rho = state.matrix
        if rho.shape != mat.shape:
            raise ValueError(f"dimension mismatch: rho {rho.shape} vs op {mat.shape}")
        val = complex(np.sum(rho.T * mat))
    else:
        psi = state.amplitudes if isinstance(state, CompositeState) else np.asarray(state, complex)
        if psi.shape[0] != mat.shape[1]:
            raise ValueError(f"dimension mismatch: state {psi.shape[0]} vs op {mat.shape}")
        val = complex(np.vdot(psi, mat @ psi))
    if isinstance(op, OperatorMatrix) and op.hermitian and abs(val.imag) > 1e-10:
        raise ValueError(f"Hermitian expectation has imaginary part {val.imag:.3e}")
    return val


def fock_state(n: int, basis: FockBasis) -> np.ndarray:
    if not 0 <= n < basis.n_levels:
        raise ValueError(f"level {n} outside basis of size {basis.n_levels}")
    vec = np.zeros(basis.n_levels, dtype=complex)
    vec[n] = 1.0
    return vec


def required_levels(mean_occupation: float, tol: float = 1e-8) -> int:
    """Smallest N whose Poisson tail beyond level N-1 is below ``tol``."""
    n = 2
    while stats.poisson.sf(n - 1, mean_occupation) > tol:
        n += 1
    return n


def coherent_state(alpha: complex, basis: FockBasis, tol: float = 1e-8) -> np.ndarray:
    """Truncated, renormalized coherent state ``|alpha>``.

    Raises
    ------
    TruncationError
        If the Poisson weight beyond the last retained level exceeds ``tol``;
        the message names the required number of levels.
    """
    nbar = abs(alpha) ** 2
    tail = float(stats.poisson.sf(basis.n_levels - 1, nbar)) if nbar > 0 else 0.0
    if tail > tol:
        raise TruncationError(
            f"coherent state |alpha|^2={nbar:.4g} loses weight {tail:.3e} > {tol:.1e} "
            f"at N={basis.n_levels}; need N >= {required_levels(nbar, tol)}")
    n = np.arange(basis.n_levels)
    if alpha == 0:
        return fock_state(0, basis)
    from scipy.special import gammaln
    logmag = -nbar / 2 + n * np.log(abs(alpha)) - 0.5 * gammaln(n + 1)
    vec = np.exp(logmag) * np.exp(1j * n * np.angle(alpha))
    return vec / np.linalg.norm(vec)


def thermal_occupations(basis: FockBasis, n_mean: float) -> np.ndarray:
    """Truncated, renormalized Bose-Einstein populations with mean ``n_mean``."""
    if n_mean <= 0:
        pops = np.zeros(basis.n_levels)
        pops[0] = 1.0
        return pops
    q = n_mean / (1 + n_mean)
    pops = q ** np.arange(basis.n_levels)
    return pops / pops.sum()


def partial_trace_oscillator(rho: np.ndarray, n_levels: int) -> np.ndarray:
    r = np.asarray(rho).reshape(2, n_levels, 2, n_levels)
    return np.einsum("injn->ij", r)


def partial_trace_spin(rho: np.ndarray, n_levels: int) -> np.ndarray:
    r = np.asarray(rho).reshape(2, n_levels, 2, n_levels)
    return np.einsum("sisj->ij", r)


def top_level_population(x: np.ndarray, n_levels: int) -> np.ndarray | float:
    """Population of Fock level N-1 summed over spin.

    ``x`` is a state vector ``(2N,)`` or a batch of columns ``(2N, B)``.
    Use :func:`top_level_population_rho` for density matrices.
    """
    x = np.asarray(x)
    idx = [n_levels - 1, 2 * n_levels - 1]
    pops = np.abs(x[idx]) ** 2
    return pops.sum(axis=0)


def top_level_population_rho(rho: np.ndarray, n_levels: int) -> float:
    rho = np.asarray(rho)
    return float(rho[n_levels - 1, n_levels - 1].real + rho[2 * n_levels - 1, 2 * n_levels - 1].real)


def hermite_functions(x: np.ndarray, n_levels: int) -> np.ndarray:
    """Normalized Hermite functions ``phi_n(x)``, shape ``(n_levels, len(x))``.

    Uses the stable three-term recurrence, valid for large ``n``.
    """
    x = np.asarray(x, dtype=float)
    out = np.empty((n_levels, x.size))
    out[0] = np.pi ** -0.25 * np.exp(-x ** 2 / 2)
    if n_levels > 1:
        out[1] = np.sqrt(2.0) * x * out[0]
    for n in range(1, n_levels - 1):
        out[n + 1] = np.sqrt(2.0 / (n + 1)) * x * out[n] - np.sqrt(n / (n + 1)) * out[n - 1]
    return out


def position_density(state, z: np.ndarray, params, n_levels: int | None = None) -> np.ndarray:
    """Position probability density ``p(z)`` summed over spin.

    Parameters
    ----------
    state : CompositeState, DensityOperator or ndarray
        Pure composite amplitudes ``(2N,)`` or a density matrix.
    z : ndarray
        Position grid in the units of ``params``.
    params : object
        Provides ``hbar``, ``m``, ``omega_m``.
    """
    z = np.asarray(z, dtype=float)
    x0 = np.sqrt(params.hbar / (params.m * params.omega_m))
    if isinstance(state, DensityOperator):
        n = state.n_levels
        phi = hermite_functions(z / x0, n)
        r = state.matrix.reshape(2, n, 2, n)
        dens = sum(np.einsum("ik,ij,jk->k", phi, r[s, :, s, :], phi) for s in range(2)).real
        return dens / x0
    amps = state.amplitudes if isinstance(state, CompositeState) else np.asarray(state, complex)
    n = n_levels or amps.size // 2
    phi = hermite_functions(z / x0, n)
    psi_z = amps.reshape(2, n) @ phi
    return np.sum(np.abs(psi_z) ** 2, axis=0) / x0
