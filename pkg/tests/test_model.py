import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad
from scipy.linalg import eigh

from spinmrfm import model
from spinmrfm.errors import ConfigError, RegimeWarning
from spinmrfm.hilbert import CompositeState, expectation, fock_state

from conftest import random_density


def test_params_validation():
    with pytest.raises(ConfigError, match="e_d"):
        model.PhysParams(e_d=1.5)
    with pytest.raises(ConfigError):
        model.PhysParams(kT=0.0)
    with pytest.raises(ConfigError):
        model.PhysParams(gamma_m=-1.0)
    with pytest.raises(ConfigError, match="number"):
        model.PhysParams(kT="1.0e4")
    assert isinstance(model.PhysParams(kT=5).kT, float)


def test_paper_coefficients(paper):
    params, _ = paper
    assert params.eta == 0.3
    assert params.signal_gain == pytest.approx(1900.0, rel=1e-12)
    assert params.constant_force == pytest.approx(700.0, rel=1e-12)
    assert params.meas_coefficient == pytest.approx(0.07, rel=1e-12)
    assert params.ell == pytest.approx(0.005)
    assert params.q_factor == pytest.approx(5e4)
    assert params.q_factor_alt == pytest.approx(1e5)


def test_regime_warnings():
    bad = model.PhysParams(gamma_c=0.5)
    with pytest.warns(RegimeWarning, match="bad cavity"):
        flags = bad.check_regimes()
    assert not flags["bad_cavity"]
    assert model.PhysParams(gamma_c=1e3).regime_flags()["high_temperature"]


def test_drive_values(paper):
    _, prof = paper
    assert prof.f(0.0) == -6000.0
    assert prof.f(20.0) == pytest.approx(0.0, abs=1e-9)
    assert prof.f(20.0 + math.pi / 2) == pytest.approx(1000.0)
    # both branches agree at the switch
    assert abs(prof.f0 + prof.slope * prof.t_switch) < 1e-9
    assert abs(prof.f(np.nextafter(20.0, 30.0))) < 1e-9
    np.testing.assert_allclose(prof.f(np.array([0.0, 10.0])), [-6000.0, -3000.0])
    with pytest.raises(ValueError):
        prof.f(-1.0)


def test_drive_rejects_discontinuity():
    with pytest.raises(ConfigError, match="discontinuous"):
        model.DriveProfile(f0=-6000, slope=100, t_switch=20)


def test_table_drive():
    prof = model.DriveProfile(kind="table", table_t=(0, 1, 2), table_f=(0, 2, 0))
    assert prof.f(0.5) == 1.0
    assert prof.df(1.5) == -2.0
    with pytest.raises(ValueError):
        prof.f(3.0)
    with pytest.raises(ConfigError):
        model.DriveProfile(kind="table", table_t=(0, 0), table_f=(1, 2))


def test_lambda_theta():
    p = model.PhysParams(epsilon=400.0)
    flat = model.DriveProfile(kind="table", table_t=(0, 100), table_f=(0, 0))
    lam, th = model.lambda_theta(p, flat, 1.0)
    assert lam == 400.0 and th == pytest.approx(math.pi / 2)
    lam0, _ = model.lambda_theta(p, model.DriveProfile(), 0.0)
    assert lam0 == pytest.approx(math.sqrt(36_160_000))
    assert lam0 == pytest.approx(6013.32, abs=5e-3)
    big = model.PhysParams(epsilon=1e9)
    lam, th = model.lambda_theta(big, model.DriveProfile(), 0.0)
    assert lam / 1e9 == pytest.approx(1.0, rel=1e-7)
    assert th == pytest.approx(math.pi / 2, abs=1e-5)


def test_accumulated_phase(paper):
    params, prof = paper
    frame = model.AdiabaticFrame(params, prof)
    assert frame.phase(0.0) == 0.0
    flat = model.DriveProfile(kind="table", table_t=(0, 50), table_f=(300, 300))
    const = model.AdiabaticFrame(params, flat)
    lam = math.hypot(300, params.epsilon)
    assert const.phase(7.3) == pytest.approx(lam * 7.3, rel=1e-12)
    # independent fine-grid trapezoid oracle
    t = np.linspace(0, 10, 200001)
    lam_t, _ = model.lambda_theta(params, prof, t)
    oracle = np.trapezoid(lam_t, t)
    assert frame.phase(10.0) == pytest.approx(oracle, rel=1e-6)
    np.testing.assert_allclose(frame.phase(np.array([10.0, 25.5])),
                               [oracle, model.accumulated_phase(frame, 25.5)])


def test_spin_decomposition_examples():
    assert model.spin_decomposition(1, 0, 0.0) == (1, 0)
    a, b = model.spin_decomposition(1, 0, math.pi / 2)
    assert a == pytest.approx(1 / math.sqrt(2)) and b == pytest.approx(-1 / math.sqrt(2))
    with pytest.raises(ValueError):
        model.spin_decomposition(1, 1, 0.3)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 2 * math.pi), st.floats(0, 2 * math.pi), st.floats(-math.pi, math.pi))
def test_spin_decomposition_unitary(chi, phi, theta0):
    a, b = math.cos(chi), math.sin(chi) * complex(math.cos(phi), math.sin(phi))
    ae, be = model.spin_decomposition(a, b, theta0)
    assert abs(ae) ** 2 + abs(be) ** 2 == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(-5000, 5000), st.floats(1.0, 1000.0))
def test_storage_basis_diagonalizes_spin_hamiltonian(f0, eps):
    params = model.PhysParams(epsilon=eps)
    prof = model.DriveProfile(kind="table", table_t=(0, 1), table_f=(f0, f0))
    lam, th = model.lambda_theta(params, prof, 0.0)
    sz = np.diag([0.5, -0.5])
    sx = np.array([[0, 0.5], [0.5, 0]])
    hs = f0 * sz - eps * sx
    u = model.storage_basis_vectors(th)
    np.testing.assert_allclose(u.conj().T @ hs @ u, np.diag([lam / 2, -lam / 2]), atol=1e-9 * lam)
    # the storage amplitudes reproduce the lab state
    a, b = 0.6, 0.8j
    np.testing.assert_allclose(u @ model.storage_from_lab(a, b, th), [a, b], atol=1e-12)


def test_full_hamiltonian_limits(paper):
    params, prof = paper
    ops = model.build_operators(params.replace(epsilon=1e-12, eta=0.0), model.DriveProfile(
        kind="table", table_t=(0, 1), table_f=(0, 0)), 6)
    zero = model.PhysParams(epsilon=1e-300, eta=0.0)
    h = model.full_generator(zero, model.DriveProfile(kind="table", table_t=(0, 1), table_f=(0, 0)), ops)(0.5)
    np.testing.assert_allclose(np.linalg.eigvalsh(h), np.repeat(np.arange(6) + 0.5, 2), atol=1e-9)
    ops = model.build_operators(params, prof, 6)
    ev = eigh(model.hamiltonian_full(params, prof, 0.0, ops).matrix, eigvals_only=True)
    lam0 = model.lambda_theta(params, prof, 0.0)[0]
    assert ev[-1] - ev[0] == pytest.approx(lam0, rel=2e-3)


def test_full_hamiltonian_decoupled_ladders():
    params = model.PhysParams(eta=0.0, epsilon=3.0)
    prof = model.DriveProfile(kind="table", table_t=(0, 1), table_f=(4.0, 4.0))
    ops = model.build_operators(params, prof, 5)
    ev = np.sort(np.linalg.eigvalsh(model.hamiltonian_full(params, prof, 0.2, ops).matrix))
    expect = np.sort(np.concatenate([np.arange(5) + 0.5 + 2.5, np.arange(5) + 0.5 - 2.5]))
    np.testing.assert_allclose(ev, expect, atol=1e-10)


def test_rwa_hamiltonian(paper):
    params, prof = paper
    ops = model.build_operators(params, prof, 6)
    np.testing.assert_allclose(model.hamiltonian_rwa(params, prof, 20.0, ops).matrix, ops.HZ.matrix, atol=1e-9)
    far = model.DriveProfile(kind="table", table_t=(0, 1), table_f=(-1e6, -1e6))
    h = model.hamiltonian_rwa(params, far, 0.5, ops).matrix
    coupling = h - ops.HZ.matrix
    np.testing.assert_allclose(coupling, 2 * params.eta * ops.Z.matrix @ ops.Sz.matrix, rtol=1e-6, atol=1e-9)
    # spin eigenstates of S_z' are conserved
    comm = h @ ops.Sz.matrix - ops.Sz.matrix @ h
    assert np.abs(comm).max() < 1e-12


def test_eff_reduces_to_rwa(paper):
    params, prof = paper
    quiet = params.replace(kappa=0.0, gamma_m=0.0)
    ops = model.build_operators(quiet, prof, 6)
    np.testing.assert_allclose(model.hamiltonian_eff(quiet, prof, 3.0, ops).matrix,
                               model.hamiltonian_rwa(quiet, prof, 3.0, ops).matrix, atol=1e-14)
    h = model.hamiltonian_eff(params, prof, 3.0, ops)
    assert np.abs(h.matrix - h.matrix.conj().T).max() < 1e-12
    dropped = model.hamiltonian_eff(params, prof, 3.0, ops, drop_constant_force=True).matrix
    np.testing.assert_allclose(h.matrix - dropped, params.constant_force * ops.Z.matrix, atol=1e-9)


def test_lindblad_operators_vanish(paper):
    params, prof = paper
    ops = model.build_operators(params, prof, 4)
    assert not np.any(model.lindblad_thermal(params.replace(gamma_m=0.0), ops).matrix)
    assert not np.any(model.lindblad_meas(params.replace(kappa=0.0), ops).matrix)
    np.testing.assert_allclose(model.lindblad_meas(params, ops).matrix, 0.07 * ops.Z.matrix)


def test_thermal_dissipator_identity(desk):
    params, prof = desk
    ops = model.build_operators(params, prof, 4)
    z, p = ops.Z.matrix, ops.p.matrix
    shift = 0.5 * params.gamma_m * (z @ p + p @ z)
    rng = np.random.default_rng(3)
    rho = random_density(rng, 8)
    lind = model.lindblad_dissipator(rho, [model.lindblad_thermal(params, ops)])
    cl = model.caldeira_leggett_dissipator(rho, params, z, p)
    np.testing.assert_allclose(lind + 1j * (rho @ shift - shift @ rho), cl, atol=1e-10)
    bare = model.caldeira_leggett_dissipator(rho, params, z, p, completion=False)
    assert np.abs(cl - bare).max() > 1e-4


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_dissipator_is_traceless_and_hermitian(seed):
    params, prof = model.PhysParams(gamma_m=0.1, kT=2.0, kappa=0.5, E_drive=3.0, gamma_c=10.0), model.DriveProfile()
    ops = model.build_operators(params, prof, 4)
    rho = random_density(np.random.default_rng(seed), 8)
    d = model.lindblad_dissipator(rho, [model.lindblad_thermal(params, ops), model.lindblad_meas(params, ops)])
    assert abs(np.trace(d)) < 1e-10
    assert np.abs(d - d.conj().T).max() < 1e-10


def test_adiabaticity(paper):
    params, prof = paper
    flat = model.DriveProfile(kind="table", table_t=(0, 10), table_f=(5, 5))
    assert model.adiabaticity_report(params, flat, (0, 10)).max_ratio == 0.0
    rep = model.adiabaticity_report(params, prof, (0, 20))
    assert rep.max_ratio == pytest.approx(0.75 / 400, rel=1e-6)
    assert rep.t_at_max == pytest.approx(20.0)
    rep = model.adiabaticity_report(params, prof, (0, 100))
    assert rep.max_ratio == pytest.approx(1000 / 400 ** 2, rel=1e-9)
    assert rep.adiabatic
    assert set(rep.to_dict()) == {"max_ratio", "t_at_max", "threshold", "adiabatic"}


def test_expected_amplitude(desk):
    params, prof = desk
    amp = model.expected_amplitude(params, prof)
    # resonant harmonic of f/lambda over one period, by quadrature
    w, eps = prof.frequency, params.epsilon
    g = lambda t: prof.amplitude * math.sin(w * t) / math.hypot(prof.amplitude * math.sin(w * t), eps)
    c1 = quad(lambda t: g(t) * math.sin(w * t), 0, 2 * math.pi / w, limit=200)[0] * w / math.pi
    assert amp == pytest.approx(params.eta * abs(c1) / (2 * params.gamma_m), rel=1e-6)
    # bounded by the square-wave limit
    assert amp < params.eta * (4 / math.pi) / (2 * params.gamma_m)
    assert model.expected_amplitude(params.replace(gamma_m=0.0), prof) == math.inf


def test_initial_expectation_in_storage_basis(desk):
    params, prof = desk
    ops = model.build_operators(params, prof, 8)
    up = CompositeState.from_parts([1, 0], fock_state(0, ops.basis))
    assert expectation(up, ops.Sz).real == pytest.approx(0.5)
    # the lab-frame spin of |v+(0)> points against the effective field
    lab = expectation(up, ops.Sz_lab).real
    assert lab == pytest.approx(-0.5 * math.cos(ops.theta0), abs=1e-12)
