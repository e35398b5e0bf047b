"""Lindblad propagation, steady states, and regression correlations."""
import numpy as np
import pytest

from kpo import (
    MHz,
    DegenerateSteadyStateError,
    DriveProfile,
    FockSpace,
    KpoParams,
    cat_state,
    coherent_state,
    fock_state,
    liouvillian_matrix,
    lindblad_rhs,
    number_op,
    propagate,
    propagate_expm,
    steady_psd,
    steady_state,
    two_time_correlation,
)

PARAMS = KpoParams.from_mhz(24.6, 17.3, 1.1)


def test_liouvillian_matches_elementwise_rhs():
    space = FockSpace(6)
    rng = np.random.default_rng(11)
    m = rng.normal(size=(6, 6)) + 1j * rng.normal(size=(6, 6))
    rho = m @ m.conj().T
    rho /= np.trace(rho)
    from kpo import kpo_hamiltonian
    h = kpo_hamiltonian(space, PARAMS, 3.0)
    direct = lindblad_rhs(rho, h, PARAMS.kappa)
    lio = liouvillian_matrix(space, PARAMS, 3.0)
    via_matrix = (lio @ rho.reshape(-1)).reshape(6, 6)
    np.testing.assert_allclose(via_matrix, direct, atol=1e-12)


def test_fock_ladder_decay_closed_form():
    # diagonal amplitude-damping cascade from |2>: p2 = e^{-2kt},
    # p1 = 2(e^{-kt} - e^{-2kt}); Kerr and detuning cannot touch populations
    # of a number-diagonal state.
    space = FockSpace(8)
    rho0 = fock_state(space, 2).to_density_matrix()
    times = np.linspace(0.0, 0.4, 9)
    traj = propagate(rho0, PARAMS, 0.0, times[-1], record=times)
    k = PARAMS.kappa
    for t, state in zip(times, traj.states):
        pops = state.populations()
        assert pops[2] == pytest.approx(np.exp(-2 * k * t), abs=5e-8)
        assert pops[1] == pytest.approx(
            2 * (np.exp(-k * t) - np.exp(-2 * k * t)), abs=5e-8)


def test_kerr_revival_without_loss():
    # kappa = 0, beta = 0: the Kerr phase pattern is 2pi-periodic in chi t,
    # so the coherent state revives exactly at t = 2pi/chi.
    params = KpoParams(detuning=0.0, chi=40.0, kappa=0.0)
    space = FockSpace(25)
    psi = coherent_state(space, 1.3)
    rho0 = psi.to_density_matrix()
    t_rev = 2 * np.pi / params.chi
    traj = propagate(rho0, params, 0.0, t_rev, record=2,
                     rtol=1e-10, atol=1e-12)
    overlap = np.real(psi.amplitudes.conj() @ traj.final().mat
                      @ psi.amplitudes)
    assert overlap == pytest.approx(1.0, abs=1e-6)


def test_propagate_trace_positivity_properties():
    rng = np.random.default_rng(3)
    space = FockSpace(10)
    for _ in range(20):
        amps = rng.normal(size=10) + 1j * rng.normal(size=10)
        psi = amps / np.linalg.norm(amps)
        rho0 = np.outer(psi, psi.conj())
        from kpo import DensityMatrix
        traj = propagate(DensityMatrix(space, rho0), PARAMS,
                         float(rng.uniform(0, 60)), 0.15, record=4)
        for state in traj.states:
            assert abs(np.trace(state.mat) - 1) < 1e-9
            assert np.linalg.eigvalsh(state.mat).min() > -1e-8


def test_expm_stepper_matches_adaptive_integrator():
    space = FockSpace(14)
    rho0 = fock_state(space, 0).to_density_matrix()
    times = np.linspace(0.0, 0.3, 7)
    beta = 5.8 * MHz
    a = propagate(rho0, PARAMS, beta, times[-1], record=times,
                  rtol=1e-10, atol=1e-12).expectations["n"]
    b = propagate_expm(rho0, PARAMS, beta, times).expectations["n"]
    np.testing.assert_allclose(a, b, atol=1e-8)


def test_propagate_uniform_grid_required_by_expm():
    space = FockSpace(6)
    rho0 = fock_state(space, 0).to_density_matrix()
    from kpo import ValidationError
    with pytest.raises(ValidationError):
        propagate_expm(rho0, PARAMS, 1.0, np.array([0.0, 0.1, 0.35]))


def test_steady_state_annihilates_liouvillian_and_matches_propagation():
    space = FockSpace(16)
    beta = 8.0 * MHz
    rho_ss = steady_state(space, PARAMS, beta)
    lio = liouvillian_matrix(space, PARAMS, beta)
    assert np.linalg.norm(lio @ rho_ss.mat.reshape(-1)) < 1e-7 * \
        np.linalg.norm(lio, ord=np.inf)
    # long propagation from vacuum lands on the same state
    rho0 = fock_state(space, 0).to_density_matrix()
    # slowest relaxation mode sits below kappa, so 12/kappa leaves ~3e-5
    final = propagate(rho0, PARAMS, beta, 12.0 / PARAMS.kappa,
                      record=2).final()
    assert np.linalg.norm(final.mat - rho_ss.mat) < 1e-4


def test_steady_state_raises_without_loss():
    with pytest.raises(DegenerateSteadyStateError):
        steady_state(FockSpace(8), KpoParams(detuning=1.0, chi=1.0, kappa=0.0),
                     1.0)


def test_transient_correlation_zero_lag_closed_form():
    # photon loss gives <n(t)> = <n(0)> e^{-kappa t} exactly, for any chi, so
    # the t-integrated correlation at tau = 0 must equal <n(0)> / kappa
    space = FockSpace(10)
    rho0 = coherent_state(space, 1.0).to_density_matrix()
    rel = KpoParams(detuning=0.0, chi=PARAMS.chi, kappa=PARAMS.kappa)
    rec = two_time_correlation(rho0, rel, 0.0, taus=np.linspace(0, 0.02, 5))
    n0 = float(rho0.populations() @ np.arange(10))
    assert np.real(rec.values[0]) == pytest.approx(n0 / rel.kappa, rel=1e-4)


def test_steady_correlation_zero_lag_is_steady_occupation():
    space = FockSpace(12)
    beta = 4.0 * MHz
    rec = two_time_correlation(None, PARAMS, beta, mode="steady", space=space,
                               taus=np.linspace(0, 0.02, 5))
    n_ss = float(np.real(np.trace(number_op(space).mat
                                  @ steady_state(space, PARAMS, beta).mat)))
    assert np.real(rec.values[0]) == pytest.approx(n_ss, rel=1e-6)


def test_steady_psd_sum_rule_and_two_peak_separation():
    space = FockSpace(20)
    params = KpoParams.from_mhz(11.2, 17.3, 1.1)
    beta = 0.12 * abs(params.detuning) / 2
    span = 2.2 * abs(params.detuning) + 20 * params.kappa
    freqs = np.linspace(-span, span, 3001)
    spec = steady_psd(space, params, beta, freqs)
    assert spec.min() > -1e-10
    n_ss = float(np.real(np.trace(number_op(space).mat
                                  @ steady_state(space, params, beta).mat)))
    integral = np.trapezoid(spec, freqs) / (2 * np.pi)
    assert integral == pytest.approx(params.kappa * n_ss, rel=2e-2)
    # weak-drive spectrum: two peaks split by 2 Delta within kappa
    pk = freqs[np.argmax(spec)]
    other = freqs[np.argmax(np.where(freqs * pk < 0, spec, -np.inf))]
    assert abs(abs(pk - other) - 2 * abs(params.detuning)) < params.kappa
