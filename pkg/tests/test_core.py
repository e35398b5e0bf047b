"""Fock-space primitives: operators, states, parameter containers, and the
circuit reduction."""
import math

import numpy as np
import pytest

from kpo import (
    GHz,
    MHz,
    CircuitParams,
    DriveProfile,
    FockSpace,
    KpoParams,
    TruncationWarning,
    ValidationError,
    annihilation_op,
    cat_state,
    circuit_to_kpo,
    coherent_state,
    creation_op,
    displacement_op,
    flux_tuning,
    fock_state,
    identity_op,
    kpo_hamiltonian,
    number_op,
    parity_op,
    thermal_state,
)


def test_ladder_commutator_below_truncation_edge():
    space = FockSpace(12)
    a = annihilation_op(space).mat
    comm = a @ a.conj().T - a.conj().T @ a
    # truncation corrupts only the (d-1, d-1) entry, which must equal -(d-1)
    np.testing.assert_allclose(comm[:-1, :-1], np.eye(11), atol=1e-13)
    assert comm[-1, -1] == pytest.approx(-(12 - 1))


def test_number_and_parity_operators():
    space = FockSpace(9)
    n = number_op(space).mat
    np.testing.assert_allclose(np.diag(n), np.arange(9))
    p = parity_op(space).mat
    np.testing.assert_allclose(np.diag(p), (-1.0) ** np.arange(9))
    np.testing.assert_allclose(p @ p, identity_op(space).mat, atol=0)


def test_displacement_is_unitary_and_displaces_vacuum():
    space = FockSpace(40)
    alpha = 1.3 - 0.4j
    d = displacement_op(space, alpha).mat
    np.testing.assert_allclose(d @ d.conj().T, np.eye(40), atol=1e-10)
    moved = d @ fock_state(space, 0).amplitudes
    np.testing.assert_allclose(moved, coherent_state(space, alpha).amplitudes,
                               atol=1e-10)


def test_displacement_truncation_check_warns():
    with pytest.warns(TruncationWarning):
        displacement_op(FockSpace(6), 2.5)
    # check="none" silences it, check="raise" escalates
    displacement_op(FockSpace(6), 2.5, check="none")
    with pytest.raises(ValidationError):
        displacement_op(FockSpace(6), 2.5, check="raise")


def test_coherent_state_poisson_populations():
    space = FockSpace(30)
    alpha = 1.4
    pops = coherent_state(space, alpha).populations()
    n = np.arange(30)
    expected = np.exp(-alpha**2) * alpha ** (2 * n) / \
        np.array([math.factorial(int(k)) for k in n], dtype=float)
    np.testing.assert_allclose(pops, expected, atol=1e-12)
    assert pops @ n == pytest.approx(alpha**2, rel=1e-10)


def test_cat_state_normalization_and_parity():
    space = FockSpace(25)
    for sign in (+1, -1):
        cat = cat_state(space, 1.2, sign)
        assert np.linalg.norm(cat.amplitudes) == pytest.approx(1.0, abs=1e-12)
        pops = cat.populations()
        odd = pops[1::2].sum() if sign == +1 else pops[0::2].sum()
        assert odd < 1e-12      # even cat holds only even Fock levels
    with pytest.raises(ValidationError):
        cat_state(space, 0.0, -1)


def test_thermal_state_geometric_ratio():
    space = FockSpace(40)
    nbar = 0.7
    pops = np.real(np.diag(thermal_state(space, nbar).mat))
    ratios = pops[1:10] / pops[:9]
    np.testing.assert_allclose(ratios, nbar / (1 + nbar), rtol=1e-10)
    assert pops.sum() == pytest.approx(1.0, abs=1e-12)


def test_hamiltonian_matrix_elements_by_hand():
    # H = Delta n - (chi/2) n(n-1) + beta (a^2 + a+^2) checked entry by entry
    space = FockSpace(4)
    params = KpoParams(detuning=3.0, chi=2.0, kappa=0.0)
    h = kpo_hamiltonian(space, params, beta=0.5).mat
    diag = [0.0, 3.0, 2 * 3.0 - 2.0, 3 * 3.0 - 3 * 2.0]
    np.testing.assert_allclose(np.diag(h), diag, atol=1e-14)
    assert h[0, 2] == pytest.approx(0.5 * np.sqrt(2.0))
    assert h[1, 3] == pytest.approx(0.5 * np.sqrt(6.0))
    np.testing.assert_allclose(h, h.conj().T, atol=0)


def test_params_validation_and_units():
    with pytest.raises(ValidationError):
        KpoParams(detuning=0.0, chi=-1.0, kappa=0.1)
    with pytest.raises(ValidationError):
        KpoParams(detuning=0.0, chi=1.0, kappa=-0.1)
    p = KpoParams.from_mhz(-6.7, 17.3, 1.1)
    assert p.detuning == pytest.approx(-6.7 * 2 * np.pi)
    assert p.chi == pytest.approx(17.3 * 2 * np.pi)


def test_circuit_reduction_reproduces_design_frequency():
    circuit = CircuitParams(e_c=1.053, e_j_max=82.79, n_squids=10)
    derived = circuit_to_kpo(circuit)
    # bare frequency within 0.5% of the 8.35 GHz design value
    assert abs(derived.omega_c_bare / GHz - 8.35) / 8.35 < 5e-3
    assert derived.chi / GHz == pytest.approx(1.053 / 100)
    # flux modulation produces a proportional drive rate
    pumped = circuit_to_kpo(CircuitParams(e_c=1.053, e_j_max=82.79,
                                          n_squids=10, delta_e_j=1.0))
    assert pumped.beta > 0
    assert pumped.omega_c_bare == pytest.approx(derived.omega_c_bare)


def test_flux_tuning_curve():
    assert flux_tuning(10.0, 0.0) == pytest.approx(10.0)
    assert flux_tuning(10.0, 0.5) == pytest.approx(0.0, abs=1e-6)
    third = flux_tuning(10.0, 1.0 / 3.0)
    assert third == pytest.approx(10.0 * np.sqrt(0.5))


def test_drive_profile_shapes():
    ramp = DriveProfile.sin2_ramp(2.0, 0.022)
    assert ramp(0.0) == pytest.approx(0.0)
    assert ramp(0.011) == pytest.approx(1.0)          # sin^2(pi/4) = 1/2
    assert ramp(0.022) == pytest.approx(2.0)
    assert ramp(1.0) == pytest.approx(2.0)            # held at the top
    hold = DriveProfile.ramp_hold(2.0, 0.022, 0.010)
    assert hold(0.030) == pytest.approx(2.0)
    assert hold(0.040) == pytest.approx(0.0)
    table = DriveProfile.sampled([0.0, 1.0], [0.0, 4.0])
    assert table(0.25) == pytest.approx(1.0)
    with pytest.raises(ValidationError):
        DriveProfile.sampled([0.0, 0.0], [1.0, 2.0])
    with pytest.raises(ValidationError):
        DriveProfile(kind="wiggle")


def test_density_matrix_and_state_guards():
    space = FockSpace(5)
    psi = fock_state(space, 2)
    rho = psi.to_density_matrix()
    assert rho.populations()[2] == pytest.approx(1.0)
    with pytest.raises(ValidationError):
        fock_state(space, 7)
