"""Calibration, forward model, and convex reconstruction round trips."""
import json
import math

import numpy as np
import pytest

from kpo import (
    CalibrationError,
    CalibrationResult,
    DensityMatrix,
    FockSpace,
    TomographyDataset,
    ValidationError,
    calibrate_pulses,
    cat_state,
    coherent_state,
    default_displacement_grid,
    density_matrix_project,
    fidelity,
    fock_state,
    parity_op,
    parity_symmetry_check,
    poisson_tails,
    predict_bin_powers,
    reconstruct_state,
    synthesize_dataset,
)

TRUE_CONVERSION = 0.92
TRUE_GAINS = np.array([1.03, 0.98, 1.01, 0.97])
VACUUM = fock_state(FockSpace(2), 0).to_density_matrix()


def _amplitude_scan():
    return np.linspace(0.2, 2.2, 9) / TRUE_CONVERSION


def test_poisson_tails_match_direct_summation():
    mu = np.array([0.3, 1.0, 2.7])
    got = poisson_tails(mu, 4)
    for j in range(1, 5):
        head = sum(np.exp(-mu) * mu ** k / math.factorial(k) for k in range(j))
        assert np.abs(got[j - 1] - (1.0 - head)).max() < 1e-14


def test_displaced_vacuum_powers_are_poisson_tails():
    # operator route through the truncated displacement vs the closed form
    cal = CalibrationResult.ideal(4)
    for v in (0.3, 0.8 + 0.4j, 1.5):
        powers = predict_bin_powers(VACUUM, v, cal)
        expected = poisson_tails(abs(v) ** 2, 4)
        assert np.abs(powers - expected).max() < 1e-12


def test_calibration_recovers_truth_noiseless():
    true_cal = CalibrationResult(TRUE_CONVERSION, TRUE_GAINS, 0.0)
    ds = synthesize_dataset(VACUUM, _amplitude_scan(), cal=true_cal)
    fit = calibrate_pulses(ds)
    assert abs(fit.conversion - TRUE_CONVERSION) < 1e-7
    assert np.abs(fit.gains - TRUE_GAINS).max() < 1e-7
    assert fit.residual < 1e-14


def test_calibration_tolerates_percent_noise():
    true_cal = CalibrationResult(TRUE_CONVERSION, TRUE_GAINS, 0.0)
    ds = synthesize_dataset(VACUUM, _amplitude_scan(), cal=true_cal,
                            noise_sigma=0.01, seed=3)
    fit = calibrate_pulses(ds)
    assert abs(fit.conversion - TRUE_CONVERSION) / TRUE_CONVERSION < 0.03
    assert np.abs(fit.gains / TRUE_GAINS - 1.0).max() < 0.03


def test_calibration_refuses_single_amplitude():
    volts = np.full(8, 1.3)
    ds = synthesize_dataset(VACUUM, volts)
    with pytest.raises(CalibrationError, match="single-amplitude"):
        calibrate_pulses(ds)


def test_calibration_warns_on_few_amplitudes():
    ds = synthesize_dataset(VACUUM, np.array([0.5, 1.0, 1.5]))
    with pytest.warns(UserWarning, match="poorly conditioned"):
        calibrate_pulses(ds)


def test_projection_is_idempotent_and_feasible():
    rng = np.random.default_rng(11)
    par = parity_op(FockSpace(8)).mat
    for trial in range(20):
        raw = (rng.normal(size=(8, 8)) + 1j * rng.normal(size=(8, 8)))
        use_parity = trial % 2 == 0
        proj = density_matrix_project(raw, par if use_parity else None)
        assert abs(np.trace(proj) - 1.0) < 1e-10
        assert np.abs(proj - proj.conj().T).max() < 1e-12
        assert np.linalg.eigvalsh(proj).min() > -1e-10
        again = density_matrix_project(proj, par if use_parity else None)
        assert np.abs(again - proj).max() < 1e-10
        if use_parity:
            assert np.abs(par @ proj @ par - proj).max() < 1e-10


@pytest.mark.filterwarnings("ignore::kpo.exceptions.TruncationWarning")
def test_roundtrip_coherent_state():
    rho = coherent_state(FockSpace(10), 1.0).to_density_matrix()
    ds = synthesize_dataset(rho)
    rec = reconstruct_state(ds, dim=10)
    assert rec.converged
    assert fidelity(rec.rho_est, rho) > 0.999


def test_roundtrip_cat_with_parity_constraint():
    rho = cat_state(FockSpace(12), 1.2, +1).to_density_matrix()
    ds = synthesize_dataset(rho)
    rec = reconstruct_state(ds, dim=12, parity=True)
    assert rec.converged
    assert rec.parity_constrained
    assert fidelity(rec.rho_est, rho) > 0.9999
    # estimate respects the symmetry it was constrained to
    par = parity_op(rec.rho_est.space).mat
    assert np.abs(par @ rec.rho_est.mat @ par - rec.rho_est.mat).max() < 1e-8


def test_parity_constraint_matches_unconstrained_when_data_suffice():
    rho = cat_state(FockSpace(12), 1.2, +1).to_density_matrix()
    grid = default_displacement_grid(n_phases=24, amplitudes=(0.5, 1.0))
    ds = synthesize_dataset(rho, grid)
    on = reconstruct_state(ds, dim=12, parity=True)
    off = reconstruct_state(ds, dim=12, parity=False)
    assert np.abs(on.rho_est.mat - off.rho_est.mat).max() < 1e-10


def test_reconstruction_refuses_underdetermined_problem():
    rho = cat_state(FockSpace(12), 1.2, +1).to_density_matrix()
    ds = synthesize_dataset(rho)   # 32 points x 4 bins = 128 < 143
    with pytest.raises(ValidationError, match="cannot determine"):
        reconstruct_state(ds, dim=12, parity=False)


def test_zero_data_reconstructs_vacuum():
    ds0 = synthesize_dataset(VACUUM)
    zero = TomographyDataset(ds0.voltages, np.zeros_like(ds0.bin_powers),
                             4, 0.0, None, ds0.calibration)
    rec = reconstruct_state(zero, dim=10, parity=True)
    assert np.real(rec.rho_est.mat[0, 0]) > 1.0 - 1e-8


def test_joint_power_gain_rescaling_is_invisible():
    # multiplying every bin power and every gain by s must not move the
    # estimate; the reported loss picks up exactly s^2
    rho = cat_state(FockSpace(12), 1.2, +1).to_density_matrix()
    cal = CalibrationResult.ideal(4)
    ds = synthesize_dataset(rho, cal=cal)
    s = 3.7
    scaled_cal = CalibrationResult(cal.conversion, cal.gains * s, 0.0)
    scaled = TomographyDataset(ds.voltages, ds.bin_powers * s, 4, 0.0, None,
                               scaled_cal)
    r1 = reconstruct_state(ds, dim=12, parity=True)
    r2 = reconstruct_state(scaled, dim=12, parity=True)
    assert np.abs(r1.rho_est.mat - r2.rho_est.mat).max() < 1e-12
    assert abs(r2.loss / max(r1.loss, 1e-300) - s ** 2) < 1e-3 * s ** 2


def test_iteration_cap_reports_instead_of_raising():
    rho = coherent_state(FockSpace(8), 0.8).to_density_matrix()
    ds = synthesize_dataset(rho)
    with pytest.warns(UserWarning, match="iteration cap"):
        rec = reconstruct_state(ds, dim=8, max_iter=5)
    assert not rec.converged
    assert rec.iterations == 5
    assert abs(np.trace(rec.rho_est.mat) - 1.0) < 1e-10


def test_reconstruction_argument_validation():
    rho = coherent_state(FockSpace(8), 0.8).to_density_matrix()
    ds = synthesize_dataset(rho)
    with pytest.raises(ValidationError, match="initial state has dim"):
        bad_init = fock_state(FockSpace(6), 0).to_density_matrix()
        reconstruct_state(ds, dim=8, initial=bad_init)
    with pytest.raises(ValidationError, match="regularization"):
        reconstruct_state(ds, dim=8, regularization=-1.0)
    with pytest.raises(ValidationError, match="model_dim"):
        predict_bin_powers(rho, 1.0, CalibrationResult.ideal(4), model_dim=4)
    stripped = TomographyDataset(ds.voltages, ds.bin_powers, 4, 0.0, None, None)
    with pytest.raises(ValidationError, match="no calibration"):
        reconstruct_state(stripped, dim=8)


def test_parity_symmetry_check_discriminates():
    cat = cat_state(FockSpace(12), 1.2, +1).to_density_matrix()
    coh = coherent_state(FockSpace(12), 1.0).to_density_matrix()
    sym = parity_symmetry_check(synthesize_dataset(cat))
    asym = parity_symmetry_check(synthesize_dataset(coh))
    assert sym["n_pairs"] == 16
    assert sym["worst"] < 1e-12
    assert asym["worst"] > 0.1


def test_parity_check_requires_antipodal_pairs():
    volts = np.array([0.3, 0.7, 1.1])   # all on the positive axis
    ds = synthesize_dataset(VACUUM, volts)
    with pytest.raises(ValidationError, match="antipodal"):
        parity_symmetry_check(ds)


def test_dataset_json_roundtrip_is_exact():
    rho = cat_state(FockSpace(12), 1.2, +1).to_density_matrix()
    ds = synthesize_dataset(rho, noise_sigma=0.01, seed=17)
    back = TomographyDataset.from_json_dict(json.loads(json.dumps(ds.to_json_dict())))
    assert np.array_equal(back.voltages, ds.voltages)
    assert np.array_equal(back.bin_powers, ds.bin_powers)
    assert back.noise_sigma == ds.noise_sigma
    assert back.seed == ds.seed
    assert back.calibration.conversion == ds.calibration.conversion
    assert np.array_equal(back.calibration.gains, ds.calibration.gains)


def test_synthesis_is_deterministic_per_seed():
    rho = coherent_state(FockSpace(8), 0.8).to_density_matrix()
    a = synthesize_dataset(rho, noise_sigma=0.02, seed=5)
    b = synthesize_dataset(rho, noise_sigma=0.02, seed=5)
    c = synthesize_dataset(rho, noise_sigma=0.02, seed=6)
    assert np.array_equal(a.bin_powers, b.bin_powers)
    assert not np.array_equal(a.bin_powers, c.bin_powers)
    with pytest.raises(ValidationError, match="seed"):
        synthesize_dataset(rho, noise_sigma=0.02)
    with pytest.raises(ValidationError, match="noise_sigma"):
        synthesize_dataset(rho, noise_sigma=-0.1, seed=1)


def test_displacement_grid_contains_antipodes():
    grid = default_displacement_grid()
    assert grid.size == 32
    for g in grid:
        assert np.min(np.abs(grid + g)) < 1e-12
