"""Transient-spectrum routes checked against closed forms and each other."""
import numpy as np
import pytest

from kpo import (
    ApproximationWarning,
    BinPowers,
    DensityMatrix,
    FockSpace,
    KpoParams,
    TransientPsd,
    ValidationError,
    bin_integrate,
    bin_powers_theory,
    coherent_state,
    default_frequency_grid,
    fock_state,
    transient_psd_analytic,
    transient_psd_lorentzian,
    transient_psd_numeric,
)

PARAMS = KpoParams.from_mhz(0.0, 17.3, 1.1)


def test_single_photon_matches_closed_form():
    # |1> emits one Lorentzian line: S = 2 Re 1/(i w + kappa/2)
    k = PARAMS.kappa
    freqs = np.linspace(-30.0 * k, 30.0 * k, 1201)
    expected = 2.0 * np.real(1.0 / (1j * freqs + k / 2.0))

    rho = fock_state(FockSpace(6), 1).to_density_matrix()
    ana = transient_psd_analytic(rho.populations(), PARAMS, freqs)
    eig = transient_psd_numeric(rho, PARAMS, freqs, method="eig")
    assert np.abs(ana.values - expected).max() < 1e-12 * expected.max()
    assert np.abs(eig.values - expected).max() < 1e-9 * expected.max()


def test_two_photon_matches_closed_form():
    # |2> cascade: S = 2 Re { 1/d0 + 1/d1 + kappa/(d0 d1) } with
    # d0 = i w + kappa/2 and d1 = i (w + chi) + 3 kappa/2.
    chi, k = PARAMS.chi, PARAMS.kappa
    freqs = np.linspace(-1.6 * chi, 0.6 * chi, 2401)
    d0 = 1j * freqs + k / 2.0
    d1 = 1j * (freqs + chi) + 3.0 * k / 2.0
    expected = 2.0 * np.real(1.0 / d0 + 1.0 / d1 + k / (d0 * d1))

    rho = fock_state(FockSpace(6), 2).to_density_matrix()
    ana = transient_psd_analytic(rho.populations(), PARAMS, freqs)
    eig = transient_psd_numeric(rho, PARAMS, freqs, method="eig")
    assert np.abs(ana.values - expected).max() < 1e-12 * expected.max()
    assert np.abs(eig.values - expected).max() < 1e-9 * expected.max()


def test_analytic_agrees_with_eigenmode_integral():
    rho = coherent_state(FockSpace(15), 1.0).to_density_matrix()
    freqs = np.linspace(-4.5 * PARAMS.chi, 0.5 * PARAMS.chi, 4001)
    eig = transient_psd_numeric(rho, PARAMS, freqs, method="eig")
    ana = transient_psd_analytic(rho.populations(), PARAMS, freqs)
    peak = eig.values.max()
    assert np.abs(ana.values - eig.values).max() < 1e-10 * peak


def test_propagate_route_agrees_with_eigenmode_integral():
    rho = fock_state(FockSpace(6), 1).to_density_matrix()
    freqs = np.linspace(-1.5 * PARAMS.chi, 0.5 * PARAMS.chi, 1500)
    prop = transient_psd_numeric(rho, PARAMS, freqs, method="propagate")
    eig = transient_psd_numeric(rho, PARAMS, freqs, method="eig")
    peak = eig.values.max()
    # adaptive tau cutoff and trapezoid quadrature limit the match
    assert np.abs(prop.values - eig.values).max() < 1e-4 * peak
    assert prop.metadata["method"] == "propagate"
    assert "min_value_pre_clip" in prop.metadata


def test_spectrum_depends_only_on_populations():
    space = FockSpace(15)
    rho = coherent_state(space, 1.0).to_density_matrix()
    diag = DensityMatrix(space, np.diag(rho.populations()).astype(complex))
    freqs = np.linspace(-3.5 * PARAMS.chi, 0.5 * PARAMS.chi, 2000)
    full = transient_psd_numeric(rho, PARAMS, freqs, method="eig")
    stripped = transient_psd_numeric(diag, PARAMS, freqs, method="eig")
    assert np.abs(full.values - stripped.values).max() < 1e-12 * full.values.max()


def test_spectrum_is_linear_in_populations():
    pa = np.zeros(8)
    pa[1] = 1.0
    pb = np.zeros(8)
    pb[3] = 1.0
    w = 0.3
    freqs = np.linspace(-3.5 * PARAMS.chi, 0.5 * PARAMS.chi, 2000)
    mixed = transient_psd_analytic(w * pa + (1 - w) * pb, PARAMS, freqs)
    parts = (w * transient_psd_analytic(pa, PARAMS, freqs).values
             + (1 - w) * transient_psd_analytic(pb, PARAMS, freqs).values)
    assert np.abs(mixed.values - parts).max() < 1e-12 * mixed.values.max()


def test_detuning_is_ignored_during_readout():
    p = fock_state(FockSpace(5), 2).to_density_matrix().populations()
    freqs = np.linspace(-2.5 * PARAMS.chi, 0.5 * PARAMS.chi, 1000)
    detuned = KpoParams.from_mhz(24.6, 17.3, 1.1)
    a = transient_psd_analytic(p, PARAMS, freqs)
    b = transient_psd_analytic(p, detuned, freqs)
    assert np.array_equal(a.values, b.values)
    assert b.params.detuning == 0.0


def _cascade_with_uniform_linewidths(populations, params, freqs):
    """Same back-substitution but with half width (n+1) kappa on band n.

    This is the other linewidth assignment one might write down for the
    cascade; it is wrong, and the test below pins how wrong.
    """
    chi, kappa = params.chi, params.kappa
    p = np.asarray(populations, dtype=float)
    tails = np.cumsum(p[::-1])[::-1]
    zhat = np.zeros(freqs.size, dtype=complex)
    total = np.zeros(freqs.size, dtype=complex)
    for n in range(p.size - 2, -1, -1):
        z0 = tails[n + 1] / (np.sqrt(n + 1.0) * kappa)
        c_feed = kappa * np.sqrt((n + 1.0) * (n + 2.0))
        d_n = 1j * (freqs + n * chi) + (n + 1.0) * kappa
        zhat = (z0 + c_feed * zhat) / d_n
        total += np.sqrt(n + 1.0) * zhat
    return 2.0 * kappa * np.real(total)


def test_linewidth_assignment_is_distinguishable():
    rho = fock_state(FockSpace(5), 2).to_density_matrix()
    freqs = np.linspace(-2.5 * PARAMS.chi, 0.5 * PARAMS.chi, 3000)
    reference = transient_psd_numeric(rho, PARAMS, freqs, method="eig")
    shipped = transient_psd_analytic(rho.populations(), PARAMS, freqs)
    variant = _cascade_with_uniform_linewidths(rho.populations(), PARAMS, freqs)
    peak = reference.values.max()
    assert np.abs(shipped.values - reference.values).max() < 1e-12 * peak
    assert np.abs(variant - reference.values).max() > 0.2 * peak


def test_lorentzian_comb_in_resolved_regime():
    # chi/kappa = 15.7 here; overlap error sits around 1.4% of peak
    rho = coherent_state(FockSpace(15), 1.0).to_density_matrix()
    freqs = np.linspace(-4.5 * PARAMS.chi, 0.5 * PARAMS.chi, 4001)
    ana = transient_psd_analytic(rho.populations(), PARAMS, freqs)
    lor = transient_psd_lorentzian(rho.populations(), PARAMS, freqs)
    assert lor.route == "lorentzian"
    assert np.abs(lor.values - ana.values).max() < 0.03 * ana.values.max()


def test_lorentzian_comb_warns_when_lines_overlap():
    blur = KpoParams.from_mhz(0.0, 4.0, 1.1)
    p = fock_state(FockSpace(4), 1).to_density_matrix().populations()
    with pytest.warns(ApproximationWarning):
        transient_psd_lorentzian(p, blur)


def test_integral_recovers_initial_photon_number():
    rho = coherent_state(FockSpace(15), 1.0).to_density_matrix()
    psd = transient_psd_analytic(rho.populations(), PARAMS)
    n0 = psd.metadata["n_initial"]
    assert abs(psd.integral() - n0) / n0 < 0.01


def test_bin_powers_theory_matches_poisson_tails():
    rho = coherent_state(FockSpace(20), 1.0).to_density_matrix()
    bp = bin_powers_theory(rho.populations(), 4)
    expected = np.array([0.6321, 0.2642, 0.0803, 0.0190])
    assert bp.route == "theory"
    assert bp.edges is None
    assert np.abs(bp.values - expected).max() < 1e-3


def test_bin_integrate_approximates_tail_powers():
    rho = coherent_state(FockSpace(15), 1.0).to_density_matrix()
    psd = transient_psd_analytic(rho.populations(), PARAMS)
    got = bin_integrate(psd, 4)
    want = bin_powers_theory(rho.populations(), 4)
    # chi-wide windows lose the Lorentzian tails, about 1% per strong line
    assert np.abs(got.values - want.values).max() < 0.02
    assert got.edges.shape == (4, 2)
    assert got.metadata["source_route"] == "analytic"
    # windows centered on -(j-1) chi
    centers = got.edges.mean(axis=1)
    assert np.allclose(centers, -np.arange(4) * PARAMS.chi, atol=1e-9)


def test_bin_integrate_rejects_uncovered_window():
    p = fock_state(FockSpace(6), 1).to_density_matrix().populations()
    freqs = np.linspace(-1.2 * PARAMS.chi, 0.6 * PARAMS.chi, 800)
    psd = transient_psd_analytic(p, PARAMS, freqs)
    with pytest.raises(ValidationError, match="does not cover bin"):
        bin_integrate(psd, 4)


def test_bin_integrate_rejects_coarse_grid():
    p = fock_state(FockSpace(6), 1).to_density_matrix().populations()
    freqs = np.linspace(-4.6 * PARAMS.chi, 0.6 * PARAMS.chi, 60)
    psd = transient_psd_analytic(p, PARAMS, freqs)
    with pytest.raises(ValidationError, match="samples"):
        bin_integrate(psd, 4)


def test_default_grid_covers_requested_bins():
    p = coherent_state(FockSpace(15), 1.0).to_density_matrix().populations()
    grid = default_frequency_grid(PARAMS, p, n_bins=4)
    assert np.all(np.diff(grid) > 0)
    assert grid[0] < -4.5 * PARAMS.chi
    assert grid[-1] > 0.5 * PARAMS.chi


def test_psd_container_validation():
    f = np.linspace(-1.0, 1.0, 11)
    v = np.ones(11)
    ok = TransientPsd(f, v, PARAMS, route="test")
    assert ok.integral() > 0
    with pytest.raises(ValidationError):
        TransientPsd(f, v[:-1], PARAMS, route="test")
    with pytest.raises(ValidationError):
        TransientPsd(f[::-1], v, PARAMS, route="test")
    bad = v.copy()
    bad[3] = -1e-6
    with pytest.raises(ValidationError, match="negative"):
        TransientPsd(f, bad, PARAMS, route="test")
    # round-off floor: tiny negatives survive as data
    slight = v.copy()
    slight[3] = -5e-9
    kept = TransientPsd(f, slight, PARAMS, route="test")
    assert kept.values[3] == -5e-9


def test_bin_powers_validation():
    with pytest.raises(ValidationError):
        BinPowers(np.ones(3), 4, route="test")
    with pytest.raises(ValidationError):
        BinPowers(np.array([0.5, -0.1, 0.2, 0.1]), 4, route="test")
    with pytest.raises(ValidationError):
        BinPowers(np.ones(4), 4, route="test", edges=np.zeros((3, 2)))


def test_population_input_validation():
    with pytest.raises(ValidationError, match="non-negative"):
        transient_psd_analytic(np.array([0.5, -0.2, 0.7]), PARAMS)
    with pytest.raises(ValidationError, match="sum to 1"):
        transient_psd_analytic(np.array([0.5, 0.2]), PARAMS)
    with pytest.raises(ValidationError, match="method"):
        rho = fock_state(FockSpace(4), 1).to_density_matrix()
        transient_psd_numeric(rho, PARAMS, method="fft")
    with pytest.raises(ValidationError, match="kappa"):
        lossless = KpoParams(0.0, PARAMS.chi, 0.0)
        transient_psd_analytic(np.array([0.0, 1.0]), lossless)
