"""Transient emission spectra of the relaxing Kerr oscillator.

A state prepared at t=0 relaxes under kappa while the Kerr ladder splits its
emission into resolved lines: the n -> n-1 transition radiates at detuning
-(n-1) chi from the bare resonator. Three routes to the same spectrum live
here: the full double-time integral over the Liouvillian ("numeric"), the
closed-form quantum-regression cascade ("analytic"), and the Lorentzian-comb
approximation. Frequencies are rad/us relative to the bare resonator; the
parametric drive is off during readout, so the detuning entry of the supplied
params is ignored and the relaxation frame is used.
"""
from __future__ import annotations

import dataclasses
import json
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .core import DensityMatrix, FockSpace, KpoParams, annihilation_op
from .dynamics import liouvillian_matrix, two_time_correlation
from .exceptions import ApproximationWarning, ConvergenceError, ValidationError

LORENTZIAN_RATIO_FLOOR = 5.0
MIN_SAMPLES_PER_BIN = 20


def _relaxation_params(params: KpoParams) -> KpoParams:
    return dataclasses.replace(params, detuning=0.0)


def _populations_of(state) -> np.ndarray:
    if isinstance(state, DensityMatrix):
        return state.populations()
    p = np.asarray(state, dtype=float).reshape(-1)
    if np.any(p < -1e-10):
        raise ValidationError("populations must be non-negative")
    s = p.sum()
    if not np.isfinite(s) or abs(s - 1.0) > 1e-6:
        raise ValidationError(f"populations must sum to 1, got {s!r}")
    return np.clip(p, 0.0, None)


def _significant_level(populations: np.ndarray, floor: float = 1e-8) -> int:
    above = np.nonzero(populations > floor)[0]
    return int(above.max()) if above.size else 0


def default_frequency_grid(params: KpoParams, populations,
                           n_bins: int = 4, margin_kappa: float = 400.0,
                           step_kappa: float = 1.0 / 12.0) -> np.ndarray:
    """Grid covering every populated emission line and the first n_bins
    windows, with margin wide enough for percent-level sum rules."""
    p = _populations_of(populations)
    n_sig = _significant_level(p)
    chi, kappa = params.chi, params.kappa
    lo = -(max(n_sig, n_bins) + 0.5) * chi - margin_kappa * kappa
    hi = 0.5 * chi + margin_kappa * kappa
    step = step_kappa * kappa
    count = int(np.ceil((hi - lo) / step)) + 1
    return np.linspace(lo, hi, count)


@dataclass(frozen=True, eq=False)
class TransientPsd:
    """Sampled emission spectrum with its provenance."""

    frequencies: np.ndarray
    values: np.ndarray
    params: KpoParams
    route: str
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        f = np.asarray(self.frequencies, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if f.shape != v.shape or f.ndim != 1:
            raise ValidationError("frequency and value arrays must match 1-D shapes")
        if not np.all(np.diff(f) > 0):
            raise ValidationError("frequency grid must be strictly increasing")
        floor = -1e-8 * max(1.0, float(np.abs(v).max(initial=0.0)))
        if v.size and v.min() < floor:
            raise ValidationError(f"spectrum has negative values down to {v.min():.3e}")
        object.__setattr__(self, "frequencies", f)
        object.__setattr__(self, "values", v)

    def integral(self) -> float:
        """(1/2pi) integral of the spectrum over the sampled grid."""
        return float(np.trapezoid(self.values, self.frequencies) / (2.0 * np.pi))

    def to_csv(self, path) -> None:
        header = "frequency_rad_per_us,psd"
        np.savetxt(path, np.column_stack([self.frequencies, self.values]),
                   delimiter=",", header=header, comments="", fmt="%.12e")

    def to_json_dict(self) -> dict:
        return {
            "route": self.route,
            "params": {"detuning": self.params.detuning, "chi": self.params.chi,
                       "kappa": self.params.kappa},
            "grid": {"lo": float(self.frequencies[0]), "hi": float(self.frequencies[-1]),
                     "count": int(self.frequencies.size)},
            "frequencies": self.frequencies.tolist(),
            "values": self.values.tolist(),
            "metadata": self.metadata,
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=1)


@dataclass(frozen=True, eq=False)
class BinPowers:
    """Per-line emission powers, bin j centered on omega = -(j-1) chi.

    edges holds the (n_bins, 2) frequency windows when the powers came from
    integrating a sampled spectrum; None for the population-tail route, which
    has no frequency content.
    """

    values: np.ndarray
    n_bins: int
    route: str
    edges: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.n_bins,):
            raise ValidationError(f"expected {self.n_bins} bin powers, got shape {v.shape}")
        if np.any(v < -1e-12):
            raise ValidationError("bin powers must be non-negative")
        object.__setattr__(self, "values", np.clip(v, 0.0, None))
        if self.edges is not None:
            e = np.asarray(self.edges, dtype=float)
            if e.shape != (self.n_bins, 2):
                raise ValidationError(f"edges must be ({self.n_bins}, 2), got {e.shape}")
            object.__setattr__(self, "edges", e)

    def to_csv(self, path) -> None:
        rows = np.column_stack([np.arange(1, self.n_bins + 1), self.values])
        np.savetxt(path, rows, delimiter=",", header="bin,power", comments="",
                   fmt=["%d", "%.12e"])

    def to_json_dict(self) -> dict:
        out = {"route": self.route, "n_bins": self.n_bins,
               "values": self.values.tolist(), "metadata": self.metadata}
        if self.edges is not None:
            out["edges"] = self.edges.tolist()
        return out


def transient_psd_numeric(rho0: DensityMatrix, params: KpoParams,
                          freqs: np.ndarray | None = None,
                          method: str = "eig",
                          rtol: float = 1e-8, atol: float = 1e-10) -> TransientPsd:
    """Emission spectrum of a relaxing state from the full double time integral
        S(omega) = 2 Re int_0^inf dt int_0^inf dtau kappa <a+(t+tau) a(t)> e^{-i omega tau}.

    method="eig" evaluates both time integrals exactly over the eigenmodes of
    the relaxation Liouvillian; method="propagate" drives the adaptive
    two-time-correlation integrator and Fourier transforms the record. The two
    must agree and are cross-checked in the test suite.
    """
    if method not in ("eig", "propagate"):
        raise ValidationError(f"method must be eig or propagate, got {method!r}")
    rel = _relaxation_params(params)
    if rel.kappa <= 0:
        raise ValidationError("transient spectra need kappa > 0")
    pops = rho0.populations()
    if freqs is None:
        freqs = default_frequency_grid(rel, pops)
    freqs = np.asarray(freqs, dtype=float)
    n0 = float(pops @ np.arange(pops.size))

    if method == "eig":
        values = _psd_eig(rho0, rel, freqs)
        meta = {"method": "eig"}
    else:
        rec = two_time_correlation(rho0, rel, 0.0, mode="transient",
                                   rtol=rtol, atol=atol)
        values, pre_clip_min = _fourier_psd(rec.taus, rec.values, rel.kappa, freqs)
        meta = {"method": "propagate", "min_value_pre_clip": pre_clip_min,
                **rec.metadata}

    psd = TransientPsd(freqs, values, rel, route="numeric", metadata=meta)
    achieved = psd.integral()
    meta["n_initial"] = n0
    meta["sum_rule_rel_error"] = abs(achieved - n0) / max(n0, 1e-300) if n0 > 0 else abs(achieved)
    return psd


def _psd_eig(rho0: DensityMatrix, rel: KpoParams, freqs: np.ndarray) -> np.ndarray:
    space = rho0.space
    dim = space.dim
    lio = liouvillian_matrix(space, rel, 0.0)
    lam, vmat = scipy.linalg.eig(lio)
    vinv = scipy.linalg.inv(vmat)
    a = annihilation_op(space).mat
    coef = vinv @ rho0.mat.reshape(-1)

    # infinite-horizon t-integral mode by mode; the stationary mode must be
    # annihilated by a or the integral genuinely diverges
    k0 = int(np.argmin(np.abs(lam)))
    stationary = vmat[:, k0].reshape(dim, dim)
    leak = np.linalg.norm(a @ stationary) * abs(coef[k0]) / max(np.linalg.norm(stationary), 1e-300)
    if leak > 1e-8:
        raise ConvergenceError(
            f"stationary component is not dark (|a rho_stat| = {leak:.2e}); "
            "the transient t-integral diverges")
    inv_lam = np.zeros_like(lam)
    keep = np.arange(lam.size) != k0
    inv_lam[keep] = -1.0 / lam[keep]
    r_int = (vmat @ (coef * inv_lam)).reshape(dim, dim)

    sigma0 = a @ r_int
    d = vinv @ sigma0.reshape(-1)
    resp = a.conj().reshape(-1) @ vmat
    weights = resp * d
    weights[k0] = 0.0
    lam_eff = lam.copy()
    lam_eff[k0] = -1.0
    denom = 1j * freqs[:, None] - lam_eff[None, :]
    return 2.0 * rel.kappa * np.real(weights[None, :] / denom).sum(axis=1)


def _fourier_psd(taus: np.ndarray, g: np.ndarray, kappa: float,
                 freqs: np.ndarray) -> tuple[np.ndarray, float]:
    """2 Re kappa int_0^taumax g(tau) e^{-i omega tau} dtau by trapezoid,
    chunked over frequencies to bound memory.

    The hard tau cutoff rings at the truncated-tail scale; those excursions
    are clipped to zero and the pre-clip minimum is returned for the record.
    """
    out = np.empty(freqs.size)
    w = np.empty(taus.size)
    w[0] = 0.5 * (taus[1] - taus[0])
    w[-1] = 0.5 * (taus[-1] - taus[-2])
    w[1:-1] = 0.5 * (taus[2:] - taus[:-2])
    gw = g * w
    chunk = max(1, int(4e6 // taus.size))
    for s in range(0, freqs.size, chunk):
        f = freqs[s: s + chunk]
        kernel = np.exp(-1j * np.outer(f, taus))
        out[s: s + f.size] = 2.0 * kappa * np.real(kernel @ gw)
    pre_clip_min = float(out.min())
    return np.clip(out, 0.0, None), pre_clip_min


def transient_psd_analytic(populations, params: KpoParams,
                           freqs: np.ndarray | None = None) -> TransientPsd:
    """Closed-form transient spectrum of the lossy Kerr cascade.

    Depends only on the diagonal populations. Solved by back-substitution of
    the subdiagonal coherence bands under quantum regression: band n carries
    the (n+1) -> n line at detuning -n chi with half width (2n+1) kappa/2 and
    is fed from band n+1 at rate kappa sqrt((n+1)(n+2)); the integrated
    emission entering band n is the population tail sum above level n.
    """
    p = _populations_of(populations)
    rel = _relaxation_params(params)
    if rel.kappa <= 0:
        raise ValidationError("transient spectra need kappa > 0")
    if freqs is None:
        freqs = default_frequency_grid(rel, p)
    freqs = np.asarray(freqs, dtype=float)
    chi, kappa = rel.chi, rel.kappa
    dim = p.size
    tails = np.cumsum(p[::-1])[::-1]   # tails[n] = sum_{m >= n} p_m

    zhat = np.zeros(freqs.size, dtype=complex)
    total = np.zeros(freqs.size, dtype=complex)
    for n in range(dim - 2, -1, -1):
        z0 = tails[n + 1] / (np.sqrt(n + 1.0) * kappa)
        c_feed = kappa * np.sqrt((n + 1.0) * (n + 2.0))
        d_n = 1j * (freqs + n * chi) + (2 * n + 1) * kappa / 2.0
        zhat = (z0 + c_feed * zhat) / d_n
        total += np.sqrt(n + 1.0) * zhat
    values = 2.0 * kappa * np.real(total)
    meta = {"n_initial": float(p @ np.arange(dim))}
    psd = TransientPsd(freqs, values, rel, route="analytic", metadata=meta)
    meta["sum_rule_rel_error"] = (abs(psd.integral() - meta["n_initial"])
                                  / max(meta["n_initial"], 1e-300))
    return psd


def transient_psd_lorentzian(populations, params: KpoParams,
                             freqs: np.ndarray | None = None) -> TransientPsd:
    """Lorentzian-comb approximation: the j+1 -> j line becomes a Lorentzian
    at -j chi with FWHM (2j+1) kappa, weighted by the tail sum above level j.
    Warns when chi/kappa < 5 and the comb overlaps badly."""
    p = _populations_of(populations)
    rel = _relaxation_params(params)
    if rel.kappa <= 0:
        raise ValidationError("transient spectra need kappa > 0")
    if rel.chi / rel.kappa < LORENTZIAN_RATIO_FLOOR:
        warnings.warn(
            f"chi/kappa = {rel.chi / rel.kappa:.2f} < 5: Lorentzian decomposition "
            "overlaps strongly", ApproximationWarning, stacklevel=2)
    if freqs is None:
        freqs = default_frequency_grid(rel, p)
    freqs = np.asarray(freqs, dtype=float)
    chi, kappa = rel.chi, rel.kappa
    dim = p.size
    tails = np.cumsum(p[::-1])[::-1]
    values = np.zeros(freqs.size)
    for j in range(dim - 1):
        weight = tails[j + 1]
        if weight <= 0:
            continue
        gam = (2 * j + 1) * kappa
        values += weight * gam / ((freqs + j * chi) ** 2 + (gam / 2.0) ** 2)
    meta = {"n_initial": float(p @ np.arange(dim))}
    psd = TransientPsd(freqs, values, rel, route="lorentzian", metadata=meta)
    meta["sum_rule_rel_error"] = (abs(psd.integral() - meta["n_initial"])
                                  / max(meta["n_initial"], 1e-300))
    return psd


def bin_powers_theory(state_or_populations, n_bins: int = 4) -> BinPowers:
    """Ideal per-line powers: bin j carries the population tail sum_{n>=j} p_n."""
    p = _populations_of(state_or_populations)
    if n_bins < 1:
        raise ValidationError("n_bins must be >= 1")
    tails = np.cumsum(p[::-1])[::-1]
    vals = np.array([tails[j] if j < p.size else 0.0 for j in range(1, n_bins + 1)])
    return BinPowers(vals, n_bins, route="theory")


def bin_integrate(psd: TransientPsd, n_bins: int = 4) -> BinPowers:
    """Integrate a sampled spectrum over chi-wide windows centered on the
    line positions -(j-1) chi, j = 1..n_bins; (1/2pi) per window.

    Errors if the grid does not cover every window or resolves a window with
    fewer than 20 samples.
    """
    if n_bins < 1:
        raise ValidationError("n_bins must be >= 1")
    chi = psd.params.chi
    f, v = psd.frequencies, psd.values
    vals = np.empty(n_bins)
    for j in range(1, n_bins + 1):
        center = -(j - 1) * chi
        lo, hi = center - 0.5 * chi, center + 0.5 * chi
        if f[0] > lo or f[-1] < hi:
            raise ValidationError(
                f"frequency grid [{f[0]:.3g}, {f[-1]:.3g}] does not cover bin {j} "
                f"window [{lo:.3g}, {hi:.3g}]")
        inside = (f > lo) & (f < hi)
        if int(inside.sum()) < MIN_SAMPLES_PER_BIN:
            raise ValidationError(
                f"bin {j} holds only {int(inside.sum())} samples; grid too coarse")
        fs = np.concatenate([[lo], f[inside], [hi]])
        vs = np.concatenate([[np.interp(lo, f, v)], v[inside], [np.interp(hi, f, v)]])
        vals[j - 1] = np.trapezoid(vs, fs) / (2.0 * np.pi)
    centers = -(np.arange(n_bins)) * chi
    edges = np.column_stack([centers - 0.5 * chi, centers + 0.5 * chi])
    return BinPowers(np.clip(vals, 0.0, None), n_bins, route="integrated",
                     edges=edges, metadata={"source_route": psd.route})
