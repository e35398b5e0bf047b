"""Displaced-emission state tomography.

The measurement primitive: displace the stored state by alpha_i = k V_i,
let it relax, and integrate the emission comb into per-line powers. Each bin
power is a population tail of the displaced state, so the map
rho -> c_j S_j(D rho D^dag) is affine and reconstruction is a convex program.
This module calibrates the pulse chain (k, c_j) on displaced vacuum, predicts
bin powers for arbitrary states, synthesizes noisy datasets, and inverts them
with an accelerated projected-gradient solver.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.optimize
import scipy.special

from .core import (DensityMatrix, FockSpace, displacement_op, parity_op,
                   warn_if_truncated)
from .exceptions import (CalibrationError, ConvergenceError, ValidationError)

MODEL_DIM_DEFAULT = 30
RECONSTRUCTION_DIM_DEFAULT = 12
N_BINS_DEFAULT = 4


@dataclass(frozen=True, eq=False)
class CalibrationResult:
    """Pulse-chain calibration: alpha_i = conversion * V_i, bin gains c_j."""

    conversion: complex
    gains: np.ndarray
    residual: float
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        g = np.asarray(self.gains, dtype=float)
        if g.ndim != 1 or g.size < 1:
            raise ValidationError("gains must be a 1-D vector")
        if np.any(g <= 0) or not np.all(np.isfinite(g)):
            raise CalibrationError(f"bin gains must be positive and finite, got {g}")
        k = complex(self.conversion)
        if not np.isfinite(k.real) or not np.isfinite(k.imag) or k == 0:
            raise CalibrationError(f"conversion factor must be finite and nonzero, got {k}")
        object.__setattr__(self, "gains", g)
        object.__setattr__(self, "conversion", k)

    @property
    def n_bins(self) -> int:
        return self.gains.size

    @classmethod
    def ideal(cls, n_bins: int = N_BINS_DEFAULT) -> "CalibrationResult":
        return cls(1.0 + 0.0j, np.ones(n_bins), 0.0, metadata={"source": "ideal"})


@dataclass(frozen=True, eq=False)
class TomographyDataset:
    """Measured bin powers over a displacement grid.

    bin_powers is stored as an (n_bins, m) matrix: row j holds the j-th bin
    power at each of the m displacement voltages. Powers are clipped at zero
    on construction (noise can push raw values slightly negative); values
    more negative than 10 sigma are rejected as corrupt.
    """

    voltages: np.ndarray
    bin_powers: np.ndarray
    n_bins: int
    noise_sigma: float = 0.0
    seed: int | None = None
    calibration: CalibrationResult | None = None

    def __post_init__(self):
        v = np.asarray(self.voltages, dtype=complex).reshape(-1)
        p = np.asarray(self.bin_powers, dtype=float)
        if p.shape != (self.n_bins, v.size):
            raise ValidationError(
                f"bin_powers must be ({self.n_bins}, {v.size}), got {p.shape}")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be >= 0")
        floor = -10.0 * self.noise_sigma - 1e-12
        if np.any(p < floor):
            raise ValidationError(
                f"bin powers reach {p.min():.3e}, below the {floor:.3e} noise floor")
        object.__setattr__(self, "voltages", v)
        object.__setattr__(self, "bin_powers", np.clip(p, 0.0, None))

    @property
    def n_measurements(self) -> int:
        return int(self.bin_powers.size)

    def to_json_dict(self) -> dict:
        out = {
            "voltages": [[z.real, z.imag] for z in self.voltages],
            "bin_powers": self.bin_powers.tolist(),
            "n_bins": self.n_bins,
            "noise_sigma": self.noise_sigma,
            "seed": self.seed,
            "calibration": None,
        }
        if self.calibration is not None:
            k = complex(self.calibration.conversion)
            out["calibration"] = {"k": [k.real, k.imag],
                                  "c": self.calibration.gains.tolist()}
        return out

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=1)

    @classmethod
    def from_json_dict(cls, d: dict) -> "TomographyDataset":
        volts = np.array([complex(re, im) for re, im in d["voltages"]])
        cal = None
        if d.get("calibration") is not None:
            c = d["calibration"]
            cal = CalibrationResult(complex(c["k"][0], c["k"][1]),
                                    np.asarray(c["c"], dtype=float),
                                    residual=float("nan"),
                                    metadata={"source": "json"})
        return cls(volts, np.asarray(d["bin_powers"], dtype=float),
                   int(d["n_bins"]), float(d["noise_sigma"]),
                   None if d.get("seed") is None else int(d["seed"]), cal)

    @classmethod
    def from_json(cls, path) -> "TomographyDataset":
        with open(path) as fh:
            return cls.from_json_dict(json.load(fh))


@dataclass(frozen=True, eq=False)
class ReconstructionResult:
    rho_est: DensityMatrix
    loss: float
    iterations: int
    grad_norm: float
    projections: int
    converged: bool
    parity_constrained: bool
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.parity_constrained:
            p = parity_op(self.rho_est.space).mat
            asym = np.linalg.norm(p @ self.rho_est.mat @ p - self.rho_est.mat)
            if asym > 1e-8:
                raise ValidationError(
                    f"parity-constrained estimate breaks symmetry by {asym:.2e}")


def default_displacement_grid(n_phases: int = 16,
                              amplitudes=(0.5, 1.0)) -> np.ndarray:
    """Tomography displacement pattern: n_phases equally spaced phases at
    each amplitude. The default 16 x 2 grid gives m = 32 points and contains
    every antipodal pair."""
    th = 2.0 * np.pi * np.arange(n_phases) / n_phases
    return np.concatenate([a * np.exp(1j * th) for a in amplitudes])


def poisson_tails(mean: np.ndarray, n_bins: int) -> np.ndarray:
    """P(N >= j) for j = 1..n_bins of a Poisson(mean) variable, shape
    (n_bins,) + mean.shape. Closed form, no Fock truncation."""
    mu = np.asarray(mean, dtype=float)
    return np.stack([scipy.special.gammainc(j, mu) for j in range(1, n_bins + 1)])


def _displaced_populations(rho_small: np.ndarray, alpha: complex,
                           model_dim: int) -> np.ndarray:
    """Populations of D(alpha) rho D(alpha)^dag with rho embedded in a
    model_dim space. Exact for states supported on the first small-dim levels."""
    space = FockSpace(model_dim)
    d_op = displacement_op(space, alpha, check="none").mat
    d_small = rho_small.shape[0]
    block = d_op[:, :d_small]
    disp = block @ rho_small @ block.conj().T
    return np.real(np.diag(disp))


def predict_bin_powers(rho: DensityMatrix, voltage: complex,
                       cal: CalibrationResult,
                       model_dim: int | None = None) -> np.ndarray:
    """Forward model: gains times population tails of the displaced state.

    The displacement acts in a larger model space (default 30) so truncation
    of the displacement unitary never touches states stored at smaller dims.
    """
    alpha = complex(cal.conversion) * complex(voltage)
    md = _resolve_model_dim(model_dim, rho.space.dim, abs(alpha))
    pops = _displaced_populations(rho.mat, alpha, md)
    warn_if_truncated(pops, context=f"displaced state (alpha={alpha:.3g})")
    tails = np.cumsum(pops[::-1])[::-1]
    n_bins = cal.n_bins
    return cal.gains * tails[1: n_bins + 1]


def _resolve_model_dim(model_dim: int | None, state_dim: int,
                       alpha_abs: float) -> int:
    if model_dim is not None:
        if model_dim < state_dim:
            raise ValidationError(
                f"model_dim {model_dim} smaller than state dim {state_dim}")
        return model_dim
    # displaced support needs room: mean photon number |alpha|^2 plus spread
    need = int(np.ceil(alpha_abs ** 2 + 5 * alpha_abs + 6))
    return max(MODEL_DIM_DEFAULT, state_dim, need)


def synthesize_dataset(rho_true: DensityMatrix, voltages=None,
                       cal: CalibrationResult | None = None,
                       noise_sigma: float = 0.0, seed: int | None = None,
                       n_bins: int = N_BINS_DEFAULT,
                       model_dim: int | None = None) -> TomographyDataset:
    """Forward model plus additive Gaussian noise on every bin power.

    Deterministic per seed; a seed is mandatory whenever noise_sigma > 0.
    """
    if cal is None:
        cal = CalibrationResult.ideal(n_bins)
    if cal.n_bins != n_bins:
        raise ValidationError(f"calibration has {cal.n_bins} gains, need {n_bins}")
    if voltages is None:
        voltages = default_displacement_grid() / complex(cal.conversion)
    volts = np.asarray(voltages, dtype=complex).reshape(-1)
    if noise_sigma < 0:
        raise ValidationError("noise_sigma must be >= 0")
    if noise_sigma > 0 and seed is None:
        raise ValidationError("a seed is required when noise_sigma > 0")

    powers = np.column_stack(
        [predict_bin_powers(rho_true, v, cal, model_dim=model_dim) for v in volts])
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        powers = powers + rng.normal(0.0, noise_sigma, size=powers.shape)
    return TomographyDataset(volts, powers, n_bins, noise_sigma, seed, cal)


def calibrate_pulses(dataset: TomographyDataset,
                     scan_points: int = 241) -> CalibrationResult:
    """Fit (|k|, c_j) to displaced-vacuum data.

    Displacing vacuum by k V gives Poisson(|kV|^2) tails, so for fixed |k|
    the optimal gains solve independent per-bin linear least squares in
    closed form; the remaining 1-D problem in |k| is bracketed by a coarse
    geometric scan and polished with bounded scalar minimization. Vacuum
    data cannot see the phase of k, which is fixed at zero by convention
    (the pulse generator's phase reference).
    """
    volts = np.abs(dataset.voltages)
    y = dataset.bin_powers
    vmax = volts.max()
    if vmax <= 0:
        raise CalibrationError("all displacement voltages vanish")
    n_distinct = np.unique(np.round(volts / vmax, 9)).size
    if n_distinct < 2:
        raise CalibrationError(
            "single-amplitude dataset: conversion and gains are degenerate")
    if n_distinct < 5:
        warnings.warn(f"only {n_distinct} distinct amplitudes; calibration "
                      "is poorly conditioned", UserWarning, stacklevel=2)

    def gains_and_loss(k: float) -> tuple[np.ndarray, float]:
        tails = poisson_tails((k * volts) ** 2, dataset.n_bins)
        denom = np.sum(tails ** 2, axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            c = np.where(denom > 0, np.sum(y * tails, axis=1) / denom, 0.0)
        resid = y - c[:, None] * tails
        return c, float(np.sum(resid ** 2))

    k_grid = np.geomspace(0.03, 30.0, scan_points) / vmax
    losses = np.array([gains_and_loss(k)[1] for k in k_grid])
    best = int(np.argmin(losses))
    if best == 0 or best == k_grid.size - 1:
        raise ConvergenceError(
            "conversion-factor scan pinned at the bracket edge; data do not "
            "determine a pulse amplitude scale")
    res = scipy.optimize.minimize_scalar(
        lambda k: gains_and_loss(k)[1],
        bounds=(k_grid[best - 1], k_grid[best + 1]), method="bounded",
        options={"xatol": 1e-12 * k_grid[best]})
    if not res.success:
        raise ConvergenceError(f"conversion-factor polish failed: {res.message}")
    k_opt = float(res.x)
    c_opt, loss = gains_and_loss(k_opt)
    if np.any(c_opt <= 0):
        raise CalibrationError(
            f"fitted gains are not all positive ({c_opt}); data look corrupted")
    return CalibrationResult(complex(k_opt), c_opt, loss,
                             metadata={"n_distinct_amplitudes": int(n_distinct),
                                       "scan_points": scan_points})


def parity_symmetry_check(dataset: TomographyDataset,
                          match_tol: float = 1e-9) -> dict:
    """Compare bin powers at antipodal displacements.

    A parity-symmetric state gives identical statistics at +V and -V; the
    per-pair discrepancies, normalized by the dataset's signal scale, say
    whether a parity-constrained reconstruction is justified.
    """
    volts = dataset.voltages
    scale = float(np.abs(dataset.bin_powers).max())
    if scale == 0:
        scale = 1.0
    tol = match_tol + 1e-9 * np.abs(volts).max(initial=0.0)
    used = np.zeros(volts.size, dtype=bool)
    pairs, max_d, rms_d = [], [], []
    for i in range(volts.size):
        if used[i]:
            continue
        partners = np.nonzero(~used & (np.abs(volts + volts[i]) <= tol))[0]
        partners = partners[partners != i]
        if partners.size == 0:
            continue
        j = int(partners[0])
        used[i] = used[j] = True
        diff = dataset.bin_powers[:, i] - dataset.bin_powers[:, j]
        pairs.append((i, j))
        max_d.append(float(np.abs(diff).max()) / scale)
        rms_d.append(float(np.sqrt(np.mean(diff ** 2))) / scale)
    if not pairs:
        raise ValidationError("displacement grid contains no antipodal pairs")
    return {
        "n_pairs": len(pairs),
        "pair_indices": pairs,
        "max_discrepancy": max_d,
        "rms_discrepancy": rms_d,
        "worst": float(np.max(max_d)),
        "scale": scale,
    }


def _free_parameter_count(dim: int, parity: bool) -> int:
    if not parity:
        return dim * dim - 1
    even = (dim + 1) // 2
    odd = dim // 2
    return even * even + odd * odd - 1


def _simplex_project(vals: np.ndarray) -> np.ndarray:
    """Euclidean projection of a real vector onto the probability simplex."""
    u = np.sort(vals)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, vals.size + 1)
    rho = idx[u - css / idx > 0][-1]
    theta = css[rho - 1] / rho
    return np.clip(vals - theta, 0.0, None)


def density_matrix_project(mat: np.ndarray,
                           parity_mat: np.ndarray | None = None) -> np.ndarray:
    """Frobenius-nearest density matrix: hermitize, spectrally project the
    eigenvalues onto the simplex. With a parity operator given, symmetrize
    first; spectral functions preserve the symmetry, so the result stays in
    the intersection."""
    h = 0.5 * (mat + mat.conj().T)
    if parity_mat is not None:
        h = 0.5 * (h + parity_mat @ h @ parity_mat)
        h = 0.5 * (h + h.conj().T)
    vals, vecs = np.linalg.eigh(h)
    proj = _simplex_project(vals)
    return (vecs * proj) @ vecs.conj().T


def _measurement_matrix(volts: np.ndarray, cal: CalibrationResult, dim: int,
                        model_dim: int, phase_offset: float) -> np.ndarray:
    """Rows of the affine measurement map: row (i, j) is vec of the cropped
    Hermitian operator whose overlap with rho gives bin power j at voltage i."""
    model_space = FockSpace(model_dim)
    rows = np.empty((volts.size * cal.n_bins, dim * dim), dtype=complex)
    rot = np.exp(1j * phase_offset)
    for i, v in enumerate(volts):
        alpha = complex(cal.conversion) * complex(v) * rot
        d_op = displacement_op(model_space, alpha, check="none").mat
        block = d_op[:, :dim]
        for j in range(1, cal.n_bins + 1):
            tail_block = block[j:, :]
            m_op = cal.gains[j - 1] * (tail_block.conj().T @ tail_block)
            rows[i * cal.n_bins + (j - 1)] = m_op.conj().reshape(-1)
    return rows


def reconstruct_state(dataset: TomographyDataset,
                      cal: CalibrationResult | None = None,
                      parity: bool = False,
                      dim: int = RECONSTRUCTION_DIM_DEFAULT,
                      regularization: float = 0.0,
                      model_dim: int | None = None,
                      phase_offset: float = 0.0,
                      max_iter: int = 5000,
                      loss_rtol: float = 1e-10,
                      grad_tol: float = 1e-8,
                      initial: DensityMatrix | None = None) -> ReconstructionResult:
    """Solve the convex bin-power inversion for the density matrix.

    Accelerated projected gradient with adaptive restart; feasibility
    projection by eigendecomposition plus simplex projection of the spectrum,
    with parity symmetrization folded in when requested. Terminates on
    relative loss decrease below loss_rtol or projected-gradient norm below
    grad_tol; hitting the iteration cap returns the best iterate with
    converged=False rather than raising.
    """
    if cal is None:
        cal = dataset.calibration
    if cal is None:
        raise ValidationError("dataset carries no calibration and none was given")
    if cal.n_bins != dataset.n_bins:
        raise ValidationError(f"calibration has {cal.n_bins} gains, dataset "
                              f"has {dataset.n_bins} bins")
    free = _free_parameter_count(dim, parity)
    if dataset.n_measurements < free:
        hint = ("enable the parity constraint, lower dim, or add displacements"
                if not parity else "lower dim or add displacements")
        raise ValidationError(
            f"{dataset.n_measurements} measurements cannot determine "
            f"{free} free parameters at dim {dim}; {hint}")
    if regularization < 0:
        raise ValidationError("regularization must be >= 0")

    md = max(_resolve_model_dim(model_dim, dim,
                                float(np.abs(cal.conversion)
                                      * np.abs(dataset.voltages).max(initial=0.0))),
             dim)
    a_mat = _measurement_matrix(dataset.voltages, cal, dim, md, phase_offset)
    y = dataset.bin_powers.T.reshape(-1).copy()   # (i, j) ordering matches rows

    # normalize out the overall data scale so jointly rescaling powers and
    # gains leaves every iterate (and the argmin) bitwise unchanged
    data_scale = float(np.abs(y).max())
    if data_scale == 0.0:
        data_scale = float(np.abs(a_mat).max()) or 1.0
    a_mat = a_mat / data_scale
    y = y / data_scale

    lip = scipy.linalg.svdvals(a_mat)[0] ** 2 + 2.0 * regularization
    step = 1.0 / lip
    par_mat = parity_op(FockSpace(dim)).mat if parity else None

    def loss_grad(x_flat: np.ndarray) -> tuple[float, np.ndarray]:
        pred = np.real(a_mat @ x_flat)
        r = pred - y
        val = 0.5 * float(r @ r) + regularization * float(
            np.real(x_flat.conj() @ x_flat))
        grad = (a_mat.conj().T @ r) + 2.0 * regularization * x_flat
        return val, grad

    if initial is None:
        x = np.eye(dim, dtype=complex).reshape(-1) / dim
    else:
        if initial.space.dim != dim:
            raise ValidationError(f"initial state has dim {initial.space.dim}, "
                                  f"reconstruction runs at dim {dim}")
        x = initial.mat.reshape(-1).astype(complex)
    if par_mat is not None:
        x = density_matrix_project(x.reshape(dim, dim), par_mat).reshape(-1)
    z = x.copy()
    t_mom = 1.0
    best_x, best_loss = x, loss_grad(x)[0]
    projections = 0
    grad_norm = np.inf
    converged = False
    prev_loss = best_loss
    it = 0
    for it in range(1, max_iter + 1):
        _, g = loss_grad(z)
        x_new = density_matrix_project((z - step * g).reshape(dim, dim),
                                       par_mat).reshape(-1)
        projections += 1
        cur_loss, g_x = loss_grad(x_new)
        if cur_loss > prev_loss:      # adaptive restart of the momentum
            t_mom = 1.0
            z = x_new.copy()
        else:
            t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_mom * t_mom))
            z = x_new + ((t_mom - 1.0) / t_next) * (x_new - x)
            t_mom = t_next
        if cur_loss < best_loss:
            best_loss, best_x = cur_loss, x_new
        rel_drop = abs(prev_loss - cur_loss) / max(abs(prev_loss), 1e-300)
        x, prev_loss = x_new, cur_loss
        if it % 10 == 0 or rel_drop < loss_rtol:
            moved = density_matrix_project((x - step * g_x).reshape(dim, dim),
                                           par_mat).reshape(-1)
            projections += 1
            grad_norm = float(np.linalg.norm(x - moved)) / step
            if grad_norm < grad_tol or rel_drop < loss_rtol:
                converged = True
                break

    rho_mat = density_matrix_project(best_x.reshape(dim, dim), par_mat)
    projections += 1
    rho_est = DensityMatrix(FockSpace(dim), rho_mat)
    if not converged:
        warnings.warn(f"reconstruction hit the {max_iter}-iteration cap "
                      f"(grad norm {grad_norm:.2e})", UserWarning, stacklevel=2)
    return ReconstructionResult(
        rho_est, best_loss * data_scale ** 2, it, grad_norm, projections,
        converged, parity,
        metadata={"dim": dim, "model_dim": md, "regularization": regularization,
                  "phase_offset": phase_offset, "data_scale": data_scale,
                  "free_parameters": free,
                  "n_measurements": dataset.n_measurements})
