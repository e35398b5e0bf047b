"""Physics diagnostics and protocols built on the simulation layers.

Wigner maps, state fidelity, the classical effective potential with its
self-oscillation threshold, drive-dependent eigenstructure, the adiabatic
cat-preparation protocol, and recovery of drive parameters from measured
photon-number curves.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.optimize

from .core import (DensityMatrix, FockSpace, KpoParams, StateVector, cat_state,
                   displacement_op, fock_state, kpo_hamiltonian, parity_op,
                   warn_if_truncated)
from .dynamics import DriveProfile, Trajectory, propagate, propagate_expm
from .exceptions import (ConvergenceError, DimensionMismatchError,
                         TruncationWarning, ValidationError)

WIGNER_BOUND = 2.0 / np.pi


@dataclass(frozen=True, eq=False)
class WignerMap:
    """Wigner function sampled on a square phase-space lattice.

    values[i, j] is W at alpha = re_axis[j] + 1i * im_axis[i]. The
    displaced-parity convention bounds |W| by 2/pi and normalizes the full
    phase-space integral to the state's trace.
    """

    re_axis: np.ndarray
    im_axis: np.ndarray
    values: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        re = np.asarray(self.re_axis, dtype=float)
        im = np.asarray(self.im_axis, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if v.shape != (im.size, re.size):
            raise ValidationError(f"values shape {v.shape} does not match axes "
                                  f"({im.size}, {re.size})")
        if np.any(np.abs(v) > WIGNER_BOUND + 1e-8):
            raise ValidationError(
                f"Wigner values reach {np.abs(v).max():.4f}, beyond 2/pi")
        object.__setattr__(self, "re_axis", re)
        object.__setattr__(self, "im_axis", im)
        object.__setattr__(self, "values", v)

    def integral(self) -> float:
        """Phase-space integral by the trapezoid rule; 1 for a unit-trace
        state once the grid covers its support."""
        inner = np.trapezoid(self.values, self.re_axis, axis=1)
        return float(np.trapezoid(inner, self.im_axis))

    def min_value(self) -> float:
        return float(self.values.min())

    def to_csv(self, path) -> None:
        re_g, im_g = np.meshgrid(self.re_axis, self.im_axis)
        rows = np.column_stack([re_g.ravel(), im_g.ravel(), self.values.ravel()])
        np.savetxt(path, rows, delimiter=",", header="re_alpha,im_alpha,wigner",
                   comments="", fmt="%.12e")

    def to_json_dict(self) -> dict:
        return {"re_axis": self.re_axis.tolist(), "im_axis": self.im_axis.tolist(),
                "values": self.values.tolist(), "metadata": self.metadata}


def _wigner_axis(rho: DensityMatrix, grid) -> np.ndarray:
    if grid is None or isinstance(grid, (int, np.integer)):
        points = 61 if grid is None else int(grid)
        if points < 2:
            raise ValidationError("Wigner grid needs at least 2 points")
        n_mean = float(rho.populations() @ np.arange(rho.space.dim))
        half = 1.5 * np.sqrt(max(n_mean, 0.0)) + 2.5
        return np.linspace(-half, half, points)
    axis = np.asarray(grid, dtype=float).reshape(-1)
    if axis.size < 2 or not np.all(np.diff(axis) > 0):
        raise ValidationError("Wigner axis must be increasing with >= 2 points")
    return axis


def wigner(rho: DensityMatrix, grid=None,
           model_dim: int | None = None) -> WignerMap:
    """W(alpha) = (2/pi) Tr[D(-alpha) rho D(alpha) P].

    grid: None for an automatic extent from <n>, an int for point count on
    the automatic extent, or an explicit 1-D axis used for both quadratures.
    The displacement acts in an enlarged model space so the map stays exact
    for states stored at small dims; extents too small to hold the state are
    reported by the integral in the metadata rather than silently wrong.
    """
    axis = _wigner_axis(rho, grid)
    d = rho.space.dim
    amax = float(np.hypot(axis[0], axis[-1]))
    if model_dim is None:
        need = int(np.ceil(amax ** 2 + 5.0 * amax + 6.0))
        model_dim = max(d + 8, need)
    if model_dim < d:
        raise ValidationError(f"model_dim {model_dim} below state dim {d}")
    mspace = FockSpace(model_dim)
    signs = np.where(np.arange(model_dim) % 2 == 0, 1.0, -1.0)
    vals = np.empty((axis.size, axis.size))
    for i, b in enumerate(axis):
        for j, a in enumerate(axis):
            dop = displacement_op(mspace, -complex(a, b), check="none").mat
            block = dop[:, :d]
            pops = np.real(np.einsum("nk,kl,nl->n", block, rho.mat,
                                     block.conj(), optimize=True))
            vals[i, j] = (2.0 / np.pi) * float(signs @ pops)
    wm = WignerMap(axis, axis, vals, metadata={"model_dim": model_dim})
    wm.metadata["integral"] = wm.integral()
    return wm


def _as_density(state) -> DensityMatrix:
    if isinstance(state, DensityMatrix):
        return state
    if isinstance(state, StateVector):
        return state.to_density_matrix()
    raise ValidationError(f"expected a state, got {type(state).__name__}")


def fidelity(rho, sigma) -> float:
    """Uhlmann fidelity F = (Tr sqrt(sqrt(rho) sigma sqrt(rho)))^2.

    Accepts density matrices or pure states; for pure sigma this reduces to
    <psi|rho|psi>.
    """
    r = _as_density(rho)
    s = _as_density(sigma)
    if r.space.dim != s.space.dim:
        raise DimensionMismatchError(
            f"fidelity needs matching dims, got {r.space.dim} and {s.space.dim}")
    vals, vecs = np.linalg.eigh(r.mat)
    sq = (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.conj().T
    inner = sq @ s.mat @ sq
    ev = np.linalg.eigvalsh(0.5 * (inner + inner.conj().T))
    f = float(np.sum(np.sqrt(np.clip(ev, 0.0, None))) ** 2)
    return min(f, 1.0)


@dataclass(frozen=True, eq=False)
class PotentialLandscape:
    """Classical energy surface V(alpha) with its stationary structure."""

    re_axis: np.ndarray
    im_axis: np.ndarray
    values: np.ndarray
    classification: str            # "single-max" or "double-well"
    stationary_points: tuple       # ((alpha, V(alpha)), ...)
    params: KpoParams
    beta: float


def threshold_beta(params: KpoParams) -> float:
    """Classical self-oscillation threshold: drive amplitude |detuning|/2."""
    return abs(params.detuning) / 2.0


def classical_fixed_point(params: KpoParams, beta: float) -> float:
    """Squared amplitude |alpha|^2 of the classical oscillation: zero below
    threshold, (detuning + 2 beta)/chi above."""
    if beta < 0:
        raise ValidationError("drive amplitude must be >= 0")
    if 2.0 * beta <= abs(params.detuning):
        return 0.0
    return (params.detuning + 2.0 * beta) / params.chi


def effective_potential(params: KpoParams, beta: float,
                        grid=None) -> PotentialLandscape:
    """Coherent-state energy surface
        V(alpha) = Delta |alpha|^2 - (chi/2)|alpha|^4 + 2 beta |alpha|^2 cos(2 theta).

    Stationary radii come from the closed form |alpha|^2 = (Delta +
    2 beta cos2theta)/chi evaluated on the two symmetry axes; the surface is
    classified double-well once 2 beta exceeds |Delta| and the origin
    destabilizes.
    """
    if beta < 0:
        raise ValidationError("drive amplitude must be >= 0")
    delta, chi = params.detuning, params.chi
    if grid is None or isinstance(grid, (int, np.integer)):
        points = 101 if grid is None else int(grid)
        r_ref = np.sqrt(max((abs(delta) + 2.0 * beta) / chi, 1.0 / chi))
        half = 1.6 * r_ref + 0.5
        axis = np.linspace(-half, half, points)
    else:
        axis = np.asarray(grid, dtype=float).reshape(-1)
    re_g, im_g = np.meshgrid(axis, axis)
    r2 = re_g ** 2 + im_g ** 2
    vals = delta * r2 - 0.5 * chi * r2 ** 2 + 2.0 * beta * (re_g ** 2 - im_g ** 2)

    stationary = [(0.0 + 0.0j, 0.0)]
    for cos2t, direction in ((1.0, 1.0 + 0.0j), (-1.0, 1.0j)):
        r_sq = (delta + 2.0 * beta * cos2t) / chi
        if r_sq > 0:
            r = np.sqrt(r_sq)
            v_here = (delta + 2.0 * beta * cos2t) * r_sq - 0.5 * chi * r_sq ** 2
            stationary += [(direction * r, v_here), (-direction * r, v_here)]
    cls = "double-well" if 2.0 * beta > abs(delta) else "single-max"
    return PotentialLandscape(axis, axis, vals, cls, tuple(stationary),
                              params, beta)


@dataclass(frozen=True, eq=False)
class SpectrumVsDrive:
    """Eigenvalue tracks against drive amplitude, continuity-matched within
    each parity sector and sorted top of spectrum first at the initial beta."""

    betas: np.ndarray
    energies: np.ndarray           # (n_tracks, n_betas)
    parities: np.ndarray           # (n_tracks,), +1 or -1
    metadata: dict = field(default_factory=dict)

    def to_csv(self, path) -> None:
        rows = []
        for t in range(self.energies.shape[0]):
            for b in range(self.betas.size):
                rows.append((self.betas[b], t, self.parities[t],
                             self.energies[t, b]))
        np.savetxt(path, np.asarray(rows), delimiter=",",
                   header="beta,track,parity,energy", comments="",
                   fmt=["%.12e", "%d", "%d", "%.12e"])


def parity_block_eigh(space: FockSpace, params: KpoParams, beta: float):
    """Eigendecomposition of the drive Hamiltonian split by photon parity.

    Returns (even_vals, even_vecs, odd_vals, odd_vecs), eigenvalues
    descending, eigenvectors embedded back at full dim as columns.
    """
    h = kpo_hamiltonian(space, params, beta).mat
    out = []
    for start in (0, 1):
        idx = np.arange(start, space.dim, 2)
        vals, vecs = np.linalg.eigh(h[np.ix_(idx, idx)])
        order = np.argsort(vals)[::-1]
        vals = vals[order]
        full = np.zeros((space.dim, idx.size), dtype=complex)
        full[idx, :] = vecs[:, order]
        out += [vals, full]
    return tuple(out)


def eigenspectrum_vs_beta(space: FockSpace, params: KpoParams, betas,
                          n_levels: int | None = None) -> SpectrumVsDrive:
    """Parity-resolved eigenvalue tracks over a drive-amplitude grid.

    Within each parity sector, adjacent-grid eigenvectors are matched by
    maximal overlap (ties by eigenvalue proximity), so tracks follow avoided
    crossings instead of re-sorting through them. n_levels keeps that many
    tracks per sector from the top of the spectrum; default keeps all.
    """
    bs = np.asarray(betas, dtype=float).reshape(-1)
    if bs.size < 1:
        raise ValidationError("beta grid is empty")
    n_even = (space.dim + 1) // 2
    n_odd = space.dim // 2
    keep_e = n_even if n_levels is None else min(n_levels, n_even)
    keep_o = n_odd if n_levels is None else min(n_levels, n_odd)

    tracks = {1: np.empty((keep_e, bs.size)), -1: np.empty((keep_o, bs.size))}
    prev: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    truncated = False
    for b_i, beta in enumerate(bs):
        ev, evec, ov, ovec = parity_block_eigh(space, params, float(beta))
        for par, vals, vecs, keep in ((1, ev, evec, keep_e),
                                      (-1, ov, ovec, keep_o)):
            if b_i > 0:
                pv, pvec = prev[par]
                overlap = np.abs(pvec.conj().T @ vecs) ** 2
                cost = -overlap + 1e-12 * np.abs(pv[:, None] - vals[None, :])
                _, order = scipy.optimize.linear_sum_assignment(cost)
                vals, vecs = vals[order], vecs[:, order]
            tracks[par][:, b_i] = vals[:keep]
            prev[par] = (vals, vecs)
            if np.any(np.abs(vecs[-3:, :keep]) ** 2 > 1e-6):
                truncated = True
    if truncated:
        warnings.warn("eigenvectors in the reported tracks carry > 1e-6 weight "
                      "on the top Fock levels; enlarge the space",
                      TruncationWarning, stacklevel=2)
    energies = np.vstack([tracks[1], tracks[-1]])
    parities = np.concatenate([np.ones(keep_e, dtype=int),
                               -np.ones(keep_o, dtype=int)])
    return SpectrumVsDrive(bs, energies, parities,
                           metadata={"dim": space.dim,
                                     "detuning": params.detuning,
                                     "chi": params.chi})


def beta_max_for_cat_amplitude(params: KpoParams, alpha: float) -> float:
    """Drive amplitude placing the potential maxima at |alpha|:
    beta = (chi alpha^2 - detuning)/2."""
    if alpha <= 0:
        raise ValidationError("cat amplitude must be positive")
    return 0.5 * (params.chi * alpha ** 2 - params.detuning)


@dataclass(frozen=True, eq=False)
class CatPrepResult:
    final_state: DensityMatrix
    target: StateVector
    fidelity: float
    alpha: float
    cat_size: float
    beta_max: float
    trajectory: Trajectory


def adiabatic_cat_prep(params: KpoParams, beta_max: float, t_max: float,
                       t_drift: float = 0.0, space: FockSpace | None = None,
                       record: int = 81, rtol: float = 1e-8,
                       atol: float = 1e-10) -> CatPrepResult:
    """Ramp the two-photon drive on vacuum and compare against the ideal cat.

    The drive follows beta_max sin^2(pi t / 2 t_max), ending at full
    amplitude; afterwards both the state and the target get the drive-off
    drift for t_drift (a number-diagonal phase map, so the reported fidelity
    is drift-independent, but the returned state shows the same frame the
    readout sees). The target amplitude comes from the potential maximum
    alpha = sqrt((detuning + 2 beta_max)/chi), not from a fit to the final
    state, so the fidelity is a genuine cross-check.
    """
    if params.detuning >= 0:
        warnings.warn("non-negative detuning: vacuum need not be the top "
                      "eigenstate and the ramp may leave the cat branch",
                      UserWarning, stacklevel=2)
    if t_max <= 0:
        raise ValidationError("ramp duration must be positive")
    if t_drift < 0:
        raise ValidationError("drift duration must be >= 0")
    amp_sq = (params.detuning + 2.0 * beta_max) / params.chi
    if amp_sq <= 0:
        raise ValidationError(
            f"(detuning + 2 beta_max)/chi = {amp_sq:.3g} <= 0: the potential "
            "has no finite-amplitude maxima to prepare a cat in")
    alpha = float(np.sqrt(amp_sq))
    if space is None:
        space = FockSpace(max(18, int(np.ceil(amp_sq + 5.0 * alpha + 8.0))))

    drive = DriveProfile.sin2_ramp(beta_max, t_max)
    vac = fock_state(space, 0).to_density_matrix()
    traj = propagate(vac, params, drive, t_max, record=record,
                     rtol=rtol, atol=atol)
    rho_end = traj.final()

    target = cat_state(space, alpha, +1)
    if t_drift > 0:
        n = np.arange(space.dim, dtype=float)
        phases = np.exp(-1j * (params.detuning * n
                               - 0.5 * params.chi * n * (n - 1.0)) * t_drift)
        rho_end = DensityMatrix(space, rho_end.mat * np.outer(phases,
                                                              phases.conj()))
        target = StateVector(space, phases * target.amplitudes)
    fid = fidelity(rho_end, target)
    if fid < 0.8:
        warnings.warn(f"cat preparation fidelity {fid:.3f} < 0.8; ramp speed "
                      "and loss budget need attention", UserWarning,
                      stacklevel=2)
    return CatPrepResult(rho_end, target, fid, alpha, 4.0 * alpha ** 2,
                         beta_max, traj)


@dataclass(frozen=True, eq=False)
class DriveFitResult:
    detuning: float
    kappa: float
    conversion: float              # drive amplitude per voltage unit
    loss: float
    n_evaluations: int
    at_boundary: bool
    metadata: dict = field(default_factory=dict)


def _fit_bounds_from_guess(p0: float) -> tuple[float, float]:
    if p0 == 0:
        raise ValidationError("zero initial guess needs explicit bounds")
    lo, hi = p0 / 4.0, p0 * 4.0
    return (min(lo, hi), max(lo, hi))


def fit_drive_params(times: np.ndarray, curves: np.ndarray,
                     voltages: np.ndarray, chi: float,
                     initial: tuple[float, float, float],
                     bounds=None, fix_kappa: float | None = None,
                     dim: int = 20,
                     max_evaluations: int = 2000) -> DriveFitResult:
    """Recover (detuning, kappa, drive conversion) from photon-number curves.

    curves[i] is the measured <n>(t) for drive voltage voltages[i]; all
    curves share one parameter triple and one uniform time grid. The model
    propagates vacuum with constant drive conversion*voltage and compares in
    summed squared error; the search is a bounded derivative-free simplex
    from the supplied initial guess (the loss is smooth but the simulator is
    a black box). fix_kappa freezes the loss rate and fits the remaining two.
    """
    t = np.asarray(times, dtype=float)
    y = np.atleast_2d(np.asarray(curves, dtype=float))
    volts = np.asarray(voltages, dtype=float).reshape(-1)
    if y.shape != (volts.size, t.size):
        raise ValidationError(f"curves must be ({volts.size}, {t.size}), "
                              f"got {y.shape}")
    if np.unique(np.round(volts, 12)).size < 1 or volts.size < 1:
        raise ValidationError("need at least one drive voltage")
    if fix_kappa is None and np.unique(np.round(volts, 12)).size < 2:
        raise ValidationError("full three-parameter fits need >= 2 distinct "
                              "drive amplitudes")
    d0, k0, c0 = (float(v) for v in initial)
    if bounds is None:
        bounds = (_fit_bounds_from_guess(d0),
                  _fit_bounds_from_guess(k0 if fix_kappa is None else 1.0),
                  _fit_bounds_from_guess(c0))
    space = FockSpace(dim)
    vac = fock_state(space, 0).to_density_matrix()

    def simulate(delta: float, kappa: float, conv: float) -> float:
        params = KpoParams(detuning=delta, chi=chi, kappa=kappa)
        err = 0.0
        for i, v in enumerate(volts):
            traj = propagate_expm(vac, params, conv * v, t)
            err += float(np.sum((traj.expectations["n"] - y[i]) ** 2))
        return err

    if fix_kappa is None:
        x0 = np.array([d0, k0, c0])
        box = list(bounds)

        def objective(x):
            return simulate(x[0], x[1], x[2])
    else:
        x0 = np.array([d0, c0])
        box = [bounds[0], bounds[2]]

        def objective(x):
            return simulate(x[0], float(fix_kappa), x[1])

    xatol = 1e-9 * max(1.0, float(np.max(np.abs(x0))))
    n_evals = 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", TruncationWarning)
        # The transient <n> rings at a detuning-set frequency, so the loss has
        # period-slip local minima spaced ~10% apart in detuning. A coarse
        # detuning scan around the guess picks the right period before the
        # simplex refines within it.
        lo, hi = box[0]
        scan = np.clip(x0[0] * np.linspace(0.75, 1.3, 12), lo, hi)
        scan_loss = [objective(np.concatenate([[dv], x0[1:]])) for dv in scan]
        n_evals += scan.size
        x0 = np.concatenate([[scan[int(np.argmin(scan_loss))]], x0[1:]])

        # Restart the simplex at each incumbent: a collapsed simplex cannot
        # move along the narrow (detuning, conversion) valley, a fresh one can.
        evals_left = max_evaluations - n_evals
        xs, best_loss = x0, np.inf
        res = None
        for _ in range(6):
            res = scipy.optimize.minimize(
                objective, xs, method="Nelder-Mead", bounds=box,
                options={"xatol": xatol, "fatol": 1e-14,
                         "maxfev": evals_left})
            n_evals += int(res.nfev)
            evals_left = max_evaluations - n_evals
            improved = res.fun < best_loss * (1.0 - 1e-10)
            xs, best_loss = res.x, min(best_loss, float(res.fun))
            if evals_left <= 0 or (res.success and not improved):
                break
    if not res.success:
        raise ConvergenceError(f"drive-parameter fit did not converge: "
                               f"{res.message}")
    at_edge = any(
        min(abs(xv - lo), abs(hi - xv)) < 1e-3 * (hi - lo)
        for xv, (lo, hi) in zip(xs, box))
    if fix_kappa is None:
        d_fit, k_fit, c_fit = (float(v) for v in xs)
    else:
        d_fit, c_fit = (float(v) for v in xs)
        k_fit = float(fix_kappa)
    # one clean evaluation at the optimum so truncation complaints surface
    final_loss = simulate(d_fit, k_fit, c_fit)
    if at_edge:
        warnings.warn("fitted parameters sit at the search-box boundary; "
                      "widen the bounds or revisit the initial guess",
                      UserWarning, stacklevel=2)
    return DriveFitResult(d_fit, k_fit, c_fit, final_loss, n_evals,
                          at_edge,
                          metadata={"dim": dim, "fixed_kappa": fix_kappa,
                                    "bounds": [tuple(b) for b in box],
                                    "message": str(res.message)})
