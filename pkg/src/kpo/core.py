"""Fock-space primitives for a driven dissipative Kerr parametric oscillator.

Internal convention: angular frequencies in rad/us, time in us. Constructor
classmethods and the CLI accept ordinary frequencies in MHz and times in ns
and convert at the boundary. Circuit energies are E/h in GHz.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .exceptions import (
    DimensionMismatchError,
    TruncationWarning,
    ValidationError,
)

# Unit helpers: multiplying an ordinary frequency by MHz yields rad/us.
MHz = 2.0 * np.pi
GHz = 2.0 * np.pi * 1e3
ns = 1e-3
us = 1.0

# Measured device values used as defaults throughout.
DEFAULT_CHI_MHZ = 17.3
DEFAULT_KAPPA_MHZ = 1.1
DEFAULT_DIM = 30

HERMITICITY_ATOL = 1e-10
TRACE_ATOL = 1e-8
EIGENVALUE_FLOOR = -1e-8
UNITARITY_ATOL = 1e-10
TRUNCATION_TOL = 1e-6


def _as_complex(mat) -> np.ndarray:
    out = np.ascontiguousarray(mat, dtype=complex)
    return out


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class FockSpace:
    """Truncated harmonic-oscillator Hilbert space with `dim` levels."""

    dim: int

    def __post_init__(self):
        if not isinstance(self.dim, (int, np.integer)) or self.dim < 2:
            raise ValidationError(f"Fock dimension must be an integer >= 2, got {self.dim!r}")
        object.__setattr__(self, "dim", int(self.dim))


def _check_same_space(a, b):
    if a.space.dim != b.space.dim:
        raise DimensionMismatchError(
            f"dimension mismatch: {a.space.dim} vs {b.space.dim}"
        )


@dataclass(frozen=True, eq=False)
class Operator:
    """Dense operator on a FockSpace."""

    space: FockSpace
    mat: np.ndarray

    def __post_init__(self):
        mat = _as_complex(self.mat)
        if mat.shape != (self.space.dim, self.space.dim):
            raise DimensionMismatchError(
                f"operator shape {mat.shape} does not match dim {self.space.dim}"
            )
        object.__setattr__(self, "mat", _freeze(mat))

    @property
    def dim(self) -> int:
        return self.space.dim

    def dag(self) -> "Operator":
        return Operator(self.space, self.mat.conj().T)

    def is_hermitian(self, rtol: float = 1e-12) -> bool:
        scale = np.linalg.norm(self.mat) or 1.0
        return np.linalg.norm(self.mat - self.mat.conj().T) <= rtol * scale

    def __matmul__(self, other: "Operator") -> "Operator":
        _check_same_space(self, other)
        return Operator(self.space, self.mat @ other.mat)


@dataclass(frozen=True, eq=False)
class StateVector:
    """Pure state; amplitudes are validated to unit norm within 1e-10."""

    space: FockSpace
    amplitudes: np.ndarray

    def __post_init__(self):
        amps = np.ascontiguousarray(self.amplitudes, dtype=complex).reshape(-1)
        if amps.shape != (self.space.dim,):
            raise DimensionMismatchError(
                f"state length {amps.shape[0]} does not match dim {self.space.dim}"
            )
        nrm = np.linalg.norm(amps)
        if abs(nrm - 1.0) > 1e-10:
            raise ValidationError(f"state norm {nrm!r} is not 1 within 1e-10")
        object.__setattr__(self, "amplitudes", _freeze(amps))

    @property
    def dim(self) -> int:
        return self.space.dim

    def populations(self) -> np.ndarray:
        return np.abs(self.amplitudes) ** 2

    def overlap(self, other: "StateVector") -> complex:
        _check_same_space(self, other)
        return complex(np.vdot(self.amplitudes, other.amplitudes))

    def to_density_matrix(self) -> "DensityMatrix":
        return DensityMatrix(self.space, np.outer(self.amplitudes, self.amplitudes.conj()))


@dataclass(frozen=True, eq=False)
class DensityMatrix:
    """Mixed state. Construction rejects non-Hermitian, non-unit-trace or
    negative matrices (tolerances 1e-10 / 1e-8 / -1e-8)."""

    space: FockSpace
    mat: np.ndarray
    validate: bool = field(default=True, repr=False)

    def __post_init__(self):
        mat = _as_complex(self.mat)
        if mat.shape != (self.space.dim, self.space.dim):
            raise DimensionMismatchError(
                f"density matrix shape {mat.shape} does not match dim {self.space.dim}"
            )
        if self.validate:
            herm = np.abs(mat - mat.conj().T).max()
            if herm > HERMITICITY_ATOL:
                raise ValidationError(f"density matrix not Hermitian: max deviation {herm:.2e}")
            tr = mat.trace()
            if abs(tr - 1.0) > TRACE_ATOL:
                raise ValidationError(f"density matrix trace {tr!r} is not 1 within 1e-8")
            lo = float(np.linalg.eigvalsh(0.5 * (mat + mat.conj().T)).min())
            if lo < EIGENVALUE_FLOOR:
                raise ValidationError(f"density matrix has eigenvalue {lo:.2e} below -1e-8")
        object.__setattr__(self, "mat", _freeze(mat))

    @property
    def dim(self) -> int:
        return self.space.dim

    def populations(self) -> np.ndarray:
        return np.real(np.diag(self.mat)).copy()

    def purity(self) -> float:
        return float(np.real(np.trace(self.mat @ self.mat)))

    def expect(self, op: Operator) -> complex:
        _check_same_space(self, op)
        return complex(np.trace(op.mat @ self.mat))


@dataclass(frozen=True)
class KpoParams:
    """Rotating-frame oscillator parameters, angular units (rad/us).

    detuning is the oscillator frequency relative to half the parametric
    pump, chi the Kerr nonlinearity, kappa the total energy decay rate.
    """

    detuning: float
    chi: float
    kappa: float

    def __post_init__(self):
        for name in ("detuning", "chi", "kappa"):
            v = getattr(self, name)
            if not np.isfinite(v):
                raise ValidationError(f"{name} must be finite, got {v!r}")
        if self.chi <= 0:
            raise ValidationError(f"chi must be > 0, got {self.chi!r}")
        if self.kappa < 0:
            raise ValidationError(f"kappa must be >= 0, got {self.kappa!r}")

    @classmethod
    def from_mhz(cls, detuning_mhz: float, chi_mhz: float = DEFAULT_CHI_MHZ,
                 kappa_mhz: float = DEFAULT_KAPPA_MHZ) -> "KpoParams":
        return cls(detuning=detuning_mhz * MHz, chi=chi_mhz * MHz, kappa=kappa_mhz * MHz)


@dataclass(frozen=True)
class CircuitParams:
    """SQUID-array resonator parameters. Energies are E/h in GHz; phi_e is the
    external flux in units of the flux quantum."""

    e_c: float
    e_j_max: float
    n_squids: int
    delta_e_j: float = 0.0
    phi_e: float = 0.0

    def __post_init__(self):
        if self.e_c <= 0 or self.e_j_max <= 0:
            raise ValidationError("charging and Josephson energies must be positive")
        if int(self.n_squids) < 1 or self.n_squids != int(self.n_squids):
            raise ValidationError(f"n_squids must be a positive integer, got {self.n_squids!r}")
        object.__setattr__(self, "n_squids", int(self.n_squids))
        if abs(self.delta_e_j) > self.e_j_max:
            raise ValidationError("flux-pump modulation cannot exceed the Josephson energy")
        if not np.isfinite(self.phi_e):
            raise ValidationError("phi_e must be finite")


@dataclass(frozen=True)
class CircuitDerivation:
    """Oscillator parameters derived from circuit energies.

    Frequencies in rad/us; n0_sq and phi0_sq are the dimensionless zero-point
    charge and phase variances.
    """

    omega_c_bare: float
    omega_c: float
    chi: float
    beta: float
    n0_sq: float
    phi0_sq: float


def circuit_to_kpo(circuit: CircuitParams) -> CircuitDerivation:
    """Reduce a flux-pumped SQUID-array resonator to oscillator parameters.

    The per-SQUID Josephson energy is evaluated at the flux operating point,
    E_J = E_J_max |cos(pi phi_e)|. The Kerr coefficient is E_C/N^2, the bare
    frequency sqrt(8 E_C E_J / N), the drive rate omega_bare dE_J/(8 E_J), and
    the dressed frequency omega_bare - chi.
    """
    e_j = circuit.e_j_max * abs(math.cos(math.pi * circuit.phi_e))
    if e_j <= 0:
        raise ValidationError("Josephson energy vanishes at this flux point")
    n = circuit.n_squids
    chi_ghz = circuit.e_c / n**2
    omega_bare_ghz = math.sqrt(8.0 * circuit.e_c * e_j / n)
    beta_ghz = omega_bare_ghz * circuit.delta_e_j / (8.0 * e_j)
    n0_sq = math.sqrt(e_j / (32.0 * n * circuit.e_c))
    phi0_sq = math.sqrt(2.0 * n * circuit.e_c / e_j)
    return CircuitDerivation(
        omega_c_bare=omega_bare_ghz * GHz,
        omega_c=(omega_bare_ghz - chi_ghz) * GHz,
        chi=chi_ghz * GHz,
        beta=beta_ghz * GHz,
        n0_sq=n0_sq,
        phi0_sq=phi0_sq,
    )


def flux_tuning(omega_c_max: float, phi_e: float) -> float:
    """Resonator frequency at external flux phi_e (units of the flux quantum),
    omega_c_max sqrt|cos(pi phi_e)|. Units follow omega_c_max."""
    return omega_c_max * math.sqrt(abs(math.cos(math.pi * phi_e)))


@dataclass(frozen=True, eq=False)
class DriveProfile:
    """Parametric drive amplitude beta(t) in rad/us, t in us.

    kinds: "constant" (beta), "sin2_ramp" (sin^2 ramp from 0 to beta_max over
    t_ramp, held afterwards), "ramp_hold" (same ramp, held for t_hold, then
    off), "sampled" (linear interpolation of a table).
    """

    kind: str
    beta: float = 0.0
    beta_max: float = 0.0
    t_ramp: float = 0.0
    t_hold: float = 0.0
    times: np.ndarray | None = None
    values: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("constant", "sin2_ramp", "ramp_hold", "sampled"):
            raise ValidationError(f"unknown drive kind {self.kind!r}")
        for name in ("beta", "beta_max", "t_ramp", "t_hold"):
            if not np.isfinite(getattr(self, name)):
                raise ValidationError(f"{name} must be finite")
        if self.kind in ("sin2_ramp", "ramp_hold") and self.t_ramp <= 0:
            raise ValidationError("ramp duration must be positive")
        if self.kind == "sampled":
            t = np.asarray(self.times, dtype=float)
            v = np.asarray(self.values, dtype=float)
            if t.ndim != 1 or t.shape != v.shape or t.size < 2:
                raise ValidationError("sampled drive needs matching 1-D times/values")
            if not np.all(np.diff(t) > 0):
                raise ValidationError("sampled drive times must be strictly increasing")
            if not (np.all(np.isfinite(t)) and np.all(np.isfinite(v))):
                raise ValidationError("sampled drive table must be finite")
            object.__setattr__(self, "times", _freeze(t.copy()))
            object.__setattr__(self, "values", _freeze(v.copy()))

    @classmethod
    def constant(cls, beta: float) -> "DriveProfile":
        return cls(kind="constant", beta=beta)

    @classmethod
    def sin2_ramp(cls, beta_max: float, t_ramp: float) -> "DriveProfile":
        return cls(kind="sin2_ramp", beta_max=beta_max, t_ramp=t_ramp)

    @classmethod
    def ramp_hold(cls, beta_max: float, t_ramp: float, t_hold: float) -> "DriveProfile":
        return cls(kind="ramp_hold", beta_max=beta_max, t_ramp=t_ramp, t_hold=t_hold)

    @classmethod
    def sampled(cls, times, values) -> "DriveProfile":
        return cls(kind="sampled", times=np.asarray(times, float),
                   values=np.asarray(values, float))

    def __call__(self, t: float) -> float:
        if self.kind == "constant":
            return self.beta
        if self.kind == "sin2_ramp":
            x = np.clip(t / self.t_ramp, 0.0, 1.0)
            return self.beta_max * math.sin(0.5 * math.pi * x) ** 2
        if self.kind == "ramp_hold":
            if t < 0:
                return 0.0
            if t <= self.t_ramp:
                return self.beta_max * math.sin(0.5 * math.pi * t / self.t_ramp) ** 2
            if t <= self.t_ramp + self.t_hold:
                return self.beta_max
            return 0.0
        return float(np.interp(t, self.times, self.values))


# --- operator builders -------------------------------------------------

def annihilation_op(space: FockSpace) -> Operator:
    """Bosonic annihilation operator; <n-1|a|n> = sqrt(n)."""
    mat = np.diag(np.sqrt(np.arange(1.0, space.dim)), k=1)
    return Operator(space, mat)


def creation_op(space: FockSpace) -> Operator:
    return annihilation_op(space).dag()


def number_op(space: FockSpace) -> Operator:
    return Operator(space, np.diag(np.arange(space.dim, dtype=float)))


def identity_op(space: FockSpace) -> Operator:
    return Operator(space, np.eye(space.dim))


def parity_op(space: FockSpace) -> Operator:
    """Photon-number parity exp(i pi n), diagonal +-1."""
    return Operator(space, np.diag((-1.0) ** np.arange(space.dim)))


def displacement_op(space: FockSpace, alpha: complex, check: str = "warn") -> Operator:
    """Displacement D(alpha) = expm(alpha a+ - alpha* a) on the truncated space.

    The result is exactly unitary in the window. Truncation is assessed by
    rebuilding D in a padded space and measuring how much weight the true
    displaced Fock states of the lowest ceil(dim/2) columns leak past the
    window; deviations beyond 1e-6 warn (check="warn"), raise (check="raise")
    or are ignored (check="none").
    """
    if check not in ("warn", "raise", "none"):
        raise ValueError(f"check must be warn/raise/none, got {check!r}")
    dim = space.dim
    alpha = complex(alpha)
    gen = np.zeros((dim, dim), dtype=complex)
    sq = np.sqrt(np.arange(1.0, dim))
    gen[np.arange(1, dim), np.arange(dim - 1)] = alpha * sq        # alpha a+
    gen[np.arange(dim - 1), np.arange(1, dim)] = -np.conj(alpha) * sq
    mat = expm(gen)
    dev = np.abs(mat.conj().T @ mat - np.eye(dim)).max()
    if dev > UNITARITY_ATOL:
        raise ValidationError(f"displacement not unitary within 1e-10 (deviation {dev:.2e})")
    if check != "none":
        pad = dim + max(8, int(math.ceil(4.0 * abs(alpha))))
        big = np.zeros((pad, pad), dtype=complex)
        sqb = np.sqrt(np.arange(1.0, pad))
        big[np.arange(1, pad), np.arange(pad - 1)] = alpha * sqb
        big[np.arange(pad - 1), np.arange(1, pad)] = -np.conj(alpha) * sqb
        cols = int(math.ceil(dim / 2))
        weight_in = np.linalg.norm(expm(big)[:dim, :cols], axis=0)
        worst = float(np.abs(weight_in - 1.0).max())
        if worst > TRUNCATION_TOL:
            msg = (f"displacement |alpha|={abs(alpha):.3f} leaks {worst:.2e} of a "
                   f"low-column displaced state beyond dim={dim}")
            if check == "raise":
                raise ValidationError(msg)
            warnings.warn(msg, TruncationWarning, stacklevel=2)
    return Operator(space, mat)


def kpo_hamiltonian(space: FockSpace, params: KpoParams, beta: float) -> Operator:
    """Rotating-frame Hamiltonian  delta n - (chi/2) a+ a+ a a + beta (a^2 + a+^2)."""
    if not np.isfinite(beta):
        raise ValidationError("beta must be finite")
    n = np.arange(space.dim, dtype=float)
    mat = np.diag(params.detuning * n - 0.5 * params.chi * n * (n - 1.0)).astype(complex)
    if beta != 0.0:
        a = annihilation_op(space).mat
        a2 = a @ a
        mat = mat + beta * (a2 + a2.conj().T)
    scale = np.linalg.norm(mat) or 1.0
    if np.linalg.norm(mat - mat.conj().T) > 1e-12 * scale:
        raise ValidationError("Hamiltonian lost Hermiticity")
    return Operator(space, mat)


# --- state builders -----------------------------------------------------

def fock_state(space: FockSpace, n: int) -> StateVector:
    if not (0 <= n < space.dim):
        raise ValidationError(f"Fock index {n} outside [0, {space.dim})")
    amps = np.zeros(space.dim, dtype=complex)
    amps[n] = 1.0
    return StateVector(space, amps)


def coherent_state(space: FockSpace, alpha: complex) -> StateVector:
    """Coherent state from closed-form amplitudes alpha^n/sqrt(n!), renormalized
    on the truncated window (not built from the displacement matrix)."""
    alpha = complex(alpha)
    n = np.arange(space.dim)
    # log-domain amplitudes to stay finite for large alpha and n
    log_fact = np.concatenate(([0.0], np.cumsum(np.log(np.arange(1.0, space.dim)))))
    mag = np.exp(n * np.log(abs(alpha)) - 0.5 * log_fact) if alpha != 0 else (n == 0).astype(float)
    phase = np.exp(1j * n * np.angle(alpha)) if alpha != 0 else np.ones(space.dim)
    amps = mag * phase
    amps = amps / np.linalg.norm(amps)
    lost = float(np.sum(np.abs(amps[-3:]) ** 2))
    if lost > TRUNCATION_TOL:
        warnings.warn(
            f"coherent alpha={alpha:.3f} keeps {lost:.2e} weight in the top three levels "
            f"of dim={space.dim}", TruncationWarning, stacklevel=2)
    return StateVector(space, amps)


def cat_state(space: FockSpace, alpha: complex, sign: int = +1) -> StateVector:
    """Normalized |alpha> + sign |-alpha> superposition (sign=+1 even, -1 odd)."""
    if sign not in (+1, -1):
        raise ValidationError("cat sign must be +1 or -1")
    plus = coherent_state(space, alpha).amplitudes
    minus = coherent_state(space, -alpha).amplitudes
    amps = plus + sign * minus
    nrm = np.linalg.norm(amps)
    if nrm < 1e-12:
        raise ValidationError("cat superposition vanished (alpha too small for this sign)")
    return StateVector(space, amps / nrm)


def thermal_state(space: FockSpace, nbar: float) -> DensityMatrix:
    """Truncated thermal state with mean occupation nbar, renormalized."""
    if nbar < 0:
        raise ValidationError("nbar must be >= 0")
    if nbar == 0:
        return fock_state(space, 0).to_density_matrix()
    n = np.arange(space.dim)
    p = np.exp(n * math.log(nbar / (1.0 + nbar)))
    p /= p.sum()
    return DensityMatrix(space, np.diag(p).astype(complex))


def truncation_weight(populations: np.ndarray) -> float:
    """Total population in the top three levels of the window."""
    p = np.asarray(populations, dtype=float)
    return float(p[-3:].sum())


def warn_if_truncated(populations: np.ndarray, context: str) -> float:
    w = truncation_weight(populations)
    if w > TRUNCATION_TOL:
        warnings.warn(
            f"{context}: population {w:.2e} in the top three Fock levels "
            f"(truncated window too small)", TruncationWarning, stacklevel=3)
    return w
