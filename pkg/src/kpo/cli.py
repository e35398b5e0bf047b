"""Batch harness: config-driven experiment runs, parameter sweeps, and the
calibrate -> synthesize -> reconstruct demonstration pipeline.

Configs are JSON with nested sections; all physical inputs in MHz and ns,
converted to angular rad/us at this boundary. Every run emits plot-ready CSV
and JSON files plus a manifest with per-file checksums, so identical
(config, seed) pairs are verifiably bitwise reproducible.
"""
from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import hashlib
import json
import os
import sys
import time
import warnings
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (adiabatic_cat_prep, beta_max_for_cat_amplitude,
                       classical_fixed_point, fidelity, threshold_beta,
                       wigner)
from .core import (MHz, ns, DensityMatrix, FockSpace, KpoParams, cat_state,
                   coherent_state, fock_state, number_op)
from .dynamics import propagate, steady_psd, steady_state
from .exceptions import ConfigError, KpoError
from .spectral import bin_integrate, transient_psd_numeric
from .tomography import (CalibrationResult, calibrate_pulses,
                         default_displacement_grid, reconstruct_state,
                         synthesize_dataset)

EXPERIMENTS = ("fig2b", "fig2c", "fig2d", "fig3", "fig4a", "fig4b", "fig4d",
               "custom")


# --- configuration -------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    """Effective (fully defaulted) run configuration.

    Frequencies in MHz, times in ns; grids and tomography options grouped
    into the JSON sections listed in _SECTIONS.
    """

    experiment: str = "custom"
    seed: int | None = None
    output_dir: str | None = None
    # params
    detuning_mhz: float = 0.0
    chi_mhz: float = 17.3
    kappa_mhz: float = 1.1
    # drive
    betas_mhz: tuple | None = None
    alphas: tuple | None = None
    t_max_ns: float = 22.0
    t_drift_ns: float = 2.5
    kerr_delays_ns: tuple = (0.0, 7.2, 14.5, 28.9)
    state_times_ns: tuple = (20.0, 2000.0)
    # grids
    beta_points: int = 40
    beta_span: tuple = (0.1, 2.0)
    time_final_ns: float = 500.0
    time_points: int = 51
    wigner_points: int = 61
    # tomography
    tomo_phases: int = 16
    tomo_amplitudes: tuple = (0.5, 1.0)
    tomo_dim: int = 10
    tomo_parity: bool = False
    regularization: float = 0.0
    noise_sigma: float = 0.0
    model_dim: int = 30
    true_conversion: float = 0.92
    true_gains: tuple = (1.03, 0.98, 1.01, 0.97)
    # simulation
    sim_dim: int = 30
    rtol: float = 1e-8
    atol: float = 1e-10

    def params(self) -> KpoParams:
        return KpoParams.from_mhz(self.detuning_mhz, self.chi_mhz,
                                  self.kappa_mhz)


_SECTIONS = {
    "params": ("detuning_mhz", "chi_mhz", "kappa_mhz"),
    "drive": ("betas_mhz", "alphas", "t_max_ns", "t_drift_ns",
              "kerr_delays_ns", "state_times_ns"),
    "grids": ("beta_points", "beta_span", "time_final_ns", "time_points",
              "wigner_points"),
    "tomography": ("tomo_phases", "tomo_amplitudes", "tomo_dim", "tomo_parity",
                   "regularization", "noise_sigma", "model_dim",
                   "true_conversion", "true_gains"),
    "simulation": ("sim_dim", "rtol", "atol"),
}
_TOP_LEVEL = ("experiment", "seed", "output_dir")

_EXPERIMENT_DEFAULTS = {
    "fig2b": {"detuning_mhz": 0.0, "alphas": (0.5, 1.0, 1.5, 2.0)},
    "fig2c": {"detuning_mhz": 25.3},
    "fig2d": {"detuning_mhz": 11.2},
    "fig3": {"detuning_mhz": 0.0, "alphas": (1.2,), "sim_dim": 20},
    "fig4a": {"detuning_mhz": 24.6, "betas_mhz": (3.5, 5.8, 11.5)},
    "fig4b": {"detuning_mhz": 24.6, "betas_mhz": (11.5,)},
    "fig4d": {"detuning_mhz": -6.7, "alphas": (0.64, 0.88, 1.08, 1.2)},
    "custom": {},
}


def _as_tuple(value, name: str) -> tuple:
    if not isinstance(value, (list, tuple)):
        raise ConfigError(f"{name}: expected a list, got {value!r}")
    return tuple(value)


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Parse a nested config dict, apply per-experiment defaults, validate."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    experiment = raw.get("experiment", "custom")
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"experiment: unknown id {experiment!r}, expected "
                          f"one of {', '.join(EXPERIMENTS)}")
    merged: dict = dict(_EXPERIMENT_DEFAULTS[experiment])
    merged["experiment"] = experiment

    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    for key, value in raw.items():
        if key in _TOP_LEVEL:
            merged[key] = value
        elif key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"{key}: section must be an object")
            for sub, subval in value.items():
                if sub not in _SECTIONS[key]:
                    raise ConfigError(f"{key}.{sub}: unknown field")
                merged[sub] = subval
        else:
            raise ConfigError(f"{key}: unknown top-level field")
    for key in merged:
        if key not in known:
            raise ConfigError(f"{key}: unknown field")

    tuple_fields = ("betas_mhz", "alphas", "kerr_delays_ns", "state_times_ns",
                    "beta_span", "tomo_amplitudes", "true_gains")
    for name in tuple_fields:
        if name in merged and merged[name] is not None:
            merged[name] = _as_tuple(merged[name], name)
    cfg = ExperimentConfig(**merged)
    _validate_config(cfg)
    return cfg


def _validate_config(cfg: ExperimentConfig) -> None:
    def bad(name, why):
        raise ConfigError(f"{name}: {why}")

    if cfg.chi_mhz <= 0:
        bad("chi_mhz", f"must be > 0, got {cfg.chi_mhz}")
    if cfg.kappa_mhz < 0:
        bad("kappa_mhz", f"must be >= 0, got {cfg.kappa_mhz}")
    if cfg.seed is not None and (not isinstance(cfg.seed, int)
                                 or isinstance(cfg.seed, bool)):
        bad("seed", f"must be an integer, got {cfg.seed!r}")
    if cfg.noise_sigma < 0:
        bad("noise_sigma", "must be >= 0")
    if cfg.noise_sigma > 0 and cfg.seed is None:
        bad("seed", "required whenever noise_sigma > 0 (stochastic step)")
    if cfg.betas_mhz is not None and any(b < 0 for b in cfg.betas_mhz):
        bad("betas_mhz", "drive amplitudes must be >= 0")
    if cfg.alphas is not None and any(a <= 0 for a in cfg.alphas):
        bad("alphas", "state amplitudes must be > 0")
    if cfg.beta_points < 1:
        bad("beta_points", "need at least one point")
    if len(cfg.beta_span) != 2 or not (0 < cfg.beta_span[0] < cfg.beta_span[1]):
        bad("beta_span", f"need 0 < lo < hi, got {cfg.beta_span}")
    if cfg.time_final_ns <= 0:
        bad("time_final_ns", "must be > 0")
    if cfg.time_points < 2:
        bad("time_points", "need at least two samples")
    if cfg.t_max_ns <= 0:
        bad("t_max_ns", "must be > 0")
    if cfg.t_drift_ns < 0:
        bad("t_drift_ns", "must be >= 0")
    if any(t < 0 for t in cfg.kerr_delays_ns):
        bad("kerr_delays_ns", "delays must be >= 0")
    if any(t <= 0 for t in cfg.state_times_ns):
        bad("state_times_ns", "durations must be > 0")
    if cfg.wigner_points < 11:
        bad("wigner_points", "need at least 11 points")
    if cfg.tomo_phases < 1:
        bad("tomo_phases", "need at least one phase")
    if not cfg.tomo_amplitudes or any(a <= 0 for a in cfg.tomo_amplitudes):
        bad("tomo_amplitudes", "need positive displacement amplitudes")
    if cfg.tomo_dim < 2:
        bad("tomo_dim", "reconstruction dim must be >= 2")
    if cfg.regularization < 0:
        bad("regularization", "must be >= 0")
    if cfg.model_dim < cfg.tomo_dim:
        bad("model_dim", f"must be >= tomo_dim ({cfg.tomo_dim})")
    if cfg.true_conversion == 0:
        bad("true_conversion", "must be nonzero")
    if len(cfg.true_gains) != 4 or any(g <= 0 for g in cfg.true_gains):
        bad("true_gains", "need four positive bin gains")
    if cfg.sim_dim < 4:
        bad("sim_dim", "simulation dim must be >= 4")
    if cfg.rtol <= 0 or cfg.atol <= 0:
        bad("rtol", "integration tolerances must be > 0")


def config_from_file(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read ({exc})") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return config_from_dict(raw)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    """Nested effective-config dict; parsing it back reproduces cfg."""
    def plain(v):
        if isinstance(v, tuple):
            return list(v)
        return v

    out = {name: plain(getattr(cfg, name)) for name in _TOP_LEVEL}
    for section, names in _SECTIONS.items():
        out[section] = {n: plain(getattr(cfg, n)) for n in names}
    return out


def config_hash(cfg: ExperimentConfig) -> str:
    canon = json.dumps(config_to_dict(cfg), sort_keys=True,
                       separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


# --- manifests and output plumbing ---------------------------------------

@dataclass(frozen=True)
class RunManifest:
    """Checksummed record of one run: what ran, what it wrote, what it warned."""

    experiment: str
    config_hash: str
    toolkit_version: str
    wall_clock_s: float
    outputs: dict                  # filename -> sha256
    warnings: tuple
    status: str = "ok"
    failed_stage: str | None = None

    def to_json_dict(self) -> dict:
        return {"experiment": self.experiment,
                "config_hash": self.config_hash,
                "toolkit_version": self.toolkit_version,
                "wall_clock_s": self.wall_clock_s,
                "outputs": dict(sorted(self.outputs.items())),
                "warnings": list(self.warnings),
                "status": self.status,
                "failed_stage": self.failed_stage}


class StageError(KpoError, RuntimeError):
    """A pipeline stage failed; carries the stage name for diagnostics."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}': {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@contextmanager
def _stage(name: str):
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def _resolve_output_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output_dir if cfg.output_dir else cfg.experiment)
    root = os.environ.get("KPO_OUTPUT_ROOT")
    if root and not out.is_absolute():
        out = Path(root) / out
    return out


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_csv(path: Path, header: str, rows, fmt) -> None:
    np.savetxt(path, np.asarray(rows, dtype=float), delimiter=",",
               header=header, comments="", fmt=fmt)


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _format_warning(w: warnings.WarningMessage) -> str:
    return f"{w.category.__name__}: {w.message}"


def _execute(cfg: ExperimentConfig, body) -> RunManifest:
    """Run body(outdir) in a warning trap, then checksum and manifest.

    body emits files into outdir. The manifest lists every file found there
    (completeness invariant) except the manifest itself, which holds the
    wall clock and so cannot checksum its own container.
    """
    outdir = _resolve_output_dir(cfg)
    outdir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    caught: list[str] = []
    status, failed_stage, err = "ok", None, None
    with warnings.catch_warnings(record=True) as wlist:
        warnings.simplefilter("always")
        try:
            extra = body(outdir)
            if extra:
                caught.extend(extra)
        except StageError as exc:
            status, failed_stage, err = "failed", exc.stage, exc
            caught.append(str(exc))
    caught.extend(_format_warning(w) for w in wlist)

    _write_json(outdir / "effective_config.json", config_to_dict(cfg))
    outputs = {p.name: _sha256(p) for p in sorted(outdir.iterdir())
               if p.is_file() and p.name != "manifest.json"}
    manifest = RunManifest(cfg.experiment, config_hash(cfg), __version__,
                           time.perf_counter() - t0, outputs, tuple(caught),
                           status, failed_stage)
    _write_json(outdir / "manifest.json", manifest.to_json_dict())
    if err is not None:
        raise err
    return manifest


# --- per-point computations (pure, picklable) ----------------------------

def _point_grid(cfg: ExperimentConfig) -> list[float]:
    """Independent sweep coordinates for the experiment, working units."""
    if cfg.experiment in ("fig2b", "fig4d", "fig3"):
        if not cfg.alphas:
            raise ConfigError("alphas: empty grid")
        return [float(a) for a in cfg.alphas]
    if cfg.betas_mhz is not None:
        if len(cfg.betas_mhz) == 0:
            raise ConfigError("betas_mhz: empty grid")
        return [float(b) * MHz for b in cfg.betas_mhz]
    thr = threshold_beta(cfg.params())
    if thr <= 0:
        raise ConfigError("betas_mhz: required when detuning_mhz = 0 "
                          "(no classical threshold to scale a default grid)")
    lo, hi = cfg.beta_span
    return list(np.geomspace(lo * thr, hi * thr, cfg.beta_points))


def _point_fig2b(cfg: ExperimentConfig, alpha: float) -> dict:
    space = FockSpace(cfg.sim_dim)
    rho = coherent_state(space, alpha).to_density_matrix()
    psd = transient_psd_numeric(rho, cfg.params())
    bins = bin_integrate(psd)
    files = {
        "transient_psd.csv": (
            "alpha,frequency_rad_per_us,psd", ["%.6f", "%.12e", "%.12e"],
            [[alpha, w, s] for w, s in zip(psd.frequencies, psd.values)]),
        "bin_powers.csv": (
            "alpha,bin,power", ["%.6f", "%d", "%.12e"],
            [[alpha, j + 1, p] for j, p in enumerate(bins.values)]),
    }
    record = {"alpha": alpha,
              "sum_rule_rel_error": psd.metadata.get("sum_rule_rel_error"),
              "bin_powers": bins.values.tolist()}
    return {"files": files, "record": record}


def _point_fig2c(cfg: ExperimentConfig, beta: float) -> dict:
    params = cfg.params()
    space = FockSpace(cfg.sim_dim)
    rho_ss = steady_state(space, params, beta)
    n_q = float(np.real(np.trace(number_op(space).mat @ rho_ss.mat)))
    n_cl = classical_fixed_point(params, beta)
    beta_mhz = beta / MHz
    files = {"threshold_curve.csv": (
        "beta_mhz,n_quantum,n_classical", ["%.12e", "%.12e", "%.12e"],
        [[beta_mhz, n_q, n_cl]])}
    return {"files": files,
            "record": {"beta_mhz": beta_mhz, "n_quantum": n_q,
                       "n_classical": n_cl}}


def _fig2d_grid(params: KpoParams) -> np.ndarray:
    span = 2.2 * max(abs(params.detuning), 5.0 * params.kappa) \
        + 20.0 * params.kappa
    step = params.kappa / 6.0
    count = int(np.ceil(2.0 * span / step)) + 1
    return np.linspace(-span, span, count)


def _point_fig2d(cfg: ExperimentConfig, beta: float) -> dict:
    params = cfg.params()
    space = FockSpace(cfg.sim_dim)
    freqs = _fig2d_grid(params)
    spec = steady_psd(space, params, beta, freqs)
    beta_mhz = beta / MHz
    files = {"steady_psd_map.csv": (
        "beta_mhz,frequency_rad_per_us,psd", ["%.12e", "%.12e", "%.12e"],
        [[beta_mhz, w, s] for w, s in zip(freqs, spec)])}
    return {"files": files,
            "record": {"beta_mhz": beta_mhz, "peak_psd": float(spec.max())}}


def _point_fig4a(cfg: ExperimentConfig, beta: float) -> dict:
    params = cfg.params()
    space = FockSpace(cfg.sim_dim)
    times = np.linspace(0.0, cfg.time_final_ns * ns, cfg.time_points)
    vac = fock_state(space, 0).to_density_matrix()
    traj = propagate(vac, params, beta, float(times[-1]), record=times,
                     rtol=cfg.rtol, atol=cfg.atol)
    beta_mhz = beta / MHz
    files = {"ringup_curves.csv": (
        "beta_mhz,time_ns,n", ["%.12e", "%.12e", "%.12e"],
        [[beta_mhz, t / ns, v] for t, v in zip(times,
                                               traj.expectations["n"])])}
    return {"files": files,
            "record": {"beta_mhz": beta_mhz,
                       "n_final": float(traj.expectations["n"][-1])}}


def _point_fig4d(cfg: ExperimentConfig, alpha: float) -> dict:
    params = cfg.params()
    beta_max = beta_max_for_cat_amplitude(params, alpha)
    prep = adiabatic_cat_prep(params, beta_max, cfg.t_max_ns * ns,
                              t_drift=cfg.t_drift_ns * ns,
                              rtol=cfg.rtol, atol=cfg.atol)
    idx = list(cfg.alphas).index(alpha)
    wm = wigner(prep.final_state, grid=cfg.wigner_points)
    files = {
        "cat_preps.csv": (
            "alpha,beta_max_mhz,cat_size,fidelity",
            ["%.6f", "%.12e", "%.12e", "%.12e"],
            [[alpha, beta_max / MHz, prep.cat_size, prep.fidelity]]),
        f"cat_wigner_{idx}.csv": (
            "re_alpha,im_alpha,wigner", ["%.12e", "%.12e", "%.12e"],
            _wigner_rows(wm)),
    }
    record = {"alpha": alpha, "beta_max_mhz": beta_max / MHz,
              "cat_size": prep.cat_size, "fidelity": prep.fidelity,
              "wigner_min": wm.min_value()}
    return {"files": files, "record": record}


def _point_custom(cfg: ExperimentConfig, beta: float) -> dict:
    return _point_fig2c(cfg, beta)


_POINT_FUNCS = {
    "fig2b": _point_fig2b,
    "fig2c": _point_fig2c,
    "fig2d": _point_fig2d,
    "fig4a": _point_fig4a,
    "fig4d": _point_fig4d,
    "custom": _point_custom,
}


def _wigner_rows(wm) -> list:
    re_g, im_g = np.meshgrid(wm.re_axis, wm.im_axis)
    return np.column_stack([re_g.ravel(), im_g.ravel(),
                            wm.values.ravel()]).tolist()


def _eval_point(payload) -> dict:
    """Worker entry: one sweep point, exceptions and warnings captured."""
    cfg_dict, value = payload
    cfg = config_from_dict(cfg_dict)
    try:
        with warnings.catch_warnings(record=True) as wlist:
            warnings.simplefilter("always")
            out = _POINT_FUNCS[cfg.experiment](cfg, value)
        out["warnings"] = [_format_warning(w) for w in wlist]
        out["error"] = None
    except Exception as exc:        # per-point failures must not kill the sweep
        out = {"files": {}, "record": None, "warnings": [],
               "error": f"{type(exc).__name__}: {exc}"}
    return out


def _run_points(cfg: ExperimentConfig, jobs: int) -> RunManifest:
    def body(outdir: Path) -> list[str]:
        with _stage("grid construction"):
            points = _point_grid(cfg)
        payloads = [(config_to_dict(cfg), v) for v in points]
        with _stage("point evaluation"):
            if jobs > 1:
                with concurrent.futures.ProcessPoolExecutor(
                        max_workers=jobs) as pool:
                    results = list(pool.map(_eval_point, payloads))
            else:
                results = [_eval_point(p) for p in payloads]

        notes: list[str] = []
        acc: dict[str, tuple] = {}
        records = []
        for i, (value, res) in enumerate(zip(points, results)):
            notes.extend(res["warnings"])
            if res["error"] is not None:
                notes.append(f"point {i} (value {value:.6g}) failed: "
                             f"{res['error']}")
                records.append({"point": i, "value": value,
                                "error": res["error"]})
                continue
            records.append({"point": i, **res["record"]})
            for fname, (header, fmt, rows) in res["files"].items():
                if fname not in acc:
                    acc[fname] = (header, fmt, [])
                acc[fname][2].extend(rows)
        with _stage("output serialization"):
            for fname, (header, fmt, rows) in acc.items():
                _write_csv(outdir / fname, header, rows, fmt)
            _write_json(outdir / "records.json", records)
        return notes

    return _execute(cfg, body)


# --- sequential experiments ----------------------------------------------

def _pad_density(rho: DensityMatrix, dim: int) -> DensityMatrix:
    if rho.space.dim == dim:
        return rho
    if rho.space.dim > dim:
        raise ConfigError(f"cannot pad dim {rho.space.dim} down to {dim}")
    mat = np.zeros((dim, dim), dtype=complex)
    mat[:rho.space.dim, :rho.space.dim] = rho.mat
    return DensityMatrix(FockSpace(dim), mat)


def _roundtrip(cfg: ExperimentConfig, rho_true: DensityMatrix,
               seed_shift: int, parity: bool) -> tuple[dict, object]:
    """synthesize -> reconstruct -> fidelity against the generating state."""
    grid = default_displacement_grid(cfg.tomo_phases, cfg.tomo_amplitudes)
    cal = CalibrationResult.ideal()
    seed = None if cfg.seed is None else cfg.seed + seed_shift
    dataset = synthesize_dataset(rho_true, voltages=grid, cal=cal,
                                 noise_sigma=cfg.noise_sigma, seed=seed,
                                 model_dim=max(cfg.model_dim,
                                               rho_true.space.dim))
    recon = reconstruct_state(dataset, cal, parity=parity, dim=cfg.tomo_dim,
                              regularization=cfg.regularization,
                              model_dim=max(cfg.model_dim,
                                            rho_true.space.dim))
    big = max(rho_true.space.dim, cfg.tomo_dim)
    fid = fidelity(_pad_density(rho_true, big),
                   _pad_density(recon.rho_est, big))
    summary = {"fidelity": fid, "loss": recon.loss,
               "iterations": recon.iterations, "converged": recon.converged,
               "noise_sigma": cfg.noise_sigma, "seed": seed,
               "dim": cfg.tomo_dim, "parity": parity}
    return summary, recon


def _run_fig3(cfg: ExperimentConfig) -> RunManifest:
    def body(outdir: Path):
        params = cfg.params()
        space = FockSpace(cfg.sim_dim)
        alpha = cfg.alphas[0] if cfg.alphas else 1.2
        rho = coherent_state(space, alpha).to_density_matrix()
        slices = []
        state = rho
        for k, tau_ns in enumerate(cfg.kerr_delays_ns):
            with _stage(f"Kerr evolution to {tau_ns:g} ns"):
                if tau_ns > 0:
                    traj = propagate(rho, params, 0.0, tau_ns * ns, record=2,
                                     rtol=cfg.rtol, atol=cfg.atol)
                    state = traj.final()
                wm = wigner(state, grid=cfg.wigner_points)
                _write_csv(outdir / f"kerr_wigner_{k}.csv",
                           "re_alpha,im_alpha,wigner",
                           _wigner_rows(wm), ["%.12e"] * 3)
                slices.append({"index": k, "tau_ns": tau_ns,
                               "wigner_min": wm.min_value(),
                               "wigner_integral": wm.metadata["integral"]})
        with _stage("tomography round trip"):
            summary, _ = _roundtrip(cfg, state, seed_shift=0, parity=False)
        _write_json(outdir / "kerr_slices.json", slices)
        _write_json(outdir / "roundtrip.json", summary)

    return _execute(cfg, body)


def _run_fig4b(cfg: ExperimentConfig) -> RunManifest:
    def body(outdir: Path):
        params = cfg.params()
        space = FockSpace(cfg.sim_dim)
        beta = (cfg.betas_mhz[0] if cfg.betas_mhz else 11.5) * MHz
        vac = fock_state(space, 0).to_density_matrix()
        summaries = []
        for k, t_ns in enumerate(cfg.state_times_ns):
            with _stage(f"drive evolution to {t_ns:g} ns"):
                traj = propagate(vac, params, beta, t_ns * ns, record=2,
                                 rtol=cfg.rtol, atol=cfg.atol)
                state = traj.final()
            with _stage(f"tomography round trip at {t_ns:g} ns"):
                summary, recon = _roundtrip(cfg, state, seed_shift=k,
                                            parity=False)
            with _stage(f"Wigner maps at {t_ns:g} ns"):
                for tag, s in (("true", state), ("recon", recon.rho_est)):
                    wm = wigner(s, grid=cfg.wigner_points)
                    _write_csv(outdir / f"state_{k}_wigner_{tag}.csv",
                               "re_alpha,im_alpha,wigner",
                               _wigner_rows(wm), ["%.12e"] * 3)
            summaries.append({"index": k, "time_ns": t_ns,
                              "beta_mhz": beta / MHz, **summary})
        _write_json(outdir / "reconstructions.json", summaries)

    return _execute(cfg, body)


def run_experiment(cfg: ExperimentConfig, jobs: int = 1) -> RunManifest:
    """Run one configured experiment; returns its manifest.

    Sweepable experiments share the per-point machinery with sweep(), so a
    later parallel sweep of the same config is bitwise identical.
    """
    if cfg.experiment in _POINT_FUNCS:
        return _run_points(cfg, jobs)
    if cfg.experiment == "fig3":
        return _run_fig3(cfg)
    if cfg.experiment == "fig4b":
        return _run_fig4b(cfg)
    raise ConfigError(f"experiment: {cfg.experiment!r} has no runner")


def sweep(cfg: ExperimentConfig, jobs: int = 1) -> RunManifest:
    """Parallel parameter sweep; results identical to the serial run."""
    if cfg.experiment not in _POINT_FUNCS:
        raise ConfigError(f"experiment: {cfg.experiment!r} has no independent "
                          "point grid to sweep")
    if jobs < 1:
        raise ConfigError(f"jobs: must be >= 1, got {jobs}")
    return _run_points(cfg, jobs)


# --- end-to-end pipeline --------------------------------------------------

def _pipeline_default_config() -> ExperimentConfig:
    return config_from_dict({
        "experiment": "custom",
        "output_dir": "pipeline",
        "drive": {"alphas": [1.2]},
        "tomography": {"tomo_dim": 12, "tomo_parity": True},
    })


def run_pipeline(cfg: ExperimentConfig | None = None) -> RunManifest:
    """calibrate -> synthesize -> reconstruct -> wigner -> fidelity.

    The target is an even cat of the configured amplitude. Calibration data
    are synthesized from the configured true conversion and bin gains, the
    fitted calibration feeds the reconstruction, and the final fidelity is
    printed and recorded. Noiseless defaults land at fidelity >= 0.99.
    """
    if cfg is None:
        cfg = _pipeline_default_config()

    def body(outdir: Path):
        with _stage("target preparation"):
            alpha = cfg.alphas[0] if cfg.alphas else 1.2
            dim_true = max(int(np.ceil(alpha ** 2 + 5.0 * alpha + 6.0)), 12)
            truth = cat_state(FockSpace(dim_true), alpha,
                              +1).to_density_matrix()
            true_cal = CalibrationResult(
                complex(cfg.true_conversion), np.asarray(cfg.true_gains),
                residual=0.0, metadata={"source": "configured truth"})
        with _stage("calibration"):
            scan = np.linspace(0.2, 2.2, 9) / abs(cfg.true_conversion)
            cal_seed = None if cfg.seed is None else cfg.seed
            cal_data = synthesize_dataset(
                fock_state(FockSpace(4), 0).to_density_matrix(),
                voltages=scan.astype(complex), cal=true_cal,
                noise_sigma=cfg.noise_sigma, seed=cal_seed,
                model_dim=cfg.model_dim)
            cal = calibrate_pulses(cal_data)
            cal_data.to_json(outdir / "calibration_data.json")
            _write_json(outdir / "calibration.json", {
                "conversion": [cal.conversion.real, cal.conversion.imag],
                "gains": cal.gains.tolist(), "residual": cal.residual,
                "true_conversion": cfg.true_conversion,
                "true_gains": list(cfg.true_gains)})
        with _stage("synthesis"):
            grid = default_displacement_grid(cfg.tomo_phases,
                                             cfg.tomo_amplitudes)
            volts = grid / complex(cfg.true_conversion)
            ds_seed = None if cfg.seed is None else cfg.seed + 1
            dataset = synthesize_dataset(truth, voltages=volts, cal=true_cal,
                                         noise_sigma=cfg.noise_sigma,
                                         seed=ds_seed,
                                         model_dim=cfg.model_dim)
            dataset.to_json(outdir / "dataset.json")
        with _stage("reconstruction"):
            recon = reconstruct_state(dataset, cal, parity=cfg.tomo_parity,
                                      dim=cfg.tomo_dim,
                                      regularization=cfg.regularization,
                                      model_dim=cfg.model_dim)
            _write_json(outdir / "reconstruction.json", {
                "rho_re": recon.rho_est.mat.real.tolist(),
                "rho_im": recon.rho_est.mat.imag.tolist(),
                "loss": recon.loss, "iterations": recon.iterations,
                "converged": recon.converged, "metadata": recon.metadata})
        with _stage("wigner"):
            for tag, s in (("true", truth), ("recon", recon.rho_est)):
                wm = wigner(s, grid=cfg.wigner_points)
                _write_csv(outdir / f"wigner_{tag}.csv",
                           "re_alpha,im_alpha,wigner",
                           _wigner_rows(wm), ["%.12e"] * 3)
        with _stage("fidelity"):
            big = max(truth.space.dim, cfg.tomo_dim)
            fid = fidelity(_pad_density(truth, big),
                           _pad_density(recon.rho_est, big))
            _write_json(outdir / "pipeline_summary.json", {
                "fidelity": fid, "alpha": alpha,
                "noise_sigma": cfg.noise_sigma, "seed": cfg.seed,
                "calibration_residual": cal.residual,
                "reconstruction_loss": recon.loss,
                "converged": recon.converged})
            print(f"round-trip fidelity: {fid:.6f}")

    return _execute(cfg, body)


# --- command line ----------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kpo",
        description="Kerr parametric oscillator experiment harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one configured experiment")
    p_run.add_argument("config", help="JSON config path")

    p_pipe = sub.add_parser("pipeline",
                            help="calibrate/synthesize/reconstruct chain")
    p_pipe.add_argument("config", nargs="?", default=None,
                        help="JSON config path (default: built-in cat demo)")

    p_sweep = sub.add_parser("sweep", help="parallel parameter sweep")
    p_sweep.add_argument("config", help="JSON config path")
    p_sweep.add_argument("--jobs", type=int, default=1,
                         help="worker processes (default 1 = serial)")

    p_val = sub.add_parser("validate", help="check a config and exit")
    p_val.add_argument("config", help="JSON config path")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "validate":
            cfg = config_from_file(args.config)
            print(f"valid: experiment {cfg.experiment}, "
                  f"config hash {config_hash(cfg)}")
            return 0
        if args.command == "run":
            manifest = run_experiment(config_from_file(args.config))
        elif args.command == "sweep":
            manifest = sweep(config_from_file(args.config), jobs=args.jobs)
        else:
            cfg = (config_from_file(args.config)
                   if args.config is not None else None)
            manifest = run_pipeline(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"error in {exc}", file=sys.stderr)
        return 1
    except KpoError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(f"{manifest.experiment}: {manifest.status}, "
          f"{len(manifest.outputs)} files, "
          f"{len(manifest.warnings)} warnings, "
          f"{manifest.wall_clock_s:.1f} s")
    return 0 if manifest.status == "ok" else 1


if __name__ == "__main__":
    sys.exit(main())
