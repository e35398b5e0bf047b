"""Toolkit for simulating, probing, and reconstructing a dissipative Kerr
parametric oscillator: Fock-space core, Lindblad dynamics, emission spectra,
displaced-parity tomography, analysis routines, and a batch CLI."""

__version__ = "0.1.0"

from .core import (  # noqa: F401
    DEFAULT_CHI_MHZ,
    DEFAULT_DIM,
    DEFAULT_KAPPA_MHZ,
    GHz,
    MHz,
    ns,
    us,
    CircuitDerivation,
    CircuitParams,
    DensityMatrix,
    DriveProfile,
    FockSpace,
    KpoParams,
    Operator,
    StateVector,
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
from .exceptions import (  # noqa: F401
    ApproximationWarning,
    CalibrationError,
    ConfigError,
    ConvergenceError,
    DegenerateSteadyStateError,
    DimensionMismatchError,
    KpoError,
    TruncationWarning,
    ValidationError,
)
from .dynamics import (  # noqa: F401
    CorrelationRecord,
    Trajectory,
    lindblad_rhs,
    liouvillian_matrix,
    propagate,
    propagate_expm,
    steady_psd,
    steady_state,
    two_time_correlation,
)
from .spectral import (  # noqa: F401
    BinPowers,
    TransientPsd,
    bin_integrate,
    bin_powers_theory,
    default_frequency_grid,
    transient_psd_analytic,
    transient_psd_lorentzian,
    transient_psd_numeric,
)
from .tomography import (  # noqa: F401
    CalibrationResult,
    ReconstructionResult,
    TomographyDataset,
    calibrate_pulses,
    default_displacement_grid,
    density_matrix_project,
    parity_symmetry_check,
    poisson_tails,
    predict_bin_powers,
    reconstruct_state,
    synthesize_dataset,
)
from .analysis import (  # noqa: F401
    CatPrepResult,
    DriveFitResult,
    PotentialLandscape,
    SpectrumVsDrive,
    WignerMap,
    adiabatic_cat_prep,
    beta_max_for_cat_amplitude,
    classical_fixed_point,
    effective_potential,
    eigenspectrum_vs_beta,
    fidelity,
    fit_drive_params,
    parity_block_eigh,
    threshold_beta,
    wigner,
)
from .cli import (  # noqa: F401
    ExperimentConfig,
    RunManifest,
    run_experiment,
    run_pipeline,
    sweep,
)
