"""Dynamic-decoupling sequences, filter-function dephasing, Monte-Carlo Ramsey
emulation and noise spectroscopy for a single dephasing qubit."""

from .dephasing import (
    CoherenceModel,
    chi,
    chi_kernel,
    coherence,
    coherence_curve,
    coherence_time,
    filter_function,
    filter_function_finite,
)
from .exceptions import ConvergenceError, DecouplingError, QuadratureError, ValidationError
from .montecarlo import (
    ContrastEstimate,
    FringeDataset,
    PulseErrorFloor,
    PulseParams,
    coherence_curve_mc,
    evolve_bloch,
    fit_fringe,
    pulse_error_floor,
    ramsey_fringe,
)
from .noise import (
    LogLogSplineSpectrum,
    LorentzianSpectrum,
    NoiseTrajectory,
    PowerLawSpectrum,
    TabulatedSpectrum,
    WhiteSpectrum,
    estimate_psd,
    load_spectrum,
    spectrum_eval,
    spectrum_from_dict,
    synthesize_trajectory,
)
from .sequences import (
    DriftPolynomial,
    PulseSequence,
    cancellation_order,
    cancellation_residual,
    cpmg_times,
    load_sequence,
    make_sequence,
    phase_error,
    solve_polynomial_cancellation,
    udd_times,
)
from .spectroscopy import (
    CoherenceCurve,
    SpectrumFit,
    fit_coherence_time,
    fit_decay,
    fit_spectrum,
    linear_scaling_report,
)

__version__ = "0.1.0"
