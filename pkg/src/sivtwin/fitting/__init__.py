from .core import FitError, FitResult, Model, finite_difference_jacobian, least_squares
from .models import (
    ALL_MODELS,
    DOUBLE_GAUSSIAN,
    EXP_DECAY,
    GAUSSIAN,
    LORENTZIAN,
    POWER_BROADENING,
    QUADRATIC,
    SATURATION,
    antibunching,
    multi_lorentzian,
)
from .routines import (
    IllConditionedWarning,
    NoPeakError,
    PoissonFit,
    SaturationFit,
    SeedingError,
    fit_double_gaussian,
    fit_exponential_decay,
    fit_lorentzian,
    fit_multi_lorentzian,
    fit_poisson_mean,
    fit_power_broadening,
    fit_saturation,
    poisson_sigma,
)
