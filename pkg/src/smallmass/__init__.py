"""Langevin dynamics with state- and distribution-dependent friction.

Simulates the second-order (mass eps) interacting-particle system and its
overdamped small-mass limit, whose corrected drift is assembled from Lyapunov
and Sylvester matrix equations, and measures the strong convergence rate
between the two by synchronously coupled Monte Carlo.
"""

from . import linalg  # noqa: F401
from .convergence import (  # noqa: F401
    ConvergenceReport,
    DeltaRule,
    RateFit,
    constant_reduction_check,
    fit_rate,
    report_to_csv,
    report_to_json,
    run_convergence,
)
from .driver import NoiseDriver  # noqa: F401
from .dynamics import (  # noqa: F401
    AssumptionReport,
    CoupledResult,
    ParticleEnsembleFull,
    ParticleEnsembleLimit,
    PathRecord,
    ProbeConfig,
    VelocityDiagnostics,
    diagnostics_velocity,
    run_limit_path,
    simulate_coupled,
    step_full_em,
    step_full_exponential,
    step_limit_em,
    validate_assumptions,
    write_path_csv,
)
from .errors import SmallmassError  # noqa: F401
from .measures import (  # noqa: F401
    EmpiricalMeasure,
    second_moment,
    wasserstein2_1d,
    wasserstein2_assignment,
)
from .models import (  # noqa: F401
    ModelSpec,
    SystemModel,
    drift_S,
    drift_S_tilde,
    gamma_inv_dmu,
    gamma_inv_dx,
    limit_drift_fields,
    model_library,
)

__version__ = "0.1.0"
