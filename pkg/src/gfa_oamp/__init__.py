"""Finite-N simulation, state evolution and generating-functional order
parameters for IST, AMP and OAMP on Bernoulli-Gaussian compressed sensing."""
from __future__ import annotations

__version__ = "0.1.0"

from .algorithms import (
    DivergenceError,
    TrajectoryRecord,
    error_recursion_view,
    oamp_tau_schedule,
    run_amp,
    run_ist,
    run_oamp,
)
from .denoisers import (
    Denoiser,
    DivergenceFree,
    Linear,
    MmseBG,
    Prior,
    QuadratureError,
    QuadratureRule,
    SingularNormalizationError,
    SoftThreshold,
    check_divergence_free,
    df_factory,
    df_transform,
    make_factory,
    mmse_denoiser_bg,
)
from .gfa import (
    IllConditionedCovarianceError,
    OrderParameters,
    build_D,
    build_R_Gamma,
    gfa_run,
    k_hat,
    lambda_matrix,
    single_site_mc,
    verify_lemma2,
)
from .linear_model import (
    ProblemInstance,
    decorrelation_residual,
    dump_instance,
    generate_instance,
    load_instance,
)
from .state_evolution import SeTrace, se_fixed_point, se_run, se_step
