"""Monte Carlo toolkit for isotropic stable processes in cones.

The package covers the cone geometry, a killed-path and walk-on-spheres
sampling engine, survival-exponent and harmonic-profile estimation,
conditioned (stay / absorb) ensembles, the radial-angular decomposition
with its ladder structure, inversion duality, and recurrent extensions
glued from excursions at the apex.
"""

from .conditioning import (
    CollapseResult,
    EntranceEstimate,
    HFunction,
    WeightedEnsemble,
    absorb_function,
    conditioned_ensemble,
    entrance_density_collapse,
    entrance_from_zero,
    weight_absorb,
    weight_stay,
)
from .excursions import (
    AdmissibilityReport,
    ExcursionSpec,
    GluedPath,
    OccupationHistogram,
    build_continuous_extension,
    build_jump_extension,
    check_extension_conditions,
    occupation_histogram,
)
from .geometry import (
    ConeSpec,
    Direction,
    UnsupportedApertureError,
    arg,
    circular_cone,
    halfspace,
    invert,
    punctured_space,
)
from .harmonic import (
    BetaEstimate,
    ExactHarmonic,
    HarmonicEstimate,
    SurvivalCurve,
    estimate_beta,
    estimate_harmonic,
    estimate_smallball_hitting,
    estimate_survival,
    half_space_harmonic,
    punctured_harmonic,
    verify_harmonicity,
)
from .mapladder import (
    AscLadder,
    AscStationary,
    DualityReport,
    InvertedPath,
    JumpHistogram,
    LadderLaw,
    LadderSequence,
    MapPath,
    ReversalReport,
    ascending_ladder,
    ascending_stationary,
    conditioned_tilt,
    discrete_ladder,
    duality_test,
    empirical_jump_rate,
    free_kernel_bin_rate,
    from_map,
    ladder_ensemble,
    ladder_stationary,
    ladder_step,
    predicted_bin_rates,
    rbz_transform,
    time_reversal_experiment,
    to_map,
)
from .rng import RngStream
from .stable import (
    ApexStallError,
    MaxStepsError,
    PathBundle,
    PathGrid,
    StableParams,
    c_alpha,
    killed_ensemble,
    killed_min_radius,
    killed_paths_full,
    killed_positions_at,
    killed_radius_exit,
    killed_steps,
    run_until_ball_exit,
    sample_ball_exit,
    sample_isotropic_increment,
    sample_positive_stable,
    simulate_killed_path,
    walk_on_spheres_exit,
    walk_on_spheres_exit_many,
)

__version__ = "0.1.0"
