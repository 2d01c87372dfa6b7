"""Coupled diffusion sampling on analytic mixture models."""

__version__ = "0.1.0"

from .coupling import (
    CoupledRunResult,
    CouplingConfig,
    coupled_sample,
    coupled_step,
    coupling_energy,
    coupling_gradient,
    mutual_tilt_fixed_point,
    mv_edit_demo,
    score_average_sample,
)
from .metrics import (
    MetricReport,
    consistency_residual,
    coupling_distance,
    energy_distance,
    energy_permutation_test,
    gmm_nll,
    sweep_summary,
    tilted_log_density,
)
from .models import (
    BlockProductModel,
    Gmm,
    GmmScoreModel,
    GmmVelocityModel,
    MvScene,
    ScoreModel,
    VelocityModel,
    block_product_model,
    gmm_epsilon,
    gmm_flow_log_density,
    gmm_noised_log_density,
    gmm_sample,
    mv_consistent_model,
    score_from_velocity,
    velocity_from_gmm,
    velocity_wrapped_score_model,
)
from .sampler import (
    SampleBatch,
    SamplerConfig,
    Trajectory,
    ddim_step,
    ddpm_step,
    sample,
    x0_from_epsilon,
)
from .schedule import (
    NoiseSchedule,
    ScheduleAlignment,
    align_schedules,
    alpha_bar_to_edm_sigma,
    alpha_bar_to_flow_time,
    build_linear,
    edm_sigma_to_alpha_bar,
    flow_time_to_alpha_bar,
    shift_schedule,
)
