"""Scale-space diffusion: linear-degradation diffusion processes with dense oracles."""

from .errors import SSDError
from .lanczos import LanczosConfig, lanczos_sqrt_apply
from .linops import cumulative_M, lambda_max, resize_op, check_psd_feasibility
from .process import DiffusionProcess, marginal_sample, posterior_params, posterior_sample
from .schedules import linear_beta_schedule, make_resolution_schedule, single_level_schedule

__all__ = [
    "DiffusionProcess",
    "LanczosConfig",
    "SSDError",
    "check_psd_feasibility",
    "cumulative_M",
    "lambda_max",
    "lanczos_sqrt_apply",
    "linear_beta_schedule",
    "make_resolution_schedule",
    "marginal_sample",
    "posterior_params",
    "posterior_sample",
    "resize_op",
    "single_level_schedule",
]
