"""Selective diffusion distillation on synthetic conditional worlds.

A small conditional denoiser acts as a frozen teacher; per-timestep gradient
statistics pick which noise levels to distill from; a residual MLP learns the
edit in one forward pass.
"""

from .diffusion import (Denoiser, DenoiserConfig, NoiseSchedule, forward_sample, make_schedule,
                        posterior_stats, predict_eps, reverse_sample, train_denoiser)
from .distill import (Descending, DistillConfig, Fixed, LargestHQS, Manipulator, Random, Selected,
                      manipulate, train_manipulator)
from .errors import (ConditionError, ConfigError, DomainError, NumericError, SDDError,
                     SelectionError, ShapeError, TimestepError, TrainingError)
from .evaluation import (CostParams, break_even_m, cost_diffusion, cost_sdd, frechet_gaussian,
                         noise_denoise_edit, run_ablation, tradeoff_curve)
from .hqs import HQSProfile, hqs_profile, select_timesteps, top_k
from .numerics import Mlp, RngStream, init_mlp, mlp_backward, mlp_forward
from .worlds import MixtureWorld, alignment_score, fidelity_rmse, make_world, sample_world

__version__ = "0.1.0"
