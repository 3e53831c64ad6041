"""Kernel models trained by preconditioned SGD with periodic projection onto fixed centers."""
from .cost import CostModel, average_batch_cost, flops_per_batch, optimal_period
from .errors import InputError, NumericError
from .kernels import EigenSystem, KernelFamily, KernelSpec, kernel_eval, kernel_matrix, top_q_eigensystem
from .model import (AuxiliaryState, KernelModel, classify, load_model, predict,
                    predict_auxiliary, save_model)
from .preconditioner import (AttachedPreconditioner, NystromPreconditioner, apply_action,
                             attach_centers, build_preconditioner, correction_coeffs)
from .projection import EP2Config, EP2Solver, ep2_solve, project_exact, project_inexact
from .solver import TrainConfig, TrainReport, ep4_step, finalize_period, train

__version__ = "0.1.0"
