"""Variational inference with a rejection-sampled variational family.

A reparameterizable proposal ``q`` is sculpted by a smooth accept/reject step
with threshold ``T``.  The package provides the samplers, unbiased gradient
estimators, training loops, a hybrid scheme for hierarchical models and
quadrature oracles for low-dimensional checks.
"""

from .errors import (BatchTooSmallError, BudgetExhaustedError, ConfigError, DataFormatError, DataIndexError,
                     DimensionError, DivergedError, DivergentXiError, EmptyMaskError, InconsistentPathError,
                     NoThetaError, RVRSError, ShapeError)
from .gradients import (rvrs_phi_gradient, t_gradient, theta_gradient_direct, theta_gradient_full,
                        vrs_phi_gradient)
from .optimize import AdamState, TrainConfig, adam_step, adapt_threshold, fit_meanfield, fit_rvrs, fit_vrs, lr_schedule
from .proposal import FullRankNormal, MeanFieldNormal
from .sampler import AcceptanceConfig, AcceptedBatch, estimate_Zr, evaluate_elbo, rejection_sample
from .target import (AnalyticGaussianTarget, FunnelTarget, GaussianMixtureTarget, HierStudentTModel,
                     LogisticRegressionTarget, TargetModel)

__version__ = "0.1.0"
