"""Robust (m, t) variational Bayesian learning on a small numpy autodiff engine."""

from .diffmath import ContractError, ShapeError, Tape, Var
from .objectives import ObjectiveSpec, free_energy, mt_training_loss, t_log_loss
from .trainer import TrainConfig, TrainReport, fit
from .variational import GaussianPosterior, GaussianPrior, kl_to_prior, point_mass, sample

__version__ = "0.1.0"

__all__ = [
    "ContractError",
    "GaussianPosterior",
    "GaussianPrior",
    "ObjectiveSpec",
    "ShapeError",
    "Tape",
    "TrainConfig",
    "TrainReport",
    "Var",
    "fit",
    "free_energy",
    "kl_to_prior",
    "mt_training_loss",
    "point_mass",
    "sample",
    "t_log_loss",
]
