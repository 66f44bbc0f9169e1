"""Local and global volatility forecasters: GARCH-family baselines, recurrent
and attention models trained on pooled return panels, risk scoring and the
model confidence set."""

from __future__ import annotations

from . import kernels
from .diffcore import ContractError, DomainError, ShapeError, Tensor
from .econmodels import EconFit, fit_global, fit_local, forecast_sigma, garch_filter
from .evaluation import (LossMatrix, MCSResult, gaussian_nll, joint_loss, mcs, mse_sigma,
                         norm_ppf, quantile_loss)
from .neuralmodels import ModelConfig, VolModel
from .series import ReturnSeries, load_universe, save_universe
from .simgarch import GarchParams, SimulatedSeries, make_universe, simulate
from .training import TrainConfig, TrainTrace, TrainingDivergedError, finetune, train_global, train_local

__version__ = "0.1.0"

__all__ = [
    "kernels", "ContractError", "DomainError", "ShapeError", "Tensor",
    "EconFit", "fit_global", "fit_local", "forecast_sigma", "garch_filter",
    "LossMatrix", "MCSResult", "gaussian_nll", "joint_loss", "mcs", "mse_sigma", "norm_ppf",
    "quantile_loss", "ModelConfig", "VolModel", "ReturnSeries", "load_universe", "save_universe",
    "GarchParams", "SimulatedSeries", "make_universe", "simulate",
    "TrainConfig", "TrainTrace", "TrainingDivergedError", "finetune", "train_global", "train_local",
]
