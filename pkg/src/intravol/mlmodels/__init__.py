"""Non-linear forecasting models: boosted trees, MLP, LSTM, seed ensembles."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..linmodels import LinearModel, predict_linear
from .gbt import GBTModel, Tree, fit_gbt, predict_gbt, predict_gbt_raw
from .lstm import LSTMModel, fit_lstm, predict_lstm
from .mlp import MLPModel, fit_mlp, predict_mlp

__all__ = [
    "TrainConfig", "EnsembleModel", "ensemble_fit", "predict",
    "GBTModel", "Tree", "fit_gbt", "predict_gbt", "predict_gbt_raw",
    "MLPModel", "fit_mlp", "predict_mlp",
    "LSTMModel", "fit_lstm", "predict_lstm",
]


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters; defaults follow the standard grid."""

    learning_rate: float = 0.001
    batch_size: int = 1024
    max_epochs: int = 100
    patience: int = 10
    ensemble: int = 10
    seed: int = 0
    gbt_learning_rate: float = 0.1
    gbt_max_depth: int = 10
    gbt_early_stopping_rounds: int = 10
    gbt_round_budget: int = 2000

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "max_epochs", "patience",
                     "ensemble", "gbt_learning_rate", "gbt_max_depth",
                     "gbt_early_stopping_rounds", "gbt_round_budget"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class EnsembleModel:
    """Seed ensemble: the prediction is the mean of the members' outputs."""

    members: tuple

    def __post_init__(self):
        if not self.members:
            raise ValueError("ensemble needs at least one member")


def ensemble_fit(fit_fn, train, valid, cfg: TrainConfig, **fit_kwargs) -> EnsembleModel:
    """Fit cfg.ensemble members with seeds seed+0 ... seed+(E-1)."""
    members = []
    for k in range(cfg.ensemble):
        members.append(fit_fn(train, valid, replace(cfg, seed=cfg.seed + k), **fit_kwargs))
    return EnsembleModel(members=tuple(members))


def predict(model, matrix) -> np.ndarray:
    """Deterministic forward pass for any fitted model type."""
    if isinstance(model, EnsembleModel):
        preds = np.stack([predict(m, matrix) for m in model.members])
        return preds.mean(axis=0)
    if isinstance(model, LinearModel):
        return predict_linear(model, matrix)
    if isinstance(model, GBTModel):
        return predict_gbt(model, matrix)
    if isinstance(model, MLPModel):
        return predict_mlp(model, matrix)
    if isinstance(model, LSTMModel):
        return predict_lstm(model, matrix)
    raise TypeError(f"cannot predict with {type(model).__name__}")
