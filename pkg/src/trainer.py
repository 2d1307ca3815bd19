"""
Local training on a client: linear regression, MSE loss, full-batch
gradient descent.

Flattened weight layout is [coefficients..., bias], so a dataset with F
feature columns trains a ParameterVector of dim F + 1. Everything here is a
pure function of its inputs.
"""

import logging
from typing import List, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from src.config import TrainConfig
from src.data import ClientDataset
from src.errors import DimensionMismatch, EmptyDataset
from src.params import ParameterVector

logger = logging.getLogger(__name__)


class LinearModel(BaseModel):
    """Structured view of a flattened weight vector."""
    model_config = ConfigDict(frozen=True)

    coefficients: ParameterVector
    bias: float

    @classmethod
    def from_vector(cls, weights: ParameterVector) -> "LinearModel":
        if weights.dim < 2:
            raise DimensionMismatch("A linear model needs at least one coefficient and a bias")
        return cls(coefficients=ParameterVector(weights.values[:-1]), bias=weights[-1])

    def flatten(self) -> ParameterVector:
        return ParameterVector(np.append(self.coefficients.values, self.bias))

    @property
    def feature_count(self) -> int:
        return self.coefficients.dim


class TrainReport(BaseModel):
    """Outcome of one local training run."""
    model_config = ConfigDict(frozen=True)

    loss_per_epoch: List[float]
    final_weights: ParameterVector
    sample_count: int = Field(ge=1)

    @field_validator("loss_per_epoch")
    @classmethod
    def _finite_losses(cls, v: List[float]) -> List[float]:
        if any(not np.isfinite(x) or x < 0 for x in v):
            raise ValueError("losses must be finite and non-negative")
        return v

    @property
    def final_loss(self) -> float:
        return self.loss_per_epoch[-1]


def initial_weights(feature_count: int) -> ParameterVector:
    """Zero model for a dataset with feature_count columns."""
    return ParameterVector.zeros(feature_count + 1)


def _split(weights: ParameterVector, dataset: ClientDataset) -> Tuple[np.ndarray, float]:
    if dataset.row_count == 0:
        raise EmptyDataset(f"Dataset for {dataset.region!r} has no rows")
    if weights.dim != dataset.feature_count + 1:
        raise DimensionMismatch(
            f"weights dim {weights.dim} != feature_count + 1 ({dataset.feature_count + 1})"
        )
    return weights.values[:-1], float(weights.values[-1])


def _residuals(coef: np.ndarray, bias: float, dataset: ClientDataset) -> np.ndarray:
    return dataset.features @ coef + bias - dataset.targets


def evaluate(weights: ParameterVector, dataset: ClientDataset) -> float:
    """Mean squared error of the linear model on the dataset."""
    coef, bias = _split(weights, dataset)
    r = _residuals(coef, bias, dataset)
    return float(np.mean(r * r))


def gradient(weights: ParameterVector, dataset: ClientDataset) -> ParameterVector:
    """Analytic gradient of evaluate() w.r.t. the flattened weights."""
    coef, bias = _split(weights, dataset)
    r = _residuals(coef, bias, dataset)
    scale = 2.0 / dataset.row_count
    grad_coef = scale * (dataset.features.T @ r)
    grad_bias = scale * float(np.sum(r))
    return ParameterVector(np.append(grad_coef, grad_bias))


def train_local(start: ParameterVector, dataset: ClientDataset, config: TrainConfig) -> TrainReport:
    """
    Run config.epochs full-batch gradient-descent steps from start.

    loss_per_epoch[k] is the MSE after step k + 1. config.seed is not used:
    full-batch descent has no randomness.
    """
    _split(start, dataset)

    weights = start
    losses: List[float] = []
    for epoch in range(config.epochs):
        step = gradient(weights, dataset).values
        weights = ParameterVector(weights.values - config.learning_rate * step)
        losses.append(evaluate(weights, dataset))
        logger.debug("%s epoch %d loss %.6g", dataset.region, epoch + 1, losses[-1])

    return TrainReport(
        loss_per_epoch=losses,
        final_weights=weights,
        sample_count=dataset.row_count,
    )
