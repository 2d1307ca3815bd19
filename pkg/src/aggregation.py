"""
Server-side aggregation strategies.

    FedAvg      sample-weighted mean of client weights (Replace), or a step of
                size eta along the weighted mean descent direction (Delta)
    FedAvgM     server momentum over the mean pseudo-gradient
    FedAdaGrad  accumulated squared mean pseudo-gradient
    FedYogi     Yogi second moment over the weighted pseudo-gradient
    FedAdam     Adam moments over the weighted pseudo-gradient

Every strategy is a pure function of (config, state, current model, updates):
the optimizer state goes in and comes back out as a value, so one server loop
owns one AggregatorState and nothing is hidden here.

Pseudo-gradients are g_i = broadcast - local, so every step subtracts.
Updates are always summed in ascending client_id order.
"""

import logging
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from src.config import AggregatorConfig, Strategy, UpdateMode
from src.errors import DimensionMismatch, EmptyInput, RoundMismatch
from src.params import ClientUpdate, GlobalModel, ParameterVector, weighted_mean

logger = logging.getLogger(__name__)


class AggregatorState(BaseModel):
    """Per-server optimizer memory. Only the vectors a strategy needs are set."""
    model_config = ConfigDict(frozen=True)

    velocity: Optional[ParameterVector] = None      # FedAvgM
    accumulator: Optional[ParameterVector] = None   # FedAdaGrad
    moment1: Optional[ParameterVector] = None       # FedYogi / FedAdam
    moment2: Optional[ParameterVector] = None       # FedYogi / FedAdam
    round: int = Field(default=0, ge=0)


def reset_state(config: AggregatorConfig, dim: int) -> AggregatorState:
    """Zero-initialised state for the configured strategy."""
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    zeros = ParameterVector.zeros(dim)
    strategy = config.strategy
    if strategy is Strategy.FEDAVGM:
        return AggregatorState(velocity=zeros)
    if strategy is Strategy.FEDADAGRAD:
        return AggregatorState(accumulator=zeros)
    if strategy in (Strategy.FEDYOGI, Strategy.FEDADAM):
        return AggregatorState(moment1=zeros, moment2=zeros)
    return AggregatorState()


# ── Helpers ────────────────────────────────────────────────────

def _canonical(updates: List[ClientUpdate]) -> List[ClientUpdate]:
    return sorted(updates, key=lambda u: u.client_id)


def _sample_weighted(vectors: List[ParameterVector], updates: List[ClientUpdate]) -> np.ndarray:
    return weighted_mean(
        (v, float(u.sample_count)) for v, u in zip(vectors, updates)
    ).values


def _plain_mean(updates: List[ClientUpdate]) -> np.ndarray:
    acc = np.zeros(updates[0].dim, dtype=np.float64)
    for u in updates:
        acc = acc + u.pseudo_gradient.values
    return acc / len(updates)


def _adaptive_step(numerator: np.ndarray, second: np.ndarray, eta: float, epsilon: float) -> np.ndarray:
    """eta * numerator / (sqrt(second) + epsilon); a zero denominator gives a zero step."""
    denom = np.sqrt(second) + epsilon
    out = np.zeros_like(numerator)
    np.divide(eta * numerator, denom, out=out, where=denom > 0)
    return out


def _state_vector(vec: Optional[ParameterVector], dim: int) -> np.ndarray:
    if vec is None:
        return np.zeros(dim, dtype=np.float64)
    if vec.dim != dim:
        raise DimensionMismatch(f"Aggregator state dim {vec.dim} != model dim {dim}")
    return vec.values


# ── Strategies ─────────────────────────────────────────────────

StrategyFn = Callable[
    [AggregatorConfig, AggregatorState, np.ndarray, List[ClientUpdate]],
    Tuple[np.ndarray, AggregatorState],
]


def _fedavg(config, state, current, updates):
    if config.update_mode is UpdateMode.REPLACE:
        return _sample_weighted([u.weights for u in updates], updates), state
    descent = -_sample_weighted([u.pseudo_gradient for u in updates], updates)
    return current + config.eta * descent, state


def _fedavgm(config, state, current, updates):
    velocity = config.momentum * _state_vector(state.velocity, current.size)
    velocity = velocity + config.eta * _plain_mean(updates)
    return current - velocity, state.model_copy(update={"velocity": ParameterVector(velocity)})


def _fedadagrad(config, state, current, updates):
    g = _plain_mean(updates)
    accumulator = _state_vector(state.accumulator, current.size) + g * g
    step = _adaptive_step(g, accumulator, config.eta, config.epsilon)
    return current - step, state.model_copy(update={"accumulator": ParameterVector(accumulator)})


def _moments(config, state, current, updates, second_moment):
    g = _sample_weighted([u.pseudo_gradient for u in updates], updates)
    m = config.beta1 * _state_vector(state.moment1, current.size) + (1.0 - config.beta1) * g
    v = second_moment(_state_vector(state.moment2, current.size), g * g, config.beta2)
    step = _adaptive_step(m, v, config.eta, config.epsilon)
    new_state = state.model_copy(
        update={"moment1": ParameterVector(m), "moment2": ParameterVector(v)}
    )
    return current - step, new_state


def _fedadam(config, state, current, updates):
    return _moments(
        config, state, current, updates,
        lambda v, g2, beta2: beta2 * v + (1.0 - beta2) * g2,
    )


def _fedyogi(config, state, current, updates):
    return _moments(
        config, state, current, updates,
        lambda v, g2, beta2: v - (1.0 - beta2) * g2 * np.sign(v - g2),
    )


STRATEGIES: Dict[Strategy, StrategyFn] = {
    Strategy.FEDAVG: _fedavg,
    Strategy.FEDAVGM: _fedavgm,
    Strategy.FEDADAGRAD: _fedadagrad,
    Strategy.FEDYOGI: _fedyogi,
    Strategy.FEDADAM: _fedadam,
}


def aggregate(
    config: AggregatorConfig,
    state: AggregatorState,
    current: GlobalModel,
    updates: List[ClientUpdate],
) -> Tuple[GlobalModel, AggregatorState]:
    """
    Combine one round of client updates into the next global model.

    Args:
        config: Strategy and hyperparameters
        state: Optimizer state from the previous round (see reset_state)
        current: Model the updates were trained from
        updates: Client updates, all tagged with current.round

    Returns:
        (model for round current.round + 1, updated state)
    """
    if not updates:
        raise EmptyInput("aggregate needs at least one client update")
    for u in updates:
        if u.dim != current.dim:
            raise DimensionMismatch(
                f"Update from {u.client_id} has dim {u.dim}, model has {current.dim}"
            )
        if u.round != current.round:
            raise RoundMismatch(
                f"Update from {u.client_id} is for round {u.round}, model is at {current.round}"
            )

    ordered = _canonical(updates)
    new_weights, new_state = STRATEGIES[config.strategy](
        config, state, current.weights.values, ordered
    )
    new_state = new_state.model_copy(update={"round": state.round + 1})

    logger.debug(
        "%s aggregated %d update(s) for round %d on %s",
        config.strategy.value, len(ordered), current.round, current.server_id or "?",
    )
    return current.advanced(ParameterVector(new_weights)), new_state
