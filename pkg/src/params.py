"""
Core numeric types shared by every other module.

    ParameterVector  flat float64 weights, the unit of exchange
    ClientUpdate     one client's contribution to a round
    GlobalModel      a server's model at a given round

ParameterVector wraps a read-only numpy array. It plugs into pydantic through
__get_pydantic_core_schema__, so models holding one validate from plain lists
and dump back to plain lists (which is what the wire codec relies on).

Arithmetic helpers (vec_combine, vec_scale, weighted_mean) work left to right
over their inputs; callers that need bitwise reproducibility fix the order.
"""

import math
from enum import Enum
from typing import Any, Iterable, List, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from pydantic_core import core_schema

from src.errors import (
    DimensionMismatch,
    DivisionByZero,
    EmptyInput,
    MalformedVector,
    NonFiniteScalar,
    NonFiniteValue,
)


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float, np.integer, np.floating)) and not isinstance(
        value, (bool, np.bool_)
    )


def _flat_float_array(values: Any) -> np.ndarray:
    """Copy of values as a 1-D float64 array; strings, bools and nesting are rejected."""
    if isinstance(values, np.ndarray):
        if values.ndim != 1:
            raise MalformedVector(f"Parameter array must be 1-D, got shape {values.shape}")
        if values.dtype.kind not in "iuf":
            raise MalformedVector(f"Parameter array has dtype {values.dtype}, expected numbers")
        return values.astype(np.float64, copy=True)

    if isinstance(values, (str, bytes)) or not isinstance(values, Iterable):
        raise MalformedVector(f"Parameter values must be a sequence, got {type(values).__name__}")
    items = list(values)
    bad = [v for v in items if not _is_number(v)]
    if bad:
        raise MalformedVector(f"Parameter values must be numbers, got {bad[0]!r}")
    try:
        return np.array(items, dtype=np.float64)
    except OverflowError as e:
        raise NonFiniteValue(f"Parameter value overflows a float: {e}") from e


class ParameterVector:
    """Immutable, finite, fixed-length vector of model weights."""

    __slots__ = ("_values",)

    def __init__(self, values: Union[Sequence[float], np.ndarray, "ParameterVector"]):
        if isinstance(values, ParameterVector):
            self._values = values._values
            return
        arr = _flat_float_array(values)
        if arr.size == 0:
            raise EmptyInput("ParameterVector needs at least one value")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteValue("ParameterVector values must be finite")
        arr.setflags(write=False)
        self._values = arr

    @classmethod
    def zeros(cls, dim: int) -> "ParameterVector":
        return cls(np.zeros(dim, dtype=np.float64))

    @property
    def dim(self) -> int:
        return int(self._values.size)

    @property
    def values(self) -> np.ndarray:
        """Read-only view of the underlying array."""
        return self._values

    def tolist(self) -> List[float]:
        return [float(v) for v in self._values]

    def __len__(self) -> int:
        return self.dim

    def __getitem__(self, index: int) -> float:
        return float(self._values[index])

    def __iter__(self):
        return iter(self.tolist())

    def __eq__(self, other: object) -> bool:
        if isinstance(other, ParameterVector):
            return self.dim == other.dim and bool(np.array_equal(self._values, other._values))
        return NotImplemented

    def __hash__(self) -> int:
        return hash(self._values.tobytes())

    def __repr__(self) -> str:
        return f"ParameterVector({self.tolist()})"

    # pydantic v2 integration: validate from any sequence, dump to a list.
    @classmethod
    def __get_pydantic_core_schema__(cls, source: Any, handler: Any) -> core_schema.CoreSchema:
        return core_schema.no_info_plain_validator_function(
            cls,
            serialization=core_schema.plain_serializer_function_ser_schema(
                lambda v: v.tolist()
            ),
        )


# ── Arithmetic ─────────────────────────────────────────────────

class VecOp(str, Enum):
    ADD = "add"
    SUB = "sub"
    MUL = "mul"
    DIV = "div"


def _check_dims(a: ParameterVector, b: ParameterVector) -> None:
    if a.dim != b.dim:
        raise DimensionMismatch(f"Vector dims differ: {a.dim} vs {b.dim}")


def vec_combine(a: ParameterVector, b: ParameterVector, op: Union[VecOp, str]) -> ParameterVector:
    """Elementwise a <op> b."""
    op = VecOp(op)
    _check_dims(a, b)
    if op is VecOp.ADD:
        return ParameterVector(a.values + b.values)
    if op is VecOp.SUB:
        return ParameterVector(a.values - b.values)
    if op is VecOp.MUL:
        return ParameterVector(a.values * b.values)
    if np.any(b.values == 0.0):
        raise DivisionByZero("Elementwise division by a zero component")
    return ParameterVector(a.values / b.values)


def vec_scale(a: ParameterVector, s: float) -> ParameterVector:
    if not math.isfinite(s):
        raise NonFiniteScalar(f"Scale factor must be finite, got {s!r}")
    return ParameterVector(float(s) * a.values)


def weighted_mean(updates: Iterable[Tuple[ParameterVector, float]]) -> ParameterVector:
    """
    Σ (weight_i / Σweights) · vector_i, accumulated in the given order.

    Weights must be positive; all vectors must share a dim.
    """
    pairs = list(updates)
    if not pairs:
        raise EmptyInput("weighted_mean needs at least one vector")

    dim = pairs[0][0].dim
    total = 0.0
    for vector, weight in pairs:
        if vector.dim != dim:
            raise DimensionMismatch(f"Vector dims differ: {dim} vs {vector.dim}")
        if not (weight > 0 and math.isfinite(weight)):
            raise NonFiniteScalar(f"Weights must be positive and finite, got {weight!r}")
        total += weight

    acc = np.zeros(dim, dtype=np.float64)
    for vector, weight in pairs:
        acc = acc + (weight / total) * vector.values
    return ParameterVector(acc)


# ── Domain records ─────────────────────────────────────────────

class ClientUpdate(BaseModel):
    """
    One client's round contribution.

    pseudo_gradient is broadcast weights minus post-training weights. Build
    updates through ClientUpdate.from_training so that relation holds.
    """
    model_config = ConfigDict(frozen=True)

    client_id: str
    round: int = Field(ge=0)
    sample_count: int = Field(ge=1)
    weights: ParameterVector
    pseudo_gradient: ParameterVector

    @model_validator(mode="after")
    def _same_dims(self) -> "ClientUpdate":
        if self.weights.dim != self.pseudo_gradient.dim:
            raise DimensionMismatch(
                f"weights dim {self.weights.dim} != pseudo_gradient dim {self.pseudo_gradient.dim}"
            )
        return self

    @classmethod
    def from_training(
        cls,
        client_id: str,
        round_no: int,
        sample_count: int,
        broadcast: ParameterVector,
        local: ParameterVector,
    ) -> "ClientUpdate":
        return cls(
            client_id=client_id,
            round=round_no,
            sample_count=sample_count,
            weights=local,
            pseudo_gradient=vec_combine(broadcast, local, VecOp.SUB),
        )

    @property
    def dim(self) -> int:
        return self.weights.dim


class GlobalModel(BaseModel):
    """A global server's model; round counts completed aggregation rounds."""
    model_config = ConfigDict(frozen=True)

    weights: ParameterVector
    round: int = Field(default=0, ge=0)
    server_id: str = ""

    @property
    def dim(self) -> int:
        return self.weights.dim

    def advanced(self, weights: ParameterVector) -> "GlobalModel":
        """Next-round model on the same server."""
        return GlobalModel(weights=weights, round=self.round + 1, server_id=self.server_id)
