"""
Wire format between client nodes and global servers.

Frame layout:
    [4 bytes big-endian unsigned length N][N bytes UTF-8 JSON]

The JSON object always has the keys kind, round, sender and payload:

    Hello           {}                                   client asks for the model of `round`
    ModelBroadcast  {weights, round, server_id}          server reply to Hello
    Update          {client_id, round, sample_count,
                     weights, pseudo_gradient}           client contribution
    Ack             {}                                   server accepted the Update
    Error           {code, message}                      server refused the request

Floats are written by json.dumps, which uses Python's shortest round-trip
repr, so decode(encode(e)) == e holds exactly. decode() raises only
CodecError subclasses, whatever bytes it is handed.
"""

import json
import math
import struct
from enum import Enum
from typing import Any, Dict, Type, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from src.errors import (
    CodecError,
    FrameTooShort,
    LengthMismatch,
    MalformedPayload,
    NonFiniteWeight,
    UnknownKind,
)
from src.params import ClientUpdate, GlobalModel

HEADER = struct.Struct(">I")
MAX_FRAME_BYTES = 64 * 1024 * 1024


class Kind(str, Enum):
    HELLO = "Hello"
    MODEL_BROADCAST = "ModelBroadcast"
    UPDATE = "Update"
    ACK = "Ack"
    ERROR = "Error"


class HelloBody(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class AckBody(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class ErrorBody(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    code: str = Field(min_length=1)
    message: str = ""


Payload = Union[HelloBody, GlobalModel, ClientUpdate, AckBody, ErrorBody]

PAYLOAD_TYPES: Dict[Kind, Type[BaseModel]] = {
    Kind.HELLO: HelloBody,
    Kind.MODEL_BROADCAST: GlobalModel,
    Kind.UPDATE: ClientUpdate,
    Kind.ACK: AckBody,
    Kind.ERROR: ErrorBody,
}


class Envelope(BaseModel):
    """One framed message."""
    model_config = ConfigDict(frozen=True)

    kind: Kind
    round: int = Field(ge=0)
    sender: str
    payload: Payload

    @model_validator(mode="before")
    @classmethod
    def _typed_payload(cls, data: Any) -> Any:
        if isinstance(data, dict) and isinstance(data.get("payload"), dict):
            try:
                body_type = PAYLOAD_TYPES[Kind(data.get("kind"))]
            except ValueError:
                return data
            data = {**data, "payload": body_type.model_validate(data["payload"])}
        return data

    @model_validator(mode="after")
    def _payload_matches_kind(self) -> "Envelope":
        if type(self.payload) is not PAYLOAD_TYPES[self.kind]:
            raise ValueError(f"{self.kind.value} envelope carries a {type(self.payload).__name__}")
        if self.kind in (Kind.UPDATE, Kind.MODEL_BROADCAST) and self.payload.round != self.round:
            raise ValueError("payload round differs from envelope round")
        return self

    # Constructors used by the client and the server.

    @classmethod
    def hello(cls, sender: str, round_no: int) -> "Envelope":
        return cls(kind=Kind.HELLO, round=round_no, sender=sender, payload=HelloBody())

    @classmethod
    def broadcast(cls, model: GlobalModel) -> "Envelope":
        return cls(kind=Kind.MODEL_BROADCAST, round=model.round, sender=model.server_id, payload=model)

    @classmethod
    def update(cls, update: ClientUpdate) -> "Envelope":
        return cls(kind=Kind.UPDATE, round=update.round, sender=update.client_id, payload=update)

    @classmethod
    def ack(cls, sender: str, round_no: int) -> "Envelope":
        return cls(kind=Kind.ACK, round=round_no, sender=sender, payload=AckBody())

    @classmethod
    def error(cls, sender: str, round_no: int, code: str, message: str = "") -> "Envelope":
        return cls(
            kind=Kind.ERROR, round=round_no, sender=sender,
            payload=ErrorBody(code=code, message=message),
        )


# ── Encoding ───────────────────────────────────────────────────

def encode(envelope: Envelope) -> bytes:
    body = {
        "kind": envelope.kind.value,
        "round": envelope.round,
        "sender": envelope.sender,
        "payload": envelope.payload.model_dump(mode="json"),
    }
    try:
        text = json.dumps(body, separators=(",", ":"), ensure_ascii=False, allow_nan=False)
    except ValueError as e:
        raise NonFiniteWeight(str(e)) from e
    data = text.encode("utf-8")
    return HEADER.pack(len(data)) + data


def _reject_constant(token: str) -> float:
    raise NonFiniteWeight(f"Non-finite number {token} in frame")


def _finite_float(token: str) -> float:
    value = float(token)
    if not math.isfinite(value):
        raise NonFiniteWeight(f"Number {token} overflows a float")
    return value


def payload_length(header: bytes) -> int:
    if len(header) < HEADER.size:
        raise FrameTooShort(f"Frame has {len(header)} byte(s), header needs {HEADER.size}")
    return HEADER.unpack(header[:HEADER.size])[0]


def decode(frame: bytes) -> Envelope:
    declared = payload_length(frame)
    body = frame[HEADER.size:]
    if len(body) != declared:
        raise LengthMismatch(f"Header declares {declared} byte(s), frame carries {len(body)}")

    try:
        obj = json.loads(
            body.decode("utf-8"),
            parse_constant=_reject_constant,
            parse_float=_finite_float,
        )
    except CodecError:
        raise
    except (UnicodeDecodeError, ValueError, RecursionError) as e:
        raise MalformedPayload(f"Frame body is not valid JSON: {e}") from e

    if not isinstance(obj, dict) or set(obj) != {"kind", "round", "sender", "payload"}:
        raise MalformedPayload("Frame must be an object with kind, round, sender and payload")
    try:
        Kind(obj["kind"])
    except (ValueError, TypeError):
        raise UnknownKind(f"Unknown envelope kind {obj['kind']!r}")

    try:
        return Envelope.model_validate(obj)
    except (ValidationError, ValueError, TypeError, OverflowError) as e:
        raise MalformedPayload(f"Invalid envelope: {e}") from e
