"""
Exception hierarchy for the federation.

Everything raised on purpose derives from FederationError so the CLI can
tell a domain failure apart from a bug. Value-like errors also subclass
ValueError so plain `except ValueError` callers keep working.
"""

from typing import Iterable


class FederationError(Exception):
    """Base class for every error raised by this package."""


# ── Numeric ────────────────────────────────────────────────────

class DimensionMismatch(FederationError, ValueError):
    """Two vectors (or a vector and a dataset) disagree on length."""


class DivisionByZero(FederationError, ZeroDivisionError):
    """Elementwise division hit a zero divisor."""


class NonFiniteScalar(FederationError, ValueError):
    """A scalar factor was NaN or infinite."""


class NonFiniteValue(FederationError, ValueError):
    """A parameter vector would contain NaN or infinity."""


class MalformedVector(FederationError, ValueError):
    """Parameter values are not a flat sequence of numbers."""


class EmptyInput(FederationError, ValueError):
    """An operation that needs at least one element got none."""


class RoundMismatch(FederationError, ValueError):
    """An update was produced for a different round than the model."""


class EmptyDataset(FederationError, ValueError):
    """Training or evaluation was asked to run on zero rows."""


# ── Data ───────────────────────────────────────────────────────

class MalformedHeader(FederationError, ValueError):
    """A CSV file is missing a mandatory column."""


class UnknownRegion(FederationError, ValueError):
    """Events reference a region outside the configured set."""

    def __init__(self, stations: Iterable[str]):
        self.stations = sorted(set(stations))
        super().__init__(
            f"Events with unknown region at stations: {', '.join(self.stations) or '(none)'}"
        )


class StationConflict(FederationError, ValueError):
    """A station map lists one station with two different regions or levels."""

    def __init__(self, stations: Iterable[str]):
        self.stations = sorted(set(stations))
        super().__init__(f"Conflicting station map rows for: {', '.join(self.stations)}")


# ── Codec ──────────────────────────────────────────────────────

class CodecError(FederationError, ValueError):
    """A frame could not be encoded or decoded."""


class FrameTooShort(CodecError):
    pass


class LengthMismatch(CodecError):
    pass


class UnknownKind(CodecError):
    pass


class NonFiniteWeight(CodecError):
    pass


class MalformedPayload(CodecError):
    pass


# ── Transport ──────────────────────────────────────────────────

class TransportError(FederationError):
    """A connection to a global server failed."""


class ConnectionRefused(TransportError):
    pass


class PartialDelivery(TransportError):
    """The connection opened but the exchange never completed."""


class UpdateRejected(TransportError):
    """The server answered with an Error envelope instead of the expected reply."""

    def __init__(self, server_id: str, code: str, message: str = ""):
        self.server_id = server_id
        self.code = code
        super().__init__(f"{server_id} rejected the request ({code}) {message}".rstrip())


class AllServersUnreachable(TransportError):
    MESSAGE = "Failed to connect to all servers."

    def __init__(self, attempts: Iterable[str] = ()):
        self.attempts = list(attempts)
        super().__init__(self.MESSAGE)


# ── Server / harness ───────────────────────────────────────────

class QuorumNotMet(FederationError):
    def __init__(self, round_no: int, received: int, quorum: int):
        self.round_no = round_no
        self.received = received
        self.quorum = quorum
        super().__init__(
            f"Round {round_no}: {received} update(s) received, quorum is {quorum}"
        )


class ConfigError(FederationError, ValueError):
    """The experiment configuration is invalid."""


class TopologyError(ConfigError):
    """Clients and servers cannot be wired as configured."""


class MismatchedConfigs(FederationError, ValueError):
    """Two metric bundles cannot be compared."""
