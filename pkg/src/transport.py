"""
Connections between client nodes and global servers.

Two transports implement the same interface:

    SimulatedNetwork  in-process, deterministic; every connection is a pair of
                      asyncio.StreamReader pipes carrying real codec frames.
                      A round "settles" once every registered client has
                      finished its attempt for that round, and servers use the
                      settle signal as their round timeout.
    TcpTransport      asyncio streams over host:port, wall-clock timeouts.

FaultyTransport wraps either one with a FaultPlan. A fault targets a server id
(every dial to it fails) or a client id (every dial it makes fails) for a
range of 1-based rounds:

    refuse  the dial raises ConnectionRefused
    drop    the dial succeeds, the first frame is cut after its 4-byte
            header and the connection closes (PartialDelivery)
"""

import asyncio
import logging
import random
from abc import ABC, abstractmethod
from enum import Enum
from typing import Awaitable, Callable, Dict, Iterable, List, Optional, Set, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.codec import HEADER, MAX_FRAME_BYTES, Envelope, decode, encode
from src.errors import CodecError, ConnectionRefused, PartialDelivery

logger = logging.getLogger(__name__)

DIAL_TIMEOUT_S = 2.0
ACK_TIMEOUT_S = 2.0


# ── Addresses and fault schedules ──────────────────────────────

class ServerAddress(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: str = Field(min_length=1)
    endpoint: Optional[str] = None

    def host_port(self) -> Tuple[str, int]:
        if not self.endpoint:
            raise ConnectionRefused(f"Server {self.id} has no host:port endpoint")
        host, port = self.endpoint.rsplit(":", 1)
        return host, int(port)


class FaultMode(str, Enum):
    REFUSE = "refuse"
    DROP = "drop"


class Fault(BaseModel):
    """Connections involving `target` fail from start_round to end_round (inclusive)."""
    model_config = ConfigDict(frozen=True)

    target: str = Field(min_length=1)
    start_round: int = Field(default=1, ge=1)
    end_round: Optional[int] = None  # None -> until the end of the run
    mode: FaultMode = FaultMode.REFUSE

    @model_validator(mode="after")
    def _ordered(self) -> "Fault":
        if self.end_round is not None and self.end_round < self.start_round:
            raise ValueError(f"end_round {self.end_round} precedes start_round {self.start_round}")
        return self

    def covers(self, round_no: int) -> bool:
        return self.start_round <= round_no and (self.end_round is None or round_no <= self.end_round)


class FaultPlan(BaseModel):
    model_config = ConfigDict(frozen=True)

    faults: List[Fault] = Field(default_factory=list)

    @model_validator(mode="after")
    def _no_overlap(self) -> "FaultPlan":
        by_target: Dict[str, List[Fault]] = {}
        for fault in self.faults:
            by_target.setdefault(fault.target, []).append(fault)
        for target, faults in by_target.items():
            faults.sort(key=lambda f: f.start_round)
            for earlier, later in zip(faults, faults[1:]):
                if earlier.end_round is None or earlier.end_round >= later.start_round:
                    raise ValueError(f"Fault intervals overlap for {target!r}")
        return self

    def fault_for(self, target: str, round_no: int) -> Optional[Fault]:
        for fault in self.faults:
            if fault.target == target and fault.covers(round_no):
                return fault
        return None

    def __bool__(self) -> bool:
        return bool(self.faults)


# ── Connections ────────────────────────────────────────────────

async def read_frame(reader: asyncio.StreamReader) -> bytes:
    header = await reader.readexactly(HEADER.size)
    length = HEADER.unpack(header)[0]
    if length > MAX_FRAME_BYTES:
        raise PartialDelivery(f"Peer announced a {length}-byte frame")
    return header + await reader.readexactly(length)


class Connection:
    """One request/reply exchange over a stream pair."""

    def __init__(self, reader: asyncio.StreamReader, writer, peer: str):
        self.reader = reader
        self.writer = writer
        self.peer = peer

    async def send(self, envelope: Envelope) -> None:
        frame = encode(envelope)
        logger.debug("-> %s %s round %d (%d bytes)", self.peer, envelope.kind.value, envelope.round, len(frame))
        await self._write(frame)

    async def _write(self, data: bytes) -> None:
        try:
            self.writer.write(data)
            await self.writer.drain()
        except (ConnectionError, RuntimeError) as e:
            raise PartialDelivery(f"Connection to {self.peer} broke while sending: {e}") from e

    async def receive(self, timeout: Optional[float] = None) -> Envelope:
        try:
            frame = await asyncio.wait_for(read_frame(self.reader), timeout)
        except asyncio.IncompleteReadError as e:
            raise PartialDelivery(f"{self.peer} closed the connection mid-frame") from e
        except asyncio.TimeoutError as e:
            raise PartialDelivery(f"No reply from {self.peer} within {timeout}s") from e
        except ConnectionError as e:
            raise PartialDelivery(f"Connection to {self.peer} broke: {e}") from e
        try:
            return decode(frame)
        except CodecError as e:
            raise PartialDelivery(f"Unreadable frame from {self.peer}: {e}") from e

    async def close(self) -> None:
        if not self.writer.is_closing():
            self.writer.close()
        try:
            await self.writer.wait_closed()
        except ConnectionError:
            pass


class DroppingConnection(Connection):
    """Sends only the header of its first frame, then hangs up."""

    async def send(self, envelope: Envelope) -> None:
        frame = encode(envelope)
        await self._write(frame[:HEADER.size])
        await self.close()
        raise PartialDelivery(f"Connection to {self.peer} dropped mid-message")


class _PipeWriter:
    """StreamWriter look-alike that feeds the peer's StreamReader."""

    def __init__(self, peer: asyncio.StreamReader):
        self._peer = peer
        self._closed = False

    def write(self, data: bytes) -> None:
        if self._closed:
            raise ConnectionResetError("pipe is closed")
        self._peer.feed_data(data)

    async def drain(self) -> None:
        await asyncio.sleep(0)

    def is_closing(self) -> bool:
        return self._closed

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._peer.feed_eof()

    async def wait_closed(self) -> None:
        return None


Handler = Callable[[Connection], Awaitable[None]]


# ── Transport interface ────────────────────────────────────────

class Transport(ABC):
    """What clients and servers need from the network."""

    ack_timeout: Optional[float] = None
    fetch_timeout: Optional[float] = None

    @abstractmethod
    async def connect(self, address: ServerAddress, client_id: str, round_no: int) -> Connection:
        """Dial a server on behalf of client_id during round_no (1-based)."""

    @abstractmethod
    async def serve(self, address: ServerAddress, handler: Handler) -> None:
        """Start accepting connections for a server."""

    @abstractmethod
    async def close_listener(self, server_id: str) -> None:
        ...

    @abstractmethod
    async def wait_round_closed(self, round_no: int, timeout: float) -> None:
        """Resolve when a server should stop waiting for round_no updates."""

    def register_client(self, client_id: str) -> None:
        return None

    def client_round_done(self, client_id: str, round_no: int) -> None:
        return None

    def start_order(self, client_ids: Iterable[str]) -> List[str]:
        return list(client_ids)


class SimulatedNetwork(Transport):
    """Deterministic in-process network."""

    def __init__(self, seed: int = 0):
        self._rng = random.Random(seed)
        self._listeners: Dict[str, Handler] = {}
        self._clients: Set[str] = set()
        self._done: Dict[int, Set[str]] = {}
        self._settled: Dict[int, asyncio.Event] = {}
        self._handlers: Dict[str, Set[asyncio.Task]] = {}

    def register_client(self, client_id: str) -> None:
        self._clients.add(client_id)

    def start_order(self, client_ids: Iterable[str]) -> List[str]:
        order = sorted(client_ids)
        self._rng.shuffle(order)
        return order

    def _event(self, round_no: int) -> asyncio.Event:
        if round_no not in self._settled:
            self._settled[round_no] = asyncio.Event()
        return self._settled[round_no]

    def client_round_done(self, client_id: str, round_no: int) -> None:
        done = self._done.setdefault(round_no, set())
        done.add(client_id)
        if self._clients <= done:
            logger.debug("Round %d settled", round_no)
            self._event(round_no).set()

    async def wait_round_closed(self, round_no: int, timeout: float) -> None:
        await self._event(round_no).wait()

    async def serve(self, address: ServerAddress, handler: Handler) -> None:
        self._listeners[address.id] = handler

    async def close_listener(self, server_id: str) -> None:
        self._listeners.pop(server_id, None)
        pending = self._handlers.pop(server_id, set())
        if pending:
            await asyncio.gather(*pending, return_exceptions=True)

    async def connect(self, address: ServerAddress, client_id: str, round_no: int) -> Connection:
        handler = self._listeners.get(address.id)
        if handler is None:
            raise ConnectionRefused(f"Nothing is listening as {address.id}")

        to_server = asyncio.StreamReader()
        to_client = asyncio.StreamReader()
        server_side = Connection(to_server, _PipeWriter(to_client), peer=client_id)
        client_side = Connection(to_client, _PipeWriter(to_server), peer=address.id)

        task = asyncio.get_running_loop().create_task(handler(server_side))
        tasks = self._handlers.setdefault(address.id, set())
        tasks.add(task)
        task.add_done_callback(tasks.discard)
        return client_side


class TcpTransport(Transport):
    """asyncio TCP streams; used by the distributed CLI mode."""

    def __init__(
        self,
        dial_timeout: float = DIAL_TIMEOUT_S,
        ack_timeout: float = ACK_TIMEOUT_S,
        fetch_timeout: Optional[float] = None,
    ):
        self.dial_timeout = dial_timeout
        self.ack_timeout = ack_timeout
        self.fetch_timeout = fetch_timeout
        self._servers: Dict[str, asyncio.AbstractServer] = {}

    async def connect(self, address: ServerAddress, client_id: str, round_no: int) -> Connection:
        host, port = address.host_port()
        try:
            reader, writer = await asyncio.wait_for(
                asyncio.open_connection(host, port), self.dial_timeout
            )
        except (OSError, asyncio.TimeoutError) as e:
            raise ConnectionRefused(f"Could not reach {address.id} at {address.endpoint}: {e}") from e
        return Connection(reader, writer, peer=address.id)

    async def serve(self, address: ServerAddress, handler: Handler) -> None:
        host, port = address.host_port()

        async def on_connect(reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
            peer = writer.get_extra_info("peername")
            await handler(Connection(reader, writer, peer=str(peer)))

        self._servers[address.id] = await asyncio.start_server(on_connect, host, port)
        logger.info("%s listening on %s", address.id, address.endpoint)

    async def close_listener(self, server_id: str) -> None:
        server = self._servers.pop(server_id, None)
        if server is not None:
            server.close()
            await server.wait_closed()

    async def wait_round_closed(self, round_no: int, timeout: float) -> None:
        await asyncio.sleep(timeout)


class FaultyTransport(Transport):
    """Applies a FaultPlan in front of another transport."""

    def __init__(self, inner: Transport, plan: FaultPlan):
        self.inner = inner
        self.plan = plan
        self.ack_timeout = inner.ack_timeout
        self.fetch_timeout = inner.fetch_timeout

    async def connect(self, address: ServerAddress, client_id: str, round_no: int) -> Connection:
        fault = self.plan.fault_for(address.id, round_no) or self.plan.fault_for(client_id, round_no)
        if fault is not None and fault.mode is FaultMode.REFUSE:
            raise ConnectionRefused(
                f"{client_id} -> {address.id} refused in round {round_no} (fault on {fault.target})"
            )
        conn = await self.inner.connect(address, client_id, round_no)
        if fault is not None:
            return DroppingConnection(conn.reader, conn.writer, conn.peer)
        return conn

    async def serve(self, address: ServerAddress, handler: Handler) -> None:
        await self.inner.serve(address, handler)

    async def close_listener(self, server_id: str) -> None:
        await self.inner.close_listener(server_id)

    async def wait_round_closed(self, round_no: int, timeout: float) -> None:
        await self.inner.wait_round_closed(round_no, timeout)

    def register_client(self, client_id: str) -> None:
        self.inner.register_client(client_id)

    def client_round_done(self, client_id: str, round_no: int) -> None:
        self.inner.client_round_done(client_id, round_no)

    def start_order(self, client_ids: Iterable[str]) -> List[str]:
        return self.inner.start_order(client_ids)


def inject(plan: FaultPlan, inner: Transport) -> Transport:
    """Wrap a transport with a fault schedule; an empty plan changes nothing."""
    if not plan:
        return inner
    return FaultyTransport(inner, plan)
