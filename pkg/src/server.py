"""
Global server: one event loop per server, owning its model and optimizer state.

Per round:
    1. Answer Hello(round k) with the current model once the model reaches k
    2. Queue Update envelopes tagged with the current model round (Ack them);
       anything else is answered with an Error and discarded
    3. Stop collecting when every expected client has reported, or when the
       transport closes the round (timeout / simulated settle)
    4. Aggregate if the quorum is met, otherwise carry the weights forward
       and record the round as failed
    5. Evaluate the new model on the held-out split and append a RoundRecord

Servers never talk to each other.
"""

import asyncio
import logging
from datetime import datetime, timezone
from enum import Enum
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.aggregation import aggregate, reset_state
from src.codec import Envelope, Kind
from src.config import AggregatorConfig
from src.data import ClientDataset
from src.errors import DimensionMismatch, QuorumNotMet, TransportError
from src.params import ClientUpdate, GlobalModel
from src.trainer import evaluate
from src.transport import Connection, ServerAddress, Transport

logger = logging.getLogger(__name__)


class ServerConfig(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    id: str = Field(min_length=1)
    aggregator: AggregatorConfig = Field(default_factory=AggregatorConfig)
    expected_clients: List[str] = Field(min_length=1)
    quorum: Optional[int] = Field(default=None, ge=1)  # None -> every expected client
    rounds: int = Field(default=3, ge=1)
    round_timeout_s: float = Field(default=30.0, gt=0)
    endpoint: Optional[str] = None
    eval_dataset: ClientDataset

    @model_validator(mode="after")
    def _quorum_fits(self) -> "ServerConfig":
        if self.quorum is not None and self.quorum > len(self.expected_clients):
            raise ValueError(
                f"quorum {self.quorum} exceeds the {len(self.expected_clients)} expected client(s)"
            )
        return self

    @property
    def required_quorum(self) -> int:
        return self.quorum if self.quorum is not None else len(self.expected_clients)

    @property
    def address(self) -> ServerAddress:
        return ServerAddress(id=self.id, endpoint=self.endpoint)


class RoundStatus(str, Enum):
    AGGREGATED = "aggregated"
    FAILED = "failed"


class RoundRecord(BaseModel):
    """
    Outcome of one server round. `round` is the index of the model produced
    (1 for the first aggregation). aggregated_at is ignored by ==.
    """
    model_config = ConfigDict(frozen=True)

    server_id: str
    round: int = Field(ge=1)
    status: RoundStatus = RoundStatus.AGGREGATED
    participants: List[str] = Field(default_factory=list)
    eval_loss: float = Field(ge=0.0)
    error: Optional[str] = None
    aggregated_at: datetime = Field(default_factory=lambda: datetime.now(timezone.utc))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RoundRecord):
            return NotImplemented
        skip = {"aggregated_at"}
        return self.model_dump(exclude=skip) == other.model_dump(exclude=skip)

    __hash__ = None


def eval_history(records: List[RoundRecord]) -> List[Tuple[int, float]]:
    return [(r.round, r.eval_loss) for r in sorted(records, key=lambda r: r.round)]


class GlobalServer:
    """
    Serves one federation member. Construct, then `await server.run()` while
    the transport delivers connections to `server.handle`.
    """

    def __init__(self, config: ServerConfig, initial: GlobalModel, transport: Transport):
        if initial.dim != config.eval_dataset.feature_count + 1:
            raise DimensionMismatch(
                f"Initial model dim {initial.dim} does not fit "
                f"{config.eval_dataset.feature_count} feature(s) + bias"
            )
        self.config = config
        self.transport = transport
        self.model = GlobalModel(weights=initial.weights, round=initial.round, server_id=config.id)
        self.state = reset_state(config.aggregator, initial.dim)
        self.records: List[RoundRecord] = []
        self._expected = set(config.expected_clients)
        self._queue: "asyncio.Queue[ClientUpdate]" = asyncio.Queue()
        self._advanced = asyncio.Condition()
        self._finished = False

    @property
    def id(self) -> str:
        return self.config.id

    # ── Connection handling ────────────────────────────────────

    async def handle(self, conn: Connection) -> None:
        try:
            request = await conn.receive()
            reply = await self._reply(request)
            await conn.send(reply)
        except TransportError as e:
            logger.debug("%s: dropped connection from %s (%s)", self.id, conn.peer, e)
        finally:
            await conn.close()

    async def _reply(self, request: Envelope) -> Envelope:
        if request.kind is Kind.HELLO:
            return await self._reply_hello(request)
        if request.kind is Kind.UPDATE:
            return self._accept_update(request.payload)
        return Envelope.error(self.id, self.model.round, "unexpected_kind", request.kind.value)

    async def _reply_hello(self, request: Envelope) -> Envelope:
        async with self._advanced:
            await self._advanced.wait_for(
                lambda: self.model.round >= request.round or self._finished
            )
        if self.model.round < request.round:
            return Envelope.error(self.id, self.model.round, "finished", "server has stopped")
        return Envelope.broadcast(self.model)

    def _accept_update(self, update: ClientUpdate) -> Envelope:
        current = self.model.round
        if self._finished or update.round != current:
            logger.warning(
                "%s: discarding stale update from %s (round %d, server at %d)",
                self.id, update.client_id, update.round, current,
            )
            return Envelope.error(self.id, current, "stale_round", f"server is at round {current}")
        if update.client_id not in self._expected:
            logger.warning("%s: update from unexpected client %s", self.id, update.client_id)
            return Envelope.error(self.id, current, "unexpected_client", update.client_id)
        if update.dim != self.model.dim:
            return Envelope.error(self.id, current, "dimension_mismatch", f"expected {self.model.dim}")
        self._queue.put_nowait(update)
        return Envelope.ack(self.id, current)

    # ── Round loop ─────────────────────────────────────────────

    def _take(self, received: Dict[str, ClientUpdate], update: ClientUpdate) -> None:
        if update.client_id in received:
            logger.warning("%s: duplicate update from %s for round %d; keeping the latest",
                           self.id, update.client_id, update.round)
        received[update.client_id] = update

    async def _collect(self, round_no: int) -> Dict[str, ClientUpdate]:
        received: Dict[str, ClientUpdate] = {}
        closed = asyncio.ensure_future(
            self.transport.wait_round_closed(round_no, self.config.round_timeout_s)
        )
        try:
            while not self._expected <= set(received):
                getter = asyncio.ensure_future(self._queue.get())
                done, _ = await asyncio.wait({getter, closed}, return_when=asyncio.FIRST_COMPLETED)
                if getter in done:
                    self._take(received, getter.result())
                else:
                    getter.cancel()
                    break
        finally:
            closed.cancel()
        while not self._queue.empty():
            self._take(received, self._queue.get_nowait())
        return received

    def _close_round(self, round_no: int, received: Dict[str, ClientUpdate]) -> RoundRecord:
        if len(received) < self.config.required_quorum:
            failure = QuorumNotMet(round_no, len(received), self.config.required_quorum)
            logger.warning("%s: %s; carrying the model forward", self.id, failure)
            self.model = self.model.advanced(self.model.weights)
            return RoundRecord(
                server_id=self.id,
                round=self.model.round,
                status=RoundStatus.FAILED,
                eval_loss=evaluate(self.model.weights, self.config.eval_dataset),
                error=str(failure),
            )

        updates = list(received.values())
        self.model, self.state = aggregate(self.config.aggregator, self.state, self.model, updates)
        loss = evaluate(self.model.weights, self.config.eval_dataset)
        logger.info("%s: round %d aggregated %d update(s), eval loss %.6g",
                    self.id, self.model.round, len(updates), loss)
        return RoundRecord(
            server_id=self.id,
            round=self.model.round,
            participants=sorted(received),
            eval_loss=loss,
        )

    async def run(self) -> List[RoundRecord]:
        try:
            for _ in range(self.config.rounds):
                round_no = self.model.round + 1
                logger.info("%s: round %d open", self.id, round_no)
                received = await self._collect(round_no)
                self.records.append(self._close_round(round_no, received))
                async with self._advanced:
                    self._advanced.notify_all()
        finally:
            self._finished = True
            async with self._advanced:
                self._advanced.notify_all()
        return self.records


async def run_server(
    config: ServerConfig, initial: GlobalModel, transport: Transport
) -> List[RoundRecord]:
    """Listen, run config.rounds rounds, stop listening, return the records."""
    server = GlobalServer(config, initial, transport)
    await transport.serve(config.address, server.handle)
    try:
        return await server.run()
    finally:
        await transport.close_listener(config.id)
