"""
Client node: fetch the global model, train locally, deliver the update.

Both the fetch and the delivery scan the client's server list in order and
stop at the first server that completes the exchange:

    connection_established = False
    for server in servers:
        try: exchange with server; connection_established = True; break
        except TransportError: continue with the next server
    if not connection_established: "Failed to connect to all servers."

A round whose scan fails is recorded and skipped; the client moves on to
the next round.
"""

import logging
from typing import Awaitable, Callable, List, Optional, Sequence, Tuple, TypeVar

from pydantic import BaseModel, ConfigDict, Field

from src.codec import Envelope, Kind
from src.config import TrainConfig
from src.data import ClientDataset
from src.errors import AllServersUnreachable, TransportError, UpdateRejected
from src.params import ClientUpdate, GlobalModel
from src.trainer import train_local
from src.transport import ServerAddress, Transport

logger = logging.getLogger(__name__)

T = TypeVar("T")


class ClientRoundReport(BaseModel):
    """What one client did in one round (round is 1-based)."""
    model_config = ConfigDict(frozen=True)

    client_id: str
    round: int = Field(ge=1)
    fetched_from: Optional[str] = None
    delivered_to: Optional[str] = None
    loss_per_epoch: List[float] = Field(default_factory=list)
    failed_attempts: List[str] = Field(default_factory=list)
    error: Optional[str] = None

    @property
    def delivered(self) -> bool:
        return self.delivered_to is not None

    @property
    def local_final_loss(self) -> Optional[float]:
        return self.loss_per_epoch[-1] if self.loss_per_epoch else None


async def _scan(
    servers: Sequence[ServerAddress],
    attempt: Callable[[ServerAddress], Awaitable[T]],
    failed: List[str],
) -> Tuple[str, T]:
    if not servers:
        raise ValueError("Server list is empty")

    connection_established = False
    server_id: Optional[str] = None
    result = None
    for address in servers:
        try:
            result = await attempt(address)
            connection_established = True
            server_id = address.id
            break
        except TransportError as e:
            logger.info("%s unavailable (%s); trying the next server", address.id, e)
            failed.append(address.id)
            continue

    if not connection_established:
        logger.warning(AllServersUnreachable.MESSAGE)
        raise AllServersUnreachable(failed)
    return server_id, result


async def fetch_with_failover(
    transport: Transport,
    servers: Sequence[ServerAddress],
    client_id: str,
    round_no: int,
    failed: Optional[List[str]] = None,
) -> Tuple[str, GlobalModel]:
    """Get the model to train on in round_no (1-based) from the first reachable server."""

    async def attempt(address: ServerAddress) -> GlobalModel:
        conn = await transport.connect(address, client_id, round_no)
        try:
            await conn.send(Envelope.hello(client_id, round_no - 1))
            reply = await conn.receive(transport.fetch_timeout)
        finally:
            await conn.close()
        if reply.kind is not Kind.MODEL_BROADCAST:
            code = reply.payload.code if reply.kind is Kind.ERROR else reply.kind.value
            raise UpdateRejected(address.id, code)
        return reply.payload

    return await _scan(servers, attempt, failed if failed is not None else [])


async def connect_with_failover(
    transport: Transport,
    servers: Sequence[ServerAddress],
    update: ClientUpdate,
    round_no: int,
    failed: Optional[List[str]] = None,
) -> str:
    """
    Deliver update to the first server that acknowledges it.

    Returns:
        Id of the server that sent the Ack. Servers after it are never dialed.

    Raises:
        AllServersUnreachable: every server refused, dropped or rejected
    """

    async def attempt(address: ServerAddress) -> None:
        conn = await transport.connect(address, update.client_id, round_no)
        try:
            await conn.send(Envelope.update(update))
            reply = await conn.receive(transport.ack_timeout)
        finally:
            await conn.close()
        if reply.kind is not Kind.ACK:
            code = reply.payload.code if reply.kind is Kind.ERROR else reply.kind.value
            raise UpdateRejected(address.id, code)

    server_id, _ = await _scan(servers, attempt, failed if failed is not None else [])
    logger.info("%s delivered round %d update to %s", update.client_id, round_no, server_id)
    return server_id


async def run_client(
    client_id: str,
    dataset: ClientDataset,
    servers: Sequence[ServerAddress],
    train_cfg: TrainConfig,
    rounds: int,
    transport: Transport,
) -> List[ClientRoundReport]:
    """Run the fetch/train/deliver loop for `rounds` rounds."""
    if rounds < 1:
        raise ValueError(f"rounds must be >= 1, got {rounds}")

    reports: List[ClientRoundReport] = []
    for round_no in range(1, rounds + 1):
        failed: List[str] = []
        fetched_from = delivered_to = error = None
        losses: List[float] = []
        try:
            fetched_from, model = await fetch_with_failover(
                transport, servers, client_id, round_no, failed
            )
            trained = train_local(model.weights, dataset, train_cfg)
            losses = trained.loss_per_epoch
            update = ClientUpdate.from_training(
                client_id, model.round, trained.sample_count, model.weights, trained.final_weights
            )
            delivered_to = await connect_with_failover(transport, servers, update, round_no, failed)
        except AllServersUnreachable as e:
            error = str(e)
            logger.warning("%s skipped round %d: %s", client_id, round_no, e)
        finally:
            transport.client_round_done(client_id, round_no)

        reports.append(ClientRoundReport(
            client_id=client_id,
            round=round_no,
            fetched_from=fetched_from,
            delivered_to=delivered_to,
            loss_per_epoch=losses,
            failed_attempts=failed,
            error=error,
        ))
    return reports
